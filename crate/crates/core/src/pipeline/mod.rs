//! Two-phase training: healthy/anomalous discrimination, then combined
//! NT-Xent and preference optimization, with checkpointing.

mod checkpoint;
mod config;
mod history;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use history::{write_loss_csv, LOSS_CSV_COLUMNS};
pub use config::{parse_key_values, TrainConfig, CONFIG_KEYS};
pub use train::{
    compute_reference, continue_phase1, continue_phase2, embed_records, run_phase1, run_phase2, stack_images,
    Checkpoint, EpochLog, ReferenceVector, GROUP_ENCODER, GROUP_G, GROUP_H,
};

use crate::error::Result;
use crate::synthdata::{sample_pairs, split_dataset, Dataset, PreferencePair, Split};

/// A dataset split plus the training and evaluation preference pairs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Split,
    pub train_pairs: Vec<PreferencePair>,
    pub eval_pairs: Vec<PreferencePair>,
}

/// Split by `cfg.data_seed`; training pairs come from the training split,
/// evaluation pairs from the test split.
pub fn prepare(cfg: &TrainConfig, data: &Dataset) -> Result<Prepared> {
    let split = split_dataset(data, cfg.train_frac, cfg.val_frac, cfg.data_seed)?;
    let train_pairs = sample_pairs(&split.train.records, cfg.train_pairs, cfg.data_seed)?;
    let eval_pairs = sample_pairs(&split.test.records, cfg.eval_pairs, cfg.data_seed ^ 0xe7a1)?;
    Ok(Prepared {
        split,
        train_pairs,
        eval_pairs,
    })
}

/// Both phases from scratch on the training split.
pub fn train_full(cfg: &TrainConfig, prepared: &Prepared) -> Result<Checkpoint> {
    let p1 = run_phase1(cfg, &prepared.split.train)?;
    run_phase2(&p1, &prepared.split.train, &prepared.train_pairs)
}

/// Continue training where `ckpt` left off, running at most `max_epochs`
/// further epochs across both phases (all remaining epochs if `None`).
pub fn advance(ckpt: &mut Checkpoint, prepared: &Prepared, max_epochs: Option<usize>) -> Result<()> {
    let mut budget = max_epochs.unwrap_or(usize::MAX);
    let train = &prepared.split.train;
    if ckpt.phase == 1 {
        let target = ckpt.config.phase1_epochs.min(ckpt.epoch.saturating_add(budget));
        let before = ckpt.epoch;
        continue_phase1(ckpt, train, target)?;
        budget -= ckpt.epoch - before;
        if budget == 0 {
            return Ok(());
        }
    }
    let current = if ckpt.phase == 2 { ckpt.epoch } else { 0 };
    let target = ckpt.config.phase2_epochs.min(current.saturating_add(budget));
    continue_phase2(ckpt, train, &prepared.train_pairs, target)
}
