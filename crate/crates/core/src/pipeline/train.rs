use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};

use crate::error::{Result, SemiseError};
use crate::losses::{
    combined_loss, margin_contrastive_loss, nt_xent_loss, preference_loss, CombinedWeight, LabeledPairBatch,
    PreferenceBatch, ViewBatch,
};
use crate::ndcore::{DenseArray, Rng};
use crate::nets::{ConvEncoder, Params, PreferenceHead, ProjectionHead, SgdMomentum};
use crate::pipeline::TrainConfig;
use crate::synthdata::{augment, AugmentSpec, Dataset, PreferencePair, SampleRecord};

/// Per-epoch training record. Phase-1 rows carry the margin loss in
/// `loss_total` and zero in the two phase-2 components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub phase: u8,
    /// 1-based within the phase.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ntxent: f64,
    pub loss_pro: f64,
    /// Mean per-step gradient L2 norms.
    pub grad_norm_encoder: f64,
    pub grad_norm_g: f64,
    pub grad_norm_h: f64,
}

/// Full training state: models, optimizer velocities, progress, and history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: ConvEncoder,
    /// Projection head `g`.
    pub g: ProjectionHead,
    /// Preference head `h`.
    pub h: PreferenceHead,
    pub optimizer: SgdMomentum,
    /// Phase currently in progress or last completed (1 or 2).
    pub phase: u8,
    /// Epochs completed within `phase`.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

pub const GROUP_ENCODER: &str = "encoder";
pub const GROUP_G: &str = "g";
pub const GROUP_H: &str = "h";

fn optimizer_for(cfg: &TrainConfig) -> SgdMomentum {
    SgdMomentum::new(cfg.momentum)
        .with_group(GROUP_ENCODER, cfg.lr_encoder)
        .with_group(GROUP_G, cfg.lr_heads)
        .with_group(GROUP_H, cfg.lr_heads)
}

impl Checkpoint {
    /// Freshly initialized models at phase 1, epoch 0.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(cfg.seed, &[0]);
        Ok(Checkpoint {
            config: cfg.clone(),
            encoder: ConvEncoder::new(&mut rng),
            g: ProjectionHead::new(&mut rng),
            h: PreferenceHead::new(&mut rng),
            optimizer: optimizer_for(cfg),
            phase: 1,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.phase == 2 && self.epoch >= self.config.phase2_epochs
    }

    fn round_to_f32(&mut self) {
        self.encoder.round_to_f32();
        self.g.round_to_f32();
        self.h.round_to_f32();
        self.optimizer.round_to_f32();
    }
}

/// Stack `[1, H, W]` images into `[B, 1, H, W]`.
pub fn stack_images(images: &[&DenseArray]) -> Result<DenseArray> {
    let first = images
        .first()
        .ok_or_else(|| SemiseError::Data("empty image batch".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != s.as_slice() {
            return Err(SemiseError::dimension("stack_images", im.shape(), &s));
        }
        data.extend_from_slice(im.data());
    }
    DenseArray::new(vec![images.len(), s[0], s[1], s[2]], data)
}

/// Embeddings `[N, 32]` of `records`, encoded in fixed-size chunks.
pub fn embed_records(encoder: &ConvEncoder, records: &[&SampleRecord]) -> Result<DenseArray> {
    const CHUNK: usize = 256;
    let mut data = Vec::new();
    for chunk in records.chunks(CHUNK) {
        let imgs: Vec<&DenseArray> = chunk.iter().map(|r| &r.image).collect();
        let (emb, _) = encoder.forward(&stack_images(&imgs)?)?;
        data.extend_from_slice(emb.data());
    }
    let dim = data.len() / records.len().max(1);
    DenseArray::new(vec![records.len(), dim], data)
}

pub(crate) fn vstack(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    if a.cols() != b.cols() {
        return Err(SemiseError::dimension("vstack", a.shape(), b.shape()));
    }
    DenseArray::new(vec![a.rows() + b.rows(), a.cols()], [a.data(), b.data()].concat())
}

fn rows(a: &DenseArray, from: usize, to: usize) -> DenseArray {
    let c = a.cols();
    DenseArray::new(vec![to - from, c], a.data()[from * c..to * c].to_vec()).expect("row range in bounds")
}

fn grad_norm<P: Params>(p: &P) -> f64 {
    p.named().iter().map(|(_, t)| t.norm_sq()).sum::<f64>().sqrt()
}

/// Healthy-anchored reference embedding π₀ and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceVector {
    /// Unit-norm `[16]`.
    pub vector: DenseArray,
    pub provenance: &'static str,
}

/// π₀ = L2-normalized mean of `h(f(x))` over `healthy`.
pub fn compute_reference(
    encoder: &ConvEncoder,
    h: &PreferenceHead,
    healthy: &[&SampleRecord],
) -> Result<ReferenceVector> {
    if healthy.is_empty() {
        return Err(SemiseError::Data("reference needs at least one healthy record".into()));
    }
    let (nu, _) = h.forward(&embed_records(encoder, healthy)?)?;
    let mut mean = vec![0.0; nu.cols()];
    for i in 0..nu.rows() {
        for (m, v) in mean.iter_mut().zip(nu.row(i)) {
            *m += v;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(SemiseError::degenerate("compute_reference mean", 0));
    }
    Ok(ReferenceVector {
        vector: DenseArray::vector(mean.into_iter().map(|v| v / norm).collect()),
        provenance: "mean-of-healthy",
    })
}

fn split_by_health(train: &Dataset) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
    train.records.iter().partition(|r| r.is_healthy())
}

/// Phase 1 from scratch through `cfg.phase1_epochs`.
pub fn run_phase1(cfg: &TrainConfig, train: &Dataset) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::init(cfg)?;
    continue_phase1(&mut ckpt, train, cfg.phase1_epochs)?;
    Ok(ckpt)
}

/// Train phase 1 until `until` epochs are complete.
///
/// Each step draws `batch_size / 2` pairs. Even slots are healthy–anomalous
/// pairs (`y = 0`); odd slots pair two members of the same group (`y = 1`),
/// or fall back to `y = 0` when neither group has two members.
pub fn continue_phase1(ckpt: &mut Checkpoint, train: &Dataset, until: usize) -> Result<()> {
    if ckpt.phase != 1 {
        return Err(SemiseError::Contract("checkpoint is past phase 1".into()));
    }
    let (healthy, anomalous) = split_by_health(train);
    if healthy.is_empty() || anomalous.is_empty() {
        return Err(SemiseError::Data(
            "phase 1 needs both healthy and anomalous training records".into(),
        ));
    }
    let groups: Vec<&Vec<&SampleRecord>> = [&healthy, &anomalous].into_iter().filter(|g| g.len() >= 2).collect();
    let cfg = ckpt.config.clone();
    let pairs_per_step = cfg.batch_size / 2;
    let steps = train.records.len().div_ceil(cfg.batch_size);

    while ckpt.epoch < until {
        let e = ckpt.epoch as u64;
        let mut rng = Rng::derive(cfg.seed, &[1, e]);
        let (mut loss_sum, mut nf, mut ng) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let mut left = Vec::with_capacity(pairs_per_step);
            let mut right = Vec::with_capacity(pairs_per_step);
            let mut labels = Vec::with_capacity(pairs_per_step);
            for slot in 0..pairs_per_step {
                let (a, b, y) = if slot % 2 == 1 && !groups.is_empty() {
                    let grp = groups[rng.random_range(0..groups.len())];
                    let i = rng.random_range(0..grp.len());
                    let j = (i + 1 + rng.random_range(0..grp.len() - 1)) % grp.len();
                    (grp[i], grp[j], 1u8)
                } else {
                    let hr = healthy[rng.random_range(0..healthy.len())];
                    let ar = anomalous[rng.random_range(0..anomalous.len())];
                    if rng.random::<bool>() {
                        (hr, ar, 0)
                    } else {
                        (ar, hr, 0)
                    }
                };
                left.push(&a.image);
                right.push(&b.image);
                labels.push(y);
            }
            let n = left.len();
            let imgs: Vec<&DenseArray> = left.into_iter().chain(right).collect();
            let (emb, etrace) = ckpt.encoder.forward(&stack_images(&imgs)?)?;
            let (z, gtrace) = ckpt.g.forward(&emb)?;
            let loss = margin_contrastive_loss(&LabeledPairBatch {
                left: rows(&z, 0, n),
                right: rows(&z, n, 2 * n),
                labels,
                margin: cfg.margin,
            })?;
            let (g_grad, d_emb) = ckpt.g.backward(&gtrace, &vstack(&loss.grad_left, &loss.grad_right)?);
            let f_grad = ckpt.encoder.backward(&etrace, &d_emb);
            ckpt.optimizer.step(GROUP_ENCODER, &mut ckpt.encoder, &f_grad)?;
            ckpt.optimizer.step(GROUP_G, &mut ckpt.g, &g_grad)?;
            loss_sum += loss.value;
            nf += grad_norm(&f_grad);
            ng += grad_norm(&g_grad);
        }
        let s = steps as f64;
        ckpt.epoch += 1;
        ckpt.round_to_f32();
        let log = EpochLog {
            phase: 1,
            epoch: ckpt.epoch,
            loss_total: loss_sum / s,
            loss_ntxent: 0.0,
            loss_pro: 0.0,
            grad_norm_encoder: nf / s,
            grad_norm_g: ng / s,
            grad_norm_h: 0.0,
        };
        if !log.loss_total.is_finite() {
            return Err(SemiseError::NonFinite("phase 1 loss"));
        }
        ckpt.history.push(log);
    }
    Ok(())
}

/// Phase 2 through `cfg.phase2_epochs`, starting from a phase-1 checkpoint.
pub fn run_phase2(ckpt: &Checkpoint, train: &Dataset, pairs: &[PreferencePair]) -> Result<Checkpoint> {
    let mut next = ckpt.clone();
    let until = next.config.phase2_epochs;
    continue_phase2(&mut next, train, pairs, until)?;
    Ok(next)
}

/// Draw index of view `v` (0 or 1) in `epoch`.
fn view_draw(epoch: u64, v: u64) -> u64 {
    (epoch << 1) | v
}

/// Train phase 2 until `until` epochs are complete.
///
/// An epoch visits every anomalous training record once, `batch_size / 2`
/// records per step, each as two augmented views through `g` for NT-Xent.
/// Each step also draws `batch_size / 2` pairs from `pairs` for the
/// preference term through `h`. π₀ is recomputed at the start of each epoch
/// and held fixed within it.
pub fn continue_phase2(ckpt: &mut Checkpoint, train: &Dataset, pairs: &[PreferencePair], until: usize) -> Result<()> {
    if ckpt.phase == 1 {
        if ckpt.epoch < ckpt.config.phase1_epochs {
            return Err(SemiseError::Contract("phase 1 is not finished".into()));
        }
        ckpt.phase = 2;
        ckpt.epoch = 0;
        ckpt.optimizer = optimizer_for(&ckpt.config);
    }
    let cfg = ckpt.config.clone();
    let weight = CombinedWeight::new(cfg.alpha)?;
    let (healthy, anomalous) = split_by_health(train);
    if anomalous.is_empty() {
        return Err(SemiseError::Data("phase 2 needs anomalous training records".into()));
    }
    if pairs.is_empty() {
        return Err(SemiseError::Data("phase 2 needs preference pairs".into()));
    }
    let lookup: std::collections::HashMap<u64, &SampleRecord> = anomalous.iter().map(|r| (r.id, *r)).collect();
    let pair_records: Vec<(&SampleRecord, &SampleRecord, u8)> = pairs
        .iter()
        .map(|p| match (lookup.get(&p.i), lookup.get(&p.j)) {
            (Some(a), Some(b)) => Ok((*a, *b, p.label)),
            _ => Err(SemiseError::Data(format!(
                "pair ({}, {}) names an id missing from the anomalous training records",
                p.i, p.j
            ))),
        })
        .collect::<Result<_>>()?;
    let spec = AugmentSpec::new(Rng::derive(cfg.seed, &[3]).next_u64());
    let chunk = (cfg.batch_size / 2).min(anomalous.len());
    let steps = (anomalous.len() / chunk).max(1);
    let pairs_per_step = cfg.batch_size / 2;

    while ckpt.epoch < until {
        let e = ckpt.epoch as u64;
        let mut rng = Rng::derive(cfg.seed, &[2, e]);
        let pi0 = compute_reference(&ckpt.encoder, &ckpt.h, &healthy)?.vector;
        let mut order: Vec<&SampleRecord> = anomalous.clone();
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 6];
        for s in 0..steps {
            let members = &order[s * chunk..(s + 1) * chunk];
            let views: Vec<DenseArray> = members
                .iter()
                .flat_map(|r| [augment(&spec, r, view_draw(e, 0)), augment(&spec, r, view_draw(e, 1))])
                .collect();
            let drawn: Vec<&(&SampleRecord, &SampleRecord, u8)> = (0..pairs_per_step)
                .map(|_| &pair_records[rng.random_range(0..pair_records.len())])
                .collect();
            let nv = views.len();
            let np = drawn.len();
            let imgs: Vec<&DenseArray> = views
                .iter()
                .chain(drawn.iter().map(|p| &p.0.image))
                .chain(drawn.iter().map(|p| &p.1.image))
                .collect();
            let (emb, etrace) = ckpt.encoder.forward(&stack_images(&imgs)?)?;
            let (z, gtrace) = ckpt.g.forward(&rows(&emb, 0, nv))?;
            let (nu, htrace) = ckpt.h.forward(&rows(&emb, nv, nv + 2 * np))?;
            let nt = nt_xent_loss(&ViewBatch {
                views: z,
                temperature: cfg.tau,
            })?;
            let pro = preference_loss(&PreferenceBatch {
                nu_i: rows(&nu, 0, np),
                nu_j: rows(&nu, np, 2 * np),
                pi0: pi0.clone(),
                labels: drawn.iter().map(|p| p.2).collect(),
            })?;
            let comb = combined_loss(&nt, &pro, weight);
            let (g_grad, d_emb_v) = ckpt.g.backward(&gtrace, &comb.grad_views);
            let (h_grad, d_emb_p) = ckpt.h.backward(&htrace, &vstack(&comb.grad_nu_i, &comb.grad_nu_j)?);
            let f_grad = ckpt.encoder.backward(&etrace, &vstack(&d_emb_v, &d_emb_p)?);
            ckpt.optimizer.step(GROUP_ENCODER, &mut ckpt.encoder, &f_grad)?;
            ckpt.optimizer.step(GROUP_G, &mut ckpt.g, &g_grad)?;
            ckpt.optimizer.step(GROUP_H, &mut ckpt.h, &h_grad)?;
            for (a, v) in acc.iter_mut().zip([
                comb.value,
                comb.nt_xent,
                comb.preference,
                grad_norm(&f_grad),
                grad_norm(&g_grad),
                grad_norm(&h_grad),
            ]) {
                *a += v;
            }
        }
        let s = steps as f64;
        ckpt.epoch += 1;
        ckpt.round_to_f32();
        let log = EpochLog {
            phase: 2,
            epoch: ckpt.epoch,
            loss_total: acc[0] / s,
            loss_ntxent: acc[1] / s,
            loss_pro: acc[2] / s,
            grad_norm_encoder: acc[3] / s,
            grad_norm_g: acc[4] / s,
            grad_norm_h: acc[5] / s,
        };
        if !log.loss_total.is_finite() {
            return Err(SemiseError::NonFinite("phase 2 loss"));
        }
        ckpt.history.push(log);
    }
    Ok(())
}
