use std::io::Write;

use crate::error::Result;
use crate::evalkit::lf_writer;
use crate::pipeline::EpochLog;

/// The first five columns are the loss log proper; gradient norms follow.
pub const LOSS_CSV_COLUMNS: [&str; 8] = [
    "phase",
    "epoch",
    "loss_total",
    "loss_ntxent",
    "loss_pro",
    "grad_norm_encoder",
    "grad_norm_g",
    "grad_norm_h",
];

pub fn write_loss_csv<W: Write>(w: W, history: &[EpochLog]) -> Result<()> {
    let mut wr = lf_writer(w);
    wr.write_record(LOSS_CSV_COLUMNS)?;
    for h in history {
        wr.write_record([
            h.phase.to_string(),
            h.epoch.to_string(),
            h.loss_total.to_string(),
            h.loss_ntxent.to_string(),
            h.loss_pro.to_string(),
            h.grad_norm_encoder.to_string(),
            h.grad_norm_g.to_string(),
            h.grad_norm_h.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
