use crate::error::Result;
use crate::ndcore::{DenseArray, Rng};
use crate::nets::layers::{l2_normalize_backward, l2_normalize_rows, Dense};
use crate::nets::{prefixed, prefixed_mut, Params, EMBED_DIM};

pub const HEAD_DIM: usize = 16;

/// Dense layer followed by row-wise L2 normalization.
///
/// Serves as both the projection head g(·) and the preference head h(·);
/// the two are separate instances fed from the same encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHead {
    pub dense: Dense,
}

pub type ProjectionHead = NormalizedHead;
pub type PreferenceHead = NormalizedHead;

#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: DenseArray,
    output: DenseArray,
    norms: Vec<f64>,
}

impl NormalizedHead {
    pub fn new(rng: &mut Rng) -> Self {
        NormalizedHead {
            dense: Dense::new(EMBED_DIM, HEAD_DIM, rng),
        }
    }

    pub fn forward(&self, emb: &DenseArray) -> Result<(DenseArray, HeadTrace)> {
        let pre = self.dense.forward(emb)?;
        let (output, norms) = l2_normalize_rows(&pre, "projection head")?;
        Ok((
            output.clone(),
            HeadTrace {
                input: emb.clone(),
                output,
                norms,
            },
        ))
    }

    /// Returns head parameter gradients and the gradient w.r.t. the embedding.
    pub fn backward(&self, trace: &HeadTrace, grad_out: &DenseArray) -> (NormalizedHead, DenseArray) {
        let dpre = l2_normalize_backward(&trace.output, &trace.norms, grad_out);
        let (g, dx) = self.dense.backward(&trace.input, &dpre);
        (NormalizedHead { dense: g }, dx)
    }
}

/// Unit-norm head outputs `[B, 16]`.
pub fn project(head: &NormalizedHead, emb: &DenseArray) -> Result<DenseArray> {
    head.forward(emb).map(|(o, _)| o)
}

impl Params for NormalizedHead {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        prefixed("dense", self.dense.named())
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        prefixed_mut("dense", self.dense.named_mut())
    }
}
