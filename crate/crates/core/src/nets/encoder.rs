use crate::error::{Result, SemiseError};
use crate::ndcore::{DenseArray, Rng};
use crate::nets::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, ConvCache};
use crate::nets::{prefixed, prefixed_mut, Params};

pub const EMBED_DIM: usize = 32;
const WIDTHS: [usize; 4] = [1, 8, 16, 32];

/// Fixed input standardization `(x − mean) / scale` applied before stage 1.
pub const INPUT_MEAN: f64 = 0.25;
pub const INPUT_SCALE: f64 = 0.2;

/// Three stride-2 convolution stages (8 → 16 → 32 channels) with ReLU,
/// followed by global average pooling into a 32-wide embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub stages: [Conv2d; 3],
    frozen: bool,
}

/// Activations from one encoder pass. The per-stage maps double as the
/// skip connections of the segmentation decoder.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Post-ReLU stage outputs in `[C, B, H, W]` layout.
    pub stage_outputs: [DenseArray; 3],
    caches: [ConvCache; 3],
}

impl ConvEncoder {
    pub fn new(rng: &mut Rng) -> Self {
        ConvEncoder {
            stages: std::array::from_fn(|i| Conv2d::new(WIDTHS[i], WIDTHS[i + 1], rng)),
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Images `[B, 1, H, W]` with `H`, `W` divisible by 8.
    pub fn forward(&self, images: &DenseArray) -> Result<(DenseArray, EncoderTrace)> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(SemiseError::dimension("encode", s, &[s.first().copied().unwrap_or(0), 1, 8, 8]));
        }
        // With one channel, [B, 1, H, W] and [1, B, H, W] share a buffer layout.
        let mut x = images
            .map(|v| (v - INPUT_MEAN) / INPUT_SCALE)
            .reshape(vec![1, s[0], s[2], s[3]])?;
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for conv in &self.stages {
            let (z, cache) = conv.forward(&x)?;
            x = relu(&z);
            outs.push(x.clone());
            caches.push(cache);
        }
        let emb = global_avg_pool(&x);
        Ok((
            emb,
            EncoderTrace {
                stage_outputs: outs.try_into().unwrap_or_else(|_| unreachable!()),
                caches: caches.try_into().unwrap_or_else(|_| unreachable!()),
            },
        ))
    }

    /// Parameter gradients from the gradient w.r.t. the embedding.
    pub fn backward(&self, trace: &EncoderTrace, grad_emb: &DenseArray) -> ConvEncoder {
        let mut dz = relu_backward(
            &trace.stage_outputs[2],
            &global_avg_pool_backward(trace.stage_outputs[2].shape(), grad_emb),
        );
        let mut grads: Vec<Conv2d> = Vec::with_capacity(3);
        for i in (0..3).rev() {
            let (g, dx) = self.stages[i].backward(&trace.caches[i], &dz, i > 0);
            grads.push(g);
            if let Some(dx) = dx {
                dz = relu_backward(&trace.stage_outputs[i - 1], &dx);
            }
        }
        grads.reverse();
        ConvEncoder {
            stages: grads.try_into().unwrap_or_else(|_| unreachable!()),
            frozen: false,
        }
    }
}

/// Embeddings `[B, 32]` for a batch of images.
pub fn encode(enc: &ConvEncoder, images: &DenseArray) -> Result<DenseArray> {
    enc.forward(images).map(|(e, _)| e)
}

impl Params for ConvEncoder {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("conv{}", i + 1), c.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| prefixed_mut(&format!("conv{}", i + 1), c.named_mut()))
            .collect()
    }

    fn trainable(&self) -> bool {
        !self.frozen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{dot, finite_diff_check_subspace};

    /// Tolerance for multi-layer chains; single layers use 1e-5.
    const COMPOSITE_TOL: f64 = 1e-4;

    #[test]
    fn mean_grey_image_gives_zero_embedding() {
        // Standardizes to all zeros; biases start at zero.
        let enc = ConvEncoder::new(&mut Rng::new(1));
        let emb = encode(&enc, &DenseArray::filled(&[2, 1, 16, 16], INPUT_MEAN)).unwrap();
        assert_eq!(emb.shape(), &[2, EMBED_DIM]);
        assert!(emb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let img = DenseArray::uniform(&[1, 1, 16, 16], 1.0, &mut Rng::new(9));
        let a = encode(&ConvEncoder::new(&mut Rng::new(5)), &img).unwrap();
        let b = encode(&ConvEncoder::new(&mut Rng::new(5)), &img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_bad_sizes() {
        let enc = ConvEncoder::new(&mut Rng::new(1));
        assert!(encode(&enc, &DenseArray::zeros(&[1, 1, 12, 16])).is_err());
        assert!(encode(&enc, &DenseArray::zeros(&[1, 2, 16, 16])).is_err());
    }

    fn near_kink(trace: &EncoderTrace, enc: &ConvEncoder, images: &DenseArray) -> bool {
        // Recompute pre-activations and look for values within reach of the FD step.
        let s = images.shape();
        let mut x = images.map(|v| (v - INPUT_MEAN) / INPUT_SCALE).reshape(vec![1, s[0], s[2], s[3]]).unwrap();
        for (conv, out) in enc.stages.iter().zip(&trace.stage_outputs) {
            let (z, _) = conv.forward(&x).unwrap();
            if z.data().iter().any(|v| v.abs() < 1e-4) {
                return true;
            }
            x = out.clone();
        }
        false
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut checked = 0;
        for seed in 0..40u64 {
            let mut rng = Rng::new(seed);
            let mut enc = ConvEncoder::new(&mut rng);
            for st in enc.stages.iter_mut() {
                // Positive biases keep units alive; dead channels produce sub-1e-8
                // gradients that sit below the checker's relative-error floor.
                st.bias = DenseArray::uniform(st.bias.shape(), 0.1, &mut rng).map(|v| v + 0.3);
            }
            let images = DenseArray::uniform(&[2, 1, 8, 8], 1.0, &mut rng).map(|v| v.abs());
            let (_, trace) = enc.forward(&images).unwrap();
            if near_kink(&trace, &enc, &images) {
                continue;
            }
            let w = DenseArray::uniform(&[2, EMBED_DIM], 1.0, &mut rng);
            for stage in 0..3 {
                let rep = finite_diff_check_subspace(
                    |p| {
                        let mut e = enc.clone();
                        e.stages[stage].weight = p.clone();
                        let (emb, tr) = e.forward(&images).unwrap();
                        (dot(emb.data(), w.data()), e.backward(&tr, &w).stages[stage].weight.clone())
                    },
                    &enc.stages[stage].weight,
                    8,
                    &mut rng,
                    COMPOSITE_TOL,
                );
                assert!(rep.passed, "seed {seed} stage {stage}: {rep:?}");
            }
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} kink-free instances");
    }
}
