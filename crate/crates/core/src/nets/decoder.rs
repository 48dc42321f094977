use crate::error::{Result, SemiseError};
use crate::ndcore::{sigmoid, DenseArray, Rng};
use crate::nets::layers::{relu, relu_backward, TransposedConv2d, TransposedConvCache};
use crate::nets::{prefixed, prefixed_mut, ConvEncoder, EncoderTrace, Params};

/// UNet-style decoder over the encoder's stage outputs.
///
/// ```text
/// e3 [32] ─up1→ 16 ─cat e2→ [32] ─up2→ 8 ─cat e1→ [16] ─up3→ 1 ─σ→ mask
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder {
    pub up: [TransposedConv2d; 3],
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    r1: DenseArray,
    r2: DenseArray,
    caches: [TransposedConvCache; 3],
    /// `[1, B, H, W]` probabilities.
    pub probs: DenseArray,
}

/// Stack two `[C, B, H, W]` maps along the channel axis.
pub(crate) fn concat_channels(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[1..] != sb[1..] {
        return Err(SemiseError::dimension("concat_channels", sa, sb));
    }
    let mut shape = sa.to_vec();
    shape[0] += sb[0];
    DenseArray::new(shape, [a.data(), b.data()].concat())
}

/// Leading `channels` of a `[C, B, H, W]` gradient.
fn leading_channels(x: &DenseArray, channels: usize) -> DenseArray {
    let mut shape = x.shape().to_vec();
    let per = x.len() / shape[0];
    shape[0] = channels;
    DenseArray::new(shape, x.data()[..channels * per].to_vec()).expect("slice of a valid map")
}

impl SegDecoder {
    pub fn new(rng: &mut Rng) -> Self {
        SegDecoder {
            up: [
                TransposedConv2d::new(32, 16, rng),
                TransposedConv2d::new(32, 8, rng),
                TransposedConv2d::new(16, 1, rng),
            ],
        }
    }

    pub fn forward(&self, enc: &EncoderTrace) -> Result<DecoderTrace> {
        let [e1, e2, e3] = &enc.stage_outputs;
        let (y1, c1) = self.up[0].forward(e3)?;
        let r1 = relu(&y1);
        let (y2, c2) = self.up[1].forward(&concat_channels(&r1, e2)?)?;
        let r2 = relu(&y2);
        let (logits, c3) = self.up[2].forward(&concat_channels(&r2, e1)?)?;
        Ok(DecoderTrace {
            r1,
            r2,
            caches: [c1, c2, c3],
            probs: logits.map(sigmoid),
        })
    }

    /// Mean per-pixel binary cross-entropy against `targets` (`[1, B, H, W]`
    /// layout, values 0/1) and decoder gradients.
    pub fn bce(&self, trace: &DecoderTrace, targets: &DenseArray) -> Result<(f64, SegDecoder)> {
        if targets.len() != trace.probs.len() {
            return Err(SemiseError::dimension("segmentation bce", targets.shape(), trace.probs.shape()));
        }
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = trace.probs.clone();
        for ((d, &p), &t) in dlogits.data_mut().iter_mut().zip(trace.probs.data()).zip(targets.data()) {
            let pc = p.clamp(1e-12, 1.0 - 1e-12);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            *d = (p - t) / n;
        }
        let (g3, dcat2) = self.up[2].backward(&trace.caches[2], &dlogits, true);
        let dcat2 = dcat2.expect("requested");
        let dy2 = relu_backward(&trace.r2, &leading_channels(&dcat2, trace.r2.shape()[0]));
        let (g2, dcat1) = self.up[1].backward(&trace.caches[1], &dy2, true);
        let dcat1 = dcat1.expect("requested");
        let dy1 = relu_backward(&trace.r1, &leading_channels(&dcat1, trace.r1.shape()[0]));
        let (g1, _) = self.up[0].backward(&trace.caches[0], &dy1, false);
        Ok((loss / n, SegDecoder { up: [g1, g2, g3] }))
    }
}

/// Mask probabilities `[B, 1, H, W]` from a frozen encoder.
pub fn segment(enc: &ConvEncoder, dec: &SegDecoder, images: &DenseArray) -> Result<DenseArray> {
    if !enc.is_frozen() {
        return Err(SemiseError::Contract("segment requires a frozen encoder".into()));
    }
    let (_, trace) = enc.forward(images)?;
    let probs = dec.forward(&trace)?.probs;
    let s = images.shape().to_vec();
    probs.reshape(s)
}

impl Params for SegDecoder {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        self.up
            .iter()
            .enumerate()
            .flat_map(|(i, t)| prefixed(&format!("up{}", i + 1), t.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        self.up
            .iter_mut()
            .enumerate()
            .flat_map(|(i, t)| prefixed_mut(&format!("up{}", i + 1), t.named_mut()))
            .collect()
    }
}
