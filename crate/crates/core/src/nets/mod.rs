//! Desk-scale networks with hand-written backward passes: the convolutional
//! encoder f(·), the normalized heads g(·)/h(·), the classifier probe, the
//! segmentation decoder, and SGD with momentum.

mod decoder;
mod encoder;
mod heads;
pub mod layers;
mod optim;
mod probe;

pub use decoder::{segment, DecoderTrace, SegDecoder};
pub use encoder::{encode, ConvEncoder, EncoderTrace, EMBED_DIM, INPUT_MEAN, INPUT_SCALE};
pub(crate) use decoder::concat_channels;
pub use heads::{project, HeadTrace, NormalizedHead, PreferenceHead, ProjectionHead, HEAD_DIM};
pub use optim::{sgd_step, SgdMomentum, DEFAULT_MOMENTUM};
pub use probe::{classify, ClassifierProbe, Mode, ProbeTrace, DROPOUT_KEEP};

use crate::ndcore::DenseArray;

/// Named parameter access shared by every model and its gradient container.
///
/// A model's gradients use the model's own type, so `named()` on the two
/// lines up entry for entry.
pub trait Params {
    fn named(&self) -> Vec<(String, &DenseArray)>;
    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)>;

    fn trainable(&self) -> bool {
        true
    }

    fn round_to_f32(&mut self) {
        for (_, p) in self.named_mut() {
            p.round_to_f32();
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a DenseArray)>) -> Vec<(String, &'a DenseArray)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut DenseArray)>,
) -> Vec<(String, &'a mut DenseArray)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}
