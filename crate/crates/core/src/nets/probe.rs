use crate::error::{Result, SemiseError};
use crate::ndcore::{softmax, DenseArray, Rng};
use crate::nets::layers::{dropout_mask, relu, relu_backward, Dense};
use crate::nets::{prefixed, prefixed_mut, Params, EMBED_DIM};

pub const DROPOUT_KEEP: f64 = 0.7;
const HIDDEN: usize = 32;

pub enum Mode<'a> {
    /// Dropout active; masks drawn from the generator.
    Train(&'a mut Rng),
    Eval,
}

/// Two ReLU layers, dropout, and a softmax output over severity classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierProbe {
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone)]
pub struct ProbeTrace {
    input: DenseArray,
    h1: DenseArray,
    h2: DenseArray,
    mask: Option<Vec<f64>>,
    dropped: DenseArray,
    pub probs: DenseArray,
}

impl ClassifierProbe {
    pub fn new(classes: usize, rng: &mut Rng) -> Self {
        ClassifierProbe {
            hidden1: Dense::new(EMBED_DIM, HIDDEN, rng),
            hidden2: Dense::new(HIDDEN, HIDDEN, rng),
            output: Dense::new(HIDDEN, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.output.outputs()
    }

    pub fn forward(&self, emb: &DenseArray, mode: Mode<'_>) -> Result<ProbeTrace> {
        let h1 = relu(&self.hidden1.forward(emb)?);
        let h2 = relu(&self.hidden2.forward(&h1)?);
        let (mask, dropped) = match mode {
            Mode::Train(rng) => {
                let mask = dropout_mask(h2.len(), DROPOUT_KEEP, rng);
                let data = h2.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                (Some(mask), DenseArray::new(h2.shape().to_vec(), data)?)
            }
            Mode::Eval => (None, h2.clone()),
        };
        let logits = self.output.forward(&dropped)?;
        let mut probs = logits.clone();
        for i in 0..logits.rows() {
            let p = softmax(logits.row(i))?;
            probs.row_mut(i).copy_from_slice(&p);
        }
        Ok(ProbeTrace {
            input: emb.clone(),
            h1,
            h2,
            mask,
            dropped,
            probs,
        })
    }

    /// Mean cross-entropy against integer labels, with parameter gradients.
    pub fn cross_entropy(&self, trace: &ProbeTrace, labels: &[usize]) -> Result<(f64, ClassifierProbe)> {
        let (b, k) = (trace.probs.rows(), self.classes());
        if labels.len() != b {
            return Err(SemiseError::dimension("cross_entropy", &[labels.len()], &[b]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(SemiseError::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut loss = 0.0;
        let mut dlogits = trace.probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            loss -= trace.probs.row(i)[l].max(1e-300).ln();
            dlogits.row_mut(i)[l] -= 1.0;
        }
        let dlogits = dlogits.scale(1.0 / b as f64);
        let (g_out, d_dropped) = self.output.backward(&trace.dropped, &dlogits);
        let d_h2 = match &trace.mask {
            Some(mask) => {
                let data = d_dropped.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                DenseArray::new(d_dropped.shape().to_vec(), data)?
            }
            None => d_dropped,
        };
        let (g2, d_h1) = self.hidden2.backward(&trace.h1, &relu_backward(&trace.h2, &d_h2));
        let (g1, _) = self.hidden1.backward(&trace.input, &relu_backward(&trace.h1, &d_h1));
        Ok((
            loss / b as f64,
            ClassifierProbe {
                hidden1: g1,
                hidden2: g2,
                output: g_out,
            },
        ))
    }
}

/// Class probabilities `[B, K]`.
pub fn classify(probe: &ClassifierProbe, emb: &DenseArray, mode: Mode<'_>) -> Result<DenseArray> {
    probe.forward(emb, mode).map(|t| t.probs)
}

impl Params for ClassifierProbe {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        let mut v = prefixed("hidden1", self.hidden1.named());
        v.extend(prefixed("hidden2", self.hidden2.named()));
        v.extend(prefixed("output", self.output.named()));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut v = prefixed_mut("hidden1", self.hidden1.named_mut());
        v.extend(prefixed_mut("hidden2", self.hidden2.named_mut()));
        v.extend(prefixed_mut("output", self.output.named_mut()));
        v
    }
}
