use rand::seq::SliceRandom;

use crate::error::{Result, SemiseError};
use crate::evalkit::metrics::{f1_recall_macro, iou_dice, maee, ordering_diagnostic, ConfusionTally};
use crate::ndcore::{cosine_distance, DenseArray, Rng};
use crate::nets::{classify, segment, ClassifierProbe, ConvEncoder, Mode, PreferenceHead, SegDecoder, SgdMomentum};
use crate::pipeline::{compute_reference, embed_records, stack_images, TrainConfig};
use crate::synthdata::{Dataset, PreferencePair, SampleRecord};

fn frozen(encoder: &ConvEncoder) -> ConvEncoder {
    let mut e = encoder.clone();
    e.freeze();
    e
}

/// Per-feature mean and standard deviation of the probe's training embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DenseArray) -> Self {
        let (n, d) = (x.rows() as f64, x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Standardizer {
            mean,
            std: var.into_iter().map(|v| v.sqrt().max(1e-8)).collect(),
        }
    }

    pub fn apply(&self, x: &DenseArray) -> DenseArray {
        let mut out = x.clone();
        for i in 0..x.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Outcome of the severity classification probe on held-out records.
#[derive(Debug, Clone)]
pub struct ClassifyOutcome {
    pub tally: ConfusionTally,
    pub f1_macro: f64,
    pub recall_macro: f64,
    pub maee: f64,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

/// Train a classifier probe on frozen embeddings of `train`, score `test`.
pub fn evaluate_classification(
    cfg: &TrainConfig,
    encoder: &ConvEncoder,
    train: &Dataset,
    test: &Dataset,
) -> Result<ClassifyOutcome> {
    if train.records.is_empty() || test.records.is_empty() {
        return Err(SemiseError::Data("classification needs train and test records".into()));
    }
    let enc = frozen(encoder);
    let tr: Vec<&SampleRecord> = train.records.iter().collect();
    let te: Vec<&SampleRecord> = test.records.iter().collect();
    let raw = embed_records(&enc, &tr)?;
    let scaler = Standardizer::fit(&raw);
    let x_train = scaler.apply(&raw);
    let y_train: Vec<usize> = tr.iter().map(|r| r.severity as usize).collect();

    let mut probe = ClassifierProbe::new(train.classes, &mut Rng::derive(cfg.seed, &[4]));
    let mut opt = SgdMomentum::new(cfg.momentum).with_group("probe", cfg.probe_lr);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    for e in 0..cfg.probe_epochs as u64 {
        let mut rng = Rng::derive(cfg.seed, &[5, e]);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = x_train.gather_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();
            let trace = probe.forward(&x, Mode::Train(&mut rng))?;
            let (_, grads) = probe.cross_entropy(&trace, &y)?;
            opt.step("probe", &mut probe, &grads)?;
        }
    }

    let probs = classify(&probe, &scaler.apply(&embed_records(&enc, &te)?), Mode::Eval)?;
    let predicted: Vec<usize> = (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect();
    let truth: Vec<usize> = te.iter().map(|r| r.severity as usize).collect();
    let tally = ConfusionTally::from_predictions(test.classes, &truth, &predicted)?;
    let (f1_macro, recall_macro) = f1_recall_macro(&tally)?;
    Ok(ClassifyOutcome {
        f1_macro,
        recall_macro,
        maee: maee(&truth, &predicted)?,
        tally,
        truth,
        predicted,
    })
}

/// Outcome of the segmentation probe on held-out lesion images.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    /// Per-image means.
    pub iou: f64,
    pub dice: f64,
    /// `(id, iou, dice)` per evaluated image.
    pub per_image: Vec<(u64, f64, f64)>,
    pub decoder: SegDecoder,
}

fn mask_batch(records: &[&SampleRecord]) -> Result<DenseArray> {
    let masks: Vec<&DenseArray> = records.iter().map(|r| &r.mask).collect();
    let (h, w) = (masks[0].shape()[0], masks[0].shape()[1]);
    let data: Vec<f64> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    DenseArray::new(vec![1, records.len(), h, w], data)
}

/// Fit the segmentation decoder on every `train` record with the encoder
/// frozen, then score thresholded masks on `test` records with a lesion.
pub fn evaluate_segmentation(
    cfg: &TrainConfig,
    encoder: &ConvEncoder,
    train: &Dataset,
    test: &Dataset,
) -> Result<SegmentOutcome> {
    let enc = frozen(encoder);
    let tr: Vec<&SampleRecord> = train.records.iter().collect();
    let te: Vec<&SampleRecord> = test.records.iter().filter(|r| !r.is_healthy()).collect();
    if tr.is_empty() || te.is_empty() {
        return Err(SemiseError::Data("segmentation needs training records and held-out lesions".into()));
    }
    let mut dec = SegDecoder::new(&mut Rng::derive(cfg.seed, &[6]));
    let mut opt = SgdMomentum::new(cfg.momentum).with_group("decoder", cfg.seg_lr);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    for e in 0..cfg.seg_epochs as u64 {
        order.shuffle(&mut Rng::derive(cfg.seed, &[7, e]));
        for batch in order.chunks(cfg.batch_size) {
            let recs: Vec<&SampleRecord> = batch.iter().map(|&i| tr[i]).collect();
            let imgs: Vec<&DenseArray> = recs.iter().map(|r| &r.image).collect();
            let (_, etrace) = enc.forward(&stack_images(&imgs)?)?;
            let dtrace = dec.forward(&etrace)?;
            let (_, grads) = dec.bce(&dtrace, &mask_batch(&recs)?)?;
            opt.step("decoder", &mut dec, &grads)?;
        }
    }

    let mut per_image = Vec::with_capacity(te.len());
    for chunk in te.chunks(256) {
        let imgs: Vec<&DenseArray> = chunk.iter().map(|r| &r.image).collect();
        let probs = segment(&enc, &dec, &stack_images(&imgs)?)?;
        let hw = chunk[0].mask.len();
        for (k, r) in chunk.iter().enumerate() {
            let pred: Vec<f64> = probs.data()[k * hw..(k + 1) * hw]
                .iter()
                .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
                .collect();
            let (iou, dice) = iou_dice(&DenseArray::new(r.mask.shape().to_vec(), pred)?, &r.mask)?;
            per_image.push((r.id, iou, dice));
        }
    }
    let n = per_image.len() as f64;
    Ok(SegmentOutcome {
        iou: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        dice: per_image.iter().map(|p| p.2).sum::<f64>() / n,
        per_image,
        decoder: dec,
    })
}

/// Severity ordering of held-out anomalies around the healthy reference.
#[derive(Debug, Clone)]
pub struct OrderingOutcome {
    pub spearman: f64,
    /// Fraction of evaluation pairs whose more severe member lies farther from π₀.
    pub pair_accuracy: f64,
    pub pi0: DenseArray,
}

pub fn evaluate_ordering(
    encoder: &ConvEncoder,
    h: &PreferenceHead,
    train: &Dataset,
    test: &Dataset,
    eval_pairs: &[PreferencePair],
) -> Result<OrderingOutcome> {
    let healthy: Vec<&SampleRecord> = train.records.iter().filter(|r| r.is_healthy()).collect();
    let pi0 = compute_reference(encoder, h, &healthy)?.vector;
    let anomalous: Vec<&SampleRecord> = test.records.iter().filter(|r| !r.is_healthy()).collect();
    if anomalous.is_empty() {
        return Err(SemiseError::Data("no held-out anomalies to order".into()));
    }
    let (nu, _) = h.forward(&embed_records(encoder, &anomalous)?)?;
    let severities: Vec<u8> = anomalous.iter().map(|r| r.severity).collect();
    let spearman = ordering_diagnostic(&nu, &severities, &pi0)?;

    let dist: std::collections::HashMap<u64, f64> = anomalous
        .iter()
        .enumerate()
        .map(|(k, r)| Ok((r.id, cosine_distance(nu.row(k), pi0.data())?)))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for p in eval_pairs {
        let (Some(di), Some(dj)) = (dist.get(&p.i), dist.get(&p.j)) else {
            return Err(SemiseError::Data(format!("evaluation pair ({}, {}) not in held-out anomalies", p.i, p.j)));
        };
        correct += usize::from((di > dj) == (p.label == 1));
    }
    Ok(OrderingOutcome {
        spearman,
        pair_accuracy: if eval_pairs.is_empty() {
            0.0
        } else {
            correct as f64 / eval_pairs.len() as f64
        },
        pi0,
    })
}
