use crate::error::{Result, SemiseError};
use crate::ndcore::{cosine_distance, DenseArray};

/// `K × K` confusion counts; entry `(t, p)` counts true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionTally {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionTally {
    pub fn new(classes: usize) -> Self {
        ConfusionTally {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(SemiseError::dimension("confusion tally", &[truth.len()], &[predicted.len()]));
        }
        let mut t = ConfusionTally::new(classes);
        for (&a, &b) in truth.iter().zip(predicted) {
            t.add(a, b)?;
        }
        Ok(t)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(SemiseError::Data(format!(
                "class pair ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Rows are true classes.
    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro-averaged `(F1, recall)`. Per-class precision and recall take 0/0 as
/// 0, so a class never true and never predicted contributes 0 to both means.
pub fn f1_recall_macro(tally: &ConfusionTally) -> Result<(f64, f64)> {
    if tally.total() == 0 {
        return Err(SemiseError::Data("empty confusion tally".into()));
    }
    let k = tally.classes();
    let (mut f1_sum, mut rec_sum) = (0.0, 0.0);
    for c in 0..k {
        let tp = tally.get(c, c);
        let support: u64 = (0..k).map(|p| tally.get(c, p)).sum();
        let predicted: u64 = (0..k).map(|t| tally.get(t, c)).sum();
        let recall = ratio(tp, support);
        let precision = ratio(tp, predicted);
        rec_sum += recall;
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok((f1_sum / k as f64, rec_sum / k as f64))
}

/// Mean absolute difference between true and predicted ordinal levels.
pub fn maee(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(SemiseError::dimension("maee", &[truth.len()], &[predicted.len()]));
    }
    if truth.is_empty() {
        return Err(SemiseError::Data("maee of zero samples".into()));
    }
    let total: usize = truth.iter().zip(predicted).map(|(&a, &b)| a.abs_diff(b)).sum();
    Ok(total as f64 / truth.len() as f64)
}

/// `(IoU, DICE)` of two binary masks; both are 1 when both masks are empty.
pub fn iou_dice(pred: &DenseArray, truth: &DenseArray) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(SemiseError::dimension("iou_dice", pred.shape(), truth.shape()));
    }
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        if !(p == 0.0 || p == 1.0) || !(t == 0.0 || t == 1.0) {
            return Err(SemiseError::Data(format!("mask value at index {i} is not 0 or 1")));
        }
        let (p, t) = (p == 1.0, t == 1.0);
        a += p as u64;
        b += t as u64;
        inter += (p && t) as u64;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let union = a + b - inter;
    Ok((inter as f64 / union as f64, 2.0 * inter as f64 / (a + b) as f64))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(SemiseError::dimension("spearman", &[x.len()], &[y.len()]));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SemiseError::UndefinedCorrelation("one of the ranked variables is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman ρ between severity and cosine distance of each embedding row to `pi0`.
pub fn ordering_diagnostic(embeddings: &DenseArray, severities: &[u8], pi0: &DenseArray) -> Result<f64> {
    if embeddings.rows() != severities.len() {
        return Err(SemiseError::dimension("ordering_diagnostic", embeddings.shape(), &[severities.len()]));
    }
    let first = severities.first().copied();
    if severities.len() < 3 || severities.iter().all(|&s| Some(s) == first) {
        return Err(SemiseError::Data(
            "ordering needs at least 3 samples with 2 distinct severities".into(),
        ));
    }
    let d = (0..embeddings.rows())
        .map(|i| cosine_distance(embeddings.row(i), pi0.data()))
        .collect::<Result<Vec<f64>>>()?;
    let s: Vec<f64> = severities.iter().map(|&v| v as f64).collect();
    spearman(&s, &d).map_err(|e| match e {
        SemiseError::UndefinedCorrelation(_) => {
            SemiseError::UndefinedCorrelation("all distances to the reference are equal".into())
        }
        other => other,
    })
}
