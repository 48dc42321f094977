//! Training objectives with analytic gradients w.r.t. every embedding input.
//!
//! * [`margin_contrastive_loss`]: pairwise margin loss on cosine distance,
//!   `(1/2N) Σ [y D² + (1 − y) max(0, m − D)²]`.
//! * [`nt_xent_loss`]: normalized temperature-scaled cross entropy over `2N`
//!   views, averaged over all `2N` anchors.
//! * [`preference_loss`]: binary cross entropy on
//!   `σ(d_cos(ν_i, π₀) − d_cos(ν_j, π₀))`, mean over pairs.
//! * [`combined_loss`]: `α · NT-Xent + (1 − α) · preference`.

use crate::error::{Result, SemiseError};
use crate::ndcore::{
    cosine_distance, cosine_distance_backward, cosine_similarity, cosine_similarity_backward,
    log_sum_exp, sigmoid, softmax, DenseArray,
};

/// Probability clamp applied before the logarithms of the preference BCE.
pub const BCE_CLAMP: f64 = 1e-12;

fn check_rows(context: &'static str, rows: &DenseArray) -> Result<()> {
    if rows.rank() != 2 {
        return Err(SemiseError::dimension(context, rows.shape(), &[0, 0]));
    }
    for i in 0..rows.rows() {
        let n: f64 = rows.row(i).iter().map(|v| v * v).sum();
        if !n.is_finite() {
            return Err(SemiseError::NonFinite(context));
        }
        if n == 0.0 {
            return Err(SemiseError::degenerate(context, i));
        }
    }
    Ok(())
}

fn check_labels(context: &str, labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(SemiseError::Data(format!(
            "{context}: {} labels for {n} pairs",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().position(|&y| y > 1) {
        return Err(SemiseError::Data(format!(
            "{context}: label {} at pair {bad} is not 0/1",
            labels[bad]
        )));
    }
    Ok(())
}

/// Pairs of embeddings with similar (1) / dissimilar (0) labels.
#[derive(Debug, Clone)]
pub struct LabeledPairBatch {
    pub left: DenseArray,
    pub right: DenseArray,
    pub labels: Vec<u8>,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub grad_left: DenseArray,
    pub grad_right: DenseArray,
}

pub fn margin_contrastive_loss(batch: &LabeledPairBatch) -> Result<PairLoss> {
    const CTX: &str = "margin_contrastive_loss";
    if !batch.left.same_shape(&batch.right) {
        return Err(SemiseError::dimension(CTX, batch.left.shape(), batch.right.shape()));
    }
    if !(batch.margin > 0.0) {
        return Err(SemiseError::Config(format!("margin must be > 0, got {}", batch.margin)));
    }
    check_rows(CTX, &batch.left)?;
    check_rows(CTX, &batch.right)?;
    let n = batch.left.rows();
    check_labels(CTX, &batch.labels, n)?;

    let scale = 1.0 / (2.0 * n as f64);
    let mut value = 0.0;
    let mut grad_left = DenseArray::zeros(batch.left.shape());
    let mut grad_right = DenseArray::zeros(batch.right.shape());
    for i in 0..n {
        let (u, v) = (batch.left.row(i), batch.right.row(i));
        let d = cosine_distance(u, v).map_err(|_| SemiseError::degenerate(CTX, i))?;
        let (term, dterm) = if batch.labels[i] == 1 {
            (d * d, 2.0 * d)
        } else {
            let gap = (batch.margin - d).max(0.0);
            (gap * gap, -2.0 * gap)
        };
        value += term;
        if dterm != 0.0 {
            let (gu, gv) = cosine_distance_backward(u, v, scale * dterm)?;
            grad_left.row_mut(i).copy_from_slice(&gu);
            grad_right.row_mut(i).copy_from_slice(&gv);
        }
    }
    Ok(PairLoss {
        value: value * scale,
        grad_left,
        grad_right,
    })
}

/// `2N` rows; rows `2k` and `2k + 1` are two views of sample `k`.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub views: DenseArray,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct ViewLoss {
    pub value: f64,
    pub grad_views: DenseArray,
}

pub fn nt_xent_loss(batch: &ViewBatch) -> Result<ViewLoss> {
    const CTX: &str = "nt_xent_loss";
    check_rows(CTX, &batch.views)?;
    let rows = batch.views.rows();
    if rows < 2 || rows % 2 != 0 {
        return Err(SemiseError::Data(format!("{CTX}: need an even row count ≥ 2, got {rows}")));
    }
    if !(batch.temperature > 0.0) {
        return Err(SemiseError::Config(format!(
            "temperature must be > 0, got {}",
            batch.temperature
        )));
    }
    let tau = batch.temperature;
    let z = &batch.views;

    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        for k in (i + 1)..rows {
            let s = cosine_similarity(z.row(i), z.row(k))?;
            sim[i * rows + k] = s;
            sim[k * rows + i] = s;
        }
    }

    // dL/dsim accumulated symmetrically; each unordered pair appears in two anchors.
    let scale = 1.0 / rows as f64;
    let mut dsim = vec![0.0; rows * rows];
    let mut value = 0.0;
    let mut logits = Vec::with_capacity(rows - 1);
    for i in 0..rows {
        let pos = i ^ 1;
        logits.clear();
        logits.extend((0..rows).filter(|&k| k != i).map(|k| sim[i * rows + k] / tau));
        let lse = log_sum_exp(&logits);
        value += lse - sim[i * rows + pos] / tau;
        let probs = softmax(&logits)?;
        for (p, k) in probs.iter().zip((0..rows).filter(|&k| k != i)) {
            let target = if k == pos { 1.0 } else { 0.0 };
            dsim[i * rows + k] += scale * (p - target) / tau;
        }
    }

    let mut grad_views = DenseArray::zeros(z.shape());
    for i in 0..rows {
        for k in (i + 1)..rows {
            let g = dsim[i * rows + k] + dsim[k * rows + i];
            if g == 0.0 {
                continue;
            }
            let (gi, gk) = cosine_similarity_backward(z.row(i), z.row(k), g)?;
            for (a, b) in grad_views.row_mut(i).iter_mut().zip(&gi) {
                *a += b;
            }
            for (a, b) in grad_views.row_mut(k).iter_mut().zip(&gk) {
                *a += b;
            }
        }
    }
    Ok(ViewLoss {
        value: value * scale,
        grad_views,
    })
}

/// Anomalous embedding pairs against a healthy reference.
///
/// `labels[p] == 1` means `nu_i[p]` is the more severe member.
#[derive(Debug, Clone)]
pub struct PreferenceBatch {
    pub nu_i: DenseArray,
    pub nu_j: DenseArray,
    pub pi0: DenseArray,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct PreferenceLoss {
    pub value: f64,
    pub grad_nu_i: DenseArray,
    pub grad_nu_j: DenseArray,
    pub grad_pi0: DenseArray,
}

pub fn preference_loss(batch: &PreferenceBatch) -> Result<PreferenceLoss> {
    const CTX: &str = "preference_loss";
    if !batch.nu_i.same_shape(&batch.nu_j) {
        return Err(SemiseError::dimension(CTX, batch.nu_i.shape(), batch.nu_j.shape()));
    }
    check_rows(CTX, &batch.nu_i)?;
    check_rows(CTX, &batch.nu_j)?;
    let d = batch.nu_i.cols();
    if batch.pi0.len() != d {
        return Err(SemiseError::dimension(CTX, batch.pi0.shape(), &[d]));
    }
    let pi0 = batch.pi0.data();
    if pi0.iter().all(|&v| v == 0.0) {
        return Err(SemiseError::degenerate("preference_loss reference", 0));
    }
    let p_count = batch.nu_i.rows();
    check_labels(CTX, &batch.labels, p_count)?;

    let scale = 1.0 / p_count as f64;
    let mut value = 0.0;
    let mut grad_nu_i = DenseArray::zeros(batch.nu_i.shape());
    let mut grad_nu_j = DenseArray::zeros(batch.nu_j.shape());
    let mut grad_pi0 = DenseArray::zeros(batch.pi0.shape());
    for p in 0..p_count {
        let (a, b) = (batch.nu_i.row(p), batch.nu_j.row(p));
        let di = cosine_distance(a, pi0)?;
        let dj = cosine_distance(b, pi0)?;
        let raw = sigmoid(di - dj);
        let prob = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let y = f64::from(batch.labels[p]);
        value -= y * prob.ln() + (1.0 - y) * (1.0 - prob).ln();
        // d/dΔ of BCE(σ(Δ), y) is σ(Δ) − y; the clamp has zero slope outside its range.
        let dz = if raw == prob { scale * (raw - y) } else { 0.0 };
        if dz == 0.0 {
            continue;
        }
        let (ga, gpa) = cosine_distance_backward(a, pi0, dz)?;
        let (gb, gpb) = cosine_distance_backward(b, pi0, -dz)?;
        grad_nu_i.row_mut(p).copy_from_slice(&ga);
        grad_nu_j.row_mut(p).copy_from_slice(&gb);
        for ((g, x), y) in grad_pi0.data_mut().iter_mut().zip(&gpa).zip(&gpb) {
            *g += x + y;
        }
    }
    Ok(PreferenceLoss {
        value: value * scale,
        grad_nu_i,
        grad_nu_j,
        grad_pi0,
    })
}

/// Mixing weight between the self-supervised and preference objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedWeight {
    alpha: f64,
}

impl CombinedWeight {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SemiseError::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(CombinedWeight { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub nt_xent: f64,
    pub preference: f64,
    pub grad_views: DenseArray,
    pub grad_nu_i: DenseArray,
    pub grad_nu_j: DenseArray,
    pub grad_pi0: DenseArray,
}

pub fn combined_loss(nt: &ViewLoss, pro: &PreferenceLoss, w: CombinedWeight) -> CombinedLoss {
    let a = w.alpha;
    let b = 1.0 - a;
    CombinedLoss {
        value: a * nt.value + b * pro.value,
        nt_xent: nt.value,
        preference: pro.value,
        grad_views: nt.grad_views.scale(a),
        grad_nu_i: pro.grad_nu_i.scale(b),
        grad_nu_j: pro.grad_nu_j.scale(b),
        grad_pi0: pro.grad_pi0.scale(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{finite_diff_check, Rng};
    use rand::Rng as _;

    const LN2: f64 = std::f64::consts::LN_2;

    fn rows(data: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&data.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn pair(left: &[f64], right: &[f64], y: u8, margin: f64) -> LabeledPairBatch {
        LabeledPairBatch {
            left: rows(&[left]),
            right: rows(&[right]),
            labels: vec![y],
            margin,
        }
    }

    #[test]
    fn margin_examples() {
        let l = margin_contrastive_loss(&pair(&[1.0, 0.0], &[1.0, 0.0], 1, 1.0)).unwrap();
        assert_eq!(l.value, 0.0);
        let l = margin_contrastive_loss(&pair(&[1.0, 0.0], &[0.0, 1.0], 0, 0.5)).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad_left.norm_sq(), 0.0);
        let l = margin_contrastive_loss(&pair(&[0.3, 0.4], &[0.3, 0.4], 0, 1.0)).unwrap();
        assert!((l.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn margin_zero_row_reports_index() {
        let b = LabeledPairBatch {
            left: rows(&[&[1.0, 0.0], &[0.0, 0.0]]),
            right: rows(&[&[1.0, 0.0], &[1.0, 1.0]]),
            labels: vec![1, 0],
            margin: 1.0,
        };
        match margin_contrastive_loss(&b) {
            Err(SemiseError::DegenerateInput { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Direct scalar enumeration of the NT-Xent anchor terms.
    fn nt_xent_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let n2 = z.len();
        let mut total = 0.0;
        for i in 0..n2 {
            let j = if i % 2 == 0 { i + 1 } else { i - 1 };
            let num = (cos(&z[i], &z[j]) / tau).exp();
            let den: f64 = (0..n2)
                .filter(|&k| k != i)
                .map(|k| (cos(&z[i], &z[k]) / tau).exp())
                .sum();
            total += -(num / den).ln();
        }
        total / n2 as f64
    }

    #[test]
    fn nt_xent_single_pair_is_zero() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let views = DenseArray::uniform(&[2, 5], 1.0, &mut rng);
            let l = nt_xent_loss(&ViewBatch { views, temperature: 0.5 }).unwrap();
            assert_eq!(l.value, 0.0);
        }
    }

    #[test]
    fn nt_xent_two_pairs_matches_enumeration() {
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let expected = nt_xent_oracle(&z, 1.0);
        // Each anchor: -ln(e / (e + 2)) = ln(1 + 2/e).
        assert!((expected - (1.0 + 2.0 / std::f64::consts::E).ln()).abs() < 1e-15);
        let l = nt_xent_loss(&ViewBatch {
            views: DenseArray::from_rows(&z).unwrap(),
            temperature: 1.0,
        })
        .unwrap();
        assert!((l.value - expected).abs() < 1e-14);
    }

    #[test]
    fn nt_xent_random_matches_enumeration() {
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let n = rng.random_range(1..6) * 2;
            let views = DenseArray::uniform(&[n, 4], 1.0, &mut rng);
            let tau = rng.random_range(0.1..2.0);
            let z: Vec<Vec<f64>> = (0..n).map(|i| views.row(i).to_vec()).collect();
            let l = nt_xent_loss(&ViewBatch { views, temperature: tau }).unwrap();
            assert!((l.value - nt_xent_oracle(&z, tau)).abs() < 1e-12);
            assert!(l.value >= 0.0);
        }
    }

    #[test]
    fn nt_xent_equal_similarities() {
        for n in [2usize, 3, 5] {
            for tau in [0.1, 0.5, 3.0] {
                let views = DenseArray::filled(&[2 * n, 3], 0.7);
                let l = nt_xent_loss(&ViewBatch { views, temperature: tau }).unwrap();
                let expected = ((2 * n - 1) as f64).ln();
                assert!((l.value - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nt_xent_rejects_odd_rows_and_zero_rows() {
        let views = DenseArray::filled(&[3, 2], 1.0);
        assert!(nt_xent_loss(&ViewBatch { views, temperature: 0.5 }).is_err());
        let views = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            nt_xent_loss(&ViewBatch { views, temperature: 0.5 }),
            Err(SemiseError::DegenerateInput { index: 1, .. })
        ));
    }

    fn pref(a: &[f64], b: &[f64], pi0: &[f64], y: u8) -> PreferenceBatch {
        PreferenceBatch {
            nu_i: rows(&[a]),
            nu_j: rows(&[b]),
            pi0: DenseArray::vector(pi0.to_vec()),
            labels: vec![y],
        }
    }

    #[test]
    fn preference_examples() {
        for y in [0, 1] {
            let l = preference_loss(&pref(&[0.2, 0.9], &[0.2, 0.9], &[1.0, 0.0], y)).unwrap();
            assert!((l.value - LN2).abs() < 1e-9);
        }
        // d_i = 2, d_j = 0.
        let l = preference_loss(&pref(&[-1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 1)).unwrap();
        let oracle = -(1.0 / (1.0 + (-2.0f64).exp())).ln();
        assert!((l.value - oracle).abs() < 1e-12);
        assert!((l.value - 0.126_928_0).abs() < 1e-7);
        let l = preference_loss(&pref(&[-1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 0)).unwrap();
        let oracle = -(1.0 - 1.0 / (1.0 + (-2.0f64).exp())).ln();
        assert!((l.value - oracle).abs() < 1e-12);
        assert!((l.value - 2.126_928_0).abs() < 1e-7);
    }

    #[test]
    fn preference_rejects_zero_reference() {
        assert!(preference_loss(&pref(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], 1)).is_err());
    }

    #[test]
    fn combined_examples() {
        let nt = ViewLoss {
            value: 0.4,
            grad_views: DenseArray::filled(&[2, 2], 1.0),
        };
        let pro = PreferenceLoss {
            value: 0.8,
            grad_nu_i: DenseArray::filled(&[1, 2], 3.0),
            grad_nu_j: DenseArray::filled(&[1, 2], -3.0),
            grad_pi0: DenseArray::filled(&[2], 2.0),
        };
        let c = combined_loss(&nt, &pro, CombinedWeight::new(0.5).unwrap());
        assert!((c.value - 0.6).abs() < 1e-15);
        let c = combined_loss(&nt, &pro, CombinedWeight::new(1.0).unwrap());
        assert_eq!(c.value, 0.4);
        assert!(c.grad_nu_i.data().iter().chain(c.grad_nu_j.data()).all(|&g| g == 0.0));
        assert!(CombinedWeight::new(1.5).is_err());
        assert!(CombinedWeight::new(-0.1).is_err());
    }

    #[test]
    fn combined_at_best_isic_alpha() {
        let mut rng = Rng::new(70);
        let views = DenseArray::uniform(&[6, 4], 1.0, &mut rng);
        let nt = nt_xent_loss(&ViewBatch { views, temperature: 0.5 }).unwrap();
        let pb = PreferenceBatch {
            nu_i: DenseArray::uniform(&[3, 4], 1.0, &mut rng),
            nu_j: DenseArray::uniform(&[3, 4], 1.0, &mut rng),
            pi0: DenseArray::uniform(&[4], 1.0, &mut rng),
            labels: vec![1, 0, 1],
        };
        let pro = preference_loss(&pb).unwrap();
        let c = combined_loss(&nt, &pro, CombinedWeight::new(0.7).unwrap());
        assert!((c.value - (0.7 * nt.value + 0.3 * pro.value)).abs() < 1e-15);
    }

    const LOSS_TOL: f64 = 1e-4;

    #[test]
    fn margin_gradcheck() {
        let mut rng = Rng::new(100);
        for _ in 0..100 {
            let n = rng.random_range(1..5);
            let batch = LabeledPairBatch {
                left: DenseArray::uniform(&[n, 4], 1.0, &mut rng),
                right: DenseArray::uniform(&[n, 4], 1.0, &mut rng),
                labels: (0..n).map(|_| rng.random_range(0..2)).collect(),
                margin: rng.random_range(0.3..1.5),
            };
            let rep = finite_diff_check(
                |x| {
                    let b = LabeledPairBatch { left: x.clone(), ..batch.clone() };
                    let l = margin_contrastive_loss(&b).unwrap();
                    (l.value, l.grad_left)
                },
                &batch.left,
                LOSS_TOL,
            );
            assert!(rep.passed, "{rep:?}");
            let rep = finite_diff_check(
                |x| {
                    let b = LabeledPairBatch { right: x.clone(), ..batch.clone() };
                    let l = margin_contrastive_loss(&b).unwrap();
                    (l.value, l.grad_right)
                },
                &batch.right,
                LOSS_TOL,
            );
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn nt_xent_gradcheck() {
        let mut rng = Rng::new(101);
        for _ in 0..100 {
            let n = rng.random_range(1..5) * 2;
            let views = DenseArray::uniform(&[n, 4], 1.0, &mut rng);
            let tau = rng.random_range(0.2..1.0);
            let rep = finite_diff_check(
                |x| {
                    let l = nt_xent_loss(&ViewBatch { views: x.clone(), temperature: tau }).unwrap();
                    (l.value, l.grad_views)
                },
                &views,
                LOSS_TOL,
            );
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn preference_gradcheck() {
        let mut rng = Rng::new(102);
        for _ in 0..100 {
            let p = rng.random_range(1..5);
            let batch = PreferenceBatch {
                nu_i: DenseArray::uniform(&[p, 4], 1.0, &mut rng),
                nu_j: DenseArray::uniform(&[p, 4], 1.0, &mut rng),
                pi0: DenseArray::uniform(&[4], 1.0, &mut rng),
                labels: (0..p).map(|_| rng.random_range(0..2)).collect(),
            };
            let check = |slot: usize| {
                let x0 = match slot {
                    0 => &batch.nu_i,
                    1 => &batch.nu_j,
                    _ => &batch.pi0,
                };
                finite_diff_check(
                    |x| {
                        let mut b = batch.clone();
                        match slot {
                            0 => b.nu_i = x.clone(),
                            1 => b.nu_j = x.clone(),
                            _ => b.pi0 = x.clone(),
                        }
                        let l = preference_loss(&b).unwrap();
                        let g = match slot {
                            0 => l.grad_nu_i,
                            1 => l.grad_nu_j,
                            _ => l.grad_pi0,
                        };
                        (l.value, g)
                    },
                    x0,
                    LOSS_TOL,
                )
            };
            for slot in 0..3 {
                let rep = check(slot);
                assert!(rep.passed, "slot {slot}: {rep:?}");
            }
        }
    }

    #[test]
    fn combined_gradcheck() {
        let mut rng = Rng::new(103);
        for _ in 0..100 {
            let alpha = rng.random_range(0.0..1.0);
            let w = CombinedWeight::new(alpha).unwrap();
            let views = DenseArray::uniform(&[4, 3], 1.0, &mut rng);
            let pb = PreferenceBatch {
                nu_i: DenseArray::uniform(&[2, 3], 1.0, &mut rng),
                nu_j: DenseArray::uniform(&[2, 3], 1.0, &mut rng),
                pi0: DenseArray::uniform(&[3], 1.0, &mut rng),
                labels: vec![1, 0],
            };
            let pro = preference_loss(&pb).unwrap();
            let rep = finite_diff_check(
                |x| {
                    let nt = nt_xent_loss(&ViewBatch { views: x.clone(), temperature: 0.5 }).unwrap();
                    let c = combined_loss(&nt, &pro, w);
                    (c.value, c.grad_views)
                },
                &views,
                LOSS_TOL,
            );
            assert!(rep.passed, "{rep:?}");
            let nt = nt_xent_loss(&ViewBatch { views: views.clone(), temperature: 0.5 }).unwrap();
            let rep = finite_diff_check(
                |x| {
                    let b = PreferenceBatch { nu_i: x.clone(), ..pb.clone() };
                    let c = combined_loss(&nt, &preference_loss(&b).unwrap(), w);
                    (c.value, c.grad_nu_i)
                },
                &pb.nu_i,
                LOSS_TOL,
            );
            assert!(rep.passed, "{rep:?}");
        }
    }
}
