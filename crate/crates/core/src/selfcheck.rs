//! Finite-difference verification of every loss, layer, and network backward pass.

use rand::Rng as _;

use crate::losses::{
    combined_loss, margin_contrastive_loss, nt_xent_loss, preference_loss, CombinedWeight, LabeledPairBatch,
    PreferenceBatch, ViewBatch,
};
use crate::ndcore::{
    cosine_distance, cosine_distance_backward, dot, finite_diff_check, finite_diff_check_subspace, matmul,
    matmul_backward, softmax, softmax_backward, DenseArray, Rng,
};
use crate::nets::layers::{
    global_avg_pool, global_avg_pool_backward, l2_normalize_backward, l2_normalize_rows, relu, relu_backward, Conv2d,
    Dense, TransposedConv2d,
};
use crate::nets::{
    concat_channels, ClassifierProbe, ConvEncoder, Mode, NormalizedHead, SegDecoder, EMBED_DIM, INPUT_MEAN,
    INPUT_SCALE,
};

/// Maximum relative error accepted for every component.
pub const SELFCHECK_TOLERANCE: f64 = 1e-4;

/// Directions used for whole-network subspace checks.
const SUBSPACE_DIRECTIONS: usize = 8;

/// Pre-activations closer than this to a ReLU kink make an instance unusable.
const KINK_GUARD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Loss,
    Layer,
    Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub kind: ComponentKind,
    pub instances: usize,
    pub worst_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SelfCheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Component whose analytic gradient is deliberately corrupted.
    pub fault: Option<String>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            instances: 100,
            seed: 2024,
            fault: None,
        }
    }
}

/// Wraps gradient checks for one component, corrupting gradients on request.
struct Checker {
    tamper: bool,
}

impl Checker {
    fn grad(&self, mut g: DenseArray) -> DenseArray {
        if self.tamper {
            for v in g.data_mut() {
                *v = *v * 1.05 + 1e-3;
            }
        }
        g
    }

    fn full<F: FnMut(&DenseArray) -> (f64, DenseArray)>(&self, mut f: F, x: &DenseArray) -> f64 {
        finite_diff_check(
            |p| {
                let (v, g) = f(p);
                (v, self.grad(g))
            },
            x,
            SELFCHECK_TOLERANCE,
        )
        .max_relative_error
    }

    fn subspace<F: FnMut(&DenseArray) -> (f64, DenseArray)>(&self, mut f: F, x: &DenseArray, rng: &mut Rng) -> f64 {
        finite_diff_check_subspace(
            |p| {
                let (v, g) = f(p);
                (v, self.grad(g))
            },
            x,
            SUBSPACE_DIRECTIONS,
            rng,
            SELFCHECK_TOLERANCE,
        )
        .max_relative_error
    }
}

/// One random instance: `Some(worst error)` or `None` if it sits on a kink.
type Instance = fn(&Checker, &mut Rng) -> Option<f64>;

fn weighted(y: &DenseArray, w: &DenseArray) -> f64 {
    dot(y.data(), w.data())
}

fn near_kink(x: &DenseArray) -> bool {
    x.data().iter().any(|v| v.abs() < KINK_GUARD)
}

fn margin_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let n = rng.random_range(1..5);
    let batch = LabeledPairBatch {
        left: DenseArray::uniform(&[n, 4], 1.0, rng),
        right: DenseArray::uniform(&[n, 4], 1.0, rng),
        labels: (0..n).map(|_| rng.random_range(0..2)).collect(),
        margin: rng.random_range(0.3..1.5),
    };
    let a = c.full(
        |x| {
            let l = margin_contrastive_loss(&LabeledPairBatch { left: x.clone(), ..batch.clone() }).expect("valid batch");
            (l.value, l.grad_left)
        },
        &batch.left,
    );
    let b = c.full(
        |x| {
            let l = margin_contrastive_loss(&LabeledPairBatch { right: x.clone(), ..batch.clone() }).expect("valid batch");
            (l.value, l.grad_right)
        },
        &batch.right,
    );
    Some(a.max(b))
}

fn nt_xent_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let n = rng.random_range(1..5) * 2;
    let views = DenseArray::uniform(&[n, 4], 1.0, rng);
    let tau = rng.random_range(0.2..1.0);
    Some(c.full(
        |x| {
            let l = nt_xent_loss(&ViewBatch { views: x.clone(), temperature: tau }).expect("valid batch");
            (l.value, l.grad_views)
        },
        &views,
    ))
}

fn preference_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let p = rng.random_range(1..5);
    let batch = PreferenceBatch {
        nu_i: DenseArray::uniform(&[p, 4], 1.0, rng),
        nu_j: DenseArray::uniform(&[p, 4], 1.0, rng),
        pi0: DenseArray::uniform(&[4], 1.0, rng),
        labels: (0..p).map(|_| rng.random_range(0..2)).collect(),
    };
    let mut worst = 0.0f64;
    for slot in 0..3 {
        let x0 = [&batch.nu_i, &batch.nu_j, &batch.pi0][slot];
        worst = worst.max(c.full(
            |x| {
                let mut b = batch.clone();
                match slot {
                    0 => b.nu_i = x.clone(),
                    1 => b.nu_j = x.clone(),
                    _ => b.pi0 = x.clone(),
                }
                let l = preference_loss(&b).expect("valid batch");
                (l.value, [l.grad_nu_i, l.grad_nu_j, l.grad_pi0].into_iter().nth(slot).expect("slot < 3"))
            },
            x0,
        ));
    }
    Some(worst)
}

fn combined_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let w = CombinedWeight::new(rng.random_range(0.0..=1.0)).expect("alpha in range");
    let views = DenseArray::uniform(&[4, 3], 1.0, rng);
    let pb = PreferenceBatch {
        nu_i: DenseArray::uniform(&[2, 3], 1.0, rng),
        nu_j: DenseArray::uniform(&[2, 3], 1.0, rng),
        pi0: DenseArray::uniform(&[3], 1.0, rng),
        labels: vec![1, 0],
    };
    let pro = preference_loss(&pb).expect("valid batch");
    let nt = nt_xent_loss(&ViewBatch { views: views.clone(), temperature: 0.5 }).expect("valid batch");
    let a = c.full(
        |x| {
            let nt = nt_xent_loss(&ViewBatch { views: x.clone(), temperature: 0.5 }).expect("valid batch");
            let l = combined_loss(&nt, &pro, w);
            (l.value, l.grad_views)
        },
        &views,
    );
    let b = c.full(
        |x| {
            let p = preference_loss(&PreferenceBatch { nu_j: x.clone(), ..pb.clone() }).expect("valid batch");
            let l = combined_loss(&nt, &p, w);
            (l.value, l.grad_nu_j)
        },
        &pb.nu_j,
    );
    Some(a.max(b))
}

fn conv_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let mut conv = Conv2d::new(2, 3, rng);
    conv.bias = DenseArray::uniform(&[3], 0.5, rng);
    let x = DenseArray::uniform(&[2, 2, 4, 4], 1.0, rng);
    let wy = DenseArray::uniform(&[3, 2, 2, 2], 1.0, rng);
    let a = c.full(
        |p| {
            let k = Conv2d { weight: p.clone(), ..conv.clone() };
            let (y, cache) = k.forward(&x).expect("valid shapes");
            (weighted(&y, &wy), k.backward(&cache, &wy, false).0.weight)
        },
        &conv.weight,
    );
    let b = c.full(
        |p| {
            let (y, cache) = conv.forward(p).expect("valid shapes");
            (weighted(&y, &wy), conv.backward(&cache, &wy, true).1.expect("requested"))
        },
        &x,
    );
    let d = c.full(
        |p| {
            let k = Conv2d { bias: p.clone(), ..conv.clone() };
            let (y, cache) = k.forward(&x).expect("valid shapes");
            (weighted(&y, &wy), k.backward(&cache, &wy, false).0.bias)
        },
        &conv.bias,
    );
    Some(a.max(b).max(d))
}

fn transposed_conv_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let mut t = TransposedConv2d::new(3, 2, rng);
    t.bias = DenseArray::uniform(&[2], 0.5, rng);
    let x = DenseArray::uniform(&[3, 2, 2, 2], 1.0, rng);
    let wy = DenseArray::uniform(&[2, 2, 4, 4], 1.0, rng);
    let a = c.full(
        |p| {
            let k = TransposedConv2d { weight: p.clone(), ..t.clone() };
            let (y, cache) = k.forward(&x).expect("valid shapes");
            (weighted(&y, &wy), k.backward(&cache, &wy, false).0.weight)
        },
        &t.weight,
    );
    let b = c.full(
        |p| {
            let (y, cache) = t.forward(p).expect("valid shapes");
            (weighted(&y, &wy), t.backward(&cache, &wy, true).1.expect("requested"))
        },
        &x,
    );
    let d = c.full(
        |p| {
            let k = TransposedConv2d { bias: p.clone(), ..t.clone() };
            let (y, cache) = k.forward(&x).expect("valid shapes");
            (weighted(&y, &wy), k.backward(&cache, &wy, false).0.bias)
        },
        &t.bias,
    );
    Some(a.max(b).max(d))
}

fn dense_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let d = Dense::new(4, 3, rng);
    let x = DenseArray::uniform(&[5, 4], 1.0, rng);
    let wy = DenseArray::uniform(&[5, 3], 1.0, rng);
    let a = c.full(
        |p| {
            let l = Dense { weight: p.clone(), ..d.clone() };
            (weighted(&l.forward(&x).expect("valid shapes"), &wy), l.backward(&x, &wy).0.weight)
        },
        &d.weight,
    );
    let b = c.full(
        |p| (weighted(&d.forward(p).expect("valid shapes"), &wy), d.backward(p, &wy).1),
        &x,
    );
    Some(a.max(b))
}

fn relu_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let x = DenseArray::uniform(&[2, 3, 2, 2], 1.0, rng);
    if x.data().iter().any(|v| v.abs() < 1e-2) {
        return None;
    }
    let wy = DenseArray::uniform(&[2, 3, 2, 2], 1.0, rng);
    Some(c.full(
        |p| {
            let y = relu(p);
            (weighted(&y, &wy), relu_backward(&y, &wy))
        },
        &x,
    ))
}

fn pool_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let x = DenseArray::uniform(&[3, 2, 4, 4], 1.0, rng);
    let wp = DenseArray::uniform(&[2, 3], 1.0, rng);
    Some(c.full(
        |p| (weighted(&global_avg_pool(p), &wp), global_avg_pool_backward(p.shape(), &wp)),
        &x,
    ))
}

fn normalize_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let u = DenseArray::uniform(&[3, 5], 1.0, rng);
    let wn = DenseArray::uniform(&[3, 5], 1.0, rng);
    Some(c.full(
        |p| {
            let (y, norms) = l2_normalize_rows(p, "selfcheck").expect("nonzero rows");
            (weighted(&y, &wn), l2_normalize_backward(&y, &norms, &wn))
        },
        &u,
    ))
}

fn softmax_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let n = rng.random_range(2..7);
    let x = DenseArray::uniform(&[n], 3.0, rng);
    let w = DenseArray::uniform(&[n], 1.0, rng);
    Some(c.full(
        |p| {
            let s = softmax(p.data()).expect("finite logits");
            (dot(&s, w.data()), DenseArray::vector(softmax_backward(&s, w.data())))
        },
        &x,
    ))
}

fn cosine_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let u = DenseArray::uniform(&[6], 1.0, rng);
    let v = DenseArray::uniform(&[6], 1.0, rng);
    let a = c.full(
        |p| {
            let d = cosine_distance(p.data(), v.data()).expect("nonzero");
            (d, DenseArray::vector(cosine_distance_backward(p.data(), v.data(), 1.0).expect("nonzero").0))
        },
        &u,
    );
    let b = c.full(
        |p| {
            let d = cosine_distance(u.data(), p.data()).expect("nonzero");
            (d, DenseArray::vector(cosine_distance_backward(u.data(), p.data(), 1.0).expect("nonzero").1))
        },
        &v,
    );
    Some(a.max(b))
}

fn matmul_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let a = DenseArray::uniform(&[3, 4], 1.0, rng);
    let b = DenseArray::uniform(&[4, 2], 1.0, rng);
    let w = DenseArray::uniform(&[3, 2], 1.0, rng);
    let ea = c.full(
        |p| (weighted(&matmul(p, &b).expect("shapes"), &w), matmul_backward(p, &b, &w).expect("shapes").0),
        &a,
    );
    let eb = c.full(
        |p| (weighted(&matmul(&a, p).expect("shapes"), &w), matmul_backward(&a, p, &w).expect("shapes").1),
        &b,
    );
    Some(ea.max(eb))
}

fn positive_biases(enc: &mut ConvEncoder, rng: &mut Rng) {
    for st in enc.stages.iter_mut() {
        st.bias = DenseArray::uniform(st.bias.shape(), 0.1, rng).map(|v| v + 0.3);
    }
}

fn encoder_kink(enc: &ConvEncoder, images: &DenseArray) -> bool {
    let s = images.shape();
    let mut x = images
        .map(|v| (v - INPUT_MEAN) / INPUT_SCALE)
        .reshape(vec![1, s[0], s[2], s[3]])
        .expect("same length");
    for conv in &enc.stages {
        let (z, _) = conv.forward(&x).expect("valid shapes");
        if near_kink(&z) {
            return true;
        }
        x = relu(&z);
    }
    false
}

fn encoder_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let mut enc = ConvEncoder::new(rng);
    positive_biases(&mut enc, rng);
    let images = DenseArray::uniform(&[2, 1, 8, 8], 1.0, rng).map(f64::abs);
    if encoder_kink(&enc, &images) {
        return None;
    }
    let w = DenseArray::uniform(&[2, EMBED_DIM], 1.0, rng);
    let stage = rng.random_range(0..3);
    Some(c.subspace(
        |p| {
            let mut e = enc.clone();
            e.stages[stage].weight = p.clone();
            let (emb, tr) = e.forward(&images).expect("valid shapes");
            (weighted(&emb, &w), e.backward(&tr, &w).stages[stage].weight.clone())
        },
        &enc.stages[stage].weight,
        rng,
    ))
}

fn head_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let head = NormalizedHead::new(rng);
    let emb = DenseArray::uniform(&[3, EMBED_DIM], 1.0, rng);
    let w = DenseArray::uniform(&[3, head.dense.outputs()], 1.0, rng);
    let a = c.full(
        |p| {
            let (o, t) = head.forward(p).expect("nonzero rows");
            (weighted(&o, &w), head.backward(&t, &w).1)
        },
        &emb,
    );
    let b = c.full(
        |p| {
            let h = NormalizedHead { dense: Dense { weight: p.clone(), ..head.dense.clone() } };
            let (o, t) = h.forward(&emb).expect("nonzero rows");
            (weighted(&o, &w), h.backward(&t, &w).0.dense.weight)
        },
        &head.dense.weight,
    );
    Some(a.max(b))
}

fn probe_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let probe = ClassifierProbe::new(4, rng);
    let emb = DenseArray::uniform(&[3, EMBED_DIM], 1.0, rng);
    let pre1 = probe.hidden1.forward(&emb).expect("valid shapes");
    let pre2 = probe.hidden2.forward(&relu(&pre1)).expect("valid shapes");
    if near_kink(&pre1) || near_kink(&pre2) {
        return None;
    }
    let labels = vec![0, 3, 1];
    let mask_seed = rng.random::<u64>();
    Some(c.subspace(
        |p| {
            let mut pr = probe.clone();
            pr.hidden1.weight = p.clone();
            let t = pr.forward(&emb, Mode::Train(&mut Rng::new(mask_seed))).expect("valid shapes");
            let (l, g) = pr.cross_entropy(&t, &labels).expect("valid labels");
            (l, g.hidden1.weight)
        },
        &probe.hidden1.weight,
        rng,
    ))
}

fn decoder_instance(c: &Checker, rng: &mut Rng) -> Option<f64> {
    let mut enc = ConvEncoder::new(rng);
    positive_biases(&mut enc, rng);
    let mut dec = SegDecoder::new(rng);
    for t in dec.up.iter_mut() {
        t.bias = DenseArray::uniform(t.bias.shape(), 0.1, rng).map(|v| v + 0.3);
    }
    let images = DenseArray::uniform(&[2, 1, 8, 8], 1.0, rng).map(f64::abs);
    let targets = DenseArray::uniform(&[1, 2, 8, 8], 1.0, rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let (_, etrace) = enc.forward(&images).expect("valid shapes");
    let [_, e2, e3] = &etrace.stage_outputs;
    let (y1, _) = dec.up[0].forward(e3).expect("valid shapes");
    let (y2, _) = dec.up[1]
        .forward(&concat_channels(&relu(&y1), e2).expect("matching maps"))
        .expect("valid shapes");
    if near_kink(&y1) || near_kink(&y2) {
        return None;
    }
    let stage = rng.random_range(0..3);
    Some(c.subspace(
        |p| {
            let mut d = dec.clone();
            d.up[stage].weight = p.clone();
            let tr = d.forward(&etrace).expect("valid shapes");
            let (l, g) = d.bce(&tr, &targets).expect("matching targets");
            (l, g.up[stage].weight.clone())
        },
        &dec.up[stage].weight,
        rng,
    ))
}

const COMPONENTS: [(&str, ComponentKind, Instance); 17] = [
    ("margin_contrastive_loss", ComponentKind::Loss, margin_instance),
    ("nt_xent_loss", ComponentKind::Loss, nt_xent_instance),
    ("preference_loss", ComponentKind::Loss, preference_instance),
    ("combined_loss", ComponentKind::Loss, combined_instance),
    ("conv2d", ComponentKind::Layer, conv_instance),
    ("transposed_conv2d", ComponentKind::Layer, transposed_conv_instance),
    ("dense", ComponentKind::Layer, dense_instance),
    ("relu", ComponentKind::Layer, relu_instance),
    ("global_avg_pool", ComponentKind::Layer, pool_instance),
    ("l2_normalize", ComponentKind::Layer, normalize_instance),
    ("softmax", ComponentKind::Layer, softmax_instance),
    ("cosine_distance", ComponentKind::Layer, cosine_instance),
    ("matmul", ComponentKind::Layer, matmul_instance),
    ("conv_encoder", ComponentKind::Network, encoder_instance),
    ("normalized_head", ComponentKind::Network, head_instance),
    ("classifier_probe", ComponentKind::Network, probe_instance),
    ("seg_decoder", ComponentKind::Network, decoder_instance),
];

pub fn component_names() -> Vec<&'static str> {
    COMPONENTS.iter().map(|c| c.0).collect()
}

/// Run every component over `opts.instances` accepted random instances.
/// Instances that land within reach of a ReLU kink are redrawn.
pub fn run_selfcheck(opts: &SelfCheckOptions) -> Vec<ComponentReport> {
    COMPONENTS
        .iter()
        .enumerate()
        .map(|(k, &(name, kind, instance))| {
            let checker = Checker {
                tamper: opts.fault.as_deref() == Some(name),
            };
            let mut rng = Rng::derive(opts.seed, &[k as u64]);
            let (mut accepted, mut attempts, mut worst) = (0, 0, 0.0f64);
            while accepted < opts.instances && attempts < 50 * opts.instances.max(1) {
                attempts += 1;
                if let Some(err) = instance(&checker, &mut rng) {
                    accepted += 1;
                    worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
                }
            }
            ComponentReport {
                name,
                kind,
                instances: accepted,
                worst_error: worst,
                passed: accepted == opts.instances && worst <= SELFCHECK_TOLERANCE,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_injection_flags_only_the_named_component() {
        let opts = SelfCheckOptions {
            instances: 3,
            seed: 1,
            fault: Some("dense".into()),
        };
        let reports = run_selfcheck(&opts);
        for r in &reports {
            assert_eq!(r.passed, r.name != "dense", "{r:?}");
        }
    }

    #[test]
    fn names_cover_all_losses() {
        let losses: Vec<_> = COMPONENTS.iter().filter(|c| c.1 == ComponentKind::Loss).collect();
        assert_eq!(losses.len(), 4);
        assert_eq!(component_names().len(), COMPONENTS.len());
    }
}
