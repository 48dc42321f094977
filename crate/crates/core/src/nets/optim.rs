use std::collections::BTreeMap;

use crate::error::{Result, SemiseError};
use crate::ndcore::DenseArray;
use crate::nets::Params;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Classic (heavy-ball) momentum: `v ← μ·v + g`, `p ← p − lr·v`.
///
/// Velocities are keyed by `"<group>.<param name>"`; each group carries its
/// own learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    learning_rates: BTreeMap<String, f64>,
    velocities: BTreeMap<String, DenseArray>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            learning_rates: BTreeMap::new(),
            velocities: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, group: &str, lr: f64) -> Self {
        self.learning_rates.insert(group.to_string(), lr);
        self
    }

    pub fn learning_rate(&self, group: &str) -> Option<f64> {
        self.learning_rates.get(group).copied()
    }

    pub fn velocities(&self) -> &BTreeMap<String, DenseArray> {
        &self.velocities
    }

    pub fn velocities_mut(&mut self) -> &mut BTreeMap<String, DenseArray> {
        &mut self.velocities
    }

    /// One update of every parameter in `params` under `group`'s rate.
    pub fn step<P: Params>(&mut self, group: &str, params: &mut P, grads: &P) -> Result<()> {
        let lr = self
            .learning_rate(group)
            .ok_or_else(|| SemiseError::Config(format!("unknown parameter group '{group}'")))?;
        if !params.trainable() {
            return Err(SemiseError::Contract(format!("parameter group '{group}' is frozen")));
        }
        let grads = grads.named();
        let mut targets = params.named_mut();
        if grads.len() != targets.len() {
            return Err(SemiseError::dimension("sgd_step", &[targets.len()], &[grads.len()]));
        }
        // Validate everything before touching any parameter.
        for ((pn, p), (gn, g)) in targets.iter().zip(&grads) {
            if pn != gn || p.shape() != g.shape() {
                return Err(SemiseError::dimension("sgd_step", p.shape(), g.shape()));
            }
        }
        for ((name, p), (_, g)) in targets.iter_mut().zip(&grads) {
            let key = format!("{group}.{name}");
            let v = self
                .velocities
                .entry(key)
                .or_insert_with(|| DenseArray::zeros(g.shape()));
            if v.shape() != g.shape() {
                return Err(SemiseError::dimension("sgd_step velocity", v.shape(), g.shape()));
            }
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.velocities.values_mut().for_each(DenseArray::round_to_f32);
    }
}

/// Stand-alone parameter for optimizer tests and simple uses.
impl Params for DenseArray {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        vec![("value".into(), self)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        vec![("value".into(), self)]
    }
}

/// Apply one update with the given optimizer (see [`SgdMomentum::step`]).
pub fn sgd_step<P: Params>(opt: &mut SgdMomentum, group: &str, params: &mut P, grads: &P) -> Result<()> {
    opt.step(group, params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, mu: f64) -> SgdMomentum {
        SgdMomentum::new(mu).with_group("p", lr)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = DenseArray::vector(vec![1.0, -2.0]);
        let mut o = opt(0.1, 0.9);
        sgd_step(&mut o, "p", &mut p, &DenseArray::zeros(&[2])).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn one_and_two_steps() {
        let mut p = DenseArray::vector(vec![0.0]);
        let g = DenseArray::vector(vec![1.0]);
        let mut o = opt(0.1, 0.9);
        sgd_step(&mut o, "p", &mut p, &g).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut o, "p", &mut p, &g).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let mut p = DenseArray::vector(vec![0.5, 0.25]);
        let mut q = p.clone();
        let mut o = opt(0.05, 0.0);
        for k in 0..5 {
            let g = DenseArray::vector(vec![k as f64, -1.0]);
            sgd_step(&mut o, "p", &mut p, &g).unwrap();
            q.add_scaled(&g, -0.05);
            assert_eq!(p, q);
        }
    }

    #[test]
    fn shape_mismatch_and_unknown_group() {
        let mut p = DenseArray::vector(vec![0.0, 0.0]);
        let mut o = opt(0.1, 0.9);
        assert!(sgd_step(&mut o, "p", &mut p, &DenseArray::zeros(&[3])).is_err());
        assert!(sgd_step(&mut o, "q", &mut p, &DenseArray::zeros(&[2])).is_err());
    }

    #[test]
    fn groups_have_independent_rates() {
        let mut o = SgdMomentum::new(0.0).with_group("a", 1.0).with_group("b", 0.1);
        let mut pa = DenseArray::vector(vec![0.0]);
        let mut pb = DenseArray::vector(vec![0.0]);
        let g = DenseArray::vector(vec![1.0]);
        sgd_step(&mut o, "a", &mut pa, &g).unwrap();
        sgd_step(&mut o, "b", &mut pb, &g).unwrap();
        assert_eq!(pa.data()[0], -1.0);
        assert_eq!(pb.data()[0], -0.1);
        assert_eq!(o.velocities().len(), 2);
    }
}
