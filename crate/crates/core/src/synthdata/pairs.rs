use rand::Rng as _;

use crate::error::{Result, SemiseError};
use crate::ndcore::Rng;
use crate::synthdata::SampleRecord;

/// Two anomalous sample ids; `label == 1` means `i` is more severe than `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub i: u64,
    pub j: u64,
    pub label: u8,
}

impl PreferencePair {
    /// Same pair with the members swapped and the label flipped.
    pub fn reversed(self) -> Self {
        PreferencePair {
            i: self.j,
            j: self.i,
            label: 1 - self.label,
        }
    }
}

/// `count` pairs drawn uniformly (with replacement) over unordered anomalous
/// pairs of unequal severity, each oriented by a fair coin.
pub fn sample_pairs(records: &[SampleRecord], count: usize, seed: u64) -> Result<Vec<PreferencePair>> {
    let anomalous: Vec<&SampleRecord> = records.iter().filter(|r| r.severity > 0).collect();
    let first = anomalous.first().map(|r| r.severity);
    if first.is_none() || anomalous.iter().all(|r| Some(r.severity) == first) {
        return Err(SemiseError::Data(
            "preference pairs need at least two distinct anomalous severity levels".into(),
        ));
    }
    let mut rng = Rng::derive(seed, &[0x9a1e5]);
    let n = anomalous.len();
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        // Uniform over unordered pairs {a, b}, a ≠ b; reject equal severities.
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n - 1);
        let b = if b >= a { b + 1 } else { b };
        let (ra, rb) = (anomalous[a], anomalous[b]);
        if ra.severity == rb.severity {
            continue;
        }
        let (ri, rj) = if rng.random::<bool>() { (ra, rb) } else { (rb, ra) };
        pairs.push(PreferencePair {
            i: ri.id,
            j: rj.id,
            label: u8::from(ri.severity > rj.severity),
        });
    }
    Ok(pairs)
}
