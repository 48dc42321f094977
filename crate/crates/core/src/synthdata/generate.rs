use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Result, SemiseError};
use crate::ndcore::{DenseArray, Rng};

/// One synthetic image with its severity grade and lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    /// 0 = healthy, `1..K` graded anomaly.
    pub severity: u8,
    /// `[1, H, W]`, values in `[0, 1]`, exactly representable as `f32`.
    pub image: DenseArray,
    /// `[H, W]` of 0/1.
    pub mask: DenseArray,
}

impl SampleRecord {
    pub fn is_healthy(&self) -> bool {
        self.severity == 0
    }

    pub fn lesion_area(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }
}

/// A generated or loaded dataset with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for r in &self.records {
            counts[r.severity as usize] += 1;
        }
        counts
    }

    pub fn by_id(&self, id: u64) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn subset(&self, records: Vec<SampleRecord>) -> Dataset {
        Dataset {
            records,
            ..self.without_records()
        }
    }

    fn without_records(&self) -> Dataset {
        Dataset {
            classes: self.classes,
            height: self.height,
            width: self.width,
            records: Vec::new(),
        }
    }
}

/// Default synthetic benchmark: K = 5 severity levels on 32×32 images.
pub const BENCHMARK_CLASSES: usize = 5;
pub const BENCHMARK_PER_CLASS: usize = 400;
pub const BENCHMARK_SIZE: usize = 32;
pub const BENCHMARK_SEED: u64 = 1;

pub fn benchmark_dataset() -> Dataset {
    generate_dataset(BENCHMARK_PER_CLASS, BENCHMARK_CLASSES, BENCHMARK_SIZE, BENCHMARK_SIZE, BENCHMARK_SEED)
        .expect("valid benchmark geometry")
}

/// Lesion radius in pixels for a severity level, before jitter.
pub fn nominal_radius(severity: usize, classes: usize, height: usize, width: usize) -> f64 {
    severity as f64 / classes as f64 * height.min(width) as f64 / 3.0
}

/// Lesion contrast for a severity level, before jitter.
pub fn nominal_contrast(severity: usize, classes: usize) -> f64 {
    0.3 + 0.5 * severity as f64 / (classes - 1) as f64
}

const BACKGROUND_WAVES: usize = 3;
const WAVE_AMPLITUDE: f64 = 0.12;
const PIXEL_NOISE: f64 = 0.01;

fn render(id: u64, severity: usize, classes: usize, h: usize, w: usize, seed: u64) -> SampleRecord {
    let mut rng = Rng::derive(seed, &[id]);
    let base = 0.1 + 0.3 * rng.random::<f64>();
    let waves: Vec<(f64, f64, f64)> = (0..BACKGROUND_WAVES)
        .map(|_| {
            let fx = rng.random_range(-3i32..=3) as f64 / w as f64;
            let fy = rng.random_range(-3i32..=3) as f64 / h as f64;
            (fx, fy, rng.random::<f64>() * TAU)
        })
        .collect();

    let mut image = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let texture: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (TAU * (fx * x as f64 + fy * y as f64) + ph).cos())
                .sum();
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * PIXEL_NOISE;
            image[y * w + x] = base + WAVE_AMPLITUDE * texture + noise;
        }
    }

    let mut mask = vec![0.0; h * w];
    if severity > 0 {
        let radius = nominal_radius(severity, classes, h, w) * rng.random_range(0.9..1.1);
        let contrast = nominal_contrast(severity, classes) * rng.random_range(0.95..1.05);
        // Centres sit on pixel centres so the centre pixel is always inside the mask.
        let margin = radius.ceil() as usize;
        let pick = |rng: &mut Rng, n: usize| {
            if 2 * margin + 1 <= n {
                rng.random_range(margin..n - margin)
            } else {
                n / 2
            }
        };
        let cx = pick(&mut rng, w) as f64;
        let cy = pick(&mut rng, h) as f64;
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                // Soft edge: full contrast inside r − 0.5, half at r, zero beyond r + 0.5.
                image[y * w + x] += contrast * (radius + 0.5 - d).clamp(0.0, 1.0);
                if d <= radius {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }
    SampleRecord {
        id,
        severity: severity as u8,
        image: DenseArray::new(vec![1, h, w], image).expect("h*w pixels"),
        mask: DenseArray::new(vec![h, w], mask).expect("h*w pixels"),
    }
}

/// `n_per_class` records for each severity `0..classes`, ids in generation order.
pub fn generate_dataset(n_per_class: usize, classes: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || classes > 256 {
        return Err(SemiseError::Config(format!("classes must be in 2..=256, got {classes}")));
    }
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(SemiseError::Config(format!(
            "image size {height}x{width} must be positive multiples of 8"
        )));
    }
    if n_per_class == 0 {
        return Err(SemiseError::Config("per-class count must be positive".into()));
    }
    let records = (0..classes)
        .flat_map(|s| (0..n_per_class).map(move |i| (s, (s * n_per_class + i) as u64)))
        .map(|(s, id)| render(id, s, classes, height, width, seed))
        .collect();
    Ok(Dataset {
        classes,
        height,
        width,
        records,
    })
}

/// Train / validation / test partition.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Stratified split: each class is shuffled and cut by `(train, val)` fractions;
/// the remainder is test.
pub fn split_dataset(data: &Dataset, train_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
        return Err(SemiseError::Config(format!(
            "invalid split fractions train={train_frac} val={val_frac}"
        )));
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..data.classes {
        let mut members: Vec<&SampleRecord> = data.records.iter().filter(|r| r.severity as usize == s).collect();
        members.shuffle(&mut Rng::derive(seed, &[0x5971, s as u64]));
        let n = members.len();
        let n_train = (train_frac * n as f64).round() as usize;
        let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
        for (k, r) in members.into_iter().enumerate() {
            let dst = if k < n_train {
                &mut train
            } else if k < n_train + n_val {
                &mut val
            } else {
                &mut test
            };
            dst.push(r.clone());
        }
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by_key(|r| r.id);
    }
    Ok(Split {
        train: data.subset(train),
        val: data.subset(val),
        test: data.subset(test),
    })
}
