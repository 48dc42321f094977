use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Result, SemiseError};
use crate::ndcore::{DenseArray, Rng};
use crate::synthdata::SampleRecord;

/// Parameters of the view augmentation `a(·)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub flip_prob: f64,
    /// Crop side as a fraction of the image side, drawn uniformly from `[lo, hi]`.
    pub scale_range: (f64, f64),
    pub noise_sigma: f64,
    /// Brightness offset drawn uniformly from `[-jitter, jitter]`.
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(seed: u64) -> Self {
        AugmentSpec {
            flip_prob: 0.5,
            scale_range: (0.8, 1.0),
            noise_sigma: 0.02,
            brightness_jitter: 0.1,
            seed,
        }
    }

    /// No flip, full crop, no noise, no jitter.
    pub fn identity(seed: u64) -> Self {
        AugmentSpec {
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            noise_sigma: 0.0,
            brightness_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && lo > 0.0
            && lo <= hi
            && hi <= 1.0
            && self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && self.brightness_jitter >= 0.0
            && self.brightness_jitter.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SemiseError::Config(format!("invalid augmentation spec {self:?}")))
        }
    }
}

/// Bilinear sample of `img` (`h × w`) at continuous pixel coordinates.
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// One augmented view `[1, H, W]` of `record`, determined by `(spec.seed, record.id, draw)`.
///
/// Order: horizontal flip, random crop resized back with bilinear sampling,
/// brightness offset, Gaussian noise, clamp to `[0, 1]`.
pub fn augment(spec: &AugmentSpec, record: &SampleRecord, draw: u64) -> DenseArray {
    let shape = record.image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut rng = Rng::derive(spec.seed, &[record.id, draw]);
    let src = record.image.data();

    let flip = rng.random::<f64>() < spec.flip_prob;
    let (lo, hi) = spec.scale_range;
    let scale = lo + (hi - lo) * rng.random::<f64>();
    let (ch, cw) = (scale * h as f64, scale * w as f64);
    let oy = (h as f64 - ch) * rng.random::<f64>();
    let ox = (w as f64 - cw) * rng.random::<f64>();
    let brightness = spec.brightness_jitter * (2.0 * rng.random::<f64>() - 1.0);

    let mut out = vec![0.0; h * w];
    for y in 0..h {
        // Pixel-centre mapping; scale 1 with zero offset lands exactly on source pixels.
        let sy = oy + (y as f64 + 0.5) * ch / h as f64 - 0.5;
        for x in 0..w {
            let sx = ox + (x as f64 + 0.5) * cw / w as f64 - 0.5;
            let sx = if flip { (w - 1) as f64 - sx } else { sx };
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            out[y * w + x] = (bilinear(src, h, w, sy, sx) + brightness + noise).clamp(0.0, 1.0);
        }
    }
    DenseArray::new(shape, out).expect("same shape as source")
}
