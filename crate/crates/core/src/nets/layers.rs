//! Layer primitives with explicit forward/backward passes.
//!
//! Feature maps use channel-major `[C, B, H, W]` layout so a convolution over
//! the whole batch is a single matrix product against an im2col buffer.

use crate::error::{Result, SemiseError};
use crate::ndcore::{dot, gemm_nn, gemm_nt, gemm_tn, DenseArray, Rng};
use crate::nets::Params;
use rand::Rng as _;

const K: usize = 3;
const TAPS: usize = K * K;

/// `[C, B, H, W]` → `[C·9, B·(H/2)·(W/2)]` for a 3×3, stride-2, pad-1 window.
fn im2col(x: &[f64], c: usize, b: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let cols = b * ho * wo;
    let mut out = vec![0.0; c * TAPS * cols];
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut out[((ci * TAPS) + ky * K + kx) * cols..][..cols];
                for bi in 0..b {
                    let plane = &x[(ci * b + bi) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[(bi * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `[C, B, H, W]` map.
fn col2im(cols: &[f64], c: usize, b: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let n = b * ho * wo;
    let mut out = vec![0.0; c * b * h * w];
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ci * TAPS) + ky * K + kx) * n..][..n];
                for bi in 0..b {
                    let plane = &mut out[(ci * b + bi) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[(bi * ho + oy) * wo..][..wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn map_dims(x: &DenseArray, channels: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[0] != channels {
        return Err(SemiseError::dimension(op, s, &[channels, 0, 0, 0]));
    }
    Ok((s[1], s[2], s[3]))
}

fn add_channel_bias(y: &mut [f64], bias: &[f64]) {
    let per = y.len() / bias.len();
    for (chunk, &bv) in y.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn channel_sums(dy: &[f64], channels: usize) -> Vec<f64> {
    dy.chunks(dy.len() / channels).map(|c| c.iter().sum()).collect()
}

/// 3×3 convolution, stride 2, padding 1: `[Cin, B, H, W] → [Cout, B, H/2, W/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[Cout, Cin·9]`, taps ordered `(cin, ky, kx)`.
    pub weight: DenseArray,
    pub bias: DenseArray,
}

/// Values kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: [usize; 4],
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Conv2d {
            weight: DenseArray::he(&[cout, cin * TAPS], cin * TAPS, rng),
            bias: DenseArray::zeros(&[cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] / TAPS
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &DenseArray) -> Result<(DenseArray, ConvCache)> {
        let cin = self.in_channels();
        let (b, h, w) = map_dims(x, cin, "conv2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(SemiseError::dimension("conv2d", x.shape(), &[cin, b, h + h % 2, w + w % 2]));
        }
        let cout = self.out_channels();
        let cols = im2col(x.data(), cin, b, h, w);
        let p = b * (h / 2) * (w / 2);
        let mut y = vec![0.0; cout * p];
        gemm_nn(self.weight.data(), &cols, &mut y, cout, cin * TAPS, p);
        add_channel_bias(&mut y, self.bias.data());
        let y = DenseArray::new(vec![cout, b, h / 2, w / 2], y)?;
        Ok((y, ConvCache { cols, in_shape: [cin, b, h, w] }))
    }

    /// Returns parameter gradients and, if requested, the input gradient.
    pub fn backward(&self, cache: &ConvCache, dy: &DenseArray, want_dx: bool) -> (Conv2d, Option<DenseArray>) {
        let [cin, b, h, w] = cache.in_shape;
        let cout = self.out_channels();
        let p = b * (h / 2) * (w / 2);
        let mut gw = DenseArray::zeros(self.weight.shape());
        gemm_nt(dy.data(), &cache.cols, gw.data_mut(), cout, p, cin * TAPS);
        let gb = DenseArray::vector(channel_sums(dy.data(), cout));
        let dx = want_dx.then(|| {
            let mut dcols = vec![0.0; cin * TAPS * p];
            gemm_tn(self.weight.data(), dy.data(), &mut dcols, cin * TAPS, cout, p);
            DenseArray::new(vec![cin, b, h, w], col2im(&dcols, cin, b, h, w))
                .expect("col2im preserves shape")
        });
        (Conv2d { weight: gw, bias: gb }, dx)
    }
}

impl Params for Conv2d {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Transposed 3×3 convolution, stride 2: `[Cin, B, n, m] → [Cout, B, 2n, 2m]`.
///
/// Implemented as the adjoint of [`Conv2d`]'s linear map, which gives the
/// usual padding 1 / output padding 1 geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConv2d {
    /// `[Cin, Cout·9]`.
    pub weight: DenseArray,
    pub bias: DenseArray,
}

#[derive(Debug, Clone)]
pub struct TransposedConvCache {
    input: Vec<f64>,
    in_shape: [usize; 4],
}

impl TransposedConv2d {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        TransposedConv2d {
            weight: DenseArray::glorot(&[cin, cout * TAPS], cin * TAPS, cout * TAPS, rng),
            bias: DenseArray::zeros(&[cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1] / TAPS
    }

    pub fn forward(&self, x: &DenseArray) -> Result<(DenseArray, TransposedConvCache)> {
        let cin = self.in_channels();
        let (b, n, m) = map_dims(x, cin, "transposed_conv2d")?;
        let cout = self.out_channels();
        let p = b * n * m;
        let mut cols = vec![0.0; cout * TAPS * p];
        gemm_tn(self.weight.data(), x.data(), &mut cols, cout * TAPS, cin, p);
        let mut y = col2im(&cols, cout, b, 2 * n, 2 * m);
        add_channel_bias(&mut y, self.bias.data());
        let y = DenseArray::new(vec![cout, b, 2 * n, 2 * m], y)?;
        Ok((
            y,
            TransposedConvCache {
                input: x.data().to_vec(),
                in_shape: [cin, b, n, m],
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &TransposedConvCache,
        dy: &DenseArray,
        want_dx: bool,
    ) -> (TransposedConv2d, Option<DenseArray>) {
        let [cin, b, n, m] = cache.in_shape;
        let cout = self.out_channels();
        let p = b * n * m;
        let dcols = im2col(dy.data(), cout, b, 2 * n, 2 * m);
        let mut gw = DenseArray::zeros(self.weight.shape());
        gemm_nt(&cache.input, &dcols, gw.data_mut(), cin, p, cout * TAPS);
        let gb = DenseArray::vector(channel_sums(dy.data(), cout));
        let dx = want_dx.then(|| {
            let mut dx = vec![0.0; cin * p];
            gemm_nn(self.weight.data(), &dcols, &mut dx, cin, cout * TAPS, p);
            DenseArray::new(vec![cin, b, n, m], dx).expect("shape preserved")
        });
        (TransposedConv2d { weight: gw, bias: gb }, dx)
    }
}

impl Params for TransposedConv2d {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DenseArray,
    pub bias: DenseArray,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense {
            weight: DenseArray::glorot(&[inputs, outputs], inputs, outputs, rng),
            bias: DenseArray::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &DenseArray) -> Result<DenseArray> {
        if x.rank() != 2 || x.cols() != self.inputs() {
            return Err(SemiseError::dimension("dense", x.shape(), self.weight.shape()));
        }
        let (b, o) = (x.rows(), self.outputs());
        let mut y = vec![0.0; b * o];
        for row in y.chunks_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        gemm_nn(x.data(), self.weight.data(), &mut y, b, self.inputs(), o);
        DenseArray::new(vec![b, o], y)
    }

    pub fn backward(&self, x: &DenseArray, dy: &DenseArray) -> (Dense, DenseArray) {
        let (b, i, o) = (x.rows(), self.inputs(), self.outputs());
        let mut gw = DenseArray::zeros(&[i, o]);
        gemm_tn(x.data(), dy.data(), gw.data_mut(), i, b, o);
        let mut gb = vec![0.0; o];
        for row in dy.data().chunks(o) {
            gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
        let mut dx = DenseArray::zeros(&[b, i]);
        gemm_nt(dy.data(), self.weight.data(), dx.data_mut(), b, o, i);
        (
            Dense {
                weight: gw,
                bias: DenseArray::vector(gb),
            },
            dx,
        )
    }
}

impl Params for Dense {
    fn named(&self) -> Vec<(String, &DenseArray)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

pub fn relu(x: &DenseArray) -> DenseArray {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &DenseArray, dy: &DenseArray) -> DenseArray {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect();
    DenseArray::new(out.shape().to_vec(), data).expect("same shape")
}

/// `[C, B, H, W] → [B, C]` spatial mean.
pub fn global_avg_pool(x: &DenseArray) -> DenseArray {
    let s = x.shape();
    let (c, b, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = DenseArray::zeros(&[b, c]);
    for ci in 0..c {
        for bi in 0..b {
            let plane = &x.data()[(ci * b + bi) * hw..][..hw];
            out.data_mut()[bi * c + ci] = plane.iter().sum::<f64>() / hw as f64;
        }
    }
    out
}

pub fn global_avg_pool_backward(in_shape: &[usize], dy: &DenseArray) -> DenseArray {
    let (c, b, hw) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
    let mut dx = DenseArray::zeros(in_shape);
    for ci in 0..c {
        for bi in 0..b {
            let g = dy.data()[bi * c + ci] / hw as f64;
            dx.data_mut()[(ci * b + bi) * hw..][..hw].fill(g);
        }
    }
    dx
}

/// Row-wise L2 normalization; returns the normalized rows and the input norms.
pub fn l2_normalize_rows(x: &DenseArray, context: &'static str) -> Result<(DenseArray, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt();
        if !n.is_finite() {
            return Err(SemiseError::NonFinite(context));
        }
        if n == 0.0 {
            return Err(SemiseError::degenerate(context, i));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// `du = (dy − y (y·dy)) / ‖u‖` per row.
pub fn l2_normalize_backward(y: &DenseArray, norms: &[f64], dy: &DenseArray) -> DenseArray {
    let mut dx = DenseArray::zeros(y.shape());
    for (i, &n) in norms.iter().enumerate() {
        let (yr, gr) = (y.row(i), dy.row(i));
        let yg = dot(yr, gr);
        for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *d = (gv - yv * yg) / n;
        }
    }
    dx
}

/// Inverted-dropout mask: entries are `0` or `1 / keep`.
pub fn dropout_mask(len: usize, keep: f64, rng: &mut Rng) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}
