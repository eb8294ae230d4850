//! Parameter arena, Adam, and the handful of differentiable ops the networks are built from.
//!
//! Activations are kept as row-major 2-D arrays whose rows enumerate (frame, subject[, joint])
//! in that nesting order. Every op has an explicit backward that accumulates parameter
//! gradients into a [`Grads`] buffer mirroring the [`Params`] layout.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors, all stored 2-D (biases are 1×n).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform matrix.
    pub fn add_weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound));
        self.add(name, w)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((1, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradient buffer with the same layout as a [`Params`].
#[derive(Clone, Debug)]
pub struct Grads(pub Vec<Array2<f64>>);

impl Grads {
    pub fn zeros_like(p: &Params) -> Self {
        Self(p.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Adam with bias correction and a per-parameter learning-rate multiplier. A zero multiplier freezes.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    scale: Vec<f64>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
            v: params.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
            scale: vec![1.0; params.len()],
        }
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, params: &Params, prefix: &str) {
        self.scale_prefix(params, prefix, 0.0);
    }

    /// Multiplies the learning rate of every parameter whose name starts with `prefix`.
    pub fn scale_prefix(&mut self, params: &Params, prefix: &str, factor: f64) {
        for (s, name) in self.scale.iter_mut().zip(&params.names) {
            if name.starts_with(prefix) {
                *s *= factor;
            }
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step_size = self.lr / bc1;
        for (k, p) in params.values.iter_mut().enumerate() {
            if self.scale[k] == 0.0 {
                continue;
            }
            let step_size = step_size * self.scale[k];
            Zip::from(p)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(&grads.0[k])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step_size * *m / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// ops

/// y = x W (+ b)
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array2<f64>>) -> Array2<f64> {
    let mut y = x.dot(w);
    if let Some(b) = b {
        y += &b.row(0);
    }
    y
}

/// Accumulates dW, db and returns dx.
pub fn linear_backward(x: &Array2<f64>, w: &Array2<f64>, dy: &Array2<f64>, dw: &mut Array2<f64>, db: Option<&mut Array2<f64>>) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    if let Some(db) = db {
        let mut row = db.row_mut(0);
        row += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w.t())
}

/// Same as [`linear_backward`] without computing dx.
pub fn linear_backward_params(x: &Array2<f64>, dy: &Array2<f64>, dw: &mut Array2<f64>, db: Option<&mut Array2<f64>>) {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    if let Some(db) = db {
        let mut row = db.row_mut(0);
        row += &dy.sum_axis(Axis(0));
    }
}

pub fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes dy wherever the forward output was clamped.
pub fn relu_backward(out: &Array2<f64>, dy: &mut Array2<f64>) {
    Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Zeroes rows whose mask entry is false.
pub fn mask_rows(x: &mut Array2<f64>, mask: &[bool]) {
    debug_assert_eq!(x.nrows(), mask.len());
    for (mut row, &keep) in x.rows_mut().into_iter().zip(mask) {
        if !keep {
            row.fill(0.0);
        }
    }
}

/// Row mask repeated `k` times per entry (e.g. per-joint rows).
pub fn expand_mask(mask: &[bool], k: usize) -> Vec<bool> {
    mask.iter().flat_map(|&m| std::iter::repeat_n(m, k)).collect()
}

/// Full temporal convolution over row blocks of size `stride` ("same" zero padding).
/// `w` stacks the kernel taps vertically: rows [tau*c_in, (tau+1)*c_in) hold tap tau.
pub fn temporal_conv(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array2<f64>>, stride: usize, kernel: usize) -> Array2<f64> {
    let (rows, c_in) = x.dim();
    let frames = rows / stride;
    let half = (kernel / 2) as isize;
    let mut y = Array2::zeros((rows, w.ncols()));
    for tau in 0..kernel {
        let off = tau as isize - half;
        let (lo, hi) = valid_range(frames, off);
        if lo >= hi {
            continue;
        }
        let wt = w.slice(s![tau * c_in..(tau + 1) * c_in, ..]);
        let src = x.slice(s![((lo as isize + off) as usize) * stride..((hi as isize + off) as usize) * stride, ..]);
        let mut dst = y.slice_mut(s![lo * stride..hi * stride, ..]);
        ndarray::linalg::general_mat_mul(1.0, &src, &wt, 1.0, &mut dst);
    }
    if let Some(b) = b {
        y += &b.row(0);
    }
    y
}

pub fn temporal_conv_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    stride: usize,
    kernel: usize,
    dw: &mut Array2<f64>,
    db: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let (rows, c_in) = x.dim();
    let frames = rows / stride;
    let half = (kernel / 2) as isize;
    let mut dx = Array2::zeros((rows, c_in));
    for tau in 0..kernel {
        let off = tau as isize - half;
        let (lo, hi) = valid_range(frames, off);
        if lo >= hi {
            continue;
        }
        let src_rows = ((lo as isize + off) as usize) * stride..((hi as isize + off) as usize) * stride;
        let g = dy.slice(s![lo * stride..hi * stride, ..]);
        let wt = w.slice(s![tau * c_in..(tau + 1) * c_in, ..]);
        let mut dwt = dw.slice_mut(s![tau * c_in..(tau + 1) * c_in, ..]);
        ndarray::linalg::general_mat_mul(1.0, &x.slice(s![src_rows.clone(), ..]).t(), &g, 1.0, &mut dwt);
        let mut dst = dx.slice_mut(s![src_rows, ..]);
        ndarray::linalg::general_mat_mul(1.0, &g, &wt.t(), 1.0, &mut dst);
    }
    if let Some(db) = db {
        let mut row = db.row_mut(0);
        row += &dy.sum_axis(Axis(0));
    }
    dx
}

/// Output frames whose tap at offset `off` reads an in-range input frame.
fn valid_range(frames: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (frames as isize - off.max(0)).max(0) as usize;
    (lo.min(frames), hi)
}

/// Depthwise temporal convolution: each channel has its own `kernel` taps (w is kernel×C).
pub fn depthwise_temporal_conv(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array2<f64>>, stride: usize) -> Array2<f64> {
    let kernel = w.nrows();
    let frames = x.nrows() / stride;
    let half = (kernel / 2) as isize;
    let mut y = Array2::zeros(x.raw_dim());
    for tau in 0..kernel {
        let off = tau as isize - half;
        let (lo, hi) = valid_range(frames, off);
        if lo >= hi {
            continue;
        }
        let src = x.slice(s![((lo as isize + off) as usize) * stride..((hi as isize + off) as usize) * stride, ..]);
        let mut dst = y.slice_mut(s![lo * stride..hi * stride, ..]);
        let taps = w.row(tau);
        Zip::from(dst.rows_mut()).and(src.rows()).for_each(|mut d, s| {
            Zip::from(&mut d).and(&s).and(&taps).for_each(|d, &s, &k| *d += s * k);
        });
    }
    if let Some(b) = b {
        y += &b.row(0);
    }
    y
}

pub fn depthwise_temporal_conv_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    stride: usize,
    dw: &mut Array2<f64>,
    db: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let kernel = w.nrows();
    let frames = x.nrows() / stride;
    let half = (kernel / 2) as isize;
    let mut dx = Array2::zeros(x.raw_dim());
    for tau in 0..kernel {
        let off = tau as isize - half;
        let (lo, hi) = valid_range(frames, off);
        if lo >= hi {
            continue;
        }
        let src_rows = ((lo as isize + off) as usize) * stride..((hi as isize + off) as usize) * stride;
        let g = dy.slice(s![lo * stride..hi * stride, ..]);
        let taps = w.row(tau);
        let mut dtaps = Array1::<f64>::zeros(w.ncols());
        Zip::from(g.rows()).and(x.slice(s![src_rows.clone(), ..]).rows()).for_each(|g, s| {
            Zip::from(&mut dtaps).and(&g).and(&s).for_each(|d, &g, &s| *d += g * s);
        });
        let mut drow = dw.row_mut(tau);
        drow += &dtaps;
        let mut dst = dx.slice_mut(s![src_rows, ..]);
        Zip::from(dst.rows_mut()).and(g.rows()).for_each(|mut d, g| {
            Zip::from(&mut d).and(&g).and(&taps).for_each(|d, &g, &k| *d += g * k);
        });
    }
    if let Some(db) = db {
        let mut row = db.row_mut(0);
        row += &dy.sum_axis(Axis(0));
    }
    dx
}

/// Non-local spatial shift: channel c of joint v reads joint (v + c) mod `joints`.
pub fn joint_shift(x: &Array2<f64>, joints: usize) -> Array2<f64> {
    let (rows, c) = x.dim();
    let mut y = Array2::zeros((rows, c));
    for base in (0..rows).step_by(joints) {
        for v in 0..joints {
            for ch in 0..c {
                y[[base + v, ch]] = x[[base + (v + ch) % joints, ch]];
            }
        }
    }
    y
}

pub fn joint_shift_backward(dy: &Array2<f64>, joints: usize) -> Array2<f64> {
    let (rows, c) = dy.dim();
    let mut dx = Array2::zeros((rows, c));
    for base in (0..rows).step_by(joints) {
        for v in 0..joints {
            for ch in 0..c {
                dx[[base + (v + ch) % joints, ch]] += dy[[base + v, ch]];
            }
        }
    }
    dx
}

/// Averages consecutive groups of `k` rows.
pub fn mean_rows(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let (rows, c) = x.dim();
    let mut y = Array2::zeros((rows / k, c));
    for (r, mut out) in y.rows_mut().into_iter().enumerate() {
        out += &x.slice(s![r * k..(r + 1) * k, ..]).sum_axis(Axis(0));
        out /= k as f64;
    }
    y
}

pub fn mean_rows_backward(dy: &Array2<f64>, k: usize) -> Array2<f64> {
    let (rows, c) = dy.dim();
    let mut dx = Array2::zeros((rows * k, c));
    for r in 0..rows {
        let g = dy.row(r).mapv(|v| v / k as f64);
        for mut row in dx.slice_mut(s![r * k..(r + 1) * k, ..]).rows_mut() {
            row.assign(&g);
        }
    }
    dx
}

/// Per-frame propagation y_t = A_t x_t with symmetric N×N operators.
pub fn graph_aggregate(adj: &[Array2<f64>], x: &Array2<f64>) -> Array2<f64> {
    let n = adj.first().map_or(0, Array2::nrows);
    let mut y = Array2::zeros(x.raw_dim());
    for (t, a) in adj.iter().enumerate() {
        let rows = t * n..(t + 1) * n;
        let mut dst = y.slice_mut(s![rows.clone(), ..]);
        ndarray::linalg::general_mat_mul(1.0, a, &x.slice(s![rows, ..]), 0.0, &mut dst);
    }
    y
}

/// Backward of [`graph_aggregate`]; operators are symmetric so Aᵀ = A.
pub fn graph_aggregate_backward(adj: &[Array2<f64>], dy: &Array2<f64>) -> Array2<f64> {
    graph_aggregate(adj, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn view_rows<'a>(x: &'a Array2<f64>, rows: std::ops::Range<usize>) -> ArrayView2<'a, f64> {
    x.slice(s![rows, ..])
}
