//! Self-supervised position-swap pretext task: the swap transform, neighbor clusters,
//! the recovery decoder and the stage-1 training loop.
//!
//! Nothing in this module reads ground-truth groups: it only sees [`PretextSample`]s,
//! which carry features and geometry but no partition.

use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::SceneGraph;
use crate::error::{Error, Result};
use crate::features::{self, CoordMode, FeatureBlock, FEATURE_DIM, POSITION_DIM};
use crate::model::{mix_seed, Model, TrainReport};
use crate::nn::{self, Adam, Grads, ParamId, Params};
use crate::scene::SceneClip;

/// A derangement over a random subset of the present subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapSpec {
    /// `permutation[a]` is the index whose position `a` takes; identity outside `selected`.
    pub permutation: Vec<usize>,
    pub selected: Vec<usize>,
    pub ratio: f64,
    /// Uniform noise half-width as a fraction of the scene diagonal.
    pub noise_eps: f64,
    pub seed: u64,
    /// Set when fewer than two subjects were selected and the swap is the identity.
    pub degenerate: bool,
}

impl SwapSpec {
    pub fn identity(count: usize, ratio: f64, noise_eps: f64, seed: u64) -> Self {
        Self {
            permutation: (0..count).collect(),
            selected: Vec::new(),
            ratio,
            noise_eps,
            seed,
            degenerate: true,
        }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.permutation.len()];
        for (a, &b) in self.permutation.iter().enumerate() {
            inv[b] = a;
        }
        Self {
            permutation: inv,
            ..self.clone()
        }
    }

    pub fn with_noise(mut self, noise_eps: f64) -> Self {
        self.noise_eps = noise_eps;
        self
    }
}

/// Selects round(ratio * present_count) subjects and a uniformly random derangement over them.
pub fn select_swap_set(present_count: usize, ratio: f64, noise_eps: f64, seed: u64) -> Result<SwapSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Validation(format!("swap ratio {ratio} not in [0, 1]")));
    }
    let count = (ratio * present_count as f64).round() as usize;
    if count < 2 {
        return Ok(SwapSpec::identity(present_count, ratio, noise_eps, seed));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..present_count).collect();
    pool.shuffle(&mut rng);
    let mut selected = pool[..count].to_vec();
    selected.sort_unstable();
    // rejection sampling gives a uniform derangement; expected ~e shuffles
    let mut targets = selected.clone();
    loop {
        targets.shuffle(&mut rng);
        if targets.iter().zip(&selected).all(|(a, b)| a != b) {
            break;
        }
    }
    let mut permutation: Vec<usize> = (0..present_count).collect();
    for (&a, &b) in selected.iter().zip(&targets) {
        permutation[a] = b;
    }
    Ok(SwapSpec {
        permutation,
        selected,
        ratio,
        noise_eps,
        seed,
        degenerate: false,
    })
}

/// Moves each selected subject onto its partner's trajectory and jitters it.
///
/// `subjects[a]` is the slot that spec index `a` refers to. Frames in which either
/// side of a swap is absent are left unchanged.
pub fn swap_centers(centers: &Array3<f64>, presence: &[bool], subjects: &[usize], spec: &SwapSpec, extent: (f64, f64)) -> Array3<f64> {
    let (frames, n) = (centers.shape()[0], centers.shape()[1]);
    let mut out = centers.clone();
    if spec.degenerate {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_5a1f);
    let amp = spec.noise_eps * extent.0.hypot(extent.1);
    for t in 0..frames {
        for &a in &spec.selected {
            let (dst, src) = (subjects[a], subjects[spec.permutation[a]]);
            let (nx, ny) = if amp > 0.0 {
                (rng.gen_range(-amp..=amp), rng.gen_range(-amp..=amp))
            } else {
                (0.0, 0.0)
            };
            if presence[t * n + dst] && presence[t * n + src] {
                out[[t, dst, 0]] = centers[[t, src, 0]] + nx;
                out[[t, dst, 1]] = centers[[t, src, 1]] + ny;
            }
        }
    }
    out
}

/// Geometry and features of one clip with no access to labels.
#[derive(Clone, Debug)]
pub struct PretextSample {
    pub clip_id: String,
    pub block: FeatureBlock,
    pub centers: Array3<f64>,
    pub extent: (f64, f64),
    pub coord_mode: CoordMode,
    pub subjects: Vec<usize>,
}

impl PretextSample {
    pub fn from_clip(clip: &SceneClip, mode: CoordMode) -> Result<Self> {
        clip.validate()?;
        Ok(Self {
            clip_id: clip.clip_id.clone(),
            block: features::assemble_feature_block_with(clip, mode)?,
            centers: features::centers(clip),
            extent: clip.extent,
            coord_mode: mode,
            subjects: clip.present_anywhere(),
        })
    }

    pub fn frames(&self) -> usize {
        self.block.frames()
    }

    pub fn slots(&self) -> usize {
        self.block.slots()
    }
}

/// Transformed sample: K untouched, P recomputed from swapped centers.
pub struct SwappedInput {
    pub block: FeatureBlock,
    pub centers: Array3<f64>,
    pub graph: SceneGraph,
}

pub fn apply_swap(sample: &PretextSample, spec: &SwapSpec, neighbor_radius: f64) -> Result<SwappedInput> {
    if spec.permutation.len() != sample.subjects.len() {
        return Err(Error::Validation(format!(
            "swap spec covers {} subjects, sample has {}",
            spec.permutation.len(),
            sample.subjects.len()
        )));
    }
    let centers = swap_centers(&sample.centers, &sample.block.presence, &sample.subjects, spec, sample.extent);
    let position = features::position_block(&centers, &sample.block.presence, sample.extent, sample.coord_mode)?;
    let block = FeatureBlock {
        skeleton: sample.block.skeleton.clone(),
        position,
        presence: sample.block.presence.clone(),
    };
    let graph = SceneGraph::radius_graph(&centers, &block.presence, sample.extent, neighbor_radius);
    Ok(SwappedInput { block, centers, graph })
}

/// A center subject paired with its within-radius neighbors in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborCluster {
    pub frame: usize,
    pub center: usize,
    pub neighbors: Vec<usize>,
    pub center_feature: Vec<f64>,
    pub neighbor_features: Vec<Vec<f64>>,
}

/// Neighbors are present subjects closer than `radius` × scene diagonal.
pub fn neighbor_cluster(clip: &SceneClip, frame: usize, center: usize, radius: f64) -> Result<NeighborCluster> {
    if frame >= clip.frames || center >= clip.slots || !clip.is_present(frame, center) {
        return Err(Error::Validation(format!("subject {center} is not present in frame {frame}")));
    }
    let cutoff = radius * clip.diagonal();
    let c = clip.center(frame, center);
    let neighbors: Vec<usize> = clip
        .present_in_frame(frame)
        .filter(|&j| j != center)
        .filter(|&j| {
            let p = clip.center(frame, j);
            (p[0] - c[0]).hypot(p[1] - c[1]) < cutoff
        })
        .collect();
    let block = features::assemble_feature_block(clip)?;
    let v = block.v();
    let row = |i: usize| v.slice(s![frame, i, ..]).to_vec();
    debug_assert_eq!(v.shape()[2], FEATURE_DIM);
    Ok(NeighborCluster {
        frame,
        center,
        center_feature: row(center),
        neighbor_features: neighbors.iter().map(|&j| row(j)).collect(),
        neighbors,
    })
}

// ---------------------------------------------------------------------------
// Recovery decoder

/// Time-as-channel convolutional decoder from embeddings to positional features.
///
/// Per subject: pointwise lift to `hidden`, a convolution along the feature axis whose
/// channels are the T frames (kernel 3, residual), then a pointwise map to 32 dims.
#[derive(Clone, Debug)]
pub struct RecoveryHead {
    pub frames: usize,
    pub hidden: usize,
    w_in: ParamId,
    b_in: ParamId,
    w_txp: ParamId,
    b_txp: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

const TXP_KERNEL: usize = 3;

pub struct RecoveryCache {
    slots: usize,
    presence: Vec<bool>,
    e: Array2<f64>,
    y: Array2<f64>,
    shifted: Vec<Array2<f64>>,
    z: Array2<f64>,
}

impl RecoveryHead {
    pub fn new(embed_dim: usize, hidden: usize, frames: usize, params: &mut Params, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let w_in = params.add_weight(format!("{prefix}w_in"), embed_dim, hidden, embed_dim, hidden, rng);
        let b_in = params.add_bias(format!("{prefix}b_in"), hidden);
        let w_txp = params.add_weight(format!("{prefix}w_txp"), frames, TXP_KERNEL * frames, TXP_KERNEL * frames, frames, rng);
        params.get_mut(w_txp).mapv_inplace(|v| v * 0.5);
        let b_txp = params.add_bias(format!("{prefix}b_txp"), frames);
        let w_out = params.add_weight(format!("{prefix}w_out"), hidden, POSITION_DIM, hidden, POSITION_DIM, rng);
        let b_out = params.add_bias(format!("{prefix}b_out"), POSITION_DIM);
        Self {
            frames,
            hidden,
            w_in,
            b_in,
            w_txp,
            b_txp,
            w_out,
            b_out,
        }
    }

    fn check(&self, params: &Params, embed_dim: usize) -> Result<()> {
        let expect = [
            (self.w_in, (embed_dim, self.hidden)),
            (self.b_in, (1, self.hidden)),
            (self.w_txp, (self.frames, TXP_KERNEL * self.frames)),
            (self.b_txp, (1, self.frames)),
            (self.w_out, (self.hidden, POSITION_DIM)),
            (self.b_out, (1, POSITION_DIM)),
        ];
        for (id, shape) in expect {
            if id.0 >= params.len() || params.get(id).dim() != shape {
                return Err(Error::State(format!("recovery parameter #{} missing or mis-shaped", id.0)));
            }
        }
        Ok(())
    }

    /// Shifts each hidden-wide block of a (T, N*hidden) matrix by `delta - 1` along features.
    fn feature_shift(&self, y: &Array2<f64>, slots: usize, delta: usize) -> Array2<f64> {
        let h = self.hidden;
        let mut out = Array2::zeros(y.raw_dim());
        for n in 0..slots {
            for c in 0..h {
                let src = c as isize + delta as isize - 1;
                if src < 0 || src >= h as isize {
                    continue;
                }
                out.column_mut(n * h + c).assign(&y.column(n * h + src as usize));
            }
        }
        out
    }

    fn feature_unshift(&self, d: &Array2<f64>, slots: usize, delta: usize, acc: &mut Array2<f64>) {
        let h = self.hidden;
        for n in 0..slots {
            for c in 0..h {
                let src = c as isize + delta as isize - 1;
                if src < 0 || src >= h as isize {
                    continue;
                }
                let mut col = acc.column_mut(n * h + src as usize);
                col += &d.column(n * h + c);
            }
        }
    }

    /// P̂ as a T×N×32 array; `e` holds (T*N)×C_e rows.
    pub fn forward(&self, params: &Params, e: &Array2<f64>, presence: &[bool]) -> Result<(Array3<f64>, RecoveryCache)> {
        self.check(params, e.ncols())?;
        let rows = e.nrows();
        if !rows.is_multiple_of(self.frames) || presence.len() != rows {
            return Err(Error::Validation(format!(
                "recovery decoder built for T={} got {} rows",
                self.frames, rows
            )));
        }
        let slots = rows / self.frames;
        let mut y = nn::linear(e, params.get(self.w_in), Some(params.get(self.b_in)));
        nn::relu(&mut y);
        nn::mask_rows(&mut y, presence);
        // (T*N, H) row-major is exactly (T, N*H)
        let y_wide = y.to_shape((self.frames, slots * self.hidden)).expect("contiguous").to_owned();
        let w = params.get(self.w_txp);
        let mut z_wide = Array2::<f64>::zeros(y_wide.raw_dim());
        let mut shifted = Vec::with_capacity(TXP_KERNEL);
        for delta in 0..TXP_KERNEL {
            let ys = self.feature_shift(&y_wide, slots, delta);
            let wd = w.slice(s![.., delta * self.frames..(delta + 1) * self.frames]);
            ndarray::linalg::general_mat_mul(1.0, &wd, &ys, 1.0, &mut z_wide);
            shifted.push(ys);
        }
        let bt = params.get(self.b_txp).row(0).to_owned();
        z_wide += &bt.insert_axis(Axis(1));
        let mut z = z_wide.into_shape_with_order((rows, self.hidden)).expect("contiguous");
        nn::relu(&mut z);
        z += &y;
        nn::mask_rows(&mut z, presence);
        let mut p = nn::linear(&z, params.get(self.w_out), Some(params.get(self.b_out)));
        nn::mask_rows(&mut p, presence);
        let p3 = p.into_shape_with_order((self.frames, slots, POSITION_DIM)).expect("contiguous");
        Ok((
            p3,
            RecoveryCache {
                slots,
                presence: presence.to_vec(),
                e: e.clone(),
                y,
                shifted,
                z,
            },
        ))
    }

    /// Accumulates gradients and returns dL/dE rows.
    pub fn backward(&self, params: &Params, cache: &RecoveryCache, dp: &Array3<f64>, grads: &mut Grads) -> Array2<f64> {
        let rows = cache.e.nrows();
        let slots = cache.slots;
        let mut dp = dp.to_shape((rows, POSITION_DIM)).expect("contiguous").to_owned();
        nn::mask_rows(&mut dp, &cache.presence);
        let mut dz = nn::linear_backward(&cache.z, params.get(self.w_out), &dp, grads.get_mut(self.w_out), None);
        {
            let mut row = grads.get_mut(self.b_out).row_mut(0);
            row += &dp.sum_axis(Axis(0));
        }
        nn::mask_rows(&mut dz, &cache.presence);
        // residual
        let mut dy = dz.clone();
        // relu on z - y == pre-residual activation
        let act = &cache.z - &cache.y;
        nn::relu_backward(&act, &mut dz);
        let dz_wide = dz.to_shape((self.frames, slots * self.hidden)).expect("contiguous").to_owned();
        {
            let mut row = grads.get_mut(self.b_txp).row_mut(0);
            row += &dz_wide.sum_axis(Axis(1));
        }
        let w = params.get(self.w_txp).clone();
        let mut dy_wide = Array2::<f64>::zeros(dz_wide.raw_dim());
        for delta in 0..TXP_KERNEL {
            let cols = delta * self.frames..(delta + 1) * self.frames;
            {
                let dw = grads.get_mut(self.w_txp);
                let mut dwd = dw.slice_mut(s![.., cols.clone()]);
                ndarray::linalg::general_mat_mul(1.0, &dz_wide, &cache.shifted[delta].t(), 1.0, &mut dwd);
            }
            let dys = w.slice(s![.., cols]).t().dot(&dz_wide);
            self.feature_unshift(&dys, slots, delta, &mut dy_wide);
        }
        dy += &dy_wide.into_shape_with_order((rows, self.hidden)).expect("contiguous");
        nn::relu_backward(&cache.y, &mut dy);
        nn::mask_rows(&mut dy, &cache.presence);
        {
            let mut row = grads.get_mut(self.b_in).row_mut(0);
            row += &dy.sum_axis(Axis(0));
        }
        nn::linear_backward(&cache.e, params.get(self.w_in), &dy, grads.get_mut(self.w_in), None)
    }
}

// ---------------------------------------------------------------------------
// Stage 1

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub swap_ratio: f64,
    pub noise_eps: f64,
    /// Supervise only swapped subjects instead of every present subject.
    pub swapped_only_loss: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-4,
            batch_size: 1,
            swap_ratio: 0.1,
            noise_eps: 0.01,
            swapped_only_loss: false,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("stage-1 epochs, learning rate and batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.swap_ratio) || !(self.noise_eps >= 0.0) {
            return Err(Error::Config("swap ratio must be in [0,1] and noise non-negative".into()));
        }
        Ok(())
    }
}

/// Row mask for the recovery loss, and its element count.
fn loss_rows(sample: &PretextSample, spec: &SwapSpec, swapped_only: bool) -> Vec<bool> {
    let mut rows = sample.block.presence.clone();
    if swapped_only {
        let n = sample.slots();
        let swapped: Vec<bool> = (0..n)
            .map(|i| spec.selected.iter().any(|&a| sample.subjects[a] == i))
            .collect();
        for (k, r) in rows.iter_mut().enumerate() {
            *r = *r && swapped[k % n];
        }
    }
    rows
}

fn masked_mse(pred: &Array3<f64>, target: &Array3<f64>, rows: &[bool]) -> (f64, Array3<f64>, usize) {
    let (t, n, c) = pred.dim();
    let mut grad = Array3::zeros((t, n, c));
    let count = rows.iter().filter(|&&r| r).count() * c;
    if count == 0 {
        return (0.0, grad, 0);
    }
    let mut sum = 0.0;
    for ti in 0..t {
        for i in 0..n {
            if !rows[ti * n + i] {
                continue;
            }
            for k in 0..c {
                let d = pred[[ti, i, k]] - target[[ti, i, k]];
                sum += d * d;
                grad[[ti, i, k]] = 2.0 * d / count as f64;
            }
        }
    }
    (sum / count as f64, grad, count)
}

/// One forward/backward pass of the pretext objective; returns the loss.
pub fn pretext_step(model: &Model, sample: &PretextSample, spec: &SwapSpec, swapped_only: bool, grads: &mut Grads) -> Result<f64> {
    let swapped = apply_swap(sample, spec, model.phi.cfg.neighbor_radius)?;
    let (emb, ecache) = model.phi.forward(&model.params, &swapped.block, &swapped.graph)?;
    let e_rows = emb.rows();
    let (p_hat, rcache) = model.bs.forward(&model.params, &e_rows, &swapped.block.presence)?;
    let rows = loss_rows(sample, spec, swapped_only);
    let (loss, dp, _) = masked_mse(&p_hat, &sample.block.position, &rows);
    let de = model.bs.backward(&model.params, &rcache, &dp, grads);
    model.phi.backward(&model.params, &ecache, &de, grads);
    Ok(loss)
}

/// Recovered positional features for a (possibly swapped) sample.
pub fn recover(model: &Model, block: &FeatureBlock, graph: &SceneGraph) -> Result<Array3<f64>> {
    let (emb, _) = model.phi.forward(&model.params, block, graph)?;
    Ok(model.bs.forward(&model.params, &emb.rows(), &block.presence)?.0)
}

/// Swap spec used for sample `index` in `epoch` of a run seeded with `seed`.
pub fn epoch_swap(sample: &PretextSample, ratio: f64, noise_eps: f64, seed: u64, epoch: usize, index: usize) -> Result<SwapSpec> {
    select_swap_set(sample.subjects.len(), ratio, noise_eps, mix_seed(seed, &[epoch as u64, index as u64]))
}

pub fn train_stage1(model: &mut Model, data: &[PretextSample], cfg: &Stage1Config) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("stage-1 dataset is empty".into()));
    }
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[1]));
    let started = Instant::now();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros_like(&model.params);
            for &idx in batch {
                let spec = epoch_swap(&data[idx], cfg.swap_ratio, cfg.noise_eps, cfg.seed, epoch, idx)?;
                let loss = pretext_step(model, &data[idx], &spec, cfg.swapped_only_loss, &mut grads)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        msg: format!("non-finite recovery loss on clip {}", data[idx].clip_id),
                    });
                }
                total += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            opt.step(&mut model.params, &grads);
        }
        report.push(epoch, total / data.len() as f64, cfg.learning_rate, started.elapsed().as_secs_f64());
    }
    Ok(report)
}

/// Held-out recovery error against the "leave swapped positions as they are" baseline,
/// over every present subject and over the swapped subjects alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEval {
    pub model_mse: f64,
    pub baseline_mse: f64,
    pub swapped_model_mse: f64,
    pub swapped_baseline_mse: f64,
}

impl RecoveryEval {
    pub fn ratio(&self) -> f64 {
        self.model_mse / self.baseline_mse
    }

    pub fn swapped_ratio(&self) -> f64 {
        self.swapped_model_mse / self.swapped_baseline_mse
    }
}

/// Micro-averaged over every evaluated element of every sample.
pub fn evaluate_recovery(model: &Model, data: &[PretextSample], ratio: f64, noise_eps: f64, seed: u64) -> Result<RecoveryEval> {
    let mut sums = [0.0f64; 4];
    let (mut count, mut swapped_count) = (0usize, 0usize);
    for (idx, sample) in data.iter().enumerate() {
        let spec = select_swap_set(sample.subjects.len(), ratio, noise_eps, mix_seed(seed, &[idx as u64]))?;
        let swapped = apply_swap(sample, &spec, model.phi.cfg.neighbor_radius)?;
        let p_hat = recover(model, &swapped.block, &swapped.graph)?;
        for (k, rows) in [loss_rows(sample, &spec, false), loss_rows(sample, &spec, true)].iter().enumerate() {
            let (m, _, c) = masked_mse(&p_hat, &sample.block.position, rows);
            let (b, _, _) = masked_mse(&swapped.block.position, &sample.block.position, rows);
            sums[2 * k] += m * c as f64;
            sums[2 * k + 1] += b * c as f64;
            if k == 0 {
                count += c;
            } else {
                swapped_count += c;
            }
        }
    }
    if count == 0 || swapped_count == 0 {
        return Err(Error::Validation("no present or swapped subjects to evaluate".into()));
    }
    Ok(RecoveryEval {
        model_mse: sums[0] / count as f64,
        baseline_mse: sums[1] / count as f64,
        swapped_model_mse: sums[2] / swapped_count as f64,
        swapped_baseline_mse: sums[3] / swapped_count as f64,
    })
}
