//! Stacked multi-head attention over subject pairs, the recurrent relation head,
//! the cosine relation loss and the stage-2 training loop.

use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::SceneGraph;
use crate::error::{Error, Result};
use crate::features::{self, CoordMode, FeatureBlock};
use crate::model::{mix_seed, Model, TrainReport};
use crate::nn::{self, Adam, Grads, ParamId, Params};
use crate::scene::{relation_matrix_from_partition, SceneClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackAttConfig {
    /// Number of attention heads M.
    pub heads: usize,
    /// Projection length L per head.
    pub proj_dim: usize,
    pub gru_hidden: usize,
    /// One projection for both sides of a pair (symmetric scores). With separate
    /// query/key projections both pair orders are scored and averaged.
    pub shared_projection: bool,
}

impl Default for StackAttConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            proj_dim: 32,
            gru_hidden: 32,
            shared_projection: true,
        }
    }
}

impl StackAttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.proj_dim == 0 || self.gru_hidden == 0 {
            return Err(Error::Config("attention heads, projection and hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

/// T×N×N×M attention scores.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedAttention {
    pub u: Array4<f64>,
    pub presence: Vec<bool>,
}

pub struct AttentionCache {
    e: Array2<f64>,
    theta: Array2<f64>,
    phi: Option<Array2<f64>>,
    presence: Vec<bool>,
}

struct GruStep {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    ghn: Array2<f64>,
    h: Array2<f64>,
    out: Vec<f64>,
}

pub struct RelationCache {
    slots: usize,
    /// Directed pairs (i, j); both orders appear when projections are not shared.
    pairs: Vec<(usize, usize)>,
    weight: f64,
    steps: Vec<GruStep>,
    presence: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct GroupHead {
    pub cfg: StackAttConfig,
    pub embed_dim: usize,
    w_theta: ParamId,
    b_theta: ParamId,
    key: Option<(ParamId, ParamId)>,
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
}

/// Small θ at init keeps the unnormalised attention scores near zero.
const THETA_INIT_SCALE: f64 = 0.1;
/// A negative update-gate bias keeps the GRU out of saturation early in training.
const UPDATE_GATE_BIAS_INIT: f64 = -1.0;

fn co_present(presence: &[bool], n: usize, t: usize, i: usize, j: usize) -> bool {
    presence[t * n + i] && presence[t * n + j]
}

impl GroupHead {
    pub fn new(cfg: StackAttConfig, embed_dim: usize, params: &mut Params, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let ml = cfg.heads * cfg.proj_dim;
        let h = cfg.gru_hidden;
        // small projections keep the initial scores, which share a large common offset
        // across pairs, out of the GRU's saturated range
        let w_theta = params.add_weight(format!("{prefix}theta.w"), embed_dim, ml, embed_dim, cfg.proj_dim, rng);
        params.get_mut(w_theta).mapv_inplace(|v| v * THETA_INIT_SCALE);
        let b_theta = params.add_bias(format!("{prefix}theta.b"), ml);
        let key = if cfg.shared_projection {
            None
        } else {
            let w = params.add_weight(format!("{prefix}key.w"), embed_dim, ml, embed_dim, cfg.proj_dim, rng);
            params.get_mut(w).mapv_inplace(|v| v * THETA_INIT_SCALE);
            Some((w, params.add_bias(format!("{prefix}key.b"), ml)))
        };
        let w_ih = params.add_weight(format!("{prefix}gru.w_ih"), cfg.heads + 1, 3 * h, cfg.heads + 1, h, rng);
        let w_hh = params.add_weight(format!("{prefix}gru.w_hh"), h, 3 * h, h, h, rng);
        let b_ih = params.add_bias(format!("{prefix}gru.b_ih"), 3 * h);
        params.get_mut(b_ih).slice_mut(s![0, h..2 * h]).fill(UPDATE_GATE_BIAS_INIT);
        let b_hh = params.add_bias(format!("{prefix}gru.b_hh"), 3 * h);
        let w_fc = params.add_weight(format!("{prefix}fc.w"), h, 1, h, 1, rng);
        let b_fc = params.add_bias(format!("{prefix}fc.b"), 1);
        Ok(Self {
            cfg,
            embed_dim,
            w_theta,
            b_theta,
            key,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            w_fc,
            b_fc,
        })
    }

    fn check(&self, params: &Params) -> Result<()> {
        let (m, l, h) = (self.cfg.heads, self.cfg.proj_dim, self.cfg.gru_hidden);
        let mut expect = vec![
            (self.w_theta, (self.embed_dim, m * l)),
            (self.b_theta, (1, m * l)),
            (self.w_ih, (m + 1, 3 * h)),
            (self.w_hh, (h, 3 * h)),
            (self.b_ih, (1, 3 * h)),
            (self.b_hh, (1, 3 * h)),
            (self.w_fc, (h, 1)),
            (self.b_fc, (1, 1)),
        ];
        if let Some((w, b)) = self.key {
            expect.push((w, (self.embed_dim, m * l)));
            expect.push((b, (1, m * l)));
        }
        for (id, shape) in expect {
            if id.0 >= params.len() || params.get(id).dim() != shape {
                return Err(Error::State(format!("group head parameter #{} missing or mis-shaped", id.0)));
            }
        }
        Ok(())
    }

    fn project(&self, params: &Params, w: ParamId, b: ParamId, e: &Array2<f64>, presence: &[bool]) -> Array2<f64> {
        let mut out = nn::linear(e, params.get(w), Some(params.get(b)));
        nn::mask_rows(&mut out, presence);
        out
    }

    fn head_slice<'a>(&self, x: &'a Array2<f64>, slots: usize, t: usize, m: usize) -> ArrayView2<'a, f64> {
        let l = self.cfg.proj_dim;
        x.slice(s![t * slots..(t + 1) * slots, m * l..(m + 1) * l])
    }

    /// Score of head `m` for one embedding pair.
    pub fn attention_score(&self, params: &Params, e_i: &[f64], e_j: &[f64], m: usize) -> Result<f64> {
        self.check(params)?;
        if e_i.len() != self.embed_dim || e_j.len() != self.embed_dim || m >= self.cfg.heads {
            return Err(Error::Validation("attention score arguments do not match the head".into()));
        }
        let l = self.cfg.proj_dim;
        let proj = |w: ParamId, b: ParamId, e: &[f64]| -> Vec<f64> {
            let (w, b) = (params.get(w), params.get(b));
            (m * l..(m + 1) * l)
                .map(|c| b[[0, c]] + e.iter().enumerate().map(|(k, v)| v * w[[k, c]]).sum::<f64>())
                .collect()
        };
        let a = proj(self.w_theta, self.b_theta, e_i);
        let (kw, kb) = self.key.unwrap_or((self.w_theta, self.b_theta));
        let b = proj(kw, kb, e_j);
        Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (l as f64).sqrt())
    }

    /// Stacked attention block; pairs involving an absent subject score zero.
    pub fn stack_attention(&self, params: &Params, e: &Array2<f64>, presence: &[bool], frames: usize) -> Result<(StackedAttention, AttentionCache)> {
        self.check(params)?;
        if e.ncols() != self.embed_dim || e.nrows() != presence.len() || frames == 0 || !e.nrows().is_multiple_of(frames) {
            return Err(Error::Validation(format!(
                "embedding rows {}x{} do not match {} frames",
                e.nrows(),
                e.ncols(),
                frames
            )));
        }
        let n = e.nrows() / frames;
        let theta = self.project(params, self.w_theta, self.b_theta, e, presence);
        let phi = self.key.map(|(w, b)| self.project(params, w, b, e, presence));
        let scale = 1.0 / (self.cfg.proj_dim as f64).sqrt();
        let mut u = Array4::zeros((frames, n, n, self.cfg.heads));
        for t in 0..frames {
            for m in 0..self.cfg.heads {
                let a = self.head_slice(&theta, n, t, m);
                let b = self.head_slice(phi.as_ref().unwrap_or(&theta), n, t, m);
                let g = a.dot(&b.t());
                for i in 0..n {
                    for j in 0..n {
                        if co_present(presence, n, t, i, j) {
                            u[[t, i, j, m]] = g[[i, j]] * scale;
                        }
                    }
                }
            }
        }
        Ok((
            StackedAttention {
                u,
                presence: presence.to_vec(),
            },
            AttentionCache {
                e: e.clone(),
                theta,
                phi,
                presence: presence.to_vec(),
            },
        ))
    }

    pub fn stack_attention_backward(&self, params: &Params, cache: &AttentionCache, du: &Array4<f64>, grads: &mut Grads) -> Array2<f64> {
        let (frames, n, _, heads) = du.dim();
        let scale = 1.0 / (self.cfg.proj_dim as f64).sqrt();
        let mut dtheta = Array2::<f64>::zeros(cache.theta.raw_dim());
        let mut dphi = cache.phi.as_ref().map(|p| Array2::<f64>::zeros(p.raw_dim()));
        let l = self.cfg.proj_dim;
        for t in 0..frames {
            for m in 0..heads {
                let mut g = du.slice(s![t, .., .., m]).to_owned();
                for i in 0..n {
                    for j in 0..n {
                        if !co_present(&cache.presence, n, t, i, j) {
                            g[[i, j]] = 0.0;
                        }
                    }
                }
                g *= scale;
                let rows = t * n..(t + 1) * n;
                let cols = m * l..(m + 1) * l;
                match (&cache.phi, dphi.as_mut()) {
                    (Some(phi), Some(dphi)) => {
                        let a = self.head_slice(&cache.theta, n, t, m);
                        let b = self.head_slice(phi, n, t, m);
                        let mut dt = dtheta.slice_mut(s![rows.clone(), cols.clone()]);
                        dt += &g.dot(&b);
                        let mut dp = dphi.slice_mut(s![rows, cols]);
                        dp += &g.t().dot(&a);
                    }
                    _ => {
                        let a = self.head_slice(&cache.theta, n, t, m);
                        let sym = &g + &g.t();
                        let mut dt = dtheta.slice_mut(s![rows, cols]);
                        dt += &sym.dot(&a);
                    }
                }
            }
        }
        nn::mask_rows(&mut dtheta, &cache.presence);
        let mut de = nn::linear_backward(&cache.e, params.get(self.w_theta), &dtheta, grads.get_mut(self.w_theta), None);
        {
            let mut row = grads.get_mut(self.b_theta).row_mut(0);
            row += &dtheta.sum_axis(Axis(0));
        }
        if let (Some((w, b)), Some(mut dphi)) = (self.key, dphi) {
            nn::mask_rows(&mut dphi, &cache.presence);
            de += &nn::linear_backward(&cache.e, params.get(w), &dphi, grads.get_mut(w), None);
            let mut row = grads.get_mut(b).row_mut(0);
            row += &dphi.sum_axis(Axis(0));
        }
        de
    }

    /// R̂ (T×N×N) from attention-plus-distance features.
    pub fn predict_relations(&self, params: &Params, ud: &Array4<f64>, presence: &[bool]) -> Result<(Array3<f64>, RelationCache)> {
        self.check(params)?;
        let (frames, n, n2, c) = ud.dim();
        if n != n2 || c != self.cfg.heads + 1 || presence.len() != frames * n {
            return Err(Error::Validation(format!(
                "relation head expects T×N×N×{} input with matching presence, got {:?}",
                self.cfg.heads + 1,
                ud.dim()
            )));
        }
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if (0..frames).any(|t| co_present(presence, n, t, i, j)) {
                    pairs.push((i, j));
                    if !self.cfg.shared_projection {
                        pairs.push((j, i));
                    }
                }
            }
        }
        let weight = if self.cfg.shared_projection { 1.0 } else { 0.5 };
        let h = self.cfg.gru_hidden;
        let (w_ih, w_hh) = (params.get(self.w_ih), params.get(self.w_hh));
        let (b_ih, b_hh) = (params.get(self.b_ih).row(0), params.get(self.b_hh).row(0));
        let (w_fc, b_fc) = (params.get(self.w_fc), params.get(self.b_fc)[[0, 0]]);
        let mut r_hat = Array3::zeros((frames, n, n));
        let mut steps = Vec::with_capacity(frames);
        let mut h_prev = Array2::<f64>::zeros((pairs.len(), h));
        for t in 0..frames {
            let mut x = Array2::zeros((pairs.len(), c));
            for (p, &(i, j)) in pairs.iter().enumerate() {
                x.row_mut(p).assign(&ud.slice(s![t, i, j, ..]));
            }
            let gi = x.dot(w_ih) + b_ih;
            let gh = h_prev.dot(w_hh) + b_hh;
            let r = (&gi.slice(s![.., 0..h]) + &gh.slice(s![.., 0..h])).mapv(nn::sigmoid);
            let z = (&gi.slice(s![.., h..2 * h]) + &gh.slice(s![.., h..2 * h])).mapv(nn::sigmoid);
            let ghn = gh.slice(s![.., 2 * h..]).to_owned();
            let nn_ = (&gi.slice(s![.., 2 * h..]) + &(&r * &ghn)).mapv(f64::tanh);
            let h_new = &(1.0 - &z) * &nn_ + &(&z * &h_prev);
            let logits = h_new.dot(w_fc);
            let out: Vec<f64> = logits.column(0).iter().map(|v| nn::sigmoid(v + b_fc)).collect();
            for (p, &(i, j)) in pairs.iter().enumerate() {
                if co_present(presence, n, t, i, j) {
                    let v = weight * out[p];
                    r_hat[[t, i, j]] += v;
                    r_hat[[t, j, i]] += v;
                }
            }
            steps.push(GruStep {
                x,
                h_prev: h_prev.clone(),
                r,
                z,
                n: nn_,
                ghn,
                h: h_new.clone(),
                out,
            });
            h_prev = h_new;
        }
        Ok((
            r_hat,
            RelationCache {
                slots: n,
                pairs,
                weight,
                steps,
                presence: presence.to_vec(),
            },
        ))
    }

    /// Gradient of the loss w.r.t. the input block (distance channel included).
    pub fn predict_relations_backward(&self, params: &Params, cache: &RelationCache, dr: &Array3<f64>, grads: &mut Grads) -> Array4<f64> {
        let n = cache.slots;
        let frames = cache.steps.len();
        let h = self.cfg.gru_hidden;
        let c = self.cfg.heads + 1;
        let w_ih = params.get(self.w_ih).clone();
        let w_hh = params.get(self.w_hh).clone();
        let w_fc = params.get(self.w_fc).clone();
        let np = cache.pairs.len();
        let mut dud = Array4::zeros((frames, n, n, c));
        let mut dh_next = Array2::<f64>::zeros((np, h));
        for t in (0..frames).rev() {
            let st = &cache.steps[t];
            let mut dlogit = Array2::<f64>::zeros((np, 1));
            for (p, &(i, j)) in cache.pairs.iter().enumerate() {
                if co_present(&cache.presence, n, t, i, j) {
                    let s = st.out[p];
                    dlogit[[p, 0]] = cache.weight * (dr[[t, i, j]] + dr[[t, j, i]]) * s * (1.0 - s);
                }
            }
            *grads.get_mut(self.w_fc) += &st.h.t().dot(&dlogit);
            grads.get_mut(self.b_fc)[[0, 0]] += dlogit.sum();
            let dh = dh_next + dlogit.dot(&w_fc.t());
            let dn = &dh * &(1.0 - &st.z);
            let dz = &dh * &(&st.h_prev - &st.n);
            let mut dh_prev = &dh * &st.z;
            let dn_pre = &dn * &(1.0 - &(&st.n * &st.n));
            let dr_ = &dn_pre * &st.ghn;
            let dghn = &dn_pre * &st.r;
            let dr_pre = &dr_ * &(&st.r * &(1.0 - &st.r));
            let dz_pre = &dz * &(&st.z * &(1.0 - &st.z));
            let mut dgi = Array2::<f64>::zeros((np, 3 * h));
            dgi.slice_mut(s![.., 0..h]).assign(&dr_pre);
            dgi.slice_mut(s![.., h..2 * h]).assign(&dz_pre);
            let mut dgh = dgi.clone();
            dgi.slice_mut(s![.., 2 * h..]).assign(&dn_pre);
            dgh.slice_mut(s![.., 2 * h..]).assign(&dghn);
            *grads.get_mut(self.w_ih) += &st.x.t().dot(&dgi);
            *grads.get_mut(self.w_hh) += &st.h_prev.t().dot(&dgh);
            {
                let mut row = grads.get_mut(self.b_ih).row_mut(0);
                row += &dgi.sum_axis(Axis(0));
            }
            {
                let mut row = grads.get_mut(self.b_hh).row_mut(0);
                row += &dgh.sum_axis(Axis(0));
            }
            let dx = dgi.dot(&w_ih.t());
            dh_prev += &dgh.dot(&w_hh.t());
            for (p, &(i, j)) in cache.pairs.iter().enumerate() {
                let mut slot = dud.slice_mut(s![t, i, j, ..]);
                slot += &dx.row(p);
            }
            dh_next = dh_prev;
        }
        dud
    }
}

/// Concatenates the distance channel as the last feature of each pair.
pub fn append_distance(att: &StackedAttention, distance: &Array3<f64>) -> Result<Array4<f64>> {
    let (frames, n, _, m) = att.u.dim();
    if distance.dim() != (frames, n, n) {
        return Err(Error::Validation(format!(
            "distance channel {:?} does not match attention block {:?}",
            distance.dim(),
            att.u.dim()
        )));
    }
    let mut out = Array4::zeros((frames, n, n, m + 1));
    out.slice_mut(s![.., .., .., ..m]).assign(&att.u);
    out.slice_mut(s![.., .., .., m]).assign(distance);
    Ok(out)
}

/// Entries that take part in the loss: distinct subjects present together.
pub fn pair_mask(presence: &[bool], frames: usize, slots: usize) -> Array3<bool> {
    Array3::from_shape_fn((frames, slots, slots), |(t, i, j)| i != j && co_present(presence, slots, t, i, j))
}

/// 1 - cos(R̂, R) over masked entries, with its gradient w.r.t. R̂.
///
/// When the masked target is all zero the cosine is undefined; the loss then falls
/// back to the mean squared prediction so that "no groups" is still learnable.
pub fn cosine_relation_loss(pred: &Array3<f64>, target: &Array3<f64>, mask: &Array3<bool>) -> Result<(f64, Array3<f64>)> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::Validation(format!(
            "prediction {:?} and target {:?} shapes differ",
            pred.dim(),
            target.dim()
        )));
    }
    let mut grad = Array3::zeros(pred.raw_dim());
    let (mut dot, mut pp, mut tt, mut count) = (0.0, 0.0, 0.0, 0usize);
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            dot += p * t;
            pp += p * p;
            tt += t * t;
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    if tt == 0.0 {
        let loss = pp / count as f64;
        ndarray::Zip::from(&mut grad).and(pred).and(mask).for_each(|g, &p, &m| {
            if m {
                *g = 2.0 * p / count as f64;
            }
        });
        return Ok((loss, grad));
    }
    let eps = 1e-12;
    let (np, nt) = (pp.sqrt().max(eps), tt.sqrt());
    let cos = dot / (np * nt);
    ndarray::Zip::from(&mut grad).and(pred).and(target).and(mask).for_each(|g, &p, &t, &m| {
        if m {
            *g = -(t / (np * nt) - cos * p / (np * np));
        }
    });
    Ok((1.0 - cos, grad))
}

/// Cosine loss plus `anchor * (1 - a)^2`, where `a = <R̂, R> / <R, R>` is the
/// least-squares scale of R̂ along R (the mean positive score for binary R).
///
/// The cosine term fixes only the direction of R̂; the anchor fixes its length so that
/// grouped pairs land near 1 and a fixed binarization threshold is meaningful.
pub fn anchored_relation_loss(pred: &Array3<f64>, target: &Array3<f64>, mask: &Array3<bool>, anchor: f64) -> Result<(f64, Array3<f64>)> {
    let (mut loss, mut grad) = cosine_relation_loss(pred, target, mask)?;
    if anchor == 0.0 {
        return Ok((loss, grad));
    }
    let (mut pt, mut tt) = (0.0, 0.0);
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            pt += p * t;
            tt += t * t;
        }
    }
    if tt == 0.0 {
        return Ok((loss, grad));
    }
    let a = pt / tt;
    loss += anchor * (1.0 - a).powi(2);
    let k = 2.0 * anchor * (a - 1.0) / tt;
    ndarray::Zip::from(&mut grad).and(target).and(mask).for_each(|g, &t, &m| {
        if m {
            *g += k * t;
        }
    });
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Stage 2

/// A clip prepared for relation prediction.
#[derive(Clone, Debug)]
pub struct RelationSample {
    pub clip_id: String,
    pub block: FeatureBlock,
    pub graph: SceneGraph,
    pub distance: Array3<f64>,
    pub target: Option<Array3<f64>>,
}

impl RelationSample {
    pub fn from_clip(clip: &SceneClip, mode: CoordMode, neighbor_radius: f64) -> Result<Self> {
        clip.validate()?;
        let block = features::assemble_feature_block_with(clip, mode)?;
        let centers = features::centers(clip);
        let graph = SceneGraph::radius_graph(&centers, &block.presence, clip.extent, neighbor_radius);
        let distance = features::distance_channel(&centers, &block.presence, clip.extent);
        let target = match &clip.gt {
            Some(parts) => {
                let mut r = Array3::zeros((clip.frames, clip.slots, clip.slots));
                for (t, part) in parts.iter().enumerate() {
                    r.slice_mut(s![t, .., ..]).assign(&relation_matrix_from_partition(part, clip.slots)?);
                }
                Some(r)
            }
            None => None,
        };
        Ok(Self {
            clip_id: clip.clip_id.clone(),
            block,
            graph,
            distance,
            target,
        })
    }

    pub fn frames(&self) -> usize {
        self.block.frames()
    }

    pub fn slots(&self) -> usize {
        self.block.slots()
    }

    pub fn mask(&self) -> Array3<bool> {
        pair_mask(&self.block.presence, self.frames(), self.slots())
    }
}

/// Full forward pass through φ and the group head, caching for backprop.
pub struct RelationForward {
    pub r_hat: Array3<f64>,
    embed: crate::embedding::EmbedCache,
    att: AttentionCache,
    rel: RelationCache,
}

pub fn relation_forward(model: &Model, sample: &RelationSample) -> Result<RelationForward> {
    let (emb, embed) = model.phi.forward(&model.params, &sample.block, &sample.graph)?;
    let (att_block, att) = model
        .head
        .stack_attention(&model.params, &emb.rows(), &sample.block.presence, sample.frames())?;
    let ud = append_distance(&att_block, &sample.distance)?;
    let (r_hat, rel) = model.head.predict_relations(&model.params, &ud, &sample.block.presence)?;
    Ok(RelationForward { r_hat, embed, att, rel })
}

pub fn relation_backward(model: &Model, fwd: &RelationForward, dr: &Array3<f64>, grads: &mut Grads) {
    let dud = model.head.predict_relations_backward(&model.params, &fwd.rel, dr, grads);
    let m = model.head.cfg.heads;
    let du = dud.slice(s![.., .., .., ..m]).to_owned();
    let de = model.head.stack_attention_backward(&model.params, &fwd.att, &du, grads);
    model.phi.backward(&model.params, &fwd.embed, &de, grads);
}

/// Loss of one labeled sample plus accumulated gradients.
pub fn relation_step(model: &Model, sample: &RelationSample, anchor: f64, grads: &mut Grads) -> Result<f64> {
    let target = sample
        .target
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("clip {} has no group labels", sample.clip_id)))?;
    let fwd = relation_forward(model, sample)?;
    let (loss, dr) = anchored_relation_loss(&fwd.r_hat, target, &sample.mask(), anchor)?;
    relation_backward(model, &fwd, &dr, grads);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Update φ together with the head; false keeps the pretrained embedding fixed.
    pub fine_tune_phi: bool,
    /// Fraction of the training clips whose labels are used.
    pub label_fraction: f64,
    /// Weight of the scale anchor added to the cosine loss; 0 trains on cosine alone.
    pub scale_anchor: f64,
    /// Learning-rate multiplier for φ while fine-tuning.
    pub phi_lr_scale: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 7e-3,
            batch_size: 1,
            fine_tune_phi: true,
            label_fraction: 1.0,
            scale_anchor: 0.1,
            phi_lr_scale: 0.01,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("stage-2 epochs, learning rate and batch size must be positive".into()));
        }
        if !(self.scale_anchor >= 0.0) {
            return Err(Error::Config("scale_anchor must be non-negative".into()));
        }
        if !(self.phi_lr_scale >= 0.0) {
            return Err(Error::Config("phi_lr_scale must be non-negative".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction {} not in (0, 1]", self.label_fraction)));
        }
        Ok(())
    }
}

/// Indices of the labeled subset. Subsets for the same seed are nested as the fraction grows.
pub fn labeled_subset(count: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x1abe1])));
    let keep = ((fraction * count as f64).round() as usize).clamp(count.min(1), count);
    let mut out = order[..keep].to_vec();
    out.sort_unstable();
    out
}

pub fn train_stage2(model: &mut Model, data: &[RelationSample], cfg: &Stage2Config) -> Result<TrainReport> {
    cfg.validate()?;
    let labeled: Vec<usize> = labeled_subset(data.len(), cfg.label_fraction, cfg.seed)
        .into_iter()
        .filter(|&i| data[i].target.is_some())
        .collect();
    if labeled.is_empty() {
        return Err(Error::Config("stage-2 needs at least one labeled clip".into()));
    }
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    opt.freeze_prefix(&model.params, crate::model::RECOVERY_PREFIX);
    let phi_scale = if cfg.fine_tune_phi { cfg.phi_lr_scale } else { 0.0 };
    opt.scale_prefix(&model.params, crate::model::PHI_PREFIX, phi_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[2]));
    let mut order = labeled.clone();
    let started = Instant::now();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros_like(&model.params);
            for &idx in batch {
                let loss = relation_step(model, &data[idx], cfg.scale_anchor, &mut grads)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        msg: format!("non-finite relation loss on clip {}", data[idx].clip_id),
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
        report.push(epoch, total / order.len() as f64, cfg.learning_rate, started.elapsed().as_secs_f64());
    }
    Ok(report)
}

/// Predicted relation matrices for one clip.
pub fn predict(model: &Model, sample: &RelationSample) -> Result<Array3<f64>> {
    Ok(relation_forward(model, sample)?.r_hat)
}

/// Pair-feature tensor built by concatenating both embeddings for every ordered pair.
/// This is the naive construction the stacked attention block replaces.
pub fn pair_concat_features(e: &Array2<f64>, frames: usize) -> Array4<f64> {
    let n = e.nrows() / frames;
    let c = e.ncols();
    let mut out = Array4::zeros((frames, n, n, 2 * c));
    for t in 0..frames {
        for i in 0..n {
            for j in 0..n {
                out.slice_mut(s![t, i, j, ..c]).assign(&e.row(t * n + i));
                out.slice_mut(s![t, i, j, c..]).assign(&e.row(t * n + j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn head(shared: bool, seed: u64) -> (GroupHead, Params) {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = StackAttConfig {
            heads: 2,
            proj_dim: 4,
            gru_hidden: 5,
            shared_projection: shared,
        };
        let h = GroupHead::new(cfg, 6, &mut p, "head.", &mut rng).unwrap();
        (h, p)
    }

    fn embeddings(rows: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Array::from_shape_fn((rows, 6), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn block_matches_pairwise_scores_and_is_symmetric() {
        let (h, p) = head(true, 1);
        let e = embeddings(2 * 3, 2);
        let presence = vec![true; 6];
        let (att, _) = h.stack_attention(&p, &e, &presence, 2).unwrap();
        assert_eq!(att.u.dim(), (2, 3, 3, 2));
        for t in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for m in 0..2 {
                        let direct = h
                            .attention_score(&p, e.row(t * 3 + i).as_slice().unwrap(), e.row(t * 3 + j).as_slice().unwrap(), m)
                            .unwrap();
                        assert!((att.u[[t, i, j, m]] - direct).abs() < 1e-12);
                        assert_eq!(att.u[[t, i, j, m]], att.u[[t, j, i, m]]);
                    }
                }
            }
        }
    }

    #[test]
    fn absent_subjects_score_zero_and_predict_zero() {
        let (h, p) = head(true, 3);
        let e = embeddings(2 * 3, 4);
        let presence = vec![true, true, false, true, true, true];
        let (att, _) = h.stack_attention(&p, &e, &presence, 2).unwrap();
        assert!(att.u.slice(s![0, 2, .., ..]).iter().all(|&v| v == 0.0));
        let d = Array3::from_elem((2, 3, 3), 0.5);
        let ud = append_distance(&att, &d).unwrap();
        let (r, _) = h.predict_relations(&p, &ud, &presence).unwrap();
        assert_eq!(r[[0, 0, 2]], 0.0);
        assert!(r[[1, 0, 2]] > 0.0 && r[[1, 0, 2]] < 1.0);
        for t in 0..2 {
            for i in 0..3 {
                assert_eq!(r[[t, i, i]], 0.0);
                for j in 0..3 {
                    assert_eq!(r[[t, i, j]], r[[t, j, i]]);
                }
            }
        }
    }

    #[test]
    fn asymmetric_head_is_still_symmetric_in_output() {
        let (h, p) = head(false, 5);
        let e = embeddings(3 * 4, 6);
        let presence = vec![true; 12];
        let (att, _) = h.stack_attention(&p, &e, &presence, 3).unwrap();
        let ud = append_distance(&att, &Array3::zeros((3, 4, 4))).unwrap();
        let (r, _) = h.predict_relations(&p, &ud, &presence).unwrap();
        for t in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((r[[t, i, j]] - r[[t, j, i]]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn distance_shape_mismatch_is_rejected() {
        let (h, p) = head(true, 1);
        let e = embeddings(3, 2);
        let (att, _) = h.stack_attention(&p, &e, &[true; 3], 1).unwrap();
        assert!(append_distance(&att, &Array3::zeros((1, 2, 2))).is_err());
    }

    #[test]
    fn cosine_loss_values() {
        let mask = Array3::from_elem((1, 2, 2), true);
        let r = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (l, _) = cosine_relation_loss(&r, &r, &mask).unwrap();
        assert!(l.abs() < 1e-12);
        let scaled = &r * 0.3;
        assert!(cosine_relation_loss(&scaled, &r, &mask).unwrap().0.abs() < 1e-12);
        let other = Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((cosine_relation_loss(&other, &r, &mask).unwrap().0 - 1.0).abs() < 1e-12);
        let zeros = Array3::zeros((1, 2, 2));
        let (l, g) = cosine_relation_loss(&r, &zeros, &mask).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        assert!((g[[0, 0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn anchor_pins_the_scale() {
        let mask = Array3::from_elem((1, 2, 2), true);
        let r = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (l, g) = anchored_relation_loss(&r, &r, &mask, 1.0).unwrap();
        assert!(l.abs() < 1e-12 && g.iter().all(|v| v.abs() < 1e-12));
        let half = &r * 0.5;
        let (l, g) = anchored_relation_loss(&half, &r, &mask, 1.0).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
        assert!(g[[0, 0, 1]] < 0.0);
        assert_eq!(anchored_relation_loss(&half, &r, &mask, 0.0).unwrap(), cosine_relation_loss(&half, &r, &mask).unwrap());
    }

    #[test]
    fn label_subsets_are_nested() {
        let a = labeled_subset(40, 0.1, 3);
        let b = labeled_subset(40, 0.3, 3);
        let c = labeled_subset(40, 1.0, 3);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|i| b.contains(i)));
        assert_eq!(c, (0..40).collect::<Vec<_>>());
        assert_eq!(labeled_subset(3, 0.1, 0).len(), 1);
    }
}
