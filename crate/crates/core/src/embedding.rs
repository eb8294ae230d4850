//! The shared relation embedding network: a shift-graph skeleton branch per subject,
//! then spatio-temporal graph convolution over the subject graph.

use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureBlock, POSITION_DIM, SKELETON_DIM};
use crate::nn::{self, Grads, ParamId, Params};
use crate::scene::NUM_JOINTS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// Width C_e of the output embedding.
    pub embed_dim: usize,
    pub skeleton_branch_layers: usize,
    /// Per-joint channel width inside the skeleton branch.
    pub skeleton_channels: usize,
    /// Width F of the pooled skeleton feature.
    pub skeleton_out: usize,
    pub stgc_layers: usize,
    /// Radius graph threshold as a fraction of the scene diagonal.
    pub neighbor_radius: f64,
    pub temporal_kernel: usize,
    pub bias: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            skeleton_branch_layers: 2,
            skeleton_channels: 16,
            skeleton_out: 32,
            stgc_layers: 2,
            neighbor_radius: 0.15,
            temporal_kernel: 3,
            bias: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.skeleton_channels == 0 || self.skeleton_out == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if self.skeleton_branch_layers == 0 || self.stgc_layers == 0 {
            return Err(Error::Config("layer counts must be at least 1".into()));
        }
        if !(self.neighbor_radius > 0.0 && self.neighbor_radius <= 1.0) {
            return Err(Error::Config(format!("neighbor_radius {} not in (0, 1]", self.neighbor_radius)));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config("temporal_kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Per-frame subject graph: symmetric-normalized radius adjacency with self loops.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub frames: usize,
    pub slots: usize,
    pub presence: Vec<bool>,
    pub adjacency: Vec<Array2<f64>>,
}

impl SceneGraph {
    /// `centers` is T×N×2 in pixels; `radius` is a fraction of the scene diagonal.
    pub fn radius_graph(centers: &Array3<f64>, presence: &[bool], extent: (f64, f64), radius: f64) -> Self {
        let (frames, n) = (centers.shape()[0], centers.shape()[1]);
        let cutoff = radius * extent.0.hypot(extent.1);
        let adjacency = (0..frames)
            .map(|t| {
                let present = |i: usize| presence[t * n + i];
                let mut a = Array2::zeros((n, n));
                for i in 0..n {
                    if !present(i) {
                        continue;
                    }
                    a[[i, i]] = 1.0;
                    for j in (i + 1)..n {
                        if !present(j) {
                            continue;
                        }
                        let d = (centers[[t, i, 0]] - centers[[t, j, 0]]).hypot(centers[[t, i, 1]] - centers[[t, j, 1]]);
                        if d < cutoff {
                            a[[i, j]] = 1.0;
                            a[[j, i]] = 1.0;
                        }
                    }
                }
                let deg: Vec<f64> = a.sum_axis(Axis(1)).to_vec();
                for i in 0..n {
                    for j in 0..n {
                        if a[[i, j]] != 0.0 {
                            a[[i, j]] /= (deg[i] * deg[j]).sqrt();
                        }
                    }
                }
                a
            })
            .collect();
        Self {
            frames,
            slots: n,
            presence: presence.to_vec(),
            adjacency,
        }
    }

    /// Binary neighbor test in frame `t` (excluding self).
    pub fn connected(&self, t: usize, i: usize, j: usize) -> bool {
        i != j && self.adjacency[t][[i, j]] != 0.0
    }
}

#[derive(Clone, Debug)]
struct SkeletonLayer {
    w: ParamId,
    b: Option<ParamId>,
    tw: ParamId,
    tb: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct StgcLayer {
    wg: ParamId,
    bg: Option<ParamId>,
    wt: ParamId,
    bt: Option<ParamId>,
    /// Projection for the residual path when widths differ.
    wr: Option<ParamId>,
}

/// Parameter handles of the embedding network; weights live in a shared [`Params`].
#[derive(Clone, Debug)]
pub struct RelationNet {
    pub cfg: EmbeddingConfig,
    skel: Vec<SkeletonLayer>,
    stgc: Vec<StgcLayer>,
}

struct SkelCache {
    shifted: Array2<f64>,
    y1: Array2<f64>,
    y2: Array2<f64>,
}

struct StgcCache {
    input: Array2<f64>,
    y1: Array2<f64>,
}

/// Everything needed to backpropagate one forward pass.
pub struct EmbedCache {
    slots: usize,
    presence: Vec<bool>,
    joint_mask: Vec<bool>,
    skel: Vec<SkelCache>,
    stgc: Vec<StgcCache>,
    adjacency: Vec<Array2<f64>>,
}

/// T×N×C_e embedding with the presence mask carried through.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationEmbedding {
    pub e: Array3<f64>,
    pub presence: Vec<bool>,
}

impl RelationEmbedding {
    /// Rows as a (T*N)×C_e matrix.
    pub fn rows(&self) -> Array2<f64> {
        let (t, n, c) = self.e.dim();
        self.e.to_shape((t * n, c)).expect("contiguous").to_owned()
    }
}

impl RelationNet {
    /// Registers parameters under `prefix` (e.g. "phi.").
    pub fn new(cfg: EmbeddingConfig, params: &mut Params, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.temporal_kernel;
        let mut skel = Vec::new();
        let mut c_in = 2;
        for l in 0..cfg.skeleton_branch_layers {
            let c_out = if l + 1 == cfg.skeleton_branch_layers {
                cfg.skeleton_out
            } else {
                cfg.skeleton_channels
            };
            let p = format!("{prefix}skel.{l}.");
            let w = params.add_weight(format!("{p}w"), c_in, c_out, c_in, c_out, rng);
            let b = cfg.bias.then(|| params.add_bias(format!("{p}b"), c_out));
            let tw = params.add_weight(format!("{p}tw"), k, c_out, k, k, rng);
            let tb = cfg.bias.then(|| params.add_bias(format!("{p}tb"), c_out));
            skel.push(SkeletonLayer { w, b, tw, tb });
            c_in = c_out;
        }
        let mut stgc = Vec::new();
        let mut c_in = cfg.skeleton_out + POSITION_DIM;
        let c_out = cfg.embed_dim;
        for l in 0..cfg.stgc_layers {
            let p = format!("{prefix}stgc.{l}.");
            let wg = params.add_weight(format!("{p}wg"), c_in, c_out, c_in, c_out, rng);
            let bg = cfg.bias.then(|| params.add_bias(format!("{p}bg"), c_out));
            let wt = params.add_weight(format!("{p}wt"), k * c_out, c_out, k * c_out, c_out, rng);
            // start the temporal branch small so each block begins near its residual path
            params.get_mut(wt).mapv_inplace(|v| v * 0.5);
            let bt = cfg.bias.then(|| params.add_bias(format!("{p}bt"), c_out));
            let wr = (c_in != c_out).then(|| params.add_weight(format!("{p}wr"), c_in, c_out, c_in, c_out, rng));
            stgc.push(StgcLayer { wg, bg, wt, bt, wr });
            c_in = c_out;
        }
        Ok(Self { cfg, skel, stgc })
    }

    /// Verifies that every handle resolves to a tensor of the expected shape.
    pub fn check(&self, params: &Params) -> Result<()> {
        let k = self.cfg.temporal_kernel;
        let mut expect: Vec<(ParamId, (usize, usize))> = Vec::new();
        let mut c_in = 2;
        for (l, layer) in self.skel.iter().enumerate() {
            let c_out = if l + 1 == self.skel.len() {
                self.cfg.skeleton_out
            } else {
                self.cfg.skeleton_channels
            };
            expect.push((layer.w, (c_in, c_out)));
            expect.push((layer.tw, (k, c_out)));
            expect.extend(layer.b.map(|b| (b, (1, c_out))));
            expect.extend(layer.tb.map(|b| (b, (1, c_out))));
            c_in = c_out;
        }
        let mut c_in = self.cfg.skeleton_out + POSITION_DIM;
        let c_out = self.cfg.embed_dim;
        for layer in &self.stgc {
            expect.push((layer.wg, (c_in, c_out)));
            expect.push((layer.wt, (k * c_out, c_out)));
            expect.extend(layer.bg.map(|b| (b, (1, c_out))));
            expect.extend(layer.bt.map(|b| (b, (1, c_out))));
            expect.extend(layer.wr.map(|w| (w, (c_in, c_out))));
            c_in = c_out;
        }
        for (id, shape) in expect {
            if id.0 >= params.len() || params.get(id).dim() != shape {
                return Err(Error::State(format!("embedding parameter #{} missing or mis-shaped", id.0)));
            }
        }
        Ok(())
    }

    /// Skeleton branch on a T×N×32 block: returns (T*N)×F rows.
    pub fn skeleton_branch(&self, params: &Params, k: &Array3<f64>, presence: &[bool]) -> Result<Array2<f64>> {
        let (frames, slots, _) = k.dim();
        if frames < self.cfg.temporal_kernel {
            return Err(Error::Config(format!(
                "clip has {frames} frames, fewer than the temporal kernel {}",
                self.cfg.temporal_kernel
            )));
        }
        let joint_mask = nn::expand_mask(presence, NUM_JOINTS);
        let (out, _) = self.skeleton_forward(params, k, &joint_mask, frames, slots);
        Ok(out)
    }

    fn skeleton_forward(&self, params: &Params, k: &Array3<f64>, joint_mask: &[bool], frames: usize, slots: usize) -> (Array2<f64>, Vec<SkelCache>) {
        // rows (t, n, joint), two coordinate channels
        let mut x = k
            .to_shape((frames * slots * NUM_JOINTS, 2))
            .expect("contiguous skeleton block")
            .to_owned();
        let stride = slots * NUM_JOINTS;
        let mut caches = Vec::with_capacity(self.skel.len());
        for layer in &self.skel {
            let shifted = nn::joint_shift(&x, NUM_JOINTS);
            let mut y1 = nn::linear(&shifted, params.get(layer.w), layer.b.map(|b| params.get(b)));
            nn::mask_rows(&mut y1, joint_mask);
            nn::relu(&mut y1);
            let mut y2 = nn::depthwise_temporal_conv(&y1, params.get(layer.tw), layer.tb.map(|b| params.get(b)), stride);
            nn::mask_rows(&mut y2, joint_mask);
            nn::relu(&mut y2);
            caches.push(SkelCache {
                shifted,
                y1,
                y2: y2.clone(),
            });
            x = y2;
        }
        (nn::mean_rows(&x, NUM_JOINTS), caches)
    }

    /// Graph + temporal convolution stack on (T*N)×(F+32) rows.
    pub fn spatiotemporal_graph_conv(&self, params: &Params, h: &Array2<f64>, graph: &SceneGraph) -> Array2<f64> {
        self.stgc_forward(params, h.clone(), graph).0
    }

    fn stgc_forward(&self, params: &Params, mut h: Array2<f64>, graph: &SceneGraph) -> (Array2<f64>, Vec<StgcCache>) {
        let k = self.cfg.temporal_kernel;
        let mut caches = Vec::with_capacity(self.stgc.len());
        for layer in &self.stgc {
            let g = h.dot(params.get(layer.wg));
            let mut y1 = nn::graph_aggregate(&graph.adjacency, &g);
            if let Some(b) = layer.bg {
                y1 += &params.get(b).row(0);
            }
            nn::mask_rows(&mut y1, &graph.presence);
            nn::relu(&mut y1);
            let mut out = nn::temporal_conv(&y1, params.get(layer.wt), layer.bt.map(|b| params.get(b)), graph.slots, k);
            match layer.wr {
                Some(wr) => out += &h.dot(params.get(wr)),
                None => out += &h,
            }
            nn::mask_rows(&mut out, &graph.presence);
            caches.push(StgcCache { input: h, y1 });
            h = out;
        }
        (h, caches)
    }

    /// E = φ(K ⊕ P) over the given subject graph.
    pub fn forward(&self, params: &Params, block: &FeatureBlock, graph: &SceneGraph) -> Result<(RelationEmbedding, EmbedCache)> {
        self.check(params)?;
        let (frames, slots, kd) = block.skeleton.dim();
        if kd != SKELETON_DIM || block.position.dim() != (frames, slots, POSITION_DIM) {
            return Err(Error::Validation("feature block has unexpected shape".into()));
        }
        if graph.frames != frames || graph.slots != slots {
            return Err(Error::Validation("graph does not match feature block".into()));
        }
        if frames < self.cfg.temporal_kernel {
            return Err(Error::Config(format!(
                "clip has {frames} frames, fewer than the temporal kernel {}",
                self.cfg.temporal_kernel
            )));
        }
        let joint_mask = nn::expand_mask(&block.presence, NUM_JOINTS);
        let (s, skel) = self.skeleton_forward(params, &block.skeleton, &joint_mask, frames, slots);
        let p = block
            .position
            .to_shape((frames * slots, POSITION_DIM))
            .expect("contiguous position block");
        let h = concatenate(Axis(1), &[s.view(), p.view()]).expect("row counts agree");
        let (e, stgc) = self.stgc_forward(params, h, graph);
        let e3 = e
            .into_shape_with_order((frames, slots, self.cfg.embed_dim))
            .expect("row-major embedding");
        Ok((
            RelationEmbedding {
                e: e3,
                presence: block.presence.clone(),
            },
            EmbedCache {
                slots,
                presence: block.presence.clone(),
                joint_mask,
                skel,
                stgc,
                adjacency: graph.adjacency.clone(),
            },
        ))
    }

    /// Accumulates parameter gradients given dL/dE as (T*N)×C_e rows.
    pub fn backward(&self, params: &Params, cache: &EmbedCache, de: &Array2<f64>, grads: &mut Grads) {
        let k = self.cfg.temporal_kernel;
        let slots = cache.slots;
        let mut dh = de.clone();
        for (layer, c) in self.stgc.iter().zip(&cache.stgc).rev() {
            nn::mask_rows(&mut dh, &cache.presence);
            // residual path
            let mut d_in = match layer.wr {
                Some(wr) => {
                    let (w, dw) = (params.get(wr), grads.get_mut(wr));
                    nn::linear_backward(&c.input, w, &dh, dw, None)
                }
                None => dh.clone(),
            };
            let mut dy1 = {
                let dw = grads.get_mut(layer.wt);
                nn::temporal_conv_backward(&c.y1, params.get(layer.wt), &dh, slots, k, dw, None)
            };
            if let Some(bt) = layer.bt {
                let mut row = grads.get_mut(bt).row_mut(0);
                row += &dh.sum_axis(Axis(0));
            }
            nn::relu_backward(&c.y1, &mut dy1);
            nn::mask_rows(&mut dy1, &cache.presence);
            if let Some(bg) = layer.bg {
                let mut row = grads.get_mut(bg).row_mut(0);
                row += &dy1.sum_axis(Axis(0));
            }
            let dg = nn::graph_aggregate_backward(&cache.adjacency, &dy1);
            d_in += &nn::linear_backward(&c.input, params.get(layer.wg), &dg, grads.get_mut(layer.wg), None);
            dh = d_in;
        }
        // first F columns feed the skeleton branch; positions are inputs
        let f = self.cfg.skeleton_out;
        let ds = dh.slice(s![.., ..f]).to_owned();
        let mut dx = nn::mean_rows_backward(&ds, NUM_JOINTS);
        let stride = slots * NUM_JOINTS;
        for (layer, c) in self.skel.iter().zip(&cache.skel).rev() {
            nn::relu_backward(&c.y2, &mut dx);
            nn::mask_rows(&mut dx, &cache.joint_mask);
            let mut dy1 = {
                let dtw = grads.get_mut(layer.tw);
                nn::depthwise_temporal_conv_backward(&c.y1, params.get(layer.tw), &dx, stride, dtw, None)
            };
            if let Some(tb) = layer.tb {
                let mut row = grads.get_mut(tb).row_mut(0);
                row += &dx.sum_axis(Axis(0));
            }
            nn::relu_backward(&c.y1, &mut dy1);
            nn::mask_rows(&mut dy1, &cache.joint_mask);
            let dshift = nn::linear_backward(&c.shifted, params.get(layer.w), &dy1, grads.get_mut(layer.w), None);
            if let Some(b) = layer.b {
                let mut row = grads.get_mut(b).row_mut(0);
                row += &dy1.sum_axis(Axis(0));
            }
            dx = nn::joint_shift_backward(&dshift, NUM_JOINTS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{assemble_feature_block, centers};
    use crate::scene::{generate_synthetic_scene, template_skeleton, BBox, SceneClip, SynthParams};
    use rand::SeedableRng;

    fn net(cfg: EmbeddingConfig) -> (RelationNet, Params) {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = RelationNet::new(cfg, &mut params, "phi.", &mut rng).unwrap();
        // non-zero biases so masking is actually exercised
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).ends_with('b') {
                params.get_mut(id).fill(0.05);
            }
        }
        (net, params)
    }

    fn embed(net: &RelationNet, params: &Params, clip: &SceneClip) -> RelationEmbedding {
        let block = assemble_feature_block(clip).unwrap();
        let graph = SceneGraph::radius_graph(&centers(clip), clip.presence(), clip.extent, net.cfg.neighbor_radius);
        net.forward(params, &block, &graph).unwrap().0
    }

    #[test]
    fn shapes_and_determinism() {
        let (net, params) = net(EmbeddingConfig::default());
        let clip = generate_synthetic_scene(&SynthParams {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let e1 = embed(&net, &params, &clip);
        let e2 = embed(&net, &params, &clip);
        assert_eq!(e1.e.dim(), (clip.frames, clip.slots, 64));
        assert_eq!(e1, e2);
        assert!(e1.e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn absent_rows_stay_zero() {
        let (net, params) = net(EmbeddingConfig::default());
        let mut clip = generate_synthetic_scene(&SynthParams {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        clip.gt = None;
        clip.clear_subject(3, 0);
        clip.clear_subject(4, 0);
        let e = embed(&net, &params, &clip);
        assert!(e.e.slice(s![3, 0, ..]).iter().all(|&v| v == 0.0));
        assert!(e.e.slice(s![4, 0, ..]).iter().all(|&v| v == 0.0));
        assert!(e.e.slice(s![5, 0, ..]).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn identical_subjects_identical_skeleton_features() {
        let (net, params) = net(EmbeddingConfig::default());
        let mut clip = SceneClip::new("twins", 4, 3, (1000.0, 1000.0)).unwrap();
        for t in 0..4 {
            for (i, x) in [100.0, 100.0, 600.0].iter().enumerate() {
                let b = BBox::new(*x + t as f64, 200.0, 20.0, 50.0);
                clip.set_subject(t, i, b, template_skeleton(&b)).unwrap();
            }
        }
        let block = assemble_feature_block(&clip).unwrap();
        let s = net.skeleton_branch(&params, &block.skeleton, &block.presence).unwrap();
        assert_eq!(s.dim(), (12, 32));
        for t in 0..4 {
            assert_eq!(s.row(t * 3), s.row(t * 3 + 1));
        }
    }

    #[test]
    fn bias_free_branch_maps_zero_to_zero() {
        let (net, params) = net(EmbeddingConfig {
            bias: false,
            ..Default::default()
        });
        let k = Array3::zeros((4, 2, SKELETON_DIM));
        let s = net.skeleton_branch(&params, &k, &[true; 8]).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_clip_is_a_config_error() {
        let (net, params) = net(EmbeddingConfig::default());
        let k = Array3::zeros((2, 2, SKELETON_DIM));
        assert!(matches!(net.skeleton_branch(&params, &k, &[true; 4]), Err(Error::Config(_))));
    }

    #[test]
    fn isolated_subject_ignores_others() {
        let (net, params) = net(EmbeddingConfig::default());
        let build = |far_x: f64| {
            let mut clip = SceneClip::new("iso", 4, 2, (1000.0, 1000.0)).unwrap();
            for t in 0..4 {
                let a = BBox::new(100.0, 100.0 + t as f64, 20.0, 50.0);
                let b = BBox::new(far_x, 900.0, 20.0, 50.0);
                clip.set_subject(t, 0, a, template_skeleton(&a)).unwrap();
                clip.set_subject(t, 1, b, template_skeleton(&b)).unwrap();
            }
            clip
        };
        let e1 = embed(&net, &params, &build(800.0));
        let e2 = embed(&net, &params, &build(900.0));
        assert_eq!(e1.e.slice(s![.., 0, ..]), e2.e.slice(s![.., 0, ..]));
        assert_ne!(e1.e.slice(s![.., 1, ..]), e2.e.slice(s![.., 1, ..]));
    }

    #[test]
    fn missing_parameters_are_a_state_error() {
        let (net, _) = net(EmbeddingConfig::default());
        let clip = generate_synthetic_scene(&SynthParams::default()).unwrap();
        let block = assemble_feature_block(&clip).unwrap();
        let graph = SceneGraph::radius_graph(&centers(&clip), clip.presence(), clip.extent, 0.15);
        assert!(matches!(net.forward(&Params::new(), &block, &graph), Err(Error::State(_))));
    }
}
