//! Finite-difference gradient checks on T = 4, N = 3 instances.

use ndarray::{Array2, Array3};

use crowdgroup::embedding::SceneGraph;
use crowdgroup::features::{self, CoordMode};
use crowdgroup::model::Model;
use crowdgroup::nn::Grads;
use crowdgroup::prediction::{relation_backward, relation_forward, relation_step, RelationSample};
use crowdgroup::simulator::{pretext_step, select_swap_set, PretextSample};

use super::{finite_difference_check, tiny_clip, tiny_model, weights, GroupCheck};

pub const FRAMES: usize = 4;
pub const PER_GROUP: usize = 16;

/// Embedding network under a fixed linear readout of E.
pub fn embed_checks() -> Vec<GroupCheck> {
    let model = tiny_model(FRAMES, true, 1);
    let clip = tiny_clip(FRAMES, 3);
    let block = features::assemble_feature_block(&clip).unwrap();
    let graph = SceneGraph::radius_graph(&features::centers(&clip), &block.presence, clip.extent, 0.5);
    let (e, _) = model.phi.forward(&model.params, &block, &graph).unwrap();
    let w = Array2::from_shape_vec(e.rows().dim(), weights(e.rows().len(), 7)).unwrap();
    let loss = |m: &Model| {
        let (e, _) = m.phi.forward(&m.params, &block, &graph).unwrap();
        (&e.rows() * &w).sum()
    };
    let grad = |m: &Model| {
        let (_, cache) = m.phi.forward(&m.params, &block, &graph).unwrap();
        let mut g = Grads::zeros_like(&m.params);
        m.phi.backward(&m.params, &cache, &w, &mut g);
        g
    };
    finite_difference_check(&model, &["phi."], PER_GROUP, loss, grad)
}

/// Recovery head and embedding under the pretext loss, every subject swapped.
pub fn recovery_checks() -> Vec<GroupCheck> {
    let model = tiny_model(FRAMES, true, 2);
    let clip = tiny_clip(FRAMES, 5);
    let sample = PretextSample::from_clip(&clip, CoordMode::Normalized).unwrap();
    let spec = select_swap_set(3, 1.0, 0.01, 9).unwrap();
    assert!(!spec.degenerate);
    let run = |m: &Model| {
        let mut g = Grads::zeros_like(&m.params);
        let loss = pretext_step(m, &sample, &spec, false, &mut g).unwrap();
        (loss, g)
    };
    finite_difference_check(&model, &["bs.", "phi."], PER_GROUP, |m| run(m).0, |m| run(m).1)
}

/// Relation head and embedding under the stage-2 loss.
pub fn relation_checks(shared: bool) -> Vec<GroupCheck> {
    let model = tiny_model(FRAMES, shared, 3);
    let clip = tiny_clip(FRAMES, 11);
    let sample = RelationSample::from_clip(&clip, CoordMode::Normalized, 0.5).unwrap();
    let run = |m: &Model| {
        let mut g = Grads::zeros_like(&m.params);
        let loss = relation_step(m, &sample, 1.0, &mut g).unwrap();
        (loss, g)
    };
    finite_difference_check(&model, &["head.", "phi."], PER_GROUP, |m| run(m).0, |m| run(m).1)
}

/// Relation head under a loss linear in R̂, which weights every output entry.
pub fn readout_checks() -> Vec<GroupCheck> {
    let model = tiny_model(FRAMES, true, 4);
    let clip = tiny_clip(FRAMES, 13);
    let sample = RelationSample::from_clip(&clip, CoordMode::Normalized, 0.5).unwrap();
    let dims = relation_forward(&model, &sample).unwrap().r_hat.dim();
    let w = Array3::from_shape_vec(dims, weights(dims.0 * dims.1 * dims.2, 3)).unwrap();
    let loss = |m: &Model| (&relation_forward(m, &sample).unwrap().r_hat * &w).sum();
    let grad = |m: &Model| {
        let fwd = relation_forward(m, &sample).unwrap();
        let mut g = Grads::zeros_like(&m.params);
        relation_backward(m, &fwd, &w, &mut g);
        g
    };
    finite_difference_check(&model, &["head."], PER_GROUP, loss, grad)
}
