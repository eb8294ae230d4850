#![allow(dead_code)]
//! Shared helpers for integration tests: central finite differences and small fixtures.

pub mod gradcheck;
pub mod oracle;
pub mod symmetry;

use crowdgroup::model::{Model, ModelConfig};
use crowdgroup::nn::{Grads, ParamId};
use crowdgroup::scene::{generate_synthetic_scene, MotionModel, SceneClip, SynthParams};

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Debug)]
pub struct GroupCheck {
    pub name: String,
    pub rel_err: f64,
    pub norm: f64,
}

/// Compares `grad` against central differences of `loss` for up to `per_group` entries of
/// every tensor whose name starts with one of `prefixes`. Relative error is the norm of
/// the difference over the larger of the two gradient norms (floored at 1e-10).
pub fn finite_difference_check(
    model: &Model,
    prefixes: &[&str],
    per_group: usize,
    loss: impl Fn(&Model) -> f64,
    grad: impl Fn(&Model) -> Grads,
) -> Vec<GroupCheck> {
    let analytic = grad(model);
    let mut probe = model.clone();
    let mut out = Vec::new();
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let size = model.params.get(id).len();
        // odd stride so samples spread over rows and columns
        let step = ((size / per_group).max(1)) | 1;
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for flat in (0..per_group.min(size)).map(|k| (k * step + k / 2) % size) {
            let orig = model.params.get(id).as_slice().unwrap()[flat];
            let h = 1e-6 * orig.abs().max(1.0);
            probe.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let lp = loss(&probe);
            probe.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let lm = loss(&probe);
            probe.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.get(id).as_slice().unwrap()[flat];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt()).max(1e-10);
        out.push(GroupCheck {
            name,
            rel_err: diff.sqrt() / scale,
            norm: na.sqrt(),
        });
    }
    out
}

/// A T-frame clip with one pair and one loner (N = 3).
pub fn tiny_clip(frames: usize, seed: u64) -> SceneClip {
    generate_synthetic_scene(&SynthParams {
        n_groups: 1,
        group_size_range: (2, 2),
        n_loners: 1,
        motion_model: MotionModel::WalkTogether,
        frame_count: frames,
        scene_extent: (400.0, 400.0),
        seed,
        ..Default::default()
    })
    .expect("tiny clip")
}

pub fn tiny_model(frames: usize, shared: bool, seed: u64) -> Model {
    let mut cfg = ModelConfig {
        frames,
        ..Default::default()
    };
    cfg.attention.shared_projection = shared;
    let mut model = Model::new(cfg, seed).expect("model");
    jitter_biases(&mut model, seed);
    model
}

/// Zero-initialized biases put dead ReLU channels exactly on the kink, where central
/// differences see half a slope. Small random offsets move every unit off it.
pub fn jitter_biases(model: &mut Model, seed: u64) {
    let ids: Vec<ParamId> = model.params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = model.params.get_mut(id);
        if p.nrows() == 1 {
            let noise = weights(p.len(), seed ^ (k as u64 + 1));
            for (v, n) in p.iter_mut().zip(noise) {
                *v += 0.05 * n;
            }
        }
    }
}

/// Deterministic pseudo-random weights in [-1, 1).
pub fn weights(len: usize, seed: u64) -> Vec<f64> {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..len)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}
