//! Slot-permutation equivariance of the embedding and symmetry of the relation outputs.

use crowdgroup::model::{Model, ModelConfig};
use crowdgroup::prediction::{predict, RelationSample};
use crowdgroup::scene::{generate_synthetic_scene, GroupPartition, MotionModel, SceneClip, SynthParams};

/// Copy of `clip` where old subject `i` occupies slot `perm[i]`.
pub fn permute_clip(clip: &SceneClip, perm: &[usize]) -> SceneClip {
    let mut out = SceneClip::new(clip.clip_id.clone(), clip.frames, clip.slots, clip.extent).unwrap();
    for t in 0..clip.frames {
        for (i, &to) in perm.iter().enumerate() {
            if clip.is_present(t, i) {
                out.set_subject(t, to, *clip.bbox(t, i), *clip.joints(t, i)).unwrap();
            }
        }
    }
    out.gt = clip.gt.as_ref().map(|parts| {
        parts
            .iter()
            .map(|p| GroupPartition::new(p.frame_index, p.groups.iter().map(|g| g.iter().map(|&i| perm[i]).collect()).collect()))
            .collect()
    });
    out
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..left.len() {
            let v = left.remove(k);
            prefix.push(v);
            go(prefix, left, out);
            prefix.pop();
            left.insert(k, v);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

/// A clip of exactly `n` subjects: pairs plus loners.
pub fn clip_with(n: usize, frames: usize, seed: u64) -> SceneClip {
    generate_synthetic_scene(&SynthParams {
        n_groups: n / 3,
        group_size_range: (2, 2),
        n_loners: n - 2 * (n / 3),
        motion_model: MotionModel::Mixed,
        frame_count: frames,
        scene_extent: (500.0, 500.0),
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn small_model(frames: usize, seed: u64) -> Model {
    Model::new(
        ModelConfig {
            frames,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn sample(model: &Model, clip: &SceneClip) -> RelationSample {
    RelationSample::from_clip(clip, model.cfg.coord_mode, model.cfg.embedding.neighbor_radius).unwrap()
}

/// Largest |E(πV)[π(i)] − E(V)[i]| over every permutation of the clip's slots.
pub fn embed_equivariance(model: &Model, clip: &SceneClip) -> (usize, f64) {
    let base = sample(model, clip);
    let (e0, _) = model.phi.forward(&model.params, &base.block, &base.graph).unwrap();
    let perms = permutations(clip.slots);
    let mut worst = 0.0f64;
    for perm in &perms {
        let s = sample(model, &permute_clip(clip, perm));
        let (e, _) = model.phi.forward(&model.params, &s.block, &s.graph).unwrap();
        for t in 0..clip.frames {
            for (i, &to) in perm.iter().enumerate() {
                for c in 0..e.e.dim().2 {
                    worst = worst.max((e.e[[t, to, c]] - e0.e[[t, i, c]]).abs());
                }
            }
        }
    }
    (perms.len(), worst)
}

#[derive(Debug, Default)]
pub struct RelationSymmetry {
    /// Largest |att_m(i, j) − att_m(j, i)|; zero under a shared projection.
    pub attention_asymmetry: f64,
    pub output_asymmetry: f64,
    pub max_diagonal: f64,
    pub min_value: f64,
    pub max_value: f64,
}

impl RelationSymmetry {
    pub fn holds(&self) -> bool {
        self.attention_asymmetry == 0.0
            && self.output_asymmetry == 0.0
            && self.max_diagonal == 0.0
            && self.min_value >= 0.0
            && self.max_value <= 1.0
    }
}

pub fn relation_symmetry(model: &Model, clips: &[SceneClip]) -> RelationSymmetry {
    let mut out = RelationSymmetry {
        min_value: f64::INFINITY,
        max_value: f64::NEG_INFINITY,
        ..Default::default()
    };
    for clip in clips {
        let s = sample(model, clip);
        let (e, _) = model.phi.forward(&model.params, &s.block, &s.graph).unwrap();
        let (att, _) = model.head.stack_attention(&model.params, &e.rows(), &s.block.presence, s.frames()).unwrap();
        let (t, n, _, m) = att.u.dim();
        let r = predict(model, &s).unwrap();
        for f in 0..t {
            for i in 0..n {
                out.max_diagonal = out.max_diagonal.max(r[[f, i, i]].abs());
                for j in 0..n {
                    for k in 0..m {
                        out.attention_asymmetry = out.attention_asymmetry.max((att.u[[f, i, j, k]] - att.u[[f, j, i, k]]).abs());
                    }
                    out.output_asymmetry = out.output_asymmetry.max((r[[f, i, j]] - r[[f, j, i]]).abs());
                    out.min_value = out.min_value.min(r[[f, i, j]]);
                    out.max_value = out.max_value.max(r[[f, i, j]]);
                }
            }
        }
    }
    out
}
