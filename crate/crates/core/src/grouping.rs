//! Relation matrices to group partitions via label propagation, plus the
//! distance-matrix baseline.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::scene::{GroupPartition, SceneClip};

/// How a subject picks its next label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationRule {
    /// Adopt the smallest label among itself and its binarized neighbors.
    /// Converges to the connected components of the binarized graph.
    #[default]
    MinLabel,
    /// Adopt the neighbor label with the largest summed score (ties: smallest label).
    /// Can split weakly linked chains and may oscillate on bipartite structures.
    ScoreVote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    /// Pairs with score strictly above this are linked.
    pub threshold: f64,
    pub max_iters: usize,
    /// Baseline link distance as a fraction of the scene diagonal.
    pub distance_cutoff: f64,
    pub rule: PropagationRule,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_iters: 100,
            distance_cutoff: 0.1,
            rule: PropagationRule::MinLabel,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.distance_cutoff > 0.0 && self.distance_cutoff <= 1.0) {
            return Err(Error::Config(format!("distance_cutoff {} not in (0, 1]", self.distance_cutoff)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub partition: GroupPartition,
    pub converged: bool,
    pub iterations: usize,
}

/// Label propagation over the graph with edges where `score > threshold`.
///
/// Absent subjects never join a group. Singletons are dropped.
pub fn propagate(scores: &Array2<f64>, presence: &[bool], frame: usize, cfg: &PropagationConfig) -> Result<Propagation> {
    cfg.validate()?;
    let n = scores.nrows();
    if scores.ncols() != n || presence.len() != n {
        return Err(Error::Validation(format!(
            "relation matrix {}x{} with {} presence flags",
            n,
            scores.ncols(),
            presence.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("relation matrix contains non-finite values".into()));
    }
    let linked = |i: usize, j: usize| i != j && presence[i] && presence[j] && scores[[i, j]] > cfg.threshold && scores[[j, i]] > cfg.threshold;
    let mut labels: Vec<usize> = (0..n).collect();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let next: Vec<usize> = (0..n)
            .map(|i| {
                if !presence[i] {
                    return labels[i];
                }
                match cfg.rule {
                    PropagationRule::MinLabel => (0..n).filter(|&j| linked(i, j)).map(|j| labels[j]).fold(labels[i], usize::min),
                    PropagationRule::ScoreVote => {
                        let mut votes: Vec<(usize, f64)> = Vec::new();
                        for j in (0..n).filter(|&j| linked(i, j)) {
                            match votes.iter_mut().find(|(l, _)| *l == labels[j]) {
                                Some(v) => v.1 += scores[[i, j]],
                                None => votes.push((labels[j], scores[[i, j]])),
                            }
                        }
                        votes
                            .into_iter()
                            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                            .map_or(labels[i], |v| v.0)
                    }
                }
            })
            .collect();
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut seen: Vec<Option<usize>> = vec![None; n];
    for i in (0..n).filter(|&i| presence[i]) {
        match seen[labels[i]] {
            Some(g) => groups[g].push(i),
            None => {
                seen[labels[i]] = Some(groups.len());
                groups.push(vec![i]);
            }
        }
    }
    Ok(Propagation {
        partition: drop_singletons(&GroupPartition::new(frame, groups)),
        converged,
        iterations,
    })
}

/// Partition for one frame; see [`propagate`] for the convergence flag.
pub fn partition_from_relations(scores: &Array2<f64>, presence: &[bool], frame: usize, cfg: &PropagationConfig) -> Result<GroupPartition> {
    Ok(propagate(scores, presence, frame, cfg)?.partition)
}

pub fn drop_singletons(partition: &GroupPartition) -> GroupPartition {
    GroupPartition::new(
        partition.frame_index,
        partition.groups.iter().filter(|g| g.len() > 1).cloned().collect(),
    )
}

/// Per-frame partitions for a T×N×N relation tensor.
pub fn partition_clip(r: &Array3<f64>, presence: &[bool], cfg: &PropagationConfig) -> Result<Vec<GroupPartition>> {
    let (frames, n, _) = r.dim();
    if presence.len() != frames * n {
        return Err(Error::Validation("presence does not match relation tensor".into()));
    }
    (0..frames)
        .map(|t| partition_from_relations(&r.slice(s![t, .., ..]).to_owned(), &presence[t * n..(t + 1) * n], t, cfg))
        .collect()
}

/// Distance-only baseline: link subjects closer than `distance_cutoff` of the diagonal.
pub fn baseline_partition_from_distances(clip: &SceneClip, cfg: &PropagationConfig) -> Result<Vec<GroupPartition>> {
    cfg.validate()?;
    clip.validate()?;
    let d = features::pairwise_distance_channel(clip);
    let similarity = d.mapv(|v| 1.0 - v);
    let threshold = 1.0 - cfg.distance_cutoff;
    let n = clip.slots;
    (0..clip.frames)
        .map(|t| {
            let scores = similarity.slice(s![t, .., ..]).to_owned();
            // similarity above 1 - cutoff  <=>  distance below cutoff
            let presence = &clip.presence()[t * n..(t + 1) * n];
            let link = Array2::from_shape_fn((n, n), |(i, j)| if scores[[i, j]] > threshold { 1.0 } else { 0.0 });
            partition_from_relations(&link, presence, t, &PropagationConfig { threshold: 0.5, ..cfg.clone() })
        })
        .collect()
}

/// Clip-level partition: link two subjects when they share a group in more than half of
/// the frames where both are present, then take components.
pub fn consensus_partition(parts: &[GroupPartition], presence: &[bool], slots: usize) -> Result<GroupPartition> {
    let frames = parts.len();
    if presence.len() != frames * slots {
        return Err(Error::Validation("presence does not match partitions".into()));
    }
    let mut together = Array2::<f64>::zeros((slots, slots));
    let mut both = Array2::<f64>::zeros((slots, slots));
    for (t, p) in parts.iter().enumerate() {
        p.validate(slots)?;
        for g in &p.groups {
            for &a in g {
                for &b in g {
                    together[[a, b]] += 1.0;
                }
            }
        }
        for a in 0..slots {
            for b in 0..slots {
                if presence[t * slots + a] && presence[t * slots + b] {
                    both[[a, b]] += 1.0;
                }
            }
        }
    }
    let score = Array2::from_shape_fn((slots, slots), |(a, b)| {
        if both[[a, b]] > 0.0 && together[[a, b]] * 2.0 > both[[a, b]] {
            1.0
        } else {
            0.0
        }
    });
    let any: Vec<bool> = (0..slots).map(|i| (0..frames).any(|t| presence[t * slots + i])).collect();
    partition_from_relations(&score, &any, 0, &PropagationConfig::default())
}
