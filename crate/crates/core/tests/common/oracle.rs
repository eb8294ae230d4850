//! Brute-force reference implementations and randomized suites that compare them with the library.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdgroup::grouping::{partition_from_relations, PropagationConfig};
use crowdgroup::metrics::{self, default_thresholds};
use crowdgroup::scene::{relation_matrix_from_partition, GroupPartition};

fn set(g: &[usize]) -> BTreeSet<usize> {
    g.iter().copied().collect()
}

pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (a, b) = (set(a), set(b));
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

fn accepts(v: f64, t: f64) -> bool {
    if t >= 1.0 {
        v >= t
    } else {
        v > t
    }
}

/// Greedy matching by repeated arg-max scans over the unmatched pairs.
pub fn greedy_count(pred: &[Vec<usize>], gt: &[Vec<usize>], t: f64) -> usize {
    let (mut up, mut ug) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut count = 0;
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, p) in pred.iter().enumerate() {
            for (j, g) in gt.iter().enumerate() {
                let v = iou(p, g);
                if up[i] || ug[j] || !accepts(v, t) {
                    continue;
                }
                if best.is_none_or(|b| v > b.2) {
                    best = Some((i, j, v));
                }
            }
        }
        match best {
            Some((i, j, _)) => {
                up[i] = true;
                ug[j] = true;
                count += 1;
            }
            None => return count,
        }
    }
}

/// Largest one-to-one matching of pairs above the threshold, by exhaustive search.
pub fn optimal_count(pred: &[Vec<usize>], gt: &[Vec<usize>], t: f64) -> usize {
    fn go(i: usize, pred: &[Vec<usize>], gt: &[Vec<usize>], t: f64, used: &mut Vec<bool>) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, t, used);
        for j in 0..gt.len() {
            if !used[j] && accepts(iou(&pred[i], &gt[j]), t) {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, gt, t, used));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, gt, t, &mut vec![false; gt.len()])
}

pub fn half(pred: &[Vec<usize>], gt: &[Vec<usize>], t: f64) -> (f64, f64, f64) {
    let m = greedy_count(pred, gt, t);
    let p = if pred.is_empty() { 0.0 } else { m as f64 / pred.len() as f64 };
    let r = if gt.is_empty() { 0.0 } else { m as f64 / gt.len() as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn auc(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> f64 {
    let ts = default_thresholds();
    let fs: Vec<f64> = ts.iter().map(|&t| half(pred, gt, t).2).collect();
    let mut area = 0.0;
    for k in 1..ts.len() {
        area += (ts[k] - ts[k - 1]) * (fs[k - 1] + fs[k]) / 2.0;
    }
    area / (ts[ts.len() - 1] - ts[0])
}

/// Pairwise IoU over unordered co-grouped pairs among `present` subjects.
pub fn pair_iou(a: &[Vec<usize>], b: &[Vec<usize>], present: &[bool]) -> f64 {
    let pairs = |p: &[Vec<usize>]| -> BTreeSet<(usize, usize)> {
        let mut s = BTreeSet::new();
        for g in p {
            for &i in g {
                for &j in g {
                    if i < j && present[i] && present[j] {
                        s.insert((i, j));
                    }
                }
            }
        }
        s
    };
    let (pa, pb) = (pairs(a), pairs(b));
    let or = pa.union(&pb).count();
    if or == 0 {
        1.0
    } else {
        pa.intersection(&pb).count() as f64 / or as f64
    }
}

/// Components of the graph with an edge where both directed scores exceed `tau`, singletons dropped.
pub fn components(r: &Array2<f64>, present: &[bool], tau: f64) -> Vec<Vec<usize>> {
    let n = r.nrows();
    let mut reach = Array2::from_shape_fn((n, n), |(i, j)| {
        i == j || (present[i] && present[j] && r[[i, j]] > tau && r[[j, i]] > tau)
    });
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[[i, k]] && reach[[k, j]] {
                    reach[[i, j]] = true;
                }
            }
        }
    }
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut taken = vec![false; n];
    for i in (0..n).filter(|&i| present[i]) {
        if taken[i] {
            continue;
        }
        let g: Vec<usize> = (0..n).filter(|&j| reach[[i, j]]).collect();
        for &j in &g {
            taken[j] = true;
        }
        if g.len() > 1 {
            out.push(g);
        }
    }
    canonical(out)
}

pub fn canonical(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

/// Random disjoint groups over `0..n`; sizes 1..=n, at most `max_groups` groups.
pub fn random_groups(rng: &mut ChaCha8Rng, n: usize, max_groups: usize) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let k = rng.gen_range(0..=max_groups.min(n));
    let mut out = Vec::new();
    let mut rest = &ids[..];
    for _ in 0..k {
        if rest.is_empty() {
            break;
        }
        let size = rng.gen_range(1..=rest.len().min(4));
        out.push(rest[..size].to_vec());
        rest = &rest[size..];
    }
    out
}

#[derive(Debug, Default)]
pub struct MetricReport {
    pub instances: usize,
    pub mismatches: Vec<String>,
    /// Instance-threshold pairs evaluated at the curve thresholds and how many had greedy < optimal.
    pub curve_checks: usize,
    pub curve_discrepancies: usize,
    /// The same comparison at a low threshold, where one group can overlap several others.
    pub low_checks: usize,
    pub low_discrepancies: usize,
}

/// Compares every metric with its brute-force counterpart on random instances (N ≤ 8, ≤ 5 groups).
pub fn metric_suite(instances: usize, seed: u64) -> MetricReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = MetricReport {
        instances,
        ..Default::default()
    };
    for k in 0..instances {
        let n = rng.gen_range(2..=8);
        let pred = random_groups(&mut rng, n, 5);
        let gt = random_groups(&mut rng, n, 5);
        let present: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
        for (a, b) in pred.iter().zip(&gt) {
            if metrics::group_iou(a, b) != iou(a, b) {
                rep.mismatches.push(format!("instance {k}: group_iou {a:?} {b:?}"));
            }
        }
        for &t in &default_thresholds() {
            let lib = metrics::half_metrics(&pred, &gt, t);
            if (lib.precision, lib.recall, lib.f1) != half(&pred, &gt, t) {
                rep.mismatches.push(format!("instance {k}: half_metrics at {t}"));
            }
            rep.curve_checks += 1;
            rep.curve_discrepancies += (greedy_count(&pred, &gt, t) < optimal_count(&pred, &gt, t)) as usize;
        }
        rep.low_checks += 1;
        rep.low_discrepancies += (greedy_count(&pred, &gt, 0.2) < optimal_count(&pred, &gt, 0.2)) as usize;
        match metrics::iou_auc(&pred, &gt, &default_thresholds()) {
            Ok(c) if c.auc == auc(&pred, &gt) => {}
            other => rep.mismatches.push(format!("instance {k}: iou_auc {other:?}")),
        }
        let pa = GroupPartition::new(0, pred.clone());
        let pb = GroupPartition::new(0, gt.clone());
        let (ma, mb) = (
            relation_matrix_from_partition(&pa, n).unwrap(),
            relation_matrix_from_partition(&pb, n).unwrap(),
        );
        match metrics::iou_gm(&ma, &mb, &metrics::frame_mask(&present)) {
            Ok(v) if v == pair_iou(&pred, &gt, &present) => {}
            other => rep.mismatches.push(format!("instance {k}: iou_gm {other:?}")),
        }
    }
    rep
}

#[derive(Debug, Default)]
pub struct PartitionReport {
    pub instances: usize,
    pub mismatches: Vec<String>,
}

/// Compares label propagation with connected components on random symmetric matrices, N ≤ 8.
pub fn partition_suite(instances: usize, seed: u64) -> PartitionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = PartitionReport {
        instances,
        ..Default::default()
    };
    let cfg = PropagationConfig::default();
    for k in 0..instances {
        let n = rng.gen_range(1..=8);
        // sparse edges keep components of varied sizes
        let density = rng.gen_range(0.1..0.6);
        let mut r = Array2::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let v = if rng.gen_bool(density) { rng.gen_range(0.5..1.0) } else { rng.gen_range(0.0..=0.5) };
                r[[i, j]] = v;
                r[[j, i]] = v;
            }
        }
        let present: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.85)).collect();
        let lib = partition_from_relations(&r, &present, 0, &cfg).map(|p| canonical(p.groups));
        let want = components(&r, &present, cfg.threshold);
        if lib.as_ref().ok() != Some(&want) {
            rep.mismatches.push(format!("instance {k}: got {lib:?}, want {want:?}"));
        }
    }
    rep
}
