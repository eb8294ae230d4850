//! Group detection metrics: Half P/R/F1, the IoU-threshold curve and its AUC, and the
//! pairwise relation IoU (IOU^GM). Frames are accumulated in a [`Tally`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::GroupPartition;

/// |pred ∩ gt| / |pred ∪ gt|; 0 when either set is empty.
pub fn group_iou(pred: &[usize], gt: &[usize]) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let inter = pred.iter().filter(|p| gt.contains(p)).count();
    let union = pred.len() + gt.len() - inter;
    inter as f64 / union as f64
}

fn passes(iou: f64, threshold: f64, inclusive: bool) -> bool {
    // exact-match semantics at the top of the curve: IoU > 1 can never hold
    if inclusive || threshold >= 1.0 {
        iou >= threshold
    } else {
        iou > threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfMetricResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// (pred group index, gt group index, IoU) for every accepted match.
    pub matched_pairs: Vec<(usize, usize, f64)>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Greedy one-to-one matching in descending IoU order (ties: lower pred, then gt index).
pub fn greedy_matches(pred: &[Vec<usize>], gt: &[Vec<usize>], threshold: f64, inclusive: bool) -> Vec<(usize, usize, f64)> {
    let mut cand: Vec<(usize, usize, f64)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = group_iou(p, g);
            if passes(iou, threshold, inclusive) {
                cand.push((i, j, iou));
            }
        }
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut out = Vec::new();
    for (i, j, iou) in cand {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j, iou));
        }
    }
    out
}

/// Half metrics with strict IoU > threshold.
pub fn half_metrics(pred: &[Vec<usize>], gt: &[Vec<usize>], threshold: f64) -> HalfMetricResult {
    half_metrics_with(pred, gt, threshold, false)
}

pub fn half_metrics_with(pred: &[Vec<usize>], gt: &[Vec<usize>], threshold: f64, inclusive: bool) -> HalfMetricResult {
    let matched_pairs = greedy_matches(pred, gt, threshold, inclusive);
    let precision = ratio(matched_pairs.len(), pred.len());
    let recall = ratio(matched_pairs.len(), gt.len());
    HalfMetricResult {
        precision,
        recall,
        f1: f1_score(precision, recall),
        matched_pairs,
    }
}

/// 0.50, 0.55, ..., 1.00.
pub fn default_thresholds() -> Vec<f64> {
    (10..=20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveResult {
    pub thresholds: Vec<f64>,
    pub f1_at: Vec<f64>,
    pub auc: f64,
}

/// Trapezoid area under (thresholds, values) divided by the threshold span.
pub fn normalized_trapezoid(thresholds: &[f64], values: &[f64]) -> f64 {
    if thresholds.len() < 2 {
        return values.first().copied().unwrap_or(0.0);
    }
    let span = thresholds[thresholds.len() - 1] - thresholds[0];
    let area: f64 = thresholds
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) / 2.0)
        .sum();
    area / span
}

pub fn iou_auc(pred: &[Vec<usize>], gt: &[Vec<usize>], thresholds: &[f64]) -> Result<CurveResult> {
    check_thresholds(thresholds)?;
    let f1_at: Vec<f64> = thresholds.iter().map(|&t| half_metrics(pred, gt, t).f1).collect();
    Ok(CurveResult {
        thresholds: thresholds.to_vec(),
        auc: normalized_trapezoid(thresholds, &f1_at),
        f1_at,
    })
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] <= w[0]) || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Validation("thresholds must be ascending values in [0, 1]".into()));
    }
    Ok(())
}

/// Entries with value strictly above `tau` become 1.
pub fn binarize(r: &Array2<f64>, tau: f64) -> Array2<f64> {
    r.mapv(|v| if v > tau { 1.0 } else { 0.0 })
}

/// (AND-sum, OR-sum) of two binary matrices inside the mask.
pub fn iou_gm_counts(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> Result<(usize, usize)> {
    if pred.dim() != gt.dim() || pred.dim() != mask.dim() {
        return Err(Error::Validation("relation matrices and mask differ in shape".into()));
    }
    let (mut and, mut or) = (0, 0);
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
            return Err(Error::Validation(format!("relation matrices must be binary, found {p} / {g}")));
        }
        if m {
            and += (p == 1.0 && g == 1.0) as usize;
            or += (p == 1.0 || g == 1.0) as usize;
        }
    }
    Ok((and, or))
}

/// AND-sum over OR-sum; 1 when both are empty inside the mask.
pub fn iou_gm(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    let (and, or) = iou_gm_counts(pred, gt, mask)?;
    Ok(if or == 0 { 1.0 } else { and as f64 / or as f64 })
}

/// Off-diagonal pairs of subjects present in the frame.
pub fn frame_mask(presence: &[bool]) -> Array2<bool> {
    let n = presence.len();
    Array2::from_shape_fn((n, n), |(i, j)| i != j && presence[i] && presence[j])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }
    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.truth)
    }
    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

/// Running totals over frames; micro averages come from summed counts, macro averages
/// from per-frame values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub thresholds: Vec<f64>,
    pub counts: Vec<Counts>,
    pub gm_and: usize,
    pub gm_or: usize,
    pub frames: usize,
    pub frame_f1_sum: f64,
    pub frame_auc_sum: f64,
    pub frame_gm_sum: f64,
}

impl Default for Tally {
    fn default() -> Self {
        let thresholds = default_thresholds();
        Self {
            counts: vec![Counts::default(); thresholds.len()],
            thresholds,
            gm_and: 0,
            gm_or: 0,
            frames: 0,
            frame_f1_sum: 0.0,
            frame_auc_sum: 0.0,
            frame_gm_sum: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou_auc: f64,
    pub iou_gm: f64,
    pub macro_f1: f64,
    pub macro_iou_auc: f64,
    pub macro_iou_gm: f64,
}

impl Tally {
    /// Adds one frame. `pred_bin`/`gt_bin` are binary relation matrices, `mask` the valid pairs.
    pub fn add_frame(&mut self, pred: &GroupPartition, gt: &GroupPartition, pred_bin: &Array2<f64>, gt_bin: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
        let mut f1_at = Vec::with_capacity(self.thresholds.len());
        for (k, &t) in self.thresholds.iter().enumerate() {
            let h = half_metrics(&pred.groups, &gt.groups, t);
            let c = &mut self.counts[k];
            c.correct += h.matched_pairs.len();
            c.predicted += pred.groups.len();
            c.truth += gt.groups.len();
            f1_at.push(h.f1);
        }
        let (and, or) = iou_gm_counts(pred_bin, gt_bin, mask)?;
        self.gm_and += and;
        self.gm_or += or;
        self.frames += 1;
        self.frame_f1_sum += f1_at[0];
        self.frame_auc_sum += normalized_trapezoid(&self.thresholds, &f1_at);
        self.frame_gm_sum += if or == 0 { 1.0 } else { and as f64 / or as f64 };
        Ok(())
    }

    pub fn merge(&mut self, other: &Tally) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.correct += b.correct;
            a.predicted += b.predicted;
            a.truth += b.truth;
        }
        self.gm_and += other.gm_and;
        self.gm_or += other.gm_or;
        self.frames += other.frames;
        self.frame_f1_sum += other.frame_f1_sum;
        self.frame_auc_sum += other.frame_auc_sum;
        self.frame_gm_sum += other.frame_gm_sum;
    }

    /// Micro-averaged F1 at each threshold.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.thresholds.iter().zip(&self.counts).map(|(&t, c)| (t, c.f1())).collect()
    }

    pub fn summary(&self) -> Summary {
        let half = self.counts[0];
        let f1s: Vec<f64> = self.counts.iter().map(Counts::f1).collect();
        let per = |s: f64| if self.frames == 0 { 0.0 } else { s / self.frames as f64 };
        Summary {
            frames: self.frames,
            precision: half.precision(),
            recall: half.recall(),
            f1: half.f1(),
            iou_auc: normalized_trapezoid(&self.thresholds, &f1s),
            iou_gm: if self.gm_or == 0 { 1.0 } else { self.gm_and as f64 / self.gm_or as f64 },
            macro_f1: per(self.frame_f1_sum),
            macro_iou_auc: per(self.frame_auc_sum),
            macro_iou_gm: per(self.frame_gm_sum),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn iou_examples() {
        assert_eq!(group_iou(&[1, 2], &[1, 2]), 1.0);
        assert!((group_iou(&[1, 2, 3], &[1, 2]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(group_iou(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(group_iou(&[], &[3, 4]), 0.0);
    }

    #[test]
    fn half_examples() {
        let gt = vec![vec![1, 2], vec![3, 4]];
        let perfect = half_metrics(&gt, &gt, 0.5);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let h = half_metrics(&[vec![1, 2, 3]], &gt, 0.5);
        assert_eq!((h.precision, h.recall), (1.0, 0.5));
        assert!((h.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(h.matched_pairs, vec![(0, 0, 2.0 / 3.0)]);
        let none = half_metrics(&[], &gt, 0.5);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn strictness_at_half() {
        // IoU exactly 0.5
        let pred = vec![vec![1, 2]];
        let gt = vec![vec![1, 2, 3, 4]];
        assert_eq!(half_metrics(&pred, &gt, 0.5).f1, 0.0);
        assert_eq!(half_metrics_with(&pred, &gt, 0.5, true).f1, 1.0);
    }

    #[test]
    fn auc_examples() {
        let gt = vec![vec![1, 2, 3, 4]];
        let perfect = iou_auc(&gt, &gt, &default_thresholds()).unwrap();
        assert!(perfect.f1_at.iter().all(|&f| f == 1.0));
        assert!((perfect.auc - 1.0).abs() < 1e-12);
        // step at 0.75: five ones (0.50..0.70) then zeros; area 0.2 + 0.025 over span 0.5
        let c = iou_auc(&[vec![1, 2, 3]], &gt, &default_thresholds()).unwrap();
        assert_eq!(&c.f1_at[..5], &[1.0; 5]);
        assert!(c.f1_at[5..].iter().all(|&f| f == 0.0));
        assert!((c.auc - 0.45).abs() < 1e-12);
        assert_eq!(iou_auc(&[], &gt, &default_thresholds()).unwrap().auc, 0.0);
        assert!(iou_auc(&gt, &gt, &[0.7, 0.6]).is_err());
    }

    #[test]
    fn gm_examples() {
        let n = 4;
        let mask = frame_mask(&[true; 4]);
        let a = Array2::from_shape_fn((n, n), |(i, j)| (i != j && i < 3 && j < 3) as u8 as f64);
        assert_eq!(iou_gm(&a, &a, &mask).unwrap(), 1.0);
        let b = array![[0., 1., 0., 0.], [1., 0., 0., 0.], [0., 0., 0., 0.], [0., 0., 0., 0.]];
        let c = array![[0., 0., 0., 0.], [0., 0., 0., 0.], [0., 0., 0., 1.], [0., 0., 1., 0.]];
        assert_eq!(iou_gm(&b, &c, &mask).unwrap(), 0.0);
        // 3 predicted pairs, 2 true, overlap 2: AND 4, OR 6
        let gt = array![[0., 1., 1., 0.], [1., 0., 0., 0.], [1., 0., 0., 0.], [0., 0., 0., 0.]];
        let pred = array![[0., 1., 1., 0.], [1., 0., 1., 0.], [1., 1., 0., 0.], [0., 0., 0., 0.]];
        assert!((iou_gm(&pred, &gt, &mask).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let z = Array2::zeros((n, n));
        assert_eq!(iou_gm(&z, &z, &mask).unwrap(), 1.0);
        let bad = Array2::from_elem((n, n), 0.3);
        assert!(iou_gm(&bad, &z, &mask).is_err());
    }

    #[test]
    fn tally_micro_and_macro() {
        let mut t = Tally::default();
        let gt = GroupPartition::new(0, vec![vec![0, 1], vec![2, 3]]);
        let pred = GroupPartition::new(0, vec![vec![0, 1]]);
        let z = Array2::zeros((4, 4));
        let mask = frame_mask(&[true; 4]);
        t.add_frame(&pred, &gt, &z, &z, &mask).unwrap();
        t.add_frame(&gt, &gt, &z, &z, &mask).unwrap();
        let s = t.summary();
        assert_eq!(s.frames, 2);
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 0.75).abs() < 1e-12);
        assert!((s.macro_f1 - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(s.iou_gm, 1.0);
    }
}
