//! Clip data model, annotation ingestion and synthetic crowd generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 16;

pub type Skeleton = [[f64; 2]; NUM_JOINTS];

/// Axis-aligned person box given by its center and size, in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.cx, self.cy]
    }

    fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

/// MPII joint order, offsets from the box center in units of box height (image y points down).
const TEMPLATE: Skeleton = [
    [-0.08, 0.48],  // right ankle
    [-0.07, 0.25],  // right knee
    [-0.07, 0.02],  // right hip
    [0.07, 0.02],   // left hip
    [0.07, 0.25],   // left knee
    [0.08, 0.48],   // left ankle
    [0.0, 0.02],    // pelvis
    [0.0, -0.25],   // thorax
    [0.0, -0.32],   // upper neck
    [0.0, -0.48],   // head top
    [-0.15, 0.05],  // right wrist
    [-0.14, -0.10], // right elbow
    [-0.11, -0.25], // right shoulder
    [0.11, -0.25],  // left shoulder
    [0.14, -0.10],  // left elbow
    [0.15, 0.05],   // left wrist
];

/// The fixed humanoid template scaled to the box height and placed at its center.
pub fn template_skeleton(b: &BBox) -> Skeleton {
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (dst, off) in out.iter_mut().zip(TEMPLATE.iter()) {
        dst[0] = b.cx + off[0] * b.h;
        dst[1] = b.cy + off[1] * b.h;
    }
    out
}

/// Per-frame division of present subjects into disjoint groups.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub frame_index: usize,
    pub groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    pub fn new(frame_index: usize, groups: Vec<Vec<usize>>) -> Self {
        let mut p = Self {
            frame_index,
            groups,
        };
        p.canonicalize();
        p
    }

    /// Sorts members within each group and groups by their smallest member.
    pub fn canonicalize(&mut self) {
        for g in &mut self.groups {
            g.sort_unstable();
            g.dedup();
        }
        self.groups.retain(|g| !g.is_empty());
        self.groups.sort();
    }

    pub fn validate(&self, slots: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            for &s in g {
                if s >= slots {
                    return Err(Error::Validation(format!(
                        "frame {}: subject {s} out of range for {slots} slots",
                        self.frame_index
                    )));
                }
                if !seen.insert(s) {
                    return Err(Error::Validation(format!(
                        "frame {}: subject {s} appears in more than one group",
                        self.frame_index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of groups with at least two members.
    pub fn num_groups(&self) -> usize {
        self.groups.iter().filter(|g| g.len() >= 2).count()
    }
}

/// T frames of up to N subject slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneClip {
    pub clip_id: String,
    pub frames: usize,
    pub slots: usize,
    pub extent: (f64, f64),
    boxes: Vec<BBox>,
    joints: Vec<Skeleton>,
    presence: Vec<bool>,
    pub gt: Option<Vec<GroupPartition>>,
}

impl SceneClip {
    /// An empty clip: every slot absent in every frame.
    pub fn new(clip_id: impl Into<String>, frames: usize, slots: usize, extent: (f64, f64)) -> Result<Self> {
        if frames == 0 || slots == 0 {
            return Err(Error::Validation(format!(
                "clip needs at least one frame and one slot (got T={frames}, N={slots})"
            )));
        }
        if !(extent.0 > 0.0 && extent.1 > 0.0 && extent.0.is_finite() && extent.1.is_finite()) {
            return Err(Error::Validation(format!("scene extent must be positive, got {extent:?}")));
        }
        let cells = frames * slots;
        Ok(Self {
            clip_id: clip_id.into(),
            frames,
            slots,
            extent,
            boxes: vec![BBox::default(); cells],
            joints: vec![[[0.0; 2]; NUM_JOINTS]; cells],
            presence: vec![false; cells],
            gt: None,
        })
    }

    #[inline]
    fn cell(&self, t: usize, i: usize) -> usize {
        debug_assert!(t < self.frames && i < self.slots);
        t * self.slots + i
    }

    pub fn set_subject(&mut self, t: usize, i: usize, bbox: BBox, joints: Skeleton) -> Result<()> {
        if i >= self.slots {
            return Err(Error::Capacity {
                index: i,
                capacity: self.slots,
            });
        }
        if t >= self.frames {
            return Err(Error::Validation(format!("frame {t} out of range for T={}", self.frames)));
        }
        let c = self.cell(t, i);
        self.boxes[c] = bbox;
        self.joints[c] = joints;
        self.presence[c] = true;
        Ok(())
    }

    pub fn clear_subject(&mut self, t: usize, i: usize) {
        let c = self.cell(t, i);
        self.boxes[c] = BBox::default();
        self.joints[c] = [[0.0; 2]; NUM_JOINTS];
        self.presence[c] = false;
    }

    pub fn is_present(&self, t: usize, i: usize) -> bool {
        self.presence[self.cell(t, i)]
    }

    pub fn bbox(&self, t: usize, i: usize) -> &BBox {
        &self.boxes[self.cell(t, i)]
    }

    pub fn joints(&self, t: usize, i: usize) -> &Skeleton {
        &self.joints[self.cell(t, i)]
    }

    pub fn center(&self, t: usize, i: usize) -> [f64; 2] {
        self.bbox(t, i).center()
    }

    /// Presence mask in frame-major order (T*N).
    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn present_in_frame(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.slots).filter(move |&i| self.is_present(t, i))
    }

    /// Subjects present in at least one frame.
    pub fn present_anywhere(&self) -> Vec<usize> {
        (0..self.slots)
            .filter(|&i| (0..self.frames).any(|t| self.is_present(t, i)))
            .collect()
    }

    pub fn diagonal(&self) -> f64 {
        self.extent.0.hypot(self.extent.1)
    }

    pub fn is_labeled(&self) -> bool {
        self.gt.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.slots == 0 {
            return Err(Error::Validation("empty clip".into()));
        }
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::Validation("non-positive scene extent".into()));
        }
        for t in 0..self.frames {
            for i in 0..self.slots {
                let c = self.cell(t, i);
                let b = &self.boxes[c];
                let j = &self.joints[c];
                let finite = b.is_finite() && j.iter().flatten().all(|v| v.is_finite());
                if self.presence[c] {
                    if !finite {
                        return Err(Error::Validation(format!(
                            "clip {}: non-finite value at frame {t} subject {i}",
                            self.clip_id
                        )));
                    }
                } else if *b != BBox::default() || j.iter().flatten().any(|&v| v != 0.0) {
                    return Err(Error::Validation(format!(
                        "clip {}: absent subject {i} at frame {t} is not zero-filled",
                        self.clip_id
                    )));
                }
            }
        }
        if let Some(gt) = &self.gt {
            if gt.len() != self.frames {
                return Err(Error::Validation(format!(
                    "clip {}: {} partitions for {} frames",
                    self.clip_id,
                    gt.len(),
                    self.frames
                )));
            }
            for (t, p) in gt.iter().enumerate() {
                if p.frame_index != t {
                    return Err(Error::Validation(format!("partition frame index {} at position {t}", p.frame_index)));
                }
                p.validate(self.slots)?;
                for g in &p.groups {
                    if let Some(&s) = g.iter().find(|&&s| !self.is_present(t, s)) {
                        return Err(Error::Validation(format!(
                            "clip {}: group at frame {t} references absent subject {s}",
                            self.clip_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Binary N×N relation slice for one frame: 1 iff two distinct subjects share a group.
pub fn relation_matrix_from_partition(partition: &GroupPartition, slots: usize) -> Result<Array2<f64>> {
    partition.validate(slots)?;
    let mut r = Array2::zeros((slots, slots));
    for g in &partition.groups {
        for &a in g {
            for &b in g {
                if a != b {
                    r[[a, b]] = 1.0;
                }
            }
        }
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    WalkTogether,
    Gather,
    Queue,
    RandomWalk,
    /// Each group draws one of the four models above.
    Mixed,
}

impl FromStr for MotionModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk-together" => Ok(Self::WalkTogether),
            "gather" => Ok(Self::Gather),
            "queue" => Ok(Self::Queue),
            "random-walk" => Ok(Self::RandomWalk),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!("unknown motion model `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_groups: usize,
    pub group_size_range: (usize, usize),
    pub n_loners: usize,
    pub motion_model: MotionModel,
    pub frame_count: usize,
    pub scene_extent: (f64, f64),
    /// Uniform per-coordinate jitter half-width, pixels.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_groups: 4,
            group_size_range: (2, 4),
            n_loners: 6,
            motion_model: MotionModel::Mixed,
            frame_count: 10,
            scene_extent: (1000.0, 1000.0),
            noise_scale: 1.5,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.group_size_range;
        if lo > hi {
            return Err(Error::Validation(format!("group size range ({lo}, {hi}) has min > max")));
        }
        if self.n_groups > 0 && lo < 2 {
            return Err(Error::Validation("planted groups need at least two members".into()));
        }
        if self.frame_count == 0 {
            return Err(Error::Validation("frame_count must be positive".into()));
        }
        if !(self.scene_extent.0 > 0.0 && self.scene_extent.1 > 0.0) {
            return Err(Error::Validation("scene extent must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Validation("noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Minimum spacing between any two people at any frame, pixels.
const PERSONAL_SPACE: f64 = 22.0;
/// Keep-out band along the scene border, pixels.
const MARGIN: f64 = 40.0;
const PLACEMENT_ATTEMPTS: usize = 400;

struct Walker {
    /// Noise-free center trajectory.
    path: Vec<[f64; 2]>,
    height: f64,
    speed: f64,
    facing_left: bool,
    gait_phase: f64,
}

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn concrete_model(model: MotionModel, rng: &mut ChaCha8Rng) -> MotionModel {
    match model {
        MotionModel::Mixed => [
            MotionModel::WalkTogether,
            MotionModel::WalkTogether,
            MotionModel::Gather,
            MotionModel::Queue,
            MotionModel::RandomWalk,
        ][rng.gen_range(0..5)],
        m => m,
    }
}

/// Anchor trajectory and per-member formation offsets for one group.
fn group_plan(model: MotionModel, size: usize, frames: usize, start: [f64; 2], rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, f64) {
    let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let (speed, drift) = match model {
        MotionModel::WalkTogether => (rng.gen_range(6.0..12.0), 0.0),
        MotionModel::Queue => (rng.gen_range(1.5..3.0), 0.0),
        MotionModel::Gather => (0.0, 0.0),
        MotionModel::RandomWalk => (rng.gen_range(3.0..8.0), 0.3),
        MotionModel::Mixed => unreachable!(),
    };
    let spacing = rng.gen_range(32.0..45.0);
    let dir = unit(heading);
    let perp = [-dir[1], dir[0]];
    let offsets: Vec<[f64; 2]> = (0..size)
        .map(|k| {
            let centered = k as f64 - (size as f64 - 1.0) / 2.0;
            match model {
                MotionModel::WalkTogether | MotionModel::RandomWalk => {
                    [perp[0] * centered * spacing, perp[1] * centered * spacing]
                }
                MotionModel::Queue => [dir[0] * centered * spacing, dir[1] * centered * spacing],
                MotionModel::Gather => {
                    let radius = spacing / (2.0 * (std::f64::consts::PI / size as f64).sin().max(0.5));
                    let a = std::f64::consts::TAU * k as f64 / size as f64;
                    [radius * a.cos(), radius * a.sin()]
                }
                MotionModel::Mixed => unreachable!(),
            }
        })
        .collect();
    let mut anchor = Vec::with_capacity(frames);
    let mut pos = start;
    for t in 0..frames {
        if t > 0 {
            heading += rng.gen_range(-drift..=drift);
            let d = unit(heading);
            pos = [pos[0] + speed * d[0], pos[1] + speed * d[1]];
        }
        anchor.push(pos);
    }
    (anchor, offsets, speed)
}

fn fits(path: &[[f64; 2]], extent: (f64, f64), placed: &[Walker]) -> bool {
    let inside = path
        .iter()
        .all(|p| p[0] >= MARGIN && p[0] <= extent.0 - MARGIN && p[1] >= MARGIN && p[1] <= extent.1 - MARGIN);
    inside
        && placed.iter().all(|w| {
            w.path
                .iter()
                .zip(path)
                .all(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]) >= PERSONAL_SPACE)
        })
}

fn posed_skeleton(center: [f64; 2], w: &Walker, t: usize, noise: f64, rng: &mut ChaCha8Rng) -> Skeleton {
    let b = BBox::new(center[0], center[1], 0.4 * w.height, w.height);
    let mut sk = template_skeleton(&b);
    let swing = 0.06 * (w.speed / 10.0).min(1.2) * w.height * (w.gait_phase + 0.9 * t as f64).sin();
    // legs: right ankle/knee forward, left back; arms opposite
    for (j, s) in [(0, 1.0), (1, 0.5), (5, -1.0), (4, -0.5), (10, -0.8), (15, 0.8)] {
        sk[j][0] += s * swing;
    }
    if w.facing_left {
        for p in sk.iter_mut() {
            p[0] = 2.0 * center[0] - p[0];
        }
    }
    for p in sk.iter_mut() {
        p[0] += jitter(noise, rng);
        p[1] += jitter(noise, rng);
    }
    sk
}

fn jitter(noise: f64, rng: &mut ChaCha8Rng) -> f64 {
    if noise > 0.0 {
        rng.gen_range(-noise..=noise)
    } else {
        0.0
    }
}

/// Synthesizes a clip with planted groups; identical seeds give identical clips.
pub fn generate_synthetic_scene(params: &SynthParams) -> Result<SceneClip> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let frames = params.frame_count;
    let extent = params.scene_extent;

    let sizes: Vec<usize> = (0..params.n_groups)
        .map(|_| rng.gen_range(params.group_size_range.0..=params.group_size_range.1))
        .collect();
    let total = sizes.iter().sum::<usize>() + params.n_loners;
    if total == 0 {
        return Err(Error::Generation("scene has no subjects".into()));
    }
    let usable = (extent.0 - 2.0 * MARGIN).max(0.0) * (extent.1 - 2.0 * MARGIN).max(0.0);
    if total as f64 * (2.0 * PERSONAL_SPACE).powi(2) > usable {
        return Err(Error::Generation(format!(
            "{total} subjects do not fit in a {}x{} scene",
            extent.0, extent.1
        )));
    }

    let mut walkers: Vec<Walker> = Vec::with_capacity(total);
    let mut group_members: Vec<Vec<usize>> = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let model = concrete_model(params.motion_model, &mut rng);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let start = [rng.gen_range(MARGIN..extent.0 - MARGIN), rng.gen_range(MARGIN..extent.1 - MARGIN)];
            let (anchor, offsets, speed) = group_plan(model, size, frames, start, &mut rng);
            let paths: Vec<Vec<[f64; 2]>> = offsets
                .iter()
                .map(|o| anchor.iter().map(|a| [a[0] + o[0], a[1] + o[1]]).collect())
                .collect();
            if !paths.iter().all(|p| fits(p, extent, &walkers)) {
                continue;
            }
            let facing_left = anchor.last().unwrap()[0] < anchor[0][0];
            let first = walkers.len();
            for path in paths {
                let height = rng.gen_range(50.0..70.0);
                let gait_phase = rng.gen_range(0.0..std::f64::consts::TAU);
                walkers.push(Walker {
                    path,
                    height,
                    speed,
                    facing_left,
                    gait_phase,
                });
            }
            group_members.push((first..walkers.len()).collect());
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!("could not place a group of {size} after {PLACEMENT_ATTEMPTS} attempts")));
        }
    }
    for _ in 0..params.n_loners {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let start = [rng.gen_range(MARGIN..extent.0 - MARGIN), rng.gen_range(MARGIN..extent.1 - MARGIN)];
            let (path, _, speed) = group_plan(MotionModel::RandomWalk, 1, frames, start, &mut rng);
            if !fits(&path, extent, &walkers) {
                continue;
            }
            let facing_left = path.last().unwrap()[0] < path[0][0];
            walkers.push(Walker {
                path,
                height: rng.gen_range(50.0..70.0),
                speed,
                facing_left,
                gait_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!("could not place a loner after {PLACEMENT_ATTEMPTS} attempts")));
        }
    }

    // random slot assignment so that slot order carries no group information
    let mut slot_of: Vec<usize> = (0..total).collect();
    slot_of.shuffle(&mut rng);

    let mut clip = SceneClip::new(format!("synth-{}", params.seed), frames, total, extent)?;
    for t in 0..frames {
        for (k, w) in walkers.iter().enumerate() {
            let p = w.path[t];
            let center = [p[0] + jitter(params.noise_scale, &mut rng), p[1] + jitter(params.noise_scale, &mut rng)];
            let sk = posed_skeleton(center, w, t, params.noise_scale, &mut rng);
            let b = BBox::new(center[0], center[1], 0.4 * w.height, w.height);
            clip.set_subject(t, slot_of[k], b, sk)?;
        }
    }
    let groups: Vec<Vec<usize>> = group_members
        .iter()
        .map(|g| g.iter().map(|&k| slot_of[k]).collect())
        .collect();
    clip.gt = Some((0..frames).map(|t| GroupPartition::new(t, groups.clone())).collect());
    Ok(clip)
}

// ---------------------------------------------------------------------------
// Annotation files

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schema {
    Native,
    PandaLike,
    JrdbLike,
}

impl FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Self::Native),
            "panda-like" => Ok(Self::PandaLike),
            "jrdb-like" => Ok(Self::JrdbLike),
            other => Err(Error::Config(format!("unknown schema `{other}`"))),
        }
    }
}

/// How clip-level group annotations map onto frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupMode {
    /// Every group applies to every frame (restricted to members present there).
    #[default]
    Broadcast,
    /// Groups apply only to the frames they list; unlisted means all frames.
    PerFrame,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub group_mode: GroupMode,
    /// Reject files whose subject count exceeds this many slots.
    pub max_subjects: Option<usize>,
}

/// Loads every clip under `path` (a file or a directory of files, read in name order).
pub fn load_clip_dataset(path: &Path, schema: Schema) -> Result<Vec<SceneClip>> {
    load_clip_dataset_with(path, schema, &LoadOptions::default())
}

pub fn load_clip_dataset_with(path: &Path, schema: Schema, opts: &LoadOptions) -> Result<Vec<SceneClip>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else if path.exists() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    };
    let mut clips = Vec::new();
    for f in files {
        let file = fs::File::open(&f)?;
        match schema {
            Schema::Native => clips.extend(read_native(file, &f)?),
            Schema::PandaLike => clips.push(read_panda_like(file, &f, opts)?),
            Schema::JrdbLike => clips.push(read_jrdb_like(file, &f, opts)?),
        }
    }
    if let Some(cap) = opts.max_subjects {
        if let Some(c) = clips.iter().find(|c| c.slots > cap) {
            return Err(Error::Capacity {
                index: c.slots - 1,
                capacity: cap,
            });
        }
    }
    Ok(clips)
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: FromStr>(tok: &str, file: &Path, line: usize, what: &str) -> Result<T> {
    tok.parse::<T>()
        .map_err(|_| parse_err(file, line, format!("invalid {what} `{tok}`")))
}

fn parse_coord(tok: &str, file: &Path, line: usize) -> Result<f64> {
    let v: f64 = parse_num(tok, file, line, "number")?;
    if !v.is_finite() {
        return Err(parse_err(file, line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

struct NativeBuilder {
    clip: SceneClip,
    labeled: bool,
    groups: BTreeMap<(usize, u64), Vec<usize>>,
}

impl NativeBuilder {
    fn finish(self) -> Result<SceneClip> {
        let mut clip = self.clip;
        if self.labeled || !self.groups.is_empty() {
            let mut per_frame: Vec<Vec<Vec<usize>>> = vec![Vec::new(); clip.frames];
            for ((t, _), members) in self.groups {
                per_frame[t].push(members);
            }
            clip.gt = Some(
                per_frame
                    .into_iter()
                    .enumerate()
                    .map(|(t, g)| GroupPartition::new(t, g))
                    .collect(),
            );
        }
        clip.validate()?;
        Ok(clip)
    }
}

/// Reads native line records. See `write_native` for the layout.
pub fn read_native<R: Read>(reader: R, file: &Path) -> Result<Vec<SceneClip>> {
    let mut clips = Vec::new();
    let mut current: Option<NativeBuilder> = None;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        match toks[0] {
            "clip" => {
                if toks.len() != 6 {
                    return Err(parse_err(file, lineno, "clip header needs `clip <id> T N width height`"));
                }
                if let Some(b) = current.take() {
                    clips.push(b.finish()?);
                }
                let frames: usize = parse_num(toks[2], file, lineno, "frame count")?;
                let slots: usize = parse_num(toks[3], file, lineno, "slot count")?;
                let w = parse_coord(toks[4], file, lineno)?;
                let h = parse_coord(toks[5], file, lineno)?;
                let clip = SceneClip::new(toks[1], frames, slots, (w, h)).map_err(|e| parse_err(file, lineno, e.to_string()))?;
                current = Some(NativeBuilder {
                    clip,
                    labeled: false,
                    groups: BTreeMap::new(),
                });
            }
            "labeled" => {
                let b = current
                    .as_mut()
                    .ok_or_else(|| parse_err(file, lineno, "record before clip header"))?;
                b.labeled = true;
            }
            "group" => {
                let b = current
                    .as_mut()
                    .ok_or_else(|| parse_err(file, lineno, "record before clip header"))?;
                if toks.len() != 4 {
                    return Err(parse_err(file, lineno, "group record needs `group frame g_id subject`"));
                }
                let t: usize = parse_num(toks[1], file, lineno, "frame")?;
                let g: u64 = parse_num(toks[2], file, lineno, "group id")?;
                let s: usize = parse_num(toks[3], file, lineno, "subject")?;
                if t >= b.clip.frames {
                    return Err(parse_err(file, lineno, format!("frame {t} out of range")));
                }
                if s >= b.clip.slots {
                    return Err(Error::Capacity {
                        index: s,
                        capacity: b.clip.slots,
                    });
                }
                b.groups.entry((t, g)).or_default().push(s);
            }
            _ => {
                let b = current
                    .as_mut()
                    .ok_or_else(|| parse_err(file, lineno, "record before clip header"))?;
                let expected = 2 + 4 + 2 * NUM_JOINTS;
                if toks.len() != expected {
                    return Err(parse_err(
                        file,
                        lineno,
                        format!("subject record needs {expected} fields, got {}", toks.len()),
                    ));
                }
                let t: usize = parse_num(toks[0], file, lineno, "frame")?;
                let s: usize = parse_num(toks[1], file, lineno, "subject")?;
                if t >= b.clip.frames {
                    return Err(parse_err(file, lineno, format!("frame {t} out of range")));
                }
                if s >= b.clip.slots {
                    return Err(Error::Capacity {
                        index: s,
                        capacity: b.clip.slots,
                    });
                }
                let mut vals = [0.0f64; 4 + 2 * NUM_JOINTS];
                for (v, tok) in vals.iter_mut().zip(&toks[2..]) {
                    *v = parse_coord(tok, file, lineno)?;
                }
                let bbox = BBox::new(vals[0], vals[1], vals[2], vals[3]);
                let mut sk = [[0.0; 2]; NUM_JOINTS];
                for (j, p) in sk.iter_mut().enumerate() {
                    *p = [vals[4 + 2 * j], vals[5 + 2 * j]];
                }
                b.clip.set_subject(t, s, bbox, sk)?;
            }
        }
    }
    if let Some(b) = current.take() {
        clips.push(b.finish()?);
    }
    Ok(clips)
}

/// Canonical native encoding:
///
/// ```text
/// clip <id> T N width height
/// labeled                                  (only when ground truth is attached)
/// frame subject cx cy w h j1x j1y ... j16x j16y   (present subjects, frame-major)
/// group frame g_id subject                  (groups in canonical order)
/// ```
pub fn write_native(clips: &[SceneClip]) -> String {
    let mut out = String::new();
    for c in clips {
        let _ = writeln!(out, "clip {} {} {} {} {}", c.clip_id, c.frames, c.slots, c.extent.0, c.extent.1);
        if c.gt.is_some() {
            out.push_str("labeled\n");
        }
        for t in 0..c.frames {
            for i in c.present_in_frame(t) {
                let b = c.bbox(t, i);
                let _ = write!(out, "{t} {i} {} {} {} {}", b.cx, b.cy, b.w, b.h);
                for p in c.joints(t, i) {
                    let _ = write!(out, " {} {}", p[0], p[1]);
                }
                out.push('\n');
            }
        }
        if let Some(gt) = &c.gt {
            out.push_str(&write_partitions(gt));
        }
    }
    out
}

/// `frame g_id subject` lines (prefixed with `group`), shared with partition output files.
pub fn write_partitions(parts: &[GroupPartition]) -> String {
    let mut out = String::new();
    for p in parts {
        let mut p = p.clone();
        p.canonicalize();
        for (g, members) in p.groups.iter().enumerate() {
            for s in members {
                let _ = writeln!(out, "group {} {g} {s}", p.frame_index);
            }
        }
    }
    out
}

/// Parses `group frame g_id subject` lines into per-frame partitions over `frames` frames.
pub fn read_partitions(text: &str, frames: usize, file: &Path) -> Result<Vec<GroupPartition>> {
    let mut groups: BTreeMap<(usize, u64), Vec<usize>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        if toks.len() != 4 || toks[0] != "group" {
            return Err(parse_err(file, idx + 1, "expected `group frame g_id subject`"));
        }
        let t: usize = parse_num(toks[1], file, idx + 1, "frame")?;
        if t >= frames {
            return Err(parse_err(file, idx + 1, format!("frame {t} out of range")));
        }
        let g: u64 = parse_num(toks[2], file, idx + 1, "group id")?;
        let s: usize = parse_num(toks[3], file, idx + 1, "subject")?;
        groups.entry((t, g)).or_default().push(s);
    }
    let mut per_frame: Vec<Vec<Vec<usize>>> = vec![Vec::new(); frames];
    for ((t, _), m) in groups {
        per_frame[t].push(m);
    }
    Ok(per_frame
        .into_iter()
        .enumerate()
        .map(|(t, g)| GroupPartition::new(t, g))
        .collect())
}

// panda-like: one JSON document per clip.
//
// width/height       -> scene_extent
// tracks[].track_id  -> subject slot (in order of first appearance)
// frames[].frame_id  -> frame index (sorted unique ids mapped to 0..T)
// rect.tl / rect.br  -> box, normalized to [0,1] by the image size
// joints (optional)  -> 16 [x, y] pixel pairs; template skeleton at the box otherwise
// groups[].members   -> track ids; groups[].frames optionally restricts frames (PerFrame mode)

#[derive(Deserialize)]
struct PandaPoint {
    x: f64,
    y: f64,
}

#[derive(Deserialize)]
struct PandaRect {
    tl: PandaPoint,
    br: PandaPoint,
}

#[derive(Deserialize)]
struct PandaFrame {
    frame_id: i64,
    rect: PandaRect,
    #[serde(default)]
    joints: Option<Vec<[f64; 2]>>,
}

#[derive(Deserialize)]
struct PandaTrack {
    track_id: i64,
    frames: Vec<PandaFrame>,
}

#[derive(Deserialize)]
struct PandaGroup {
    #[allow(dead_code)]
    group_id: i64,
    members: Vec<i64>,
    #[serde(default)]
    frames: Option<Vec<i64>>,
}

#[derive(Deserialize)]
struct PandaDoc {
    #[serde(default)]
    scene: Option<String>,
    width: f64,
    height: f64,
    tracks: Vec<PandaTrack>,
    #[serde(default)]
    groups: Option<Vec<PandaGroup>>,
}

fn skeleton_from(joints: Option<&Vec<[f64; 2]>>, b: &BBox, file: &Path) -> Result<Skeleton> {
    match joints {
        None => Ok(template_skeleton(b)),
        Some(j) if j.len() == NUM_JOINTS => {
            let mut sk = [[0.0; 2]; NUM_JOINTS];
            for (dst, src) in sk.iter_mut().zip(j) {
                if !(src[0].is_finite() && src[1].is_finite()) {
                    return Err(parse_err(file, 0, "non-finite joint coordinate"));
                }
                *dst = *src;
            }
            Ok(sk)
        }
        Some(j) => Err(parse_err(file, 0, format!("expected {NUM_JOINTS} joints, got {}", j.len()))),
    }
}

fn clip_stem(file: &Path) -> String {
    file.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into())
}

fn read_panda_like<R: Read>(reader: R, file: &Path, opts: &LoadOptions) -> Result<SceneClip> {
    let doc: PandaDoc = serde_json::from_reader(reader).map_err(|e| parse_err(file, e.line(), e.to_string()))?;
    let frame_ids: BTreeSet<i64> = doc.tracks.iter().flat_map(|t| t.frames.iter().map(|f| f.frame_id)).collect();
    let frame_index: BTreeMap<i64, usize> = frame_ids.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let slot_of: BTreeMap<i64, usize> = doc.tracks.iter().enumerate().map(|(i, t)| (t.track_id, i)).collect();
    if slot_of.len() != doc.tracks.len() {
        return Err(parse_err(file, 0, "duplicate track_id"));
    }
    if let Some(cap) = opts.max_subjects {
        if doc.tracks.len() > cap {
            return Err(Error::Capacity {
                index: doc.tracks.len() - 1,
                capacity: cap,
            });
        }
    }
    let id = doc.scene.clone().unwrap_or_else(|| clip_stem(file));
    let mut clip = SceneClip::new(id, frame_ids.len().max(1), doc.tracks.len().max(1), (doc.width, doc.height))
        .map_err(|e| parse_err(file, 0, e.to_string()))?;
    for (slot, track) in doc.tracks.iter().enumerate() {
        for f in &track.frames {
            let r = &f.rect;
            let vals = [r.tl.x, r.tl.y, r.br.x, r.br.y];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(file, 0, format!("non-finite rect in track {}", track.track_id)));
            }
            let (x0, y0, x1, y1) = (r.tl.x * doc.width, r.tl.y * doc.height, r.br.x * doc.width, r.br.y * doc.height);
            let b = BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0).abs(), (y1 - y0).abs());
            let sk = skeleton_from(f.joints.as_ref(), &b, file)?;
            clip.set_subject(frame_index[&f.frame_id], slot, b, sk)?;
        }
    }
    if let Some(groups) = &doc.groups {
        let mut per_frame: Vec<Vec<Vec<usize>>> = vec![Vec::new(); clip.frames];
        for g in groups {
            let slots: Vec<usize> = g
                .members
                .iter()
                .map(|m| {
                    slot_of
                        .get(m)
                        .copied()
                        .ok_or_else(|| parse_err(file, 0, format!("group member {m} is not a track")))
                })
                .collect::<Result<_>>()?;
            let frames: Vec<usize> = match (&g.frames, opts.group_mode) {
                (Some(fs), GroupMode::PerFrame) => fs.iter().filter_map(|f| frame_index.get(f).copied()).collect(),
                _ => (0..clip.frames).collect(),
            };
            for t in frames {
                let present: Vec<usize> = slots.iter().copied().filter(|&s| clip.is_present(t, s)).collect();
                if present.len() >= 2 {
                    per_frame[t].push(present);
                }
            }
        }
        clip.gt = Some(
            per_frame
                .into_iter()
                .enumerate()
                .map(|(t, g)| GroupPartition::new(t, g))
                .collect(),
        );
    }
    clip.validate()?;
    Ok(clip)
}

// jrdb-like: one JSON document per clip.
//
// labels keys              -> frames, sorted by key
// label_id                 -> subject slot (in order of first appearance)
// box [x, y, w, h]         -> top-left corner and size in pixels
// social_group.cluster_ID  -> per-frame group; Broadcast mode reuses the first frame's grouping

#[derive(Deserialize)]
struct JrdbGroup {
    #[serde(rename = "cluster_ID")]
    cluster_id: i64,
}

#[derive(Deserialize)]
struct JrdbLabel {
    label_id: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    social_group: Option<JrdbGroup>,
    #[serde(default)]
    joints: Option<Vec<[f64; 2]>>,
}

#[derive(Deserialize)]
struct JrdbDoc {
    #[serde(default)]
    sequence: Option<String>,
    width: f64,
    height: f64,
    labels: BTreeMap<String, Vec<JrdbLabel>>,
}

fn read_jrdb_like<R: Read>(reader: R, file: &Path, opts: &LoadOptions) -> Result<SceneClip> {
    let doc: JrdbDoc = serde_json::from_reader(reader).map_err(|e| parse_err(file, e.line(), e.to_string()))?;
    let mut slot_of: BTreeMap<&str, usize> = BTreeMap::new();
    for labels in doc.labels.values() {
        for l in labels {
            let next = slot_of.len();
            slot_of.entry(l.label_id.as_str()).or_insert(next);
        }
    }
    if let Some(cap) = opts.max_subjects {
        if slot_of.len() > cap {
            return Err(Error::Capacity {
                index: slot_of.len() - 1,
                capacity: cap,
            });
        }
    }
    let id = doc.sequence.clone().unwrap_or_else(|| clip_stem(file));
    let mut clip = SceneClip::new(id, doc.labels.len().max(1), slot_of.len().max(1), (doc.width, doc.height))
        .map_err(|e| parse_err(file, 0, e.to_string()))?;
    let mut per_frame: Vec<Vec<Vec<usize>>> = vec![Vec::new(); clip.frames];
    let mut any_groups = false;
    for (t, labels) in doc.labels.values().enumerate() {
        let mut clusters: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for l in labels {
            let [x, y, w, h] = l.bbox;
            if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
                return Err(parse_err(file, 0, format!("non-finite box for {}", l.label_id)));
            }
            let b = BBox::new(x + w / 2.0, y + h / 2.0, w, h);
            let slot = slot_of[l.label_id.as_str()];
            let sk = skeleton_from(l.joints.as_ref(), &b, file)?;
            clip.set_subject(t, slot, b, sk)?;
            if let Some(g) = &l.social_group {
                any_groups = true;
                clusters.entry(g.cluster_id).or_default().push(slot);
            }
        }
        per_frame[t] = clusters.into_values().filter(|g| g.len() >= 2).collect();
    }
    if any_groups {
        if opts.group_mode == GroupMode::Broadcast {
            let first = per_frame[0].clone();
            for (t, groups) in per_frame.iter_mut().enumerate() {
                *groups = first
                    .iter()
                    .map(|g| g.iter().copied().filter(|&s| clip.is_present(t, s)).collect::<Vec<_>>())
                    .filter(|g| g.len() >= 2)
                    .collect();
            }
        }
        clip.gt = Some(
            per_frame
                .into_iter()
                .enumerate()
                .map(|(t, g)| GroupPartition::new(t, g))
                .collect(),
        );
    }
    clip.validate()?;
    Ok(clip)
}
