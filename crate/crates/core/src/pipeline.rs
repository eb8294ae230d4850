//! Run configuration, the synthetic benchmark, training/evaluation drivers, reports and
//! the label-fraction ablation grid. Every command writes a config snapshot next to its
//! outputs; rerunning from that snapshot reproduces checkpoints and reports exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grouping::{self, PropagationConfig};
use crate::metrics::{self, Summary, Tally};
use crate::model::{mix_seed, Model, ModelConfig, TrainReport, PHI_PREFIX};
use crate::prediction::{self, labeled_subset, RelationSample, Stage2Config};
use crate::scene::{self, relation_matrix_from_partition, GroupMode, LoadOptions, MotionModel, SceneClip, Schema, SynthParams};
use crate::simulator::{self, PretextSample, Stage1Config};

/// Synthetic train/test split with planted groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub train_clips: usize,
    pub test_clips: usize,
    /// Inclusive range for the number of planted groups per clip.
    pub groups: (usize, usize),
    pub group_size: (usize, usize),
    pub loners: (usize, usize),
    pub frames: usize,
    pub extent: (f64, f64),
    pub noise_scale: f64,
    pub motion: MotionModel,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            train_clips: 40,
            test_clips: 20,
            groups: (3, 6),
            group_size: (2, 4),
            loners: (4, 10),
            frames: 10,
            extent: (1000.0, 1000.0),
            noise_scale: 1.5,
            motion: MotionModel::Mixed,
            seed: 2024,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups.0 > self.groups.1 || self.loners.0 > self.loners.1 || self.group_size.0 > self.group_size.1 {
            return Err(Error::Config("benchmark ranges must be (min, max) with min <= max".into()));
        }
        if self.groups.1 * self.group_size.1 + self.loners.1 > 50 {
            return Err(Error::Config("benchmark clips may exceed 50 subjects".into()));
        }
        Ok(())
    }

    fn clip_params(&self, split: u64, index: usize) -> SynthParams {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[split, index as u64]));
        SynthParams {
            n_groups: rng.gen_range(self.groups.0..=self.groups.1),
            group_size_range: self.group_size,
            n_loners: rng.gen_range(self.loners.0..=self.loners.1),
            motion_model: self.motion,
            frame_count: self.frames,
            scene_extent: self.extent,
            noise_scale: self.noise_scale,
            seed: mix_seed(self.seed, &[split, index as u64, 7]),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<SceneClip>,
    pub test: Vec<SceneClip>,
}

pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |split: u64, count: usize, name: &str| -> Result<Vec<SceneClip>> {
        (0..count)
            .map(|k| {
                let mut clip = scene::generate_synthetic_scene(&spec.clip_params(split, k))?;
                clip.clip_id = format!("{name}-{k:03}");
                Ok(clip)
            })
            .collect()
    };
    Ok(Dataset {
        train: make(0, spec.train_clips, "train")?,
        test: make(1, spec.test_clips, "test")?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic(BenchmarkSpec),
    Files {
        train: PathBuf,
        test: PathBuf,
        schema: Schema,
        #[serde(default)]
        group_mode: GroupMode,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Synthetic(BenchmarkSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            Self::Synthetic(spec) => build_benchmark(spec),
            Self::Files {
                train,
                test,
                schema,
                group_mode,
            } => {
                let opts = LoadOptions {
                    group_mode: *group_mode,
                    max_subjects: None,
                };
                Ok(Dataset {
                    train: scene::load_clip_dataset_with(train, *schema, &opts)?,
                    test: scene::load_clip_dataset_with(test, *schema, &opts)?,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub fractions: Vec<f64>,
    /// Training seeds; cells report the median over them.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.3, 0.5, 1.0],
            seeds: vec![0],
        }
    }
}

/// Everything a command needs; written verbatim as the snapshot beside its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub propagation: PropagationConfig,
    pub ablation: AblationConfig,
    /// Stage-2 starts from random φ instead of a stage-1 checkpoint.
    pub no_pretrain: bool,
    /// Stage-1 checkpoint used by `train 2`; defaults to `<out_dir>/stage1.ckpt`.
    pub init_checkpoint: Option<PathBuf>,
    /// Checkpoint evaluated by `eval`; defaults to `<out_dir>/stage2.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            propagation: PropagationConfig::default(),
            ablation: AblationConfig::default(),
            no_pretrain: false,
            init_checkpoint: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.propagation.validate()?;
        if let DatasetSpec::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if spec.frames != self.model.frames {
                return Err(Error::Config(format!(
                    "benchmark clips have {} frames but the model is built for {}",
                    spec.frames, self.model.frames
                )));
            }
        }
        if self.ablation.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation needs fractions in (0, 1] and at least one seed".into()));
        }
        Ok(())
    }

    /// Seeds used by model init, stage 1 and stage 2 for training seed `seed`.
    pub fn seeded(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seed = seed;
        c.stage1.seed = mix_seed(seed, &[1]);
        c.stage2.seed = mix_seed(seed, &[2]);
        c
    }

    pub fn init_seed(&self) -> u64 {
        mix_seed(self.seed, &[0])
    }

    pub fn write_snapshot(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(format!("{name}.config.json"));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    fn stage1_path(&self) -> PathBuf {
        self.init_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("stage1.ckpt"))
    }

    fn stage2_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("stage2.ckpt"))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn pretext_samples(clips: &[SceneClip], cfg: &ModelConfig) -> Result<Vec<PretextSample>> {
    clips
        .iter()
        .map(|c| {
            if c.frames != cfg.frames {
                return Err(Error::Validation(format!(
                    "clip {} has {} frames; the recovery decoder is built for {}",
                    c.clip_id, c.frames, cfg.frames
                )));
            }
            PretextSample::from_clip(c, cfg.coord_mode)
        })
        .collect()
}

pub fn relation_samples(clips: &[SceneClip], cfg: &ModelConfig) -> Result<Vec<RelationSample>> {
    clips
        .iter()
        .map(|c| RelationSample::from_clip(c, cfg.coord_mode, cfg.embedding.neighbor_radius))
        .collect()
}

/// Fresh model trained on the pretext task.
pub fn run_stage1(cfg: &RunConfig, train: &[SceneClip]) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(cfg.model.clone(), cfg.init_seed())?;
    let samples = pretext_samples(train, &cfg.model)?;
    let report = simulator::train_stage1(&mut model, &samples, &cfg.stage1)?;
    model.provenance.pretrained = true;
    model.provenance.stage1 = Some(serde_json::to_value(&cfg.stage1)?);
    Ok((model, report))
}

/// Stage-2 training from `init` (pretrained) or from a fresh random model.
pub fn run_stage2(cfg: &RunConfig, init: Option<&Model>, train: &[SceneClip]) -> Result<(Model, TrainReport)> {
    let mut model = match init {
        Some(m) => {
            if m.cfg != cfg.model {
                return Err(Error::Config("stage-1 checkpoint was built with a different model config".into()));
            }
            let mut m = m.clone();
            m.provenance.stage1_phi_hash = Some(m.weights_hash(PHI_PREFIX));
            m
        }
        None => Model::new(cfg.model.clone(), cfg.init_seed())?,
    };
    let samples = relation_samples(train, &cfg.model)?;
    let report = prediction::train_stage2(&mut model, &samples, &cfg.stage2)?;
    model.provenance.stage2 = Some(serde_json::to_value(&cfg.stage2)?);
    Ok((model, report))
}

/// Scores of one method over a clip set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub per_clip: Vec<(String, Summary)>,
    pub total: Tally,
}

impl MethodScores {
    pub fn summary(&self) -> Summary {
        self.total.summary()
    }
}

fn score_clip(clip: &SceneClip, pred: &[scene::GroupPartition], pred_bin: impl Fn(usize) -> Result<ndarray::Array2<f64>>) -> Result<Tally> {
    let gt = clip
        .gt
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("clip {} has no ground-truth groups", clip.clip_id)))?;
    let n = clip.slots;
    let mut tally = Tally::default();
    for t in 0..clip.frames {
        let presence = &clip.presence()[t * n..(t + 1) * n];
        let gt_bin = relation_matrix_from_partition(&gt[t], n)?;
        tally.add_frame(&pred[t], &gt[t], &pred_bin(t)?, &gt_bin, &metrics::frame_mask(presence))?;
    }
    Ok(tally)
}

fn collect(method: &str, clips: &[SceneClip], mut per: impl FnMut(&SceneClip) -> Result<Tally>) -> Result<MethodScores> {
    let mut total = Tally::default();
    let mut per_clip = Vec::with_capacity(clips.len());
    for clip in clips {
        let t = per(clip)?;
        total.merge(&t);
        per_clip.push((clip.clip_id.clone(), t.summary()));
    }
    Ok(MethodScores {
        method: method.to_string(),
        per_clip,
        total,
    })
}

pub fn evaluate_model(model: &Model, clips: &[SceneClip], prop: &PropagationConfig) -> Result<MethodScores> {
    collect("model", clips, |clip| {
        let sample = RelationSample::from_clip(clip, model.cfg.coord_mode, model.cfg.embedding.neighbor_radius)?;
        let r_hat = prediction::predict(model, &sample)?;
        let parts = grouping::partition_clip(&r_hat, &sample.block.presence, prop)?;
        score_clip(clip, &parts, |t| Ok(metrics::binarize(&r_hat.index_axis(ndarray::Axis(0), t).to_owned(), prop.threshold)))
    })
}

pub fn evaluate_baseline(clips: &[SceneClip], prop: &PropagationConfig) -> Result<MethodScores> {
    collect("baseline", clips, |clip| {
        let parts = grouping::baseline_partition_from_distances(clip, prop)?;
        score_clip(clip, &parts, |t| relation_matrix_from_partition(&parts[t], clip.slots))
    })
}

/// Ground truth scored against itself; a sanity row for the report machinery.
pub fn evaluate_identity(clips: &[SceneClip]) -> Result<MethodScores> {
    collect("ground-truth", clips, |clip| {
        let gt = clip.gt.clone().unwrap_or_default();
        score_clip(clip, &gt, |t| relation_matrix_from_partition(&gt[t], clip.slots))
    })
}

fn summary_cols(s: &Summary) -> String {
    format!(
        "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        s.frames, s.precision, s.recall, s.f1, s.iou_auc, s.iou_gm, s.macro_f1, s.macro_iou_auc, s.macro_iou_gm
    )
}

/// Plain-text report: per-clip and aggregate rows per method, then curve data.
pub fn format_report(methods: &[MethodScores], prop: &PropagationConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# group detection report");
    let _ = writeln!(
        s,
        "# matching=greedy-one-to-one iou=strict-greater (exact match at 1.0) tau={} propagation={:?} aggregate=micro macro=per-frame-mean",
        prop.threshold, prop.rule
    );
    let _ = writeln!(s, "method clip frames precision recall f1 iou_auc iou_gm macro_f1 macro_iou_auc macro_iou_gm");
    for m in methods {
        for (clip, sum) in &m.per_clip {
            let _ = writeln!(s, "{} {} {}", m.method, clip, summary_cols(sum));
        }
        let _ = writeln!(s, "{} all {}", m.method, summary_cols(&m.summary()));
    }
    for m in methods {
        let _ = writeln!(s, "\ncurve {}\nthreshold f1", m.method);
        for (t, f) in m.total.curve() {
            let _ = writeln!(s, "{t:.2} {f:.6}");
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoPretrain,
    FreezePhi,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoPretrain, Variant::FreezePhi];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "no-pretrain",
            Variant::FreezePhi => "freeze-phi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub fraction: f64,
    pub seed: u64,
    pub labeled_clips: Vec<usize>,
    pub summary: Summary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn cells_for(&self, variant: Variant, fraction: f64) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(move |c| c.variant == variant && c.fraction == fraction)
    }

    /// Seed-median of a summary field.
    pub fn median_of(&self, variant: Variant, fraction: f64, field: impl Fn(&Summary) -> f64) -> f64 {
        let mut v: Vec<f64> = self.cells_for(variant, fraction).map(|c| field(&c.summary)).collect();
        median(&mut v)
    }

    pub fn median_f1(&self, variant: Variant, fraction: f64) -> f64 {
        self.median_of(variant, fraction, |s| s.f1)
    }

    /// Variants as rows, label fractions as columns, `P/R/F1` seed medians in percent.
    pub fn format(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# label-fraction ablation; cells are seed-median precision/recall/F1 (%) over seeds {:?}", self.seeds);
        let _ = write!(s, "variant");
        for f in &self.fractions {
            let _ = write!(s, " {:.0}%", f * 100.0);
        }
        let _ = writeln!(s);
        for v in Variant::ALL {
            let _ = write!(s, "{}", v.name());
            for &f in &self.fractions {
                let p = self.median_of(v, f, |s| s.precision) * 100.0;
                let r = self.median_of(v, f, |s| s.recall) * 100.0;
                let f1 = self.median_f1(v, f) * 100.0;
                let _ = write!(s, " {p:.1}/{r:.1}/{f1:.1}");
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "\nvariant fraction seed precision recall f1");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{} {} {} {:.6} {:.6} {:.6}",
                c.variant.name(),
                c.fraction,
                c.seed,
                c.summary.precision,
                c.summary.recall,
                c.summary.f1
            );
        }
        s
    }
}

/// Trains and evaluates one grid cell given the stage-1 model for its seed.
pub fn run_cell(cfg: &RunConfig, pretrained: &Model, data: &Dataset, variant: Variant, fraction: f64) -> Result<AblationCell> {
    let mut c = cfg.clone();
    c.stage2.label_fraction = fraction;
    c.stage2.fine_tune_phi = variant != Variant::FreezePhi;
    let init = (variant != Variant::NoPretrain).then_some(pretrained);
    let (model, _) = run_stage2(&c, init, &data.train)?;
    let scores = evaluate_model(&model, &data.test, &c.propagation)?;
    Ok(AblationCell {
        variant,
        fraction,
        seed: cfg.seed,
        labeled_clips: labeled_subset(data.train.len(), fraction, c.stage2.seed),
        summary: scores.summary(),
    })
}

/// The {full, no-pretrain, freeze-phi} × fractions grid over every configured seed.
/// `progress` receives each finished cell.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, mut progress: impl FnMut(&AblationCell)) -> Result<AblationTable> {
    let mut table = AblationTable {
        fractions: cfg.ablation.fractions.clone(),
        seeds: cfg.ablation.seeds.clone(),
        cells: Vec::new(),
    };
    for &seed in &cfg.ablation.seeds {
        let c = cfg.seeded(seed);
        let (pretrained, _) = run_stage1(&c, &data.train)?;
        for variant in Variant::ALL {
            for &f in &cfg.ablation.fractions {
                let cell = run_cell(&c, &pretrained, data, variant, f)?;
                progress(&cell);
                table.cells.push(cell);
            }
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Commands

/// Writes `train.clips` and `test.clips` in the native format.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let spec = match &cfg.dataset {
        DatasetSpec::Synthetic(s) => s,
        DatasetSpec::Files { .. } => return Err(Error::Config("synth needs a synthetic dataset spec".into())),
    };
    let data = build_benchmark(spec)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let train = cfg.out_dir.join("train.clips");
    let test = cfg.out_dir.join("test.clips");
    fs::write(&train, scene::write_native(&data.train))?;
    fs::write(&test, scene::write_native(&data.test))?;
    cfg.write_snapshot("synth")?;
    Ok(vec![train, test])
}

pub fn cmd_train(cfg: &RunConfig, stage: u8) -> Result<PathBuf> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    fs::create_dir_all(&cfg.out_dir)?;
    match stage {
        1 => {
            let (model, report) = run_stage1(cfg, &data.train)?;
            let ckpt = cfg.out_dir.join("stage1.ckpt");
            model.save(&ckpt)?;
            fs::write(cfg.out_dir.join("stage1.log"), report.to_log())?;
            cfg.write_snapshot("train1")?;
            Ok(ckpt)
        }
        2 => {
            let mut header = String::new();
            let init = if cfg.no_pretrain {
                let _ = writeln!(header, "# init random phi (no pretraining) seed={}", cfg.init_seed());
                None
            } else {
                let path = cfg.stage1_path();
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "stage-1 checkpoint {} not found; run `train 1` first or pass --no-pretrain",
                        path.display()
                    )));
                }
                let _ = writeln!(header, "# init {} sha256={}", path.display(), sha256_file(&path)?);
                Some(Model::load(&path)?)
            };
            let phi_before = init.as_ref().map(|m| m.weights_hash(PHI_PREFIX));
            let (model, report) = run_stage2(cfg, init.as_ref(), &data.train)?;
            let phi_after = model.weights_hash(PHI_PREFIX);
            let _ = writeln!(
                header,
                "# phi_sha256 before={} after={} fine_tune_phi={}",
                phi_before.as_deref().unwrap_or("random"),
                phi_after,
                cfg.stage2.fine_tune_phi
            );
            let ckpt = cfg.out_dir.join("stage2.ckpt");
            model.save(&ckpt)?;
            fs::write(cfg.out_dir.join("stage2.log"), header + &report.to_log())?;
            cfg.write_snapshot("train2")?;
            Ok(ckpt)
        }
        other => Err(Error::Config(format!("unknown training stage {other}; expected 1 or 2"))),
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let path = cfg.stage2_path();
    let model = Model::load(&path)?;
    let model_scores = evaluate_model(&model, &data.test, &cfg.propagation)?;
    let baseline = evaluate_baseline(&data.test, &cfg.propagation)?;
    let mut text = format!("# checkpoint {} sha256={}\n", path.display(), sha256_file(&path)?);
    text += &format_report(&[model_scores.clone(), baseline.clone()], &cfg.propagation);
    fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("eval.txt");
    fs::write(&out, text)?;
    fs::write(cfg.out_dir.join("eval.json"), serde_json::to_string_pretty(&[model_scores, baseline])? + "\n")?;
    cfg.write_snapshot("eval")?;
    Ok(out)
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let baseline = evaluate_baseline(&data.test, &cfg.propagation)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("baseline.txt");
    fs::write(&out, format_report(std::slice::from_ref(&baseline), &cfg.propagation))?;
    let mut parts = String::new();
    for clip in &data.test {
        let _ = writeln!(parts, "clip {}", clip.clip_id);
        parts += &scene::write_partitions(&grouping::baseline_partition_from_distances(clip, &cfg.propagation)?);
    }
    fs::write(cfg.out_dir.join("baseline.groups"), parts)?;
    cfg.write_snapshot("baseline")?;
    Ok(out)
}

pub fn cmd_ablate(cfg: &RunConfig, progress: impl FnMut(&AblationCell)) -> Result<PathBuf> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    if data.train.iter().any(|c| c.gt.is_none()) {
        return Err(Error::Config("ablation needs labeled training clips".into()));
    }
    let table = run_ablation(cfg, &data, progress)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("ablation.txt");
    fs::write(&out, table.format())?;
    fs::write(cfg.out_dir.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    cfg.write_snapshot("ablate")?;
    Ok(out)
}
