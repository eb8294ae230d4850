//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Not part of the default test run. `cargo test --release --test acceptance` runs everything
//! (roughly 20 minutes on one core).
//! Set `ACCEPTANCE_FAST=1` to run only the checks that finish in seconds.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use common::gradcheck::{embed_checks, readout_checks, recovery_checks, relation_checks};
use common::symmetry::{clip_with, embed_equivariance, relation_symmetry, small_model};
use common::{oracle, GroupCheck};
use crowdgroup::model::{Model, ModelConfig};
use crowdgroup::pipeline::{self, evaluate_baseline, pretext_samples, run_cell, run_stage1, RunConfig, Variant};
use crowdgroup::prediction::pair_concat_features;
use crowdgroup::simulator::evaluate_recovery;
use ndarray::Array2;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak bytes allocated above the starting level while `f` runs, including what it returns.
fn peak_bytes<T>(f: impl FnOnce() -> T) -> (usize, T) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (PEAK.load(Ordering::SeqCst) - base, out)
}

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    let o = Outcome {
        id,
        name,
        pass,
        detail,
        secs: start.elapsed().as_secs_f64(),
    };
    println!(
        "{} {} {} ({:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.secs,
        o.detail
    );
    o
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn metric_oracles() -> (bool, String) {
    let start = Instant::now();
    let rep = oracle::metric_suite(200, 1);
    let secs = start.elapsed().as_secs_f64();
    for m in rep.mismatches.iter().take(5) {
        println!("  mismatch: {m}");
    }
    let detail = format!(
        "{} instances, {} mismatches; greedy below optimal on {}/{} curve checks and {}/{} at IoU > 0.2",
        rep.instances,
        rep.mismatches.len(),
        rep.curve_discrepancies,
        rep.curve_checks,
        rep.low_discrepancies,
        rep.low_checks
    );
    (rep.mismatches.is_empty() && secs < 10.0, detail)
}

fn partition_oracle() -> (bool, String) {
    let start = Instant::now();
    let rep = oracle::partition_suite(200, 2);
    let secs = start.elapsed().as_secs_f64();
    for m in rep.mismatches.iter().take(5) {
        println!("  mismatch: {m}");
    }
    (
        rep.mismatches.is_empty() && secs < 10.0,
        format!("{} instances, {} mismatches", rep.instances, rep.mismatches.len()),
    )
}

fn gradient_checks() -> (bool, String) {
    let start = Instant::now();
    let suites: Vec<(&str, Vec<GroupCheck>)> = vec![
        ("embed", embed_checks()),
        ("recover", recovery_checks()),
        ("predict", relation_checks(true)),
        ("predict-qk", relation_checks(false)),
        ("readout", readout_checks()),
    ];
    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < 60.0;
    let mut parts = Vec::new();
    for (name, checks) in &suites {
        let worst = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
        pass &= !checks.is_empty() && worst < 1e-4 && checks.iter().any(|c| c.norm > 0.0);
        parts.push(format!("{name} {} groups max {worst:.1e}", checks.len()));
    }
    (pass, parts.join(", "))
}

fn symmetry_suite() -> (bool, String) {
    let model = small_model(4, 11);
    let mut worst = 0.0f64;
    let mut perms = 0;
    for n in 2..=6 {
        let (k, dev) = embed_equivariance(&model, &clip_with(n, 4, 100 + n as u64));
        perms += k;
        worst = worst.max(dev);
    }
    let clips: Vec<_> = (0..4).map(|s| clip_with(6, 4, 200 + s)).collect();
    let sym = relation_symmetry(&model, &clips);
    (
        worst < 1e-5 && sym.holds(),
        format!(
            "{perms} permutations max deviation {worst:.1e}; attention asymmetry {:.1e}, output asymmetry {:.1e}, diagonal {:.1e}, range [{:.3}, {:.3}]",
            sym.attention_asymmetry, sym.output_asymmetry, sym.max_diagonal, sym.min_value, sym.max_value
        ),
    )
}

fn memory_check() -> (bool, String) {
    let (frames, n) = (10, 50);
    let model = Model::new(ModelConfig::default(), 3).unwrap();
    let c = model.cfg.embedding.embed_dim;
    let m = model.cfg.attention.heads;
    let e = Array2::from_shape_fn((frames * n, c), |(i, j)| ((i * 31 + j * 17) % 97) as f64 / 97.0 - 0.5);
    let presence = vec![true; frames * n];
    let (stack, out) = peak_bytes(|| model.head.stack_attention(&model.params, &e, &presence, frames).unwrap());
    drop(out);
    let (concat, out) = peak_bytes(|| pair_concat_features(&e, frames));
    drop(out);
    let ratio = stack as f64 / concat as f64;
    (
        c == 64 && m == 8 && ratio <= 0.25,
        format!("N={n} M={m} C_e={c}: stacked {stack} B, concatenation {concat} B, ratio {ratio:.3}"),
    )
}

fn snapshot_names() -> [&'static str; 6] {
    ["synth", "train1", "train2", "eval", "baseline", "ablate"]
}

fn run_named(cfg: &RunConfig, name: &str) -> crowdgroup::Result<()> {
    match name {
        "synth" => pipeline::cmd_synth(cfg).map(drop),
        "train1" => pipeline::cmd_train(cfg, 1).map(drop),
        "train2" => pipeline::cmd_train(cfg, 2).map(drop),
        "eval" => pipeline::cmd_eval(cfg).map(drop),
        "baseline" => pipeline::cmd_baseline(cfg).map(drop),
        "ablate" => pipeline::cmd_ablate(cfg, |_| {}).map(drop),
        _ => unreachable!(),
    }
}

fn artifacts(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        // losses are reproducible but the log's wall-clock column is not
        .filter(|p| p.extension().is_some_and(|x| x != "log"))
        .collect();
    out.sort();
    out
}

fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut cfg = serde_json::from_str::<RunConfig>(
        r#"{"dataset": {"kind": "synthetic", "train_clips": 4, "test_clips": 2},
            "stage1": {"epochs": 3}, "stage2": {"epochs": 3},
            "ablation": {"fractions": [0.5, 1.0], "seeds": [0]}}"#,
    )
    .unwrap()
    .seeded(7);
    cfg.out_dir = out.clone();
    for name in snapshot_names() {
        run_named(&cfg, name).unwrap();
    }
    let first = tmp.path().join("first");
    fs::rename(&out, &first).unwrap();
    for name in snapshot_names() {
        let snap = RunConfig::from_file(&first.join(format!("{name}.config.json"))).unwrap();
        run_named(&snap, name).unwrap();
    }
    let (a, b) = (artifacts(&first), artifacts(&out));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    let mut differing = Vec::new();
    if names(&a) != names(&b) {
        differing.push("file set".to_string());
    }
    for (x, y) in a.iter().zip(&b) {
        if fs::read(x).unwrap() != fs::read(y).unwrap() {
            differing.push(x.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    (
        differing.is_empty(),
        format!("{} artifacts from {} commands compared, differing: {:?}", a.len(), snapshot_names().len(), differing),
    )
}

struct SeedRun {
    full: [f64; 2],
    no_pretrain: [f64; 2],
}

fn benchmark_criteria() -> Vec<Outcome> {
    let cfg = RunConfig::default();
    let data = cfg.dataset.load().unwrap();
    let fractions = [0.1, 1.0];
    let mut runs = Vec::new();
    let mut out = Vec::new();
    let mut full_secs = 0.0;
    for seed in [0u64, 1, 2] {
        let c = cfg.seeded(seed);
        let start = Instant::now();
        let (pre, _) = run_stage1(&c, &data.train).unwrap();
        let s1 = start.elapsed().as_secs_f64();
        if seed == 0 {
            out.push(timed(5, "pretext recovery", || {
                let held_out = pretext_samples(&data.test, &c.model).unwrap();
                let r = evaluate_recovery(&pre, &held_out, c.stage1.swap_ratio, c.stage1.noise_eps, 99).unwrap();
                (
                    r.ratio() < 0.5 && r.swapped_ratio() < 0.5 && s1 < 900.0,
                    format!(
                        "{} epochs in {s1:.0}s; MSE ratio to leave-unchanged {:.3} over all subjects, {:.3} over swapped subjects",
                        c.stage1.epochs,
                        r.ratio(),
                        r.swapped_ratio()
                    ),
                )
            }));
        }
        let mut run = SeedRun {
            full: [0.0; 2],
            no_pretrain: [0.0; 2],
        };
        for (k, &f) in fractions.iter().enumerate() {
            let start = Instant::now();
            run.full[k] = run_cell(&c, &pre, &data, Variant::Full, f).unwrap().summary.f1;
            if seed == 0 && f == 1.0 {
                full_secs = s1 + start.elapsed().as_secs_f64();
            }
            run.no_pretrain[k] = run_cell(&c, &pre, &data, Variant::NoPretrain, f).unwrap().summary.f1;
        }
        println!(
            "  seed {seed}: full {:.4}/{:.4} no-pretrain {:.4}/{:.4} (10%/100% labels)",
            run.full[0], run.full[1], run.no_pretrain[0], run.no_pretrain[1]
        );
        runs.push(run);
    }
    out.push(timed(6, "end-to-end benchmark", || {
        let ours = runs[0].full[1];
        let base = evaluate_baseline(&data.test, &cfg.propagation).unwrap().summary().f1;
        (
            ours >= 0.8 && ours > base && full_secs < 1800.0,
            format!("Half-F1 {ours:.4} vs distance baseline {base:.4}; two-stage training {full_secs:.0}s"),
        )
    }));
    out.push(timed(7, "ablation orderings", || {
        let med = |f: &dyn Fn(&SeedRun) -> f64| median(runs.iter().map(f).collect());
        let full10 = med(&|r| r.full[0]);
        let full100 = med(&|r| r.full[1]);
        let nop10 = med(&|r| r.no_pretrain[0]);
        let nop100 = med(&|r| r.no_pretrain[1]);
        let drop_full = full100 - full10;
        let drop_nop = nop100 - nop10;
        let a = full10 > nop10;
        let b = drop_full <= 0.15;
        let c = drop_nop > drop_full;
        (
            a && b && c,
            format!(
                "seed medians: full {full10:.4}/{full100:.4}, no-pretrain {nop10:.4}/{nop100:.4}; \
                 full > no-pretrain at 10%: {a}; full drop {drop_full:.4} within 0.15: {b}; \
                 no-pretrain drop {drop_nop:.4} > full drop: {c}"
            ),
        )
    }));
    out
}

fn main() -> ExitCode {
    let fast = std::env::var_os("ACCEPTANCE_FAST").is_some();
    let mut results = vec![
        timed(1, "metric oracles", metric_oracles),
        timed(2, "partition oracle", partition_oracle),
        timed(3, "gradient checks", gradient_checks),
        timed(4, "equivariance and symmetry", symmetry_suite),
    ];
    if fast {
        println!("SKIP 5 6 7: ACCEPTANCE_FAST is set");
    } else {
        results.extend(benchmark_criteria());
    }
    results.push(timed(8, "stacked attention memory", memory_check));
    results.push(timed(9, "determinism", determinism));
    results.sort_by_key(|o| o.id);
    let failed: Vec<u8> = results.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
