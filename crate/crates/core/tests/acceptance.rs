//! Acceptance run: the full pipeline at default scale through the CLI, then
//! one line per criterion.
//!
//! Environment:
//! - `EVPLUG_ACCEPTANCE_REUSE=1` reuses a finished run directory (and its
//!   recorded stage timings) instead of running the pipeline again.
//! - `EVPLUG_ACCEPTANCE_STRICT=1` exits nonzero when any criterion fails;
//!   by default failures are reported but only pipeline errors abort.
//! - `EVPLUG_ACCEPTANCE_CONFIG=<toml>` runs the pipeline on another config
//!   (smoke runs; the budget criterion only means something at defaults).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use evplug::checkpoint::{load_base, load_plug};
use evplug::config::RunConfig;
use evplug::dataset::{generate_scene, Dataset, EventConfig};
use evplug::encoders::FeatureMap;
use evplug::evalharness::{evaluate, read_json, Condition, EvalMode, MetricsReport};
use evplug::event_model::{integrate_events, voxelize, Event, EventStream};
use evplug::gradcheck;
use evplug::losses::gram;
use evplug::pipeline::{self, RunLayout};
use evplug::scenegen::SceneSampler;
use evplug::trainer::plug_digest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const THRESHOLD: f64 = 0.2;
const EPS: f64 = 1e-3;
const BUDGET_S: f64 = 7200.0;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    DegradedPass,
    Fail,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::DegradedPass => "DEGRADED-PASS",
            Status::Fail => "FAIL",
        })
    }
}

struct Outcome {
    id: usize,
    name: &'static str,
    status: Status,
    detail: String,
}

fn pass_if(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn report(o: &Outcome) {
    println!("criterion {:>2} [{}] {}: {}", o.id, o.status, o.name, o.detail);
}

fn main() {
    let run_root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run");
    let reuse = std::env::var_os("EVPLUG_ACCEPTANCE_REUSE").is_some();
    let strict = std::env::var_os("EVPLUG_ACCEPTANCE_STRICT").is_some();

    let mut outcomes = Vec::new();
    let mut emit = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };

    emit(round_trip());
    emit(voxel_mass());
    emit(gram_properties());
    emit(gradient_fidelity());

    let run = pipeline_run(&run_root, reuse);
    let report = read_json(&RunLayout::new(&run_root).ablation().join("metrics.json")).expect("ablation report");
    emit(frozenness(&run));
    emit(robustness(&report));
    emit(wo_delta(&report));
    emit(iteration(&report));
    emit(temporal_resolution(&run_root));
    emit(budget(&run, &run_root));

    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    let degraded = outcomes.iter().filter(|o| o.status == Status::DegradedPass).count();
    println!(
        "acceptance: {} passed, {} degraded, {} failed of {}",
        outcomes.len() - failed - degraded,
        degraded,
        failed,
        outcomes.len()
    );
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

fn round_trip() -> Outcome {
    let started = Instant::now();
    let sampler = SceneSampler::default();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let spec = sampler.sample(10_000 + seed).expect("valid scene");
        let (_, hi, _) = generate_scene(&spec, &EventConfig::default()).expect("scene");
        let stream = evplug::event_model::generate_events(&hi, THRESHOLD, EPS).expect("events");
        let rec = integrate_events(&hi[0], &stream, THRESHOLD, EPS).expect("integrate");
        let last = hi.last().expect("frames");
        for (a, b) in rec.pixels.iter().zip(&last.pixels) {
            worst = worst.max(((*a as f64 + EPS).ln() - (*b as f64 + EPS).ln()).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "event-model round-trip",
        status: pass_if(worst <= 1.25 * THRESHOLD && secs < 60.0),
        detail: format!("max log error {worst:.4} (bound {:.3}) over 20 scenes in {secs:.1}s (limit 60s)", 1.25 * THRESHOLD),
    }
}

fn voxel_mass() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ratio: f64 = 0.0;
    let mut ok = true;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..65), rng.gen_range(1..65));
        let n = rng.gen_range(0..3000);
        let t0: i64 = rng.gen_range(-1_000_000..1_000_000);
        let t1 = t0 + rng.gen_range(1..100_000);
        let events = (0..n)
            .map(|_| Event {
                x: rng.gen_range(0..w) as u16,
                y: rng.gen_range(0..h) as u16,
                t: rng.gen_range(t0..t1),
                p: if rng.gen_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        let s = EventStream::new(h, w, t0, t1, THRESHOLD, events).expect("stream");
        let v = voxelize(&s, t0, t1, rng.gen_range(1..11)).expect("voxelize");
        let err = (v.total() - s.polarity_sum() as f64).abs();
        let bound = 1e-5 * n as f64;
        ok &= err <= bound;
        if n > 0 {
            worst_ratio = worst_ratio.max(err / n as f64);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        name: "voxel mass conservation",
        status: pass_if(ok && secs < 10.0),
        detail: format!("worst |Σvoxel − Σp| / count = {worst_ratio:.2e} (bound 1e-5) over 1000 streams in {secs:.2}s (limit 10s)"),
    }
}

fn gram_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..65), rng.gen_range(1..9), rng.gen_range(1..9));
        let f = FeatureMap {
            channels: c,
            height: h,
            width: w,
            stride: 8,
            data: (0..c * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>(),
        };
        let m = nalgebra::DMatrix::from_row_slice(c, c, &gram(&f));
        asym = asym.max((&m - m.transpose()).abs().max());
        min_eig = min_eig.min(m.symmetric_eigenvalues().min());
    }
    Outcome {
        id: 3,
        name: "Gram properties",
        status: pass_if(asym <= 1e-6 && min_eig >= -1e-6),
        detail: format!("max asymmetry {asym:.2e} (≤1e-6), min eigenvalue {min_eig:.2e} (≥−1e-6) over 100 maps"),
    }
}

fn gradient_fidelity() -> Outcome {
    let checks = gradcheck::check_all(4, 200);
    let worst = checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("checks");
    let parts: Vec<String> = checks.iter().map(|c| format!("{} {:.1e}", c.name, c.max_rel_err)).collect();
    Outcome {
        id: 4,
        name: "gradient fidelity",
        status: pass_if(worst.max_rel_err < 1e-4),
        detail: format!("max relative error {:.2e} (<1e-4) at {}; {}", worst.max_rel_err, worst.worst, parts.join(", ")),
    }
}

struct Run {
    stages: BTreeMap<String, f64>,
    base_before: String,
    base_file_before: String,
}

fn file_sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).expect("readable file")))
}

fn cli(args: &[&str], log: &Path) -> f64 {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_evplug")).args(args).output().expect("spawn evplug");
    let mut text = out.stdout.clone();
    text.extend_from_slice(&out.stderr);
    std::fs::write(log, &text).expect("write log");
    assert!(
        out.status.success(),
        "evplug {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&text)
    );
    started.elapsed().as_secs_f64()
}

fn pipeline_run(root: &Path, reuse: bool) -> Run {
    let layout = RunLayout::new(root);
    let record = root.join("acceptance_run.json");
    if reuse && record.exists() {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&record).unwrap()).unwrap();
        println!("reusing pipeline run in {}", root.display());
        return Run {
            stages: serde_json::from_value(v["stages"].clone()).unwrap(),
            base_before: v["base_before"].as_str().unwrap().to_string(),
            base_file_before: v["base_file_before"].as_str().unwrap().to_string(),
        };
    }
    if root.exists() {
        std::fs::remove_dir_all(root).expect("clear previous run");
    }
    std::fs::create_dir_all(root).unwrap();
    let out = root.to_str().expect("utf-8 path");
    let config = std::env::var("EVPLUG_ACCEPTANCE_CONFIG").ok();
    let stage = |name: &str| {
        let mut args = vec![name, "--out", out];
        if let Some(c) = &config {
            args.extend(["--config", c.as_str()]);
        }
        cli(&args, &root.join(format!("{name}.log")))
    };
    let mut stages = BTreeMap::new();
    stages.insert("gen-data".to_string(), stage("gen-data"));
    stages.insert("pretrain".to_string(), stage("pretrain"));
    let base_before = load_base(layout.base()).expect("base").0.digest().to_string();
    let base_file_before = file_sha(&layout.base());
    stages.insert("train-plug".to_string(), stage("train-plug"));
    stages.insert("ablate".to_string(), stage("ablate"));
    for (k, v) in &stages {
        println!("stage {k}: {v:.1}s");
    }
    let v = serde_json::json!({ "stages": stages, "base_before": base_before, "base_file_before": base_file_before });
    std::fs::write(record, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    Run {
        stages,
        base_before,
        base_file_before,
    }
}

fn frozenness(run: &Run) -> Outcome {
    let layout = RunLayout::new(PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run"));
    let after = load_base(layout.base()).expect("base after training").0;
    let file_after = file_sha(&layout.base());
    let same = after.digest() == run.base_before && file_after == run.base_file_before;
    // the plug was recorded against this exact base
    let bound = load_plug(layout.plug(), Some(&after)).is_ok();
    Outcome {
        id: 5,
        name: "plug-and-play frozenness",
        status: pass_if(same && bound),
        detail: format!(
            "base digest {}… before and {}… after train-plug + ablate; checkpoint bytes {}; plug bound to base: {bound}",
            &run.base_before[..12],
            &after.digest()[..12],
            if file_after == run.base_file_before { "unchanged" } else { "CHANGED" }
        ),
    }
}

fn err(report: &MetricsReport, variant: &str, mode: EvalMode, condition: Condition, step: usize) -> f64 {
    report
        .find(variant, mode, condition, step)
        .and_then(|r| r.centroid_error_px)
        .unwrap_or(f64::NAN)
}

fn robustness(r: &MetricsReport) -> Outcome {
    let rgb_x = err(r, "rgb_only", EvalMode::RgbOnly, Condition::Exposure, 0);
    let fus_x = err(r, "full", EvalMode::FusedAnchor, Condition::Exposure, 0);
    let rgb_c = err(r, "rgb_only", EvalMode::RgbOnly, Condition::Clean, 0);
    let fus_c = err(r, "full", EvalMode::FusedAnchor, Condition::Clean, 0);
    let (rx, rc) = (fus_x / rgb_x, fus_c / rgb_c);
    let clean_ok = rc <= 1.15;
    let status = match (rx <= 0.7, rx < 1.0, clean_ok) {
        (true, _, true) => Status::Pass,
        (false, true, true) => Status::DegradedPass,
        _ => Status::Fail,
    };
    Outcome {
        id: 6,
        name: "degradation robustness",
        status,
        detail: format!(
            "exposure fused {fus_x:.3} px vs rgb {rgb_x:.3} px, ratio {rx:.3} (≤0.7; <1.0 degraded); clean fused {fus_c:.3} px vs rgb {rgb_c:.3} px, ratio {rc:.3} (≤1.15)"
        ),
    }
}

fn wo_delta(r: &MetricsReport) -> Outcome {
    let full = err(r, "full", EvalMode::FusedAnchor, Condition::Exposure, 0);
    let wo = err(r, "wo_delta", EvalMode::FusedAnchor, Condition::Exposure, 0);
    let margin = 1.0 - full / wo;
    let clean_full = err(r, "full", EvalMode::FusedAnchor, Condition::Clean, 0);
    let clean_wo = err(r, "wo_delta", EvalMode::FusedAnchor, Condition::Clean, 0);
    Outcome {
        id: 7,
        name: "ablation w/o δ",
        status: pass_if(margin >= 0.10),
        detail: format!(
            "exposure: full {full:.3} px vs w/o δ {wo:.3} px, relative margin {:.1}% (≥10%); clean: {clean_full:.3} vs {clean_wo:.3} px",
            100.0 * margin
        ),
    }
}

fn iteration(r: &MetricsReport) -> Outcome {
    let it = err(r, "iter", EvalMode::HighRateIter, Condition::Clean, 2);
    let no = err(r, "no_iter", EvalMode::HighRateNoIter, Condition::Clean, 2);
    let others: Vec<String> = [Condition::Exposure, Condition::Blur]
        .iter()
        .map(|c| {
            format!(
                "{c} {:.3} vs {:.3}",
                err(r, "iter", EvalMode::HighRateIter, *c, 2),
                err(r, "no_iter", EvalMode::HighRateNoIter, *c, 2)
            )
        })
        .collect();
    Outcome {
        id: 8,
        name: "temporal-consistency ablation",
        status: pass_if(it <= no),
        detail: format!("clean error at t_(i+2), K=2: iter {it:.3} px vs no-iter {no:.3} px; also {}", others.join(", ")),
    }
}

fn temporal_resolution(root: &Path) -> Outcome {
    let layout = RunLayout::new(root);
    let cfg = RunConfig::load(layout.config()).expect("run config");
    let (base, _) = load_base(layout.base()).expect("base");
    let (plug, _) = load_plug(layout.plug(), Some(&base)).expect("plug");
    let dataset = Dataset::load(&layout.data()).expect("dataset");
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [1usize, 2, 4] {
        let eval = evplug::evalharness::EvalConfig { k, intervals: 1, ..cfg.eval.clone() };
        let rep = evaluate(&base, Some(&plug), &dataset, EvalMode::HighRateIter, Condition::Clean, &eval, "full").expect("evaluate");
        let predictions = rep.rows.iter().filter(|r| r.step >= 1).count();
        let anchor = err(&rep, "full", EvalMode::HighRateIter, Condition::Clean, 0);
        let next = err(&rep, "full", EvalMode::HighRateIter, Condition::Clean, k);
        let good = predictions == k && next.is_finite() && next <= 2.0 * anchor;
        ok &= good;
        parts.push(format!("K={k}: {predictions} predictions/interval, t_(i+1) {next:.3} px vs anchor {anchor:.3} px"));
    }
    Outcome {
        id: 9,
        name: "temporal-resolution contract",
        status: pass_if(ok),
        detail: format!("{} (t_(i+1) ≤ 2× anchor)", parts.join("; ")),
    }
}

fn budget(run: &Run, root: &Path) -> Outcome {
    let total: f64 = run.stages.values().sum();
    let stages: Vec<String> = run.stages.iter().map(|(k, v)| format!("{k} {v:.0}s")).collect();
    let (det_ok, det) = determinism(root);
    Outcome {
        id: 10,
        name: "end-to-end budget and determinism",
        status: pass_if(total < BUDGET_S && det_ok),
        detail: format!("{total:.0}s total (<{BUDGET_S:.0}s): {}; {det}", stages.join(", ")),
    }
}

/// Same seeds, same bytes: the full dataset is regenerated and compared file
/// by file; base pretraining and plug training are repeated at reduced scale.
fn determinism(root: &Path) -> (bool, String) {
    let layout = RunLayout::new(root);
    let cfg = RunConfig::load(layout.config()).expect("run config");
    let again = RunLayout::new(root.join("rerun"));
    if again.root.exists() {
        std::fs::remove_dir_all(&again.root).unwrap();
    }
    pipeline::gen_data(&again, &cfg).expect("regenerate data");
    let mut names: Vec<PathBuf> = walk(&layout.data());
    names.sort();
    let data_same = names.iter().all(|p| {
        let rel = p.strip_prefix(layout.data()).unwrap();
        file_sha(p) == file_sha(&again.data().join(rel))
    }) && walk(&again.data()).len() == names.len();

    let full = Dataset::load(&layout.data()).expect("dataset");
    let subset = Dataset {
        scenes: full.scenes.into_iter().take(20).collect(),
    };
    let mut small = cfg.clone();
    small.pretrain.optim.epochs = 1;
    small.pretrain.frame_stride = 8;
    small.train.epochs = 1;
    small.train.anchors_per_scene = 2;
    let digests: Vec<(String, String)> = (0..2)
        .map(|n| {
            let l = RunLayout::new(root.join(format!("rerun_small_{n}")));
            std::fs::create_dir_all(&l.root).unwrap();
            let (base, _, _) = pipeline::pretrain(&l, &subset, &small).expect("pretrain");
            let out = pipeline::train_plug(&l, &base, &subset, &small, false).expect("train");
            (base.digest().to_string(), plug_digest(&out.plug))
        })
        .collect();
    let models_same = digests[0] == digests[1];
    std::fs::remove_dir_all(&again.root).ok();
    (
        data_same && models_same,
        format!(
            "regenerated dataset byte-identical: {data_same} ({} files); repeated pretrain + train-plug digests identical: {models_same}",
            names.len()
        ),
    )
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).expect("readable dir").flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
