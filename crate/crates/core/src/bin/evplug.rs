use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use evplug::checkpoint::{load_base, load_plug};
use evplug::dataset::Dataset;
use evplug::evalharness::{ablate, emit_report, evaluate, read_json, Condition, EvalMode, MetricsReport, JSON_NAME};
use evplug::pipeline::{self, RunLayout};

/// Event-based plug-in for frozen image models on synthetic scenes.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults to <out>/config.toml, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render scenes and simulate their events into <out>/data.
    GenData(Common),
    /// Train and freeze the base image model.
    Pretrain(Common),
    /// Train the plug against the frozen base model.
    TrainPlug {
        #[command(flatten)]
        common: Common,
        /// Train without anchor degradation (ablation variant).
        #[arg(long)]
        no_degrade: bool,
    },
    /// Evaluate one mode under one condition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fused_anchor")]
        mode: EvalMode,
        #[arg(long, default_value = "clean")]
        condition: Condition,
        /// High-rate slices per RGB interval.
        #[arg(long)]
        k: Option<usize>,
        /// Plug checkpoint; defaults to <out>/plug.ckpt.
        #[arg(long)]
        plug: Option<PathBuf>,
    },
    /// Ablation table; trains the no-degradation plug if it is missing.
    Ablate(Common),
    /// Merge every metrics.json of the run into <out>/report.
    Report(Common),
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<evplug::Error>().map_or("error", |e| e.kind());
            let msg = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

fn setup(common: &Common) -> anyhow::Result<(RunLayout, evplug::config::RunConfig)> {
    let layout = RunLayout::new(&common.out);
    let cfg = pipeline::load_config(common.config.as_deref(), &layout)?;
    Ok((layout, cfg))
}

fn load_dataset(layout: &RunLayout) -> anyhow::Result<Dataset> {
    Dataset::load(&layout.data()).with_context(|| format!("loading dataset from {}", layout.data().display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::GenData(common) => {
            let (layout, mut cfg) = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let n = pipeline::gen_data(&layout, &cfg)?;
            println!("wrote {n} scenes to {}", layout.data().display());
        }
        Command::Pretrain(common) => {
            let (layout, mut cfg) = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.pretrain.optim.seed = s;
            }
            let dataset = load_dataset(&layout)?;
            let (base, history, val) = pipeline::pretrain(&layout, &dataset, &cfg)?;
            println!(
                "base {} | final epoch loss {:.5} | validation metric {}",
                base.digest(),
                history.last().copied().unwrap_or(f64::NAN),
                val.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::TrainPlug { common, no_degrade } => {
            let (layout, mut cfg) = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let (base, _) = load_base(layout.base())?;
            let dataset = load_dataset(&layout)?;
            let before = base.digest().to_string();
            let outcome = pipeline::train_plug(&layout, &base, &dataset, &cfg, no_degrade)?;
            base.verify()?;
            if base.digest() != before {
                bail!("base model changed during plug training");
            }
            let best = &outcome.history[outcome.best_epoch - 1];
            println!(
                "plug {} | best epoch {} | validation total {:.5} (untrained {:.5}), recon {:.5} (untrained {:.5})",
                evplug::trainer::plug_digest(&outcome.plug),
                outcome.best_epoch,
                best.validation.total,
                outcome.initial_validation.total,
                best.validation.recon,
                outcome.initial_validation.recon
            );
        }
        Command::Evaluate {
            common,
            mode,
            condition,
            k,
            plug,
        } => {
            let (layout, mut cfg) = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            if let Some(k) = k {
                cfg.eval.k = k;
            }
            let (base, _) = load_base(layout.base())?;
            let plug = if mode.needs_plug() {
                Some(load_plug(plug.unwrap_or_else(|| layout.plug()), Some(&base))?.0)
            } else {
                None
            };
            let dataset = load_dataset(&layout)?;
            let report = evaluate(&base, plug.as_ref(), &dataset, mode, condition, &cfg.eval, "full")?;
            let dir = layout.eval_dir(&format!("{mode}_{condition}_k{}", cfg.eval.k));
            emit_report(&report, &dir)?;
            print_rows(&report);
            println!("wrote {}", dir.display());
        }
        Command::Ablate(common) => {
            let (layout, mut cfg) = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            let (base, _) = load_base(layout.base())?;
            let (full, _) = load_plug(layout.plug(), Some(&base))?;
            let dataset = load_dataset(&layout)?;
            if !layout.plug_wo_delta().exists() {
                println!("training the no-degradation plug");
                pipeline::train_plug(&layout, &base, &dataset, &cfg, true)?;
            }
            let (wo_delta, _) = load_plug(layout.plug_wo_delta(), Some(&base))?;
            // the iterative comparison runs over the training horizon, one slice per interval
            let mut eval = cfg.eval.clone();
            eval.k = 1;
            eval.intervals = cfg.train.k;
            let report = ablate(&base, &full, &wo_delta, &dataset, &eval)?;
            emit_report(&report, &layout.ablation())?;
            print_rows(&report);
            println!("wrote {}", layout.ablation().display());
        }
        Command::Report(common) => {
            let layout = RunLayout::new(&common.out);
            let mut merged = MetricsReport::default();
            let mut sources = vec![layout.ablation().join(JSON_NAME)];
            if let Ok(entries) = std::fs::read_dir(layout.root.join("eval")) {
                let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path().join(JSON_NAME))).collect();
                dirs.sort();
                sources.extend(dirs);
            }
            for p in sources.iter().filter(|p| p.exists()) {
                merged.extend(read_json(p)?);
            }
            let files = emit_report(&merged, &layout.report())?;
            println!("{} rows -> {} files in {}", merged.rows.len(), files.len(), layout.report().display());
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn print_rows(report: &MetricsReport) {
    println!("{:<9} {:<18} {:<9} {:>2} {:>4} {:>10} {:>7} {:>5}", "variant", "mode", "condition", "k", "step", "centroid", "iou", "n");
    for r in &report.rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<9} {:<18} {:<9} {:>2} {:>4} {:>10} {:>7} {:>5}",
            r.variant,
            r.mode.name(),
            r.condition.name(),
            r.k,
            r.step,
            f(r.centroid_error_px),
            f(r.iou),
            r.n
        );
    }
}
