//! Run-directory layout and the glue between the pipeline stages.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, Dataset, Split};
use crate::degrade::DegradeSchedule;
use crate::encoders::{pretrain_base, BaseModel};
use crate::error::Result;
use crate::evalharness::{evaluate, Condition, EvalConfig, EvalMode};
use crate::scenegen::{Frame, Label};
use crate::trainer::{train, TrainOutcome, TrainOutput};

/// Fixed file names under a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base.ckpt")
    }

    pub fn plug(&self) -> PathBuf {
        self.root.join(PLUG)
    }

    pub fn plug_wo_delta(&self) -> PathBuf {
        self.root.join(PLUG_WO_DELTA)
    }

    pub fn train_dir(&self, wo_delta: bool) -> PathBuf {
        self.root.join(if wo_delta { "train_wo_delta" } else { "train" })
    }

    pub fn eval_dir(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

const PLUG: &str = "plug.ckpt";
const PLUG_WO_DELTA: &str = "plug_wo_delta.ckpt";

pub fn gen_data(layout: &RunLayout, cfg: &RunConfig) -> Result<usize> {
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.config(), cfg.to_toml())?;
    Ok(generate_dataset(&layout.data(), &cfg.data, &cfg.events)?.len())
}

/// Clean high-rate frames of the training scenes, re-rendered from their
/// specs (identical to the stored stacks).
pub fn pretrain_set(dataset: &Dataset, frame_stride: usize) -> Vec<(Frame, Label)> {
    dataset
        .split(Split::Train)
        .into_iter()
        .flat_map(|s| {
            let spec = &s.spec;
            (0..spec.hi_frame_count()).step_by(frame_stride).map(move |k| {
                let t = spec.hi_timestamp(k);
                (spec.render_at(t), spec.label_at(t))
            })
        })
        .collect()
}

/// Pretrains and freezes the base model; returns it with the per-epoch
/// losses and its clean validation error (the pretraining gate).
pub fn pretrain(layout: &RunLayout, dataset: &Dataset, cfg: &RunConfig) -> Result<(BaseModel, Vec<f64>, Option<f64>)> {
    let data = pretrain_set(dataset, cfg.pretrain.frame_stride);
    let (base, history) = pretrain_base(&data, cfg.model.task, cfg.image_encoder(), &cfg.pretrain.optim)?;
    let gate = EvalConfig {
        split: Split::Validation,
        anchors_per_scene: 0,
        ..cfg.eval.clone()
    };
    let val = evaluate(&base, None, dataset, EvalMode::RgbOnly, Condition::Clean, &gate, "base")
        .ok()
        .and_then(|r| r.rows.first().and_then(|row| row.centroid_error_px.or(row.iou)));
    let meta = serde_json::json!({
        "epoch_loss": history,
        "validation_metric": val,
        "training_frames": data.len(),
    });
    checkpoint::save_base(layout.base(), &base, meta)?;
    Ok((base, history, val))
}

/// Trains a plug and writes its best checkpoint. `wo_delta` disables the
/// anchor degradation (the ablation variant).
pub fn train_plug(layout: &RunLayout, base: &BaseModel, dataset: &Dataset, cfg: &RunConfig, wo_delta: bool) -> Result<TrainOutcome> {
    let mut train_cfg = cfg.train.clone();
    if wo_delta {
        train_cfg.degrade = DegradeSchedule::disabled();
    }
    let dir = layout.train_dir(wo_delta);
    let outcome = train(
        base,
        dataset,
        &train_cfg,
        cfg.events.bins,
        Some(TrainOutput {
            dir: &dir,
            plug_name: if wo_delta { PLUG_WO_DELTA } else { PLUG },
        }),
    )?;
    let target = if wo_delta { layout.plug_wo_delta() } else { layout.plug() };
    std::fs::copy(dir.join(target.file_name().expect("file name")), &target)?;
    Ok(outcome)
}

/// Loads the config stored in a run directory, or the defaults.
pub fn load_config(explicit: Option<&Path>, layout: &RunLayout) -> Result<RunConfig> {
    match explicit {
        Some(p) => RunConfig::load(p),
        None if layout.config().exists() => RunConfig::load(layout.config()),
        None => Ok(RunConfig::default()),
    }
}
