//! Plug training against a frozen base model.
//!
//! Per sample: the (possibly degraded) anchor is fused with the events of the
//! preceding RGB interval, then the state is advanced through `K` event
//! slices. Every state, anchor included, is pulled towards the frozen
//! encoder's features of the matching clean frame (reconstruction + Gram
//! style) and towards the frozen head's output on that frame (task).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, param_digest};
use crate::dataset::{Dataset, SceneData, Split};
use crate::degrade::{DegradeSchedule, DegradeSpec};
use crate::efformer::{EFormerConfig, FuseCache, PlugModule};
use crate::encoders::{BaseModel, FeatureMap, TaskOutput};
use crate::error::{Error, Result};
use crate::event_model::{slice, split_equal, voxelize, EventStream};
use crate::losses::{self, LossReport, LossWeights};
use crate::nn::{self, Adam, Params};
use crate::scenegen::{blur_flow, Frame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fusion steps after the anchor.
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Anchors drawn per training scene per epoch (without replacement).
    pub anchors_per_scene: usize,
    /// Fixed anchors per validation scene.
    pub validation_anchors: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub degrade: DegradeSchedule,
    pub eformer: EFormerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 40,
            anchors_per_scene: 16,
            validation_anchors: 4,
            seed: 7,
            weights: LossWeights::default(),
            degrade: DegradeSchedule::default(),
            eformer: EFormerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.anchors_per_scene == 0 {
            return Err(Error::Config("batch_size and anchors_per_scene must be positive".into()));
        }
        let w = &self.weights;
        if [w.task, w.recon, w.style].iter().any(|v| *v < 0.0) || w.task + w.recon + w.style <= 0.0 {
            return Err(Error::Config("loss weights must be nonnegative with at least one positive".into()));
        }
        self.eformer.validate()
    }
}

/// One training example around RGB frame `i` of a scene.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub scene: usize,
    pub i: usize,
    /// `δ(I_{t_i})`.
    pub anchor: Frame,
    pub degrade: DegradeSpec,
    /// `E[t_{i−1}, t_i)`.
    pub prior: EventStream,
    /// `K` equal slices of `E[t_i, t_{i+K})`.
    pub future: Vec<EventStream>,
    /// Clean frames `I_{t_i} .. I_{t_{i+K}}`.
    pub clean: Vec<Frame>,
}

/// Valid anchor indices for `k` steps in a scene with `n_rgb` frames.
pub fn anchor_range(n_rgb: usize, k: usize) -> std::ops::RangeInclusive<usize> {
    1..=n_rgb.saturating_sub(k + 1)
}

pub fn build_sample<R: Rng + ?Sized>(
    scene: &SceneData,
    scene_index: usize,
    i: usize,
    k: usize,
    schedule: &DegradeSchedule,
    rng: &mut R,
) -> Result<TrainSample> {
    let n = scene.frames_rgb.len();
    if k == 0 || i == 0 || i + k >= n {
        return Err(Error::InvalidArgument(format!(
            "anchor {i} with k={k} needs frames {}..={} of {n}",
            i.saturating_sub(1),
            i + k
        )));
    }
    let t = |m: usize| scene.frames_rgb[m].t;
    let degrade = schedule.draw(rng, || blur_flow(&scene.spec, t(i - 1), t(i)))?;
    Ok(TrainSample {
        scene: scene_index,
        i,
        anchor: degrade.apply(&scene.frames_rgb[i])?,
        degrade,
        prior: slice(&scene.events, t(i - 1), t(i))?,
        future: split_equal(&scene.events, t(i), t(i + k), k)?,
        clean: scene.frames_rgb[i..=i + k].to_vec(),
    })
}

/// Frozen-model outputs on clean frames, memoised by (scene, frame time).
#[derive(Default)]
pub struct TargetCache {
    map: HashMap<(usize, i64), (FeatureMap<f32>, TaskOutput<f32>)>,
}

impl TargetCache {
    pub fn get(&mut self, base: &BaseModel, scene: usize, frame: &Frame) -> Result<&(FeatureMap<f32>, TaskOutput<f32>)> {
        use std::collections::hash_map::Entry;
        match self.map.entry((scene, frame.t)) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => {
                let feat = base.im_encode(frame)?;
                let pseudo = base.task_head(&feat)?;
                Ok(e.insert((feat, pseudo)))
            }
        }
    }
}

/// Loss of one sample; accumulates plug gradients when `grads` is given.
/// The returned report holds the sum over the `K + 1` steps.
pub fn sample_loss(
    base: &BaseModel,
    plug: &PlugModule<f32>,
    sample: &TrainSample,
    weights: &LossWeights,
    targets: &mut TargetCache,
    grads: Option<&mut PlugModule<f32>>,
) -> Result<LossReport> {
    let bins = plug.bins();
    let anchor_feat = base.im_encode(&sample.anchor)?;
    let prior = voxelize(&sample.prior, sample.prior.t_begin, sample.prior.t_end, bins)?;
    let mut states: Vec<FeatureMap<f32>> = Vec::with_capacity(sample.future.len() + 1);
    let mut caches: Vec<FuseCache<f32>> = Vec::with_capacity(sample.future.len() + 1);
    let (f0, c0) = plug.fuse_with_cache(&anchor_feat, &prior)?;
    states.push(f0);
    caches.push(c0);
    for s in &sample.future {
        let vox = voxelize(s, s.t_begin, s.t_end, bins)?;
        let (f, c) = plug.fuse_with_cache(states.last().expect("non-empty"), &vox)?;
        states.push(f);
        caches.push(c);
    }

    let mut report = LossReport::default();
    let mut dstates: Vec<Vec<f32>> = Vec::with_capacity(states.len());
    for (j, state) in states.iter().enumerate() {
        let (target, pseudo) = targets.get(base, sample.scene, &sample.clean[j])?;
        let (pred, head_cache) = base.head().forward(state)?;
        let (task, dpred) = losses::task_loss_grad(&pred, pseudo)?;
        let (recon, drecon) = losses::recon_loss_grad(state, target)?;
        let (style, dstyle) = losses::style_loss_grad(state, target)?;
        report.add(&LossReport {
            task,
            recon,
            style,
            total: weights.task * task + weights.recon * recon + weights.style * style,
        });
        if grads.is_some() {
            let dtask = base.head().backward(&head_cache, &dpred, None);
            let (wt, wr, ws) = (weights.task as f32, weights.recon as f32, weights.style as f32);
            dstates.push(
                (0..state.data.len())
                    .map(|n| wt * dtask[n] + wr * drecon[n] + ws * dstyle[n])
                    .collect(),
            );
        }
    }

    if let Some(grads) = grads {
        let mut carry: Option<FeatureMap<f32>> = None;
        for j in (0..states.len()).rev() {
            let mut d = FeatureMap {
                data: std::mem::take(&mut dstates[j]),
                ..states[j].clone()
            };
            if let Some(c) = &carry {
                d.data.iter_mut().zip(&c.data).for_each(|(a, b)| *a += *b);
            }
            // the anchor's prior is the frozen encoder output: its gradient is dropped
            carry = Some(plug.fuse_backward(&caches[j], &d, grads));
        }
    }
    Ok(report)
}

/// One optimiser update on a batch; only plug parameters move.
pub fn train_step(
    base: &BaseModel,
    plug: &mut PlugModule<f32>,
    opt: &mut Adam,
    batch: &[TrainSample],
    weights: &LossWeights,
    targets: &mut TargetCache,
) -> Result<LossReport> {
    base.verify()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = nn::zeros_like(plug);
    let mut total = LossReport::default();
    for s in batch {
        total.add(&sample_loss(base, plug, s, weights, targets, Some(&mut grads))?);
    }
    let report = total.scaled(1.0 / batch.len() as f64);
    if !report.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.steps() + 1,
            last_good: String::new(),
        });
    }
    let scale = 1.0 / batch.len() as f32;
    grads.visit_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v *= scale));
    opt.step(plug, &grads);
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossReport,
    pub validation: LossReport,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub plug: PlugModule<f32>,
    pub best_epoch: usize,
    /// Validation loss of the untrained plug.
    pub initial_validation: LossReport,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

#[derive(Serialize)]
struct StepLog<'a> {
    kind: &'a str,
    epoch: usize,
    step: u64,
    #[serde(flatten)]
    loss: LossReport,
}

fn mean_loss(
    base: &BaseModel,
    plug: &PlugModule<f32>,
    samples: &[TrainSample],
    weights: &LossWeights,
    targets: &mut TargetCache,
) -> Result<LossReport> {
    let mut total = LossReport::default();
    for s in samples {
        total.add(&sample_loss(base, plug, s, weights, targets, None)?);
    }
    Ok(total.scaled(1.0 / samples.len().max(1) as f64))
}

fn scene_indices(dataset: &Dataset, split: Split) -> Vec<usize> {
    (0..dataset.scenes.len()).filter(|&s| dataset.scenes[s].split() == split).collect()
}

/// Where training writes its log and checkpoints.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    /// Checkpoint file name of the best plug.
    pub plug_name: &'a str,
}

/// Full training run. Deterministic for a given config and dataset.
pub fn train(
    base: &BaseModel,
    dataset: &Dataset,
    config: &TrainConfig,
    bins: usize,
    output: Option<TrainOutput<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    base.verify()?;
    let base_digest = base.digest().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut plug = PlugModule::new(base.encoder_config(), bins, config.eformer.clone(), &mut rng)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut targets = TargetCache::default();

    let train_scenes = scene_indices(dataset, Split::Train);
    let val_scenes = scene_indices(dataset, Split::Validation);
    if train_scenes.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training scenes".into()));
    }

    // fixed validation set with its own degradation draws
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11);
    let mut validation = Vec::new();
    for &s in &val_scenes {
        let scene = &dataset.scenes[s];
        let range = anchor_range(scene.frames_rgb.len(), config.k);
        let n = range.clone().count();
        for idx in sample(&mut val_rng, n, config.validation_anchors.min(n)).into_iter() {
            validation.push(build_sample(scene, s, range.start() + idx, config.k, &config.degrade, &mut val_rng)?);
        }
    }

    let mut log = match &output {
        Some(o) => {
            std::fs::create_dir_all(o.dir)?;
            Some(BufWriter::new(File::create(o.dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let plug_path: Option<PathBuf> = output.as_ref().map(|o| o.dir.join(o.plug_name));

    let initial_validation = mean_loss(base, &plug, &validation, &config.weights, &mut targets)?;
    let mut best = (f64::INFINITY, 0usize, plug.clone());
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_good = "none".to_string();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut samples = Vec::new();
        for &s in &train_scenes {
            let scene = &dataset.scenes[s];
            let range = anchor_range(scene.frames_rgb.len(), config.k);
            let n = range.clone().count();
            for idx in sample(&mut rng, n, config.anchors_per_scene.min(n)).into_iter() {
                samples.push(build_sample(scene, s, range.start() + idx, config.k, &config.degrade, &mut rng)?);
            }
        }
        samples.shuffle(&mut rng);
        let mut epoch_loss = LossReport::default();
        for batch in samples.chunks(config.batch_size) {
            let report = match train_step(base, &mut plug, &mut opt, batch, &config.weights, &mut targets) {
                Err(Error::NonFiniteLoss { step, .. }) => {
                    return Err(Error::NonFiniteLoss {
                        step,
                        last_good: last_good.clone(),
                    })
                }
                other => other?,
            };
            epoch_loss.add(&report.scaled(batch.len() as f64));
            if let Some(w) = log.as_mut() {
                let line = StepLog {
                    kind: "step",
                    epoch,
                    step: opt.steps(),
                    loss: report,
                };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        let train_loss = epoch_loss.scaled(1.0 / samples.len().max(1) as f64);
        let val = if validation.is_empty() {
            train_loss
        } else {
            mean_loss(base, &plug, &validation, &config.weights, &mut targets)?
        };
        let record = EpochRecord {
            epoch,
            train: train_loss,
            validation: val,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_mut() {
            let mut v = serde_json::to_value(&record)?;
            v["kind"] = "epoch".into();
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if val.total < best.0 {
            best = (val.total, epoch, plug.clone());
            if let Some(p) = &plug_path {
                let meta = serde_json::json!({"epoch": epoch, "validation": val, "steps": opt.steps()});
                checkpoint::save_plug(p, &plug, &base_digest, meta)?;
                last_good = p.display().to_string();
            }
        }
        history.push(record);
    }
    base.verify()?;
    if base.digest() != base_digest {
        return Err(Error::DigestMismatch {
            section: "base".into(),
            stored: base_digest,
            computed: base.digest().to_string(),
        });
    }
    Ok(TrainOutcome {
        plug: best.2,
        best_epoch: best.1,
        initial_validation,
        history,
        steps: opt.steps(),
    })
}

/// Digest of a trained plug, for determinism checks.
pub fn plug_digest(plug: &PlugModule<f32>) -> String {
    param_digest(plug)
}
