//! Evaluation modes, ablation table and report emission.
//!
//! Every mode sees the same anchors and the same degradations, so rows
//! are paired. Errors are measured against the scene's exact labels at each
//! prediction instant, including instants between RGB frames.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::param_digest;
use crate::dataset::{Dataset, SceneData, Split};
use crate::degrade::{degrade_blur, degrade_exposure};
use crate::efformer::{fuse, fuse_no_iter, iterate_sequence, PlugModule};
use crate::encoders::{BaseModel, FeatureMap, TaskOutput};
use crate::error::{Error, Result};
use crate::event_model::{slice, split_equal, voxelize, EventStream};
use crate::scenegen::{blur_flow, Frame, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    RgbOnly,
    FusedAnchor,
    HighRateIter,
    HighRateNoIter,
    /// Fused anchor with an empty prior event stream.
    EventsMissing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Exposure,
    Blur,
}

macro_rules! names {
    ($ty:ident { $($v:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$v),*];

            pub fn name(self) -> &'static str {
                match self { $($ty::$v => $s),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$v),)*
                    _ => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: {})"),
                        s,
                        [$($s),*].join(", ")
                    ))),
                }
            }
        }
    };
}

names!(EvalMode {
    RgbOnly => "rgb_only",
    FusedAnchor => "fused_anchor",
    HighRateIter => "high_rate_iter",
    HighRateNoIter => "high_rate_no_iter",
    EventsMissing => "events_missing",
});

names!(Condition {
    Clean => "clean",
    Exposure => "exposure",
    Blur => "blur",
});

impl EvalMode {
    pub fn needs_plug(self) -> bool {
        self != EvalMode::RgbOnly
    }

    pub fn high_rate(self) -> bool {
        matches!(self, EvalMode::HighRateIter | EvalMode::HighRateNoIter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Exposure condition: `clip(alpha·I + beta)`.
    pub alpha: f64,
    pub beta: f64,
    /// Blur condition: warps averaged over the preceding RGB interval.
    pub n_interp: usize,
    /// Anchor selection seed shared by every mode.
    pub seed: u64,
    /// High-rate slices per RGB interval.
    pub k: usize,
    /// RGB intervals covered by a high-rate chain.
    pub intervals: usize,
    /// Anchors per test scene; 0 uses every valid anchor.
    pub anchors_per_scene: usize,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 4.0,
            beta: 0.4,
            n_interp: 8,
            seed: 3,
            k: 2,
            intervals: 1,
            anchors_per_scene: 0,
            split: Split::Test,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.intervals == 0 {
            return Err(Error::Config("eval.k and eval.intervals must be at least 1".into()));
        }
        if self.n_interp == 0 {
            return Err(Error::Config("eval.n_interp must be at least 1".into()));
        }
        Ok(())
    }
}

/// One cell: a metric aggregated over samples at one prediction step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Model variant, e.g. `full` or `wo_delta`.
    pub variant: String,
    pub mode: EvalMode,
    pub condition: Condition,
    /// Slices per RGB interval (1 for single-step modes).
    pub k: usize,
    /// 0 is the anchor `t_i`; step `s` is `t_i + s·Δ/k`.
    pub step: usize,
    /// Mean offset of the prediction instant from the anchor, µs.
    pub dt_us: f64,
    pub centroid_error_px: Option<f64>,
    pub iou: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn find(&self, variant: &str, mode: EvalMode, condition: Condition, step: usize) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.mode == mode && r.condition == condition && r.step == step)
    }

    pub fn is_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.centroid_error_px.is_none_or(f64::is_finite) && r.iou.is_none_or(f64::is_finite))
    }
}

/// Anchor frame under an evaluation condition.
pub fn degrade_anchor(scene: &SceneData, i: usize, condition: Condition, cfg: &EvalConfig) -> Result<Frame> {
    let frame = &scene.frames_rgb[i];
    match condition {
        Condition::Clean => Ok(frame.clone()),
        Condition::Exposure => degrade_exposure(frame, cfg.alpha, cfg.beta),
        Condition::Blur => {
            let t0 = scene.frames_rgb[i - 1].t;
            degrade_blur(frame, &blur_flow(&scene.spec, t0, frame.t)?, cfg.n_interp)
        }
    }
}

/// `(scene index, anchor)` pairs; identical for every mode given the config.
pub fn eval_anchors(dataset: &Dataset, cfg: &EvalConfig) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for (s, scene) in dataset.scenes.iter().enumerate() {
        if scene.split() != cfg.split {
            continue;
        }
        // the longest chain any mode uses fixes the range
        let n = scene.frames_rgb.len().saturating_sub(cfg.intervals + 1);
        let take = if cfg.anchors_per_scene == 0 { n } else { cfg.anchors_per_scene.min(n) };
        let mut picked: Vec<usize> = sample(&mut rng, n, take).into_iter().map(|k| k + 1).collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (s, i)));
    }
    out
}

/// Mean Euclidean distance between matched centroids.
pub fn centroid_error(pred: &TaskOutput<f32>, label: &Label, width: usize, height: usize) -> Option<f64> {
    let px = pred.centroids_px(width, height)?;
    if px.is_empty() || px.len() != label.centroids.len() {
        return None;
    }
    let sum: f64 = px
        .iter()
        .zip(&label.centroids)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    Some(sum / px.len() as f64)
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(pred: &[u8], truth: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (*p != 0, *t != 0);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn ev_feat(plug: &PlugModule<f32>, stream: &EventStream) -> Result<FeatureMap<f32>> {
    plug.ev_encode(&voxelize(stream, stream.t_begin, stream.t_end, plug.bins())?)
}

/// Feature states and their instants for one anchor.
fn run_anchor(
    base: &BaseModel,
    plug: Option<&PlugModule<f32>>,
    scene: &SceneData,
    i: usize,
    mode: EvalMode,
    condition: Condition,
    cfg: &EvalConfig,
) -> Result<Vec<(i64, FeatureMap<f32>)>> {
    let t = |m: usize| scene.frames_rgb[m].t;
    let im = base.im_encode(&degrade_anchor(scene, i, condition, cfg)?)?;
    if mode == EvalMode::RgbOnly {
        return Ok(vec![(t(i), im)]);
    }
    let plug = plug.ok_or_else(|| Error::InvalidArgument(format!("mode {mode} needs a plug")))?;
    let prior = if mode == EvalMode::EventsMissing {
        EventStream::empty(scene.spec.height, scene.spec.width, t(i - 1), t(i), scene.events.threshold)
    } else {
        slice(&scene.events, t(i - 1), t(i))?
    };
    let anchor = fuse(plug, &im, &ev_feat(plug, &prior)?)?;
    if !mode.high_rate() {
        return Ok(vec![(t(i), anchor)]);
    }
    let slices = split_equal(&scene.events, t(i), t(i + cfg.intervals), cfg.k * cfg.intervals)?;
    let feats = slices.iter().map(|s| ev_feat(plug, s)).collect::<Result<Vec<_>>>()?;
    let states = if mode == EvalMode::HighRateIter {
        iterate_sequence(plug, &anchor, &feats)?
    } else {
        fuse_no_iter(plug, &anchor, &feats)?
    };
    let mut out = vec![(t(i), anchor)];
    out.extend(slices.iter().map(|s| s.t_end).zip(states));
    Ok(out)
}

#[derive(Default)]
struct Acc {
    dt: f64,
    err: f64,
    n_err: usize,
    iou: f64,
    n_iou: usize,
    n: usize,
}

/// Evaluates one mode under one condition; `variant` labels the rows.
pub fn evaluate(
    base: &BaseModel,
    plug: Option<&PlugModule<f32>>,
    dataset: &Dataset,
    mode: EvalMode,
    condition: Condition,
    cfg: &EvalConfig,
    variant: &str,
) -> Result<MetricsReport> {
    cfg.validate()?;
    base.verify()?;
    if mode.needs_plug() && plug.is_none() {
        return Err(Error::InvalidArgument(format!("mode {mode} needs a plug")));
    }
    let plug_digest = plug.map(param_digest);
    let anchors = eval_anchors(dataset, cfg);
    if anchors.is_empty() {
        return Err(Error::InvalidArgument(format!("no {:?} scenes to evaluate", cfg.split)));
    }
    let mut acc: BTreeMap<usize, Acc> = BTreeMap::new();
    for &(s, i) in &anchors {
        let scene = &dataset.scenes[s];
        let (w, h) = (scene.spec.width, scene.spec.height);
        for (step, (t, feat)) in run_anchor(base, plug, scene, i, mode, condition, cfg)?.into_iter().enumerate() {
            let pred = base.task_head(&feat)?;
            let label = scene.label_at(t);
            let a = acc.entry(step).or_default();
            a.n += 1;
            a.dt += (t - scene.frames_rgb[i].t) as f64;
            if let Some(e) = centroid_error(&pred, &label, w, h) {
                a.err += e;
                a.n_err += 1;
            }
            if let Some(m) = pred.mask() {
                a.iou += iou(&m, &label.mask);
                a.n_iou += 1;
            }
        }
    }
    base.verify()?;
    if plug.map(param_digest) != plug_digest {
        return Err(Error::InvalidArgument("plug parameters changed during evaluation".into()));
    }
    let k = if mode.high_rate() { cfg.k } else { 1 };
    let rows = acc
        .into_iter()
        .map(|(step, a)| MetricRow {
            variant: variant.to_string(),
            mode,
            condition,
            k,
            step,
            dt_us: a.dt / a.n as f64,
            centroid_error_px: (a.n_err > 0).then(|| a.err / a.n_err as f64),
            iou: (a.n_iou > 0).then(|| a.iou / a.n_iou as f64),
            n: a.n,
        })
        .collect();
    Ok(MetricsReport { rows })
}

/// The ablation table: the full plug and the plug trained without
/// degradation on fused anchors, the iterative and the non-iterative
/// high-rate chains, plus the image-only reference, under every condition.
pub fn ablate(
    base: &BaseModel,
    full: &PlugModule<f32>,
    wo_delta: &PlugModule<f32>,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for &c in Condition::ALL {
        report.extend(evaluate(base, None, dataset, EvalMode::RgbOnly, c, cfg, "rgb_only")?);
        report.extend(evaluate(base, Some(full), dataset, EvalMode::FusedAnchor, c, cfg, "full")?);
        report.extend(evaluate(base, Some(wo_delta), dataset, EvalMode::FusedAnchor, c, cfg, "wo_delta")?);
        report.extend(evaluate(base, Some(full), dataset, EvalMode::HighRateIter, c, cfg, "iter")?);
        report.extend(evaluate(base, Some(full), dataset, EvalMode::HighRateNoIter, c, cfg, "no_iter")?);
    }
    Ok(report)
}

pub const CSV_NAME: &str = "metrics.csv";
pub const JSON_NAME: &str = "metrics.json";

/// Writes `metrics.csv`, `metrics.json` and one SVG line plot per metric
/// (error against prediction step). An empty report writes a header-only
/// CSV and no plots.
pub fn emit_report(report: &MetricsReport, out: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out)?;
    let csv_path = out.join(CSV_NAME);
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path).map_err(csv_error)?;
        w.write_record(CSV_HEADER).map_err(csv_error)?;
        for r in &report.rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
    }
    std::fs::write(out.join(JSON_NAME), serde_json::to_vec_pretty(report)?)?;
    let mut files = vec![csv_path, out.join(JSON_NAME)];
    if report.rows.is_empty() {
        return Ok(files);
    }
    let plots: [(&str, &str, fn(&MetricRow) -> Option<f64>); 2] = [
        ("centroid_error", "centroid error (px)", |r| r.centroid_error_px),
        ("iou", "IoU", |r| r.iou),
    ];
    for (stem, label, get) in plots {
        if report.rows.iter().any(|r| get(r).is_some()) {
            let p = out.join(format!("{stem}.svg"));
            plot_metric(report, &p, label, get)?;
            files.push(p);
        }
    }
    Ok(files)
}

const CSV_HEADER: [&str; 9] = [
    "variant",
    "mode",
    "condition",
    "k",
    "step",
    "dt_us",
    "centroid_error_px",
    "iou",
    "n",
];

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

pub fn read_csv(path: &Path) -> Result<MetricsReport> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>().map_err(csv_error)?;
    Ok(MetricsReport { rows })
}

pub fn read_json(path: &Path) -> Result<MetricsReport> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn plot_metric(report: &MetricsReport, path: &Path, label: &str, get: fn(&MetricRow) -> Option<f64>) -> Result<()> {
    use plotters::prelude::*;

    let mut series: BTreeMap<(String, EvalMode, Condition, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &report.rows {
        if let Some(v) = get(r) {
            let key = (r.variant.clone(), r.mode, r.condition, r.k);
            series.entry(key).or_default().push((r.step as f64 / r.k as f64, v));
        }
    }
    let x_max = series.values().flatten().map(|p| p.0).fold(1.0f64, f64::max);
    let y_max = series.values().flatten().map(|p| p.1).fold(0.0f64, f64::max).max(1e-6) * 1.1;

    let plot_err = |e: Box<dyn std::error::Error + '_>| Error::InvalidArgument(format!("plot {}: {e}", path.display()));
    let root = SVGBackend::new(path, (960, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(Box::new(e)))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(label, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(|e| plot_err(Box::new(e)))?;
    chart
        .configure_mesh()
        .x_desc("time after anchor (RGB intervals)")
        .y_desc(label)
        .draw()
        .map_err(|e| plot_err(Box::new(e)))?;
    for (n, ((variant, mode, condition, k), pts)) in series.iter().enumerate() {
        let color = Palette99::pick(n).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(Box::new(e)))?
            .label(format!("{variant}/{mode}/{condition}/k{k}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|p| Circle::new(*p, 3, color.filled())))
            .map_err(|e| plot_err(Box::new(e)))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(Box::new(e)))?;
    root.present().map_err(|e| plot_err(Box::new(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, step: usize, err: Option<f64>) -> MetricRow {
        MetricRow {
            variant: variant.into(),
            mode: EvalMode::HighRateIter,
            condition: Condition::Exposure,
            k: 2,
            step,
            dt_us: step as f64 * 20833.5,
            centroid_error_px: err,
            iou: None,
            n: 17,
        }
    }

    #[test]
    fn names_parse_back() {
        for m in EvalMode::ALL {
            assert_eq!(m.name().parse::<EvalMode>().unwrap(), *m);
        }
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), *c);
        }
        assert!("sideways".parse::<EvalMode>().is_err());
    }

    #[test]
    fn csv_round_trip_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let report = MetricsReport {
            rows: vec![row("full", 0, Some(1.25)), row("full", 1, Some(0.1 + 0.2)), row("full", 2, None)],
        };
        let files = emit_report(&report, dir.path()).unwrap();
        assert_eq!(read_csv(&dir.path().join(CSV_NAME)).unwrap(), report);
        assert_eq!(read_json(&dir.path().join(JSON_NAME)).unwrap(), report);
        assert!(files.iter().any(|f| f.extension().is_some_and(|e| e == "svg")));
        let first = std::fs::read(dir.path().join(CSV_NAME)).unwrap();
        emit_report(&report, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(CSV_NAME)).unwrap(), first);
    }

    #[test]
    fn empty_report_is_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&MetricsReport::default(), dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let text = std::fs::read_to_string(dir.path().join(CSV_NAME)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("variant,mode,condition"));
        assert!(read_csv(&dir.path().join(CSV_NAME)).unwrap().rows.is_empty());
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[1, 1, 0, 0], &[1, 0, 1, 0]), 1.0 / 3.0);
        assert_eq!(iou(&[0, 0], &[0, 0]), 1.0);
        assert_eq!(iou(&[1, 1], &[1, 1]), 1.0);
    }
}
