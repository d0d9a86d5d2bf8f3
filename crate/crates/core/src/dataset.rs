//! On-disk scene dataset.
//!
//! One directory per scene:
//!
//! - `spec.json`: the [`SceneSpec`]
//! - `frames_hi.f32a`, `frames_rgb.f32a`: frame stacks (see [`write_frames`])
//! - `labels.json`: one label per high-rate frame, masks bit-packed as hex
//! - `events.evpl`: the event stream (see [`crate::event_file`])

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_file;
use crate::event_model::{generate_events, EventStream, DEFAULT_EPS, DEFAULT_THRESHOLD};
use crate::scenegen::{render_scene, Frame, Label, SceneSampler, SceneSpec};

pub const FRAMES_MAGIC: &[u8; 4] = b"EVFA";
pub const FRAMES_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventConfig {
    pub threshold: f64,
    pub eps: f64,
    pub bins: usize,
}

impl Default for EventConfig {
    fn default() -> Self {
        EventConfig {
            threshold: DEFAULT_THRESHOLD,
            eps: DEFAULT_EPS,
            bins: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// Scenes are partitioned by seed, never by frame.
    pub fn of_seed(seed: u64) -> Split {
        match seed % 10 {
            0 => Split::Validation,
            1 => Split::Test,
            _ => Split::Train,
        }
    }
}

/// What training and evaluation need from a scene; high-rate frames stay on disk.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub spec: SceneSpec,
    pub frames_rgb: Vec<Frame>,
    pub events: EventStream,
}

impl SceneData {
    pub fn split(&self) -> Split {
        Split::of_seed(self.spec.seed)
    }

    /// Exact label at any instant, including between frames.
    pub fn label_at(&self, t: i64) -> Label {
        self.spec.label_at(t)
    }
}

/// Renders a scene and simulates its events.
pub fn generate_scene(spec: &SceneSpec, events: &EventConfig) -> Result<(SceneData, Vec<Frame>, Vec<Label>)> {
    let (hi, rgb, labels) = render_scene(spec)?;
    let stream = generate_events(&hi, events.threshold, events.eps)?;
    Ok((
        SceneData {
            spec: spec.clone(),
            frames_rgb: rgb,
            events: stream,
        },
        hi,
        labels,
    ))
}

/// Frame stack container, little-endian: magic `EVFA`, `u32` version,
/// `u32` count T, `u32` H, `u32` W, `u32` channels, T `i64` timestamps,
/// then T·H·W·channels `f32` pixels.
pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    let (h, w, c) = frames.first().map_or((0, 0, 1), |f| (f.height, f.width, f.channels));
    let mut out = Vec::with_capacity(24 + frames.len() * (8 + h * w * c * 4));
    out.extend_from_slice(FRAMES_MAGIC);
    for v in [FRAMES_VERSION, frames.len() as u32, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        if (f.height, f.width, f.channels) != (h, w, c) {
            return Err(Error::ShapeMismatch("frames in one stack must share a shape".into()));
        }
        out.extend_from_slice(&f.t.to_le_bytes());
    }
    for f in frames {
        for p in &f.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 || &bytes[0..4] != FRAMES_MAGIC {
        return Err(Error::format(path, "not a frame stack"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    if u32_at(4) != FRAMES_VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {}", u32_at(4))));
    }
    let (n, h, w, c) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let plane = h * w * c;
    if bytes.len() != 24 + n * 8 + n * plane * 4 {
        return Err(Error::format(path, "length does not match header"));
    }
    let mut frames = Vec::with_capacity(n);
    let px0 = 24 + n * 8;
    for k in 0..n {
        let t = i64::from_le_bytes(bytes[24 + k * 8..32 + k * 8].try_into().expect("8 bytes"));
        let start = px0 + k * plane * 4;
        let pixels = bytes[start..start + plane * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        frames.push(Frame {
            height: h,
            width: w,
            channels: c,
            pixels,
            t,
        });
    }
    Ok(frames)
}

#[derive(Serialize, Deserialize)]
struct StoredLabel {
    t: i64,
    centroids: Vec<[f64; 2]>,
    /// Row-major mask, 8 pixels per byte, least significant bit first.
    mask_hex: String,
}

fn pack_mask(mask: &[u8]) -> String {
    let bytes: Vec<u8> = mask
        .chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, m)| acc | (u8::from(*m > 0) << i)))
        .collect();
    hex::encode(bytes)
}

fn unpack_mask(hex_str: &str, len: usize) -> std::result::Result<Vec<u8>, String> {
    let bytes = hex::decode(hex_str).map_err(|e| e.to_string())?;
    if bytes.len() != len.div_ceil(8) {
        return Err(format!("mask has {} bytes, expected {}", bytes.len(), len.div_ceil(8)));
    }
    Ok((0..len).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect())
}

pub fn write_scene(dir: &Path, scene: &SceneData, frames_hi: &[Frame], labels: &[Label]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&scene.spec)?)?;
    write_frames(&dir.join("frames_hi.f32a"), frames_hi)?;
    write_frames(&dir.join("frames_rgb.f32a"), &scene.frames_rgb)?;
    let stored: Vec<StoredLabel> = labels
        .iter()
        .map(|l| StoredLabel {
            t: l.t,
            centroids: l.centroids.clone(),
            mask_hex: pack_mask(&l.mask),
        })
        .collect();
    std::fs::write(dir.join("labels.json"), serde_json::to_vec(&stored)?)?;
    event_file::write(dir.join("events.evpl"), &scene.events)?;
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SceneData> {
    let spec_path = dir.join("spec.json");
    let spec: SceneSpec = serde_json::from_slice(&std::fs::read(&spec_path)?)
        .map_err(|e| Error::format(&spec_path, e.to_string()))?;
    spec.validate().map_err(|e| Error::format(&spec_path, e.to_string()))?;
    let rgb_path = dir.join("frames_rgb.f32a");
    let frames_rgb = read_frames(&rgb_path)?;
    if frames_rgb.len() != spec.rgb_frame_count()
        || frames_rgb.iter().any(|f| f.height != spec.height || f.width != spec.width)
    {
        return Err(Error::format(&rgb_path, "frame stack does not match spec.json"));
    }
    let ev_path = dir.join("events.evpl");
    let events = event_file::read(&ev_path)?;
    if events.height != spec.height || events.width != spec.width {
        return Err(Error::format(&ev_path, "event resolution does not match spec.json"));
    }
    Ok(SceneData {
        spec,
        frames_rgb,
        events,
    })
}

pub fn read_labels(dir: &Path) -> Result<Vec<Label>> {
    let path = dir.join("labels.json");
    let spec: SceneSpec = serde_json::from_slice(&std::fs::read(dir.join("spec.json"))?)?;
    let stored: Vec<StoredLabel> =
        serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    stored
        .into_iter()
        .map(|s| {
            Ok(Label {
                t: s.t,
                centroids: s.centroids,
                mask: unpack_mask(&s.mask_hex, spec.height * spec.width).map_err(|e| Error::format(&path, e))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_scenes: usize,
    /// Scene `k` uses seed `seed + k`.
    pub seed: u64,
    pub sampler: SceneSampler,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_scenes: 200,
            seed: 0,
            sampler: SceneSampler::default(),
        }
    }
}

pub fn scene_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("scene_{seed:06}"))
}

/// Generates and writes every scene; returns the scene directories.
pub fn generate_dataset(root: &Path, data: &DataConfig, events: &EventConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(root)?;
    let mut dirs = Vec::with_capacity(data.n_scenes);
    for k in 0..data.n_scenes {
        let seed = data.seed + k as u64;
        let spec = data.sampler.sample(seed)?;
        let (scene, hi, labels) = generate_scene(&spec, events)?;
        let dir = scene_dir(root, seed);
        write_scene(&dir, &scene, &hi, &labels)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub scenes: Vec<SceneData>,
}

impl Dataset {
    /// Loads every `scene_*` directory under `root`, in name order.
    pub fn load(root: &Path) -> Result<Dataset> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::format(root, "no scene directories"));
        }
        let scenes = dirs.iter().map(|d| read_scene(d)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { scenes })
    }

    pub fn split(&self, split: Split) -> Vec<&SceneData> {
        self.scenes.iter().filter(|s| s.split() == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sampler = SceneSampler { duration_s: 0.25, ..Default::default() };
        let spec = sampler.sample(12).unwrap();
        let (scene, hi, labels) = generate_scene(&spec, &EventConfig::default()).unwrap();
        let d = scene_dir(dir.path(), 12);
        write_scene(&d, &scene, &hi, &labels).unwrap();
        let back = read_scene(&d).unwrap();
        assert_eq!(back.spec, scene.spec);
        assert_eq!(back.frames_rgb, scene.frames_rgb);
        assert_eq!(back.events, scene.events);
        assert_eq!(read_frames(&d.join("frames_hi.f32a")).unwrap(), hi);
        assert_eq!(read_labels(&d).unwrap(), labels);
        assert_eq!(back.split(), Split::Train);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.scenes.len(), 1);
    }

    #[test]
    fn mask_packing_round_trips() {
        let mask: Vec<u8> = (0..21).map(|i| u8::from(i % 3 == 0)).collect();
        assert_eq!(unpack_mask(&pack_mask(&mask), 21).unwrap(), mask);
        assert!(unpack_mask("00", 21).is_err());
    }

    #[test]
    fn splits_by_seed() {
        assert_eq!(Split::of_seed(10), Split::Validation);
        assert_eq!(Split::of_seed(21), Split::Test);
        assert_eq!(Split::of_seed(7), Split::Train);
    }

    #[test]
    fn corrupted_stack_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.f32a");
        write_frames(&p, &[Frame::filled(2, 2, 0.5, 0), Frame::filled(2, 2, 0.25, 10)]).unwrap();
        let mut b = std::fs::read(&p).unwrap();
        b.pop();
        std::fs::write(&p, &b).unwrap();
        assert!(read_frames(&p).is_err());
    }
}
