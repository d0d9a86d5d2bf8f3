//! Deterministic synthetic scenes: moving disks and squares over a flat
//! background, rendered with 4×4 supersampling.
//!
//! Pixel `(x, y)` covers the square `[x, x+1) × [y, y+1)`; shape positions and
//! centroid labels live in the same continuous coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supersampling factor per axis.
pub const SUPERSAMPLE: usize = 4;

pub const MICROS_PER_SECOND: f64 = 1_000_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
}

/// Position of a shape's centre as a function of time in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trajectory {
    Linear { start: [f64; 2], velocity: [f64; 2] },
    /// Elliptic orbit `center + amplitude ⊙ (cos, sin)(omega·t + phase)`.
    Orbit {
        center: [f64; 2],
        amplitude: [f64; 2],
        omega: f64,
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, t_s: f64) -> [f64; 2] {
        match *self {
            Trajectory::Linear { start, velocity } => {
                [start[0] + velocity[0] * t_s, start[1] + velocity[1] * t_s]
            }
            Trajectory::Orbit {
                center,
                amplitude,
                omega,
                phase,
            } => {
                let a = omega * t_s + phase;
                [center[0] + amplitude[0] * a.cos(), center[1] + amplitude[1] * a.sin()]
            }
        }
    }

    /// Upper bound on speed in px/s.
    pub fn max_speed(&self) -> f64 {
        match *self {
            Trajectory::Linear { velocity, .. } => velocity[0].hypot(velocity[1]),
            Trajectory::Orbit { amplitude, omega, .. } => {
                amplitude[0].abs().max(amplitude[1].abs()) * omega.abs()
            }
        }
    }

    /// Axis-aligned box containing every position over `[0, duration]`.
    fn extent(&self, duration: f64) -> ([f64; 2], [f64; 2]) {
        match *self {
            Trajectory::Linear { .. } => {
                let a = self.position(0.0);
                let b = self.position(duration);
                ([a[0].min(b[0]), a[1].min(b[1])], [a[0].max(b[0]), a[1].max(b[1])])
            }
            Trajectory::Orbit { center, amplitude, .. } => {
                let (ax, ay) = (amplitude[0].abs(), amplitude[1].abs());
                ([center[0] - ax, center[1] - ay], [center[0] + ax, center[1] + ay])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Disk radius, or half side length for squares.
    pub radius: f64,
    pub intensity: f64,
    pub trajectory: Trajectory,
}

impl ShapeSpec {
    fn contains(&self, center: [f64; 2], px: f64, py: f64) -> bool {
        let (dx, dy) = (px - center[0], py - center[1]);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeKind::Square => dx.abs() <= self.radius && dy.abs() <= self.radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub duration_s: f64,
    pub fps_hi: u32,
    pub fps_rgb: u32,
    pub shapes: Vec<ShapeSpec>,
    pub background_intensity: f64,
}

/// Intensity image. Pixels are row-major, `channels` interleaved last.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    /// Microseconds.
    pub t: i64,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, t: i64) -> Self {
        assert_eq!(pixels.len(), height * width, "frame size");
        Frame {
            height,
            width,
            channels: 1,
            pixels,
            t,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32, t: i64) -> Self {
        Frame::new(height, width, vec![value; height * width], t)
    }

    /// Three-channel copy by channel replication.
    pub fn to_rgb(&self) -> Frame {
        assert_eq!(self.channels, 1, "already multi-channel");
        Frame {
            height: self.height,
            width: self.width,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
            t: self.t,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    /// One `[x, y]` per shape, in pixel coordinates.
    pub centroids: Vec<[f64; 2]>,
    /// Row-major foreground map (pixels covered at least half by any shape).
    pub mask: Vec<u8>,
    pub t: i64,
}

/// Per-pixel displacement in pixels between two instants.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        FlowField {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }
}

pub fn micros_to_seconds(t: i64) -> f64 {
    t as f64 / MICROS_PER_SECOND
}

impl SceneSpec {
    /// Number of high-rate frames, including both endpoints.
    pub fn hi_frame_count(&self) -> usize {
        (self.duration_s * self.fps_hi as f64).round() as usize + 1
    }

    /// High-rate frames per RGB frame.
    pub fn rgb_stride(&self) -> usize {
        (self.fps_hi / self.fps_rgb) as usize
    }

    pub fn rgb_frame_count(&self) -> usize {
        (self.hi_frame_count() - 1) / self.rgb_stride() + 1
    }

    /// Timestamp (µs) of high-rate frame `k`.
    pub fn hi_timestamp(&self, k: usize) -> i64 {
        (k as f64 * MICROS_PER_SECOND / self.fps_hi as f64).round() as i64
    }

    /// Timestamp (µs) of RGB frame `m`.
    pub fn rgb_timestamp(&self, m: usize) -> i64 {
        self.hi_timestamp(m * self.rgb_stride())
    }

    pub fn duration_us(&self) -> i64 {
        (self.duration_s * MICROS_PER_SECOND).round() as i64
    }

    /// Checks every invariant, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if self.height == 0 || self.width == 0 {
            return bad("resolution must be positive".into());
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad("resolution exceeds 16-bit event coordinates".into());
        }
        if self.fps_hi == 0 || self.fps_rgb == 0 {
            return bad("frame rates must be positive".into());
        }
        if !self.fps_hi.is_multiple_of(self.fps_rgb) {
            return bad(format!(
                "fps mismatch: fps_hi ({}) is not a multiple of fps_rgb ({})",
                self.fps_hi, self.fps_rgb
            ));
        }
        if !(self.duration_s > 0.0) {
            return bad("duration must be positive".into());
        }
        let frames = self.duration_s * self.fps_hi as f64;
        if (frames - frames.round()).abs() > 1e-9 {
            return bad("duration·fps_hi must be an integer".into());
        }
        let rgb_frames = self.duration_s * self.fps_rgb as f64;
        if (rgb_frames - rgb_frames.round()).abs() > 1e-9 {
            return bad("duration·fps_rgb must be an integer".into());
        }
        if !(self.background_intensity > 0.0 && self.background_intensity < 1.0) {
            return bad("background_intensity must lie in (0, 1)".into());
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !(s.radius > 0.0) {
                return bad(format!("shape {i}: radius must be positive"));
            }
            if !(s.intensity > 0.0 && s.intensity <= 1.0) {
                return bad(format!("shape {i}: intensity must lie in (0, 1]"));
            }
            if (s.intensity - self.background_intensity).abs() < 1e-9 {
                return bad(format!("shape {i}: intensity equals background_intensity"));
            }
            if !s.trajectory.max_speed().is_finite() {
                return bad(format!("shape {i}: unbounded speed"));
            }
            let (lo, hi) = s.trajectory.extent(self.duration_s);
            if lo[0] - s.radius < 0.0
                || lo[1] - s.radius < 0.0
                || hi[0] + s.radius > self.width as f64
                || hi[1] + s.radius > self.height as f64
            {
                return bad(format!("shape {i}: trajectory exits image bounds"));
            }
        }
        Ok(())
    }

    /// Per-shape supersampled coverage in [0, 1], row-major.
    fn coverage(&self, shape: &ShapeSpec, t_s: f64) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let c = shape.trajectory.position(t_s);
        let mut cov = vec![0.0f32; h * w];
        let x0 = ((c[0] - shape.radius).floor().max(0.0)) as usize;
        let x1 = ((c[0] + shape.radius).ceil().min(w as f64)) as usize;
        let y0 = ((c[1] - shape.radius).floor().max(0.0)) as usize;
        let y1 = ((c[1] + shape.radius).ceil().min(h as f64)) as usize;
        let ss = SUPERSAMPLE as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0u32;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / ss;
                        let py = y as f64 + (sy as f64 + 0.5) / ss;
                        if shape.contains(c, px, py) {
                            hits += 1;
                        }
                    }
                }
                cov[y * w + x] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            }
        }
        cov
    }

    /// Renders the scene at time `t` (µs); later shapes occlude earlier ones.
    pub fn render_at(&self, t: i64) -> Frame {
        let t_s = micros_to_seconds(t);
        let mut px = vec![self.background_intensity as f32; self.height * self.width];
        for shape in &self.shapes {
            let cov = self.coverage(shape, t_s);
            let val = shape.intensity as f32;
            for (p, c) in px.iter_mut().zip(&cov) {
                if *c > 0.0 {
                    *p = (*p * (1.0 - c) + val * c).clamp(0.0, 1.0);
                }
            }
        }
        Frame::new(self.height, self.width, px, t)
    }

    /// Analytic label at any time `t` (µs).
    pub fn label_at(&self, t: i64) -> Label {
        let t_s = micros_to_seconds(t);
        let mut mask = vec![0u8; self.height * self.width];
        let mut centroids = Vec::with_capacity(self.shapes.len());
        for shape in &self.shapes {
            centroids.push(shape.trajectory.position(t_s));
            for (m, c) in mask.iter_mut().zip(self.coverage(shape, t_s)) {
                if c >= 0.5 {
                    *m = 1;
                }
            }
        }
        Label { centroids, mask, t }
    }
}

/// Renders the high-rate sequence, its RGB-rate subsample and per-frame labels.
pub fn render_scene(spec: &SceneSpec) -> Result<(Vec<Frame>, Vec<Frame>, Vec<Label>)> {
    spec.validate()?;
    let n = spec.hi_frame_count();
    let stride = spec.rgb_stride();
    let mut hi = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let t = spec.hi_timestamp(k);
        hi.push(spec.render_at(t));
        labels.push(spec.label_at(t));
    }
    let rgb = hi.iter().step_by(stride).cloned().collect();
    Ok((hi, rgb, labels))
}

/// Displacement of every shape pixel from `t0` to `t1` (µs); zero on background.
pub fn ground_truth_flow(spec: &SceneSpec, t0: i64, t1: i64) -> Result<FlowField> {
    if t1 <= t0 {
        return Err(Error::InvalidArgument(format!("flow interval [{t0}, {t1}] is empty or inverted")));
    }
    if t0 < 0 || t1 > spec.duration_us() {
        return Err(Error::InvalidArgument(format!("flow interval [{t0}, {t1}] outside scene duration")));
    }
    let (s0, s1) = (micros_to_seconds(t0), micros_to_seconds(t1));
    let mut flow = FlowField::zeros(spec.height, spec.width);
    for shape in &spec.shapes {
        let a = shape.trajectory.position(s0);
        let b = shape.trajectory.position(s1);
        let (du, dv) = ((b[0] - a[0]) as f32, (b[1] - a[1]) as f32);
        for (i, c) in spec.coverage(shape, s0).into_iter().enumerate() {
            if c >= 0.5 {
                flow.u[i] = du;
                flow.v[i] = dv;
            }
        }
    }
    Ok(flow)
}

/// Flow for blurring the frame at `t1` over the exposure `[t0, t1]`: every
/// pixel touched by a shape during the interval carries that shape's
/// displacement from `t1` back to `t0`, so a backward warp by a fraction of
/// the field reproduces the frame at an earlier instant.
pub fn blur_flow(spec: &SceneSpec, t0: i64, t1: i64) -> Result<FlowField> {
    if t1 <= t0 {
        return Err(Error::InvalidArgument(format!("flow interval [{t0}, {t1}] is empty or inverted")));
    }
    if t0 < 0 || t1 > spec.duration_us() {
        return Err(Error::InvalidArgument(format!("flow interval [{t0}, {t1}] outside scene duration")));
    }
    const SWEEP_STEPS: usize = 16;
    let (s0, s1) = (micros_to_seconds(t0), micros_to_seconds(t1));
    let mut flow = FlowField::zeros(spec.height, spec.width);
    for shape in &spec.shapes {
        let a = shape.trajectory.position(s1);
        let b = shape.trajectory.position(s0);
        let (du, dv) = ((b[0] - a[0]) as f32, (b[1] - a[1]) as f32);
        for k in 0..=SWEEP_STEPS {
            let ts = s0 + (s1 - s0) * k as f64 / SWEEP_STEPS as f64;
            for (i, c) in spec.coverage(shape, ts).into_iter().enumerate() {
                if c > 0.0 {
                    flow.u[i] = du;
                    flow.v[i] = dv;
                }
            }
        }
    }
    Ok(flow)
}

/// Ranges used to draw random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub duration_s: f64,
    pub fps_hi: u32,
    pub fps_rgb: u32,
    pub n_shapes: usize,
    pub radius: [f64; 2],
    /// Linear-motion speed, px/s.
    pub speed: [f64; 2],
    /// Chance of an elliptic orbit instead of a straight line.
    pub orbit_probability: f64,
    /// Peak orbital speed, px/s.
    pub orbit_speed: [f64; 2],
    pub background: [f64; 2],
    /// Minimum |shape − background| intensity difference.
    pub min_contrast: f64,
    pub min_intensity: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        SceneSampler {
            height: 64,
            width: 64,
            duration_s: 1.0,
            fps_hi: 240,
            fps_rgb: 24,
            n_shapes: 1,
            radius: [5.0, 9.0],
            speed: [15.0, 40.0],
            orbit_probability: 0.5,
            orbit_speed: [60.0, 150.0],
            background: [0.2, 0.8],
            min_contrast: 0.25,
            min_intensity: 0.2,
        }
    }
}

impl SceneSampler {
    /// Draws a valid linear-motion scene; a pure function of `seed`.
    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = rng.gen_range(self.background[0]..=self.background[1]);
        let mut shapes = Vec::with_capacity(self.n_shapes);
        for _ in 0..self.n_shapes {
            let kind = if rng.gen_bool(0.5) { ShapeKind::Disk } else { ShapeKind::Square };
            let radius = rng.gen_range(self.radius[0]..=self.radius[1]);
            let intensity = loop {
                let v: f64 = rng.gen_range(self.min_intensity..=1.0);
                if (v - background).abs() >= self.min_contrast {
                    break v;
                }
            };
            let trajectory = self.sample_trajectory(radius, &mut rng)?;
            shapes.push(ShapeSpec {
                kind,
                radius,
                intensity,
                trajectory,
            });
        }
        let spec = SceneSpec {
            seed,
            height: self.height,
            width: self.width,
            duration_s: self.duration_s,
            fps_hi: self.fps_hi,
            fps_rgb: self.fps_rgb,
            shapes,
            background_intensity: background,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn sample_trajectory(&self, radius: f64, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        let margin = radius + 1.0;
        let span = [self.width as f64 - 2.0 * margin, self.height as f64 - 2.0 * margin];
        if rng.gen_bool(self.orbit_probability.clamp(0.0, 1.0)) {
            let max_amp = 0.5 * span[0].min(span[1]);
            if max_amp >= 2.0 {
                let amplitude = [rng.gen_range(0.5 * max_amp..=max_amp), rng.gen_range(0.5 * max_amp..=max_amp)];
                let speed = rng.gen_range(self.orbit_speed[0]..=self.orbit_speed[1]);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let omega = sign * speed / amplitude[0].max(amplitude[1]);
                let mut center = [0.0; 2];
                for a in 0..2 {
                    let lo = margin + amplitude[a];
                    let hi = margin + span[a] - amplitude[a];
                    center[a] = rng.gen_range(lo..=hi);
                }
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                return Ok(Trajectory::Orbit {
                    center,
                    amplitude,
                    omega,
                    phase,
                });
            }
        }
        for _ in 0..1000 {
            let speed = rng.gen_range(self.speed[0]..=self.speed[1]);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let v = [speed * angle.cos(), speed * angle.sin()];
            let travel = [v[0].abs() * self.duration_s, v[1].abs() * self.duration_s];
            if travel[0] > span[0] || travel[1] > span[1] {
                continue;
            }
            let mut start = [0.0; 2];
            for a in 0..2 {
                let lo = if v[a] >= 0.0 { margin } else { margin + travel[a] };
                let hi = lo + span[a] - travel[a];
                start[a] = rng.gen_range(lo..=hi);
            }
            return Ok(Trajectory::Linear { start, velocity: v });
        }
        Err(Error::InvalidScene(format!(
            "no in-bounds trajectory for radius {radius} at speeds {:?}",
            self.speed
        )))
    }
}
