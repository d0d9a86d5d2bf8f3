//! Event generation from intensity frames, brightness integration, slicing
//! and voxel encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::Frame;

/// Default contrast threshold in log-intensity units.
pub const DEFAULT_THRESHOLD: f64 = 0.2;
/// Default log floor: `log(I + eps)` keeps zero intensities finite.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Slack when comparing a log change against a multiple of the threshold, so
/// that a change of exactly `n·C` yields `n` events despite `f32` pixel rounding.
const LADDER_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: i64,
    /// −1 or +1.
    pub p: i8,
}

impl Event {
    fn sort_key(&self) -> (i64, u16, u16, i8) {
        (self.t, self.y, self.x, self.p)
    }
}

/// Time-ordered events over `[t_begin, t_end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub height: usize,
    pub width: usize,
    pub t_begin: i64,
    pub t_end: i64,
    pub threshold: f64,
    events: Vec<Event>,
}

impl EventStream {
    pub fn empty(height: usize, width: usize, t_begin: i64, t_end: i64, threshold: f64) -> Self {
        EventStream {
            height,
            width,
            t_begin,
            t_end,
            threshold,
            events: Vec::new(),
        }
    }

    /// Builds a stream, sorting events by `(t, y, x, p)` and validating ranges.
    pub fn new(
        height: usize,
        width: usize,
        t_begin: i64,
        t_end: i64,
        threshold: f64,
        mut events: Vec<Event>,
    ) -> Result<Self> {
        if t_end <= t_begin {
            return Err(Error::InvalidArgument(format!("stream interval [{t_begin}, {t_end}) is empty")));
        }
        for e in &events {
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::InvalidArgument(format!("event at ({}, {}) outside {width}×{height}", e.x, e.y)));
            }
            if e.t < t_begin || e.t >= t_end {
                return Err(Error::InvalidArgument(format!("event time {} outside [{t_begin}, {t_end})", e.t)));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::InvalidArgument(format!("polarity {} is not ±1", e.p)));
            }
        }
        events.sort_by_key(Event::sort_key);
        Ok(EventStream {
            height,
            width,
            t_begin,
            t_end,
            threshold,
            events,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.p as i64).sum()
    }

    /// Signed event count per pixel, row-major.
    pub fn signed_counts(&self) -> Vec<i32> {
        let mut c = vec![0i32; self.height * self.width];
        for e in &self.events {
            c[e.y as usize * self.width + e.x as usize] += e.p as i32;
        }
        c
    }

    fn check_window(&self, t0: i64, t1: i64) -> Result<()> {
        if t1 <= t0 {
            return Err(Error::InvalidArgument(format!("window [{t0}, {t1}) is empty or inverted")));
        }
        if t0 < self.t_begin || t1 > self.t_end {
            return Err(Error::InvalidArgument(format!(
                "window [{t0}, {t1}) outside stream [{}, {})",
                self.t_begin, self.t_end
            )));
        }
        Ok(())
    }

    fn range(&self, t0: i64, t1: i64) -> &[Event] {
        let a = self.events.partition_point(|e| e.t < t0);
        let b = self.events.partition_point(|e| e.t < t1);
        &self.events[a..b]
    }
}

/// Emits events wherever the interpolated log intensity climbs or falls one
/// threshold from the pixel's reference level.
///
/// The reference moves by exactly `±C` per event, so residuals below the
/// threshold carry over to later frames.
pub fn generate_events(frames: &[Frame], threshold: f64, eps: f64) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("event generation needs at least two frames".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {threshold}")));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("log floor must be positive, got {eps}")));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    for (k, f) in frames.iter().enumerate() {
        if f.height != h || f.width != w || f.channels != 1 {
            return Err(Error::ShapeMismatch(format!("frame {k} is not {w}×{h} single-channel")));
        }
        if k > 0 && f.t <= frames[k - 1].t {
            return Err(Error::NonMonotone(format!("frame {k} at {} follows {}", f.t, frames[k - 1].t)));
        }
    }
    let logs: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.pixels.iter().map(|&v| (v as f64 + eps).ln()).collect())
        .collect();
    let mut events = Vec::new();
    for idx in 0..h * w {
        let (x, y) = ((idx % w) as u16, (idx / w) as u16);
        let mut reference = logs[0][idx];
        for k in 0..frames.len() - 1 {
            let (l0, l1) = (logs[k][idx], logs[k + 1][idx]);
            let (ta, tb) = (frames[k].t, frames[k + 1].t);
            let span = (tb - ta) as f64;
            let slope = l1 - l0;
            loop {
                let p: i8 = if l1 - reference >= threshold - LADDER_TOL {
                    1
                } else if reference - l1 >= threshold - LADDER_TOL {
                    -1
                } else {
                    break;
                };
                let target = reference + p as f64 * threshold;
                let tau = if slope == 0.0 { 1.0 } else { ((target - l0) / slope).clamp(0.0, 1.0) };
                let t = ta + (tau * span).floor() as i64;
                events.push(Event { x, y, t: t.min(tb), p });
                reference = target;
            }
        }
    }
    let last = frames.last().expect("non-empty").t;
    EventStream::new(h, w, frames[0].t, last + 1, threshold, events)
}

/// Predicts intensity after `stream` from `image`: `(I + eps)·exp(n·C) − eps`,
/// `n` the signed per-pixel count, clipped to [0, 1].
pub fn integrate_events(image: &Frame, stream: &EventStream, threshold: f64, eps: f64) -> Result<Frame> {
    if image.height != stream.height || image.width != stream.width || image.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "image {}×{} vs stream {}×{}",
            image.width, image.height, stream.width, stream.height
        )));
    }
    if stream.t_begin < image.t {
        return Err(Error::InvalidArgument(format!(
            "stream begins at {} before image time {}",
            stream.t_begin, image.t
        )));
    }
    let counts = stream.signed_counts();
    let pixels = image
        .pixels
        .iter()
        .zip(&counts)
        .map(|(&v, &n)| ((v as f64 + eps) * (n as f64 * threshold).exp() - eps).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Frame::new(image.height, image.width, pixels, stream.t_end))
}

/// Events with `t0 ≤ t < t1`, order preserved.
pub fn slice(stream: &EventStream, t0: i64, t1: i64) -> Result<EventStream> {
    stream.check_window(t0, t1)?;
    Ok(EventStream {
        height: stream.height,
        width: stream.width,
        t_begin: t0,
        t_end: t1,
        threshold: stream.threshold,
        events: stream.range(t0, t1).to_vec(),
    })
}

/// `k` contiguous equal-duration slices of `[t0, t1)`; the last one absorbs
/// the integer-microsecond remainder.
pub fn split_equal(stream: &EventStream, t0: i64, t1: i64, k: usize) -> Result<Vec<EventStream>> {
    if k == 0 {
        return Err(Error::InvalidArgument("slice count must be at least 1".into()));
    }
    stream.check_window(t0, t1)?;
    let step = (t1 - t0) / k as i64;
    if step == 0 {
        return Err(Error::InvalidArgument(format!("window of {} µs cannot hold {k} slices", t1 - t0)));
    }
    (0..k)
        .map(|j| {
            let a = t0 + j as i64 * step;
            let b = if j + 1 == k { t1 } else { a + step };
            slice(stream, a, b)
        })
        .collect()
}

/// `bins×H×W` temporal voxel encoding of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub t_begin: i64,
    pub t_end: i64,
    pub data: Vec<f32>,
}

impl VoxelGrid {
    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Deposits each event's polarity on the two nearest temporal bin centres
/// with linear weights; all mass goes to bin 0 when `bins == 1`.
pub fn voxelize(stream: &EventStream, t0: i64, t1: i64, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::InvalidArgument("voxel grid needs at least one bin".into()));
    }
    if t1 <= t0 {
        return Err(Error::InvalidArgument(format!("window [{t0}, {t1}) is empty or inverted")));
    }
    let (h, w) = (stream.height, stream.width);
    let plane = h * w;
    let mut data = vec![0.0f32; bins * plane];
    let span = (t1 - t0) as f64;
    for e in stream.range(t0, t1) {
        let pix = e.y as usize * w + e.x as usize;
        let p = e.p as f64;
        if bins == 1 {
            data[pix] += p as f32;
            continue;
        }
        let tn = (e.t - t0) as f64 / span * (bins - 1) as f64;
        let lower = (tn.floor() as usize).min(bins - 1);
        let frac = tn - lower as f64;
        data[lower * plane + pix] += (p * (1.0 - frac)) as f32;
        if frac > 0.0 && lower + 1 < bins {
            data[(lower + 1) * plane + pix] += (p * frac) as f32;
        }
    }
    Ok(VoxelGrid {
        bins,
        height: h,
        width: w,
        t_begin: t0,
        t_end: t1,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames_from(values: &[f32]) -> Vec<Frame> {
        values
            .iter()
            .enumerate()
            .map(|(k, &v)| Frame::new(1, 1, vec![v], k as i64 * 1000))
            .collect()
    }

    /// Walks the threshold ladder one scalar sample at a time.
    fn ladder_oracle(values: &[f64], c: f64, eps: f64) -> Vec<i8> {
        let mut out = Vec::new();
        let mut r = (values[0] + eps).ln();
        for v in &values[1..] {
            let l = (v + eps).ln();
            while l - r >= c - 1e-6 {
                r += c;
                out.push(1);
            }
            while r - l >= c - 1e-6 {
                r -= c;
                out.push(-1);
            }
        }
        out
    }

    #[test]
    fn constant_sequence_is_silent() {
        let s = generate_events(&frames_from(&[0.4; 5]), 0.2, 1e-3).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn two_threshold_step_gives_two_events_then_two_back() {
        let (c, eps) = (0.2f64, 1e-3f64);
        let i0 = 0.3f64;
        let i1 = (i0 + eps) * (2.0 * c).exp() - eps;
        let vals = [i0, i1, i0].map(|v| v as f32 as f64);
        let oracle = ladder_oracle(&vals, c, eps);
        assert_eq!(oracle, vec![1, 1, -1, -1]);
        let frames = frames_from(&vals.map(|v| v as f32));
        let up = generate_events(&frames[..2], c, eps).unwrap();
        assert_eq!(up.events().iter().map(|e| e.p).collect::<Vec<_>>(), vec![1, 1]);
        let both = generate_events(&frames, c, eps).unwrap();
        assert_eq!(both.events().iter().map(|e| e.p).collect::<Vec<_>>(), oracle);
        assert_eq!(both.polarity_sum(), 0);
        // interpolated times: crossings at 1/2 and 2/2 of the rising interval
        assert!((499..=500).contains(&both.events()[0].t));
        assert!(both.events()[1].t >= 999 && both.events()[1].t <= 1000);
    }

    #[test]
    fn generation_rejects_bad_input() {
        let f = frames_from(&[0.1, 0.2]);
        assert!(generate_events(&f, 0.0, 1e-3).is_err());
        assert!(generate_events(&f[..1], 0.2, 1e-3).is_err());
        let mut g = f.clone();
        g[1].t = 0;
        assert!(matches!(generate_events(&g, 0.2, 1e-3), Err(Error::NonMonotone(_))));
    }

    #[test]
    fn integrate_is_local_and_identity_on_empty() {
        let img = Frame::new(2, 2, vec![0.1, 0.2, 0.3, 0.4], 0);
        let empty = EventStream::empty(2, 2, 0, 10, 0.2);
        let out = integrate_events(&img, &empty, 0.2, 1e-3).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.t, 10);
        let one = EventStream::new(2, 2, 0, 10, 0.2, vec![Event { x: 1, y: 0, t: 3, p: 1 }]).unwrap();
        let out = integrate_events(&img, &one, 0.2, 1e-3).unwrap();
        let want = ((0.2f32 as f64 + 1e-3) * 0.2f64.exp() - 1e-3) as f32;
        assert_eq!(out.pixels, vec![0.1, want, 0.3, 0.4]);
        let late = Frame::new(2, 2, vec![0.0; 4], 5);
        assert!(integrate_events(&late, &one, 0.2, 1e-3).is_err());
        let small = Frame::new(1, 1, vec![0.0], 0);
        assert!(integrate_events(&small, &one, 0.2, 1e-3).is_err());
    }

    fn sample_stream() -> EventStream {
        let ev = (0..40)
            .map(|i| Event {
                x: (i % 4) as u16,
                y: (i % 3) as u16,
                t: (i * 25) as i64,
                p: if i % 3 == 0 { -1 } else { 1 },
            })
            .collect();
        EventStream::new(3, 4, 0, 1000, 0.2, ev).unwrap()
    }

    #[test]
    fn slicing_partitions_the_stream() {
        let s = sample_stream();
        assert_eq!(slice(&s, 0, 1000).unwrap(), s);
        let a = slice(&s, 0, 400).unwrap();
        let b = slice(&s, 400, 1000).unwrap();
        let joined: Vec<Event> = a.events().iter().chain(b.events()).copied().collect();
        assert_eq!(joined, s.events());
        assert!(slice(&s, 500, 500).is_err());
        assert!(slice(&s, 600, 500).is_err());
        let e = EventStream::empty(3, 4, 0, 100, 0.2);
        assert!(slice(&e, 10, 20).unwrap().is_empty());
    }

    #[test]
    fn split_equal_boundaries_and_half_open_convention() {
        let s = EventStream::new(1, 1, 0, 1_000_000, 0.2, vec![Event { x: 0, y: 0, t: 500_000, p: 1 }]).unwrap();
        let parts = split_equal(&s, 0, 1_000_000, 2).unwrap();
        assert_eq!((parts[0].t_begin, parts[0].t_end), (0, 500_000));
        assert_eq!((parts[1].t_begin, parts[1].t_end), (500_000, 1_000_000));
        assert!(parts[0].is_empty());
        assert_eq!(parts[1].len(), 1);
        assert_eq!(split_equal(&s, 0, 1_000_000, 1).unwrap(), vec![s.clone()]);
        assert!(split_equal(&s, 0, 1_000_000, 0).is_err());
        let odd = split_equal(&s, 0, 10, 3).unwrap();
        assert_eq!(odd.iter().map(|p| p.t_end - p.t_begin).collect::<Vec<_>>(), vec![3, 3, 4]);
    }

    #[test]
    fn voxel_degenerate_cases() {
        let e = EventStream::empty(2, 2, 0, 100, 0.2);
        assert!(voxelize(&e, 0, 100, 5).unwrap().is_zero());
        // t = 50 in [0, 100) with 5 bins is centre 2
        let s = EventStream::new(2, 2, 0, 100, 0.2, vec![Event { x: 1, y: 1, t: 50, p: 1 }]).unwrap();
        let v = voxelize(&s, 0, 100, 5).unwrap();
        let hot: Vec<(usize, f32)> = v.data.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect();
        assert_eq!(hot, vec![(2 * 4 + 3, 1.0)]);
        assert!(voxelize(&s, 0, 100, 0).is_err());
        assert!(voxelize(&s, 100, 100, 3).is_err());
        let one = voxelize(&s, 0, 100, 1).unwrap();
        assert_eq!(one.data[3], 1.0);
    }

    #[test]
    fn bilinear_split_between_bins() {
        let s = EventStream::new(1, 1, 0, 100, 0.2, vec![Event { x: 0, y: 0, t: 10, p: -1 }]).unwrap();
        let v = voxelize(&s, 0, 100, 3).unwrap();
        // t* = 0.2
        assert!((v.data[0] + 0.8).abs() < 1e-6);
        assert!((v.data[1] + 0.2).abs() < 1e-6);
        assert_eq!(v.data[2], 0.0);
    }
}
