//! Photometric and motion-blur corruption of anchor images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{FlowField, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    None,
    Exposure,
    Blur,
}

/// One concrete degradation draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub mode: DegradeMode,
    pub alpha: f64,
    pub beta: f64,
    pub n_interp: usize,
    /// Blur mode only; not serialised.
    #[serde(skip)]
    pub flow: Option<FlowField>,
}

impl DegradeSpec {
    pub fn none() -> Self {
        DegradeSpec {
            mode: DegradeMode::None,
            alpha: 1.0,
            beta: 0.0,
            n_interp: 1,
            flow: None,
        }
    }

    pub fn exposure(alpha: f64, beta: f64) -> Self {
        DegradeSpec {
            mode: DegradeMode::Exposure,
            alpha,
            beta,
            ..DegradeSpec::none()
        }
    }

    pub fn blur(flow: FlowField, n_interp: usize) -> Self {
        DegradeSpec {
            mode: DegradeMode::Blur,
            n_interp,
            flow: Some(flow),
            ..DegradeSpec::none()
        }
    }

    pub fn apply(&self, image: &Frame) -> Result<Frame> {
        match self.mode {
            DegradeMode::None => Ok(image.clone()),
            DegradeMode::Exposure => degrade_exposure(image, self.alpha, self.beta),
            DegradeMode::Blur => {
                let flow = self
                    .flow
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("blur degradation without a flow field".into()))?;
                degrade_blur(image, flow, self.n_interp)
            }
        }
    }
}

/// `clip(alpha·I + beta, 0, 1)`.
pub fn degrade_exposure(image: &Frame, alpha: f64, beta: f64) -> Result<Frame> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("contrast gain must be positive, got {alpha}")));
    }
    let mut out = image.clone();
    for p in &mut out.pixels {
        *p = (alpha * *p as f64 + beta).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Bilinear sample with border replication at continuous pixel index `(x, y)`.
fn sample(image: &Frame, x: f64, y: f64) -> f64 {
    let (w, h) = (image.width, image.height);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let px = |x: usize, y: usize| image.pixels[y * w + x] as f64;
    let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
    let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Moves image content along `scale·flow`: `out(p) = I(p − scale·flow(p))`.
pub fn warp(image: &Frame, flow: &FlowField, scale: f64) -> Frame {
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 - scale * flow.u[i] as f64;
            let sy = y as f64 - scale * flow.v[i] as f64;
            out.pixels[i] = sample(image, sx, sy) as f32;
        }
    }
    out
}

/// Mean of `n_interp + 1` warps at fractions `k / n_interp` of the flow.
pub fn degrade_blur(image: &Frame, flow: &FlowField, n_interp: usize) -> Result<Frame> {
    if n_interp == 0 {
        return Err(Error::InvalidArgument("n_interp must be at least 1".into()));
    }
    if flow.height != image.height || flow.width != image.width || image.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "flow {}×{} vs image {}×{}",
            flow.width, flow.height, image.width, image.height
        )));
    }
    let mut acc = vec![0.0f64; image.pixels.len()];
    for k in 0..=n_interp {
        let warped = warp(image, flow, k as f64 / n_interp as f64);
        for (a, v) in acc.iter_mut().zip(&warped.pixels) {
            *a += *v as f64;
        }
    }
    let mut out = image.clone();
    let n = (n_interp + 1) as f64;
    for (p, a) in out.pixels.iter_mut().zip(acc) {
        *p = (a / n) as f32;
    }
    Ok(out)
}

/// Training-time degradation distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeSchedule {
    /// Probability of leaving the anchor untouched.
    pub p_none: f64,
    /// Contrast gain range, sampled log-uniformly.
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub n_interp: usize,
}

impl Default for DegradeSchedule {
    fn default() -> Self {
        DegradeSchedule {
            p_none: 0.5,
            alpha: [0.1, 6.0],
            beta: [-0.3, 0.5],
            n_interp: 8,
        }
    }
}

impl DegradeSchedule {
    /// Never degrades; used for the no-degradation ablation.
    pub fn disabled() -> Self {
        DegradeSchedule {
            p_none: 1.0,
            ..Default::default()
        }
    }

    /// Draws a spec; `flow` supplies the blur field lazily.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, flow: impl FnOnce() -> Result<FlowField>) -> Result<DegradeSpec> {
        if rng.gen_bool(self.p_none.clamp(0.0, 1.0)) {
            return Ok(DegradeSpec::none());
        }
        if rng.gen_bool(0.5) {
            let la = rng.gen_range(self.alpha[0].ln()..=self.alpha[1].ln());
            let beta = rng.gen_range(self.beta[0]..=self.beta[1]);
            Ok(DegradeSpec::exposure(la.exp(), beta))
        } else {
            Ok(DegradeSpec::blur(flow()?, self.n_interp))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> Frame {
        Frame::new(8, 8, (0..64).map(|i| (i % 8) as f32 / 8.0 + (i / 8) as f32 / 64.0).collect(), 42)
    }

    #[test]
    fn exposure_cases() {
        let img = ramp();
        assert_eq!(degrade_exposure(&img, 1.0, 0.0).unwrap(), img);
        let gray = Frame::filled(4, 4, 0.5, 0);
        assert!(degrade_exposure(&gray, 4.0, 0.5).unwrap().pixels.iter().all(|v| *v == 1.0));
        let dark = degrade_exposure(&img, 0.1, 0.0).unwrap();
        for (a, b) in dark.pixels.iter().zip(&img.pixels) {
            assert!((*a as f64 - 0.1 * *b as f64).abs() < 1e-7);
        }
        assert_eq!(dark.t, 42);
        assert!(degrade_exposure(&img, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_flow_blur_is_identity() {
        let img = ramp();
        for n in [1, 3, 8] {
            assert_eq!(degrade_blur(&img, &FlowField::zeros(8, 8), n).unwrap(), img);
        }
    }

    #[test]
    fn integer_shift_blur_matches_array_shift() {
        let img = ramp();
        let out = degrade_blur(&img, &FlowField::constant(8, 8, 2.0, 0.0), 1).unwrap();
        for y in 0..8 {
            for x in 0..8usize {
                let shifted = img.at(x.saturating_sub(2), y);
                let want = 0.5 * (img.at(x, y) + shifted);
                assert!((out.at(x, y) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_preserves_mean_for_interior_shape() {
        let mut img = Frame::filled(32, 32, 0.2, 0);
        for y in 12..18 {
            for x in 10..16 {
                img.pixels[y * 32 + x] = 0.9;
            }
        }
        let flow = FlowField::constant(32, 32, 3.0, 1.5);
        let out = degrade_blur(&img, &flow, 8).unwrap();
        assert!((out.mean() - img.mean()).abs() / img.mean() < 0.01);
    }

    #[test]
    fn scene_blur_matches_exposure_average() {
        use crate::scenegen::{blur_flow, SceneSampler};
        let sampler = SceneSampler { orbit_probability: 1.0, ..Default::default() };
        let spec = sampler.sample(7).unwrap();
        let (t0, t1) = (spec.rgb_timestamp(3), spec.rgb_timestamp(4));
        let blurred = degrade_blur(&spec.render_at(t1), &blur_flow(&spec, t0, t1).unwrap(), 8).unwrap();
        let mut exposure = vec![0.0f64; 64 * 64];
        for k in 0..=8 {
            let f = spec.render_at(t1 - (t1 - t0) * k / 8);
            for (e, p) in exposure.iter_mut().zip(&f.pixels) {
                *e += *p as f64 / 9.0;
            }
        }
        let mad = blurred.pixels.iter().zip(&exposure).map(|(a, b)| (*a as f64 - b).abs()).sum::<f64>() / 4096.0;
        let sharp = spec.render_at(t1).pixels.iter().zip(&exposure).map(|(a, b)| (*a as f64 - b).abs()).sum::<f64>() / 4096.0;
        assert!(mad < 0.5 * sharp, "blur error {mad} vs sharp {sharp}");
    }

    #[test]
    fn blur_rejects_mismatch() {
        assert!(degrade_blur(&ramp(), &FlowField::zeros(4, 8), 2).is_err());
        assert!(degrade_blur(&ramp(), &FlowField::zeros(8, 8), 0).is_err());
    }

    proptest! {
        #[test]
        fn exposure_is_monotone(a in 0.0f32..1.0, b in 0.0f32..1.0, alpha in 0.05f64..8.0, beta in -0.5f64..0.5) {
            let f = Frame::new(1, 2, vec![a.min(b), a.max(b)], 0);
            let o = degrade_exposure(&f, alpha, beta).unwrap();
            prop_assert!(o.pixels[0] <= o.pixels[1]);
        }

        #[test]
        fn blur_stays_within_input_range(u in -4.0f32..4.0, v in -4.0f32..4.0, n in 1usize..6) {
            let img = ramp();
            let (lo, hi) = img.pixels.iter().fold((f32::MAX, f32::MIN), |(l, h), p| (l.min(*p), h.max(*p)));
            let o = degrade_blur(&img, &FlowField::constant(8, 8, u, v), n).unwrap();
            prop_assert!(o.pixels.iter().all(|p| *p >= lo - 1e-6 && *p <= hi + 1e-6));
        }
    }
}
