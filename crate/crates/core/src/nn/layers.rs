use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, join, Params, Real, Tensor, View};

/// Affine map `y = x W + b` applied row-wise, `W: in×out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        Self::with_std(inputs, outputs, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: Tensor::randn(&[inputs, outputs], std, rng),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape[1]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.inputs(), self.outputs());
        debug_assert_eq!(x.len(), rows * i);
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.data);
        }
        gemm(rows, i, o, x, View::row_major(i), &self.w.data, View::row_major(o), T::one(), &mut y, View::row_major(o));
        y
    }

    /// Returns `dL/dx`; parameter gradients are accumulated when `grads` is given.
    pub fn backward(&self, x: &[T], rows: usize, dy: &[T], grads: Option<&mut Linear<T>>) -> Vec<T> {
        let (i, o) = (self.inputs(), self.outputs());
        if let Some(g) = grads {
            gemm(i, rows, o, x, View::transposed(i), dy, View::row_major(o), T::one(), &mut g.w.data, View::row_major(o));
            for r in 0..rows {
                for (gb, d) in g.b.data.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                    *gb += *d;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * i];
        gemm(rows, o, i, dy, View::row_major(o), &self.w.data, View::transposed(o), T::zero(), &mut dx, View::row_major(i));
        dx
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Normalisation over the last dimension with learned gain and bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[dim], T::one()),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.gamma.len();
        let dn = T::of(d as f64);
        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * self.gamma.data[c] + self.beta.data[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &[T], grads: Option<&mut LayerNorm<T>>) -> Vec<T> {
        let d = self.gamma.len();
        let rows = cache.rstd.len();
        if let Some(g) = grads {
            for r in 0..rows {
                for c in 0..d {
                    g.gamma.data[c] += dy[r * d + c] * cache.xhat[r * d + c];
                    g.beta.data[c] += dy[r * d + c];
                }
            }
        }
        let dn = T::of(d as f64);
        let mut dx = vec![T::zero(); rows * d];
        for r in 0..rows {
            let mut sum_dh = T::zero();
            let mut sum_dh_h = T::zero();
            for c in 0..d {
                let dh = dy[r * d + c] * self.gamma.data[c];
                sum_dh += dh;
                sum_dh_h += dh * cache.xhat[r * d + c];
            }
            for c in 0..d {
                let dh = dy[r * d + c] * self.gamma.data[c];
                let h = cache.xhat[r * d + c];
                dx[r * d + c] = cache.rstd[r] / dn * (dn * dh - sum_dh - h * sum_dh_h);
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Derivative of SiLU evaluated at the pre-activation.
pub fn silu_backward<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_backward<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

/// 3×3 convolution with zero padding 1 over a `C×H×W` input.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d<T> {
    /// `out × (in·9)`
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
}

pub struct Conv2dCache<T> {
    cols: Vec<T>,
    in_h: usize,
    in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = inputs * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            w: Tensor::randn(&[outputs, fan_in], std, rng),
            b: Tensor::zeros(&[outputs]),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape[1] / 9
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape[0]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / self.stride + 1, (w + 2 - 3) / self.stride + 1)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let cin = self.in_channels();
        let (oh, ow) = self.out_size(h, w);
        let s = self.stride;
        let n = oh * ow;
        let mut cols = vec![T::zero(); cin * 9 * n];
        for c in 0..cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(c * 9 + ky * 3 + kx) * n..(c * 9 + ky * 3 + kx + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                row[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, Conv2dCache<T>) {
        let cin = self.in_channels();
        assert_eq!(x.len(), cin * h * w, "conv input size");
        let (cols, oh, ow) = self.im2col(x, h, w);
        let n = oh * ow;
        let cout = self.out_channels();
        let mut y = Vec::with_capacity(cout * n);
        for o in 0..cout {
            y.extend(std::iter::repeat_n(self.b.data[o], n));
        }
        let k = cin * 9;
        gemm(cout, k, n, &self.w.data, View::row_major(k), &cols, View::row_major(n), T::one(), &mut y, View::row_major(n));
        (y, Conv2dCache { cols, in_h: h, in_w: w, out_h: oh, out_w: ow })
    }

    pub fn backward(&self, cache: &Conv2dCache<T>, dy: &[T], grads: Option<&mut Conv2d<T>>, need_dx: bool) -> Option<Vec<T>> {
        let cin = self.in_channels();
        let cout = self.out_channels();
        let n = cache.out_h * cache.out_w;
        let k = cin * 9;
        if let Some(g) = grads {
            gemm(cout, n, k, dy, View::row_major(n), &cache.cols, View::transposed(n), T::one(), &mut g.w.data, View::row_major(k));
            for o in 0..cout {
                g.b.data[o] += dy[o * n..(o + 1) * n].iter().copied().sum::<T>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); k * n];
        gemm(k, cout, n, &self.w.data, View::transposed(k), dy, View::row_major(n), T::zero(), &mut dcols, View::row_major(n));
        let (h, w) = (cache.in_h, cache.in_w);
        let s = self.stride;
        let mut dx = vec![T::zero(); cin * h * w];
        for c in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcols[(c * 9 + ky * 3 + kx) * n..(c * 9 + ky * 3 + kx + 1) * n];
                    for oy in 0..cache.out_h {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..cache.out_w {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dx[c * h * w + iy as usize * w + ix as usize] += row[oy * cache.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Visits a child's parameters under `prefix`.
pub(crate) fn visit_child<'a, T: Real, P: Params<T>>(
    prefix: &str,
    child: &'a P,
    f: &mut dyn FnMut(&str, &'a Tensor<T>),
) {
    child.visit(&mut |name, t| f(&join(prefix, name), t));
}

pub(crate) fn visit_child_mut<T: Real, P: Params<T>>(
    prefix: &str,
    child: &mut P,
    f: &mut dyn FnMut(&str, &mut Tensor<T>),
) {
    child.visit_mut(&mut |name, t| f(&join(prefix, name), t));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv: Conv2d<f64> = Conv2d::new(2, 3, 2, &mut rng);
        let (h, w) = (5, 6);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let (y, cache) = conv.forward(&x, h, w);
        let (oh, ow) = (cache.out_h, cache.out_w);
        assert_eq!((oh, ow), (3, 3));
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.b.data[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.w.data[o * 18 + c * 9 + ky * 3 + kx]
                                        * x[c * h * w + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y[o * oh * ow + oy * ow + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn activations_are_smooth_and_match_references() {
        assert!((silu(0.0f64)).abs() < 1e-15);
        assert!((gelu(0.0f64)).abs() < 1e-15);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-9);
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_backward(x)).abs() < 1e-8);
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_backward(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let ln: LayerNorm<f64> = LayerNorm::new(4);
        let (y, _) = ln.forward(&[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, 1.0], 2);
        for r in 0..2 {
            let row = &y[r * 4..r * 4 + 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
