//! Minimal dense tensor machinery with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same layer code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod attention;
mod layers;
mod optim;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use layers::{
    gelu, gelu_backward, silu, silu_backward, Conv2d, Conv2dCache, LayerNorm, LayerNormCache,
    Linear,
};
pub use optim::Adam;
pub(crate) use layers::{visit_child, visit_child_mut};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floating-point element type for all network code.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Strided `C = alpha * A B + beta * C` with `A: m×k`, `B: k×n`.
    ///
    /// # Safety
    /// Pointers and strides must address valid, non-aliasing memory for the
    /// given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row/column strides of a matrix view over a slice.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub const fn row_major(cols: usize) -> Self {
        View { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows×cols` buffer.
    pub const fn transposed(cols: usize) -> Self {
        View { rs: 1, cs: cols }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// Checked strided matrix product `C = A B + beta C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    assert!(a.len() >= va.extent(m, k), "gemm: A too short");
    assert!(b.len() >= vb.extent(k, n), "gemm: B too short");
    assert!(c.len() >= vc.extent(m, n), "gemm: C too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents checked above; `c` is a unique borrow so it cannot
    // alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr(),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr(),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Normal(0, std²) initialisation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(std * standard_normal(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

/// Box-Muller standard normal sample.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Anything owning trainable tensors, visited in a fixed, stable order.
pub trait Params<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn zero_params(&mut self) {
        self.visit_mut(&mut |_, t| t.fill_zero());
    }

    /// Named shapes in visiting order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.shape.clone())));
        out
    }

    /// Flattened copy of every parameter.
    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, t| out.extend_from_slice(&t.data));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Zeroed copy of a parameter container, used as a gradient accumulator.
pub fn zeros_like<T: Real, P: Params<T> + Clone>(p: &P) -> P {
    let mut g = p.clone();
    g.zero_params();
    g
}

/// `dst += scale * src`, parameter-wise; both must share structure.
pub fn axpy_params<T: Real, P: Params<T>>(dst: &mut P, src: &P, scale: T) {
    let mut flat = Vec::with_capacity(src.param_count());
    src.visit(&mut |_, t| flat.push(t.data.clone()));
    let mut it = flat.into_iter();
    dst.visit_mut(&mut |_, t| {
        let s = it.next().expect("parameter structure mismatch");
        assert_eq!(s.len(), t.data.len(), "parameter structure mismatch");
        for (d, v) in t.data.iter_mut().zip(s) {
            *d += scale * v;
        }
    });
}

/// Prefix helper for nested `visit` implementations.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Row-major `rows×cols` transpose.
pub fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, View::row_major(3), &b, View::row_major(4), 0.0, &mut c, View::row_major(4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|l| a[i * 3 + l] * b[l * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // Aᵀ stored as 3×2
        let at = transpose(&a, 2, 3);
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, View::transposed(2), &b, View::row_major(4), 0.0, &mut c2, View::row_major(4));
        assert_eq!(c, c2);
    }

    #[test]
    fn transpose_round_trips() {
        let v: Vec<i32> = (0..12).collect();
        assert_eq!(transpose(&transpose(&v, 3, 4), 4, 3), v);
    }
}
