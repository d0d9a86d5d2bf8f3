use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{visit_child, visit_child_mut};
use super::{gemm, Linear, Params, Real, Tensor, View};

/// Scaled dot-product attention with `n_heads` heads over `dim`-wide tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub n_heads: usize,
}

pub struct AttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per-head attention weights, `n_heads × nq × nk`.
    probs: Vec<T>,
    ctx: Vec<T>,
    nq: usize,
    nk: usize,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_heads: usize, out_std: f64, rng: &mut R) -> Self {
        assert!(n_heads > 0 && dim.is_multiple_of(n_heads), "dim must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::with_std(dim, dim, out_std, rng),
            n_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.inputs()
    }

    /// `q_in: nq×D` queries; `k_in`/`v_in: nk×D` keys and values.
    pub fn forward(&self, q_in: &[T], k_in: &[T], v_in: &[T], nq: usize, nk: usize) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim();
        let h = self.n_heads;
        let dh = d / h;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = self.wq.forward(q_in, nq);
        let k = self.wk.forward(k_in, nk);
        let v = self.wv.forward(v_in, nk);
        let mut probs = vec![T::zero(); h * nq * nk];
        let mut ctx = vec![T::zero(); nq * d];
        for head in 0..h {
            let p = &mut probs[head * nq * nk..(head + 1) * nq * nk];
            let off = head * dh;
            gemm(nq, dh, nk, &q[off..], View::row_major(d), &k[off..], View::transposed(d), T::zero(), p, View::row_major(nk));
            for row in p.chunks_mut(nk) {
                let mut max = T::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            gemm(nq, nk, dh, p, View::row_major(nk), &v[off..], View::row_major(d), T::zero(), &mut ctx[off..], View::row_major(d));
        }
        let out = self.wo.forward(&ctx, nq);
        (out, AttentionCache { q, k, v, probs, ctx, nq, nk })
    }

    /// Returns `(d q_in, d k_in, d v_in)`.
    pub fn backward(
        &self,
        q_in: &[T],
        k_in: &[T],
        v_in: &[T],
        cache: &AttentionCache<T>,
        dout: &[T],
        mut grads: Option<&mut MultiHeadAttention<T>>,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.dim();
        let h = self.n_heads;
        let dh = d / h;
        let (nq, nk) = (cache.nq, cache.nk);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dctx = self.wo.backward(&cache.ctx, nq, dout, grads.as_deref_mut().map(|g| &mut g.wo));
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); nq * nk];
        for head in 0..h {
            let p = &cache.probs[head * nq * nk..(head + 1) * nq * nk];
            let off = head * dh;
            gemm(nq, dh, nk, &dctx[off..], View::row_major(d), &cache.v[off..], View::transposed(d), T::zero(), &mut dp, View::row_major(nk));
            gemm(nk, nq, dh, p, View::transposed(nk), &dctx[off..], View::row_major(d), T::one(), &mut dv[off..], View::row_major(d));
            // softmax backward, folded with the 1/sqrt(dh) scale
            for (prow, drow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                for (pv, dv) in prow.iter().zip(drow.iter_mut()) {
                    *dv = *pv * (*dv - dot) * scale;
                }
            }
            gemm(nq, nk, dh, &dp, View::row_major(nk), &cache.k[off..], View::row_major(d), T::one(), &mut dq[off..], View::row_major(d));
            gemm(nk, nq, dh, &dp, View::transposed(nk), &cache.q[off..], View::row_major(d), T::one(), &mut dk[off..], View::row_major(d));
        }
        let (gq, gk, gv) = match grads {
            Some(g) => (Some(&mut g.wq), Some(&mut g.wk), Some(&mut g.wv)),
            None => (None, None, None),
        };
        let dq_in = self.wq.backward(q_in, nq, &dq, gq);
        let dk_in = self.wk.backward(k_in, nk, &dk, gk);
        let dv_in = self.wv.backward(v_in, nk, &dv, gv);
        (dq_in, dk_in, dv_in)
    }
}

impl<T: Real> Params<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        visit_child("wq", &self.wq, f);
        visit_child("wk", &self.wk, f);
        visit_child("wv", &self.wv, f);
        visit_child("wo", &self.wo, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        visit_child_mut("wq", &mut self.wq, f);
        visit_child_mut("wk", &mut self.wk, f);
        visit_child_mut("wv", &mut self.wv, f);
        visit_child_mut("wo", &mut self.wo, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let att: MultiHeadAttention<f64> = MultiHeadAttention::new(8, 2, 0.1, &mut rng);
        let q: Vec<f64> = (0..3 * 8).map(|i| (i as f64 * 0.3).cos()).collect();
        let kv: Vec<f64> = (0..5 * 8).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, cache) = att.forward(&q, &kv, &kv, 3, 5);
        for row in cache.probs.chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }
}
