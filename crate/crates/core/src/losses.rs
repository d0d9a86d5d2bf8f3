//! Reconstruction, style and task losses, each with its gradient.

use serde::{Deserialize, Serialize};

use crate::encoders::{check_same_shape, FeatureMap, TaskOutput};
use crate::error::{Error, Result};
use crate::nn::{self, Real, View};

/// `G = F Fᵀ / (H'·W')` with `F` viewed as `C × H'W'`.
pub fn gram<T: Real>(f: &FeatureMap<T>) -> Vec<T> {
    let (c, n) = (f.channels, f.cells());
    let mut g = vec![T::zero(); c * c];
    nn::gemm(c, n, c, &f.data, View::row_major(n), &f.data, View::transposed(n), T::zero(), &mut g, View::row_major(c));
    let scale = T::one() / T::of(n as f64);
    g.iter_mut().for_each(|v| *v *= scale);
    g
}

/// `dL/dF` given `dL/dG`.
pub fn gram_backward<T: Real>(f: &FeatureMap<T>, dg: &[T]) -> Vec<T> {
    let (c, n) = (f.channels, f.cells());
    let scale = T::one() / T::of(n as f64);
    let sym: Vec<T> = (0..c * c).map(|i| (dg[i] + dg[(i % c) * c + i / c]) * scale).collect();
    let mut df = vec![T::zero(); c * n];
    nn::gemm(c, c, n, &sym, View::row_major(c), &f.data, View::row_major(n), T::zero(), &mut df, View::row_major(n));
    df
}

fn mse_grad<T: Real>(pred: &[T], target: &[T]) -> (f64, Vec<T>) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = *p - *t;
            let d64 = d.to_f64().unwrap_or(f64::NAN);
            loss += d64 * d64;
            d * T::of(2.0 / n)
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared feature error and its gradient with respect to `pred`.
pub fn recon_loss_grad<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<(f64, Vec<T>)> {
    check_same_shape(pred, target, "reconstruction loss")?;
    Ok(mse_grad(&pred.data, &target.data))
}

pub fn recon_loss<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<f64> {
    Ok(recon_loss_grad(pred, target)?.0)
}

/// Mean squared Gram-matrix error and its gradient with respect to `pred`.
pub fn style_loss_grad<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<(f64, Vec<T>)> {
    check_same_shape(pred, target, "style loss")?;
    let (loss, dg) = mse_grad(&gram(pred), &gram(target));
    Ok((loss, gram_backward(pred, &dg)))
}

pub fn style_loss<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<f64> {
    Ok(style_loss_grad(pred, target)?.0)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Task loss against a pseudo-label from the frozen head: centroid MSE in
/// normalised units, or mean binary cross-entropy between predicted logits
/// and the label's sigmoid probabilities.
pub fn task_loss_grad<T: Real>(pred: &TaskOutput<T>, target: &TaskOutput<T>) -> Result<(f64, Vec<T>)> {
    match (pred, target) {
        (TaskOutput::Centroids(p), TaskOutput::Centroids(t)) => {
            if p.len() != t.len() {
                return Err(Error::ShapeMismatch(format!("{} vs {} centroid values", p.len(), t.len())));
            }
            Ok(mse_grad(p, t))
        }
        (TaskOutput::MaskLogits { data: p, .. }, TaskOutput::MaskLogits { data: t, .. }) => {
            if p.len() != t.len() {
                return Err(Error::ShapeMismatch(format!("{} vs {} mask logits", p.len(), t.len())));
            }
            let n = p.len().max(1) as f64;
            let mut loss = 0.0;
            let grad = p
                .iter()
                .zip(t)
                .map(|(z, tl)| {
                    let z = z.to_f64().unwrap_or(f64::NAN);
                    let y = sigmoid(tl.to_f64().unwrap_or(f64::NAN));
                    // softplus(z) − y·z, evaluated stably
                    loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                    T::of((sigmoid(z) - y) / n)
                })
                .collect();
            Ok((loss / n, grad))
        }
        _ => Err(Error::ShapeMismatch("prediction and label are different task kinds".into())),
    }
}

pub fn task_loss<T: Real>(pred: &TaskOutput<T>, target: &TaskOutput<T>) -> Result<f64> {
    Ok(task_loss_grad(pred, target)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub task: f64,
    pub recon: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            task: 1.0,
            recon: 10.0,
            style: 10.0,
        }
    }
}

/// Unweighted per-term sums plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub recon: f64,
    pub style: f64,
    pub total: f64,
}

impl LossReport {
    pub fn add(&mut self, other: &LossReport) {
        self.task += other.task;
        self.recon += other.recon;
        self.style += other.style;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            task: self.task * s,
            recon: self.recon * s,
            style: self.style * s,
            total: self.total * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.task.is_finite() && self.recon.is_finite() && self.style.is_finite() && self.total.is_finite()
    }
}

/// Weighted loss for one step: the task term is given precomputed because
/// it needs the frozen head.
pub fn step_loss<T: Real>(
    weights: &LossWeights,
    fused: &FeatureMap<T>,
    target: &FeatureMap<T>,
    task: f64,
) -> Result<LossReport> {
    let recon = recon_loss(fused, target)?;
    let style = style_loss(fused, target)?;
    Ok(LossReport {
        task,
        recon,
        style,
        total: weights.task * task + weights.recon * recon + weights.style * style,
    })
}

/// Sum of step losses over a fused sequence against clean targets.
pub fn total_loss<T: Real>(
    weights: &LossWeights,
    fused: &[FeatureMap<T>],
    targets: &[FeatureMap<T>],
    task_terms: &[f64],
) -> Result<LossReport> {
    if fused.len() != targets.len() || fused.len() != task_terms.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fused maps, {} targets, {} task terms",
            fused.len(),
            targets.len(),
            task_terms.len()
        )));
    }
    let mut total = LossReport::default();
    for ((f, t), task) in fused.iter().zip(targets).zip(task_terms) {
        total.add(&step_loss(weights, f, t, *task)?);
    }
    Ok(total)
}
