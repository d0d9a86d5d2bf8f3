//! Finite-difference verification of the hand-written backward passes.
//!
//! Every check runs in `f64` with central differences and reports the worst
//! relative error over randomly probed parameters and inputs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::efformer::{EFormer, EFormerConfig};
use crate::encoders::{Encoder, EncoderConfig, FeatureMap, TaskHead, TaskKind, TaskOutput};
use crate::losses;
use crate::nn::{self, Params};

pub const STEP: f64 = 1e-5;
/// Relative errors are measured against `max(|fd|, |analytic|, FLOOR)`; the
/// floor keeps round-off on exactly-zero gradients (key biases, which the
/// softmax ignores) from reading as a relative error.
pub const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// A group of scalar variables the loss is differentiated against.
struct Group {
    name: &'static str,
    values: Vec<f64>,
    analytic: Vec<f64>,
}

fn set_flat<P: Params<f64>>(p: &mut P, flat: &[f64]) {
    let mut it = flat.iter();
    p.visit_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v = *it.next().expect("flat length")));
}

fn flat_grads<P: Params<f64>>(g: &P) -> Vec<f64> {
    g.flat_params()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Probes `probes` variables, stratified so every group is represented.
fn run(
    name: &str,
    groups: &[Group],
    probes: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&[Vec<f64>]) -> f64,
) -> GradCheck {
    let total: usize = groups.iter().map(|g| g.values.len()).sum();
    let mut base: Vec<Vec<f64>> = groups.iter().map(|g| g.values.clone()).collect();
    let mut worst = (0.0f64, String::new());
    let mut done = 0;
    for (gi, g) in groups.iter().enumerate() {
        let share = ((probes * g.values.len()) as f64 / total as f64).round() as usize;
        let k = share.max(probes / (4 * groups.len())).max(1).min(g.values.len());
        for idx in sample(rng, g.values.len(), k).into_iter() {
            let orig = base[gi][idx];
            base[gi][idx] = orig + STEP;
            let up = loss(&base);
            base[gi][idx] = orig - STEP;
            let down = loss(&base);
            base[gi][idx] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let an = g.analytic[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR);
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, format!("{}[{idx}]: fd {fd:.6e}, analytic {an:.6e}", g.name));
            }
            done += 1;
        }
    }
    GradCheck {
        name: name.to_string(),
        probes: done,
        max_rel_err: worst.0,
        worst: worst.1,
    }
}

/// 1-layer, 2-head, 8-dim e-former over 4 tokens; differentiates w.r.t.
/// parameters, the query features and the event features.
pub fn check_eformer(seed: u64, probes: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EFormerConfig {
        layers: 1,
        heads: 2,
        dim: 8,
        mlp_ratio: 2,
    };
    let mut model: EFormer<f64> = EFormer::new(cfg, (2, 2), &mut rng).expect("valid config");
    // larger output projections so every path carries a visible gradient
    let noise: Vec<f64> = random_vec(&mut rng, model.param_count(), 0.3);
    let params: Vec<f64> = model.flat_params().iter().zip(&noise).map(|(p, n)| p + n).collect();
    set_flat(&mut model, &params);
    let mk = |d: Vec<f64>| FeatureMap {
        channels: 8,
        height: 2,
        width: 2,
        stride: 8,
        data: d,
    };
    let query = random_vec(&mut rng, 32, 1.0);
    let events = random_vec(&mut rng, 32, 1.0);
    let r = random_vec(&mut rng, 32, 1.0);

    let (_, cache) = model.forward(&mk(query.clone()), &mk(events.clone())).expect("shapes");
    let mut grads = nn::zeros_like(&model);
    let (dq, de) = model.backward(&cache, &mk(r.clone()), &mut grads);
    let groups = [
        Group {
            name: "param",
            values: params,
            analytic: flat_grads(&grads),
        },
        Group {
            name: "query",
            values: query,
            analytic: dq.data,
        },
        Group {
            name: "events",
            values: events,
            analytic: de.data,
        },
    ];
    run("e-former", &groups, probes, &mut rng, |v| {
        let mut m = model.clone();
        set_flat(&mut m, &v[0]);
        let (out, _) = m.forward(&mk(v[1].clone()), &mk(v[2].clone())).expect("shapes");
        dot(&out.data, &r)
    })
}

/// Encoder on a 16×16 input; `in_channels` 1 for images, the bin count for events.
pub fn check_encoder(in_channels: usize, seed: u64, probes: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig::new(in_channels, vec![4, 6, 8], 16, 16);
    let model: Encoder<f64> = Encoder::new(cfg, &mut rng).expect("valid config");
    let input = random_vec(&mut rng, in_channels * 256, 1.0);
    let r = random_vec(&mut rng, 8 * 4, 1.0);
    let (_, cache) = model.forward(&input).expect("shape");
    let mut grads = nn::zeros_like(&model);
    model.backward(&cache, &r, &mut grads);
    let groups = [Group {
        name: "param",
        values: model.flat_params(),
        analytic: flat_grads(&grads),
    }];
    let name = if in_channels == 1 { "image encoder" } else { "event encoder" };
    run(name, &groups, probes, &mut rng, |v| {
        let mut m = model.clone();
        set_flat(&mut m, &v[0]);
        dot(&m.forward(&input).expect("shape").0.data, &r)
    })
}

/// Task head: parameters and input features.
pub fn check_head(kind: TaskKind, seed: u64, probes: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head: TaskHead<f64> = TaskHead::new(kind, (4, 2, 2), 4, &mut rng);
    let mut head = head;
    let noise = random_vec(&mut rng, head.param_count(), 0.3);
    let params: Vec<f64> = head.flat_params().iter().zip(&noise).map(|(p, n)| p + n).collect();
    set_flat(&mut head, &params);
    let mk = |d: Vec<f64>| FeatureMap {
        channels: 4,
        height: 2,
        width: 2,
        stride: 4,
        data: d,
    };
    let feat = random_vec(&mut rng, 16, 1.0);
    let (out, cache) = head.forward(&mk(feat.clone())).expect("shape");
    let r = random_vec(&mut rng, out.values().len(), 1.0);
    let mut grads = nn::zeros_like(&head);
    let dfeat = head.backward(&cache, &r, Some(&mut grads));
    let groups = [
        Group {
            name: "param",
            values: params,
            analytic: flat_grads(&grads),
        },
        Group {
            name: "feature",
            values: feat,
            analytic: dfeat,
        },
    ];
    let name = format!("{} head", kind.name());
    run(&name, &groups, probes, &mut rng, |v| {
        let mut h = head.clone();
        set_flat(&mut h, &v[0]);
        dot(h.forward(&mk(v[1].clone())).expect("shape").0.values(), &r)
    })
}

/// Reconstruction, style and both task losses w.r.t. the prediction.
pub fn check_losses(seed: u64, probes: usize) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mk = |d: Vec<f64>| FeatureMap {
        channels: 6,
        height: 3,
        width: 3,
        stride: 8,
        data: d,
    };
    let pred = random_vec(&mut rng, 54, 1.0);
    let target = mk(random_vec(&mut rng, 54, 1.0));
    let mut out = Vec::new();

    let (_, g) = losses::recon_loss_grad(&mk(pred.clone()), &target).expect("shapes");
    let groups = [Group { name: "pred", values: pred.clone(), analytic: g }];
    out.push(run("reconstruction loss", &groups, probes, &mut rng, |v| {
        losses::recon_loss(&mk(v[0].clone()), &target).expect("shapes")
    }));

    let (_, g) = losses::style_loss_grad(&mk(pred.clone()), &target).expect("shapes");
    let groups = [Group { name: "pred", values: pred, analytic: g }];
    out.push(run("style loss", &groups, probes, &mut rng, |v| {
        losses::style_loss(&mk(v[0].clone()), &target).expect("shapes")
    }));

    let cp = random_vec(&mut rng, 6, 1.0);
    let ct = TaskOutput::Centroids(random_vec(&mut rng, 6, 1.0));
    let (_, g) = losses::task_loss_grad(&TaskOutput::Centroids(cp.clone()), &ct).expect("kinds");
    let groups = [Group { name: "pred", values: cp, analytic: g }];
    out.push(run("centroid task loss", &groups, probes, &mut rng, |v| {
        losses::task_loss(&TaskOutput::Centroids(v[0].clone()), &ct).expect("kinds")
    }));

    let logits = |d: Vec<f64>| TaskOutput::MaskLogits { height: 4, width: 4, data: d };
    let zp = random_vec(&mut rng, 16, 4.0);
    let zt = logits(random_vec(&mut rng, 16, 4.0));
    let (_, g) = losses::task_loss_grad(&logits(zp.clone()), &zt).expect("kinds");
    let groups = [Group { name: "pred", values: zp, analytic: g }];
    out.push(run("segmentation task loss", &groups, probes, &mut rng, |v| {
        losses::task_loss(&logits(v[0].clone()), &zt).expect("kinds")
    }));
    out
}

/// Every check used by the gradient-fidelity gate.
pub fn check_all(seed: u64, probes: usize) -> Vec<GradCheck> {
    let mut out = vec![
        check_eformer(seed, probes),
        check_encoder(1, seed + 1, probes),
        check_encoder(5, seed + 2, probes),
        check_head(TaskKind::Centroid { n_shapes: 2 }, seed + 3, probes),
        check_head(TaskKind::Segmentation, seed + 4, probes),
    ];
    out.extend(check_losses(seed + 5, probes));
    out
}
