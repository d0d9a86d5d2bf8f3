//! Event-fusion transformer and the trainable plug-in around it.
//!
//! Prior-state tokens are the queries and the residual stream; event tokens
//! enter through cross-attention only. Output projections start near zero so
//! an untrained plug passes its prior through almost unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{check_same_shape, Encoder, EncoderCache, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::event_model::VoxelGrid;
use crate::nn::{
    self, gelu, gelu_backward, AttentionCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention, Params, Real,
    Tensor,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EFormerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EFormerConfig {
    fn default() -> Self {
        EFormerConfig {
            layers: 3,
            heads: 4,
            dim: 64,
            mlp_ratio: 2,
        }
    }
}

impl EFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("e-former sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

const OUT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer<T> {
    pub norm1: LayerNorm<T>,
    pub self_attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub norm3: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

struct LayerCache<T> {
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    q1: Vec<T>,
    sa: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    q2: Vec<T>,
    k2: Vec<T>,
    ca: AttentionCache<T>,
    ln3: LayerNormCache<T>,
    h3: Vec<T>,
    m: Vec<T>,
    g: Vec<T>,
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

impl<T: Real> DecoderLayer<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EFormerConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        DecoderLayer {
            norm1: LayerNorm::new(d),
            self_attn: MultiHeadAttention::new(d, cfg.heads, OUT_STD, rng),
            norm2: LayerNorm::new(d),
            cross_attn: MultiHeadAttention::new(d, cfg.heads, OUT_STD, rng),
            norm3: LayerNorm::new(d),
            fc1: Linear::new(d, d * cfg.mlp_ratio, rng),
            fc2: Linear::with_std(d * cfg.mlp_ratio, d, OUT_STD, rng),
        }
    }

    fn forward(&self, x: &[T], pos_q: &[T], ev: &[T], k_ev: &[T], n: usize, m: usize) -> (Vec<T>, LayerCache<T>) {
        let (h1, ln1) = self.norm1.forward(x, n);
        let q1 = add(&h1, pos_q);
        let (sa_out, sa) = self.self_attn.forward(&q1, &q1, &h1, n, n);
        let x1 = add(x, &sa_out);

        let (h2, ln2) = self.norm2.forward(&x1, n);
        let q2 = add(&h2, pos_q);
        let (ca_out, ca) = self.cross_attn.forward(&q2, k_ev, ev, n, m);
        let x2 = add(&x1, &ca_out);

        let (h3, ln3) = self.norm3.forward(&x2, n);
        let mm = self.fc1.forward(&h3, n);
        let g: Vec<T> = mm.iter().map(|v| gelu(*v)).collect();
        let out = add(&x2, &self.fc2.forward(&g, n));
        let cache = LayerCache {
            ln1,
            h1,
            q1,
            sa,
            ln2,
            q2,
            k2: k_ev.to_vec(),
            ca,
            ln3,
            h3,
            m: mm,
            g,
        };
        (out, cache)
    }

    /// Returns `(dx, d pos_q, d ev, d k_ev)`.
    fn backward(
        &self,
        c: &LayerCache<T>,
        ev: &[T],
        dout: &[T],
        n: usize,
        grads: &mut DecoderLayer<T>,
    ) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        // MLP block
        let mut dx2 = dout.to_vec();
        let mut dg = self.fc2.backward(&c.g, n, dout, Some(&mut grads.fc2));
        for (d, v) in dg.iter_mut().zip(&c.m) {
            *d *= gelu_backward(*v);
        }
        let dh3 = self.fc1.backward(&c.h3, n, &dg, Some(&mut grads.fc1));
        add_into(&mut dx2, &self.norm3.backward(&c.ln3, &dh3, Some(&mut grads.norm3)));

        // cross-attention block
        let mut dx1 = dx2.clone();
        let (dq2, dk2, dev) = self.cross_attn.backward(&c.q2, &c.k2, ev, &c.ca, &dx2, Some(&mut grads.cross_attn));
        let mut dpos = dq2.clone();
        add_into(&mut dx1, &self.norm2.backward(&c.ln2, &dq2, Some(&mut grads.norm2)));

        // self-attention block
        let mut dx = dx1.clone();
        let (dq1, dk1, dv1) = self.self_attn.backward(&c.q1, &c.q1, &c.h1, &c.sa, &dx1, Some(&mut grads.self_attn));
        let dqk = add(&dq1, &dk1);
        add_into(&mut dpos, &dqk);
        let dh1 = add(&dqk, &dv1);
        add_into(&mut dx, &self.norm1.backward(&c.ln1, &dh1, Some(&mut grads.norm1)));
        (dx, dpos, dev, dk2)
    }
}

impl<T: Real> Params<T> for DecoderLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        nn::visit_child("norm1", &self.norm1, f);
        nn::visit_child("self_attn", &self.self_attn, f);
        nn::visit_child("norm2", &self.norm2, f);
        nn::visit_child("cross_attn", &self.cross_attn, f);
        nn::visit_child("norm3", &self.norm3, f);
        nn::visit_child("fc1", &self.fc1, f);
        nn::visit_child("fc2", &self.fc2, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        nn::visit_child_mut("norm1", &mut self.norm1, f);
        nn::visit_child_mut("self_attn", &mut self.self_attn, f);
        nn::visit_child_mut("norm2", &mut self.norm2, f);
        nn::visit_child_mut("cross_attn", &mut self.cross_attn, f);
        nn::visit_child_mut("norm3", &mut self.norm3, f);
        nn::visit_child_mut("fc1", &mut self.fc1, f);
        nn::visit_child_mut("fc2", &mut self.fc2, f);
    }
}

/// `tokens × dim` table: the first half of the channels encodes the row, the
/// second half the column, as sin/cos pairs at frequencies spaced
/// geometrically from one half-period to one period per cell.
pub fn sine_grid<T: Real>((h, w): (usize, usize), dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let pairs = half / 2;
    let mut data = vec![T::zero(); h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..][..dim];
            for (offset, pos, size) in [(0, y, h), (half, x, w)] {
                let u = (pos as f64 + 0.5) / size as f64;
                for i in 0..pairs {
                    let f = (size as f64).powf(i as f64 / pairs as f64);
                    let a = std::f64::consts::PI * u * f;
                    row[offset + 2 * i] = T::of(a.sin());
                    row[offset + 2 * i + 1] = T::of(a.cos());
                }
            }
        }
    }
    Tensor::from_vec(&[h * w, dim], data)
}

/// Stack of decoder layers with learned positional tables for both token sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EFormer<T> {
    pub config: EFormerConfig,
    pub tokens: usize,
    pub layers: Vec<DecoderLayer<T>>,
    /// `tokens × dim`, added to queries and self-attention keys.
    pub pos_query: Tensor<T>,
    /// `tokens × dim`, added to event keys.
    pub pos_event: Tensor<T>,
}

pub struct EFormerCache<T> {
    ev: Vec<T>,
    layers: Vec<LayerCache<T>>,
    shape: (usize, usize, usize, usize),
}

impl<T: Real> EFormer<T> {
    /// `grid` is the `(height, width)` token layout; both positional tables
    /// start from the same sinusoidal grid encoding.
    pub fn new<R: Rng + ?Sized>(config: EFormerConfig, grid: (usize, usize), rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers).map(|_| DecoderLayer::new(&config, rng)).collect();
        let pos = sine_grid::<T>(grid, config.dim);
        Ok(EFormer {
            pos_query: pos.clone(),
            pos_event: pos,
            config,
            tokens: grid.0 * grid.1,
            layers,
        })
    }

    fn check(&self, f: &FeatureMap<T>, what: &str) -> Result<()> {
        if f.channels != self.config.dim || f.cells() != self.tokens {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}×{}×{} features for a {}-dim, {}-token e-former",
                f.channels, f.height, f.width, self.config.dim, self.tokens
            )));
        }
        Ok(())
    }

    /// Fuses event features into the prior state.
    pub fn forward(&self, prior: &FeatureMap<T>, events: &FeatureMap<T>) -> Result<(FeatureMap<T>, EFormerCache<T>)> {
        self.check(prior, "prior")?;
        self.check(events, "events")?;
        check_same_shape(prior, events, "e-former inputs")?;
        let (d, n) = (self.config.dim, self.tokens);
        let mut x = nn::transpose(&prior.data, d, n);
        let ev = nn::transpose(&events.data, d, n);
        let k_ev = add(&ev, &self.pos_event.data);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&x, &self.pos_query.data, &ev, &k_ev, n, n);
            caches.push(c);
            x = y;
        }
        let out = FeatureMap {
            data: nn::transpose(&x, n, d),
            ..prior.clone()
        };
        Ok((
            out,
            EFormerCache {
                ev,
                layers: caches,
                shape: (d, prior.height, prior.width, prior.stride),
            },
        ))
    }

    /// Returns `(d prior, d events)` in feature-map layout.
    pub fn backward(&self, cache: &EFormerCache<T>, dout: &FeatureMap<T>, grads: &mut EFormer<T>) -> (FeatureMap<T>, FeatureMap<T>) {
        let (d, h, w, stride) = cache.shape;
        let n = self.tokens;
        let mut dx = nn::transpose(&dout.data, d, n);
        let mut dev = vec![T::zero(); n * d];
        let mut dk_ev = vec![T::zero(); n * d];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dxi, dpos, devi, dki) = layer.backward(&cache.layers[i], &cache.ev, &dx, n, &mut grads.layers[i]);
            add_into(&mut grads.pos_query.data, &dpos);
            add_into(&mut dev, &devi);
            add_into(&mut dk_ev, &dki);
            dx = dxi;
        }
        add_into(&mut grads.pos_event.data, &dk_ev);
        add_into(&mut dev, &dk_ev);
        let wrap = |tok: &[T]| FeatureMap {
            channels: d,
            height: h,
            width: w,
            stride,
            data: nn::transpose(tok, n, d),
        };
        (wrap(&dx), wrap(&dev))
    }
}

impl<T: Real> Params<T> for EFormer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f("pos_query", &self.pos_query);
        f("pos_event", &self.pos_event);
        for (i, l) in self.layers.iter().enumerate() {
            nn::visit_child(&format!("layer{i}"), l, f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("pos_query", &mut self.pos_query);
        f("pos_event", &mut self.pos_event);
        for (i, l) in self.layers.iter_mut().enumerate() {
            nn::visit_child_mut(&format!("layer{i}"), l, f);
        }
    }
}

/// Everything the plug-in adds to a frozen image model: event encoder and e-former.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlugModule<T = f32> {
    pub ev_encoder: Encoder<T>,
    pub eformer: EFormer<T>,
}

pub struct FuseCache<T> {
    encoder: EncoderCache<T>,
    eformer: EFormerCache<T>,
}

impl<T: Real> PlugModule<T> {
    /// `image_encoder` fixes the spatial layout the plug must reproduce.
    pub fn new<R: Rng + ?Sized>(
        image_encoder: &EncoderConfig,
        bins: usize,
        config: EFormerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ev_cfg = EncoderConfig {
            in_channels: bins,
            ..image_encoder.clone()
        };
        if config.dim != ev_cfg.feature_dim {
            return Err(Error::Config(format!(
                "e-former dim {} must equal encoder feature dim {}",
                config.dim, ev_cfg.feature_dim
            )));
        }
        let (_, h, w) = ev_cfg.feature_shape();
        let ev_encoder = Encoder::new(ev_cfg, rng)?;
        let eformer = EFormer::new(config, (h, w), rng)?;
        Ok(PlugModule { ev_encoder, eformer })
    }

    pub fn bins(&self) -> usize {
        self.ev_encoder.config.in_channels
    }

    fn voxel_input(&self, voxels: &VoxelGrid) -> Result<Vec<T>> {
        let c = &self.ev_encoder.config;
        if voxels.bins != c.in_channels || voxels.height != c.input_height || voxels.width != c.input_width {
            return Err(Error::ShapeMismatch(format!(
                "voxel grid {}×{}×{} vs event encoder input {}×{}×{}",
                voxels.bins, voxels.height, voxels.width, c.in_channels, c.input_height, c.input_width
            )));
        }
        Ok(voxels.data.iter().map(|v| T::of(*v as f64)).collect())
    }

    pub fn ev_encode(&self, voxels: &VoxelGrid) -> Result<FeatureMap<T>> {
        Ok(self.ev_encoder.forward(&self.voxel_input(voxels)?)?.0)
    }

    pub fn fuse_with_cache(&self, prior: &FeatureMap<T>, voxels: &VoxelGrid) -> Result<(FeatureMap<T>, FuseCache<T>)> {
        let (ev, encoder) = self.ev_encoder.forward(&self.voxel_input(voxels)?)?;
        let (out, eformer) = self.eformer.forward(prior, &ev)?;
        Ok((out, FuseCache { encoder, eformer }))
    }

    /// Accumulates plug gradients and returns `d prior`.
    pub fn fuse_backward(&self, cache: &FuseCache<T>, dout: &FeatureMap<T>, grads: &mut PlugModule<T>) -> FeatureMap<T> {
        let (dprior, dev) = self.eformer.backward(&cache.eformer, dout, &mut grads.eformer);
        self.ev_encoder.backward(&cache.encoder, &dev.data, &mut grads.ev_encoder);
        dprior
    }
}

impl<T: Real> Params<T> for PlugModule<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        nn::visit_child("ev_encoder", &self.ev_encoder, f);
        nn::visit_child("eformer", &self.eformer, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        nn::visit_child_mut("ev_encoder", &mut self.ev_encoder, f);
        nn::visit_child_mut("eformer", &mut self.eformer, f);
    }
}

/// One fusion step: `query` tokens attend to `ev_feat` tokens.
/// The same function serves the degraded-anchor fusion and every iteration.
pub fn fuse<T: Real>(plug: &PlugModule<T>, query: &FeatureMap<T>, ev_feat: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    Ok(plug.eformer.forward(query, ev_feat)?.0)
}

fn non_empty<T>(ev_feats: &[FeatureMap<T>]) -> Result<()> {
    if ev_feats.is_empty() {
        Err(Error::InvalidArgument("at least one event feature map is required".into()))
    } else {
        Ok(())
    }
}

/// `F_j = fuse(F_{j−1}, ev_j)` from `F_0 = init`; returns `[F_1..F_K]`.
pub fn iterate_sequence<T: Real>(plug: &PlugModule<T>, init: &FeatureMap<T>, ev_feats: &[FeatureMap<T>]) -> Result<Vec<FeatureMap<T>>> {
    non_empty(ev_feats)?;
    let mut out: Vec<FeatureMap<T>> = Vec::with_capacity(ev_feats.len());
    for ev in ev_feats {
        let next = fuse(plug, out.last().unwrap_or(init), ev)?;
        out.push(next);
    }
    Ok(out)
}

/// `F_j = fuse(init, ev_j)`: every step anchored at the initial state.
pub fn fuse_no_iter<T: Real>(plug: &PlugModule<T>, init: &FeatureMap<T>, ev_feats: &[FeatureMap<T>]) -> Result<Vec<FeatureMap<T>>> {
    non_empty(ev_feats)?;
    ev_feats.iter().map(|ev| fuse(plug, init, ev)).collect()
}
