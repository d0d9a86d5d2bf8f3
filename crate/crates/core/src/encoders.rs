//! Convolutional encoders, task heads and the frozen image-based model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::param_digest;
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{self, silu, silu_backward, Adam, Conv2d, Conv2dCache, Linear, Params, Real, Tensor};
use crate::scenegen::{Frame, Label};

/// `C×H'×W'` feature tensor, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Input pixels per feature cell along each axis.
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            stride,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureMap<T>) -> bool {
        self.shape() == other.shape()
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            stride: self.stride,
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    /// Euclidean distance between two equally shaped maps.
    pub fn distance(&self, other: &FeatureMap<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b).to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn check_same_shape<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels per stage; every stage halves resolution.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl EncoderConfig {
    pub fn new(in_channels: usize, widths: Vec<usize>, input_height: usize, input_width: usize) -> Self {
        let feature_dim = widths.last().copied().unwrap_or(0);
        EncoderConfig {
            in_channels,
            widths,
            feature_dim,
            input_height,
            input_width,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn stride(&self) -> usize {
        1 << self.stages()
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.feature_dim, self.input_height / self.stride(), self.input_width / self.stride())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.feature_dim != *self.widths.last().expect("non-empty") {
            return Err(Error::Config("feature_dim must equal the last stage width".into()));
        }
        let s = self.stride();
        if !self.input_height.is_multiple_of(s) || !self.input_width.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "input {}×{} not divisible by stride {s}",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }
}

/// Stack of (3×3 stride-2 convolution, SiLU) stages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub stages: Vec<Conv2d<T>>,
}

pub struct EncoderCache<T> {
    convs: Vec<Conv2dCache<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: rand::Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages());
        let mut cin = config.in_channels;
        for &w in &config.widths {
            stages.push(Conv2d::new(cin, w, 2, rng));
            cin = w;
        }
        Ok(Encoder { config, stages })
    }

    pub fn forward(&self, input: &[T]) -> Result<(FeatureMap<T>, EncoderCache<T>)> {
        let c = &self.config;
        let expect = c.in_channels * c.input_height * c.input_width;
        if input.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {}×{}×{} input ({expect} values), got {}",
                c.in_channels,
                c.input_height,
                c.input_width,
                input.len()
            )));
        }
        let (mut h, mut w) = (c.input_height, c.input_width);
        let mut x = input.to_vec();
        let mut convs = Vec::with_capacity(self.stages.len());
        let mut pre = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (y, cache) = conv.forward(&x, h, w);
            h = cache.out_h;
            w = cache.out_w;
            x = y.iter().map(|v| silu(*v)).collect();
            pre.push(y);
            convs.push(cache);
        }
        let fm = FeatureMap {
            channels: c.feature_dim,
            height: h,
            width: w,
            stride: c.stride(),
            data: x,
        };
        Ok((fm, EncoderCache { convs, pre }))
    }

    /// Accumulates parameter gradients for `d feature`.
    pub fn backward(&self, cache: &EncoderCache<T>, dfeat: &[T], grads: &mut Encoder<T>) {
        let mut dy: Vec<T> = dfeat.to_vec();
        for s in (0..self.stages.len()).rev() {
            for (d, p) in dy.iter_mut().zip(&cache.pre[s]) {
                *d *= silu_backward(*p);
            }
            let need_dx = s > 0;
            let dx = self.stages[s].backward(&cache.convs[s], &dy, Some(&mut grads.stages[s]), need_dx);
            if let Some(dx) = dx {
                dy = dx;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|c| Conv2d {
                    w: c.w.cast(),
                    b: c.b.cast(),
                    stride: c.stride,
                })
                .collect(),
        }
    }
}

impl<T: Real> Params<T> for Encoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            nn::visit_child(&format!("stage{i}"), s, f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            nn::visit_child_mut(&format!("stage{i}"), s, f);
        }
    }
}

/// Encoder input from a frame, replicating grayscale when three channels are expected.
pub fn frame_input<T: Real>(frame: &Frame, in_channels: usize) -> Result<Vec<T>> {
    let plane = frame.height * frame.width;
    match (frame.channels, in_channels) {
        (1, 1) => Ok(frame.pixels.iter().map(|v| T::of(*v as f64)).collect()),
        (1, 3) => {
            let p: Vec<T> = frame.pixels.iter().map(|v| T::of(*v as f64)).collect();
            Ok(p.iter().chain(&p).chain(&p).copied().collect())
        }
        (3, 3) => {
            let mut out = vec![T::zero(); 3 * plane];
            for i in 0..plane {
                for c in 0..3 {
                    out[c * plane + i] = T::of(frame.pixels[i * 3 + c] as f64);
                }
            }
            Ok(out)
        }
        (have, want) => Err(Error::ShapeMismatch(format!("{have}-channel frame for {want}-channel encoder"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Centroid { n_shapes: usize },
    Segmentation,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Centroid { .. } => "centroid",
            TaskKind::Segmentation => "segmentation",
        }
    }
}

/// Head prediction. Centroids are `[x/W, y/H]` pairs in normalised image units.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskOutput<T = f32> {
    Centroids(Vec<T>),
    MaskLogits { height: usize, width: usize, data: Vec<T> },
}

impl<T: Real> TaskOutput<T> {
    pub fn values(&self) -> &[T] {
        match self {
            TaskOutput::Centroids(v) => v,
            TaskOutput::MaskLogits { data, .. } => data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Centroids in pixel coordinates.
    pub fn centroids_px(&self, width: usize, height: usize) -> Option<Vec<[f64; 2]>> {
        match self {
            TaskOutput::Centroids(v) => Some(
                v.chunks(2)
                    .map(|c| {
                        [
                            c[0].to_f64().unwrap_or(f64::NAN) * width as f64,
                            c[1].to_f64().unwrap_or(f64::NAN) * height as f64,
                        ]
                    })
                    .collect(),
            ),
            TaskOutput::MaskLogits { .. } => None,
        }
    }

    pub fn mask(&self) -> Option<Vec<u8>> {
        match self {
            TaskOutput::MaskLogits { data, .. } => Some(data.iter().map(|v| u8::from(*v > T::zero())).collect()),
            TaskOutput::Centroids(_) => None,
        }
    }

    /// Ground-truth target for a label.
    pub fn from_label(label: &Label, kind: TaskKind, width: usize, height: usize) -> TaskOutput<T> {
        match kind {
            TaskKind::Centroid { .. } => TaskOutput::Centroids(
                label
                    .centroids
                    .iter()
                    .flat_map(|c| [T::of(c[0] / width as f64), T::of(c[1] / height as f64)])
                    .collect(),
            ),
            // saturated logits stand in for hard 0/1 probabilities
            TaskKind::Segmentation => TaskOutput::MaskLogits {
                height,
                width,
                data: label.mask.iter().map(|m| if *m > 0 { T::of(40.0) } else { T::of(-40.0) }).collect(),
            },
        }
    }
}

const CENTROID_HIDDEN: usize = 64;

/// Decoder from a feature map to task predictions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TaskHead<T> {
    /// Flatten → linear → SiLU → linear, offset so zero output is the image centre.
    Centroid { fc1: Linear<T>, fc2: Linear<T>, n_shapes: usize },
    /// Per-cell linear map to `stride²` logits, rearranged to full resolution.
    Segmentation { proj: Linear<T>, stride: usize },
}

pub enum HeadCache<T> {
    Centroid { flat: Vec<T>, pre: Vec<T>, hidden: Vec<T> },
    Segmentation { tokens: Vec<T>, cells: (usize, usize) },
}

impl<T: Real> TaskHead<T> {
    pub fn new<R: rand::Rng + ?Sized>(kind: TaskKind, feature: (usize, usize, usize), stride: usize, rng: &mut R) -> Self {
        let (c, h, w) = feature;
        match kind {
            TaskKind::Centroid { n_shapes } => TaskHead::Centroid {
                fc1: Linear::with_std(c * h * w, CENTROID_HIDDEN, (1.0 / (c * h * w) as f64).sqrt(), rng),
                fc2: Linear::with_std(CENTROID_HIDDEN, 2 * n_shapes, 0.01, rng),
                n_shapes,
            },
            TaskKind::Segmentation => TaskHead::Segmentation {
                proj: Linear::new(c, stride * stride, rng),
                stride,
            },
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskHead::Centroid { n_shapes, .. } => TaskKind::Centroid { n_shapes: *n_shapes },
            TaskHead::Segmentation { .. } => TaskKind::Segmentation,
        }
    }

    fn expected_inputs(&self) -> Option<usize> {
        match self {
            TaskHead::Centroid { fc1, .. } => Some(fc1.inputs()),
            TaskHead::Segmentation { .. } => None,
        }
    }

    pub fn forward(&self, feat: &FeatureMap<T>) -> Result<(TaskOutput<T>, HeadCache<T>)> {
        match self {
            TaskHead::Centroid { fc1, fc2, .. } => {
                if Some(feat.data.len()) != self.expected_inputs() {
                    return Err(Error::ShapeMismatch(format!(
                        "centroid head expects {} features, got {}",
                        fc1.inputs(),
                        feat.data.len()
                    )));
                }
                let pre = fc1.forward(&feat.data, 1);
                let hidden: Vec<T> = pre.iter().map(|v| silu(*v)).collect();
                let out = fc2.forward(&hidden, 1).into_iter().map(|v| v + T::of(0.5)).collect();
                Ok((
                    TaskOutput::Centroids(out),
                    HeadCache::Centroid {
                        flat: feat.data.clone(),
                        pre,
                        hidden,
                    },
                ))
            }
            TaskHead::Segmentation { proj, stride } => {
                if feat.channels != proj.inputs() {
                    return Err(Error::ShapeMismatch(format!(
                        "segmentation head expects {} channels, got {}",
                        proj.inputs(),
                        feat.channels
                    )));
                }
                let (hc, wc) = (feat.height, feat.width);
                let tokens = nn::transpose(&feat.data, feat.channels, hc * wc);
                let cell_logits = proj.forward(&tokens, hc * wc);
                let s = *stride;
                let (h, w) = (hc * s, wc * s);
                let mut data = vec![T::zero(); h * w];
                for y in 0..h {
                    for x in 0..w {
                        let cell = (y / s) * wc + x / s;
                        data[y * w + x] = cell_logits[cell * s * s + (y % s) * s + x % s];
                    }
                }
                Ok((
                    TaskOutput::MaskLogits { height: h, width: w, data },
                    HeadCache::Segmentation { tokens, cells: (hc, wc) },
                ))
            }
        }
    }

    /// `dL/d feature`; head parameter gradients accumulate into `grads` when given.
    pub fn backward(&self, cache: &HeadCache<T>, dout: &[T], grads: Option<&mut TaskHead<T>>) -> Vec<T> {
        match (self, cache) {
            (TaskHead::Centroid { fc1, fc2, .. }, HeadCache::Centroid { flat, pre, hidden }) => {
                let (g1, g2) = match grads {
                    Some(TaskHead::Centroid { fc1, fc2, .. }) => (Some(fc1), Some(fc2)),
                    _ => (None, None),
                };
                let mut dh = fc2.backward(hidden, 1, dout, g2);
                for (d, p) in dh.iter_mut().zip(pre) {
                    *d *= silu_backward(*p);
                }
                fc1.backward(flat, 1, &dh, g1)
            }
            (TaskHead::Segmentation { proj, stride }, HeadCache::Segmentation { tokens, cells }) => {
                let s = *stride;
                let (hc, wc) = *cells;
                let w = wc * s;
                let mut dcell = vec![T::zero(); hc * wc * s * s];
                for (i, d) in dout.iter().enumerate() {
                    let (y, x) = (i / w, i % w);
                    dcell[((y / s) * wc + x / s) * s * s + (y % s) * s + x % s] = *d;
                }
                let g = match grads {
                    Some(TaskHead::Segmentation { proj, .. }) => Some(proj),
                    _ => None,
                };
                let dtok = proj.backward(tokens, hc * wc, &dcell, g);
                nn::transpose(&dtok, hc * wc, proj.inputs())
            }
            _ => unreachable!("head cache from a different head"),
        }
    }

    pub fn cast<U: Real>(&self) -> TaskHead<U> {
        let lin = |l: &Linear<T>| Linear { w: l.w.cast(), b: l.b.cast() };
        match self {
            TaskHead::Centroid { fc1, fc2, n_shapes } => TaskHead::Centroid {
                fc1: lin(fc1),
                fc2: lin(fc2),
                n_shapes: *n_shapes,
            },
            TaskHead::Segmentation { proj, stride } => TaskHead::Segmentation {
                proj: lin(proj),
                stride: *stride,
            },
        }
    }
}

impl<T: Real> Params<T> for TaskHead<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        match self {
            TaskHead::Centroid { fc1, fc2, .. } => {
                nn::visit_child("fc1", fc1, f);
                nn::visit_child("fc2", fc2, f);
            }
            TaskHead::Segmentation { proj, .. } => nn::visit_child("proj", proj, f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            TaskHead::Centroid { fc1, fc2, .. } => {
                nn::visit_child_mut("fc1", fc1, f);
                nn::visit_child_mut("fc2", fc2, f);
            }
            TaskHead::Segmentation { proj, .. } => nn::visit_child_mut("proj", proj, f),
        }
    }
}

/// Image encoder plus head, trainable; frozen into a [`BaseModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageModel<T> {
    pub encoder: Encoder<T>,
    pub head: TaskHead<T>,
}

impl<T: Real> Params<T> for ImageModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        nn::visit_child("encoder", &self.encoder, f);
        nn::visit_child("head", &self.head, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        nn::visit_child_mut("encoder", &mut self.encoder, f);
        nn::visit_child_mut("head", &mut self.head, f);
    }
}

impl<T: Real> ImageModel<T> {
    pub fn new<R: rand::Rng + ?Sized>(config: EncoderConfig, task: TaskKind, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(config.clone(), rng)?;
        let head = TaskHead::new(task, config.feature_shape(), config.stride(), rng);
        Ok(ImageModel { encoder, head })
    }
}

/// The frozen image-based model. Parameters are only reachable read-only;
/// the digest is recomputed on demand to witness that they never change.
#[derive(Clone, Debug)]
pub struct BaseModel {
    model: ImageModel<f32>,
    digest: String,
}

impl BaseModel {
    pub fn freeze(model: ImageModel<f32>) -> Self {
        let digest = param_digest(&model);
        BaseModel { model, digest }
    }

    /// Restores a stored model, refusing it if its parameters do not hash to `digest`.
    pub fn from_parts(model: ImageModel<f32>, digest: String) -> Result<Self> {
        let base = BaseModel { model, digest };
        base.verify()?;
        Ok(base)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn verify(&self) -> Result<()> {
        let computed = param_digest(&self.model);
        if computed == self.digest {
            Ok(())
        } else {
            Err(Error::DigestMismatch {
                section: "base".into(),
                stored: self.digest.clone(),
                computed,
            })
        }
    }

    pub fn model(&self) -> &ImageModel<f32> {
        &self.model
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.model.encoder
    }

    pub fn head(&self) -> &TaskHead<f32> {
        &self.model.head
    }

    pub fn task(&self) -> TaskKind {
        self.model.head.kind()
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.model.encoder.config
    }

    pub fn im_encode(&self, image: &Frame) -> Result<FeatureMap<f32>> {
        let c = self.encoder_config();
        if image.height != c.input_height || image.width != c.input_width {
            return Err(Error::ShapeMismatch(format!(
                "image {}×{} vs encoder input {}×{}",
                image.width, image.height, c.input_width, c.input_height
            )));
        }
        let x = frame_input(image, c.in_channels)?;
        Ok(self.model.encoder.forward(&x)?.0)
    }

    pub fn task_head(&self, feat: &FeatureMap<f32>) -> Result<TaskOutput<f32>> {
        Ok(self.model.head.forward(feat)?.0)
    }

    pub fn predict(&self, image: &Frame) -> Result<TaskOutput<f32>> {
        self.task_head(&self.im_encode(image)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 11,
        }
    }
}

/// Supervised training of the image model on clean frames, then freezing.
/// Returns the frozen model and the mean training loss of every epoch.
pub fn pretrain_base(
    data: &[(Frame, Label)],
    task: TaskKind,
    encoder: EncoderConfig,
    config: &PretrainConfig,
) -> Result<(BaseModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("pretraining set is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("pretraining needs positive epochs and batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: ImageModel<f32> = ImageModel::new(encoder, task, &mut rng)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let (w, h) = (model.encoder.config.input_width, model.encoder.config.input_height);
    let cin = model.encoder.config.in_channels;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = nn::zeros_like(&model);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (frame, label) = &data[i];
                let x = frame_input::<f32>(frame, cin)?;
                let (feat, ecache) = model.encoder.forward(&x)?;
                let (out, hcache) = model.head.forward(&feat)?;
                let target = TaskOutput::from_label(label, task, w, h);
                let (loss, dout) = losses::task_loss_grad(&out, &target)?;
                batch_loss += loss;
                let dfeat = model.head.backward(&hcache, &dout, Some(&mut grads.head));
                model.encoder.backward(&ecache, &dfeat, &mut grads.encoder);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: opt.steps(),
                    last_good: format!("none (pretraining epoch {epoch})"),
                });
            }
            let scale = 1.0 / batch.len() as f32;
            grads.visit_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v *= scale));
            opt.step(&mut model, &grads);
            epoch_loss += batch_loss;
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok((BaseModel::freeze(model), history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(cin: usize) -> EncoderConfig {
        EncoderConfig::new(cin, vec![16, 32, 64], 64, 64)
    }

    #[test]
    fn output_shape_follows_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc: Encoder<f32> = Encoder::new(cfg(1), &mut rng).unwrap();
        let (f, _) = enc.forward(&vec![0.5; 64 * 64]).unwrap();
        assert_eq!(f.shape(), (64, 8, 8));
        assert_eq!(f.stride, 8);
        assert!(enc.forward(&vec![0.5; 32 * 32]).is_err());
    }

    #[test]
    fn event_encoder_shares_shapes_except_first_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let im: Encoder<f32> = Encoder::new(cfg(1), &mut rng).unwrap();
        let ev: Encoder<f32> = Encoder::new(cfg(5), &mut rng).unwrap();
        let (a, b) = (im.param_shapes(), ev.param_shapes());
        assert_eq!(a.len(), b.len());
        for (i, (pa, pb)) in a.iter().zip(&b).enumerate() {
            assert_eq!(pa.0, pb.0);
            if i == 0 {
                assert_eq!(pa.1, vec![16, 9]);
                assert_eq!(pb.1, vec![16, 45]);
            } else {
                assert_eq!(pa.1, pb.1);
            }
        }
        let zero = ev.forward(&vec![0.0; 5 * 64 * 64]).unwrap().0;
        assert!(zero.is_finite());
    }

    #[test]
    fn heads_have_task_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = FeatureMap { channels: 64, height: 8, width: 8, stride: 8, data: vec![0.1f32; 4096] };
        let head: TaskHead<f32> = TaskHead::new(TaskKind::Centroid { n_shapes: 3 }, (64, 8, 8), 8, &mut rng);
        let (out, _) = head.forward(&feat).unwrap();
        assert_eq!(out.values().len(), 6);
        assert_eq!(out, head.forward(&feat).unwrap().0);
        let seg: TaskHead<f32> = TaskHead::new(TaskKind::Segmentation, (64, 8, 8), 8, &mut rng);
        match seg.forward(&feat).unwrap().0 {
            TaskOutput::MaskLogits { height, width, data } => {
                assert_eq!((height, width, data.len()), (64, 64, 4096));
            }
            _ => panic!("wrong output kind"),
        }
        let small = FeatureMap { channels: 64, height: 4, width: 4, stride: 8, data: vec![0.0f32; 1024] };
        assert!(head.forward(&small).is_err());
    }

    #[test]
    fn digest_detects_tampering() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model: ImageModel<f32> = ImageModel::new(cfg(1), TaskKind::Centroid { n_shapes: 1 }, &mut rng).unwrap();
        let base = BaseModel::freeze(model.clone());
        base.verify().unwrap();
        let mut tampered = model;
        tampered.encoder.stages[0].b.data[0] += 1.0;
        assert!(BaseModel::from_parts(tampered, base.digest().to_string()).is_err());
    }

    #[test]
    fn rgb_frames_feed_three_channel_encoders() {
        let f = Frame::new(2, 2, vec![0.1, 0.2, 0.3, 0.4], 0);
        let x: Vec<f64> = frame_input(&f.to_rgb(), 3).unwrap();
        let y: Vec<f64> = frame_input(&f, 3).unwrap();
        assert_eq!(x, y);
        assert!(frame_input::<f64>(&f.to_rgb(), 1).is_err());
    }
}
