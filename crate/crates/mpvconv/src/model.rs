//! The segmentation network: a stack of point-voxel and shared-MLP layers
//! over normalized clouds, an optional global max-pool feature, a per-point
//! classifier head, cross-entropy training with Adam, and evaluation.

use rand::seq::SliceRandom;
#[cfg(test)]
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{normalize_coords, RawCloud};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{CombinationMode, MpvConvConfig, MpvConvLayer, WIDTH_MULTIPLIERS};
use crate::metrics::{dataset_miou, mean_accuracy, overall_accuracy, shape_iou};
use crate::nn::blocks::{BufferVisitor, LinearHead, ParamVisitor, SharedMlpBlock};
use crate::nn::{seeded_rng, Activation, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    MpvConv,
    SharedMlp,
}

/// One entry of the layer stack. `resolution` is only meaningful for
/// point-voxel layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub out_channels: usize,
    pub resolution: usize,
}

impl LayerSpec {
    pub fn mpvconv(out_channels: usize, resolution: usize) -> Self {
        Self {
            kind: LayerKind::MpvConv,
            out_channels,
            resolution,
        }
    }

    pub fn shared_mlp(out_channels: usize) -> Self {
        Self {
            kind: LayerKind::SharedMlp,
            out_channels,
            resolution: 0,
        }
    }
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            LayerKind::MpvConv => write!(f, "mpvconv:{}:{}", self.out_channels, self.resolution),
            LayerKind::SharedMlp => write!(f, "mlp:{}", self.out_channels),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = |msg: &str| Error::InvalidArgument(format!("layer spec `{s}`: {msg}"));
        match parts.as_slice() {
            ["mpvconv", ch, r] => {
                let out_channels = ch.parse().map_err(|_| bad("invalid channel count"))?;
                let resolution = r.parse().map_err(|_| bad("invalid resolution"))?;
                Ok(LayerSpec::mpvconv(out_channels, resolution))
            }
            ["mlp", ch] => {
                let out_channels = ch.parse().map_err(|_| bad("invalid channel count"))?;
                Ok(LayerSpec::shared_mlp(out_channels))
            }
            _ => Err(bad("expected `mpvconv:<channels>:<resolution>` or `mlp:<channels>`")),
        }
    }
}

/// Network hyperparameters. The per-layer point-voxel knobs (combination
/// mode, fusion, 1x1x1 conv, depths, slope) apply to every point-voxel
/// layer in the stack.
#[derive(Clone, Debug)]
pub struct MpvcnnConfig {
    pub in_channels: usize,
    pub layer_specs: Vec<LayerSpec>,
    pub global_feature: bool,
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub combination_mode: CombinationMode,
    pub fusion_enabled: bool,
    pub one_by_one_conv: bool,
    pub init_conv_depth: usize,
    pub fusion_conv_depth: usize,
    pub leaky_slope: f64,
}

impl MpvcnnConfig {
    /// The default desk-scale architecture: two point-voxel layers at
    /// resolutions 16 and 8, two shared MLPs with a global max-pool feature
    /// in between, and a per-point classifier.
    pub fn desk_scale(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            layer_specs: vec![
                LayerSpec::mpvconv(32, 16),
                LayerSpec::mpvconv(64, 8),
                LayerSpec::shared_mlp(128),
                LayerSpec::shared_mlp(128),
            ],
            global_feature: true,
            num_classes,
            width_multiplier: 1.0,
            combination_mode: CombinationMode::G,
            fusion_enabled: true,
            one_by_one_conv: true,
            init_conv_depth: 2,
            fusion_conv_depth: 2,
            leaky_slope: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(true)
    }

    /// Baselines replace every point-voxel layer with shared MLPs, so the
    /// at-least-one-point-voxel-layer rule is waived for them.
    pub(crate) fn validate_with(&self, require_mpvconv: bool) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidArgument("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.layer_specs.is_empty() {
            return Err(Error::InvalidArgument("layer list must be nonempty".into()));
        }
        if require_mpvconv
            && !self
                .layer_specs
                .iter()
                .any(|s| s.kind == LayerKind::MpvConv)
        {
            return Err(Error::InvalidArgument(
                "at least one mpvconv layer is required".into(),
            ));
        }
        if self.global_feature && self.layer_specs.len() < 2 {
            return Err(Error::InvalidArgument(
                "global_feature needs at least 2 layers (the pool sits before the last one)"
                    .into(),
            ));
        }
        if !WIDTH_MULTIPLIERS.contains(&self.width_multiplier) {
            return Err(Error::InvalidArgument(format!(
                "width multiplier must be one of {WIDTH_MULTIPLIERS:?}, got {}",
                self.width_multiplier
            )));
        }
        for (i, spec) in self.layer_specs.iter().enumerate() {
            if spec.out_channels == 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: out_channels must be >= 1"
                )));
            }
            if spec.kind == LayerKind::MpvConv {
                // Delegate the full per-layer validation.
                self.layer_config(1, spec).validate().map_err(|e| {
                    Error::InvalidArgument(format!("layer {i}: {e}"))
                })?;
            }
        }
        Ok(())
    }

    fn layer_config(&self, in_channels: usize, spec: &LayerSpec) -> MpvConvConfig {
        MpvConvConfig {
            in_channels,
            out_channels: spec.out_channels,
            resolution: spec.resolution,
            width_multiplier: self.width_multiplier,
            combination_mode: self.combination_mode,
            fusion_enabled: self.fusion_enabled,
            one_by_one_conv: self.one_by_one_conv,
            init_conv_depth: self.init_conv_depth,
            fusion_conv_depth: self.fusion_conv_depth,
            leaky_slope: self.leaky_slope,
        }
    }

    /// Flat key=value serialization, embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let layers = self
            .layer_specs
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "in_channels={}\nlayers={}\nglobal_feature={}\nnum_classes={}\nwidth_multiplier={}\ncombination_mode={}\nfusion={}\none_by_one_conv={}\ninit_conv_depth={}\nfusion_conv_depth={}\nleaky_slope={}\n",
            self.in_channels,
            layers,
            self.global_feature,
            self.num_classes,
            self.width_multiplier,
            self.combination_mode,
            self.fusion_enabled,
            self.one_by_one_conv,
            self.init_conv_depth,
            self.fusion_conv_depth,
            self.leaky_slope
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = MpvcnnConfig::desk_scale(1, 2);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {} has no `=`", lineno + 1))
            })?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one key=value assignment (keys as in [`Self::to_kv`]).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| {
            Error::InvalidArgument(format!("invalid value `{value}` for `{key}`: {what}"))
        };
        match key {
            "in_channels" => self.in_channels = value.parse().map_err(|_| bad("usize"))?,
            "layers" => {
                let mut specs = Vec::new();
                for part in value.split(',') {
                    specs.push(part.parse()?);
                }
                self.layer_specs = specs;
            }
            "global_feature" => self.global_feature = value.parse().map_err(|_| bad("bool"))?,
            "num_classes" => self.num_classes = value.parse().map_err(|_| bad("usize"))?,
            "width_multiplier" => {
                self.width_multiplier = value.parse().map_err(|_| bad("float"))?
            }
            "combination_mode" => self.combination_mode = value.parse()?,
            "fusion" => self.fusion_enabled = value.parse().map_err(|_| bad("bool"))?,
            "one_by_one_conv" => self.one_by_one_conv = value.parse().map_err(|_| bad("bool"))?,
            "init_conv_depth" => self.init_conv_depth = value.parse().map_err(|_| bad("usize"))?,
            "fusion_conv_depth" => {
                self.fusion_conv_depth = value.parse().map_err(|_| bad("usize"))?
            }
            "leaky_slope" => self.leaky_slope = value.parse().map_err(|_| bad("float"))?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model config key `{other}`"
                )))
            }
        }
        Ok(())
    }
}

enum NetLayer<T> {
    MpvConv(MpvConvLayer<T>),
    SharedMlp(SharedMlpBlock<T>),
}

struct PoolCache {
    argmax: Vec<usize>,
    channels: usize,
    points: usize,
}

/// The segmentation network.
pub struct Mpvcnn<T> {
    cfg: MpvcnnConfig,
    layers: Vec<NetLayer<T>>,
    head: LinearHead<T>,
    pool_cache: Option<PoolCache>,
}

impl<T: Scalar> Mpvcnn<T> {
    pub fn build(cfg: MpvcnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::build_unchecked(cfg, seed)
    }

    pub(crate) fn build_unchecked(cfg: MpvcnnConfig, seed: u64) -> Result<Self> {
        cfg.validate_with(false)?;
        let mut layers = Vec::with_capacity(cfg.layer_specs.len());
        let mut channels = cfg.in_channels;
        let last = cfg.layer_specs.len() - 1;
        for (i, spec) in cfg.layer_specs.iter().enumerate() {
            if cfg.global_feature && i == last {
                channels *= 2;
            }
            let name = format!("l{i}");
            match spec.kind {
                LayerKind::MpvConv => {
                    let layer_cfg = cfg.layer_config(channels, spec);
                    let layer = MpvConvLayer::new(&name, layer_cfg, seed).map_err(|e| {
                        Error::InvalidArgument(format!("layer {i}: {e}"))
                    })?;
                    channels = layer.out_channels();
                    layers.push(NetLayer::MpvConv(layer));
                }
                LayerKind::SharedMlp => {
                    let block = SharedMlpBlock::new(
                        &name,
                        channels,
                        spec.out_channels,
                        Activation::Relu,
                        seed,
                    );
                    channels = spec.out_channels;
                    layers.push(NetLayer::SharedMlp(block));
                }
            }
        }
        let head = LinearHead::new("head", channels, cfg.num_classes, seed);
        Ok(Self {
            cfg,
            layers,
            head,
            pool_cache: None,
        })
    }

    pub fn config(&self) -> &MpvcnnConfig {
        &self.cfg
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<T>) {
        for layer in &mut self.layers {
            match layer {
                NetLayer::MpvConv(l) => l.visit_params(f),
                NetLayer::SharedMlp(l) => l.visit_params(f),
            }
        }
        self.head.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<T>) {
        for layer in &mut self.layers {
            match layer {
                NetLayer::MpvConv(l) => l.visit_buffers(f),
                NetLayer::SharedMlp(l) => l.visit_buffers(f),
            }
        }
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.numel());
        total
    }

    pub fn reset_gradients(&mut self) {
        self.visit_params(&mut |p| p.reset_grad());
    }

    /// Max over points per channel, concatenated back onto every point:
    /// `[B,C,N] -> [B,2C,N]`.
    fn concat_global_max(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[b, 2 * c, n]);
        let mut argmax = vec![0usize; b * c];
        let xd = x.data();
        let od = out.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let src = &xd[(bi * c + ch) * n..][..n];
                od[(bi * 2 * c + ch) * n..][..n].copy_from_slice(src);
                let mut best = 0usize;
                for (idx, &v) in src.iter().enumerate() {
                    if v > src[best] {
                        best = idx;
                    }
                }
                argmax[bi * c + ch] = best;
                od[(bi * 2 * c + c + ch) * n..][..n].fill(src[best]);
            }
        }
        if mode == Mode::Train {
            self.pool_cache = Some(PoolCache {
                argmax,
                channels: c,
                points: n,
            });
        }
        out
    }

    /// Backward of [`Self::concat_global_max`]: the broadcast half routes its
    /// summed gradient to the argmax point of each channel.
    fn concat_global_max_backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self
            .pool_cache
            .take()
            .expect("global pool backward without forward");
        let (c, n) = (cache.channels, cache.points);
        let b = grad.shape()[0];
        let mut out = Tensor::zeros(&[b, c, n]);
        let gd = grad.data();
        let od = out.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let direct = &gd[(bi * 2 * c + ch) * n..][..n];
                od[(bi * c + ch) * n..][..n].copy_from_slice(direct);
                let pooled = &gd[(bi * 2 * c + c + ch) * n..][..n];
                let mut acc = T::zero();
                for &v in pooled {
                    acc += v;
                }
                od[(bi * c + ch) * n + cache.argmax[bi * c + ch]] += acc;
            }
        }
        out
    }

    /// Batched forward over normalized coordinates: `[B,K,N]` logits.
    pub fn forward_batch(
        &mut self,
        coords_hat: &[Vec<[f64; 3]>],
        features: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        if features.rank() != 3 || features.shape()[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "model input features".into(),
                expected: format!("[B,{},N]", self.cfg.in_channels),
                got: format!("{:?}", features.shape()),
            });
        }
        let last = self.layers.len() - 1;
        let global = self.cfg.global_feature;
        let mut x = features.clone();
        for i in 0..self.layers.len() {
            if global && i == last {
                x = self.concat_global_max(&x, mode);
            }
            x = match &mut self.layers[i] {
                NetLayer::MpvConv(l) => l.forward(coords_hat, &x, mode)?,
                NetLayer::SharedMlp(l) => l.forward(&x, mode)?,
            };
        }
        self.head.forward(&x, mode)
    }

    /// Backward through the whole network; parameter gradients accumulate
    /// into the `Parameter` buffers.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let mut g = self.head.backward(grad_logits)?;
        let last = self.layers.len() - 1;
        let global = self.cfg.global_feature;
        for i in (0..self.layers.len()).rev() {
            g = match &mut self.layers[i] {
                NetLayer::MpvConv(l) => l.backward(&g)?,
                NetLayer::SharedMlp(l) => l.backward(&g)?,
            };
            if global && i == last {
                g = self.concat_global_max_backward(&g);
            }
        }
        Ok(())
    }

    /// Per-cloud forward: normalize, run the network, return `[N,K]` logits.
    pub fn forward_cloud(&mut self, cloud: &RawCloud<T>, mode: Mode) -> Result<Tensor<T>> {
        if cloud.feature_channels() != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "cloud features".into(),
                expected: format!("{} channels", self.cfg.in_channels),
                got: format!("{}", cloud.feature_channels()),
            });
        }
        let norm = normalize_coords(cloud)?;
        let n = cloud.num_points();
        let c = cloud.feature_channels();
        let features = Tensor::from_fn(&[1, c, n], |off| {
            let (ch, pt) = (off / n, off % n);
            norm.features.data()[pt * c + ch]
        });
        let logits = self.forward_batch(&[norm.coords_hat], &features, mode)?;
        let k = self.cfg.num_classes;
        Ok(Tensor::from_fn(&[n, k], |off| {
            let (pt, cls) = (off / k, off % k);
            logits.data()[cls * n + pt]
        }))
    }

    /// Argmax class per point, ties broken toward the smaller class id.
    pub fn predict(&mut self, cloud: &RawCloud<T>) -> Result<Vec<u32>> {
        let logits = self.forward_cloud(cloud, Mode::Eval)?;
        Ok(argmax_rows(&logits))
    }
}

/// Row-wise argmax with ties broken toward the smaller index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let data = logits.data();
    (0..n)
        .map(|pt| {
            let row = &data[pt * k..][..k];
            let mut best = 0usize;
            for (idx, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = idx;
                }
            }
            best as u32
        })
        .collect()
}

/// Mean per-point cross-entropy over the batch (points first, then samples)
/// and its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[&[u32]],
) -> Result<(f64, Tensor<T>)> {
    let (b, k, n) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if labels.len() != b || labels.iter().any(|l| l.len() != n) {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy labels".into(),
            expected: format!("{b} label rows of {n}"),
            got: format!("{:?}", labels.iter().map(|l| l.len()).collect::<Vec<_>>()),
        });
    }
    let ld = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut total = 0.0f64;
    let scale = 1.0 / (b as f64 * n as f64);
    for bi in 0..b {
        for pt in 0..n {
            let label = labels[bi][pt] as usize;
            if label >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {k} classes"
                )));
            }
            let mut max = f64::MIN;
            for cls in 0..k {
                max = max.max(ld[(bi * k + cls) * n + pt].as_f64());
            }
            let mut denom = 0.0f64;
            for cls in 0..k {
                denom += (ld[(bi * k + cls) * n + pt].as_f64() - max).exp();
            }
            let lse = max + denom.ln();
            total += (lse - ld[(bi * k + label) * n + pt].as_f64()) * scale;
            for cls in 0..k {
                let softmax = (ld[(bi * k + cls) * n + pt].as_f64() - max).exp() / denom;
                let indicator = if cls == label { 1.0 } else { 0.0 };
                gd[(bi * k + cls) * n + pt] = T::from_f64((softmax - indicator) * scale);
            }
        }
    }
    Ok((total, grad))
}

/// Adam optimizer with bias correction. Moment buffers align with the
/// model's parameter visitation order.
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Mpvcnn<T>) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        let mut idx = 0usize;
        model.visit_params(&mut |p| {
            if moments.len() == idx {
                moments.push((Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            }
            let (m, v) = &mut moments[idx];
            let (md, vd) = (m.data_mut(), v.data_mut());
            let (pd, gd) = (p.value.data_mut(), p.grad.data());
            for i in 0..pd.len() {
                let g = gd[i].as_f64();
                let mi = b1 * md[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * vd[i].as_f64() + (1.0 - b2) * g * g;
                md[i] = T::from_f64(mi);
                vd[i] = T::from_f64(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                pd[i] = T::from_f64(pd[i].as_f64() - update);
            }
            idx += 1;
        });
    }

    pub(crate) fn moments(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.moments
    }

    pub(crate) fn set_moments(&mut self, moments: Vec<(Tensor<T>, Tensor<T>)>) {
        self.moments = moments;
    }
}

/// The training objective. Cross-entropy is the only implemented loss;
/// the field exists so configs state it explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss `{other}` (expected `cross_entropy`)"
            ))),
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Stop once validation mIoU and accuracy both reach their targets.
    pub target_miou: Option<f64>,
    pub target_accuracy: Option<f64>,
    /// Stop after this many epochs without validation mIoU improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.001,
            epochs: 50,
            seed: 0,
            loss: LossKind::CrossEntropy,
            target_miou: None,
            target_accuracy: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_macc: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome<T> {
    pub metrics: Vec<EpochMetrics>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub epochs_run: usize,
}

/// Evaluation summary over a dataset.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub miou: f64,
    pub macc: f64,
    pub accuracy: f64,
    pub per_class_iou: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub num_shapes: usize,
}

/// Evaluate the model on a dataset: per-shape IoU averaged into mIoU, plus
/// dataset-level class metrics over the pooled points.
pub fn evaluate<T: Scalar>(model: &mut Mpvcnn<T>, set: &Dataset<T>) -> Result<EvalReport> {
    let k = set.class_count;
    let parts: Vec<u32> = (0..k as u32).collect();
    let mut per_shape = Vec::with_capacity(set.len());
    let mut all_true: Vec<u32> = Vec::new();
    let mut all_pred: Vec<u32> = Vec::new();
    for (i, cloud) in set.samples.iter().enumerate() {
        let labels = cloud.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("sample {i} has no labels; cannot evaluate"))
        })?;
        let pred = model.predict(cloud)?;
        per_shape.push(shape_iou(labels, &pred, &parts)?);
        all_true.extend_from_slice(labels);
        all_pred.extend_from_slice(&pred);
    }
    let mut per_class_iou = Vec::with_capacity(k);
    let mut per_class_recall = Vec::with_capacity(k);
    for cls in 0..k as u32 {
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut support = 0usize;
        let mut correct = 0usize;
        for (&t, &p) in all_true.iter().zip(&all_pred) {
            if t == cls && p == cls {
                inter += 1;
            }
            if t == cls || p == cls {
                union += 1;
            }
            if t == cls {
                support += 1;
                if p == cls {
                    correct += 1;
                }
            }
        }
        per_class_iou.push(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        });
        per_class_recall.push(if support == 0 {
            f64::NAN
        } else {
            correct as f64 / support as f64
        });
    }
    Ok(EvalReport {
        miou: dataset_miou(&per_shape)?,
        macc: mean_accuracy(&all_true, &all_pred, k)?,
        accuracy: overall_accuracy(&all_true, &all_pred)?,
        per_class_iou,
        per_class_recall,
        num_shapes: set.len(),
    })
}

/// Train with Adam on mean per-point cross-entropy, shuffling with the
/// seeded RNG and evaluating on the held-out set after every epoch.
pub fn train<T: Scalar>(
    model: &mut Mpvcnn<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if train_set.class_count != model.cfg.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model expects {}",
            train_set.class_count, model.cfg.num_classes
        )));
    }
    if train_set.feature_channels() != model.cfg.in_channels {
        return Err(Error::ShapeMismatch {
            context: "training features".into(),
            expected: format!("{} channels", model.cfg.in_channels),
            got: format!("{}", train_set.feature_channels()),
        });
    }
    let n = train_set.samples[0].num_points();
    for (i, sample) in train_set.samples.iter().enumerate() {
        if sample.num_points() != n {
            return Err(Error::InvalidArgument(format!(
                "training batches need a uniform point count; sample {i} has {} points, expected {n}",
                sample.num_points()
            )));
        }
        if sample.labels.is_none() {
            return Err(Error::InvalidArgument(format!("sample {i} has no labels")));
        }
    }

    // Normalization is pose-independent of training, do it once.
    let normalized: Vec<_> = train_set
        .samples
        .iter()
        .map(normalize_coords)
        .collect::<Result<Vec<_>>>()?;
    let c1 = train_set.feature_channels();

    let mut rng = seeded_rng(tcfg.seed, "train-shuffle");
    let mut adam = Adam::new(tcfg.learning_rate);
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best_miou = f64::NEG_INFINITY;
    let mut epochs_without_improvement = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut features = Tensor::zeros(&[b, c1, n]);
            let mut coords: Vec<Vec<[f64; 3]>> = Vec::with_capacity(b);
            let mut labels: Vec<&[u32]> = Vec::with_capacity(b);
            {
                let fd = features.data_mut();
                for (slot, &si) in chunk.iter().enumerate() {
                    coords.push(normalized[si].coords_hat.clone());
                    let src = normalized[si].features.data();
                    for ch in 0..c1 {
                        for pt in 0..n {
                            fd[(slot * c1 + ch) * n + pt] = src[pt * c1 + ch];
                        }
                    }
                    labels.push(train_set.samples[si].labels.as_deref().unwrap());
                }
            }
            let logits = model.forward_batch(&coords, &features, Mode::Train)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            model.reset_gradients();
            model.backward(&grad)?;
            adam.step(model);
            epoch_loss += loss;
            batches += 1;
        }
        let report = evaluate(model, val_set)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_miou: report.miou,
            val_macc: report.macc,
            val_accuracy: report.accuracy,
        });
        epochs_run = epoch + 1;

        let target_hit = (tcfg.target_miou.is_some() || tcfg.target_accuracy.is_some())
            && tcfg.target_miou.is_none_or(|t| report.miou >= t)
            && tcfg.target_accuracy.is_none_or(|t| report.accuracy >= t);
        if target_hit {
            break;
        }
        if report.miou > best_miou {
            best_miou = report.miou;
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if tcfg
                .patience
                .is_some_and(|p| epochs_without_improvement >= p)
            {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        metrics,
        adam,
        rng,
        epochs_run,
    })
}

/// Build the point-only counterpart of a network: every point-voxel layer is
/// replaced by a shared MLP whose width is scaled so the total parameter
/// count comes as close as possible to the reference model's. Returns the
/// baseline and its config.
pub fn build_point_baseline<T: Scalar>(
    cfg: &MpvcnnConfig,
    seed: u64,
) -> Result<(Mpvcnn<T>, MpvcnnConfig)> {
    let mut reference = Mpvcnn::<T>::build(cfg.clone(), seed)?;
    let target = reference.parameter_count();

    let mut best: Option<(usize, MpvcnnConfig)> = None;
    for alpha_halves in 2..=32 {
        let alpha = alpha_halves as f64 * 0.5;
        let mut candidate = cfg.clone();
        candidate.layer_specs = cfg
            .layer_specs
            .iter()
            .map(|spec| match spec.kind {
                LayerKind::MpvConv => LayerSpec::shared_mlp(
                    ((spec.out_channels as f64 * alpha).round() as usize).max(1),
                ),
                LayerKind::SharedMlp => spec.clone(),
            })
            .collect();
        let mut model = Mpvcnn::<T>::build_unchecked(candidate.clone(), seed)?;
        let count = model.parameter_count();
        let diff = count.abs_diff(target);
        if best.as_ref().is_none_or(|(d, _)| diff < *d) {
            best = Some((diff, candidate));
        }
    }
    let (_, cfg_best) = best.expect("alpha grid is nonempty");
    let model = Mpvcnn::<T>::build_unchecked(cfg_best.clone(), seed)?;
    Ok((model, cfg_best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_config() -> MpvcnnConfig {
        let mut cfg = MpvcnnConfig::desk_scale(1, 2);
        cfg.layer_specs = vec![
            LayerSpec::mpvconv(6, 4),
            LayerSpec::mpvconv(8, 4),
            LayerSpec::shared_mlp(12),
            LayerSpec::shared_mlp(12),
        ];
        cfg
    }

    fn tiny_set(n_samples: usize, points: usize, seed: u64) -> Dataset<f32> {
        generate_synthetic(
            &SyntheticSpec {
                n_samples,
                points_per_cloud: points,
                noise_sigma: 0.02,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn layer_spec_round_trip() {
        for text in ["mpvconv:32:16", "mlp:128"] {
            let spec: LayerSpec = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
        assert!("mpvconv:32".parse::<LayerSpec>().is_err());
        assert!("conv:1:2".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = MpvcnnConfig::desk_scale(1, 2);
        let parsed = MpvcnnConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(parsed.layer_specs, cfg.layer_specs);
        assert_eq!(parsed.num_classes, cfg.num_classes);
        assert_eq!(parsed.combination_mode, cfg.combination_mode);
        assert!(MpvcnnConfig::from_kv("bogus_key=1\n").is_err());
    }

    #[test]
    fn config_validation_rules() {
        let mut cfg = tiny_config();
        assert!(cfg.validate().is_ok());
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        cfg.num_classes = 2;
        cfg.layer_specs = vec![LayerSpec::shared_mlp(8), LayerSpec::shared_mlp(8)];
        assert!(cfg.validate().is_err()); // no mpvconv layer
        cfg.layer_specs = vec![LayerSpec::mpvconv(8, 4)];
        cfg.global_feature = true;
        assert!(cfg.validate().is_err()); // pool needs 2+ layers
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let mut a = Mpvcnn::<f32>::build(tiny_config(), 5).unwrap();
        let mut b = Mpvcnn::<f32>::build(tiny_config(), 5).unwrap();
        let mut c = Mpvcnn::<f32>::build(tiny_config(), 6).unwrap();
        let collect = |m: &mut Mpvcnn<f32>| {
            let mut v = Vec::new();
            m.visit_params(&mut |p| v.push(p.value.clone()));
            v
        };
        assert_eq!(collect(&mut a), collect(&mut b));
        assert_ne!(collect(&mut a), collect(&mut c));
    }

    #[test]
    fn parameter_count_matches_shape_walk_oracle() {
        let cfg = MpvcnnConfig::desk_scale(1, 2);
        let mut model = Mpvcnn::<f32>::build(cfg.clone(), 0).unwrap();

        // Independent walk over the documented architecture shapes.
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co + 2 * co;
        let mlp = |ci: usize, co: usize| co * ci + co + 2 * co;
        let mpv_layer = |c1: usize, c2: usize| {
            let init = conv(c1, c2, 3) + conv(c2, c2, 3) + mlp(c1, c2);
            let fusion = conv(c2, c2, 1) + conv(c2, c2, 3) + conv(c2, c2, 3) + mlp(c2, c2);
            init + fusion
        };
        let expected = mpv_layer(1, 32)
            + mpv_layer(32, 64)
            + mlp(64, 128)
            + mlp(2 * 128, 128)
            + (128 * 2 + 2);
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn width_multiplier_halves_mpvconv_channels() {
        let mut cfg = tiny_config();
        cfg.layer_specs = vec![LayerSpec::mpvconv(8, 4), LayerSpec::shared_mlp(12)];
        cfg.width_multiplier = 0.5;
        let mut model = Mpvcnn::<f32>::build(cfg, 0).unwrap();
        // First layer output channels must be round(8 * 0.5) = 4; the check
        // rides on the second layer's weight shape [12, 2*4].
        let mut shapes = Vec::new();
        model.visit_params(&mut |p| shapes.push((p.name.clone(), p.value.shape().to_vec())));
        let l1_weight = shapes.iter().find(|(n, _)| n == "l1.weight").unwrap();
        assert_eq!(l1_weight.1, vec![12, 8]);
    }

    #[test]
    fn forward_cloud_shape_and_determinism() {
        let mut model = Mpvcnn::<f32>::build(tiny_config(), 1).unwrap();
        let set = tiny_set(1, 40, 2);
        let logits_a = model.forward_cloud(&set.samples[0], Mode::Eval).unwrap();
        let logits_b = model.forward_cloud(&set.samples[0], Mode::Eval).unwrap();
        assert_eq!(logits_a.shape(), &[40, 2]);
        assert_eq!(logits_a, logits_b);
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let mut model = Mpvcnn::<f32>::build(tiny_config(), 1).unwrap();
        let cloud = RawCloud::new(
            vec![[0.0; 3]; 20],
            Tensor::full(&[20, 3], 1.0f32),
            Some(vec![0; 20]),
        )
        .unwrap();
        assert!(model.forward_cloud(&cloud, Mode::Eval).is_err());
    }

    #[test]
    fn logits_are_permutation_equivariant() {
        let mut model = Mpvcnn::<f32>::build(tiny_config(), 3).unwrap();
        let set = tiny_set(1, 50, 4);
        let cloud = &set.samples[0];
        let logits = model.forward_cloud(cloud, Mode::Eval).unwrap();

        let perm: Vec<usize> = (0..50).rev().collect();
        let permuted = RawCloud::new(
            perm.iter().map(|&i| cloud.coords[i]).collect(),
            Tensor::from_fn(&[50, 1], |off| cloud.features.data()[perm[off]]),
            cloud
                .labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
        )
        .unwrap();
        let logits_p = model.forward_cloud(&permuted, Mode::Eval).unwrap();
        let mut max_diff = 0.0f64;
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            for cls in 0..2 {
                let d = (logits_p.at(&[new_idx, cls]) as f64 - logits.at(&[old_idx, cls]) as f64)
                    .abs();
                max_diff = max_diff.max(d);
            }
        }
        assert!(max_diff < 1e-4, "max diff {max_diff}");
    }

    #[test]
    fn argmax_tie_breaks_toward_smaller_class() {
        let logits = Tensor::new(&[3, 2], vec![0.1f32, 0.9, 0.5, 0.5, 0.9, 0.1]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![1, 0, 0]);
        // Positive rescaling never changes the argmax.
        assert_eq!(argmax_rows(&logits.scale(7.5)), vec![1, 0, 0]);
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Single point, two classes, logits (0, ln 3): softmax (1/4, 3/4).
        let logits = Tensor::new(&[1, 2, 1], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let labels: Vec<&[u32]> = vec![&[1]];
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((grad.data()[0] - 0.25).abs() < 1e-12);
        assert!((grad.data()[1] - -0.25).abs() < 1e-12);
        // Bad label is rejected.
        let bad: Vec<&[u32]> = vec![&[2]];
        assert!(cross_entropy(&logits, &bad).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_exact() {
        let mut model = Mpvcnn::<f32>::build(tiny_config(), 7).unwrap();
        let mut before = Vec::new();
        model.visit_params(&mut |p| before.push(p.value.clone()));
        let train_set = tiny_set(4, 24, 8);
        let val_set = tiny_set(2, 24, 9);
        let tcfg = TrainConfig {
            batch_size: 2,
            learning_rate: 0.0,
            epochs: 1,
            seed: 0,
            ..TrainConfig::default()
        };
        train(&mut model, &train_set, &val_set, &tcfg).unwrap();
        let mut after = Vec::new();
        model.visit_params(&mut |p| after.push(p.value.clone()));
        assert_eq!(before, after);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut model = Mpvcnn::<f32>::build(tiny_config(), 11).unwrap();
        let set = tiny_set(2, 32, 12);
        let norm: Vec<_> = set
            .samples
            .iter()
            .map(|s| normalize_coords(s).unwrap())
            .collect();
        let coords: Vec<_> = norm.iter().map(|n| n.coords_hat.clone()).collect();
        // Random features: a constant channel would zero the first point
        // branch through batch norm and the relu subgradient at 0.
        let mut rng = seeded_rng(19, "gradient-flow");
        let features =
            Tensor::from_fn(&[2, 1, 32], |_| rng.random::<f32>() * 2.0 - 1.0);
        let logits = model.forward_batch(&coords, &features, Mode::Train).unwrap();
        let labels: Vec<&[u32]> = set
            .samples
            .iter()
            .map(|s| s.labels.as_deref().unwrap())
            .collect();
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        model.reset_gradients();
        model.backward(&grad).unwrap();
        model.visit_params(&mut |p| {
            assert!(
                p.grad.data().iter().any(|&g| g != 0.0),
                "dead parameter {}",
                p.name
            );
        });
    }

    #[test]
    fn training_loss_decreases_and_seeded_runs_match() {
        let mut model_a = Mpvcnn::<f32>::build(tiny_config(), 13).unwrap();
        let mut model_b = Mpvcnn::<f32>::build(tiny_config(), 13).unwrap();
        let train_set = tiny_set(8, 32, 14);
        let val_set = tiny_set(2, 32, 15);
        let tcfg = TrainConfig {
            batch_size: 4,
            learning_rate: 0.005,
            epochs: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let out_a = train(&mut model_a, &train_set, &val_set, &tcfg).unwrap();
        let out_b = train(&mut model_b, &train_set, &val_set, &tcfg).unwrap();
        assert!(out_a.metrics.last().unwrap().train_loss < out_a.metrics[0].train_loss);
        for (ma, mb) in out_a.metrics.iter().zip(&out_b.metrics) {
            assert_eq!(ma.train_loss.to_bits(), mb.train_loss.to_bits());
            assert_eq!(ma.val_miou.to_bits(), mb.val_miou.to_bits());
        }
    }

    #[test]
    fn baseline_replaces_mpvconv_and_matches_budget() {
        let cfg = tiny_config();
        let mut reference = Mpvcnn::<f32>::build(cfg.clone(), 0).unwrap();
        let (mut baseline, bcfg) = build_point_baseline::<f32>(&cfg, 0).unwrap();
        assert!(bcfg
            .layer_specs
            .iter()
            .all(|s| s.kind == LayerKind::SharedMlp));
        let target = reference.parameter_count();
        let got = baseline.parameter_count();
        let ratio = got as f64 / target as f64;
        assert!((0.5..=1.5).contains(&ratio), "params {got} vs {target}");
    }

    #[test]
    fn train_rejects_ragged_point_counts() {
        let mut model = Mpvcnn::<f32>::build(tiny_config(), 1).unwrap();
        let mut set = tiny_set(2, 24, 16);
        let other = tiny_set(1, 30, 17);
        set.samples.push(other.samples[0].clone());
        let tcfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let val = tiny_set(1, 24, 18);
        assert!(train(&mut model, &set, &val, &tcfg).is_err());
    }
}

