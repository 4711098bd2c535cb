//! The five-component conditional VAE.
//!
//! * motion encoder: maps an (image, difference-image) pair to the posterior
//!   mean and log-variance of the latent motion code;
//! * kernel decoder: maps a latent code to one bank of depthwise kernels per
//!   pyramid scale;
//! * image encoder: maps the image pyramid to feature maps at a quarter of
//!   each scale's resolution;
//! * cross-convolution: applies the sample-specific kernels to the feature
//!   maps;
//! * motion decoder: fuses all scales into a predicted difference image.
//!
//! All graph construction happens on a caller-supplied [`Tape`], so the same
//! code serves training (with gradients and batch-statistics collection) and
//! inference (frozen leaves, running statistics).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::norm::BnBatchStats;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{num, Element, Tensor};

/// Whether batch normalization uses batch statistics (training) or running
/// statistics (inference).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters. The latent dimensionality is not a free
/// choice: `D = pyramid_scales.len() * maps_per_scale * kernel_size^2`,
/// because the latent code is reshaped into the depthwise kernel bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Side length of the square input frames.
    pub input_resolution: usize,
    /// Pyramid scales, each dividing `input_resolution` and divisible by 4
    /// (the image encoder halves resolution twice).
    pub pyramid_scales: Vec<usize>,
    /// Feature maps (and kernel count) per scale.
    pub maps_per_scale: usize,
    /// Side length of the depthwise kernels; odd.
    pub kernel_size: usize,
    /// Observation noise of the decoder; the reconstruction term is scaled
    /// by `1 / sigma^2`.
    pub sigma: f64,
    /// Monte Carlo samples per training pair for the reconstruction term.
    pub mc_samples: usize,
    /// Output channels of the six motion-encoder convolutions. The last one
    /// is constrained: `motion_channels[5] * (input_resolution/8)^2` must
    /// equal `2 * D` (mean and log-variance, flattened).
    pub motion_channels: Vec<usize>,
    /// Output channels of the four image-encoder convolutions per scale; the
    /// last must equal `maps_per_scale`.
    pub image_channels: Vec<usize>,
    /// Output channels of the three motion-decoder convolutions; the last
    /// must be 3 (RGB difference image).
    pub decoder_channels: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_resolution: 32,
            pyramid_scales: vec![32, 16],
            maps_per_scale: 8,
            kernel_size: 5,
            sigma: 0.1,
            mc_samples: 1,
            motion_channels: vec![24, 24, 48, 48, 50, 50],
            image_channels: vec![24, 24, 24, 8],
            decoder_channels: vec![32, 32, 3],
        }
    }
}

impl NetConfig {
    /// Latent dimensionality implied by the kernel-bank geometry.
    pub fn latent_dim(&self) -> usize {
        self.pyramid_scales.len() * self.maps_per_scale * self.kernel_size * self.kernel_size
    }

    pub fn validate(&self) -> Result<()> {
        let res = self.input_resolution;
        if res < 16 || res % 8 != 0 {
            return Err(Error::Config(format!(
                "input_resolution must be a multiple of 8 and at least 16, got {res}"
            )));
        }
        if self.pyramid_scales.is_empty() {
            return Err(Error::Config("pyramid_scales must not be empty".into()));
        }
        for &s in &self.pyramid_scales {
            if s < 4 || s % 4 != 0 || res % s != 0 {
                return Err(Error::Config(format!(
                    "pyramid scale {s} must be a multiple of 4 dividing input_resolution {res}"
                )));
            }
        }
        if self.maps_per_scale == 0 {
            return Err(Error::Config("maps_per_scale must be at least 1".into()));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd and at least 3, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.motion_channels.len() != 6 || self.motion_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "motion_channels needs 6 positive entries, got {:?}",
                self.motion_channels
            )));
        }
        if self.image_channels.len() != 4 || self.image_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "image_channels needs 4 positive entries, got {:?}",
                self.image_channels
            )));
        }
        if *self.image_channels.last().unwrap() != self.maps_per_scale {
            return Err(Error::Config(format!(
                "image_channels must end in maps_per_scale ({}), got {:?}",
                self.maps_per_scale, self.image_channels
            )));
        }
        if self.decoder_channels.len() != 3 || self.decoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "decoder_channels needs 3 positive entries, got {:?}",
                self.decoder_channels
            )));
        }
        if *self.decoder_channels.last().unwrap() != 3 {
            return Err(Error::Config(format!(
                "decoder_channels must end in 3 (RGB difference), got {:?}",
                self.decoder_channels
            )));
        }
        let head = res / 8;
        let stat_values = self.motion_channels[5] * head * head;
        if stat_values != 2 * self.latent_dim() {
            return Err(Error::Config(format!(
                "motion encoder head produces {stat_values} values \
                 (motion_channels[5]={} at {head}x{head}) but the latent code needs \
                 2*D = {} (D = scales {} * maps {} * kernel {}^2)",
                self.motion_channels[5],
                2 * self.latent_dim(),
                self.pyramid_scales.len(),
                self.maps_per_scale,
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Role of a parameter tensor; running statistics are state, not trainable.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

pub struct ParamEntry<E> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<E>,
}

/// Named parameter store with a stable, blueprint-defined order (the order
/// is part of the determinism and checkpoint contracts).
pub struct ModelParams<E: Element> {
    entries: Vec<ParamEntry<E>>,
    index: BTreeMap<String, usize>,
}

impl<E: Element> ModelParams<E> {
    fn from_entries(entries: Vec<ParamEntry<E>>) -> Self {
        let index =
            entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        ModelParams { entries, index }
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    fn expect(&self, name: &str) -> &Tensor<E> {
        self.get(name).unwrap_or_else(|| panic!("parameter {name} missing from blueprint"))
    }

    /// Total number of trainable scalar values.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.tensor.numel())
            .sum()
    }
}

/// One layer's batch statistics from a training-mode forward pass, keyed by
/// the batch-norm layer name (e.g. `me.bn1`).
pub struct BnUpdate<E> {
    pub name: String,
    pub stats: BnBatchStats<E>,
}

/// Parameter leaves registered on a tape, aligned with the entry order of
/// [`ModelParams`].
pub struct Bound {
    ids: Vec<Option<TensorId>>,
}

impl Bound {
    fn id(&self, model_index: &BTreeMap<String, usize>, name: &str) -> TensorId {
        let i = model_index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[*i].unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Ids produced by building the training graph.
pub struct TrainGraph {
    pub mu: TensorId,
    pub log_var: TensorId,
    /// Per-row KL divergence, shape `[B]`.
    pub kl_rows: TensorId,
    /// Scalar reconstruction term `0.5 * ||v_hat - v||^2 / B`, averaged over
    /// Monte Carlo samples.
    pub recon: TensorId,
    /// Predicted difference image of the last Monte Carlo sample.
    pub v_hat: TensorId,
}

/// Result of the spec-level training forward pass (loss with unit KL weight).
pub struct TrainForward<E> {
    pub v_hat: TensorId,
    pub mu: TensorId,
    pub log_var: TensorId,
    pub recon: TensorId,
    pub kl: TensorId,
    pub loss: TensorId,
    pub bn_updates: Vec<BnUpdate<E>>,
}

/// Clamp bounds for the predicted log-variance, keeping `exp` well-behaved.
const LOG_VAR_MIN: f64 = -30.0;
const LOG_VAR_MAX: f64 = 20.0;

pub struct Model<E: Element> {
    pub config: NetConfig,
    pub params: ModelParams<E>,
}

/// Per-parameter schema: name, kind and shape, in canonical order.
pub fn blueprint(config: &NetConfig) -> Vec<(String, ParamKind, Vec<usize>)> {
    let k = 5usize; // learned conv kernels are 5x5 except the decoder fuse
    let mut out: Vec<(String, ParamKind, Vec<usize>)> = Vec::new();
    let mut conv = |name: &str, cin: usize, cout: usize, ksize: usize, bn: bool| {
        out.push((format!("{name}.weight"), ParamKind::Weight, vec![cout, cin, ksize, ksize]));
        if bn {
            // Bias would be cancelled by the normalizer's mean subtraction,
            // so batch-normalized convolutions carry none.
            let bnname = name.replace("conv", "bn");
            out.push((format!("{bnname}.gamma"), ParamKind::Gamma, vec![cout]));
            out.push((format!("{bnname}.beta"), ParamKind::Beta, vec![cout]));
            out.push((format!("{bnname}.running_mean"), ParamKind::RunningMean, vec![cout]));
            out.push((format!("{bnname}.running_var"), ParamKind::RunningVar, vec![cout]));
        } else {
            out.push((format!("{name}.bias"), ParamKind::Bias, vec![cout]));
        }
    };

    // Motion encoder: six 5x5 convolutions, pooling after the 2nd, 4th and
    // 5th; the 6th is the linear statistics head.
    let mc = &config.motion_channels;
    conv("me.conv1", 6, mc[0], k, true);
    conv("me.conv2", mc[0], mc[1], k, true);
    conv("me.conv3", mc[1], mc[2], k, true);
    conv("me.conv4", mc[2], mc[3], k, true);
    conv("me.conv5", mc[3], mc[4], k, true);
    conv("me.conv6", mc[4], mc[5], k, false);

    // Kernel decoder: two 5x5 convolutions over the reshaped code.
    let bank = config.pyramid_scales.len() * config.maps_per_scale;
    conv("kd.conv1", bank, bank, k, true);
    conv("kd.conv2", bank, bank, k, false);

    // Image encoder: one four-convolution stack per scale.
    let ic = &config.image_channels;
    for s in 0..config.pyramid_scales.len() {
        conv(&format!("ie.s{s}.conv1"), 3, ic[0], k, true);
        conv(&format!("ie.s{s}.conv2"), ic[0], ic[1], k, true);
        conv(&format!("ie.s{s}.conv3"), ic[1], ic[2], k, true);
        conv(&format!("ie.s{s}.conv4"), ic[2], ic[3], k, true);
    }

    // Motion decoder: a 9x9 fuse over the concatenated scales, then two 1x1.
    let dc = &config.decoder_channels;
    conv("md.conv1", bank, dc[0], 9, true);
    conv("md.conv2", dc[0], dc[1], 1, true);
    conv("md.conv3", dc[1], dc[2], 1, false);
    out
}

impl<E: Element> Model<E> {
    /// Fresh model with truncated-normal weight init (std `sqrt(2 / fan_in)`,
    /// cut at two standard deviations), zero biases, identity batch norm.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let entries = blueprint(&config)
            .into_iter()
            .map(|(name, kind, shape)| {
                let tensor = match kind {
                    ParamKind::Weight => {
                        let fan_in: usize = shape[1..].iter().product();
                        let std = (2.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(&shape, |_| num(rng.truncated_normal(std)))
                    }
                    ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => {
                        Tensor::zeros(&shape)
                    }
                    ParamKind::Gamma | ParamKind::RunningVar => Tensor::full(&shape, E::one()),
                };
                ParamEntry { name, kind, tensor }
            })
            .collect();
        Ok(Model { config, params: ModelParams::from_entries(entries) })
    }

    /// Reassembles a model from a parameter list (checkpoint loading),
    /// verifying names and shapes against the blueprint.
    pub fn from_tensors(config: NetConfig, mut tensors: BTreeMap<String, Tensor<E>>) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        for (name, kind, shape) in blueprint(&config) {
            let tensor = tensors.remove(&name).ok_or_else(|| {
                Error::Config(format!("parameter {name} missing from checkpoint"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            entries.push(ParamEntry { name, kind, tensor });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(Model { config, params: ModelParams::from_entries(entries) })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    /// Registers parameters as tape leaves. `trainable` controls whether the
    /// leaves request gradients; running statistics are never bound (they are
    /// read directly where needed).
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> Bound {
        let ids = self
            .params
            .entries
            .iter()
            .map(|e| {
                if e.kind.trainable() {
                    let mut t = e.tensor.clone();
                    t.requires_grad = trainable;
                    Some(tape.leaf(t))
                } else {
                    None
                }
            })
            .collect();
        Bound { ids }
    }

    /// Tensors of the trainable parameters, in binding order.
    pub fn trainable_tensors(&self) -> Vec<&Tensor<E>> {
        self.params
            .entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| &e.tensor)
            .collect()
    }

    /// Builds a [`Bound`] from leaves the caller already registered, in the
    /// same order [`Model::trainable_tensors`] returns them.
    pub fn bind_ids(&self, ids: &[TensorId]) -> Bound {
        let mut it = ids.iter().copied();
        let ids = self
            .params
            .entries
            .iter()
            .map(|e| if e.kind.trainable() { Some(it.next().expect("one id per trainable")) } else { None })
            .collect();
        assert!(it.next().is_none(), "more ids than trainable parameters");
        Bound { ids }
    }

    /// Convolution followed optionally by batch norm and ReLU. Convolutions
    /// without a batch norm get a bias instead.
    #[allow(clippy::too_many_arguments)]
    fn conv_block(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        x: TensorId,
        conv: &str,
        bn: Option<&str>,
        pad: usize,
        stride: usize,
        relu: bool,
        mode: Mode,
        updates: &mut Vec<BnUpdate<E>>,
    ) -> Result<TensorId> {
        let w = bound.id(&self.params.index, &format!("{conv}.weight"));
        let mut y = tape.conv2d(x, w, pad, stride)?;
        if let Some(bn) = bn {
            let gamma = bound.id(&self.params.index, &format!("{bn}.gamma"));
            let beta = bound.id(&self.params.index, &format!("{bn}.beta"));
            y = match mode {
                Mode::Train => {
                    let (id, stats) = tape.batch_norm_train(y, gamma, beta)?;
                    updates.push(BnUpdate { name: bn.to_string(), stats });
                    id
                }
                Mode::Eval => {
                    let rm = self.params.expect(&format!("{bn}.running_mean"));
                    let rv = self.params.expect(&format!("{bn}.running_var"));
                    tape.batch_norm_eval(y, gamma, beta, rm.data(), rv.data())?
                }
            };
        } else {
            let b = bound.id(&self.params.index, &format!("{conv}.bias"));
            y = tape.bias_add(y, b)?;
        }
        if relu {
            y = tape.relu(y)?;
        }
        Ok(y)
    }

    /// Motion encoder: `[B, 3, R, R]` image and difference image to
    /// `(mu, log_var)`, each `[B, D]`. The log-variance is clamped to keep
    /// its exponential finite.
    #[allow(clippy::too_many_arguments)]
    pub fn motion_encoder(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        image: TensorId,
        diff: TensorId,
        mode: Mode,
        updates: &mut Vec<BnUpdate<E>>,
    ) -> Result<(TensorId, TensorId)> {
        let d = self.latent_dim();
        let x = tape.concat_dim1(&[image, diff])?;
        let x = self.conv_block(tape, bound, x, "me.conv1", Some("me.bn1"), 2, 1, true, mode, updates)?;
        let x = self.conv_block(tape, bound, x, "me.conv2", Some("me.bn2"), 2, 1, true, mode, updates)?;
        let x = tape.max_pool2x2(x)?;
        let x = self.conv_block(tape, bound, x, "me.conv3", Some("me.bn3"), 2, 1, true, mode, updates)?;
        let x = self.conv_block(tape, bound, x, "me.conv4", Some("me.bn4"), 2, 1, true, mode, updates)?;
        let x = tape.max_pool2x2(x)?;
        let x = self.conv_block(tape, bound, x, "me.conv5", Some("me.bn5"), 2, 1, true, mode, updates)?;
        let x = tape.max_pool2x2(x)?;
        let x = self.conv_block(tape, bound, x, "me.conv6", None, 2, 1, false, mode, updates)?;
        let b = tape.val(x).dim(0);
        let flat = tape.reshape(x, vec![b, 2 * d])?;
        let mu = tape.slice_dim1(flat, 0, d)?;
        let log_var = tape.slice_dim1(flat, d, 2 * d)?;
        let log_var = tape.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mu, log_var))
    }

    /// Kernel decoder: latent `[B, D]` to one `[B, M, k, k]` kernel bank per
    /// pyramid scale.
    pub fn kernel_decoder(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        z: TensorId,
        mode: Mode,
        updates: &mut Vec<BnUpdate<E>>,
    ) -> Result<Vec<TensorId>> {
        let b = tape.val(z).dim(0);
        let k = self.config.kernel_size;
        let m = self.config.maps_per_scale;
        let bank = self.config.pyramid_scales.len() * m;
        let x = tape.reshape(z, vec![b, bank, k, k])?;
        let x = self.conv_block(tape, bound, x, "kd.conv1", Some("kd.bn1"), 2, 1, true, mode, updates)?;
        let x = self.conv_block(tape, bound, x, "kd.conv2", None, 2, 1, false, mode, updates)?;
        (0..self.config.pyramid_scales.len())
            .map(|s| tape.slice_dim1(x, s * m, (s + 1) * m))
            .collect()
    }

    /// Image encoder: the input frame to one `[B, M, scale/4, scale/4]`
    /// feature stack per pyramid scale.
    pub fn image_encoder(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        image: TensorId,
        mode: Mode,
        updates: &mut Vec<BnUpdate<E>>,
    ) -> Result<Vec<TensorId>> {
        let res = self.config.input_resolution;
        let mut feats = Vec::new();
        for (s, &scale) in self.config.pyramid_scales.iter().enumerate() {
            let x = if scale == res { image } else { tape.downscale_nearest(image, res / scale)? };
            let p = format!("ie.s{s}");
            let x = self.conv_block(tape, bound, x, &format!("{p}.conv1"), Some(&format!("{p}.bn1")), 2, 1, true, mode, updates)?;
            let x = self.conv_block(tape, bound, x, &format!("{p}.conv2"), Some(&format!("{p}.bn2")), 2, 1, true, mode, updates)?;
            let x = tape.max_pool2x2(x)?;
            let x = self.conv_block(tape, bound, x, &format!("{p}.conv3"), Some(&format!("{p}.bn3")), 2, 1, true, mode, updates)?;
            let x = self.conv_block(tape, bound, x, &format!("{p}.conv4"), Some(&format!("{p}.bn4")), 2, 1, true, mode, updates)?;
            let x = tape.max_pool2x2(x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Cross-convolves each scale's features with its kernel bank, upsamples
    /// everything to the input resolution and fuses into a difference image.
    #[allow(clippy::too_many_arguments)]
    pub fn motion_decoder(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        features: &[TensorId],
        kernels: &[TensorId],
        mode: Mode,
        updates: &mut Vec<BnUpdate<E>>,
    ) -> Result<TensorId> {
        let res = self.config.input_resolution;
        let mut upsampled = Vec::new();
        for ((&f, &k), &scale) in features.iter().zip(kernels).zip(&self.config.pyramid_scales) {
            let crossed = tape.cross_conv2d(f, k)?;
            let factor = res / (scale / 4);
            upsampled.push(if factor == 1 {
                crossed
            } else {
                tape.upsample_nearest(crossed, factor)?
            });
        }
        let x = if upsampled.len() == 1 {
            upsampled[0]
        } else {
            tape.concat_dim1(&upsampled)?
        };
        let x = self.conv_block(tape, bound, x, "md.conv1", Some("md.bn1"), 4, 1, true, mode, updates)?;
        let x = self.conv_block(tape, bound, x, "md.conv2", Some("md.bn2"), 0, 1, true, mode, updates)?;
        self.conv_block(tape, bound, x, "md.conv3", None, 0, 1, false, mode, updates)
    }

    fn check_frames(&self, op: &'static str, t: &Tensor<E>) -> Result<()> {
        let res = self.config.input_resolution;
        let ok = t.rank() == 4
            && t.dim(0) >= 1
            && t.dim(1) == 3
            && t.dim(2) == res
            && t.dim(3) == res;
        if !ok {
            return Err(Error::Shape {
                op,
                detail: format!("expected frames [B, 3, {res}, {res}], got {:?}", t.shape()),
            });
        }
        Ok(())
    }

    /// Builds the full training graph for a batch: posterior, latent draw(s),
    /// decoded difference image(s), per-row KL and the Monte Carlo averaged
    /// reconstruction term. `noise` supplies the standard-normal draws, one
    /// `[B * D]` vector per Monte Carlo sample; `None` uses the posterior
    /// mean (the deterministic autoencoder path).
    #[allow(clippy::too_many_arguments)]
    pub fn build_graph(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        image: &Tensor<E>,
        diff: &Tensor<E>,
        noise: Option<&[Vec<E>]>,
        mode: Mode,
        updates: &mut Vec<BnUpdate<E>>,
    ) -> Result<TrainGraph> {
        self.check_frames("build_graph", image)?;
        if diff.shape() != image.shape() {
            return Err(Error::Shape {
                op: "build_graph",
                detail: format!(
                    "difference image {:?} must match frames {:?}",
                    diff.shape(),
                    image.shape()
                ),
            });
        }
        let image = tape.leaf(image.clone());
        let diff = tape.leaf(diff.clone());
        self.build_graph_on(tape, bound, image, diff, noise, mode, updates)
    }

    /// Like [`Model::build_graph`], but over frames already on the tape, so
    /// callers (gradient checkers, trainers with custom leaves) control the
    /// leaf layout.
    #[allow(clippy::too_many_arguments)]
    pub fn build_graph_on(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        image: TensorId,
        diff: TensorId,
        noise: Option<&[Vec<E>]>,
        mode: Mode,
        updates: &mut Vec<BnUpdate<E>>,
    ) -> Result<TrainGraph> {
        let (mu, log_var) = self.motion_encoder(tape, bound, image, diff, mode, updates)?;
        let kl_rows = tape.gaussian_kl(mu, log_var)?;
        let feats = self.image_encoder(tape, bound, image, mode, updates)?;

        let draws: Vec<TensorId> = match noise {
            Some(eps_list) => eps_list
                .iter()
                .map(|eps| tape.reparameterize_with(mu, log_var, eps.clone()))
                .collect::<Result<_>>()?,
            None => vec![mu],
        };
        let mut recon = None;
        let mut v_hat = None;
        for z in &draws {
            let kernels = self.kernel_decoder(tape, bound, *z, mode, updates)?;
            let vh = self.motion_decoder(tape, bound, &feats, &kernels, mode, updates)?;
            let l2 = tape.l2_loss(vh, diff)?;
            recon = Some(match recon {
                None => l2,
                Some(acc) => tape.add(acc, l2)?,
            });
            v_hat = Some(vh);
        }
        let mut recon = recon.expect("at least one draw");
        if draws.len() > 1 {
            recon = tape.scale(recon, 1.0 / draws.len() as f64)?;
        }
        Ok(TrainGraph { mu, log_var, kl_rows, recon, v_hat: v_hat.expect("at least one draw") })
    }

    /// Training forward pass: difference target `v = J - I`, one latent draw
    /// per configured Monte Carlo sample, loss
    /// `recon / sigma^2 + mean_B(KL)`.
    pub fn forward_train(
        &self,
        tape: &mut Tape<E>,
        image: &Tensor<E>,
        next: &Tensor<E>,
        rng: &mut Rng,
    ) -> Result<TrainForward<E>> {
        self.check_frames("forward_train", image)?;
        self.check_frames("forward_train", next)?;
        let diff = pointwise_sub(next, image)?;
        let b = image.dim(0);
        let d = self.latent_dim();
        let noise: Vec<Vec<E>> = (0..self.config.mc_samples)
            .map(|_| {
                let mut eps = vec![E::zero(); b * d];
                rng.fill_normal(&mut eps);
                eps
            })
            .collect();
        let bound = self.bind(tape, true);
        let mut updates = Vec::new();
        let g = self.build_graph(tape, &bound, image, &diff, Some(&noise), Mode::Train, &mut updates)?;
        let kl = tape.mean_all(g.kl_rows)?;
        let recon_scaled = tape.scale(g.recon, 1.0 / (self.config.sigma * self.config.sigma))?;
        let loss = tape.add(recon_scaled, kl)?;
        Ok(TrainForward {
            v_hat: g.v_hat,
            mu: g.mu,
            log_var: g.log_var,
            recon: g.recon,
            kl,
            loss,
            bn_updates: updates,
        })
    }

    /// Inference: decodes latent `z` against frame `I` and returns the next
    /// frame `clamp(I + v_hat, 0, 1)`. Pure: same inputs, same output.
    pub fn forward_sample(&self, image: &Tensor<E>, z: &Tensor<E>) -> Result<Tensor<E>> {
        let v_hat = self.forward_diff(image, z)?;
        let mut out = image.clone();
        out.requires_grad = false;
        for (o, &d) in out.data_mut().iter_mut().zip(v_hat.data()) {
            *o = (*o + d).max(E::zero()).min(E::one());
        }
        Ok(out)
    }

    /// Inference: the raw predicted difference image for latent `z`.
    pub fn forward_diff(&self, image: &Tensor<E>, z: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_frames("forward_diff", image)?;
        let d = self.latent_dim();
        if z.rank() != 2 || z.dim(0) != image.dim(0) || z.dim(1) != d {
            return Err(Error::Shape {
                op: "forward_diff",
                detail: format!(
                    "latent must be [B={}, D={d}], got {:?}",
                    image.dim(0),
                    z.shape()
                ),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut updates = Vec::new();
        let image_id = tape.leaf(image.clone());
        let z_id = tape.leaf(z.clone());
        let feats = self.image_encoder(&mut tape, &bound, image_id, Mode::Eval, &mut updates)?;
        let kernels = self.kernel_decoder(&mut tape, &bound, z_id, Mode::Eval, &mut updates)?;
        let v_hat = self.motion_decoder(&mut tape, &bound, &feats, &kernels, Mode::Eval, &mut updates)?;
        Ok(tape.val(v_hat).clone())
    }

    /// Posterior statistics of the motion between two frames (eval mode).
    pub fn encode_stats(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        self.check_frames("encode_motion", a)?;
        self.check_frames("encode_motion", b)?;
        let diff = pointwise_sub(b, a)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut updates = Vec::new();
        let a_id = tape.leaf(a.clone());
        let d_id = tape.leaf(diff);
        let (mu, lv) = self.motion_encoder(&mut tape, &bound, a_id, d_id, Mode::Eval, &mut updates)?;
        Ok((tape.val(mu).clone(), tape.val(lv).clone()))
    }

    /// Motion code of the transition `a -> b`: the posterior mean, `[B, D]`.
    pub fn encode_motion(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.encode_stats(a, b)?.0)
    }

    /// Image-encoder feature stacks for one batch of frames (eval mode), one
    /// `[B, M, scale/4, scale/4]` tensor per pyramid scale.
    pub fn image_features(&self, image: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        self.check_frames("image_features", image)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut updates = Vec::new();
        let image_id = tape.leaf(image.clone());
        let feats = self.image_encoder(&mut tape, &bound, image_id, Mode::Eval, &mut updates)?;
        Ok(feats.into_iter().map(|id| tape.val(id).clone()).collect())
    }
}

/// Elementwise difference of two equal-shape tensors, off-tape.
pub fn pointwise_sub<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "sub",
            detail: format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = a.clone();
    out.requires_grad = false;
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o - bv;
    }
    Ok(out)
}
