//! First cascade stage: image to `K_MAX + 1` per-pixel channels, and the
//! decoding of channel activations into boundary instances.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Device, Module, ModuleT, Tensor};
use candle_nn::BatchNorm;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{row_average, Polyline, K_MAX};
use crate::losses::Phase;
use crate::nn::{self, Conv, ConvBnRelu, ConvSpec, ConvTranspose, ParamStore};

/// Channel count of the instance head: background plus `K_MAX` slots.
pub const INSTANCE_CHANNELS: usize = K_MAX + 1;
/// Channel count of the binary (background / boundary) head.
pub const BINARY_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    ErfnetLike,
    Mini,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erfnet_like" => Ok(Architecture::ErfnetLike),
            "mini" => Ok(Architecture::Mini),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::ErfnetLike => "erfnet_like",
            Architecture::Mini => "mini",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegModelConfig {
    /// Network input as (width, height).
    pub input_size: (u32, u32),
    pub channels: usize,
    pub width_multiplier: f64,
    pub architecture: Architecture,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            input_size: (512, 256),
            channels: INSTANCE_CHANNELS,
            width_multiplier: 1.0,
            architecture: Architecture::ErfnetLike,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != INSTANCE_CHANNELS {
            return Err(Error::Config(format!(
                "segmentation channels must be {INSTANCE_CHANNELS}, got {}",
                self.channels
            )));
        }
        if self.width_multiplier.is_nan() || self.width_multiplier <= 0.0 {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        let factor = match self.architecture {
            Architecture::Mini => 16,
            Architecture::ErfnetLike => 8,
        };
        let (w, h) = self.input_size;
        if w == 0 || h == 0 || w % factor != 0 || h % factor != 0 {
            return Err(Error::Config(format!(
                "{} input size {w}x{h} must be a positive multiple of {factor}",
                self.architecture
            )));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn hash(&self) -> String {
        nn::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Network output for one image, channel-major (`C × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
}

impl SegOutput {
    /// Builds an output from logits, computing the per-pixel softmax.
    pub fn from_logits(width: u32, height: u32, channels: usize, logits: Vec<f32>) -> Self {
        let hw = width as usize * height as usize;
        assert_eq!(logits.len(), channels * hw, "logit buffer size");
        let mut probabilities = vec![0.0f32; logits.len()];
        for p in 0..hw {
            let max = (0..channels)
                .map(|c| logits[c * hw + p])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..channels {
                let e = (logits[c * hw + p] - max).exp();
                probabilities[c * hw + p] = e;
                sum += e;
            }
            for c in 0..channels {
                probabilities[c * hw + p] /= sum;
            }
        }
        Self {
            width,
            height,
            channels,
            logits,
            probabilities,
        }
    }

    /// Winning channel per pixel, row-major; ties go to the lower channel.
    pub fn argmax(&self) -> Vec<u8> {
        let hw = self.width as usize * self.height as usize;
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.logits[c * hw + p] > self.logits[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn flipped(&self) -> Self {
        let w = self.width as usize;
        let flip = |v: &[f32]| -> Vec<f32> { v.chunks(w).flat_map(|row| row.iter().rev().copied()).collect() };
        Self {
            logits: flip(&self.logits),
            probabilities: flip(&self.probabilities),
            ..*self
        }
    }
}

/// A decoded boundary: its channel, row-averaged polyline and the pixels it
/// won, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedInstance {
    pub instance_id: u8,
    pub polyline: Polyline,
    pub pixels: Vec<(u32, u32)>,
}

/// Per-pixel argmax, one row-averaged polyline per non-background channel,
/// dropping polylines with fewer than `min_points` rows.
pub fn decode_instances(output: &SegOutput, min_points: usize) -> Vec<DecodedInstance> {
    let labels = output.argmax();
    let w = output.width as usize;
    let mut pixels: Vec<Vec<(u32, u32)>> = vec![Vec::new(); output.channels];
    for (i, &c) in labels.iter().enumerate() {
        if c > 0 {
            pixels[c as usize].push(((i % w) as u32, (i / w) as u32));
        }
    }
    pixels
        .into_iter()
        .enumerate()
        .skip(1)
        .take(K_MAX)
        .filter_map(|(c, px)| {
            let polyline = row_average(&px);
            (polyline.len() >= min_points.max(1)).then_some(DecodedInstance {
                instance_id: c as u8,
                polyline,
                pixels: px,
            })
        })
        .collect()
}

struct MiniNet {
    down: Vec<ConvBnRelu>,
    context: ConvBnRelu,
    up: Vec<ConvBnRelu>,
}

impl MiniNet {
    const BASE: [usize; 4] = [16, 32, 48, 64];

    fn new(store: &mut ParamStore, cfg: &SegModelConfig) -> Result<(Self, usize)> {
        let widths = Self::BASE.map(|b| cfg.scaled(b));
        let mut down = Vec::new();
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            down.push(ConvBnRelu::new(
                store,
                &format!("down{i}"),
                ConvSpec::square(cin, c, 3, 2),
            )?);
            cin = c;
        }
        let mut context = ConvSpec::square(cin, cin, 3, 1);
        context.dilation = 2;
        context.padding = (2, 2);
        let context = ConvBnRelu::new(store, "context", context)?;
        // decoder level i upsamples to the resolution of encoder level i - 1
        let mut up = Vec::new();
        for i in (0..4).rev() {
            let skip = if i == 0 { 3 } else { widths[i - 1] };
            let out = if i == 0 { widths[0] } else { widths[i - 1] };
            up.push(ConvBnRelu::new(
                store,
                &format!("up{i}"),
                ConvSpec::square(cin + skip, out, 3, 1),
            )?);
            cin = out;
        }
        Ok((Self { down, context, up }, cin))
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut skips = vec![x.clone()];
        let mut h = x.clone();
        for block in &self.down {
            h = block.forward_t(&h, train)?;
            skips.push(h.clone());
        }
        skips.pop();
        h = (self.context.forward_t(&h, train)? + h)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            h = h.upsample_nearest2d(sh, sw)?;
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = block.forward_t(&h, train)?;
        }
        Ok(h)
    }
}

/// ERFNet encoder/decoder. Dropout is left out so training is a pure
/// function of the seed; batch-norm eps follows the published model (1e-3).
struct ErfNet {
    layers: Vec<ErfLayer>,
}

#[allow(clippy::large_enum_variant)]
enum ErfLayer {
    Down(Downsampler),
    NonBottleneck(NonBottleneck1d),
    Up(ConvTranspose, BatchNorm),
}

struct Downsampler {
    conv: Conv,
    bn: BatchNorm,
}

impl Downsampler {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: store.conv2d(&format!("{name}.conv"), ConvSpec::square(cin, cout - cin, 3, 2))?,
            bn: store.batch_norm(&format!("{name}.bn"), cout, 1e-3)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = Tensor::cat(&[&self.conv.forward(x)?, &x.max_pool2d(2)?], 1)?;
        self.bn.forward_t(&y, train)?.relu()
    }
}

struct NonBottleneck1d {
    c31_1: Conv,
    c13_1: Conv,
    bn1: BatchNorm,
    c31_2: Conv,
    c13_2: Conv,
    bn2: BatchNorm,
}

impl NonBottleneck1d {
    fn new(store: &mut ParamStore, name: &str, c: usize, dilation: usize) -> Result<Self> {
        let spec = |kernel: (usize, usize), padding: (usize, usize), dilation: usize| ConvSpec {
            cin: c,
            cout: c,
            kernel,
            stride: 1,
            padding,
            dilation,
            bias: true,
        };
        Ok(Self {
            c31_1: store.conv2d(&format!("{name}.c31_1"), spec((3, 1), (1, 0), 1))?,
            c13_1: store.conv2d(&format!("{name}.c13_1"), spec((1, 3), (0, 1), 1))?,
            bn1: store.batch_norm(&format!("{name}.bn1"), c, 1e-3)?,
            c31_2: store.conv2d(&format!("{name}.c31_2"), spec((3, 1), (dilation, 0), dilation))?,
            c13_2: store.conv2d(&format!("{name}.c13_2"), spec((1, 3), (0, dilation), dilation))?,
            bn2: store.batch_norm(&format!("{name}.bn2"), c, 1e-3)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = self.c31_1.forward(x)?.relu()?;
        let y = self.bn1.forward_t(&self.c13_1.forward(&y)?, train)?.relu()?;
        let y = self.c31_2.forward(&y)?.relu()?;
        let y = self.bn2.forward_t(&self.c13_2.forward(&y)?, train)?;
        (y + x)?.relu()
    }
}

impl ErfNet {
    fn new(store: &mut ParamStore, cfg: &SegModelConfig) -> Result<(Self, usize)> {
        let c16 = cfg.scaled(16).max(4);
        let c64 = cfg.scaled(64).max(c16 + 1);
        let c128 = cfg.scaled(128).max(c64 + 1);
        let mut layers = vec![ErfLayer::Down(Downsampler::new(store, "enc.down0", 3, c16)?)];
        layers.push(ErfLayer::Down(Downsampler::new(store, "enc.down1", c16, c64)?));
        for i in 0..5 {
            layers.push(ErfLayer::NonBottleneck(NonBottleneck1d::new(
                store,
                &format!("enc.nb64_{i}"),
                c64,
                1,
            )?));
        }
        layers.push(ErfLayer::Down(Downsampler::new(store, "enc.down2", c64, c128)?));
        for rep in 0..2 {
            for (j, d) in [2, 4, 8, 16].into_iter().enumerate() {
                layers.push(ErfLayer::NonBottleneck(NonBottleneck1d::new(
                    store,
                    &format!("enc.nb128_{rep}_{j}"),
                    c128,
                    d,
                )?));
            }
        }
        for (name, cin, cout) in [("dec.up0", c128, c64), ("dec.up1", c64, c16)] {
            let up = store.conv_transpose2d(&format!("{name}.conv"), cin, cout, 3, 2, 1, 1)?;
            let bn = store.batch_norm(&format!("{name}.bn"), cout, 1e-3)?;
            layers.push(ErfLayer::Up(up, bn));
            for i in 0..2 {
                layers.push(ErfLayer::NonBottleneck(NonBottleneck1d::new(
                    store,
                    &format!("{name}.nb_{i}"),
                    cout,
                    1,
                )?));
            }
        }
        Ok((Self { layers }, c16))
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                ErfLayer::Down(d) => d.forward_t(&h, train)?,
                ErfLayer::NonBottleneck(nb) => nb.forward_t(&h, train)?,
                ErfLayer::Up(up, bn) => bn.forward_t(&up.forward(&h)?, train)?.relu()?,
            };
        }
        Ok(h)
    }
}

enum Backbone {
    Mini(MiniNet),
    Erf(ErfNet),
}

enum Head {
    /// 1×1 convolution at full resolution.
    Pointwise(Conv),
    /// 2×2 stride-2 transposed convolution from half resolution.
    Transposed(ConvTranspose),
}

impl Head {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Head::Pointwise(c) => c.forward(x),
            Head::Transposed(c) => c.forward(x),
        }
    }

    /// (weight, bias, output-channel axis of the weight)
    fn params(&self) -> (&Tensor, &Tensor, usize) {
        match self {
            Head::Pointwise(c) => (&c.weight, c.bias.as_ref().expect("head has bias"), 0),
            Head::Transposed(c) => (&c.weight, &c.bias, 1),
        }
    }
}

/// Noise added to copied instance rows, relative to the RMS of the boundary row.
const HEAD_NOISE: f32 = 0.02;

/// How a new instance head is initialized when it replaces the binary head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Background slot copies the binary background row; each instance slot
    /// copies the boundary row plus small noise, with its bias lowered by
    /// ln(K_MAX) so the background/boundary split is preserved. The
    /// near-identical instance rows start close to a saddle of the instance
    /// loss, so separating lanes takes several epochs.
    FromBinary,
    /// Random weights.
    #[default]
    Fresh,
}

pub struct SegModel {
    config: SegModelConfig,
    store: ParamStore,
    backbone: Backbone,
    head: Head,
    feature_channels: usize,
    head_channels: usize,
}

/// Builds a model with the instance head.
pub fn build_model(config: &SegModelConfig, seed: u64) -> Result<SegModel> {
    SegModel::new(config, seed, INSTANCE_CHANNELS)
}

impl SegModel {
    pub fn new(config: &SegModelConfig, seed: u64, head_channels: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let (backbone, feature_channels) = match config.architecture {
            Architecture::Mini => {
                let (net, c) = MiniNet::new(&mut store, config)?;
                (Backbone::Mini(net), c)
            }
            Architecture::ErfnetLike => {
                let (net, c) = ErfNet::new(&mut store, config)?;
                (Backbone::Erf(net), c)
            }
        };
        let head = Self::make_head(&mut store, config, feature_channels, head_channels)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
            feature_channels,
            head_channels,
        })
    }

    fn make_head(store: &mut ParamStore, config: &SegModelConfig, features: usize, channels: usize) -> Result<Head> {
        Ok(match config.architecture {
            Architecture::Mini => Head::Pointwise(store.conv2d("head", ConvSpec::square(features, channels, 1, 1))?),
            Architecture::ErfnetLike => {
                Head::Transposed(store.conv_transpose2d("head", features, channels, 2, 2, 0, 0)?)
            }
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn head_channels(&self) -> usize {
        self.head_channels
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Logits `(B, head_channels, H, W)` for a normalized `(B, 3, H, W)` batch.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let (cw, ch) = self.config.input_size;
        if c != 3 || h != ch as usize || w != cw as usize {
            return Err(Error::Shape(format!(
                "segmentation input must be (B, 3, {ch}, {cw}), got {:?}",
                x.dims()
            )));
        }
        let features = match &self.backbone {
            Backbone::Mini(net) => net.forward_t(x, train)?,
            Backbone::Erf(net) => net.forward_t(x, train)?,
        };
        Ok(self.head.forward(&features)?)
    }

    /// Eval-mode forward over images already at the configured input size.
    pub fn predict(&self, images: &[RgbImage]) -> Result<Vec<SegOutput>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = images_to_tensor(images, self.config.input_size)?;
        let logits = self.forward_t(&x, false)?;
        let (b, c, h, w) = logits.dims4()?;
        let flat: Vec<f32> = logits.flatten_all()?.to_vec1()?;
        let per = c * h * w;
        Ok((0..b)
            .map(|i| SegOutput::from_logits(w as u32, h as u32, c, flat[i * per..(i + 1) * per].to_vec()))
            .collect())
    }

    /// Swaps the head for one with `channels` outputs; backbone weights are
    /// kept. Returns the new trainable variables' owner unchanged.
    pub fn replace_head(&mut self, channels: usize, init: HeadInit, seed: u64) -> Result<()> {
        let old = self.head.params();
        let (old_w, old_b, axis) = (old.0.copy()?, old.1.copy()?, old.2);
        let old_channels = self.head_channels;
        self.store.remove_prefix("head.");
        self.store.reseed(seed);
        let head = Self::make_head(&mut self.store, &self.config, self.feature_channels, channels)?;
        if init == HeadInit::FromBinary && old_channels == BINARY_CHANNELS && channels > 1 {
            let (w, b, _) = head.params();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bg = old_w.narrow(axis, 0, 1)?;
            let fg = old_w.narrow(axis, 1, 1)?;
            let noise_std = (fg.sqr()?.mean_all()?.to_scalar::<f32>()?.sqrt() * HEAD_NOISE).max(1e-4);
            let normal = Normal::new(0.0f32, noise_std).expect("positive std");
            let mut rows = vec![bg];
            for _ in 1..channels {
                let noise: Vec<f32> = (0..fg.elem_count()).map(|_| normal.sample(&mut rng)).collect();
                rows.push((&fg + Tensor::from_vec(noise, fg.dims(), &Device::Cpu)?)?);
            }
            let new_w = Tensor::cat(&rows, axis)?;
            let b_old: Vec<f32> = old_b.to_vec1()?;
            let shift = ((channels - 1) as f32).ln();
            let mut new_b = vec![b_old[0]];
            new_b.extend(std::iter::repeat_n(b_old[1] - shift, channels - 1));
            // the head tensors are variables; overwrite in place
            candle_core::Var::from_tensor(w)?.set(&new_w)?;
            candle_core::Var::from_tensor(b)?.set(&Tensor::new(new_b, &Device::Cpu)?)?;
        }
        self.head = head;
        self.head_channels = channels;
        Ok(())
    }

    pub fn save(&self, path: &Path, phase: Phase) -> Result<()> {
        let meta = HashMap::from([
            ("kind".to_string(), "segmentation".to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("config_hash".to_string(), self.config.hash()),
            ("phase".to_string(), phase.to_string()),
            ("head_channels".to_string(), self.head_channels.to_string()),
        ]);
        nn::save_checkpoint(path, &self.store.snapshot()?, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, Phase)> {
        let (tensors, meta) = nn::load_checkpoint(path)?;
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if meta.get("kind").map(String::as_str) != Some("segmentation") {
            return Err(bad("not a segmentation checkpoint"));
        }
        let config: SegModelConfig = serde_json::from_str(meta.get("config").ok_or_else(|| bad("missing config"))?)?;
        if meta.get("config_hash") != Some(&config.hash()) {
            return Err(bad("config hash does not match stored config"));
        }
        let phase: Phase = meta.get("phase").ok_or_else(|| bad("missing phase tag"))?.parse()?;
        let head_channels: usize = meta
            .get("head_channels")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing head channel count"))?;
        let model = Self::new(&config, 0, head_channels)?;
        model.store.restore(&tensors)?;
        Ok((model, phase))
    }

    pub(crate) fn trainable(&self) -> Vec<candle_core::Var> {
        self.store.trainable()
    }
}

/// Packs images into a normalized `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[RgbImage], (width, height): (u32, u32)) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * (width * height) as usize);
    for img in images {
        if img.dimensions() != (width, height) {
            return Err(Error::Shape(format!(
                "image is {:?}, expected {width}x{height}",
                img.dimensions()
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| (p[c] as f32 / 255.0 - 0.5) * 4.0));
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), 3, height as usize, width as usize),
        &Device::Cpu,
    )?)
}

/// Resizes to the network input size (bilinear), or clones when already there.
pub fn resize_to_input(image: &RgbImage, (width, height): (u32, u32)) -> RgbImage {
    if image.dimensions() == (width, height) {
        image.clone()
    } else {
        image::imageops::resize(image, width, height, image::imageops::FilterType::Triangle)
    }
}
