//! Adapters for the pretrained networks the pipeline builds on: identity,
//! pose and landmark encoders, the generator's mapping network and its
//! synthesis network (plus the cartooniser, which loads the same way).
//!
//! Every adapter is built from an architecture description and a weight
//! source. The toy backend draws weights from a fixed seed; the pretrained
//! backend reads safetensors files whose metadata carries the architecture.
//! Only the pose encoder's last two fully connected layers are trainable.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cartooniser::{Cartooniser, CartooniserConfig};
use crate::domain::{
    flip_width, IdentityEmbedding, ImageTensor, LandmarkSet, LatentW, LatentZ, PoseEmbedding, LANDMARK_DIM,
    LATENT_DIM, NUM_LANDMARKS,
};
use crate::error::{Error, Result};
use crate::nn::{
    self, join, leaky_relu, resize_bilinear, softmax_last, tensor_seed, upsample2x, Conv2d, Init, Linear,
    ParamBuilder, ParamStore, Upsample,
};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Pretrained,
    Toy,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(BackendKind::Pretrained),
            "toy" => Ok(BackendKind::Toy),
            other => Err(Error::Config(format!("backend.kind must be pretrained or toy, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Pretrained => "pretrained",
            BackendKind::Toy => "toy",
        })
    }
}

/// What an encoder does when an image does not match its input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizePolicy {
    Bilinear,
    Reject,
}

impl std::str::FromStr for ResizePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(ResizePolicy::Bilinear),
            "reject" => Ok(ResizePolicy::Reject),
            other => Err(Error::Config(format!("backend.resize must be bilinear or reject, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("backend.precision must be f32 or f64, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub identity_path: Option<PathBuf>,
    pub pose_path: Option<PathBuf>,
    pub landmark_path: Option<PathBuf>,
    pub generator_path: Option<PathBuf>,
    pub cartooniser_path: Option<PathBuf>,
    pub toy_seed: u64,
    pub precision: Precision,
    pub resize: ResizePolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            identity_path: None,
            pose_path: None,
            landmark_path: None,
            generator_path: None,
            cartooniser_path: None,
            toy_seed: 0,
            precision: Precision::F32,
            resize: ResizePolicy::Bilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Identity,
    Pose,
    Landmark,
}

/// Public description of an encoder adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHandle {
    pub kind: EncoderKind,
    pub output_dim: usize,
    pub trainable_tail: bool,
    /// Layer whose activations form the embedding.
    pub embedding_layer: String,
    pub input_resolution: usize,
}

fn prepare_input(x: &Tensor, target: usize, policy: ResizePolicy) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::Dimension(format!("encoder input must have 3 channels, got {c}")));
    }
    if (h, w) == (target, target) {
        return Ok(x.clone());
    }
    match policy {
        ResizePolicy::Bilinear => resize_bilinear(x, target, target),
        ResizePolicy::Reject => Err(Error::Dimension(format!(
            "encoder expects {target}x{target} input, got {h}x{w}"
        ))),
    }
}

fn batch_of_one(img: &ImageTensor) -> Result<Tensor> {
    Ok(img.tensor().unsqueeze(0)?)
}

fn stride2_trunk(pb: &mut ParamBuilder, channels: &[usize]) -> Result<Vec<Conv2d>> {
    let mut cin = 3;
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let conv = Conv2d::new(pb, &format!("trunk.{i}"), cin, c, 3, 2, 1, RELU_GAIN, false);
            cin = c;
            conv
        })
        .collect()
}

fn run_trunk(trunk: &[Conv2d], x: &Tensor) -> Result<Tensor> {
    let mut y = x.clone();
    for conv in trunk {
        y = conv.forward(&y)?.relu()?;
    }
    Ok(y)
}

fn trunk_output_len(input: usize, channels: &[usize]) -> usize {
    let side = input >> channels.len();
    side * side * channels.last().copied().unwrap_or(3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityArch {
    pub input_resolution: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
}

impl IdentityArch {
    pub const EMBEDDING_LAYER: &'static str = "embed";
}

/// Frozen identity encoder; the embedding is the penultimate-layer output.
#[derive(Debug, Clone)]
pub struct IdentityEncoder {
    arch: IdentityArch,
    trunk: Vec<Conv2d>,
    embed: Linear,
    resize: ResizePolicy,
    params: ParamStore,
}

impl IdentityEncoder {
    pub fn build(arch: IdentityArch, mut pb: ParamBuilder, resize: ResizePolicy) -> Result<Self> {
        let trunk = stride2_trunk(&mut pb, &arch.channels)?;
        let flat = trunk_output_len(arch.input_resolution, &arch.channels);
        let embed = Linear::new(&mut pb, IdentityArch::EMBEDDING_LAYER, flat, arch.embedding_dim, 1.0, false)?;
        Ok(Self {
            arch,
            trunk,
            embed,
            resize,
            params: pb.finish(),
        })
    }

    pub fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            kind: EncoderKind::Identity,
            output_dim: self.arch.embedding_dim,
            trainable_tail: false,
            embedding_layer: IdentityArch::EMBEDDING_LAYER.into(),
            input_resolution: self.arch.input_resolution,
        }
    }

    pub fn arch(&self) -> &IdentityArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(N, 3, H, W) -> (N, D_id)`; differentiable w.r.t. the input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = prepare_input(x, self.arch.input_resolution, self.resize)?;
        let y = run_trunk(&self.trunk, &x)?;
        let n = y.dim(0)?;
        self.embed.forward(&y.reshape((n, ()))?)
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<IdentityEmbedding> {
        let e = self.forward(&batch_of_one(img)?)?.detach();
        IdentityEmbedding::from_tensor_row(&e, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseArch {
    pub input_resolution: usize,
    pub channels: Vec<usize>,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
}

impl PoseArch {
    pub const TAIL_LAYERS: [&'static str; 2] = ["fc1", "fc2"];
}

/// Pose encoder with a frozen convolutional trunk and a trainable tail of
/// two fully connected layers; the embedding is the second one's output.
#[derive(Debug, Clone)]
pub struct PoseEncoder {
    arch: PoseArch,
    trunk: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    resize: ResizePolicy,
    params: ParamStore,
}

impl PoseEncoder {
    pub fn build(arch: PoseArch, mut pb: ParamBuilder, resize: ResizePolicy) -> Result<Self> {
        let trunk = stride2_trunk(&mut pb, &arch.channels)?;
        let flat = trunk_output_len(arch.input_resolution, &arch.channels);
        let [t1, t2] = PoseArch::TAIL_LAYERS;
        let fc1 = Linear::new(&mut pb, t1, flat, arch.hidden_dim, RELU_GAIN, true)?;
        let fc2 = Linear::new(&mut pb, t2, arch.hidden_dim, arch.embedding_dim, 1.0, true)?;
        Ok(Self {
            arch,
            trunk,
            fc1,
            fc2,
            resize,
            params: pb.finish(),
        })
    }

    pub fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            kind: EncoderKind::Pose,
            output_dim: self.arch.embedding_dim,
            trainable_tail: true,
            embedding_layer: PoseArch::TAIL_LAYERS[1].into(),
            input_resolution: self.arch.input_resolution,
        }
    }

    pub fn arch(&self) -> &PoseArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn tail_params(&self) -> Vec<(String, Var)> {
        self.params.trainable()
    }

    /// `(N, 3, H, W) -> (N, D_p)`. With `train_mode` the result stays
    /// attached to the tail parameters; the trunk never receives gradients.
    pub fn forward(&self, x: &Tensor, train_mode: bool) -> Result<Tensor> {
        let x = prepare_input(x, self.arch.input_resolution, self.resize)?;
        let feats = run_trunk(&self.trunk, &x)?.detach();
        let n = feats.dim(0)?;
        let h = self.fc1.forward(&feats.reshape((n, ()))?)?.relu()?;
        let out = self.fc2.forward(&h)?;
        Ok(if train_mode { out } else { out.detach() })
    }

    pub fn encode(&self, img: &ImageTensor, train_mode: bool) -> Result<PoseEmbedding> {
        let e = self.forward(&batch_of_one(img)?, train_mode)?;
        PoseEmbedding::from_tensor_row(&e.detach(), 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkArch {
    pub input_resolution: usize,
    /// Stride-1 convolutions, each followed by ReLU and 2x2 average pooling.
    pub channels: Vec<usize>,
    /// Multiplier on heatmap logits before the spatial softmax.
    pub sharpness: f64,
}

/// Frozen landmark regressor: per-point heatmaps reduced by a spatial
/// soft-argmax, so every coordinate lies in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LandmarkEncoder {
    arch: LandmarkArch,
    convs: Vec<Conv2d>,
    heatmap: Conv2d,
    resize: ResizePolicy,
    params: ParamStore,
}

/// Makes a kernel symmetric under horizontal reflection.
fn symmetrize_width(w: Tensor) -> Result<Tensor> {
    Ok(((&w + flip_width(&w)?)? * 0.5)?)
}

impl LandmarkEncoder {
    /// Seeded weights are symmetrised, which makes the seeded network
    /// exactly equivariant to horizontal flips.
    pub fn build(arch: LandmarkArch, mut pb: ParamBuilder, resize: ResizePolicy) -> Result<Self> {
        let conv = |pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, gain: f64| -> Result<Conv2d> {
            let w = pb.get_with(
                &join(name, "weight"),
                &[cout, cin, 3, 3],
                Init::fan_in(cin * 9, gain),
                false,
                symmetrize_width,
            )?;
            let b = pb.get(&join(name, "bias"), &[cout], Init::Const(0.0), false)?;
            Ok(Conv2d::from_parts(w, b, 1, 1))
        };
        let mut convs = Vec::with_capacity(arch.channels.len());
        let mut cin = 3;
        for (i, &c) in arch.channels.iter().enumerate() {
            convs.push(conv(&mut pb, &format!("conv.{i}"), cin, c, RELU_GAIN)?);
            cin = c;
        }
        let heatmap = conv(&mut pb, "heatmap", cin, NUM_LANDMARKS, 1.0)?;
        Ok(Self {
            arch,
            convs,
            heatmap,
            resize,
            params: pb.finish(),
        })
    }

    pub fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            kind: EncoderKind::Landmark,
            output_dim: LANDMARK_DIM,
            trainable_tail: false,
            embedding_layer: "heatmap".into(),
            input_resolution: self.arch.input_resolution,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(N, 3, H, W) -> (N, 136)` laid out as `x0, y0, x1, y1, ...`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = prepare_input(x, self.arch.input_resolution, self.resize)?;
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(&y)?.relu()?.avg_pool2d(2)?;
        }
        let logits = (self.heatmap.forward(&y)? * self.arch.sharpness)?;
        let (n, k, h, w) = logits.dims4()?;
        let probs = softmax_last(&logits.reshape((n, k, h * w))?)?;
        let mut grid = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                grid.push((j as f64 + 0.5) / w as f64);
                grid.push((i as f64 + 0.5) / h as f64);
            }
        }
        let grid = Tensor::from_vec(grid, (h * w, 2), probs.device())?.to_dtype(probs.dtype())?;
        let coords = probs.reshape((n * k, h * w))?.matmul(&grid)?;
        Ok(coords.reshape((n, k * 2))?)
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<LandmarkSet> {
        let l = self.forward(&batch_of_one(img)?)?.detach();
        LandmarkSet::from_tensor_row(&l, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingArch {
    pub num_layers: usize,
    pub width: usize,
}

/// z -> w: second-moment normalisation followed by leaky-ReLU layers.
#[derive(Debug, Clone)]
pub struct MappingNetwork {
    arch: MappingArch,
    layers: Vec<Linear>,
    params: ParamStore,
}

impl MappingNetwork {
    pub fn build(arch: MappingArch, mut pb: ParamBuilder) -> Result<Self> {
        if arch.num_layers == 0 {
            return Err(Error::Parameter("mapping network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(arch.num_layers);
        for i in 0..arch.num_layers {
            let din = if i == 0 { LATENT_DIM } else { arch.width };
            let dout = if i + 1 == arch.num_layers { LATENT_DIM } else { arch.width };
            layers.push(Linear::new(&mut pb, &format!("fc.{i}"), din, dout, RELU_GAIN, false)?);
        }
        Ok(Self {
            arch,
            layers,
            params: pb.finish(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(N, 512) -> (N, 512)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let rms = (z.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
        let mut x = z.broadcast_div(&rms)?;
        for layer in &self.layers {
            x = leaky_relu(&layer.forward(&x)?, LRELU_SLOPE)?;
        }
        Ok(x)
    }

    pub fn map_z_to_w(&self, z: &LatentZ) -> Result<LatentW> {
        let dtype = self.layers[0].weight().dtype();
        let device = self.layers[0].weight().device().clone();
        let w = self.forward(&z.to_tensor(dtype, &device)?)?;
        LatentW::from_tensor_row(&w, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisArch {
    pub resolution: usize,
    pub base_channels: usize,
    /// Output channels of each 2x upsampling stage, starting from 4x4.
    pub stage_channels: Vec<usize>,
}

#[derive(Debug, Clone)]
struct SynthesisStage {
    style: Linear,
    conv: Conv2d,
}

/// w -> image: a learned 4x4 seed map, then per stage channel-wise style
/// modulation, 2x upsampling and a convolution; `tanh` RGB output.
#[derive(Debug, Clone)]
pub struct Synthesis {
    arch: SynthesisArch,
    input: Linear,
    stages: Vec<SynthesisStage>,
    to_rgb: Conv2d,
    params: ParamStore,
}

impl Synthesis {
    pub fn build(arch: SynthesisArch, mut pb: ParamBuilder) -> Result<Self> {
        if 4usize << arch.stage_channels.len() != arch.resolution {
            return Err(Error::Parameter(format!(
                "{} stages from 4x4 cannot reach {}x{}",
                arch.stage_channels.len(),
                arch.resolution,
                arch.resolution
            )));
        }
        let c0 = arch.base_channels;
        let input = Linear::new(&mut pb, "input", LATENT_DIM, c0 * 16, RELU_GAIN, false)?;
        let mut stages = Vec::with_capacity(arch.stage_channels.len());
        let mut cin = c0;
        for (i, &c) in arch.stage_channels.iter().enumerate() {
            let name = format!("stage.{i}");
            stages.push(SynthesisStage {
                style: Linear::with_bias_init(&mut pb, &join(&name, "style"), LATENT_DIM, cin, 0.5, Init::Const(1.0), false)?,
                conv: Conv2d::new(&mut pb, &join(&name, "conv"), cin, c, 3, 1, 1, RELU_GAIN, false)?,
            });
            cin = c;
        }
        let to_rgb = Conv2d::new(&mut pb, "to_rgb", cin, 3, 1, 1, 0, 1.0, false)?;
        Ok(Self {
            arch,
            input,
            stages,
            to_rgb,
            params: pb.finish(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    pub fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.input.weight().dtype()
    }

    pub fn device(&self) -> Device {
        self.input.weight().device().clone()
    }

    /// `(N, 512) -> (N, 3, R, R)` in `[-1, 1]`; differentiable w.r.t. `w`.
    pub fn forward(&self, w: &Tensor) -> Result<Tensor> {
        let n = w.dim(0)?;
        let mut x = leaky_relu(&self.input.forward(w)?, LRELU_SLOPE)?.reshape((n, self.arch.base_channels, 4, 4))?;
        for stage in &self.stages {
            let style = stage.style.forward(w)?;
            let c = style.dim(1)?;
            x = x.broadcast_mul(&style.reshape((n, c, 1, 1))?)?;
            x = upsample2x(&x, Upsample::Nearest)?;
            x = leaky_relu(&stage.conv.forward(&x)?, LRELU_SLOPE)?;
        }
        Ok(self.to_rgb.forward(&x)?.tanh()?)
    }

    pub fn generate(&self, w: &LatentW) -> Result<ImageTensor> {
        let img = self.forward(&w.to_tensor(self.dtype(), &self.device())?)?;
        ImageTensor::from_batch(&img, 0)
    }
}

/// Every adapter the pipeline needs, loaded from one backend.
#[derive(Debug, Clone)]
pub struct Backbones {
    pub identity: IdentityEncoder,
    pub pose: PoseEncoder,
    pub landmark: LandmarkEncoder,
    pub mapping: MappingNetwork,
    pub synthesis: Synthesis,
    pub cartooniser: Cartooniser,
    kind: BackendKind,
    resize: ResizePolicy,
}

/// Architectures of a full backend; stored in weight-file metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendArchitecture {
    pub identity: IdentityArch,
    pub pose: PoseArch,
    pub landmark: LandmarkArch,
    pub mapping: MappingArch,
    pub synthesis: SynthesisArch,
    pub cartooniser: CartooniserConfig,
}

impl BackendArchitecture {
    /// Small networks at 64x64 for weight-free end-to-end runs.
    pub fn toy() -> Self {
        Self {
            identity: IdentityArch {
                input_resolution: 64,
                channels: vec![8, 16, 32],
                embedding_dim: 128,
            },
            pose: PoseArch {
                input_resolution: 64,
                channels: vec![8, 16, 16],
                hidden_dim: 256,
                embedding_dim: 256,
            },
            landmark: LandmarkArch {
                input_resolution: 64,
                channels: vec![8, 16],
                sharpness: 4.0,
            },
            mapping: MappingArch {
                num_layers: 2,
                width: 512,
            },
            synthesis: SynthesisArch {
                resolution: 64,
                base_channels: 64,
                stage_channels: vec![32, 16, 16, 8],
            },
            cartooniser: CartooniserConfig {
                base_channels: 8,
                ..Default::default()
            },
        }
    }
}

/// Which layers feed the pipeline, recorded alongside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub kind: BackendKind,
    pub resolution: usize,
    pub latent_dim: usize,
    pub resize: ResizePolicy,
    pub encoders: Vec<EncoderHandle>,
    pub pose_tail_layers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ComponentMeta<A> {
    component: String,
    architecture: A,
}

fn component_seed(seed: u64, component: &str) -> u64 {
    tensor_seed(seed, component)
}

fn load_component<A: for<'de> Deserialize<'de>>(
    path: Option<&Path>,
    key: &str,
    component: &str,
    device: &Device,
) -> Result<(A, HashMap<String, Tensor>)> {
    let path = path.ok_or_else(|| Error::Backend(format!("{key} is not set for the pretrained backend")))?;
    if !path.exists() {
        return Err(Error::Backend(format!("{key} = {} does not exist", path.display())));
    }
    let (tensors, meta) = nn::load_safetensors(path, device).map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?;
    let meta: ComponentMeta<A> =
        serde_json::from_str(&meta).map_err(|e| Error::Backend(format!("{}: bad metadata: {e}", path.display())))?;
    if meta.component != component {
        return Err(Error::Backend(format!(
            "{} holds a {} network, expected {component}",
            path.display(),
            meta.component
        )));
    }
    Ok((meta.architecture, tensors))
}

fn prefixed(store: &ParamStore, prefix: &str) -> BTreeMap<String, Tensor> {
    store
        .tensors()
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect()
}

impl Backbones {
    pub fn load(cfg: &BackendConfig, device: &Device) -> Result<Self> {
        match cfg.kind {
            BackendKind::Toy => Self::seeded(&BackendArchitecture::toy(), cfg.toy_seed, cfg.precision, cfg.resize, device),
            BackendKind::Pretrained => Self::pretrained(cfg, device),
        }
    }

    pub fn toy(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let precision = if dtype == DType::F64 { Precision::F64 } else { Precision::F32 };
        Self::seeded(&BackendArchitecture::toy(), seed, precision, ResizePolicy::Bilinear, device)
    }

    pub fn seeded(
        arch: &BackendArchitecture,
        seed: u64,
        precision: Precision,
        resize: ResizePolicy,
        device: &Device,
    ) -> Result<Self> {
        let dtype = precision.dtype();
        let pb = |c: &str| ParamBuilder::seeded(component_seed(seed, c), dtype, device);
        Ok(Self {
            identity: IdentityEncoder::build(arch.identity.clone(), pb("identity"), resize)?,
            pose: PoseEncoder::build(arch.pose.clone(), pb("pose"), resize)?,
            landmark: LandmarkEncoder::build(arch.landmark.clone(), pb("landmark"), resize)?,
            mapping: MappingNetwork::build(arch.mapping.clone(), pb("mapping"))?,
            synthesis: Synthesis::build(arch.synthesis.clone(), pb("synthesis"))?,
            cartooniser: Cartooniser::build(arch.cartooniser.clone(), pb("cartooniser"))?,
            kind: BackendKind::Toy,
            resize,
        })
    }

    fn pretrained(cfg: &BackendConfig, device: &Device) -> Result<Self> {
        let dtype = cfg.precision.dtype();
        let pb = |t| ParamBuilder::from_tensors(t, dtype, device);
        let (arch, t) = load_component::<IdentityArch>(cfg.identity_path.as_deref(), "backend.identity.path", "identity", device)?;
        let identity = IdentityEncoder::build(arch, pb(t), cfg.resize)?;
        let (arch, t) = load_component::<PoseArch>(cfg.pose_path.as_deref(), "backend.pose.path", "pose", device)?;
        let pose = PoseEncoder::build(arch, pb(t), cfg.resize)?;
        let (arch, t) = load_component::<LandmarkArch>(cfg.landmark_path.as_deref(), "backend.landmark.path", "landmark", device)?;
        let landmark = LandmarkEncoder::build(arch, pb(t), cfg.resize)?;
        let ((mapping_arch, synthesis_arch), t) = load_component::<(MappingArch, SynthesisArch)>(
            cfg.generator_path.as_deref(),
            "backend.generator.path",
            "generator",
            device,
        )?;
        let split = |prefix: &str| -> HashMap<String, Tensor> {
            t.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        let mapping = MappingNetwork::build(mapping_arch, pb(split("mapping.")))?;
        let synthesis = Synthesis::build(synthesis_arch, pb(split("synthesis.")))?;
        let (arch, t) = load_component::<CartooniserConfig>(
            cfg.cartooniser_path.as_deref(),
            "backend.cartooniser.path",
            "cartooniser",
            device,
        )?;
        let cartooniser = Cartooniser::build(arch, pb(t))?;
        if synthesis.resolution() % 16 != 0 {
            return Err(Error::Backend(format!(
                "generator resolution {} is not divisible by 16",
                synthesis.resolution()
            )));
        }
        Ok(Self {
            identity,
            pose,
            landmark,
            mapping,
            synthesis,
            cartooniser,
            kind: BackendKind::Pretrained,
            resize: cfg.resize,
        })
    }

    /// Writes one weight file per component in the layout the pretrained
    /// backend reads. Returns a config pointing at them.
    pub fn export(&self, dir: &Path) -> Result<BackendConfig> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |file: &str, tensors: BTreeMap<String, Tensor>, meta: String| -> Result<PathBuf> {
            let path = dir.join(file);
            nn::save_safetensors(&path, &tensors, &meta)?;
            Ok(path)
        };
        let meta = |component: &str, arch: serde_json::Value| {
            serde_json::json!({ "component": component, "architecture": arch }).to_string()
        };
        let identity = write(
            "identity.safetensors",
            self.identity.params.tensors(),
            meta("identity", serde_json::to_value(&self.identity.arch).expect("serializable")),
        )?;
        let pose = write(
            "pose.safetensors",
            self.pose.params.tensors(),
            meta("pose", serde_json::to_value(&self.pose.arch).expect("serializable")),
        )?;
        let landmark = write(
            "landmark.safetensors",
            self.landmark.params.tensors(),
            meta("landmark", serde_json::to_value(&self.landmark.arch).expect("serializable")),
        )?;
        let mut gen = prefixed(&self.mapping.params, "mapping.");
        gen.extend(prefixed(&self.synthesis.params, "synthesis."));
        let generator = write(
            "generator.safetensors",
            gen,
            meta(
                "generator",
                serde_json::to_value((&self.mapping.arch, &self.synthesis.arch)).expect("serializable"),
            ),
        )?;
        let cartooniser = write(
            "cartooniser.safetensors",
            self.cartooniser.params().tensors(),
            meta("cartooniser", serde_json::to_value(self.cartooniser.config()).expect("serializable")),
        )?;
        Ok(BackendConfig {
            kind: BackendKind::Pretrained,
            identity_path: Some(identity),
            pose_path: Some(pose),
            landmark_path: Some(landmark),
            generator_path: Some(generator),
            cartooniser_path: Some(cartooniser),
            resize: self.resize,
            precision: if self.synthesis.dtype() == DType::F64 { Precision::F64 } else { Precision::F32 },
            ..Default::default()
        })
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn resolution(&self) -> usize {
        self.synthesis.resolution()
    }

    pub fn dtype(&self) -> DType {
        self.synthesis.dtype()
    }

    pub fn device(&self) -> Device {
        self.synthesis.device()
    }

    pub fn manifest(&self) -> AdapterManifest {
        AdapterManifest {
            kind: self.kind,
            resolution: self.resolution(),
            latent_dim: LATENT_DIM,
            resize: self.resize,
            encoders: vec![self.identity.handle(), self.pose.handle(), self.landmark.handle()],
            pose_tail_layers: PoseArch::TAIL_LAYERS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Checksum over every parameter the trainer must never touch.
    pub fn frozen_checksum(&self) -> Result<String> {
        let parts = [
            self.identity.params.checksum()?,
            self.pose.params.frozen_checksum()?,
            self.landmark.params.checksum()?,
            self.mapping.params.checksum()?,
            self.synthesis.params.checksum()?,
            self.cartooniser.params().checksum()?,
        ];
        Ok(parts.join(":"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Backbones {
        Backbones::toy(0, DType::F32, &Device::Cpu).unwrap()
    }

    fn random_image(seed: u64) -> ImageTensor {
        let vals = nn::seeded_values(seed, "img", 64 * 64 * 3, Init::Uniform { lo: -1.0, hi: 1.0 });
        let vals: Vec<f32> = vals.into_iter().map(|v| v as f32).collect();
        ImageTensor::from_hwc(64, 64, 3, &vals, &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_encoding_is_deterministic() {
        let b = toy();
        let img = ImageTensor::zeros(64, DType::F32, &Device::Cpu).unwrap();
        let a = b.identity.encode(&img).unwrap();
        assert_eq!(a, b.identity.encode(&img).unwrap());
        assert_eq!(a.dim(), b.identity.handle().output_dim);
    }

    #[test]
    fn handles_describe_freezing() {
        let b = toy();
        assert!(!b.identity.handle().trainable_tail);
        assert!(!b.landmark.handle().trainable_tail);
        assert!(b.pose.handle().trainable_tail);
        assert_eq!(b.landmark.handle().output_dim, 136);
        assert_eq!(b.identity.params().num_trainable_elements(), 0);
        assert_eq!(b.landmark.params().num_trainable_elements(), 0);
    }

    #[test]
    fn pose_tail_is_a_strict_subset() {
        let b = toy();
        let tail = b.pose.params().num_trainable_elements();
        assert!(tail > 0 && tail < b.pose.params().num_elements());
        let names: Vec<String> = b.pose.tail_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("fc1.") || n.starts_with("fc2.")), "{names:?}");
    }

    #[test]
    fn pose_inference_is_deterministic() {
        let b = toy();
        let img = random_image(1);
        assert_eq!(b.pose.encode(&img, false).unwrap(), b.pose.encode(&img, false).unwrap());
    }

    #[test]
    fn landmarks_are_valid_and_flip_equivariant() {
        let b = toy();
        let img = random_image(2);
        let l = b.landmark.encode(&img).unwrap();
        assert_eq!(l, b.landmark.encode(&img).unwrap());
        let lf = b.landmark.encode(&img.hflip().unwrap()).unwrap();
        for (p, q) in l.points().iter().zip(lf.points()) {
            assert!((q[0] - (1.0 - p[0])).abs() < 1e-5, "{p:?} vs {q:?}");
            assert!((q[1] - p[1]).abs() < 1e-5);
        }
    }

    #[test]
    fn generator_contract() {
        let b = toy();
        let img = b.synthesis.generate(&LatentW::zeros()).unwrap();
        assert_eq!(img.resolution(), 64);
        let again = b.synthesis.generate(&LatentW::zeros()).unwrap();
        assert_eq!(img.to_hwc_vec().unwrap(), again.to_hwc_vec().unwrap());
        let mut v = vec![0.0f32; 512];
        v[0] = 1.0;
        let other = b.synthesis.generate(&LatentW::new(v).unwrap()).unwrap();
        assert_ne!(img.to_hwc_vec().unwrap(), other.to_hwc_vec().unwrap());
    }

    #[test]
    fn mapping_contract() {
        let b = toy();
        let mut v = vec![0.0f32; 512];
        v[0] = 1.0;
        let z = LatentZ::new(v).unwrap();
        let w = b.mapping.map_z_to_w(&z).unwrap();
        assert_eq!(w.dim(), 512);
        assert_eq!(w, b.mapping.map_z_to_w(&z).unwrap());
    }

    #[test]
    fn pretrained_requires_paths() {
        let cfg = BackendConfig {
            kind: BackendKind::Pretrained,
            ..Default::default()
        };
        let err = Backbones::load(&cfg, &Device::Cpu).unwrap_err();
        assert!(matches!(err, Error::Backend(ref m) if m.contains("backend.identity.path")), "{err}");
    }

    #[test]
    fn exported_weights_reload_as_pretrained() {
        let b = toy();
        let dir = tempfile::tempdir().unwrap();
        let cfg = b.export(dir.path()).unwrap();
        let loaded = Backbones::load(&cfg, &Device::Cpu).unwrap();
        assert_eq!(loaded.kind(), BackendKind::Pretrained);
        assert_eq!(loaded.frozen_checksum().unwrap(), b.frozen_checksum().unwrap());
        let img = random_image(3);
        assert_eq!(b.identity.encode(&img).unwrap(), loaded.identity.encode(&img).unwrap());
        let w = LatentW::zeros();
        assert_eq!(
            b.cartooniser.cartoonise(&b.synthesis.generate(&w).unwrap()).unwrap().to_hwc_vec().unwrap(),
            loaded.cartooniser.cartoonise(&loaded.synthesis.generate(&w).unwrap()).unwrap().to_hwc_vec().unwrap()
        );
    }

    #[test]
    fn mismatched_component_is_rejected() {
        let b = toy();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = b.export(dir.path()).unwrap();
        cfg.identity_path = cfg.pose_path.clone();
        assert!(matches!(Backbones::load(&cfg, &Device::Cpu), Err(Error::Backend(_))));
    }

    #[test]
    fn resize_policy_applies_to_off_size_inputs() {
        let b = toy();
        let img = ImageTensor::zeros(32, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(b.identity.encode(&img).unwrap().dim(), 128);
        let strict = Backbones::seeded(&BackendArchitecture::toy(), 0, Precision::F32, ResizePolicy::Reject, &Device::Cpu).unwrap();
        assert!(matches!(strict.identity.encode(&img), Err(Error::Dimension(_))));
    }
}
