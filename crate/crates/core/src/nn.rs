//! Parameter storage, deterministic initialisation and the handful of layers
//! the networks in this crate are built from.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Key under which JSON metadata is stored in safetensors files we write.
pub const METADATA_KEY: &str = "cartoonforge";

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Const(f64),
}

impl Init {
    /// Fan-in scaled normal init.
    pub fn fan_in(fan_in: usize, gain: f64) -> Self {
        Init::Normal {
            mean: 0.0,
            std: gain / (fan_in as f64).sqrt(),
        }
    }
}

/// Seed for one named tensor: independent of construction order.
pub fn tensor_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Draws the values the seeded source produces for `name`.
pub fn seeded_values(seed: u64, name: &str, numel: usize, init: Init) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, name));
    match init {
        Init::Const(v) => vec![v; numel],
        Init::Normal { mean, std } => {
            let dist = Normal::new(mean, std).expect("std must be finite and >= 0");
            (0..numel).map(|_| dist.sample(&mut rng)).collect()
        }
        Init::Uniform { lo, hi } => {
            let dist = Uniform::new_inclusive(lo, hi).expect("lo <= hi");
            (0..numel).map(|_| dist.sample(&mut rng)).collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub var: Option<Var>,
}

/// Named parameters in a stable (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: String, param: Param) {
        self.entries.insert(name, param);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter_map(|(k, p)| p.var.clone().map(|v| (k.clone(), v)))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.tensor.elem_count()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.var.is_some())
            .map(|p| p.tensor.elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and raw values of every parameter.
    pub fn checksum(&self) -> Result<String> {
        self.checksum_where(|_, _| true)
    }

    pub fn frozen_checksum(&self) -> Result<String> {
        self.checksum_where(|_, p| p.var.is_none())
    }

    pub fn trainable_checksum(&self) -> Result<String> {
        self.checksum_where(|_, p| p.var.is_some())
    }

    fn checksum_where(&self, keep: impl Fn(&str, &Param) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            if !keep(name, p) {
                continue;
            }
            h.update(name.as_bytes());
            h.update(format!("{:?}", p.tensor.dims()).as_bytes());
            h.update(tensor_le_bytes(&p.tensor)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    /// Overwrites trainable values in place from `source`; every trainable
    /// name must be present with a matching shape.
    pub fn assign_trainable(&self, source: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, p) in &self.entries {
            let Some(var) = &p.var else { continue };
            let key = format!("{prefix}{name}");
            let t = source
                .get(&key)
                .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Raw little-endian bytes of a float tensor (f32 or f64).
pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => {
            return Err(Error::Format(format!("unsupported parameter dtype {other:?}")));
        }
    })
}

/// Writes tensors plus one JSON metadata string to a safetensors file.
/// Output bytes depend only on the inputs.
pub fn save_safetensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &str,
) -> Result<()> {
    let mut data = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let dtype = match t.dtype() {
            DType::F32 => safetensors::Dtype::F32,
            DType::F64 => safetensors::Dtype::F64,
            other => return Err(Error::Format(format!("cannot save dtype {other:?}"))),
        };
        data.push((name.clone(), (dtype, t.dims().to_vec(), tensor_le_bytes(t)?)));
    }
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = data
        .iter()
        .map(|(name, (dtype, shape, bytes))| {
            safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let meta = HashMap::from([(METADATA_KEY.to_string(), metadata.to_string())]);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Format(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every tensor and our metadata string back.
pub fn load_safetensors(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    let metadata = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY).cloned())
        .ok_or_else(|| Error::Format(format!("{} has no {METADATA_KEY} metadata", path.display())))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((tensors, metadata))
}

enum Source {
    Seeded(u64),
    Loaded(HashMap<String, Tensor>),
}

/// Hands out named parameters, either freshly initialised from a seed or
/// taken from loaded weights, and records them in a [`ParamStore`].
pub struct ParamBuilder {
    source: Source,
    dtype: DType,
    device: Device,
    store: ParamStore,
}

impl ParamBuilder {
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Seeded(seed),
            dtype,
            device: device.clone(),
            store: ParamStore::default(),
        }
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Loaded(tensors),
            dtype,
            device: device.clone(),
            store: ParamStore::default(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_seeded(&self) -> bool {
        matches!(self.source, Source::Seeded(_))
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        self.get_with(name, shape, init, trainable, Ok)
    }

    /// Like [`get`](Self::get) but applies `post` to freshly seeded values
    /// (never to loaded ones).
    pub fn get_with(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
        post: impl FnOnce(Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let t = match &self.source {
            Source::Seeded(seed) => {
                let numel = shape.iter().product();
                let values = seeded_values(*seed, name, numel, init);
                let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
                post(t)?
            }
            Source::Loaded(map) => {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Backend(format!("weights are missing tensor {name}")))?;
                if t.dims() != shape {
                    return Err(Error::Backend(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_device(&self.device)?.to_dtype(self.dtype)?
            }
        };
        let param = if trainable {
            let var = Var::from_tensor(&t)?;
            Param {
                tensor: var.as_tensor().clone(),
                var: Some(var),
            }
        } else {
            Param { tensor: t, var: None }
        };
        let out = param.tensor.clone();
        self.store.insert(name.to_string(), param);
        Ok(out)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        trainable: bool,
    ) -> Result<Self> {
        Self::with_bias_init(pb, name, in_dim, out_dim, gain, Init::Const(0.0), trainable)
    }

    pub fn with_bias_init(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias_init: Init,
        trainable: bool,
    ) -> Result<Self> {
        let weight = pb.get(&join(name, "weight"), &[out_dim, in_dim], Init::fan_in(in_dim, gain), trainable)?;
        let bias = pb.get(&join(name, "bias"), &[out_dim], bias_init, trainable)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// `(N, in) -> (N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        trainable: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.get(
            &join(name, "weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::fan_in(fan_in, gain),
            trainable,
        )?;
        let bias = pb.get(&join(name, "bias"), &[out_ch], Init::Const(0.0), trainable)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Wraps existing tensors (used where the init needs post-processing).
    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    /// Output spatial size for an input of size `n`.
    pub fn output_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel_size()) / self.stride + 1
    }
}

/// Inference-mode batch normalisation with fixed running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    scale: Tensor,
    shift: Tensor,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let seeded = pb.is_seeded();
        // Seeded stand-ins for statistics a pretrained network would carry.
        let (g, b, m, v) = if seeded {
            (
                Init::Normal { mean: 1.0, std: 0.1 },
                Init::Normal { mean: 0.0, std: 0.1 },
                Init::Normal { mean: 0.0, std: 0.1 },
                Init::Uniform { lo: 0.5, hi: 1.5 },
            )
        } else {
            (Init::Const(1.0), Init::Const(0.0), Init::Const(0.0), Init::Const(1.0))
        };
        let gamma = pb.get(&join(name, "weight"), &[channels], g, false)?;
        let beta = pb.get(&join(name, "bias"), &[channels], b, false)?;
        let mean = pb.get(&join(name, "running_mean"), &[channels], m, false)?;
        let var = pb.get(&join(name, "running_var"), &[channels], v, false)?;
        let scale = gamma.div(&(var + Self::EPS)?.sqrt()?)?;
        let shift = (beta - mean.mul(&scale)?)?;
        Ok(Self {
            scale: scale.reshape((1, channels, 1, 1))?,
            shift: shift.reshape((1, channels, 1, 1))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - x.neg()?.relu()?.affine(slope, 0.0)?)?)
}

/// Sigmoid written through `tanh` so neither pass overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let d = x.rank() - 1;
    let max = x.max_keepdim(d)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(d)?)?)
}

/// Row-wise L2 normalisation of an `(N, D)` tensor.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for Upsample {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Upsample::Nearest),
            "bilinear" => Ok(Upsample::Bilinear),
            other => Err(Error::Config(format!("unknown upsampling mode {other:?}"))),
        }
    }
}

pub fn upsample2x(x: &Tensor, mode: Upsample) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    match mode {
        Upsample::Nearest => Ok(x.upsample_nearest2d(2 * h, 2 * w)?),
        Upsample::Bilinear => resize_bilinear(x, 2 * h, 2 * w),
    }
}

/// Half-pixel-centred linear interpolation weights, `(out, in)`.
fn interpolation_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of an `(N, C, H, W)` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let aw = Tensor::from_vec(interpolation_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let ah = Tensor::from_vec(interpolation_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    // width pass: (N*C*H, W) x (W, W')
    let y = x.contiguous()?.reshape((n * c * h, w))?.matmul(&aw.t()?)?;
    let y = y.reshape((n, c, h, out_w))?;
    // height pass: (N*C*W', H) x (H, H')
    let y = y.permute((0, 1, 3, 2))?.contiguous()?.reshape((n * c * out_w, h))?;
    let y = y.matmul(&ah.t()?)?.reshape((n, c, out_w, out_h))?;
    Ok(y.permute((0, 1, 3, 2))?.contiguous()?)
}
