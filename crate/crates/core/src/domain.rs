//! Shared value types and the range conventions every module relies on.
//!
//! Model-facing images live in `[-1, 1]` (the generator convention) and are
//! stored channel-first, `(3, H, W)`. The `[0, 1]` range only appears at the
//! MS-SSIM and file boundaries, via [`to_unit_range`] / [`from_unit_range`].

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 512;
pub const NUM_LANDMARKS: usize = 68;
pub const LANDMARK_DIM: usize = NUM_LANDMARKS * 2;
pub const IMAGE_CHANNELS: usize = 3;

/// A square RGB image with every value finite and inside `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

/// Checks the image invariants on a channel-first `(C, H, W)` tensor.
pub fn validate_image(t: &Tensor) -> Result<ImageTensor> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(Error::Dimension(format!(
            "image must be rank 3 (C, H, W), got shape {dims:?}"
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if c != IMAGE_CHANNELS {
        return Err(Error::Dimension(format!("image must have 3 channels, got {c}")));
    }
    if h != w || h == 0 {
        return Err(Error::Dimension(format!("image must be square and non-empty, got {h}x{w}")));
    }
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(Error::Range(format!("image value {v} outside [-1, 1]")));
    }
    Ok(ImageTensor(t.clone()))
}

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        validate_image(&t)
    }

    /// Builds an image from interleaved height-major, channel-last data.
    pub fn from_hwc(
        height: usize,
        width: usize,
        channels: usize,
        data: &[f32],
        device: &Device,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        let t = Tensor::from_slice(data, (height, width, channels), device)?.permute((2, 0, 1))?;
        validate_image(&t.contiguous()?)
    }

    pub fn filled(resolution: usize, value: f64, dtype: DType, device: &Device) -> Result<Self> {
        let t = (Tensor::ones((IMAGE_CHANNELS, resolution, resolution), dtype, device)? * value)?;
        validate_image(&t)
    }

    pub fn zeros(resolution: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::filled(resolution, 0.0, dtype, device)
    }

    pub fn resolution(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn to_hwc_vec(&self) -> Result<Vec<f32>> {
        Ok(self
            .0
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }

    /// Mirror along the width axis.
    pub fn hflip(&self) -> Result<Self> {
        Ok(Self(flip_width(&self.0)?))
    }

    /// Stacks images into an `(N, 3, H, W)` batch.
    pub fn stack(images: &[ImageTensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Length("cannot stack zero images".into()));
        }
        let res = images[0].resolution();
        if images.iter().any(|i| i.resolution() != res) {
            return Err(Error::Dimension("images in a batch must share a resolution".into()));
        }
        let ts: Vec<&Tensor> = images.iter().map(|i| &i.0).collect();
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Takes image `index` out of an `(N, 3, H, W)` batch and validates it.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        validate_image(&batch.get(index)?.detach())
    }
}

/// Reverses the last axis of a tensor.
pub(crate) fn flip_width(t: &Tensor) -> Result<Tensor> {
    let rank = t.rank();
    let w = t.dim(rank - 1)?;
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    let idx = Tensor::from_vec(idx, w, t.device())?;
    Ok(t.index_select(&idx, rank - 1)?)
}

/// Affine map `v -> (v + 1) / 2`; the result is a raw tensor in `[0, 1]`.
pub fn to_unit_range(img: &ImageTensor) -> Result<Tensor> {
    Ok(img.0.affine(0.5, 0.5)?)
}

/// Inverse of [`to_unit_range`].
pub fn from_unit_range(t: &Tensor) -> Result<ImageTensor> {
    validate_image(&t.affine(2.0, -1.0)?)
}

fn check_finite(what: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Range(format!("{what} entry {i} is not finite"))),
        None => Ok(()),
    }
}

fn sha256_f32(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

macro_rules! dense_vector {
    ($(#[$doc:meta])* $name:ident, $label:literal, fixed = $fixed:expr) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(Vec<f32>);

        impl $name {
            pub fn new(values: Vec<f32>) -> Result<Self> {
                let fixed: Option<usize> = $fixed;
                match fixed {
                    Some(d) if values.len() != d => {
                        return Err(Error::Dimension(format!(
                            "{} must have dimension {d}, got {}",
                            $label,
                            values.len()
                        )))
                    }
                    None if values.is_empty() => {
                        return Err(Error::Dimension(format!("{} must be non-empty", $label)))
                    }
                    _ => {}
                }
                check_finite($label, &values)?;
                Ok(Self(values))
            }

            /// Reads row `row` of an `(N, D)` tensor.
            pub fn from_tensor_row(t: &Tensor, row: usize) -> Result<Self> {
                let v = t.get(row)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Self::new(v)
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f32] {
                &self.0
            }

            pub fn into_vec(self) -> Vec<f32> {
                self.0
            }

            /// `(1, D)` tensor.
            pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
                Ok(Tensor::from_slice(&self.0, (1, self.0.len()), device)?.to_dtype(dtype)?)
            }

            /// Hash of the little-endian f32 bytes.
            pub fn sha256_hex(&self) -> String {
                sha256_f32(&self.0)
            }
        }
    };
}

dense_vector!(
    /// A point of the generator's intermediate latent space.
    LatentW, "LatentW", fixed = Some(LATENT_DIM)
);
dense_vector!(
    /// Standard-Gaussian input of the mapping network.
    LatentZ, "LatentZ", fixed = Some(LATENT_DIM)
);
dense_vector!(IdentityEmbedding, "IdentityEmbedding", fixed = None);
dense_vector!(PoseEmbedding, "PoseEmbedding", fixed = None);

impl LatentW {
    pub fn zeros() -> Self {
        Self(vec![0.0; LATENT_DIM])
    }
}

/// 68 facial keypoints in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f32; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Dimension(format!(
                "landmark set needs {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
                return Err(Error::Range(format!("landmark {i} = {p:?} outside [0, 1]")));
            }
        }
        Ok(Self { points })
    }

    /// From `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(flat: &[f32]) -> Result<Self> {
        if flat.len() != LANDMARK_DIM {
            return Err(Error::Dimension(format!(
                "flattened landmarks need {LANDMARK_DIM} values, got {}",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn from_tensor_row(t: &Tensor, row: usize) -> Result<Self> {
        let v = t.get(row)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Self::from_flat(&v)
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.to_flat(), (1, LANDMARK_DIM), device)?.to_dtype(dtype)?)
    }
}

/// Weights of the objective terms plus the mix-loss blend and R1 strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_lnd: f64,
    pub lambda_rec: f64,
    pub alpha: f64,
    /// 0 disables the adversarial term.
    pub lambda_adv: f64,
    pub gamma_r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 1.0,
            lambda_lnd: 1.0,
            lambda_rec: 0.001,
            alpha: 0.84,
            lambda_adv: 0.0,
            gamma_r1: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_id", self.lambda_id),
            ("lambda_lnd", self.lambda_lnd),
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv", self.lambda_adv),
            ("gamma_r1", self.gamma_r1),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}
