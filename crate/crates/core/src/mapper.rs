//! The trainable MLP that turns a (pose, identity) embedding pair into a
//! latent `w`.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::domain::{IdentityEmbedding, LatentW, PoseEmbedding, LATENT_DIM};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize_rows, leaky_relu, Linear, ParamBuilder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub pose_dim: usize,
    pub identity_dim: usize,
    pub hidden: Vec<usize>,
    pub slope: f64,
    /// L2-normalise each embedding block before concatenation.
    pub normalize_inputs: bool,
}

impl MapperConfig {
    pub const DEFAULT_HIDDEN: [usize; 4] = [2048, 1024, 1024, 512];

    pub fn new(pose_dim: usize, identity_dim: usize) -> Self {
        Self {
            pose_dim,
            identity_dim,
            hidden: Self::DEFAULT_HIDDEN.to_vec(),
            slope: 0.2,
            normalize_inputs: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pose_dim + self.identity_dim
    }

    pub fn output_dim(&self) -> usize {
        LATENT_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.pose_dim == 0 || self.identity_dim == 0 {
            return Err(Error::Parameter("mapper embedding dimensions must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Parameter(format!("mapper hidden widths must be positive: {:?}", self.hidden)));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return Err(Error::Parameter(format!("mapper slope must be >= 0, got {}", self.slope)));
        }
        Ok(())
    }
}

/// Concatenates pose then identity.
pub fn fuse(cfg: &MapperConfig, pose: &PoseEmbedding, ident: &IdentityEmbedding) -> Result<Vec<f32>> {
    if pose.dim() != cfg.pose_dim || ident.dim() != cfg.identity_dim {
        return Err(Error::Dimension(format!(
            "mapper expects pose {} + identity {}, got {} + {}",
            cfg.pose_dim,
            cfg.identity_dim,
            pose.dim(),
            ident.dim()
        )));
    }
    let mut v = Vec::with_capacity(cfg.input_dim());
    v.extend_from_slice(pose.as_slice());
    v.extend_from_slice(ident.as_slice());
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct Mapper {
    cfg: MapperConfig,
    hidden: Vec<Linear>,
    out: Linear,
    params: ParamStore,
}

impl Mapper {
    pub fn seeded(cfg: MapperConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(cfg, ParamBuilder::seeded(seed, dtype, device))
    }

    pub fn build(cfg: MapperConfig, mut pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let gain = (2.0 / (1.0 + cfg.slope * cfg.slope)).sqrt();
        let mut din = cfg.input_dim();
        let mut hidden = Vec::with_capacity(cfg.hidden.len());
        for (i, &h) in cfg.hidden.iter().enumerate() {
            hidden.push(Linear::new(&mut pb, &format!("hidden.{i}"), din, h, gain, true)?);
            din = h;
        }
        let out = Linear::new(&mut pb, "out", din, LATENT_DIM, 1.0, true)?;
        Ok(Self {
            cfg,
            hidden,
            out,
            params: pb.finish(),
        })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.params.trainable()
    }

    pub fn dtype(&self) -> DType {
        self.out.weight().dtype()
    }

    pub fn device(&self) -> Device {
        self.out.weight().device().clone()
    }

    /// Batched fuse: `(N, D_p)` and `(N, D_id)` to `(N, D_p + D_id)`.
    pub fn fuse_batch(&self, pose: &Tensor, ident: &Tensor) -> Result<Tensor> {
        let (np, dp) = pose.dims2()?;
        let (ni, di) = ident.dims2()?;
        if np != ni || dp != self.cfg.pose_dim || di != self.cfg.identity_dim {
            return Err(Error::Dimension(format!(
                "mapper expects (N, {}) + (N, {}), got ({np}, {dp}) + ({ni}, {di})",
                self.cfg.pose_dim, self.cfg.identity_dim
            )));
        }
        let (pose, ident) = if self.cfg.normalize_inputs {
            (l2_normalize_rows(pose)?, l2_normalize_rows(ident)?)
        } else {
            (pose.clone(), ident.clone())
        };
        Ok(Tensor::cat(&[pose, ident], 1)?)
    }

    /// `(N, D_p + D_id) -> (N, 512)`.
    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        let (_, d) = fused.dims2()?;
        if d != self.cfg.input_dim() {
            return Err(Error::Dimension(format!(
                "mapper input has {d} features, expected {}",
                self.cfg.input_dim()
            )));
        }
        let mut x = fused.clone();
        for layer in &self.hidden {
            x = leaky_relu(&layer.forward(&x)?, self.cfg.slope)?;
        }
        self.out.forward(&x)
    }

    pub fn map_forward(&self, fused: &[f32]) -> Result<LatentW> {
        if fused.len() != self.cfg.input_dim() {
            return Err(Error::Dimension(format!(
                "mapper input has {} features, expected {}",
                fused.len(),
                self.cfg.input_dim()
            )));
        }
        let x = Tensor::from_slice(fused, (1, fused.len()), &self.device())?.to_dtype(self.dtype())?;
        let w = self.forward(&x)?;
        LatentW::from_tensor_row(&w.detach(), 0)
    }

    /// Embeddings to `w`; applies the optional block normalisation.
    pub fn map(&self, pose: &PoseEmbedding, ident: &IdentityEmbedding) -> Result<LatentW> {
        let fused = fuse(&self.cfg, pose, ident)?;
        if !self.cfg.normalize_inputs {
            return self.map_forward(&fused);
        }
        let dev = self.device();
        let p = pose.to_tensor(self.dtype(), &dev)?;
        let i = ident.to_tensor(self.dtype(), &dev)?;
        let w = self.forward(&self.fuse_batch(&p, &i)?)?;
        LatentW::from_tensor_row(&w.detach(), 0)
    }
}
