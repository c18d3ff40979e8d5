//! MLP discriminator on 512-d latents for the adversarial ablation.

use candle_core::{DType, Device, Tensor, Var};

use crate::domain::LATENT_DIM;
use crate::error::Result;
use crate::nn::{leaky_relu, sigmoid, Linear, ParamBuilder, ParamStore};

const SLOPE: f64 = 0.2;
const WIDTH: usize = 512;

#[derive(Debug, Clone)]
pub struct Discriminator {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    params: ParamStore,
}

impl Discriminator {
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(ParamBuilder::seeded(seed, dtype, device))
    }

    pub fn build(mut pb: ParamBuilder) -> Result<Self> {
        let gain = (2.0 / (1.0 + SLOPE * SLOPE)).sqrt();
        let l1 = Linear::new(&mut pb, "fc.0", LATENT_DIM, WIDTH, gain, true)?;
        let l2 = Linear::new(&mut pb, "fc.1", WIDTH, WIDTH, gain, true)?;
        let l3 = Linear::new(&mut pb, "fc.2", WIDTH, 1, 1.0, true)?;
        Ok(Self {
            l1,
            l2,
            l3,
            params: pb.finish(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.params.trainable()
    }

    fn hidden(&self, w: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let h1 = self.l1.forward(w)?;
        let a1 = leaky_relu(&h1, SLOPE)?;
        let h2 = self.l2.forward(&a1)?;
        let a2 = leaky_relu(&h2, SLOPE)?;
        Ok((h1, a1, h2, a2))
    }

    /// `(N, 512) -> (N,)` pre-sigmoid scores.
    pub fn logits(&self, w: &Tensor) -> Result<Tensor> {
        let (_, _, _, a2) = self.hidden(w)?;
        Ok(self.l3.forward(&a2)?.squeeze(1)?)
    }

    /// `(N, 512) -> (N,)` probabilities that each row is real.
    pub fn prob(&self, w: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(w)?)
    }

    /// Probabilities and `|d prob / d w|^2` per row. The gradient is formed
    /// in closed form, so it stays differentiable w.r.t. the parameters.
    pub fn prob_and_grad_norm_sq(&self, w: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h1, _, h2, a2) = self.hidden(w)?;
        let s = self.l3.forward(&a2)?.squeeze(1)?;
        let p = sigmoid(&s)?;
        let mask = |h: &Tensor| -> Result<Tensor> {
            let pos = h.ge(0.0)?.to_dtype(h.dtype())?;
            Ok(pos.affine(1.0 - SLOPE, SLOPE)?.detach())
        };
        let (m1, m2) = (mask(&h1)?, mask(&h2)?);
        // d s / d w = W1^T (m1 * W2^T (m2 * W3^T)), row by row.
        let u2 = m2.broadcast_mul(self.l3.weight())?;
        let u1 = u2.matmul(self.l2.weight())?.mul(&m1)?;
        let ds = u1.matmul(self.l1.weight())?;
        let dp = (&p * (p.affine(-1.0, 1.0))?)?;
        let g = ds.broadcast_mul(&dp.unsqueeze(1)?)?;
        Ok((p, g.sqr()?.sum(1)?))
    }
}

/// `|d f / d w|^2` per row of `w` for a row-wise scalar function, via
/// autograd. Not differentiable; used to check closed forms.
pub fn autograd_grad_norm_sq(f: impl Fn(&Tensor) -> Result<Tensor>, w: &Tensor) -> Result<Vec<f64>> {
    let var = Var::from_tensor(&w.detach())?;
    let out = f(var.as_tensor())?.sum_all()?;
    let grads = out.backward()?;
    let g = grads
        .get(var.as_tensor())
        .cloned()
        .unwrap_or(var.as_tensor().zeros_like()?);
    Ok(g.to_dtype(DType::F64)?.sqr()?.sum(1)?.to_vec1::<f64>()?)
}
