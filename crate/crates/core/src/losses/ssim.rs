//! Multi-scale structural similarity on `[0, 1]` images.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Per-scale exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    /// `None` picks the largest feasible count, at most five.
    pub scales: Option<usize>,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            scales: None,
        }
    }
}

impl MsSsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Number of scales used for images whose shorter side is `side`.
    pub fn resolve_scales(&self, side: usize) -> Result<usize> {
        let feasible = feasible_scales(side, self.window);
        let wanted = self.scales.unwrap_or(feasible.clamp(1, MS_SSIM_WEIGHTS.len()));
        if wanted == 0 || wanted > MS_SSIM_WEIGHTS.len() {
            return Err(Error::Parameter(format!("MS-SSIM scale count must be 1..=5, got {wanted}")));
        }
        if wanted > feasible {
            return Err(Error::Scale {
                scales: wanted,
                detail: format!(
                    "side {side} supports {feasible} scale(s) with an {}-pixel window",
                    self.window
                ),
            });
        }
        Ok(wanted)
    }

    /// Exponents for `scales` levels, renormalised to sum to one.
    pub fn weights(&self, scales: usize) -> Vec<f64> {
        let w = &MS_SSIM_WEIGHTS[..scales];
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }
}

/// How many 2x reductions leave the window still fitting inside the image.
pub fn feasible_scales(side: usize, window: usize) -> usize {
    let mut s = side;
    let mut n = 0;
    while s >= window && n < MS_SSIM_WEIGHTS.len() {
        n += 1;
        s /= 2;
    }
    n
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filter of an `(B, 1, H, W)` tensor.
fn blur(x: &Tensor, g: &[f64]) -> Result<Tensor> {
    let k = g.len();
    let kw = Tensor::from_slice(g, (1, 1, 1, k), x.device())?.to_dtype(x.dtype())?;
    let kh = kw.reshape((1, 1, k, 1))?;
    Ok(x.conv2d(&kw, 0, 1, 1, 1)?.conv2d(&kh, 0, 1, 1, 1)?)
}

/// Mean SSIM and mean contrast-structure term, each `(N, C)`.
fn ssim_terms(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig, g: &[f64]) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let b = n * c;
    let stacked = Tensor::cat(&[x.clone(), y.clone(), x.sqr()?, y.sqr()?, (x * y)?], 0)?
        .reshape((5 * b, 1, h, w))?;
    let f = blur(&stacked, g)?;
    let part = |i: usize| f.narrow(0, i * b, b);
    let (mu_x, mu_y, xx, yy, xy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (xx - &mu_xx)?;
    let var_y = (yy - &mu_yy)?;
    let cov = (xy - &mu_xy)?;
    let cs = ((cov * 2.0)? + cfg.c2())?.div(&((var_x + var_y)? + cfg.c2())?)?;
    let lum = ((mu_xy * 2.0)? + cfg.c1())?.div(&((mu_xx + mu_yy)? + cfg.c1())?)?;
    let ssim = (lum * &cs)?;
    let mean = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((n, c, ()))?.mean(2)?) };
    Ok((mean(ssim)?, mean(cs)?))
}

fn halve(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = x.narrow(2, 0, h - h % 2)?.narrow(3, 0, w - w % 2)?;
    Ok(x.avg_pool2d(2)?)
}

/// Differentiable MS-SSIM of two `(N, C, H, W)` batches in `[0, 1]`,
/// averaged over batch and channels. Returns a scalar tensor.
pub fn ms_ssim_tensor(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!(
            "MS-SSIM inputs differ in shape: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let (_, _, h, w) = x.dims4()?;
    let scales = cfg.resolve_scales(h.min(w))?;
    let weights = cfg.weights(scales);
    let g = gaussian_window(cfg.window, cfg.sigma);
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut factors = Vec::with_capacity(scales);
    for (i, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, cfg, &g)?;
        let last = i + 1 == scales;
        let term = if last { ssim } else { cs };
        // x^w = exp(w ln x) on the clamped-positive term.
        factors.push((term.maximum(1e-12)?.log()? * wt)?.exp()?);
        if !last {
            x = halve(&x)?;
            y = halve(&y)?;
        }
    }
    let mut prod = factors[0].clone();
    for f in &factors[1..] {
        prod = (prod * f)?;
    }
    Ok(prod.mean_all()?)
}

/// Value form for `(C, H, W)` or `(N, C, H, W)` tensors; computed in f64.
pub fn ms_ssim(a: &Tensor, b: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    let lift = |t: &Tensor| -> Result<Tensor> {
        let t = t.to_dtype(DType::F64)?;
        Ok(if t.rank() == 3 { t.unsqueeze(0)? } else { t })
    };
    Ok(ms_ssim_tensor(&lift(a)?, &lift(b)?, cfg)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn img(seed: u64, side: usize) -> Tensor {
        let v = crate::nn::seeded_values(seed, "ssim", 3 * side * side, crate::nn::Init::Uniform { lo: 0.0, hi: 1.0 });
        Tensor::from_vec(v, (1, 3, side, side), &Device::Cpu).unwrap()
    }

    #[test]
    fn scale_counts() {
        assert_eq!(feasible_scales(256, 11), 5);
        assert_eq!(feasible_scales(176, 11), 5);
        assert_eq!(feasible_scales(64, 11), 3);
        assert_eq!(feasible_scales(16, 11), 1);
        assert_eq!(feasible_scales(10, 11), 0);
        let cfg = MsSsimConfig::default();
        assert!(matches!(cfg.resolve_scales(10), Err(Error::Scale { .. })));
        let five = MsSsimConfig {
            scales: Some(5),
            ..cfg
        };
        assert!(matches!(five.resolve_scales(64), Err(Error::Scale { scales: 5, .. })));
        assert_eq!(five.resolve_scales(256).unwrap(), 5);
    }

    #[test]
    fn weights_renormalise() {
        let cfg = MsSsimConfig::default();
        let w = cfg.weights(5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] - 0.0448).abs() < 1e-3);
        assert_eq!(cfg.weights(1), vec![1.0]);
    }

    #[test]
    fn window_is_normalised_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..11 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let a = img(1, 32);
        let v = ms_ssim(&a, &a, &MsSsimConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn symmetric_and_flip_invariant() {
        let a = img(2, 24);
        let b = img(3, 24);
        let cfg = MsSsimConfig::default();
        let ab = ms_ssim(&a, &b, &cfg).unwrap();
        assert_eq!(ab, ms_ssim(&b, &a, &cfg).unwrap());
        let fa = crate::domain::flip_width(&a).unwrap();
        let fb = crate::domain::flip_width(&b).unwrap();
        assert!((ab - ms_ssim(&fa, &fb, &cfg).unwrap()).abs() < 1e-12);
        assert!(ab > 0.0 && ab <= 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let r = ms_ssim(&img(1, 16), &img(1, 20), &MsSsimConfig::default());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
