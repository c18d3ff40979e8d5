//! Non-saturating adversarial losses on discriminator probabilities, with
//! an R1 penalty on real samples.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamped_log(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

fn check(what: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Length(format!("{what} is empty")));
    }
    match xs.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numerical(format!("{what} contains {v}"))),
        None => Ok(()),
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// `-mean log D(real) - mean log(1 - D(fake)) + gamma/2 * mean |grad|^2`.
pub fn adv_d_loss(d_real: &[f64], d_fake: &[f64], grad_real_norm_sq: &[f64], gamma: f64) -> Result<f64> {
    check("d_real", d_real)?;
    check("d_fake", d_fake)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Parameter(format!("gamma must be >= 0, got {gamma}")));
    }
    let r1 = if grad_real_norm_sq.is_empty() {
        0.0
    } else {
        check("grad_real_norm_sq", grad_real_norm_sq)?;
        mean(grad_real_norm_sq.iter().copied(), grad_real_norm_sq.len())
    };
    let real = -mean(d_real.iter().map(|&p| clamped_log(p)), d_real.len());
    let fake = -mean(d_fake.iter().map(|&p| clamped_log(1.0 - p)), d_fake.len());
    Ok(real + fake + 0.5 * gamma * r1)
}

/// `-mean log D(fake)`.
pub fn adv_g_loss(d_fake: &[f64]) -> Result<f64> {
    check("d_fake", d_fake)?;
    Ok(-mean(d_fake.iter().map(|&p| clamped_log(p)), d_fake.len()))
}

fn clamp_t(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// Tensor form of [`adv_d_loss`]; `grad_real_norm_sq` is `(N,)`.
pub fn adv_d_loss_tensor(d_real: &Tensor, d_fake: &Tensor, grad_real_norm_sq: &Tensor, gamma: f64) -> Result<Tensor> {
    let real = clamp_t(d_real)?.log()?.mean_all()?.neg()?;
    let fake = clamp_t(&d_fake.affine(-1.0, 1.0)?)?.log()?.mean_all()?.neg()?;
    let r1 = (grad_real_norm_sq.mean_all()? * (0.5 * gamma))?;
    Ok(((real + fake)? + r1)?)
}

pub fn adv_g_loss_tensor(d_fake: &Tensor) -> Result<Tensor> {
    Ok(clamp_t(d_fake)?.log()?.mean_all()?.neg()?)
}
