//! Exact (O(N^2)) t-SNE with perplexity calibration, early exaggeration,
//! momentum and per-coordinate gains.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::LatentW;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub dims: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Row `i` of the conditional affinities, with the Gaussian precision found
/// by bisection so the row entropy matches `ln(perplexity)`.
fn row_affinities(d: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
    let mut p = vec![0.0; d.len()];
    for _ in 0..200 {
        let dmin = d
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (j, &dj) in d.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-(dj - dmin) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if j != i && *pj > 0.0 {
                h -= *pj * pj.ln();
            }
        }
        let diff = h - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Embeds `points` into `cfg.dims` dimensions.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    if !(cfg.dims == 2 || cfg.dims == 3) {
        return Err(Error::Parameter(format!("dims must be 2 or 3, got {}", cfg.dims)));
    }
    if n < 2 || !(cfg.perplexity > 0.0 && cfg.perplexity < (n as f64 - 1.0) / 3.0) {
        return Err(Error::Parameter(format!(
            "perplexity {} must lie in (0, (N - 1) / 3) for N = {n}",
            cfg.perplexity
        )));
    }
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| sq_dist(a, b)).collect())
        .collect();
    let cond: Vec<Vec<f64>> = (0..n).map(|i| row_affinities(&dist[i], i, cfg.perplexity)).collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let k = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<f64> = (0..n * k).map(|_| init.sample(&mut rng)).collect();
    let mut step = vec![0.0; n * k];
    let mut gains = vec![1.0f64; n * k];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; n * k];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j { 0.0 } else { 1.0 / (1.0 + sq_dist(&y[i * k..(i + 1) * k], &y[j * k..(j + 1) * k])) };
                num[i * n + j] = v;
                zsum += v;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / zsum).max(1e-12);
                let m = 4.0 * (exag * p[i * n + j] - q) * num[i * n + j];
                for d in 0..k {
                    grad[i * k + d] += m * (y[i * k + d] - y[j * k + d]);
                }
            }
        }
        for c in 0..n * k {
            gains[c] = if (grad[c] > 0.0) != (step[c] > 0.0) { gains[c] + 0.2 } else { gains[c] * 0.8 };
            gains[c] = gains[c].max(0.01);
            step[c] = momentum * step[c] - cfg.learning_rate * gains[c] * grad[c];
            y[c] += step[c];
        }
        for d in 0..k {
            let mean = (0..n).map(|i| y[i * k + d]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * k + d] -= mean);
        }
    }
    Ok(y.chunks(k).map(|c| c.to_vec()).collect())
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Length("points and labels must be equal, non-empty lists".into()));
    }
    let k = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut total = 0.0;
    for (i, a) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, b) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += sq_dist(a, b).sqrt();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a_i = sums[own] / counts[own] as f64;
        let b_i = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b_i.is_finite() {
            total += (b_i - a_i) / a_i.max(b_i);
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Original,
    Mapped,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Original => "original",
            Source::Mapped => "mapped",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub source: Source,
    pub coords: Vec<f64>,
}

/// Jointly embeds both latent sets; output order is original then mapped.
pub fn tsne_export(original: &[LatentW], mapped: &[LatentW], cfg: &TsneConfig) -> Result<Vec<LabeledPoint>> {
    if original.is_empty() || mapped.is_empty() {
        return Err(Error::Parameter("both latent sets must be non-empty".into()));
    }
    let to64 = |w: &LatentW| w.as_slice().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let points: Vec<Vec<f64>> = original.iter().chain(mapped).map(to64).collect();
    let coords = tsne(&points, cfg)?;
    Ok(coords
        .into_iter()
        .enumerate()
        .map(|(i, coords)| LabeledPoint {
            source: if i < original.len() { Source::Original } else { Source::Mapped },
            coords,
        })
        .collect())
}

pub fn write_tsne_csv(path: &Path, points: &[LabeledPoint]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    let dims = points.first().map_or(2, |p| p.coords.len());
    let mut header = vec!["source".to_string()];
    header.extend(["x", "y", "z"].iter().take(dims).map(|s| s.to_string()));
    w.write_record(&header).map_err(fmt)?;
    for p in points {
        let mut rec = vec![p.source.to_string()];
        rec.extend(p.coords.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
