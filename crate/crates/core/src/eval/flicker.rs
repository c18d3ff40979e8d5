//! Repeated inference on one input, measuring run-to-run pixel changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::Backbones;
use crate::domain::{ImageTensor, LatentW};
use crate::error::{Error, Result};
use crate::mapper::Mapper;
use crate::pipeline::{infer_from_w, synthesize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNoise {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlickerStats {
    pub runs: usize,
    pub pairs: usize,
    pub max_abs_diff: f64,
    /// Mean over run pairs of the per-pixel mean absolute difference.
    pub mean_abs_diff: f64,
}

#[derive(Debug, Clone)]
pub struct FlickerProbe {
    pub outputs: Vec<ImageTensor>,
    pub stats: FlickerStats,
}

/// Pairwise statistics over equally sized flattened outputs.
pub fn pairwise_stats(outputs: &[Vec<f32>]) -> Result<FlickerStats> {
    if outputs.len() < 2 {
        return Err(Error::Parameter(format!("need at least 2 runs, got {}", outputs.len())));
    }
    let len = outputs[0].len();
    if outputs.iter().any(|o| o.len() != len) || len == 0 {
        return Err(Error::Dimension("flicker outputs differ in size".into()));
    }
    let (mut max, mut sum_means, mut pairs) = (0.0f64, 0.0f64, 0usize);
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            let mut s = 0.0;
            for (a, b) in outputs[i].iter().zip(&outputs[j]) {
                let d = (*a as f64 - *b as f64).abs();
                max = max.max(d);
                s += d;
            }
            sum_means += s / len as f64;
            pairs += 1;
        }
    }
    Ok(FlickerStats {
        runs: outputs.len(),
        pairs,
        max_abs_diff: max,
        mean_abs_diff: sum_means / pairs as f64,
    })
}

/// Self-driven inference `runs` times; with `noise`, run `r` perturbs `w`
/// with Gaussian noise from stream `r`.
pub fn flicker_probe(
    img: &ImageTensor,
    runs: usize,
    b: &Backbones,
    mapper: &Mapper,
    noise: Option<LatentNoise>,
) -> Result<FlickerProbe> {
    if runs < 2 {
        return Err(Error::Parameter(format!("need at least 2 runs, got {runs}")));
    }
    let img = ImageTensor::new(img.tensor().to_dtype(b.dtype())?)?;
    let mut outputs = Vec::with_capacity(runs);
    for r in 0..runs {
        let w = synthesize(b, mapper, &img, &img)?.w;
        let w = match noise {
            Some(n) => {
                let dist = Normal::new(0.0, n.sigma)
                    .map_err(|e| Error::Parameter(format!("noise sigma {}: {e}", n.sigma)))?;
                let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
                rng.set_stream(r as u64);
                let v = w.as_slice().iter().map(|&x| x + dist.sample(&mut rng) as f32).collect();
                LatentW::new(v)?
            }
            None => w,
        };
        outputs.push(infer_from_w(b, &w)?);
    }
    let flat: Vec<Vec<f32>> = outputs.iter().map(|o| o.to_hwc_vec()).collect::<Result<_>>()?;
    Ok(FlickerProbe {
        stats: pairwise_stats(&flat)?,
        outputs,
    })
}
