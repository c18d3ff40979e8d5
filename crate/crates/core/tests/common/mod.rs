//! Independent reference implementations shared by the integration tests.
//! Everything here is plain f64 loops; nothing calls into the library's
//! numeric code.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor_f64(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

pub fn to_vec_f64(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn l1_sum(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s
}

pub fn l2_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    l1_sum(a, b) / a.len() as f64
}

const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gauss_2d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut k = vec![0.0; size * size];
    let mut total = 0.0;
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            k[i * size + j] = v;
            total += v;
        }
    }
    k.iter().map(|v| v / total).collect()
}

fn filter_valid(img: &[f64], side: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let o = side - ks + 1;
    let mut out = vec![0.0; o * o];
    for y in 0..o {
        for x in 0..o {
            let mut s = 0.0;
            for i in 0..ks {
                for j in 0..ks {
                    s += k[i * ks + j] * img[(y + i) * side + x + j];
                }
            }
            out[y * o + x] = s;
        }
    }
    out
}

fn pool2(img: &[f64], side: usize) -> (Vec<f64>, usize) {
    let o = side / 2;
    let mut out = vec![0.0; o * o];
    for y in 0..o {
        for x in 0..o {
            out[y * o + x] = (img[2 * y * side + 2 * x]
                + img[2 * y * side + 2 * x + 1]
                + img[(2 * y + 1) * side + 2 * x]
                + img[(2 * y + 1) * side + 2 * x + 1])
                / 4.0;
        }
    }
    (out, o)
}

/// `(mean SSIM, mean contrast-structure)` of one square channel.
fn ssim_channel(a: &[f64], b: &[f64], side: usize) -> (f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gauss_2d(11, 1.5);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let ma = filter_valid(a, side, &k, 11);
    let mb = filter_valid(b, side, &k, 11);
    let maa = filter_valid(&sq(a), side, &k, 11);
    let mbb = filter_valid(&sq(b), side, &k, 11);
    let mab = filter_valid(&prod, side, &k, 11);
    let n = ma.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ma.len() {
        let va = maa[i] - ma[i] * ma[i];
        let vb = mbb[i] - mb[i] * mb[i];
        let cov = mab[i] - ma[i] * mb[i];
        let l = (2.0 * ma[i] * mb[i] + c1) / (ma[i] * ma[i] + mb[i] * mb[i] + c1);
        let s = (2.0 * cov + c2) / (va + vb + c2);
        ssim += l * s;
        cs += s;
    }
    (ssim / n, cs / n)
}

/// MS-SSIM of two `(3, side, side)` images in `[0, 1]`, channel-averaged.
/// Uses as many scales (at most five) as fit an 11-pixel window, with the
/// standard exponents renormalised over the scales used.
pub fn ms_ssim_oracle(a: &[f64], b: &[f64], side: usize) -> f64 {
    let mut scales = 0;
    let mut s = side;
    while s >= 11 && scales < 5 {
        scales += 1;
        s /= 2;
    }
    assert!(scales > 0);
    let total: f64 = MS_WEIGHTS[..scales].iter().sum();
    let plane = side * side;
    let mut acc = 0.0;
    for c in 0..3 {
        let mut x = a[c * plane..(c + 1) * plane].to_vec();
        let mut y = b[c * plane..(c + 1) * plane].to_vec();
        let mut sd = side;
        let mut prod = 1.0;
        for j in 0..scales {
            let (ssim, cs) = ssim_channel(&x, &y, sd);
            let w = MS_WEIGHTS[j] / total;
            let term = if j + 1 == scales { ssim } else { cs };
            prod *= term.max(1e-12).powf(w);
            if j + 1 < scales {
                let crop = sd - sd % 2;
                let cx: Vec<f64> = (0..crop).flat_map(|r| x[r * sd..r * sd + crop].to_vec()).collect();
                let cy: Vec<f64> = (0..crop).flat_map(|r| y[r * sd..r * sd + crop].to_vec()).collect();
                let (px, nsd) = pool2(&cx, crop);
                let (py, _) = pool2(&cy, crop);
                x = px;
                y = py;
                sd = nsd;
            }
        }
        acc += prod;
    }
    acc / 3.0
}

/// `alpha * (1 - MS-SSIM) + (1 - alpha) * MAE` for images in `[-1, 1]`.
pub fn mix_loss_oracle(out: &[f64], target: &[f64], side: usize, alpha: f64) -> f64 {
    let unit = |v: &[f64]| v.iter().map(|x| (x + 1.0) / 2.0).collect::<Vec<_>>();
    let ms = ms_ssim_oracle(&unit(out), &unit(target), side);
    alpha * (1.0 - ms) + (1.0 - alpha) * mean_abs(out, target)
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute discrepancy relative to the largest reference entry.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        d
    } else {
        d / s
    }
}
