//! Acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line each and exits non-zero if any failed. Wall-clock limits
//! are part of each criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use cartoonforge::backbone::Backbones;
use cartoonforge::cartooniser::{Cartooniser, CartooniserConfig};
use cartoonforge::config::RunConfig;
use cartoonforge::dataset::{self, forge, gaussianity, ForgeOptions, MANIFEST_FILE};
use cartoonforge::domain::{IdentityEmbedding, ImageTensor, LandmarkSet, LatentW, LossWeights};
use cartoonforge::eval::identity::{identity_increment, PUBLISHED};
use cartoonforge::eval::interpolate::interpolate_w;
use cartoonforge::losses::adversarial::adv_d_loss;
use cartoonforge::losses::ssim::{ms_ssim, MsSsimConfig};
use cartoonforge::losses::{
    identity_loss, landmark_loss, landmark_loss_tensor, mae_tensor, mix_loss, mix_loss_tensor, read_loss_csv,
    LandmarkNorm, Mode,
};
use cartoonforge::mapper::{Mapper, MapperConfig};
use cartoonforge::nn::sigmoid;
use cartoonforge::trainer::discriminator::{autograd_grad_norm_sq, Discriminator};
use cartoonforge::trainer::{file_sha256, train};
use common::*;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Batch size for the training criteria. Only throughput depends on it.
const TRAIN_BATCH: usize = 4;

struct Scratch {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: PathBuf,
}

fn scratch() -> &'static Scratch {
    static S: OnceLock<Scratch> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let dataset = root.join("dataset");
        let b = Backbones::toy(0, DType::F32, &Device::Cpu).expect("toy backend");
        forge(&ForgeOptions { count: 256, seed: 0, truncation: None }, &b, &dataset).expect("forge");
        Scratch { _dir: dir, root, dataset }
    })
}

fn run_config(seed: u64, iterations: u64, checkpoint_every: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.train.seed = seed;
    run.train.max_iterations = iterations;
    run.train.checkpoint_every = checkpoint_every;
    run.train.batch_size = TRAIN_BATCH;
    run
}

fn random_image(r: &mut rand_chacha::ChaCha8Rng, side: usize) -> (Vec<f64>, ImageTensor) {
    let v = uniform_vec(r, 3 * side * side, -1.0, 1.0);
    let img = ImageTensor::new(tensor_f64(&v, &[3, side, side])).unwrap();
    (v, img)
}

fn c1_loss_oracles() -> Outcome {
    let mut r = rng(1);
    let mut worst = [0.0f64; 4];
    for trial in 0..200 {
        let a: Vec<f32> = (0..512).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f32> = (0..512).map(|_| r.random_range(-2.0..2.0)).collect();
        let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let got = identity_loss(&IdentityEmbedding::new(a.clone()).unwrap(), &IdentityEmbedding::new(b.clone()).unwrap())
            .unwrap();
        worst[0] = worst[0].max(rel_diff(got, l1_sum(&to64(&a), &to64(&b))));

        let la: Vec<f32> = (0..136).map(|_| r.random_range(0.0..1.0)).collect();
        let lb: Vec<f32> = (0..136).map(|_| r.random_range(0.0..1.0)).collect();
        let got = landmark_loss(
            &LandmarkSet::from_flat(&la).unwrap(),
            &LandmarkSet::from_flat(&lb).unwrap(),
            LandmarkNorm::Flattened,
        )
        .unwrap();
        worst[1] = worst[1].max(rel_diff(got, l2_norm_diff(&to64(&la), &to64(&lb))));

        let side = [16, 24, 48][trial % 3];
        let (va, ia) = random_image(&mut r, side);
        let (vb, ib) = random_image(&mut r, side);
        let mae = mae_tensor(ia.tensor(), ib.tensor()).unwrap().to_scalar::<f64>().unwrap();
        worst[2] = worst[2].max(rel_diff(mae, mean_abs(&va, &vb)));

        let got = mix_loss(&ia, &ib, 0.84).unwrap();
        worst[3] = worst[3].max(rel_diff(got, mix_loss_oracle(&va, &vb, side, 0.84)));
    }
    for (name, w) in ["L_id", "L_lnd", "L1-mean", "mix_loss"].iter().zip(worst) {
        ensure!(w <= 1e-9, "{name} relative error {w:e} > 1e-9");
    }

    // Constant images: variance terms vanish, only luminance at the
    // coarsest scale remains.
    let lum = (2.0 * 0.4 * 0.6 + 1e-4) / (0.4f64.powi(2) + 0.6f64.powi(2) + 1e-4);
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut ms_err = 0.0f64;
    for (side, scales) in [(64usize, 3usize), (256, 5)] {
        let exponent = weights[scales - 1] / weights[..scales].iter().sum::<f64>();
        let a = Tensor::full(0.4f64, (1, 3, side, side), &Device::Cpu).unwrap();
        let b = Tensor::full(0.6f64, (1, 3, side, side), &Device::Cpu).unwrap();
        let got = ms_ssim(&a, &b, &MsSsimConfig::default()).unwrap();
        ms_err = ms_err.max((got - lum.powf(exponent)).abs());
    }
    ensure!(ms_err <= 1e-6, "constant-image MS-SSIM off by {ms_err:e}");
    Ok(format!(
        "max rel err id {:.1e}, lnd {:.1e}, l1 {:.1e}, mix {:.1e}; constant MS-SSIM err {ms_err:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

/// Gradient of `objective(x)` w.r.t. `x` via autograd.
fn autograd(x: &[f64], shape: &[usize], objective: &dyn Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(&tensor_f64(x, shape)).unwrap();
    let y = objective(var.as_tensor());
    let g = y.backward().unwrap();
    to_vec_f64(g.get(var.as_tensor()).unwrap())
}

fn gradcheck(x: &[f64], shape: &[usize], objective: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let analytic = autograd(x, shape, objective);
    let mut f = |v: &[f64]| objective(&tensor_f64(v, shape)).to_scalar::<f64>().unwrap();
    let numeric = central_diff(&mut f, x, 1e-6);
    max_rel_err(&analytic, &numeric)
}

fn c2_gradients() -> Outcome {
    let mut r = rng(2);
    let cfg = MsSsimConfig::default();

    let target = tensor_f64(&uniform_vec(&mut r, 3 * 16 * 16, -0.9, 0.9), &[1, 3, 16, 16]);
    let x = uniform_vec(&mut r, 3 * 16 * 16, -0.9, 0.9);
    let mix = gradcheck(&x, &[1, 3, 16, 16], &|t| mix_loss_tensor(t, &target, 0.84, &cfg).unwrap());

    let l_ref = tensor_f64(&uniform_vec(&mut r, 136, 0.0, 1.0), &[1, 136]);
    let x = uniform_vec(&mut r, 136, 0.0, 1.0);
    let lnd = gradcheck(&x, &[1, 136], &|t| landmark_loss_tensor(&l_ref, t, LandmarkNorm::Flattened).unwrap());

    let cart = Cartooniser::seeded(
        CartooniserConfig { base_channels: 4, ..Default::default() },
        11,
        DType::F64,
        &Device::Cpu,
    )
    .unwrap();
    let weights = tensor_f64(&uniform_vec(&mut r, 3 * 16 * 16, -1.0, 1.0), &[1, 3, 16, 16]);
    let x = uniform_vec(&mut r, 3 * 16 * 16, -1.0, 1.0);
    let cartoon = gradcheck(&x, &[1, 3, 16, 16], &|t| {
        (cart.forward(t).unwrap() * &weights).unwrap().sum_all().unwrap()
    });

    let mcfg = MapperConfig { hidden: vec![16, 16], ..MapperConfig::new(4, 4) };
    let mapper = Mapper::seeded(mcfg, 12, DType::F64, &Device::Cpu).unwrap();
    let proj = tensor_f64(&uniform_vec(&mut r, 512, -1.0, 1.0), &[1, 512]);
    let objective = |t: &Tensor| (mapper.forward(t).unwrap() * &proj).unwrap().sum_all().unwrap();
    let x = uniform_vec(&mut r, 8, -1.0, 1.0);
    let map_in = gradcheck(&x, &[1, 8], &objective);
    // Parameter gradient of the first layer, by perturbing the variable.
    let input = tensor_f64(&x, &[1, 8]);
    let (_, var) = mapper.vars().into_iter().find(|(n, _)| n == "hidden.0.weight").unwrap();
    let shape = var.as_tensor().dims().to_vec();
    let w0 = to_vec_f64(var.as_tensor());
    let analytic = to_vec_f64(objective(&input).backward().unwrap().get(var.as_tensor()).unwrap());
    let mut f = |v: &[f64]| {
        var.set(&tensor_f64(v, &shape)).unwrap();
        objective(&input).to_scalar::<f64>().unwrap()
    };
    let numeric = central_diff(&mut f, &w0, 1e-6);
    var.set(&tensor_f64(&w0, &shape)).unwrap();
    let map_w = max_rel_err(&analytic, &numeric);

    ensure!(mix <= 1e-4, "mix_loss gradient rel err {mix:e}");
    ensure!(lnd <= 1e-4, "landmark_loss gradient rel err {lnd:e}");
    ensure!(cartoon <= 1e-3, "cartooniser gradient rel err {cartoon:e}");
    ensure!(map_in <= 1e-4 && map_w <= 1e-4, "mapper gradient rel err input {map_in:e}, weight {map_w:e}");
    Ok(format!(
        "rel err mix {mix:.1e}, lnd {lnd:.1e}, cartooniser {cartoon:.1e}, mapper input {map_in:.1e} / weight {map_w:.1e}"
    ))
}

fn c3_loss_structure() -> Outcome {
    let s = scratch();
    let out = s.root.join("c3");
    train(&run_config(0, 300, 0), &s.dataset, &out, None).map_err(|e| e.to_string())?;
    let rows = read_loss_csv(&out.join("losses.csv")).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 300, "expected 300 rows, got {}", rows.len());
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for row in &rows {
        // Recomputed from the configured weights, not the logged ones.
        let expect = w.lambda_id * row.l_id + w.lambda_lnd * row.l_lnd + w.lambda_rec * row.l_rec;
        worst = worst.max((row.l_total - expect).abs());
    }
    let recon = rows.iter().filter(|r| r.mode == Mode::Reconstruct).count();
    let bad_rec = rows.iter().filter(|r| r.mode == Mode::Disentangle && r.l_rec != 0.0).count();
    let recon_positive = rows.iter().filter(|r| r.mode == Mode::Reconstruct && r.l_rec > 0.0).count();
    ensure!(worst <= 1e-9, "weighted-sum identity violated by {worst:e}");
    ensure!(recon == 100, "{recon} reconstruct rows, expected 100");
    ensure!(bad_rec == 0, "{bad_rec} disentangle rows with non-zero l_rec");
    Ok(format!(
        "300 rows, identity residual {worst:.1e}, {recon} reconstruct ({recon_positive} with l_rec > 0), 0 disentangle rows with l_rec != 0"
    ))
}

fn c4_table_arithmetic() -> Outcome {
    let ours = identity_increment(&[0.4903], &[0.6117]).map_err(|e| e.to_string())?;
    ensure!((ours.increment - 0.1214).abs() <= 1e-12, "increment {} != 0.1214", ours.increment);
    ensure!((ours.increment - 0.1213).abs() <= 5e-4, "increment {} not within 5e-4 of 0.1213", ours.increment);
    let mut worst = 0.0f64;
    for row in PUBLISHED.iter().filter(|r| r.method != "Ours") {
        let inc = identity_increment(&[row.before], &[row.after]).map_err(|e| e.to_string())?.increment;
        worst = worst.max((inc - row.increment).abs());
    }
    ensure!(worst <= 5e-4, "baseline increment off by {worst:e}");
    Ok(format!("ours {:.4}, worst baseline deviation {worst:.1e}", ours.increment))
}

fn c5_interpolation() -> Outcome {
    let mut r = rng(5);
    let n = 8;
    for _ in 0..100 {
        let w1 = LatentW::new((0..512).map(|_| r.random_range(-3.0f32..3.0)).collect()).unwrap();
        let w2 = LatentW::new((0..512).map(|_| r.random_range(-3.0f32..3.0)).collect()).unwrap();
        for k in 0..=n {
            let a = interpolate_w(&w1, &w2, k, n).unwrap();
            let b = interpolate_w(&w2, &w1, n - k, n).unwrap();
            ensure!(a == b, "reflection identity fails at k={k}");
        }
        ensure!(interpolate_w(&w1, &w2, 0, n).unwrap() == w1, "k=0 is not w1");
        ensure!(interpolate_w(&w1, &w2, n, n).unwrap() == w2, "k=n is not w2");
        let mid = interpolate_w(&w1, &w2, n / 2, n).unwrap();
        let expect: Vec<f32> = w1
            .as_slice()
            .iter()
            .zip(w2.as_slice())
            .map(|(&x, &y)| ((x as f64 + y as f64) / 2.0) as f32)
            .collect();
        ensure!(mid.as_slice() == expect.as_slice(), "midpoint is not the average");
    }
    Ok("100 pairs: reflection, endpoints and midpoint exact".into())
}

fn c6_architecture() -> Outcome {
    let cart = Cartooniser::seeded(CartooniserConfig::default(), 0, DType::F32, &Device::Cpu).map_err(|e| e.to_string())?;
    let s = cart.summary();
    ensure!(s.down.len() == 4, "{} down blocks", s.down.len());
    for (i, d) in s.down.iter().enumerate() {
        let strides: Vec<usize> = d.units.iter().map(|u| u.stride).collect();
        ensure!(strides == [2, 1], "down block {i} strides {strides:?}");
    }
    ensure!(s.residual.len() == 4, "{} residual blocks", s.residual.len());
    ensure!(s.residual.iter().all(|r| r.identity_skip), "residual block without identity skip");
    ensure!(s.up.len() == 4, "{} up blocks", s.up.len());
    ensure!(s.up.iter().all(|u| u.upsample_factor == 2), "up block without 2x upsampling");
    let x = Tensor::zeros((1, 3, 256, 256), DType::F32, &Device::Cpu).unwrap();
    let (y, trace) = cart.forward_traced(&x).map_err(|e| e.to_string())?;
    ensure!(trace.down == [128, 64, 32, 16], "down trace {:?}", trace.down);
    ensure!(trace.bottleneck == 16, "bottleneck {}", trace.bottleneck);
    ensure!(trace.up == [32, 64, 128, 256], "up trace {:?}", trace.up);
    ensure!(y.dims() == [1, 3, 256, 256], "output shape {:?}", y.dims());
    Ok("4 down (2,1), 4 residual, 4 up (x2); 256 -> 128/64/32/16 -> 16 -> 32/64/128/256".into())
}

fn c7_determinism_resume() -> Outcome {
    let s = scratch();
    let run = run_config(7, 100, 50);
    let a = s.root.join("c7a");
    let b = s.root.join("c7b");
    let c = s.root.join("c7c");
    let ra = train(&run, &s.dataset, &a, None).map_err(|e| e.to_string())?;
    train(&run, &s.dataset, &b, None).map_err(|e| e.to_string())?;
    let csv_a = std::fs::read(a.join("losses.csv")).map_err(|e| e.to_string())?;
    let csv_b = std::fs::read(b.join("losses.csv")).map_err(|e| e.to_string())?;
    ensure!(csv_a == csv_b, "identical runs wrote different loss CSVs");
    let mid = a.join("checkpoints").join(format!("iter_{:08}.safetensors", 50));
    let rc = train(&run, &s.dataset, &c, Some(&mid)).map_err(|e| e.to_string())?;
    ensure!(
        rc.final_sha256 == ra.final_sha256,
        "resumed final checkpoint {} != uninterrupted {}",
        rc.final_sha256,
        ra.final_sha256
    );
    let tail_a = &csv_a[..];
    let csv_c = std::fs::read(c.join("losses.csv")).map_err(|e| e.to_string())?;
    let rows_c = String::from_utf8_lossy(&csv_c).lines().skip(1).map(str::to_string).collect::<Vec<_>>();
    let rows_a = String::from_utf8_lossy(tail_a).lines().skip(51).map(str::to_string).collect::<Vec<_>>();
    ensure!(rows_c == rows_a, "resumed loss rows differ from the uninterrupted run");
    Ok(format!("CSV identical, final checkpoint sha256 {}", &ra.final_sha256[..16]))
}

fn c8_smoke_descent() -> Outcome {
    let s = scratch();
    let mut lines = Vec::new();
    let mut descended = 0;
    for seed in [1u64, 2, 3] {
        let out = s.root.join(format!("c8_{seed}"));
        let res = train(&run_config(seed, 200, 0), &s.dataset, &out, None).map_err(|e| e.to_string())?;
        let mean = |lo: u64, hi: u64| {
            let v: Vec<f64> = res
                .reports
                .iter()
                .filter(|r| r.iteration >= lo && r.iteration <= hi)
                .map(|r| r.l_total)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (early, late) = (mean(1, 20), mean(181, 200));
        if late < early {
            descended += 1;
        }
        lines.push(format!("seed {seed}: {early:.4} -> {late:.4}"));
    }
    ensure!(descended >= 2, "only {descended}/3 seeds descended ({})", lines.join(", "));
    Ok(format!("{descended}/3 seeds descended ({})", lines.join(", ")))
}

fn c9_adversarial() -> Outcome {
    // Quadratic discriminator D(w) = sigmoid(|w|^2 / 2) at w = [1, 1].
    let quad = |t: &Tensor| -> cartoonforge::Result<Tensor> { sigmoid(&(t.sqr()?.sum(1)? * 0.5)?) };
    let w = tensor_f64(&[1.0, 1.0], &[1, 2]);
    let auto = autograd_grad_norm_sq(quad, &w).map_err(|e| e.to_string())?[0];
    let mut f = |v: &[f64]| 1.0 / (1.0 + (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp());
    let g = central_diff(&mut f, &[1.0, 1.0], 1e-6);
    let fd = g[0] * g[0] + g[1] * g[1];
    let gamma = 10.0;
    let quad_err = rel_diff(gamma / 2.0 * auto, gamma / 2.0 * fd);
    ensure!(quad_err <= 1e-4, "quadratic R1 rel err {quad_err:e}");

    // Full discriminator: closed-form penalty against finite differences.
    let disc = Discriminator::seeded(9, DType::F64, &Device::Cpu).map_err(|e| e.to_string())?;
    let mut r = rng(9);
    let rows = 3;
    let wv = uniform_vec(&mut r, rows * 512, -1.5, 1.5);
    let (_, grad_sq) = disc.prob_and_grad_norm_sq(&tensor_f64(&wv, &[rows, 512])).map_err(|e| e.to_string())?;
    let grad_sq = to_vec_f64(&grad_sq);
    let mut fd_sq = Vec::new();
    for row in 0..rows {
        let x = wv[row * 512..(row + 1) * 512].to_vec();
        let mut f = |v: &[f64]| to_vec_f64(&disc.prob(&tensor_f64(v, &[1, 512])).unwrap())[0];
        let g = central_diff(&mut f, &x, 1e-5);
        fd_sq.push(g.iter().map(|v| v * v).sum::<f64>());
    }
    let r1 = |v: &[f64]| gamma / 2.0 * v.iter().sum::<f64>() / v.len() as f64;
    let disc_err = rel_diff(r1(&grad_sq), r1(&fd_sq));
    let row_err = grad_sq.iter().zip(&fd_sq).map(|(a, b)| rel_diff(*a, *b)).fold(0.0, f64::max);
    ensure!(disc_err <= 1e-4 && row_err <= 1e-4, "discriminator R1 rel err {disc_err:e} (rows {row_err:e})");

    let chance = adv_d_loss(&[0.5], &[0.5], &[0.0], 0.0).map_err(|e| e.to_string())?;
    let chance_err = (chance - 2.0 * std::f64::consts::LN_2).abs();
    ensure!(chance_err <= 1e-6, "chance-level loss {chance}");
    Ok(format!(
        "R1 rel err quadratic {quad_err:.1e}, discriminator {disc_err:.1e}; chance L_D {chance:.6}"
    ))
}

fn flip_bit(path: &Path, byte: usize) {
    let mut bytes = std::fs::read(path).unwrap();
    let i = byte.min(bytes.len() - 1);
    bytes[i] ^= 0x01;
    std::fs::write(path, bytes).unwrap();
}

fn c10_dataset_forge() -> Outcome {
    let s = scratch();
    let b = Backbones::toy(0, DType::F32, &Device::Cpu).map_err(|e| e.to_string())?;
    let small = ForgeOptions { count: 200, seed: 42, truncation: None };
    let (d1, d2) = (s.root.join("c10a"), s.root.join("c10b"));
    forge(&small, &b, &d1).map_err(|e| e.to_string())?;
    forge(&small, &b, &d2).map_err(|e| e.to_string())?;
    let m1 = std::fs::read(d1.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let m2 = std::fs::read(d2.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    ensure!(m1 == m2, "same seed produced different manifests");
    let manifest = dataset::load_manifest(&d1).map_err(|e| e.to_string())?;
    for e in manifest.entries.iter().take(20) {
        for f in [&e.z_file, &e.w_file, &e.image_file] {
            let h1 = file_sha256(&d1.join(f)).map_err(|e| e.to_string())?;
            let h2 = file_sha256(&d2.join(f)).map_err(|e| e.to_string())?;
            ensure!(h1 == h2, "{f} differs between identical forges");
        }
    }

    let mut caught = 0;
    for (k, pick) in [|e: &dataset::ManifestEntry| e.image_file.clone(), |e: &dataset::ManifestEntry| e.w_file.clone()]
        .iter()
        .enumerate()
    {
        let target = d2.join(pick(&manifest.entries[17 + k]));
        flip_bit(&target, 40);
        match dataset::verify(&d2, &manifest) {
            Err(cartoonforge::Error::Integrity { .. }) => caught += 1,
            other => return Err(format!("bit flip in {} not detected: {other:?}", target.display())),
        }
        flip_bit(&target, 40);
    }

    let big_dir = s.root.join("c10big");
    let big = forge(&ForgeOptions { count: 10_000, seed: 3, truncation: None }, &b, &big_dir).map_err(|e| e.to_string())?;
    let zs = big
        .entries
        .iter()
        .map(|e| dataset::read_vector(&big_dir.join(&e.z_file)))
        .collect::<cartoonforge::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let g = gaussianity(&zs).map_err(|e| e.to_string())?;
    ensure!(
        g.passed(),
        "gaussianity failed: max |mean| {:.4} (bound {:.4}), var in [{:.4}, {:.4}]",
        g.max_abs_mean,
        g.mean_bound,
        g.min_var,
        g.max_var
    );
    Ok(format!(
        "manifests identical, {caught}/2 bit flips detected; n=10000 max |mean| {:.4} <= {:.4}, var [{:.4}, {:.4}]",
        g.max_abs_mean, g.mean_bound, g.min_var, g.max_var
    ))
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 10] = [
        (1, "loss-suite oracle equivalence", 30, c1_loss_oracles),
        (2, "gradient checks", 120, c2_gradients),
        (3, "weighted-sum and reconstruction gating", 300, c3_loss_structure),
        (4, "identity-increment arithmetic", 1, c4_table_arithmetic),
        (5, "interpolation identities", 1, c5_interpolation),
        (6, "cartooniser architecture", 10, c6_architecture),
        (7, "determinism and resume", 600, c7_determinism_resume),
        (8, "smoke descent", 600, c8_smoke_descent),
        (9, "adversarial mechanics", 60, c9_adversarial),
        (10, "dataset forge", 120, c10_dataset_forge),
    ];
    let only: Vec<u32> = std::env::var("CARTOONFORGE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(limit);
        let (verdict, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("over time limit; {d}")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {verdict} [{name}] {:.2}s (limit {limit}s): {detail}",
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
