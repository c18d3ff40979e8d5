//! Training objectives. Tensor forms are batched and differentiable; the
//! value forms work on domain types and accumulate in f64.

pub mod adversarial;
pub mod ssim;

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{IdentityEmbedding, ImageTensor, LandmarkSet, LossWeights, NUM_LANDMARKS};
use crate::error::{Error, Result};

pub use adversarial::{adv_d_loss, adv_d_loss_tensor, adv_g_loss, adv_g_loss_tensor, PROB_CLAMP};
pub use ssim::{ms_ssim, ms_ssim_tensor, MsSsimConfig};

/// How a landmark difference is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkNorm {
    /// Euclidean norm of the flattened 136-d difference.
    #[default]
    Flattened,
    /// Sum of per-point Euclidean distances.
    PerPoint,
}

impl std::str::FromStr for LandmarkNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flattened" => Ok(LandmarkNorm::Flattened),
            "per_point" => Ok(LandmarkNorm::PerPoint),
            other => Err(Error::Config(format!("landmark_norm must be flattened or per_point, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for LandmarkNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LandmarkNorm::Flattened => "flattened",
            LandmarkNorm::PerPoint => "per_point",
        })
    }
}

fn same_dims(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Batch mean of per-row L1 distances between `(N, D)` embeddings.
pub fn identity_loss_tensor(e_ref: &Tensor, e_out: &Tensor) -> Result<Tensor> {
    same_dims("identity loss", e_ref, e_out)?;
    Ok((e_ref - e_out)?.abs()?.sum(1)?.mean_all()?)
}

/// Batch mean of landmark distances between `(N, 136)` interleaved sets.
pub fn landmark_loss_tensor(l_ref: &Tensor, l_out: &Tensor, norm: LandmarkNorm) -> Result<Tensor> {
    same_dims("landmark loss", l_ref, l_out)?;
    let d = (l_ref - l_out)?;
    let per_sample = match norm {
        LandmarkNorm::Flattened => d.sqr()?.sum(1)?.sqrt()?,
        LandmarkNorm::PerPoint => {
            let n = d.dim(0)?;
            d.reshape((n, NUM_LANDMARKS, 2))?.sqr()?.sum(2)?.sqrt()?.sum(1)?
        }
    };
    Ok(per_sample.mean_all()?)
}

/// Mean absolute difference.
pub fn mae_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dims("mean absolute error", a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `alpha * (1 - MS-SSIM) + (1 - alpha) * MAE` on `(N, 3, H, W)` batches in
/// `[-1, 1]`. MS-SSIM sees the images mapped to `[0, 1]`.
pub fn mix_loss_tensor(out: &Tensor, target: &Tensor, alpha: f64, cfg: &MsSsimConfig) -> Result<Tensor> {
    check_alpha(alpha)?;
    same_dims("mix loss", out, target)?;
    let msssim = ms_ssim_tensor(&out.affine(0.5, 0.5)?, &target.affine(0.5, 0.5)?, cfg)?;
    let mae = mae_tensor(out, target)?;
    Ok(((msssim.affine(-alpha, alpha))? + (mae * (1.0 - alpha))?)?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn f64_row(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn identity_loss(e_ref: &IdentityEmbedding, e_out: &IdentityEmbedding) -> Result<f64> {
    if e_ref.dim() != e_out.dim() {
        return Err(Error::Dimension(format!(
            "identity embeddings have dimensions {} and {}",
            e_ref.dim(),
            e_out.dim()
        )));
    }
    Ok(f64_row(e_ref.as_slice())
        .iter()
        .zip(f64_row(e_out.as_slice()))
        .map(|(a, b)| (a - b).abs())
        .sum())
}

pub fn landmark_loss(l_ref: &LandmarkSet, l_out: &LandmarkSet, norm: LandmarkNorm) -> Result<f64> {
    let a = f64_row(&l_ref.to_flat());
    let b = f64_row(&l_out.to_flat());
    Ok(match norm {
        LandmarkNorm::Flattened => a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        LandmarkNorm::PerPoint => a
            .chunks(2)
            .zip(b.chunks(2))
            .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            .sum(),
    })
}

fn image_f64(img: &ImageTensor) -> Result<Tensor> {
    Ok(img.tensor().to_dtype(DType::F64)?.unsqueeze(0)?)
}

pub fn mix_loss(out: &ImageTensor, target: &ImageTensor, alpha: f64) -> Result<f64> {
    mix_loss_with(out, target, alpha, &MsSsimConfig::default())
}

pub fn mix_loss_with(out: &ImageTensor, target: &ImageTensor, alpha: f64, cfg: &MsSsimConfig) -> Result<f64> {
    let v = mix_loss_tensor(&image_f64(out)?, &image_f64(target)?, alpha, cfg)?;
    Ok(v.to_scalar::<f64>()?)
}

/// Reconstruction term: the mix loss when both inputs were the same image,
/// otherwise exactly zero.
pub fn rec_loss(out: &ImageTensor, target: &ImageTensor, same_inputs: bool, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if out.tensor().dims() != target.tensor().dims() {
        return Err(Error::Dimension("reconstruction loss inputs differ in shape".into()));
    }
    if same_inputs {
        mix_loss(out, target, alpha)
    } else {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reconstruct,
    Disentangle,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Reconstruct => "reconstruct",
            Mode::Disentangle => "disentangle",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruct" => Ok(Mode::Reconstruct),
            "disentangle" => Ok(Mode::Disentangle),
            other => Err(Error::Format(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub l_id: f64,
    pub l_lnd: f64,
    pub l_rec: f64,
    pub l_adv_g: Option<f64>,
}

/// Weighted sum of the components; the adversarial term counts only when
/// present.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    let base = w.lambda_id * c.l_id + w.lambda_lnd * c.l_lnd + w.lambda_rec * c.l_rec;
    match c.l_adv_g {
        Some(g) => base + w.lambda_adv * g,
        None => base,
    }
}

/// One row of the loss log. The lambda columns record the weights in
/// effect for that iteration, so every row can be re-checked on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub mode: Mode,
    pub l_id: f64,
    pub l_lnd: f64,
    pub l_rec: f64,
    pub l_adv_g: Option<f64>,
    pub l_adv_d: Option<f64>,
    pub l_total: f64,
    pub lambda_id: f64,
    pub lambda_lnd: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
}

impl LossReport {
    pub fn new(iteration: u64, mode: Mode, c: LossComponents, l_adv_d: Option<f64>, w: &LossWeights) -> Self {
        Self {
            iteration,
            mode,
            l_id: c.l_id,
            l_lnd: c.l_lnd,
            l_rec: c.l_rec,
            l_adv_g: c.l_adv_g,
            l_adv_d,
            l_total: total_loss(&c, w),
            lambda_id: w.lambda_id,
            lambda_lnd: w.lambda_lnd,
            lambda_rec: w.lambda_rec,
            lambda_adv: w.lambda_adv,
        }
    }

    /// Difference between the logged total and the recomputed weighted sum.
    pub fn identity_residual(&self) -> f64 {
        let mut t = self.lambda_id * self.l_id + self.lambda_lnd * self.l_lnd + self.lambda_rec * self.l_rec;
        if let Some(g) = self.l_adv_g {
            t += self.lambda_adv * g;
        }
        (self.l_total - t).abs()
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "iteration",
    "mode",
    "l_id",
    "l_lnd",
    "l_rec",
    "l_adv_g",
    "l_adv_d",
    "l_total",
    "lambda_id",
    "lambda_lnd",
    "lambda_rec",
    "lambda_adv",
];

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Writes reports to `path`, replacing its contents.
pub fn write_loss_csv(path: &Path, rows: &[LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    // `serialize` emits the header with the first row.
    if rows.is_empty() {
        w.write_record(CSV_HEADER).map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends reports to an existing log without a header.
pub fn append_loss_csv(path: &Path, rows: &[LossReport]) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn ident(v: &[f32]) -> IdentityEmbedding {
        IdentityEmbedding::new(v.to_vec()).unwrap()
    }

    fn lms(shift: Option<(usize, f32, f32)>) -> LandmarkSet {
        let mut pts = vec![[0.5f32, 0.5]; 68];
        if let Some((i, dx, dy)) = shift {
            pts[i] = [0.5 - dx, 0.5 - dy];
        }
        LandmarkSet::new(pts).unwrap()
    }

    fn flat(v: f64) -> ImageTensor {
        ImageTensor::filled(16, v, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_loss_examples() {
        assert_eq!(identity_loss(&ident(&[0.3, -0.1]), &ident(&[0.3, -0.1])).unwrap(), 0.0);
        assert_eq!(identity_loss(&ident(&[1.0, 0.0]), &ident(&[0.0, 1.0])).unwrap(), 2.0);
        assert!(matches!(identity_loss(&ident(&[1.0]), &ident(&[1.0, 2.0])), Err(Error::Dimension(_))));
    }

    #[test]
    fn landmark_loss_examples() {
        assert_eq!(landmark_loss(&lms(None), &lms(None), LandmarkNorm::Flattened).unwrap(), 0.0);
        let d = landmark_loss(&lms(None), &lms(Some((7, 0.3, 0.4))), LandmarkNorm::Flattened).unwrap();
        assert!((d - 0.5).abs() < 1e-7, "{d}");
    }

    #[test]
    fn mix_loss_degenerate_cases() {
        let a = flat(0.1);
        assert!(mix_loss(&a, &a, 0.84).unwrap().abs() < 1e-6);
        let b = flat(0.3);
        assert!((mix_loss(&a, &b, 0.0).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(mix_loss(&a, &b, 1.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn rec_loss_gate() {
        let a = flat(0.1);
        let b = flat(-0.4);
        assert_eq!(rec_loss(&a, &b, false, 0.84).unwrap(), 0.0);
        assert!(rec_loss(&a, &a, true, 0.84).unwrap().abs() < 1e-6);
        assert_eq!(rec_loss(&a, &b, true, 0.84).unwrap(), mix_loss(&a, &b, 0.84).unwrap());
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents {
            l_id: 0.5,
            l_lnd: 0.2,
            l_rec: 10.0,
            l_adv_g: None,
        };
        assert!((total_loss(&c, &LossWeights::default()) - 0.71).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()), 0.0);
        let mut w2 = LossWeights::default();
        w2.lambda_lnd *= 2.0;
        let delta = total_loss(&c, &w2) - total_loss(&c, &LossWeights::default());
        assert!((delta - 0.2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_term_only_when_present() {
        let w = LossWeights {
            lambda_adv: 0.5,
            ..Default::default()
        };
        let mut c = LossComponents {
            l_id: 1.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&c, &w), 1.0);
        c.l_adv_g = Some(2.0);
        assert_eq!(total_loss(&c, &w), 2.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("losses.csv");
        let w = LossWeights::default();
        let c = LossComponents {
            l_id: 1.25,
            l_lnd: 0.5,
            l_rec: 0.0,
            l_adv_g: None,
        };
        let rows = vec![LossReport::new(1, Mode::Disentangle, c, None, &w)];
        write_loss_csv(&p, &rows).unwrap();
        append_loss_csv(&p, &[LossReport::new(2, Mode::Reconstruct, c, Some(1.0), &w)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("iteration,mode,l_id,l_lnd,l_rec,l_adv_g,l_adv_d,l_total"));
        assert!(text.lines().nth(1).unwrap().starts_with("1,disentangle,1.25,0.5,0.0,,,"), "{text}");
        let back = read_loss_csv(&p).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].l_adv_d, Some(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn total_is_linear_in_each_weight(
            l in proptest::array::uniform3(0.0f64..10.0),
            c in -4.0f64..4.0,
            which in 0usize..3,
        ) {
            let comps = LossComponents { l_id: l[0], l_lnd: l[1], l_rec: l[2], l_adv_g: None };
            let with = |v: f64| {
                let mut w = LossWeights::default();
                match which { 0 => w.lambda_id = v, 1 => w.lambda_lnd = v, _ => w.lambda_rec = v }
                total_loss(&comps, &w)
            };
            let lhs = with(c) - with(0.0);
            let rhs = c * (with(1.0) - with(0.0));
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn self_losses_vanish(v in proptest::collection::vec(-5.0f32..5.0, 1..64)) {
            let e = IdentityEmbedding::new(v).unwrap();
            prop_assert_eq!(identity_loss(&e, &e).unwrap(), 0.0);
        }
    }
}
