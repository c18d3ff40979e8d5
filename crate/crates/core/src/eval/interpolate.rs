use crate::backbone::Backbones;
use crate::domain::{ImageTensor, LatentW};
use crate::error::{Error, Result};
use crate::mapper::Mapper;
use crate::pipeline::infer_from_w;

pub const STRIP_STEPS: usize = 8;

/// `((n - k) / n) * w1 + (k / n) * w2`, evaluated per coordinate in f64.
/// Written symmetrically so swapping the endpoints and replacing `k` with
/// `n - k` gives the same bits.
pub fn interpolate_w(w1: &LatentW, w2: &LatentW, k: usize, n: usize) -> Result<LatentW> {
    if n == 0 || k > n {
        return Err(Error::Range(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    let a = (n - k) as f64 / n as f64;
    let b = k as f64 / n as f64;
    let v = w1
        .as_slice()
        .iter()
        .zip(w2.as_slice())
        .map(|(&x, &y)| (a * x as f64 + b * y as f64) as f32)
        .collect();
    LatentW::new(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripMode {
    /// Identity from the first image, pose moving from the first to the
    /// second.
    PoseVaries,
    /// Pose from the first image, identity moving from the first to the
    /// second.
    IdentityVaries,
}

impl std::str::FromStr for StripMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose" | "pose_varies" => Ok(StripMode::PoseVaries),
            "identity" | "identity_varies" => Ok(StripMode::IdentityVaries),
            other => Err(Error::Parameter(format!("mode must be pose or identity, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Strip {
    pub w1: LatentW,
    pub w2: LatentW,
    /// Latents for `k = 1..=n`.
    pub ws: Vec<LatentW>,
    pub images: Vec<ImageTensor>,
}

fn latent(b: &Backbones, mapper: &Mapper, id: &ImageTensor, pose: &ImageTensor) -> Result<LatentW> {
    let dt = b.dtype();
    let id = ImageTensor::new(id.tensor().to_dtype(dt)?)?;
    let pose = ImageTensor::new(pose.tensor().to_dtype(dt)?)?;
    Ok(crate::pipeline::synthesize(b, mapper, &id, &pose)?.w)
}

/// Renders `C(G(w))` along the segment between the two configurations.
pub fn interpolation_strip(
    img_a: &ImageTensor,
    img_b: &ImageTensor,
    mode: StripMode,
    b: &Backbones,
    mapper: &Mapper,
    n: usize,
) -> Result<Strip> {
    let w1 = latent(b, mapper, img_a, img_a)?;
    let w2 = match mode {
        StripMode::PoseVaries => latent(b, mapper, img_a, img_b)?,
        StripMode::IdentityVaries => latent(b, mapper, img_b, img_a)?,
    };
    let ws = (1..=n).map(|k| interpolate_w(&w1, &w2, k, n)).collect::<Result<Vec<_>>>()?;
    let images = ws.iter().map(|w| infer_from_w(b, w)).collect::<Result<Vec<_>>>()?;
    Ok(Strip { w1, w2, ws, images })
}

/// Writes the images side by side as one PNG.
pub fn write_strip(path: &std::path::Path, images: &[ImageTensor]) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::Length("no images to write".into()));
    };
    let r = first.resolution();
    let n = images.len();
    let rows: Vec<Vec<f32>> = images.iter().map(|i| i.to_hwc_vec()).collect::<Result<_>>()?;
    let mut out = vec![0.0f32; r * r * n * 3];
    for (k, img) in rows.iter().enumerate() {
        if img.len() != r * r * 3 {
            return Err(Error::Dimension("strip images differ in size".into()));
        }
        for y in 0..r {
            let dst = (y * r * n + k * r) * 3;
            out[dst..dst + r * 3].copy_from_slice(&img[y * r * 3..(y + 1) * r * 3]);
        }
    }
    crate::imageio::write_png_raw(path, r * n, r, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: f32) -> LatentW {
        LatentW::new(vec![v; 512]).unwrap()
    }

    #[test]
    fn examples() {
        let a = w(0.0);
        let b = w(1.0);
        assert_eq!(interpolate_w(&a, &b, 8, 8).unwrap(), b);
        assert_eq!(interpolate_w(&a, &b, 0, 8).unwrap(), a);
        assert_eq!(interpolate_w(&a, &b, 4, 8).unwrap(), w(0.5));
        assert!(matches!(interpolate_w(&a, &b, 9, 8), Err(Error::Range(_))));
        assert!(matches!(interpolate_w(&a, &b, 0, 0), Err(Error::Range(_))));
    }
}
