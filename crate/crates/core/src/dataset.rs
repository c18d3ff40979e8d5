//! Synthetic training corpus: Gaussian `z`, mapped `w`, rendered image,
//! all written to disk with a hash manifest.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbones;
use crate::domain::{ImageTensor, LatentW, LatentZ, LATENT_DIM};
use crate::error::{Error, Result};
use crate::imageio;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_COUNT: usize = 70_000;
/// Entries rendered per generator call; fixed so output never depends on
/// the thread count.
const RENDER_CHUNK: usize = 32;

const VECTOR_MAGIC: [u8; 8] = *b"CFVECTOR";
const VECTOR_VERSION: u32 = 1;
const VECTOR_HEADER: usize = 16;

/// 16-byte header (magic, dim, version) then little-endian f32 values.
pub fn encode_vector(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(VECTOR_HEADER + 4 * values.len());
    out.extend_from_slice(&VECTOR_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    out.extend_from_slice(&VECTOR_VERSION.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vector(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < VECTOR_HEADER || bytes[..8] != VECTOR_MAGIC {
        return Err(Error::Format("not a vector file".into()));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let version = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if version != VECTOR_VERSION {
        return Err(Error::Format(format!("unsupported vector version {version}")));
    }
    let body = &bytes[VECTOR_HEADER..];
    if body.len() != 4 * dim {
        return Err(Error::Format(format!("vector header says {dim} values, body has {} bytes", body.len())));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn read_vector(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vector(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub z_file: String,
    pub w_file: String,
    pub image_file: String,
    pub z_sha256: String,
    pub w_sha256: String,
    pub image_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    /// Resampling bound on `|z_i|`, if the truncation flag was set.
    pub truncation: Option<f64>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForgeOptions {
    pub count: usize,
    pub seed: u64,
    pub truncation: Option<f64>,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        Self {
            count: DEFAULT_COUNT,
            seed: 0,
            truncation: None,
        }
    }
}

/// The `z` drawn for entry `index`; each entry owns an RNG stream.
pub fn sample_z(seed: u64, index: u64, truncation: Option<f64>) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..LATENT_DIM)
        .map(|_| loop {
            let v: f64 = rng.sample(StandardNormal);
            match truncation {
                Some(t) if v.abs() > t => continue,
                _ => break v as f32,
            }
        })
        .collect()
}

fn entry_names(index: u64) -> (String, String, String) {
    (
        format!("z/{index:06}.vec"),
        format!("w/{index:06}.vec"),
        format!("images/{index:06}.png"),
    )
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn forge_chunk(b: &Backbones, dir: &Path, opts: &ForgeOptions, indices: std::ops::Range<usize>) -> Result<Vec<ManifestEntry>> {
    let zs: Vec<Vec<f32>> = indices
        .clone()
        .map(|i| sample_z(opts.seed, i as u64, opts.truncation))
        .collect();
    let flat: Vec<f32> = zs.iter().flatten().copied().collect();
    let z = Tensor::from_vec(flat, (zs.len(), LATENT_DIM), &b.device())?.to_dtype(b.dtype())?;
    let w = b.mapping.forward(&z)?;
    let imgs = b.synthesis.forward(&w)?;
    indices
        .enumerate()
        .map(|(row, index)| {
            let index = index as u64;
            let (z_file, w_file, image_file) = entry_names(index);
            let z_bytes = encode_vector(&zs[row]);
            let w_bytes = encode_vector(LatentW::from_tensor_row(&w, row)?.as_slice());
            let png = imageio::encode_png(&ImageTensor::from_batch(&imgs, row)?)?;
            write_file(dir, &z_file, &z_bytes)?;
            write_file(dir, &w_file, &w_bytes)?;
            write_file(dir, &image_file, &png)?;
            Ok(ManifestEntry {
                index,
                z_file,
                w_file,
                image_file,
                z_sha256: sha256_hex(&z_bytes),
                w_sha256: sha256_hex(&w_bytes),
                image_sha256: sha256_hex(&png),
            })
        })
        .collect()
}

/// Renders `opts.count` entries into `out_dir`. The manifest is written
/// last, so its presence marks a complete dataset.
pub fn forge(opts: &ForgeOptions, b: &Backbones, out_dir: &Path) -> Result<DatasetManifest> {
    if let Some(t) = opts.truncation {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Parameter(format!("truncation must be > 0, got {t}")));
        }
    }
    for sub in ["z", "w", "images"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
    }
    let chunks: Vec<std::ops::Range<usize>> = (0..opts.count)
        .step_by(RENDER_CHUNK)
        .map(|s| s..(s + RENDER_CHUNK).min(opts.count))
        .collect();
    let parts: Vec<Vec<ManifestEntry>> = chunks
        .into_par_iter()
        .map(|r| forge_chunk(b, out_dir, opts, r))
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        seed: opts.seed,
        count: opts.count,
        resolution: b.resolution(),
        truncation: opts.truncation,
        entries: parts.into_iter().flatten().collect(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: schema version {} is not supported",
            path.display(),
            m.schema_version
        )));
    }
    if m.entries.len() != m.count {
        return Err(Error::Format(format!(
            "{}: count {} but {} entries",
            path.display(),
            m.count,
            m.entries.len()
        )));
    }
    Ok(m)
}

/// Re-hashes every file named in the manifest.
pub fn verify(dir: &Path, m: &DatasetManifest) -> Result<()> {
    m.entries.par_iter().try_for_each(|e| {
        for (file, want) in [(&e.z_file, &e.z_sha256), (&e.w_file, &e.w_sha256), (&e.image_file, &e.image_sha256)] {
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|err| Error::Integrity {
                path: path.clone(),
                detail: err.to_string(),
            })?;
            let got = sha256_hex(&bytes);
            if &got != want {
                return Err(Error::Integrity {
                    path,
                    detail: format!("sha256 {got} does not match manifest {want}"),
                });
            }
        }
        Ok(())
    })
}

/// Draws an (identity, pose) pair with replacement.
pub fn sample_pair<'a, R: Rng + ?Sized>(
    m: &'a DatasetManifest,
    same: bool,
    rng: &mut R,
) -> Result<(&'a ManifestEntry, &'a ManifestEntry)> {
    if m.entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = m.entries.len();
    let a = &m.entries[rng.random_range(0..n)];
    let b = if same { a } else { &m.entries[rng.random_range(0..n)] };
    Ok((a, b))
}

/// A manifest plus the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: load_manifest(dir)?,
        })
    }

    pub fn image(&self, e: &ManifestEntry, device: &Device) -> Result<ImageTensor> {
        imageio::read_png(&self.dir.join(&e.image_file), device)
    }

    pub fn w(&self, e: &ManifestEntry) -> Result<LatentW> {
        LatentW::new(read_vector(&self.dir.join(&e.w_file))?)
    }

    pub fn z(&self, e: &ManifestEntry) -> Result<LatentZ> {
        LatentZ::new(read_vector(&self.dir.join(&e.z_file))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianityReport {
    pub count: usize,
    pub max_abs_mean: f64,
    pub mean_bound: f64,
    pub min_var: f64,
    pub max_var: f64,
}

impl GaussianityReport {
    pub fn passed(&self) -> bool {
        self.max_abs_mean <= self.mean_bound && self.min_var >= 0.9 && self.max_var <= 1.1
    }
}

/// Per-coordinate sample mean and variance over a set of `z` vectors.
pub fn gaussianity(zs: &[Vec<f32>]) -> Result<GaussianityReport> {
    let n = zs.len();
    if n < 2 {
        return Err(Error::Parameter("gaussianity check needs at least two vectors".into()));
    }
    let d = zs[0].len();
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for z in zs {
        if z.len() != d {
            return Err(Error::Dimension("z vectors differ in length".into()));
        }
        for (i, &v) in z.iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += (v as f64).powi(2);
        }
    }
    let nf = n as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let vars: Vec<f64> = sq
        .iter()
        .zip(&means)
        .map(|(s, m)| (s - nf * m * m) / (nf - 1.0))
        .collect();
    Ok(GaussianityReport {
        count: n,
        max_abs_mean: means.iter().fold(0.0, |a, m| a.max(m.abs())),
        mean_bound: 4.0 / nf.sqrt(),
        min_var: vars.iter().copied().fold(f64::INFINITY, f64::min),
        max_var: vars.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}
