//! Training loop for the mapper and the pose-encoder tail.

pub mod adam;
pub mod discriminator;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbones;
use crate::config::{RecTarget, RunConfig, TrainConfig};
use crate::dataset::{sample_pair, Dataset, ManifestEntry};
use crate::domain::ImageTensor;
use crate::error::{Error, Result};
use crate::imageio;
use crate::losses::{
    self, adv_d_loss_tensor, adv_g_loss_tensor, identity_loss_tensor, landmark_loss_tensor, mix_loss_tensor,
    LossComponents, LossReport, Mode, MsSsimConfig,
};
use crate::mapper::{Mapper, MapperConfig};
use crate::nn::{self, tensor_seed, ParamBuilder};
use crate::pipeline::{self, latent_batch, render_batch};

use adam::{Adam, AdamParams};
use discriminator::Discriminator;

pub const CHECKPOINT_FORMAT: &str = "cartoonforge-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Datasets up to this size are held in memory during training.
const IMAGE_CACHE_LIMIT: usize = 4096;

/// Iteration `i` (1-based) reconstructs iff `i` is a multiple of `period`.
pub fn iteration_mode(i: u64, recon_period: u64) -> Mode {
    if recon_period > 0 && i.is_multiple_of(recon_period) {
        Mode::Reconstruct
    } else {
        Mode::Disentangle
    }
}

/// Randomness for iteration `i` depends only on the run seed and `i`.
pub fn iteration_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

#[derive(Debug)]
pub struct Adversary {
    pub disc: Discriminator,
    pub adam: Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub iteration: u64,
    pub seed: u64,
    pub rng: String,
    pub adam_step: u64,
    pub disc_adam_step: Option<u64>,
    pub mapper: MapperConfig,
    pub config: String,
}

/// A loaded checkpoint: metadata plus every stored tensor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

fn strip(tensors: &HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

impl Checkpoint {
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
        }
        let (tensors, meta) = nn::load_safetensors(path, device)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{} is not a version {CHECKPOINT_VERSION} checkpoint",
                path.display()
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn mapper(&self, dtype: DType, device: &Device) -> Result<Mapper> {
        let pb = ParamBuilder::from_tensors(strip(&self.tensors, "mapper/"), dtype, device);
        Mapper::build(self.meta.mapper.clone(), pb)
    }

    /// Writes the stored pose-tail weights into `b`.
    pub fn apply_pose_tail(&self, b: &Backbones) -> Result<()> {
        b.pose.params().assign_trainable(&self.tensors, "pose_tail/")
    }
}

/// Mapper, optimiser and (optionally) discriminator state for one run.
/// The trainer also writes the pose tail held by the backbones it is
/// given.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    echo: String,
    backbones: &'a Backbones,
    data: &'a Dataset,
    iteration: u64,
    mapper: Mapper,
    adam: Adam,
    adversary: Option<Adversary>,
    ms_ssim: MsSsimConfig,
    cache: HashMap<u64, Tensor>,
}

impl<'a> Trainer<'a> {
    pub fn new(run: &RunConfig, backbones: &'a Backbones, data: &'a Dataset) -> Result<Self> {
        let cfg = run.train.clone();
        cfg.validate()?;
        if data.manifest.resolution != backbones.resolution() {
            return Err(Error::Config(format!(
                "dataset resolution {} does not match backend resolution {}",
                data.manifest.resolution,
                backbones.resolution()
            )));
        }
        let mcfg = run
            .mapper
            .config(backbones.pose.handle().output_dim, backbones.identity.handle().output_dim);
        let (dtype, dev) = (backbones.dtype(), backbones.device());
        let mapper = Mapper::seeded(mcfg, tensor_seed(cfg.seed, "mapper"), dtype, &dev)?;
        let adam = Self::make_adam(&cfg, &mapper, backbones)?;
        let adversary = if cfg.adversarial {
            let disc = Discriminator::seeded(tensor_seed(cfg.seed, "discriminator"), dtype, &dev)?;
            let mut dadam = Adam::new(cfg.learning_rate, AdamParams::default());
            dadam.add_group(prefixed_vars("disc/", disc.vars()), 1.0)?;
            Some(Adversary { disc, adam: dadam })
        } else {
            None
        };
        Ok(Self {
            cfg,
            echo: run.echo(),
            backbones,
            data,
            iteration: 0,
            mapper,
            adam,
            adversary,
            ms_ssim: MsSsimConfig::default(),
            cache: HashMap::new(),
        })
    }

    /// Continues from `ckpt`, restoring mapper, pose tail and optimiser
    /// state exactly.
    pub fn resume(run: &RunConfig, backbones: &'a Backbones, data: &'a Dataset, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(run, backbones, data)?;
        if ckpt.meta.seed != t.cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint seed {} differs from configured seed {}",
                ckpt.meta.seed, t.cfg.seed
            )));
        }
        let (dtype, dev) = (backbones.dtype(), backbones.device());
        t.mapper = ckpt.mapper(dtype, &dev)?;
        ckpt.apply_pose_tail(backbones)?;
        t.adam = Self::make_adam(&t.cfg, &t.mapper, backbones)?;
        t.adam.load_state(ckpt.meta.adam_step, &ckpt.tensors, "adam/")?;
        match (&mut t.adversary, ckpt.meta.disc_adam_step) {
            (Some(adv), Some(step)) => {
                adv.disc.params().assign_trainable(&ckpt.tensors, "disc/")?;
                adv.adam.load_state(step, &ckpt.tensors, "disc_adam/")?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "checkpoint and config disagree on the adversarial setting".into(),
                ))
            }
        }
        t.iteration = ckpt.meta.iteration;
        Ok(t)
    }

    fn make_adam(cfg: &TrainConfig, mapper: &Mapper, b: &Backbones) -> Result<Adam> {
        let mut adam = Adam::new(cfg.learning_rate, AdamParams::default());
        adam.add_group(prefixed_vars("mapper/", mapper.vars()), 1.0)?;
        adam.add_group(prefixed_vars("pose_tail/", b.pose.tail_params()), cfg.pose_lr_multiplier)?;
        Ok(adam)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn mapper(&self) -> &Mapper {
        &self.mapper
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.adversary.as_ref().map(|a| &a.disc)
    }

    fn image(&mut self, e: &ManifestEntry) -> Result<Tensor> {
        if let Some(t) = self.cache.get(&e.index) {
            return Ok(t.clone());
        }
        let dev = self.backbones.device();
        let t = self.data.image(e, &dev)?.into_tensor().to_dtype(self.backbones.dtype())?;
        if self.data.manifest.count <= IMAGE_CACHE_LIMIT {
            self.cache.insert(e.index, t.clone());
        }
        Ok(t)
    }

    fn batch(&mut self, entries: &[&ManifestEntry]) -> Result<Tensor> {
        let imgs = entries.iter().map(|e| self.image(e)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&imgs, 0)?)
    }

    /// Runs one iteration and returns its loss report.
    pub fn step(&mut self) -> Result<LossReport> {
        let i = self.iteration + 1;
        let mode = iteration_mode(i, self.cfg.recon_period);
        let same = mode == Mode::Reconstruct;
        let weights = self.cfg.weights_at(i);
        let mut rng = iteration_rng(self.cfg.seed, i);
        let data = self.data;
        let b = self.backbones;

        let mut id_entries = Vec::with_capacity(self.cfg.batch_size);
        let mut pose_entries = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let (a, p) = sample_pair(&data.manifest, same, &mut rng)?;
            id_entries.push(a);
            pose_entries.push(p);
        }
        let id = self.batch(&id_entries)?;
        let pose = if same { id.clone() } else { self.batch(&pose_entries)? };

        // Targets live in cartoon space and carry no gradient.
        let c_id = b.cartooniser.forward(&id)?.detach();
        let c_pose = if same { c_id.clone() } else { b.cartooniser.forward(&pose)?.detach() };
        let e_ref = b.identity.forward(&c_id)?.detach();
        let l_ref = b.landmark.forward(&c_pose)?.detach();

        let w = latent_batch(b, &self.mapper, &id, &pose, true)?;
        let (_, out) = render_batch(b, &w)?;
        let l_id = identity_loss_tensor(&e_ref, &b.identity.forward(&out)?)?;
        let l_lnd = landmark_loss_tensor(&l_ref, &b.landmark.forward(&out)?, self.cfg.landmark_norm)?;
        let l_rec = if same {
            let target = match self.cfg.rec_target {
                RecTarget::CartoonisedInput => &c_id,
                RecTarget::RawInput => &id,
            };
            Some(mix_loss_tensor(&out, target, weights.alpha, &self.ms_ssim)?)
        } else {
            None
        };

        let mut l_adv_g = None;
        let mut l_adv_d = None;
        if let Some(adv) = &mut self.adversary {
            let real_entries: Vec<&ManifestEntry> = (0..self.cfg.batch_size)
                .map(|_| sample_pair(&data.manifest, true, &mut rng).map(|(e, _)| e))
                .collect::<Result<_>>()?;
            let rows = real_entries
                .iter()
                .map(|e| data.w(e)?.to_tensor(b.dtype(), &b.device()))
                .collect::<Result<Vec<_>>>()?;
            let real = Tensor::cat(&rows, 0)?;
            let (p_real, grad_sq) = adv.disc.prob_and_grad_norm_sq(&real)?;
            let p_fake = adv.disc.prob(&w.detach())?;
            let ld = adv_d_loss_tensor(&p_real, &p_fake, &grad_sq, weights.gamma_r1)?;
            let ld_value = scalar(&ld)?;
            if !ld_value.is_finite() {
                return Err(Error::Numerical(format!("discriminator loss is {ld_value} at iteration {i}")));
            }
            adv.adam.step(&ld.backward()?)?;
            l_adv_g = Some(adv_g_loss_tensor(&adv.disc.prob(&w)?)?);
            l_adv_d = Some(ld_value);
        }

        let mut total = ((&l_id * weights.lambda_id)? + (&l_lnd * weights.lambda_lnd)?)?;
        if let Some(r) = &l_rec {
            total = (total + (r * weights.lambda_rec)?)?;
        }
        if let Some(g) = &l_adv_g {
            total = (total + (g * weights.lambda_adv)?)?;
        }
        let comps = LossComponents {
            l_id: scalar(&l_id)?,
            l_lnd: scalar(&l_lnd)?,
            l_rec: l_rec.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            l_adv_g: l_adv_g.as_ref().map(scalar).transpose()?,
        };
        let total_value = scalar(&total)?;
        if !total_value.is_finite() {
            return Err(Error::Numerical(format!("total loss is {total_value} at iteration {i}")));
        }
        let grads = total.backward()?;
        self.adam.step(&grads)?;
        self.iteration = i;
        Ok(LossReport::new(i, mode, comps, l_adv_d, &weights))
    }

    /// Writes a checkpoint and returns the file's SHA-256.
    pub fn save_checkpoint(&self, path: &Path) -> Result<String> {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.mapper.params().tensors() {
            tensors.insert(format!("mapper/{k}"), v);
        }
        for (k, v) in self.backbones.pose.tail_params() {
            tensors.insert(format!("pose_tail/{k}"), v.as_tensor().clone());
        }
        for (k, v) in self.adam.state() {
            tensors.insert(format!("adam/{k}"), v);
        }
        if let Some(adv) = &self.adversary {
            for (k, v) in adv.disc.params().tensors() {
                tensors.insert(format!("disc/{k}"), v);
            }
            for (k, v) in adv.adam.state() {
                tensors.insert(format!("disc_adam/{k}"), v);
            }
        }
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            seed: self.cfg.seed,
            rng: "chacha8(seed), stream = iteration".into(),
            adam_step: self.adam.step_count(),
            disc_adam_step: self.adversary.as_ref().map(|a| a.adam.step_count()),
            mapper: self.mapper.config().clone(),
            config: self.echo.clone(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        nn::save_safetensors(path, &tensors, &json)?;
        file_sha256(path)
    }

    /// Self-driven sample of the first dataset entry.
    pub fn sample(&self) -> Result<Option<ImageTensor>> {
        let Some(e) = self.data.manifest.entries.first() else { return Ok(None) };
        let img = self.data.image(e, &self.backbones.device())?;
        let img = ImageTensor::new(img.into_tensor().to_dtype(self.backbones.dtype())?)?;
        Ok(Some(pipeline::synthesize(self.backbones, &self.mapper, &img, &img)?.out))
    }
}

fn prefixed_vars(prefix: &str, vars: Vec<(String, candle_core::Var)>) -> Vec<(String, candle_core::Var)> {
    vars.into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::dataset::sha256_hex(&bytes))
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.echo")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.checkpoints().join(format!("iter_{iteration:08}.safetensors"))
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn adapters(&self) -> PathBuf {
        self.root.join("adapters.json")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.samples()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub final_sha256: String,
    /// Reports produced by this invocation (not earlier, resumed ones).
    pub reports: Vec<LossReport>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains from scratch or from `resume`, writing the run layout under
/// `out_dir`. Backbones are loaded fresh from `run.backend`.
pub fn train(run: &RunConfig, dataset_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let device = Device::Cpu;
    let backbones = Backbones::load(&run.backend, &device)?;
    let data = Dataset::open(dataset_dir)?;
    let layout = RunLayout::new(out_dir);
    layout.create()?;
    write_text(&layout.config_echo(), &run.echo())?;
    let manifest = serde_json::to_string_pretty(&backbones.manifest()).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&layout.adapters(), &manifest)?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, &device)?;
            let t = Trainer::resume(run, &backbones, &data, &ckpt)?;
            let kept: Vec<LossReport> = if layout.losses().is_file() {
                losses::read_loss_csv(&layout.losses())?
                    .into_iter()
                    .filter(|r| r.iteration <= t.iteration())
                    .collect()
            } else {
                Vec::new()
            };
            losses::write_loss_csv(&layout.losses(), &kept)?;
            t
        }
        None => {
            let t = Trainer::new(run, &backbones, &data)?;
            losses::write_loss_csv(&layout.losses(), &[])?;
            t.save_checkpoint(&layout.checkpoint(0))?;
            t
        }
    };

    let every = run.train.checkpoint_every;
    let mut reports = Vec::new();
    let mut last = None;
    while trainer.iteration() < run.train.max_iterations {
        let report = trainer.step()?;
        losses::append_loss_csv(&layout.losses(), std::slice::from_ref(&report))?;
        reports.push(report);
        let i = trainer.iteration();
        if (every > 0 && i % every == 0) || i == run.train.max_iterations {
            last = Some((layout.checkpoint(i), trainer.save_checkpoint(&layout.checkpoint(i))?));
            if let Some(img) = trainer.sample()? {
                imageio::write_png(&layout.samples().join(format!("iter_{i:08}.png")), &img)?;
            }
        }
    }
    let (final_checkpoint, final_sha256) = match last {
        Some(x) => x,
        None => {
            let p = layout.checkpoint(trainer.iteration());
            let h = trainer.save_checkpoint(&p)?;
            (p, h)
        }
    };
    Ok(TrainOutcome {
        final_checkpoint,
        final_sha256,
        reports,
    })
}

/// Loads backbones and a trained mapper for inference.
pub fn load_for_inference(run: &RunConfig, ckpt_path: &Path) -> Result<(Backbones, Mapper)> {
    let device = Device::Cpu;
    let ckpt = Checkpoint::load(ckpt_path, &device)?;
    let b = Backbones::load(&run.backend, &device)?;
    ckpt.apply_pose_tail(&b)?;
    let m = ckpt.mapper(b.dtype(), &device)?;
    Ok((b, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        assert_eq!(iteration_mode(3, 3), Mode::Reconstruct);
        assert_eq!(iteration_mode(1, 3), Mode::Disentangle);
        assert_eq!(iteration_mode(300, 3), Mode::Reconstruct);
        assert_eq!((1..=300).filter(|&i| iteration_mode(i, 3) == Mode::Reconstruct).count(), 100);
        assert!((1..=10).all(|i| iteration_mode(i, 1) == Mode::Reconstruct));
    }

    #[test]
    fn iteration_rng_is_stateless() {
        use rand::Rng;
        let a: u64 = iteration_rng(4, 17).random();
        let _: u64 = iteration_rng(4, 16).random();
        let b: u64 = iteration_rng(4, 17).random();
        assert_eq!(a, b);
        let c: u64 = iteration_rng(4, 18).random();
        assert_ne!(a, c);
    }
}
