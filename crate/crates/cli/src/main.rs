use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use cartoonforge::backbone::Backbones;
use cartoonforge::config::RunConfig;
use cartoonforge::dataset::{self, Dataset, ForgeOptions, MANIFEST_FILE};
use cartoonforge::domain::{ImageTensor, LatentW};
use cartoonforge::eval::flicker::{flicker_probe, LatentNoise};
use cartoonforge::eval::identity::{identity_increment_pipeline, write_identity_csv};
use cartoonforge::eval::interpolate::{interpolation_strip, write_strip, StripMode, STRIP_STEPS};
use cartoonforge::eval::plot::{plot_losses, plot_tsne};
use cartoonforge::eval::tsne::{tsne_export, write_tsne_csv, TsneConfig};
use cartoonforge::imageio::{read_png, write_png};
use cartoonforge::losses::read_loss_csv;
use cartoonforge::mapper::Mapper;
use cartoonforge::pipeline::synthesize;
use cartoonforge::trainer::{load_for_inference, train};
use cartoonforge::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cartoonforge", version, about = "Pose-aware cartoon face generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_kv)]
    params: Vec<(String, String)>,
    /// Backend kind; takes precedence over the file and CARTOONFORGE_BACKEND
    #[arg(long, value_name = "toy|pretrained")]
    backend: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.params.clone();
        if let Some(b) = &self.backend {
            overrides.push(("backend.kind".into(), b.clone()));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample z, map to w, render and write the training corpus
    Dataset {
        /// Number of samples
        #[arg(long, default_value_t = dataset::DEFAULT_COUNT)]
        count: usize,
        /// Sampling seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resample z coordinates whose magnitude exceeds this bound
        #[arg(long)]
        truncation: Option<f64>,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the mapper and pose tail
    Train {
        /// Forged dataset directory
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Run directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from this checkpoint
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a cartoon from an identity image and a pose image
    Infer {
        /// Identity image (PNG)
        #[arg(long, value_name = "IMG")]
        identity: PathBuf,
        /// Pose image (PNG)
        #[arg(long, value_name = "IMG")]
        pose: PathBuf,
        /// Trained checkpoint
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Output PNG
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Also write the latent as a vector file
        #[arg(long, value_name = "FILE")]
        save_w: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a latent interpolation strip between two configurations
    Interpolate {
        /// First image
        #[arg(long, value_name = "IMG")]
        a: PathBuf,
        /// Second image
        #[arg(long, value_name = "IMG")]
        b: PathBuf,
        /// Which factor moves from `a` towards `b`
        #[arg(long, value_name = "pose|identity")]
        mode: String,
        /// Trained checkpoint
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Number of steps
        #[arg(long, default_value_t = STRIP_STEPS)]
        steps: usize,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Identity-loss increment of cartoonisation over an image set
    EvalId {
        /// Dataset directory or directory of PNGs
        #[arg(long = "set", value_name = "DIR")]
        set: PathBuf,
        /// Trained checkpoint
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Use at most this many images
        #[arg(long)]
        limit: Option<usize>,
        /// Report CSV
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        /// Also write each image's mapped latent into this directory
        #[arg(long, value_name = "DIR")]
        mapped_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Joint t-SNE of original and mapped latents
    Tsne {
        /// Directory of original latent vector files
        #[arg(long, value_name = "DIR")]
        original: PathBuf,
        /// Directory of mapped latent vector files
        #[arg(long, value_name = "DIR")]
        mapped: PathBuf,
        /// Embedding dimension (2 or 3)
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Repeated inference on one image, reporting pixel differences
    Flicker {
        /// Input image, used as both identity and pose
        #[arg(long, value_name = "IMG")]
        img: PathBuf,
        /// Number of runs
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Trained checkpoint
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Gaussian noise added to the latent on every run
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Write each run's output here
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render per-term loss curves from a loss CSV
    PlotLosses {
        /// Loss CSV written by `train`
        #[arg(long, value_name = "CSV")]
        csv: PathBuf,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn model(cfg: &ConfigArgs, ckpt: &Path) -> Result<(Backbones, Mapper)> {
    require_file(ckpt, "checkpoint")?;
    load_for_inference(&cfg.load()?, ckpt)
}

fn load_image(path: &Path, b: &Backbones) -> Result<ImageTensor> {
    let img = read_png(path, &b.device())?;
    if img.resolution() != b.resolution() {
        return Err(Error::Config(format!(
            "{} is {2}x{2} but the backend runs at {1}x{1}",
            path.display(),
            b.resolution(),
            img.resolution()
        )));
    }
    Ok(img)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Images of a forged dataset in index order, or every PNG in `dir`.
fn image_set(dir: &Path, b: &Backbones, limit: Option<usize>) -> Result<Vec<ImageTensor>> {
    let paths: Vec<PathBuf> = if dir.join(MANIFEST_FILE).is_file() {
        let ds = Dataset::open(dir)?;
        ds.manifest.entries.iter().map(|e| dir.join(&e.image_file)).collect()
    } else {
        sorted_files(dir, "png")?
    };
    let n = limit.unwrap_or(paths.len()).min(paths.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    paths[..n].iter().map(|p| load_image(p, b)).collect()
}

fn read_latents(dir: &Path) -> Result<Vec<LatentW>> {
    sorted_files(dir, "vec")?
        .iter()
        .map(|p| LatentW::new(dataset::read_vector(p)?))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset { count, seed, truncation, out, cfg } => {
            let run = cfg.load()?;
            let b = Backbones::load(&run.backend, &Device::Cpu)?;
            let m = dataset::forge(&ForgeOptions { count, seed, truncation }, &b, &out)?;
            println!("entries={} resolution={} manifest={}", m.count, m.resolution, out.join(MANIFEST_FILE).display());
        }
        Command::Train { dataset, out, resume, cfg } => {
            let run = cfg.load()?;
            if let Some(r) = &resume {
                require_file(r, "checkpoint")?;
            }
            let res = train(&run, &dataset, &out, resume.as_deref())?;
            if let Some(last) = res.reports.last() {
                println!("iteration={} l_total={}", last.iteration, last.l_total);
            }
            println!("checkpoint={} sha256={}", res.final_checkpoint.display(), res.final_sha256);
        }
        Command::Infer { identity, pose, ckpt, out, save_w, cfg } => {
            let (b, m) = model(&cfg, &ckpt)?;
            let id = load_image(&identity, &b)?;
            let pose = load_image(&pose, &b)?;
            let s = synthesize(&b, &m, &id, &pose)?;
            write_png(&out, &s.out)?;
            if let Some(p) = save_w {
                std::fs::write(&p, dataset::encode_vector(s.w.as_slice()))
                    .map_err(|e| Error::Io { path: p.clone(), source: e })?;
            }
            println!("w_sha256={}", s.w.sha256_hex());
        }
        Command::Interpolate { a, b: b_img, mode, ckpt, steps, out, cfg } => {
            let mode: StripMode = mode.parse()?;
            let (b, m) = model(&cfg, &ckpt)?;
            let img_a = load_image(&a, &b)?;
            let img_b = load_image(&b_img, &b)?;
            let strip = interpolation_strip(&img_a, &img_b, mode, &b, &m, steps)?;
            mkdir(&out)?;
            for (k, img) in strip.images.iter().enumerate() {
                write_png(&out.join(format!("k{:02}.png", k + 1)), img)?;
            }
            write_strip(&out.join("strip.png"), &strip.images)?;
            println!("w1_sha256={} w2_sha256={}", strip.w1.sha256_hex(), strip.w2.sha256_hex());
        }
        Command::EvalId { set, ckpt, limit, out, mapped_out, cfg } => {
            let (b, m) = model(&cfg, &ckpt)?;
            let images = image_set(&set, &b, limit)?;
            let report = identity_increment_pipeline(&images, &b, &m)?;
            write_identity_csv(&out, &report)?;
            if let Some(dir) = mapped_out {
                mkdir(&dir)?;
                for (i, img) in images.iter().enumerate() {
                    let w = synthesize(&b, &m, img, img)?.w;
                    let p = dir.join(format!("{i:06}.vec"));
                    std::fs::write(&p, dataset::encode_vector(w.as_slice()))
                        .map_err(|e| Error::Io { path: p.clone(), source: e })?;
                }
            }
            let a = report.aggregate;
            println!(
                "images={} mean_before={} mean_after={} increment={}",
                report.rows.len(),
                a.mean_before,
                a.mean_after,
                a.increment
            );
        }
        Command::Tsne { original, mapped, dims, perplexity, iterations, seed, out } => {
            let cfg = TsneConfig { dims, perplexity, iterations, seed, ..TsneConfig::default() };
            let points = tsne_export(&read_latents(&original)?, &read_latents(&mapped)?, &cfg)?;
            mkdir(&out)?;
            write_tsne_csv(&out.join("tsne.csv"), &points)?;
            plot_tsne(&points, &out.join("tsne.png"))?;
            println!("points={} dims={dims}", points.len());
        }
        Command::Flicker { img, runs, ckpt, noise_sigma, noise_seed, out, cfg } => {
            let (b, m) = model(&cfg, &ckpt)?;
            let input = load_image(&img, &b)?;
            let noise = noise_sigma.map(|sigma| LatentNoise { sigma, seed: noise_seed });
            let probe = flicker_probe(&input, runs, &b, &m, noise)?;
            if let Some(dir) = out {
                mkdir(&dir)?;
                for (i, o) in probe.outputs.iter().enumerate() {
                    write_png(&dir.join(format!("run{:02}.png", i + 1)), o)?;
                }
            }
            let s = probe.stats;
            println!("runs={} pairs={} max_abs_diff={} mean_abs_diff={}", s.runs, s.pairs, s.max_abs_diff, s.mean_abs_diff);
        }
        Command::PlotLosses { csv, out } => {
            let rows = read_loss_csv(&csv)?;
            for p in plot_losses(&rows, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
