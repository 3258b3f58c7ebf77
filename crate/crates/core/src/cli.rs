//! Command-line front end: configuration, run directories and manifests.
//!
//! Every command resolves one [`RunConfig`] (defaults, then the JSON file,
//! then flags), runs, and writes `manifest.json` into its output directory.
//! The manifest holds everything needed to repeat the run: the resolved
//! configuration, the seed, the code version and a digest of every input.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{read_grid_file, read_mask_file, read_station_csv, write_grid_file, GridData, GridShape, PrecipFrame, PrecipSequence};
use crate::ingest::{build_meteo_stack, group_by_variable, KrigingConfig};
use crate::physics::{self, ConsistencyConfig, ResidualConfig};
use crate::pid::{self, AblationFlags, PidConfig, TrainingSequence};
use crate::synth::{self, SynthConfig, SynthDataset};
use crate::transformer::{self, SamplingConfig, TokenStream, Transformer, TransformerConfig};
use crate::verify::{self, CatchmentMask, VerificationConfig};
use crate::vqgan::{self, VqGan, VqGanConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "PIDNOWCAST_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Leading share of a dataset's sequences used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub height: usize,
    pub width: usize,
    /// First output time, minutes.
    pub start_min: i64,
    pub step_min: i64,
    pub count: usize,
    pub kriging: KrigingConfig,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            start_min: 0,
            step_min: 30,
            count: 9,
            kriging: KrigingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqGanSection {
    pub steps: usize,
    /// Check the quantizer invariants every this many steps; 0 disables.
    pub probe_every: usize,
    pub model: VqGanConfig,
}

impl Default for VqGanSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            probe_every: 0,
            model: VqGanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerSection {
    pub steps: usize,
    pub model: TransformerConfig,
}

impl Default for TransformerSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            model: TransformerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidSection {
    pub steps: usize,
    /// `full`, `-P` or `-PT`.
    pub ablation: String,
    /// The residual constants are taken from the dataset, not from here.
    pub model: PidConfig,
}

impl Default for PidSection {
    fn default() -> Self {
        Self {
            steps: 500,
            ablation: "full".into(),
            model: PidConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub n_samples: usize,
    pub sampling: SamplingConfig,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            n_samples: 8,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsSection {
    pub residual: ResidualConfig,
    pub consistency: ConsistencyConfig,
    /// Index in the meteorology file of the first scored frame. Grid files
    /// carry no start time; unset aligns the frames with the end of the file.
    pub first_frame: Option<usize>,
}

/// The whole configuration document; each command reads its own section.
/// `seed` drives every random choice and replaces `synth.seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub vqgan: VqGanSection,
    pub transformer: TransformerSection,
    pub pid: PidSection,
    pub predict: PredictSection,
    pub physics: PhysicsSection,
    pub verify: VerificationConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Synth,
    Ingest,
    TrainVqgan,
    TrainTransformer,
    TrainPid,
    Predict,
    PhysicsScore,
    Evaluate,
    PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Keyed by input role (`data`, `vqgan`, ...).
    pub inputs: BTreeMap<String, InputDigest>,
}

/// A fully resolved command: what to run, on which inputs, with which settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    pub out: PathBuf,
}

/// SHA-256 of a file, or of a directory's files in name order (names included).
pub fn digest_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        for entry in sorted_files(path, None)? {
            let name = entry.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name == MANIFEST_FILE {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0]);
            h.update(fs::read(&entry).map_err(|e| Error::io(&entry, e))?);
        }
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn sorted_files(dir: &Path, extension: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && extension.is_none_or(|ext| p.extension().is_some_and(|e| e == ext)) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Invocation {
    fn input(&self, role: &str) -> Result<&Path> {
        self.inputs
            .get(role)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("missing input `{role}`")))
    }

    fn manifest(&self) -> Result<Manifest> {
        let inputs = self
            .inputs
            .iter()
            .map(|(role, path)| {
                Ok((
                    role.clone(),
                    InputDigest {
                        path: path.clone(),
                        sha256: digest_path(path)?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.config.seed,
            config: self.config.clone(),
            inputs,
        })
    }

    /// Runs the command and writes its manifest; returns a one-line summary.
    pub fn run(&self) -> Result<String> {
        for (role, path) in &self.inputs {
            if !path.exists() {
                return Err(Error::Config(format!("input `{role}` not found: {}", path.display())));
            }
        }
        // digests first, so a failing input is reported before any work
        let manifest = self.manifest()?;
        for (role, path) in &self.inputs {
            if path.starts_with(&self.out) || self.out.starts_with(path) && path.is_dir() {
                return Err(Error::Config(format!(
                    "output directory {} overlaps input `{role}`",
                    self.out.display()
                )));
            }
        }
        ensure_dir(&self.out)?;
        let summary = match self.command {
            Command::Synth => self.synth()?,
            Command::Ingest => self.ingest()?,
            Command::TrainVqgan => self.train_vqgan()?,
            Command::TrainTransformer => self.train_transformer()?,
            Command::TrainPid => self.train_pid()?,
            Command::Predict => self.predict()?,
            Command::PhysicsScore => self.physics_score()?,
            Command::Evaluate => self.evaluate(true)?,
            Command::PrCurve => self.evaluate(false)?,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&self.out.join(MANIFEST_FILE), json + "\n")?;
        Ok(summary)
    }

    /// Rebuilds an invocation from a manifest, refusing inputs that changed since.
    pub fn from_manifest(manifest: &Manifest, out: PathBuf) -> Result<Self> {
        for (role, d) in &manifest.inputs {
            let now = digest_path(&d.path)?;
            if now != d.sha256 {
                return Err(Error::Config(format!(
                    "input `{role}` ({}) changed since the recorded run",
                    d.path.display()
                )));
            }
        }
        Ok(Self {
            command: manifest.command,
            config: manifest.config.clone(),
            inputs: manifest.inputs.iter().map(|(k, d)| (k.clone(), d.path.clone())).collect(),
            out,
        })
    }

    fn checkpoints(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    fn metrics(&self) -> PathBuf {
        self.out.join("metrics")
    }

    fn synth(&self) -> Result<String> {
        let cfg = SynthConfig {
            seed: self.config.seed,
            ..self.config.synth.clone()
        };
        let ds = synth::generate(&cfg)?;
        synth::write_dataset(&ds, &self.out)?;
        let extremes = ds.sequences.iter().filter(|s| s.is_extreme()).count();
        Ok(format!("wrote {} sequences ({extremes} extreme)", ds.sequences.len()))
    }

    fn ingest(&self) -> Result<String> {
        let c = &self.config.ingest;
        if c.count == 0 || c.step_min <= 0 {
            return Err(Error::Config("ingest needs a positive count and step".into()));
        }
        let obs = read_station_csv(self.input("stations")?)?;
        let shape = GridShape::plane(c.height, c.width)?;
        let times: Vec<i64> = (0..c.count as i64).map(|k| c.start_min + k * c.step_min).collect();
        let stacks = build_meteo_stack(&group_by_variable(obs), &times, shape, &c.kriging)?;
        write_grid_file(&GridData::Meteo(stacks), &self.out.join("meteo.pnwg"))?;
        Ok(format!("kriged {} timesteps onto {}x{}", c.count, c.height, c.width))
    }

    fn dataset(&self) -> Result<(SynthDataset, usize)> {
        let ds = synth::read_dataset(self.input("data")?)?;
        let n = ds.sequences.len();
        let f = self.config.data.train_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        let n_train = ((n as f64 * f).round() as usize).clamp(1, n);
        Ok((ds, n_train))
    }

    fn train_vqgan(&self) -> Result<String> {
        let (ds, n_train) = self.dataset()?;
        let frames: Vec<_> = ds.sequences[..n_train]
            .iter()
            .flat_map(|s| s.precip.frames().to_vec())
            .collect();
        let s = &self.config.vqgan;
        let run = vqgan::train_vqgan(&frames, &s.model, s.steps, self.config.seed, s.probe_every)?;
        run.model.save(&self.checkpoints().join("vqgan.ckpt"))?;
        write_file(&self.metrics().join("vqgan_loss.csv"), vqgan::loss_curve_csv(&run.curve))?;
        let last = run.curve.last().map(|r| r.rec).unwrap_or(f64::NAN);
        Ok(format!("trained VQ-GAN for {} steps, final reconstruction loss {last:.4}", s.steps))
    }

    fn train_transformer(&self) -> Result<String> {
        let (ds, n_train) = self.dataset()?;
        let vq = VqGan::load(self.input("vqgan")?)?;
        let streams = ds.sequences[..n_train]
            .iter()
            .map(|s| {
                let shape = s.precip.shape();
                let raw: Vec<&[f32]> = s.precip.frames().iter().map(|f| f.values()).collect();
                Ok(TokenStream::from_grids(&vq.encode_frames(&raw, shape.height, shape.width)?).tokens)
            })
            .collect::<Result<Vec<_>>>()?;
        let s = &self.config.transformer;
        let run = transformer::train_transformer(streams, s.model.clone(), s.steps, self.config.seed)?;
        run.model.save(&self.checkpoints().join("transformer.ckpt"))?;
        write_file(&self.metrics().join("transformer_loss.csv"), run.curve_csv())?;
        let last = run.curve.last().map(|c| c.1).unwrap_or(f64::NAN);
        Ok(format!("trained transformer for {} steps, final loss {last:.4}", s.steps))
    }

    fn pid_config(&self, ds: &SynthDataset) -> Result<PidConfig> {
        let cfg = PidConfig {
            residual: ds.config.residual_config(),
            ..self.config.pid.model.clone()
        };
        if (cfg.n_cond, cfg.n_pred) != (ds.config.n_cond, ds.config.n_pred) {
            return Err(Error::Config(format!(
                "pid window {}+{} does not match the dataset's {}+{}",
                cfg.n_cond, cfg.n_pred, ds.config.n_cond, ds.config.n_pred
            )));
        }
        Ok(cfg)
    }

    fn train_pid(&self) -> Result<String> {
        let flags = AblationFlags::from_name(&self.config.pid.ablation)?;
        let (ds, n_train) = self.dataset()?;
        let cfg = self.pid_config(&ds)?;
        let data: Vec<TrainingSequence> = ds.sequences[..n_train].iter().map(TrainingSequence::from).collect();
        let vq = VqGan::load(self.input("vqgan")?)?;
        let tr = Transformer::load(self.input("transformer")?)?;
        let run = pid::train_pid(&data, vq, tr, flags, cfg, self.config.pid.steps, self.config.seed)?;
        let ck = self.checkpoints();
        run.transformer.save(&ck.join("transformer.ckpt"))?;
        run.vqgan.save(&ck.join("vqgan.ckpt"))?;
        if let Some(d) = &run.disc {
            d.save(&ck.join("temporal_disc.ckpt"))?;
        }
        write_file(&self.metrics().join("pid_report.csv"), pid::pid_report_csv(&run.report))?;
        Ok(format!(
            "fine-tuned ({}) for {} steps; physics calls {}, discriminator calls {}",
            flags.name(),
            self.config.pid.steps,
            run.counters.physics,
            run.counters.temporal_disc
        ))
    }

    fn predict(&self) -> Result<String> {
        let (ds, n_train) = self.dataset()?;
        let held_out = &ds.sequences[n_train..];
        if held_out.is_empty() {
            return Err(Error::InsufficientData("no held-out sequences to predict".into()));
        }
        let vq = VqGan::load(self.input("vqgan")?)?;
        let tr = Transformer::load(self.input("transformer")?)?;
        let p = &self.config.predict;
        let (n_cond, n_pred) = (ds.config.n_cond, ds.config.n_pred);
        for (i, s) in held_out.iter().enumerate() {
            let (cond, target) = s.precip.split(n_cond, n_pred)?;
            let seed = self.config.seed.wrapping_add(1000 * i as u64);
            let ens = pid::predict_ensemble(&vq, &tr, &cond, n_pred, p.n_samples, seed, p.sampling)?;
            let name = format!("seq_{:04}.pnwg", s.id);
            write_precip(&self.out.join("predictions").join(&name), ens.mean)?;
            write_precip(&self.out.join("observations").join(&name), target)?;
        }
        Ok(format!("predicted {} held-out sequences with {} members each", held_out.len(), p.n_samples))
    }

    fn physics_score(&self) -> Result<String> {
        let pred = read_grid_file(self.input("pred")?)?.into_precip()?;
        let meteo = read_grid_file(self.input("meteo")?)?.into_meteo()?;
        let c = &self.config.physics;
        let first = match c.first_frame {
            Some(f) => f,
            None => meteo.len().checked_sub(pred.len()).ok_or(Error::Arity {
                expected: meteo.len(),
                found: pred.len(),
            })?,
        };
        let offset = meteo.first().map(|m| m.timestamp()).unwrap_or(0) + first as i64 * pred.step_minutes() as i64;
        let frames = pred
            .frames()
            .iter()
            .map(|f| PrecipFrame::new(f.shape(), f.values().to_vec(), f.timestamp() + offset))
            .collect::<Result<Vec<_>>>()?;
        let pred = PrecipSequence::new(frames, pred.step_minutes())?.with_pixel_size(pred.pixel_size_km())?;
        let mut csv = String::from("frame,eta,mean_abs_residual,rms_residual\n");
        let mut total = 0.0;
        let residuals = physics::sequence_residuals(&pred, &meteo, &c.residual)?;
        for (k, mut r) in residuals.into_iter().enumerate() {
            let eta = physics::consistency_score(&mut r, &c.consistency);
            total += eta;
            csv += &format!("{k},{eta},{},{}\n", r.mean_abs, r.rms);
        }
        write_file(&self.metrics().join("physics_scores.csv"), csv)?;
        Ok(format!("mean consistency score {:.4} over {} frames", total / pred.len() as f64, pred.len()))
    }

    fn evaluate(&self, all_metrics: bool) -> Result<String> {
        let preds = read_sequences(self.input("pred")?)?;
        let obs = read_sequences(self.input("obs")?)?;
        let masks = match self.inputs.get("masks") {
            Some(p) => read_masks(p)?,
            None if all_metrics => Vec::new(),
            None => return Err(Error::Config("pr-curve needs catchment masks".into())),
        };
        let report = verify::evaluate(&preds, &obs, &masks, &self.config.verify)?;
        let curve = report
            .pr_curve
            .as_ref()
            .map(verify::PrCurve::to_csv)
            .unwrap_or_else(|| "threshold,precision,recall\n".into());
        if all_metrics {
            write_file(&self.metrics().join("metrics.csv"), report.metrics_csv())?;
        }
        write_file(&self.metrics().join("pr_curve.csv"), curve)?;
        let auc = report.pr_curve.as_ref().map(|c| format!("{:.4}", c.auc)).unwrap_or_else(|| "undefined".into());
        Ok(format!("scored {} sequences: mse {:.4}, auc {auc}", preds.len(), report.pixel.mse))
    }
}

fn write_precip(path: &Path, seq: PrecipSequence) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    write_grid_file(&GridData::Precip(seq), path)
}

/// One file, or every `.pnwg` file of a directory in name order.
fn read_sequences(path: &Path) -> Result<Vec<PrecipSequence>> {
    let files = if path.is_dir() {
        sorted_files(path, Some("pnwg"))?
    } else {
        vec![path.to_path_buf()]
    };
    files.iter().map(|f| read_grid_file(f)?.into_precip()).collect()
}

fn read_masks(path: &Path) -> Result<Vec<CatchmentMask>> {
    let (shape, masks) = read_mask_file(path)?;
    masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| CatchmentMask::new(format!("c{i}"), shape, m))
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "pidnowcast", version, about = "Physics-informed precipitation nowcasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for outputs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vqgan: PathBuf,
    #[arg(long)]
    pub transformer: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Generate a synthetic dataset that satisfies the moisture budget.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_sequences: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        extreme_fraction: Option<f64>,
    },
    /// Krige station observations onto the grid.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stations: PathBuf,
    },
    /// Train the frame tokenizer on the training share of a dataset.
    TrainVqgan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the next-token model on tokenized training sequences.
    TrainTransformer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqgan: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adversarial fine-tuning with the physics-informed temporal discriminator.
    TrainPid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: ModelInputs,
        #[arg(long)]
        steps: Option<usize>,
        /// full, -P or -PT
        #[arg(long, allow_hyphen_values = true)]
        ablation: Option<String>,
    },
    /// Ensemble forecasts for the held-out sequences.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: ModelInputs,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Per-frame consistency scores of a precipitation file against meteorology.
    PhysicsScore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        meteo: PathBuf,
    },
    /// Verification scores of predictions against observations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Extreme-event precision/recall curve over catchment totals.
    PrCurve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        masks: PathBuf,
    },
    /// Repeat a recorded run into a new directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl CliCommand {
    /// Resolves flags and config file into an [`Invocation`].
    pub fn resolve(self) -> Result<Invocation> {
        let mut inputs = BTreeMap::new();
        let (command, common, config) = match self {
            CliCommand::Synth {
                common,
                n_sequences,
                height,
                width,
                extreme_fraction,
            } => {
                let mut cfg = base_config(&common)?;
                set(&mut cfg.synth.n_sequences, n_sequences);
                set(&mut cfg.synth.height, height);
                set(&mut cfg.synth.width, width);
                set(&mut cfg.synth.extreme_fraction, extreme_fraction);
                (Command::Synth, common, cfg)
            }
            CliCommand::Ingest { common, stations } => {
                inputs.insert("stations".into(), stations);
                let cfg = base_config(&common)?;
                (Command::Ingest, common, cfg)
            }
            CliCommand::TrainVqgan { common, data, steps } => {
                inputs.insert("data".into(), data);
                let mut cfg = base_config(&common)?;
                set(&mut cfg.vqgan.steps, steps);
                (Command::TrainVqgan, common, cfg)
            }
            CliCommand::TrainTransformer {
                common,
                data,
                vqgan,
                steps,
            } => {
                inputs.insert("data".into(), data);
                inputs.insert("vqgan".into(), vqgan);
                let mut cfg = base_config(&common)?;
                set(&mut cfg.transformer.steps, steps);
                (Command::TrainTransformer, common, cfg)
            }
            CliCommand::TrainPid {
                common,
                models,
                steps,
                ablation,
            } => {
                models.insert_into(&mut inputs);
                let mut cfg = base_config(&common)?;
                set(&mut cfg.pid.steps, steps);
                set(&mut cfg.pid.ablation, ablation);
                AblationFlags::from_name(&cfg.pid.ablation)?;
                (Command::TrainPid, common, cfg)
            }
            CliCommand::Predict {
                common,
                models,
                n_samples,
                temperature,
                top_k,
            } => {
                models.insert_into(&mut inputs);
                let mut cfg = base_config(&common)?;
                set(&mut cfg.predict.n_samples, n_samples);
                set(&mut cfg.predict.sampling.temperature, temperature);
                set(&mut cfg.predict.sampling.top_k, top_k);
                (Command::Predict, common, cfg)
            }
            CliCommand::PhysicsScore { common, pred, meteo } => {
                inputs.insert("pred".into(), pred);
                inputs.insert("meteo".into(), meteo);
                let cfg = base_config(&common)?;
                (Command::PhysicsScore, common, cfg)
            }
            CliCommand::Evaluate {
                common,
                pred,
                obs,
                masks,
            } => {
                inputs.insert("pred".into(), pred);
                inputs.insert("obs".into(), obs);
                if let Some(m) = masks {
                    inputs.insert("masks".into(), m);
                }
                let cfg = base_config(&common)?;
                (Command::Evaluate, common, cfg)
            }
            CliCommand::PrCurve {
                common,
                pred,
                obs,
                masks,
            } => {
                inputs.insert("pred".into(), pred);
                inputs.insert("obs".into(), obs);
                inputs.insert("masks".into(), masks);
                let cfg = base_config(&common)?;
                (Command::PrCurve, common, cfg)
            }
            CliCommand::Replay { manifest, out } => {
                let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
                let m: Manifest = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
                return Invocation::from_manifest(&m, out);
            }
        };
        Ok(Invocation {
            command,
            config,
            inputs,
            out: common.out,
        })
    }
}

impl ModelInputs {
    fn insert_into(self, inputs: &mut BTreeMap<String, PathBuf>) {
        inputs.insert("data".into(), self.data);
        inputs.insert("vqgan".into(), self.vqgan);
        inputs.insert("transformer".into(), self.transformer);
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code: 0 on success, 1 for invalid input or configuration, 2 when a run fails.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads()
        .and_then(|_| cli.command.resolve())
        .and_then(|inv| inv.run());
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
