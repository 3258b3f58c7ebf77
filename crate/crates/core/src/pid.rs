//! Physics-informed adversarial fine-tuning of the token generator.
//!
//! A temporal discriminator judges whole sequences (conditioning plus
//! predicted frames) together with one consistency-score channel per frame.
//! Predicted frames reach it as soft decodes of the teacher-forced token
//! distribution, so the adversarial loss and the consistency score both
//! carry gradients back into the transformer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MeteoStack, PrecipFrame, PrecipSequence};
use crate::physics::{self, ConsistencyConfig, ResidualAggregation, ResidualConfig};
use crate::synth::SynthSequence;
use crate::tensor::checkpoint;
use crate::tensor::nn::{Conv2d, Linear};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{SamplingConfig, TokenStream, Transformer, TransformerTrainer};
use crate::verify::{self, CatchmentMask, VerificationConfig};
use crate::vqgan::{self, normalize_intensity, VqGan};

/// Which parts of the physics-informed objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub physics_enabled: bool,
    pub temporal_disc_enabled: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        physics_enabled: true,
        temporal_disc_enabled: true,
    };
    /// Discriminator kept, consistency scores fixed at 1.
    pub const NO_PHYSICS: Self = Self {
        physics_enabled: false,
        temporal_disc_enabled: true,
    };
    /// Plain next-token training.
    pub const NO_PHYSICS_NO_DISC: Self = Self {
        physics_enabled: false,
        temporal_disc_enabled: false,
    };

    /// Parses `full`, `-P` or `-PT`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::FULL),
            "-P" => Ok(Self::NO_PHYSICS),
            "-PT" => Ok(Self::NO_PHYSICS_NO_DISC),
            other => Err(Error::Config(format!("unknown ablation {other:?}; use full, -P or -PT"))),
        }
    }

    pub fn name(self) -> &'static str {
        match (self.physics_enabled, self.temporal_disc_enabled) {
            (true, true) => "full",
            (false, true) => "-P",
            (false, false) => "-PT",
            (true, false) => "physics-without-disc",
        }
    }

    fn validate(self) -> Result<()> {
        if self.physics_enabled && !self.temporal_disc_enabled {
            return Err(Error::Config(
                "consistency scores reach the generator only through the temporal discriminator".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalDiscConfig {
    /// Width of the first convolution; the second doubles it.
    pub channels: usize,
    pub adam: AdamConfig,
}

impl Default for TemporalDiscConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            adam: AdamConfig {
                lr: 2e-4,
                beta1: 0.5,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    pub n_cond: usize,
    pub n_pred: usize,
    /// Weight of the adversarial term next to the next-token loss.
    pub adv_weight: f32,
    pub disc: TemporalDiscConfig,
    pub residual: ResidualConfig,
    pub consistency: ConsistencyConfig,
    /// Fine-tune the decoder along with the transformer.
    pub unfreeze_decoder: bool,
    /// Also score predicted frames with the frozen stage-one patch discriminator.
    pub spatial_disc: bool,
    pub fakes: FakeFrames,
    /// Sampling used for [`FakeFrames::Rollout`].
    pub rollout_sampling: SamplingConfig,
}

/// How predicted frames are produced for the temporal discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FakeFrames {
    /// Decode the probability-weighted codebook mixture of the teacher-forced
    /// next-token distributions. Deterministic.
    Soft,
    /// Sample the continuation autoregressively from the current model and
    /// decode the sampled codes; gradients reach the token probabilities
    /// straight through the one-hot samples.
    Rollout,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            n_cond: 3,
            n_pred: 6,
            adv_weight: 0.1,
            disc: TemporalDiscConfig::default(),
            residual: ResidualConfig::default(),
            consistency: ConsistencyConfig::default(),
            unfreeze_decoder: false,
            spatial_disc: false,
            fakes: FakeFrames::Rollout,
            rollout_sampling: SamplingConfig::default(),
        }
    }
}

impl PidConfig {
    pub fn n_frames(&self) -> usize {
        self.n_cond + self.n_pred
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cond == 0 || self.n_pred == 0 {
            return Err(Error::Config("n_cond and n_pred must be positive".into()));
        }
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return Err(Error::Config("adv_weight must be finite and non-negative".into()));
        }
        if self.disc.channels == 0 {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        if !(self.consistency.lambda_sharpness > 0.0) {
            return Err(Error::Config("lambda_sharpness must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiscManifest {
    cfg: TemporalDiscConfig,
    n_frames: usize,
    max_intensity: f32,
}

/// Sequence discriminator over `n_frames` precipitation channels and as
/// many consistency channels.
#[derive(Debug, Clone)]
pub struct TemporalDisc {
    pub cfg: TemporalDiscConfig,
    pub n_frames: usize,
    pub max_intensity: f32,
    pub store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
}

impl TemporalDisc {
    pub fn new(cfg: TemporalDiscConfig, n_frames: usize, max_intensity: f32, seed: u64) -> Result<Self> {
        if n_frames == 0 || cfg.channels == 0 {
            return Err(Error::Config("temporal discriminator needs frames and channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let conv1 = Conv2d::new(&mut store, "tdisc.0", 2 * n_frames, c, 3, 2, 1, &mut rng);
        let conv2 = Conv2d::new(&mut store, "tdisc.1", c, 2 * c, 3, 2, 1, &mut rng);
        let head = Linear::new(&mut store, "tdisc.head", 2 * c, 1, &mut rng);
        Ok(Self {
            cfg,
            n_frames,
            max_intensity,
            store,
            conv1,
            conv2,
            head,
        })
    }

    /// Joins normalised frames `[B, T, H, W]` with per-frame scores `[B, T]`
    /// broadcast over space, giving `[B, 2T, H, W]`.
    pub fn input(&self, g: &mut Graph, frames: Var, etas: Var) -> Result<Var> {
        let fs = g.shape(frames).to_vec();
        if fs.len() != 4 || fs[1] != self.n_frames {
            return Err(Error::Arity {
                expected: self.n_frames,
                found: fs.get(1).copied().unwrap_or(0),
            });
        }
        if g.shape(etas) != [fs[0], fs[1]] {
            return Err(Error::Arity {
                expected: self.n_frames,
                found: g.shape(etas).last().copied().unwrap_or(0),
            });
        }
        let e = g.reshape(etas, &[fs[0], fs[1], 1, 1])?;
        let ones = g.constant(Tensor::full(&fs, 1.0));
        let planes = g.mul(ones, e)?;
        g.concat(&[frames, planes], 1)
    }

    /// One logit per sequence, `[B]`.
    pub fn logits(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let b = g.shape(input)[0];
        let mut h = self.conv1.forward(g, &self.store, input)?;
        h = g.silu(h);
        h = self.conv2.forward(g, &self.store, h)?;
        h = g.silu(h);
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_last(flat)?;
        let out = self.head.forward(g, &self.store, pooled)?;
        g.reshape(out, &[b])
    }

    /// Realness in (0, 1) of a full sequence in mm/h with scores for its
    /// last `etas.len()` frames; earlier frames get score 1.
    pub fn score(&self, seq: &PrecipSequence, etas: &[f64]) -> Result<f64> {
        if seq.len() != self.n_frames {
            return Err(Error::Arity {
                expected: self.n_frames,
                found: seq.len(),
            });
        }
        if etas.len() > self.n_frames {
            return Err(Error::Arity {
                expected: self.n_frames,
                found: etas.len(),
            });
        }
        let shape = seq.shape();
        let frames: Vec<f32> = seq
            .flat_values()
            .iter()
            .map(|v| normalize_intensity(*v, self.max_intensity))
            .collect();
        let mut eta = vec![1.0f32; self.n_frames - etas.len()];
        eta.extend(etas.iter().map(|e| *e as f32));
        let mut frozen = self.clone();
        for id in frozen.store.ids().collect::<Vec<_>>() {
            frozen.store.set_trainable(id, false);
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![1, self.n_frames, shape.height, shape.width], frames)?);
        let e = g.constant(Tensor::new(vec![1, self.n_frames], eta)?);
        let x = frozen.input(&mut g, f, e)?;
        let l = frozen.logits(&mut g, x)?;
        let p = g.sigmoid(l);
        Ok(g.scalar(p))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = DiscManifest {
            cfg: self.cfg.clone(),
            n_frames: self.n_frames,
            max_intensity: self.max_intensity,
        };
        let cfg = serde_json::to_value(&m).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, "temporal_disc", cfg, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(path)?;
        if manifest.model != "temporal_disc" {
            return Err(Error::Checkpoint(format!(
                "expected a temporal_disc checkpoint, found {}",
                manifest.model
            )));
        }
        let m: DiscManifest = serde_json::from_value(manifest.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut d = Self::new(m.cfg, m.n_frames, m.max_intensity, 0)?;
        d.store.load_from(&store)?;
        Ok(d)
    }
}

/// `-mean log D(real) - mean log(1 - D(fake))`, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn pid_disc_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    vqgan::discriminator_loss(g, real_logits, fake_logits)
}

/// `-mean log D(fake)`, clamped like [`pid_disc_loss`].
pub fn pid_gen_loss(g: &mut Graph, fake_logits: Var) -> Result<Var> {
    vqgan::generator_loss(g, fake_logits)
}

/// Network-space frames back to mm/h inside the graph, clamped at zero.
pub fn denormalize_var(g: &mut Graph, x: Var, max_intensity: f32) -> Var {
    let top = max_intensity.ln_1p();
    let a = g.add_scalar(x, 1.0);
    let a = g.scale(a, 0.5 * top);
    let e = g.exp(a);
    let e = g.add_scalar(e, -1.0);
    g.relu(e)
}

/// `exp(-lambda * mean |implied - pred|)` per frame: `pred_mm: [F, HW]`
/// against the humidity-implied precipitation `implied: [F, HW]`, giving `[F]`.
pub fn soft_consistency(g: &mut Graph, pred_mm: Var, implied: &Tensor, lambda: f64) -> Result<Var> {
    let c = g.constant(implied.clone());
    let d = g.sub(c, pred_mm)?;
    let d = g.abs(d);
    let m = g.mean_last(d)?;
    let s = g.scale(m, -(lambda as f32));
    Ok(g.exp(s))
}

/// Precipitation sequence plus the meteorology covering it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub precip: PrecipSequence,
    /// Stacks matched to frames by timestamp.
    pub meteo: Vec<MeteoStack>,
}

impl From<&SynthSequence> for TrainingSequence {
    fn from(s: &SynthSequence) -> Self {
        Self {
            precip: s.precip.clone(),
            meteo: s.meteo.clone(),
        }
    }
}

/// How often each expensive component ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub physics: usize,
    pub temporal_disc: usize,
}

pub const PID_REPORT_HEADER: &str = "step,gen_ce,gen_adv,disc,mean_eta_fake,mean_eta_real";

/// One generator/discriminator iteration. Adversarial fields are `None`
/// when the discriminator is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidReportRow {
    pub step: usize,
    pub gen_ce: f64,
    pub gen_adv: Option<f64>,
    pub disc: Option<f64>,
    pub mean_eta_fake: Option<f64>,
    pub mean_eta_real: Option<f64>,
}

impl PidReportRow {
    /// Generator objective: next-token loss plus the weighted adversarial term.
    pub fn gen_total(&self, adv_weight: f32) -> f64 {
        self.gen_ce + self.gen_adv.map_or(0.0, |a| adv_weight as f64 * a)
    }
}

pub fn pid_report_csv(rows: &[PidReportRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{PID_REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.gen_ce,
            opt(r.gen_adv),
            opt(r.disc),
            opt(r.mean_eta_fake),
            opt(r.mean_eta_real)
        ));
    }
    s
}

struct Prepared {
    height: usize,
    width: usize,
    token_h: usize,
    token_w: usize,
    /// Normalised frames per sequence, `[T, H, W]`.
    frames: Vec<Vec<f32>>,
    /// Implied precipitation of the predicted frames, `[M, H, W]`; empty without physics.
    implied: Vec<Vec<f32>>,
    /// Scores of the observed predicted frames, `[M]`; ones without physics.
    real_eta: Vec<Vec<f32>>,
}

/// Generator-side values of one batch.
pub struct GeneratorPass {
    pub logits: Var,
    pub ce: Var,
    pub adv: Option<Var>,
    pub total: Var,
    /// Decoded predicted frames in network space, `[B * M, 1, H, W]`.
    pub fake_norm: Option<Var>,
    /// Consistency scores of the decoded predicted frames, `[B, M]`.
    pub fake_eta: Option<Var>,
}

pub struct PidTrainer {
    pub flags: AblationFlags,
    pub cfg: PidConfig,
    pub vqgan: VqGan,
    pub gen: TransformerTrainer,
    pub disc: Option<TemporalDisc>,
    opt_disc: Option<Adam>,
    opt_dec: Option<Adam>,
    data: Prepared,
    pub counters: CallCounters,
    pub report: Vec<PidReportRow>,
    fake_rng: ChaCha8Rng,
    step: usize,
}

impl PidTrainer {
    pub fn new(
        vqgan: VqGan,
        transformer: Transformer,
        data: &[TrainingSequence],
        flags: AblationFlags,
        cfg: PidConfig,
        seed: u64,
    ) -> Result<Self> {
        flags.validate()?;
        cfg.validate()?;
        if flags.physics_enabled && cfg.consistency.aggregation != ResidualAggregation::MeanAbs {
            return Err(Error::Config("differentiable consistency scores use mean-absolute aggregation".into()));
        }
        if transformer.cfg.vocab != vqgan.cfg.codebook_size {
            return Err(Error::Config(format!(
                "transformer vocabulary {} differs from codebook size {}",
                transformer.cfg.vocab, vqgan.cfg.codebook_size
            )));
        }
        let first = data.first().ok_or_else(|| Error::InsufficientData("no training sequences".into()))?;
        let shape = first.precip.shape();
        let (height, width) = (shape.height, shape.width);
        let f = vqgan.cfg.downsample_factor;
        let (token_h, token_w) = (height / f, width / f);
        let t = cfg.n_frames();
        let mut counters = CallCounters::default();
        let mut tokens = Vec::with_capacity(data.len());
        let mut frames = Vec::with_capacity(data.len());
        let mut implied = Vec::new();
        let mut real_eta = Vec::with_capacity(data.len());
        for seq in data {
            if seq.precip.len() != t {
                return Err(Error::Arity {
                    expected: t,
                    found: seq.precip.len(),
                });
            }
            if seq.precip.shape() != shape {
                return Err(Error::Shape("training sequences differ in grid shape".into()));
            }
            let raw: Vec<&[f32]> = seq.precip.frames().iter().map(|f| f.values()).collect();
            let grids = vqgan.encode_frames(&raw, height, width)?;
            tokens.push(TokenStream::from_grids(&grids).tokens);
            frames.push(seq.precip.flat_values().iter().map(|v| vqgan.normalize(*v)).collect());
            if flags.physics_enabled {
                let (_, target) = seq.precip.split(cfg.n_cond, cfg.n_pred)?;
                let times: Vec<i64> = target.frames().iter().map(|f| f.timestamp()).collect();
                let step = seq.precip.step_minutes() as i64;
                let c = physics::implied_precip(&times, step, &seq.meteo, &cfg.residual)?;
                implied.push(c.into_iter().flatten().map(|v| v as f32).collect());
                let eta = physics::sequence_scores(&target, &seq.meteo, &cfg.residual, &cfg.consistency, true)?;
                real_eta.push(eta.into_iter().map(|v| v as f32).collect());
                counters.physics += 2;
            } else {
                real_eta.push(vec![1.0; cfg.n_pred]);
            }
        }
        transformer.cfg.check_layout(token_h * token_w, t - 1)?;
        let mut vqgan = vqgan;
        for id in vqgan.store.ids().collect::<Vec<_>>() {
            let trainable = cfg.unfreeze_decoder && vqgan.store.name(id).starts_with("dec.");
            vqgan.store.set_trainable(id, trainable);
        }
        let opt_dec = cfg.unfreeze_decoder.then(|| Adam::new(transformer.cfg.adam, &vqgan.store));
        let gen = TransformerTrainer::new(transformer, tokens, seed)?;
        let disc = if flags.temporal_disc_enabled {
            Some(TemporalDisc::new(
                cfg.disc.clone(),
                t,
                vqgan.cfg.max_intensity,
                seed.wrapping_add(0x5eed),
            )?)
        } else {
            None
        };
        let opt_disc = disc.as_ref().map(|d| Adam::new(cfg.disc.adam, &d.store));
        Ok(Self {
            flags,
            cfg,
            vqgan,
            gen,
            disc,
            opt_disc,
            opt_dec,
            data: Prepared {
                height,
                width,
                token_h,
                token_w,
                frames,
                implied,
                real_eta,
            },
            counters,
            report: Vec::new(),
            fake_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xfa4e)),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn frames_const(&self, g: &mut Graph, picks: &[usize], range: std::ops::Range<usize>) -> Result<Var> {
        let hw = self.data.height * self.data.width;
        let mut data = Vec::with_capacity(picks.len() * range.len() * hw);
        for &i in picks {
            data.extend_from_slice(&self.data.frames[i][range.start * hw..range.end * hw]);
        }
        Ok(g.constant(Tensor::new(
            vec![picks.len(), range.len(), self.data.height, self.data.width],
            data,
        )?))
    }

    /// Humidity-implied precipitation of sequence `i`'s predicted frames in
    /// mm/h, `[M * H * W]`; empty when physics is off.
    pub fn implied_precip(&self, i: usize) -> &[f32] {
        self.data.implied.get(i).map_or(&[], |v| v.as_slice())
    }

    /// Builds the generator objective for a batch. With `dropout` set, the
    /// transformer runs in training mode and draws its masks from the trainer.
    pub fn generator_pass(&mut self, g: &mut Graph, picks: &[usize], dropout: bool) -> Result<GeneratorPass> {
        let (logits, ce) = if dropout {
            self.gen.loss_graph(g, picks)?
        } else {
            let batch: Vec<&[usize]> = picks.iter().map(|i| self.gen.streams()[*i].as_slice()).collect();
            let logits = self.gen.model.logits(g, &batch, None)?;
            let ce = self.gen.model.next_token_loss(g, logits, &batch)?;
            (logits, ce)
        };
        if self.disc.is_none() {
            return Ok(GeneratorPass {
                logits,
                ce,
                adv: None,
                total: ce,
                fake_norm: None,
                fake_eta: None,
            });
        };
        let (b, n, m) = (picks.len(), self.cfg.n_cond, self.cfg.n_pred);
        let (h, w) = (self.data.height, self.data.width);
        let tok = self.data.token_h * self.data.token_w;
        let v = self.gen.model.cfg.vocab;
        let probs = match self.cfg.fakes {
            FakeFrames::Soft => {
                let pred = g.narrow(logits, 1, n * tok - 1, m * tok)?;
                let pred = g.reshape(pred, &[b * m * tok, v])?;
                g.softmax(pred)?
            }
            FakeFrames::Rollout => self.rollout_probs(g, picks)?,
        };
        let z = self.vqgan.soft_latents(g, probs, b * m, self.data.token_h, self.data.token_w)?;
        let fake_norm = self.vqgan.decoder(g, z)?;
        let fake_eta = if self.flags.physics_enabled {
            let mm = denormalize_var(g, fake_norm, self.vqgan.cfg.max_intensity);
            let mm = g.reshape(mm, &[b * m, h * w])?;
            let mut implied = Vec::with_capacity(b * m * h * w);
            for &i in picks {
                implied.extend_from_slice(&self.data.implied[i]);
            }
            let implied = Tensor::new(vec![b * m, h * w], implied)?;
            let eta = soft_consistency(g, mm, &implied, self.cfg.consistency.lambda_sharpness)?;
            self.counters.physics += 1;
            g.reshape(eta, &[b, m])?
        } else {
            g.constant(Tensor::full(&[b, m], 1.0))
        };
        let cond = self.frames_const(g, picks, 0..n)?;
        let disc = self.disc.as_ref().expect("discriminator enabled");
        let pred_frames = g.reshape(fake_norm, &[b, m, h, w])?;
        let frames = g.concat(&[cond, pred_frames], 1)?;
        let cond_eta = g.constant(Tensor::full(&[b, n], 1.0));
        let etas = g.concat(&[cond_eta, fake_eta], 1)?;
        let input = disc.input(g, frames, etas)?;
        let fake_logits = disc.logits(g, input)?;
        self.counters.temporal_disc += 1;
        let mut adv = pid_gen_loss(g, fake_logits)?;
        if self.cfg.spatial_disc {
            let sl = self.vqgan.disc_logits(g, fake_norm)?;
            let sadv = vqgan::generator_loss(g, sl)?;
            adv = g.add(adv, sadv)?;
        }
        let weighted = g.scale(adv, self.cfg.adv_weight);
        let total = g.add(ce, weighted)?;
        Ok(GeneratorPass {
            logits,
            ce,
            adv: Some(adv),
            total,
            fake_norm: Some(fake_norm),
            fake_eta: Some(fake_eta),
        })
    }

    /// Samples a continuation of each picked sequence's conditioning tokens
    /// and returns the sampled one-hots `[B * M * tokens, V]`, carrying the
    /// gradient of the model's probabilities for them.
    fn rollout_probs(&mut self, g: &mut Graph, picks: &[usize]) -> Result<Var> {
        let (b, n, m) = (picks.len(), self.cfg.n_cond, self.cfg.n_pred);
        let tok = self.data.token_h * self.data.token_w;
        let v = self.gen.model.cfg.vocab;
        let seeds: Vec<u64> = picks.iter().map(|_| self.fake_rng.random()).collect();
        let model = &self.gen.model;
        let streams = self.gen.streams();
        let sampling = self.cfg.rollout_sampling;
        let sampled = picks
            .par_iter()
            .zip(seeds)
            .map(|(&i, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                model.sample_tokens(&streams[i][..n * tok], m * tok, sampling, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<&[usize]> = sampled.iter().map(Vec::as_slice).collect();
        let logits = model.logits(g, &batch, None)?;
        let pred = g.narrow(logits, 1, n * tok - 1, m * tok)?;
        let pred = g.reshape(pred, &[b * m * tok, v])?;
        let probs = g.softmax(pred)?;
        let mut onehot = Tensor::zeros(&[b * m * tok, v]);
        let rows = sampled.iter().flat_map(|s| &s[n * tok..]);
        for (row, &t) in onehot.data_mut().chunks_mut(v).zip(rows) {
            row[t] = 1.0;
        }
        let onehot = g.constant(onehot);
        g.straight_through(probs, onehot)
    }

    /// One discriminator update on real sequences and detached fakes.
    fn disc_step(&mut self, picks: &[usize], fake_norm: &Tensor, fake_eta: &Tensor) -> Result<(f64, f64)> {
        let (b, n, m) = (picks.len(), self.cfg.n_cond, self.cfg.n_pred);
        let (h, w) = (self.data.height, self.data.width);
        let mut g = Graph::new();
        let real_frames = self.frames_const(&mut g, picks, 0..n + m)?;
        let mut real_eta = Vec::with_capacity(b * (n + m));
        for &i in picks {
            real_eta.extend(std::iter::repeat_n(1.0, n));
            real_eta.extend_from_slice(&self.data.real_eta[i]);
        }
        let mean_real = real_eta.chunks(n + m).flat_map(|c| &c[n..]).map(|v| *v as f64).sum::<f64>() / (b * m) as f64;
        let real_eta = g.constant(Tensor::new(vec![b, n + m], real_eta)?);
        let cond = self.frames_const(&mut g, picks, 0..n)?;
        let pred = g.constant(fake_norm.clone().reshaped(&[b, m, h, w])?);
        let fake_frames = g.concat(&[cond, pred], 1)?;
        let ones = g.constant(Tensor::full(&[b, n], 1.0));
        let fe = g.constant(fake_eta.clone());
        let fake_eta = g.concat(&[ones, fe], 1)?;
        let disc = self.disc.as_mut().expect("discriminator enabled");
        let real_in = disc.input(&mut g, real_frames, real_eta)?;
        let fake_in = disc.input(&mut g, fake_frames, fake_eta)?;
        let lr = disc.logits(&mut g, real_in)?;
        let lf = disc.logits(&mut g, fake_in)?;
        self.counters.temporal_disc += 2;
        let loss = pid_disc_loss(&mut g, lr, lf)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("temporal discriminator loss {value}"),
            });
        }
        let grads = g.backward(loss)?.param_grads(&g, &disc.store);
        self.opt_disc
            .as_mut()
            .expect("discriminator optimiser")
            .step(&mut disc.store, &grads)?;
        Ok((value, mean_real))
    }

    pub fn train_step(&mut self) -> Result<PidReportRow> {
        let picks = self.gen.sample_batch();
        let mut g = Graph::new();
        let pass = self.generator_pass(&mut g, &picks, true)?;
        let total = g.scalar(pass.total);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "generator loss {total} (next-token {}, adversarial {:?})",
                    g.scalar(pass.ce),
                    pass.adv.map(|a| g.scalar(a))
                ),
            });
        }
        let grads = g.backward(pass.total)?;
        let gen_grads = grads.param_grads(&g, &self.gen.model.store);
        let dec_grads = self.opt_dec.as_ref().map(|_| grads.param_grads(&g, &self.vqgan.store));
        let mut row = PidReportRow {
            step: self.step,
            gen_ce: g.scalar(pass.ce),
            gen_adv: pass.adv.map(|a| g.scalar(a)),
            disc: None,
            mean_eta_fake: None,
            mean_eta_real: None,
        };
        if let (Some(fake_norm), Some(fake_eta)) = (pass.fake_norm, pass.fake_eta) {
            let fake_norm = g.value(fake_norm).clone();
            let fake_eta = g.value(fake_eta).clone();
            row.mean_eta_fake = Some(fake_eta.data().iter().map(|v| *v as f64).sum::<f64>() / fake_eta.len() as f64);
            let (d, mean_real) = self.disc_step(&picks, &fake_norm, &fake_eta)?;
            row.disc = Some(d);
            row.mean_eta_real = Some(mean_real);
        }
        self.gen.apply_grads(&gen_grads)?;
        if let (Some(opt), Some(dg)) = (self.opt_dec.as_mut(), dec_grads) {
            opt.step(&mut self.vqgan.store, &dg)?;
        }
        self.step += 1;
        self.report.push(row);
        Ok(row)
    }
}

pub struct PidRun {
    pub transformer: Transformer,
    pub vqgan: VqGan,
    pub disc: Option<TemporalDisc>,
    pub report: Vec<PidReportRow>,
    pub counters: CallCounters,
}

pub fn train_pid(
    data: &[TrainingSequence],
    vqgan: VqGan,
    transformer: Transformer,
    flags: AblationFlags,
    cfg: PidConfig,
    steps: usize,
    seed: u64,
) -> Result<PidRun> {
    let mut t = PidTrainer::new(vqgan, transformer, data, flags, cfg, seed)?;
    for _ in 0..steps {
        t.train_step()?;
    }
    Ok(PidRun {
        transformer: t.gen.model,
        vqgan: t.vqgan,
        disc: t.disc,
        report: t.report,
        counters: t.counters,
    })
}

/// Per-pixel mean of sampled rollouts and the rollouts themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub mean: PrecipSequence,
    pub members: Vec<PrecipSequence>,
}

/// Samples `n_samples` continuations of `cond` (member `k` uses seed
/// `seed + k`), decodes them and averages pixel-wise.
pub fn predict_ensemble(
    vqgan: &VqGan,
    transformer: &Transformer,
    cond: &PrecipSequence,
    m_pred: usize,
    n_samples: usize,
    seed: u64,
    sampling: SamplingConfig,
) -> Result<EnsembleForecast> {
    if n_samples == 0 || m_pred == 0 {
        return Err(Error::Config("ensembles need at least one member and one frame".into()));
    }
    let shape = cond.shape();
    let raw: Vec<&[f32]> = cond.frames().iter().map(|f| f.values()).collect();
    let grids = vqgan.encode_frames(&raw, shape.height, shape.width)?;
    let last = cond.frames()[cond.len() - 1].timestamp();
    let step = cond.step_minutes();
    let members = (0..n_samples as u64)
        .into_par_iter()
        .map(|k| {
            let tokens = transformer.sample_rollout(&grids, m_pred, sampling, seed.wrapping_add(k))?;
            let decoded = vqgan.decode_tokens(&tokens)?;
            let frames = decoded
                .into_iter()
                .enumerate()
                .map(|(i, v)| PrecipFrame::new(shape, v, last + (i as i64 + 1) * step as i64))
                .collect::<Result<Vec<_>>>()?;
            PrecipSequence::new(frames, step)?.with_pixel_size(cond.pixel_size_km())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_sequence(&members)?;
    Ok(EnsembleForecast { mean, members })
}

/// Pixel-wise mean of equally shaped sequences; timestamps from the first.
pub fn mean_sequence(members: &[PrecipSequence]) -> Result<PrecipSequence> {
    let first = members.first().ok_or_else(|| Error::InsufficientData("no ensemble members".into()))?;
    let n = members.len() as f64;
    let frames = (0..first.len())
        .map(|t| {
            let f0 = &first.frames()[t];
            let mut acc = vec![0.0f64; f0.values().len()];
            for m in members {
                let f = m.frames().get(t).ok_or(Error::Arity {
                    expected: first.len(),
                    found: m.len(),
                })?;
                if f.shape() != f0.shape() {
                    return Err(Error::Shape("ensemble members differ in shape".into()));
                }
                for (a, v) in acc.iter_mut().zip(f.values()) {
                    *a += *v as f64;
                }
            }
            PrecipFrame::new(f0.shape(), acc.iter().map(|a| (a / n) as f32).collect(), f0.timestamp())
        })
        .collect::<Result<Vec<_>>>()?;
    PrecipSequence::new(frames, first.step_minutes())?.with_pixel_size(first.pixel_size_km())
}

/// Physical and extreme-event skill of sampled rollouts on held-out sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEvaluation {
    /// Mean absolute humidity-budget residual over every member frame, mm/h.
    pub mean_abs_residual: f64,
    /// PR-AUC of ensemble-mean catchment totals; `None` without observed extremes.
    pub pr_auc: Option<f64>,
    pub pred_catchment_means: Vec<f64>,
    pub obs_catchment_means: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_rollouts(
    vqgan: &VqGan,
    transformer: &Transformer,
    data: &[TrainingSequence],
    masks: &[CatchmentMask],
    cfg: &PidConfig,
    vcfg: &VerificationConfig,
    n_samples: usize,
    seed: u64,
    sampling: SamplingConfig,
) -> Result<RolloutEvaluation> {
    let mut residual_sum = 0.0;
    let mut residual_count = 0usize;
    let mut pred_means = Vec::new();
    let mut obs_means = Vec::new();
    for (i, seq) in data.iter().enumerate() {
        let (cond, target) = seq.precip.split(cfg.n_cond, cfg.n_pred)?;
        let ens = predict_ensemble(
            vqgan,
            transformer,
            &cond,
            cfg.n_pred,
            n_samples,
            seed.wrapping_add(1000 * i as u64),
            sampling,
        )?;
        for member in &ens.members {
            for r in physics::sequence_residuals(member, &seq.meteo, &cfg.residual)? {
                residual_sum += r.values.iter().map(|v| v.abs()).sum::<f64>();
                residual_count += r.values.len();
            }
        }
        pred_means.extend(verify::catchment_reduce(&ens.mean, masks)?);
        obs_means.extend(verify::catchment_reduce(&target, masks)?);
    }
    let pr_auc = match verify::extreme_pr_curve(&pred_means, &obs_means, vcfg) {
        Ok(c) => Some(c.auc),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RolloutEvaluation {
        mean_abs_residual: residual_sum / residual_count.max(1) as f64,
        pr_auc,
        pred_catchment_means: pred_means,
        obs_catchment_means: obs_means,
    })
}
