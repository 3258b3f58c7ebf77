//! Vector-quantised autoencoder trained against a patch discriminator.
//!
//! Frames enter in mm/h, pass through `log(1 + x)` scaled to `[-1, 1]`, are
//! encoded to a `code_dim`-channel latent grid, snapped to the nearest
//! codebook entry and decoded back. Parameter names are prefixed `enc.`,
//! `codebook`, `dec.`, `perc.` (frozen feature net) and `disc.`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PrecipFrame;
use crate::tensor::checkpoint;
use crate::tensor::nn::{Conv2d, ConvTranspose2d};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Grads, ParamId, ParamStore, Tensor, Var};

const LEAK: f32 = 0.2;
pub const PROB_CLAMP: f32 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqGanConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Spatial reduction from frame to token grid; a power of two.
    pub downsample_factor: usize,
    /// Width of every encoder and decoder stage.
    pub hidden_channels: usize,
    pub disc_channels: usize,
    /// Width of the frozen feature network behind the perceptual term.
    pub perceptual_channels: usize,
    pub commitment_weight: f32,
    pub perceptual_weight: f32,
    pub gan_start_step: usize,
    pub delta: f64,
    pub lambda_gan_max: f64,
    /// Intensity (mm/h) mapped to +1 by the input transform.
    pub max_intensity: f32,
    /// Codebook entries unused for this many consecutive steps are reseeded.
    pub dead_code_patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for VqGanConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            code_dim: 64,
            downsample_factor: 4,
            hidden_channels: 32,
            disc_channels: 16,
            perceptual_channels: 8,
            commitment_weight: 1.0,
            perceptual_weight: 1.0,
            gan_start_step: 2000,
            delta: 1e-6,
            lambda_gan_max: 1e4,
            max_intensity: 100.0,
            dead_code_patience: 200,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

impl VqGanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.downsample_factor.is_power_of_two() {
            return bad("downsample_factor must be a power of two");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.code_dim == 0 || self.hidden_channels == 0 || self.disc_channels == 0 || self.perceptual_channels == 0 {
            return bad("channel widths must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.max_intensity > 0.0) || !(self.delta > 0.0) || !(self.lambda_gan_max >= 0.0) {
            return bad("max_intensity and delta must be positive");
        }
        if self.commitment_weight < 0.0 || self.perceptual_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

/// Codebook indices of one frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, indices: Vec<usize>, vocab: usize) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::Length {
                expected: height * width,
                found: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|i| **i >= vocab) {
            return Err(Error::Index { index: bad, size: vocab });
        }
        Ok(Self { height, width, indices })
    }
}

/// One step's loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub rec: f64,
    pub commit_codebook: f64,
    pub commit_encoder: f64,
    pub perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub lambda_gan: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.rec,
            self.commit_codebook,
            self.commit_encoder,
            self.perceptual,
            self.gan_g,
            self.gan_d,
            self.lambda_gan,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub const LOSS_CURVE_HEADER: &str = "step,rec,commit_cb,commit_enc,perceptual,gan_g,gan_d,lambda_gan";

pub fn loss_curve_csv(curve: &[LossReport]) -> String {
    let mut out = format!("{LOSS_CURVE_HEADER}\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.rec, r.commit_codebook, r.commit_encoder, r.perceptual, r.gan_g, r.gan_d, r.lambda_gan
        ));
    }
    out
}

/// Graph handles produced by encoding and quantising a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Encoder output `[B, D, h, w]`.
    pub ze: Var,
    /// Encoder output as rows `[B h w, D]`.
    pub ze_flat: Var,
    /// Selected codebook rows `[B h w, D]`.
    pub zq_flat: Var,
    /// Straight-through latents as rows: value of `zq_flat`, gradient to `ze_flat`.
    pub zst_flat: Var,
    /// Straight-through latents `[B, D, h, w]`, the decoder input.
    pub zst: Var,
    pub tokens: Vec<TokenGrid>,
    pub commit_codebook: Var,
    pub commit_encoder: Var,
}

impl Encoded {
    /// Snapshot of the assignment and stop-gradient operands.
    pub fn freeze(&self, g: &Graph) -> FrozenQuantization {
        FrozenQuantization {
            ids: self.tokens.iter().flat_map(|t| t.indices.iter().copied()).collect(),
            ze_rows: g.value(self.ze_flat).clone(),
            zq_rows: g.value(self.zq_flat).clone(),
        }
    }
}

/// See [`VqGan::quantize_frozen`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenQuantization {
    pub ids: Vec<usize>,
    pub ze_rows: Tensor,
    pub zq_rows: Tensor,
}

/// The non-adversarial loss terms.
#[derive(Debug, Clone, Copy)]
pub struct VqLoss {
    pub rec: Var,
    pub commit_codebook: Var,
    pub commit_encoder: Var,
    pub perceptual: Var,
    pub total: Var,
}

#[derive(Debug, Clone)]
struct Layers {
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    codebook: ParamId,
    dec_in: Conv2d,
    dec_up: Vec<ConvTranspose2d>,
    dec_out: Conv2d,
    perc: Vec<Conv2d>,
    disc: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct VqGan {
    pub cfg: VqGanConfig,
    pub store: ParamStore,
    layers: Layers,
}

impl VqGan {
    pub fn new(cfg: VqGanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, d) = (cfg.hidden_channels, cfg.code_dim);
        let enc_in = Conv2d::new(&mut store, "enc.in", 1, c, 3, 1, 1, &mut rng);
        let enc_down = (0..cfg.stages())
            .map(|i| Conv2d::new(&mut store, &format!("enc.down{i}"), c, c, 4, 2, 1, &mut rng))
            .collect();
        let enc_out = Conv2d::new(&mut store, "enc.out", c, d, 1, 1, 0, &mut rng);
        let bound = 1.0 / cfg.codebook_size as f32;
        let codebook = store.add(
            "codebook",
            Tensor::uniform(&[cfg.codebook_size, d], -bound, bound, &mut rng),
        );
        let dec_in = Conv2d::new(&mut store, "dec.in", d, c, 3, 1, 1, &mut rng);
        let dec_up = (0..cfg.stages())
            .map(|i| ConvTranspose2d::new(&mut store, &format!("dec.up{i}"), c, c, 4, 2, 1, &mut rng))
            .collect();
        let dec_out = Conv2d::new(&mut store, "dec.out", c, 1, 3, 1, 1, &mut rng);
        let p = cfg.perceptual_channels;
        let perc = vec![
            Conv2d::new(&mut store, "perc.0", 1, p, 3, 1, 1, &mut rng),
            Conv2d::new(&mut store, "perc.1", p, p, 3, 2, 1, &mut rng),
            Conv2d::new(&mut store, "perc.2", p, p, 3, 2, 1, &mut rng),
        ];
        store.set_trainable_prefix("perc.", false);
        let dc = cfg.disc_channels;
        let disc = vec![
            Conv2d::new(&mut store, "disc.0", 1, dc, 4, 2, 1, &mut rng),
            Conv2d::new(&mut store, "disc.1", dc, 2 * dc, 4, 2, 1, &mut rng),
            Conv2d::new(&mut store, "disc.2", 2 * dc, 1, 3, 1, 1, &mut rng),
        ];
        Ok(Self {
            cfg,
            store,
            layers: Layers {
                enc_in,
                enc_down,
                enc_out,
                codebook,
                dec_in,
                dec_up,
                dec_out,
                perc,
                disc,
            },
        })
    }

    pub fn codebook_id(&self) -> ParamId {
        self.layers.codebook
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.get(self.layers.codebook)
    }

    /// Weight of the decoder's final layer, the reference for the adaptive GAN weight.
    pub fn decoder_last_layer(&self) -> ParamId {
        self.layers.dec_out.w
    }

    fn is_disc(&self, id: ParamId) -> bool {
        self.store.name(id).starts_with("disc.")
    }

    /// mm/h to network space.
    pub fn normalize(&self, mm_per_h: f32) -> f32 {
        normalize_intensity(mm_per_h, self.cfg.max_intensity)
    }

    /// Network space to mm/h, clamped at zero.
    pub fn denormalize(&self, v: f32) -> f32 {
        let top = self.cfg.max_intensity.ln_1p();
        ((v + 1.0) * 0.5 * top).exp_m1().max(0.0)
    }

    /// Stacks frames into a normalised `[B, 1, H, W]` tensor.
    pub fn frames_to_tensor(&self, frames: &[&[f32]], height: usize, width: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(frames.len() * height * width);
        for f in frames {
            if f.len() != height * width {
                return Err(Error::Length {
                    expected: height * width,
                    found: f.len(),
                });
            }
            data.extend(f.iter().map(|v| self.normalize(*v)));
        }
        Tensor::new(vec![frames.len(), 1, height, width], data)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.cfg.downsample_factor;
        if shape.len() != 4 || shape[1] != 1 || shape[2] % f != 0 || shape[3] % f != 0 || shape[2] == 0 {
            return Err(Error::Shape(format!(
                "vqgan input {shape:?} must be [B, 1, H, W] with H and W divisible by {f}"
            )));
        }
        Ok(())
    }

    pub fn encoder(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let l = &self.layers;
        let mut h = l.enc_in.forward(g, &self.store, x)?;
        h = g.silu(h);
        for conv in &l.enc_down {
            h = conv.forward(g, &self.store, h)?;
            h = g.silu(h);
        }
        l.enc_out.forward(g, &self.store, h)
    }

    /// Nearest codebook row (squared Euclidean, ties to the lowest index) for every row of `rows`.
    pub fn nearest_codes(codebook: &Tensor, rows: &[f32]) -> Vec<usize> {
        let (k, d) = (codebook.shape()[0], codebook.shape()[1]);
        let cb = codebook.data();
        rows.chunks(d)
            .map(|r| {
                let mut best = (f64::INFINITY, 0);
                for j in 0..k {
                    let dist: f64 = r
                        .iter()
                        .zip(&cb[j * d..(j + 1) * d])
                        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                        .sum();
                    if dist < best.0 {
                        best = (dist, j);
                    }
                }
                best.1
            })
            .collect()
    }

    /// Quantises encoder output `[B, D, h, w]`.
    pub fn quantize(&self, g: &mut Graph, ze: Var) -> Result<Encoded> {
        self.quantize_with(g, ze, None)
    }

    /// Quantisation with every stop-gradient operand and the code assignment
    /// held at the values in `frozen`. At the frozen point this has the same
    /// value as [`VqGan::quantize`], and its true derivative is exactly the
    /// straight-through gradient, which makes it the finite-difference oracle.
    pub fn quantize_frozen(&self, g: &mut Graph, ze: Var, frozen: &FrozenQuantization) -> Result<Encoded> {
        self.quantize_with(g, ze, Some(frozen))
    }

    fn quantize_with(&self, g: &mut Graph, ze: Var, frozen: Option<&FrozenQuantization>) -> Result<Encoded> {
        let s = g.shape(ze).to_vec();
        if s.len() != 4 || s[1] != self.cfg.code_dim {
            return Err(Error::Shape(format!("latents {s:?} need {} channels", self.cfg.code_dim)));
        }
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let rows_4d = g.permute(ze, &[0, 2, 3, 1])?;
        let ze_flat = g.reshape(rows_4d, &[b * h * w, d])?;
        let cb = g.param(&self.store, self.layers.codebook);
        let (ids, commit_codebook, commit_encoder, zq_flat, zst_flat) = match frozen {
            None => {
                let ids = Self::nearest_codes(self.codebook(), g.data(ze_flat));
                let zq_flat = g.embedding(cb, &ids)?;
                let ze_sg = g.stop_gradient(ze_flat);
                let commit_codebook = g.mse_loss(ze_sg, zq_flat)?;
                let zq_sg = g.stop_gradient(zq_flat);
                let commit_encoder = g.mse_loss(zq_sg, ze_flat)?;
                let zst_flat = g.straight_through(ze_flat, zq_flat)?;
                (ids, commit_codebook, commit_encoder, zq_flat, zst_flat)
            }
            Some(f) => {
                if f.ids.len() != b * h * w {
                    return Err(Error::Shape("frozen quantisation is for another batch".into()));
                }
                let zq_flat = g.embedding(cb, &f.ids)?;
                let ze_c = g.constant(f.ze_rows.clone());
                let commit_codebook = g.mse_loss(ze_c, zq_flat)?;
                let zq_c = g.constant(f.zq_rows.clone());
                let commit_encoder = g.mse_loss(zq_c, ze_flat)?;
                let offset = g.sub(zq_c, ze_c)?;
                let zst_flat = g.add(ze_flat, offset)?;
                (f.ids.clone(), commit_codebook, commit_encoder, zq_flat, zst_flat)
            }
        };
        let zst = self.rows_to_latents(g, zst_flat, b, h, w)?;
        let tokens = ids
            .chunks(h * w)
            .map(|c| TokenGrid {
                height: h,
                width: w,
                indices: c.to_vec(),
            })
            .collect();
        Ok(Encoded {
            ze,
            ze_flat,
            zq_flat,
            zst_flat,
            zst,
            tokens,
            commit_codebook,
            commit_encoder,
        })
    }

    pub fn encode_quantize(&self, g: &mut Graph, x: Var) -> Result<Encoded> {
        let ze = self.encoder(g, x)?;
        self.quantize(g, ze)
    }

    fn rows_to_latents(&self, g: &mut Graph, rows: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let d = self.cfg.code_dim;
        let r = g.reshape(rows, &[b, h, w, d])?;
        g.permute(r, &[0, 3, 1, 2])
    }

    /// Codebook latents `[B, D, h, w]` for a batch of token grids.
    pub fn token_latents(&self, g: &mut Graph, tokens: &[TokenGrid]) -> Result<Var> {
        let first = tokens.first().ok_or_else(|| Error::Shape("no token grids".into()))?;
        let (h, w) = (first.height, first.width);
        let mut ids = Vec::with_capacity(tokens.len() * h * w);
        for t in tokens {
            if (t.height, t.width) != (h, w) || t.indices.len() != h * w {
                return Err(Error::Shape("token grids differ in size".into()));
            }
            ids.extend_from_slice(&t.indices);
        }
        let cb = g.param(&self.store, self.layers.codebook);
        let rows = g.embedding(cb, &ids)?;
        self.rows_to_latents(g, rows, tokens.len(), h, w)
    }

    /// Expected latents under per-position code probabilities `probs: [B h w, K]`.
    pub fn soft_latents(&self, g: &mut Graph, probs: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let cb = g.param(&self.store, self.layers.codebook);
        let rows = g.matmul(probs, cb)?;
        self.rows_to_latents(g, rows, b, h, w)
    }

    /// Latents `[B, D, h, w]` to network-space frames `[B, 1, H, W]`.
    pub fn decoder(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.cfg.code_dim {
            return Err(Error::Shape(format!("decoder input {s:?} needs {} channels", self.cfg.code_dim)));
        }
        let l = &self.layers;
        let mut h = l.dec_in.forward(g, &self.store, z)?;
        h = g.silu(h);
        for up in &l.dec_up {
            h = up.forward(g, &self.store, h)?;
            h = g.silu(h);
        }
        l.dec_out.forward(g, &self.store, h)
    }

    /// Feature maps of the frozen perceptual net, one per scale.
    pub fn perceptual_features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.perc.len());
        for conv in &self.layers.perc {
            h = conv.forward(g, &self.store, h)?;
            h = g.silu(h);
            out.push(h);
        }
        Ok(out)
    }

    /// Multi-scale L1 distance between frozen random-feature maps of `x` and `xhat`.
    pub fn perceptual(&self, g: &mut Graph, x: Var, xhat: Var) -> Result<Var> {
        let fa = self.perceptual_features(g, x)?;
        let fb = self.perceptual_features(g, xhat)?;
        let mut total = g.l1_loss(fa[0], fb[0])?;
        for (a, b) in fa.iter().zip(&fb).skip(1) {
            let t = g.l1_loss(*a, *b)?;
            total = g.add(total, t)?;
        }
        Ok(g.scale(total, 1.0 / fa.len() as f32))
    }

    /// Patch logits `[B, 1, H/4, W/4]`.
    pub fn disc_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = &self.layers.disc;
        let mut h = d[0].forward(g, &self.store, x)?;
        h = g.leaky_relu(h, LEAK);
        h = d[1].forward(g, &self.store, h)?;
        h = g.leaky_relu(h, LEAK);
        d[2].forward(g, &self.store, h)
    }

    pub fn vqvae_loss(&self, g: &mut Graph, x: Var, xhat: Var, enc: &Encoded) -> Result<VqLoss> {
        let rec = g.l1_loss(x, xhat)?;
        let perceptual = self.perceptual(g, x, xhat)?;
        let commit = g.add(enc.commit_codebook, enc.commit_encoder)?;
        let commit = g.scale(commit, self.cfg.commitment_weight);
        let perc = g.scale(perceptual, self.cfg.perceptual_weight);
        let total = g.add(rec, commit)?;
        let total = g.add(total, perc)?;
        Ok(VqLoss {
            rec,
            commit_codebook: enc.commit_codebook,
            commit_encoder: enc.commit_encoder,
            perceptual,
            total,
        })
    }

    fn run_no_grad<T>(&self, f: impl FnOnce(&mut Graph, &VqGan) -> Result<T>) -> Result<T> {
        let mut frozen = self.clone();
        for id in frozen.store.ids().collect::<Vec<_>>() {
            frozen.store.set_trainable(id, false);
        }
        let mut g = Graph::new();
        f(&mut g, &frozen)
    }

    /// Token grids of frames given in mm/h.
    pub fn encode_frames(&self, frames: &[&[f32]], height: usize, width: usize) -> Result<Vec<TokenGrid>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(16) {
            let x = self.frames_to_tensor(chunk, height, width)?;
            out.extend(self.run_no_grad(|g, m| {
                let xv = g.constant(x);
                Ok(m.encode_quantize(g, xv)?.tokens)
            })?);
        }
        Ok(out)
    }

    fn to_mm(&self, t: &Tensor) -> Vec<Vec<f32>> {
        let hw = t.shape()[2] * t.shape()[3];
        t.data()
            .chunks(hw)
            .map(|c| c.iter().map(|v| self.denormalize(*v)).collect())
            .collect()
    }

    /// Frames (mm/h, clamped at zero) decoded from token grids.
    pub fn decode_tokens(&self, tokens: &[TokenGrid]) -> Result<Vec<Vec<f32>>> {
        let vocab = self.cfg.codebook_size;
        for t in tokens {
            if let Some(&bad) = t.indices.iter().find(|i| **i >= vocab) {
                return Err(Error::Index { index: bad, size: vocab });
            }
        }
        let out = self.run_no_grad(|g, m| {
            let z = m.token_latents(g, tokens)?;
            let y = m.decoder(g, z)?;
            Ok(g.value(y).clone())
        })?;
        Ok(self.to_mm(&out))
    }

    /// Frames (mm/h, clamped at zero) decoded from latents `[B, D, h, w]`.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Vec<Vec<f32>>> {
        let out = self.run_no_grad(|g, m| {
            let zv = g.constant(z.clone());
            let y = m.decoder(g, zv)?;
            Ok(g.value(y).clone())
        })?;
        Ok(self.to_mm(&out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, "vqgan", cfg, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(path)?;
        Self::from_checkpoint(manifest, &store)
    }

    pub fn from_checkpoint(manifest: checkpoint::Manifest, store: &ParamStore) -> Result<Self> {
        if manifest.model != "vqgan" {
            return Err(Error::Checkpoint(format!("expected a vqgan checkpoint, found {}", manifest.model)));
        }
        let cfg: VqGanConfig =
            serde_json::from_value(manifest.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(cfg, 0)?;
        model.store.load_from(store)?;
        Ok(model)
    }
}

/// mm/h to network space: `log(1 + x)` mapped so `max_intensity` lands on +1.
pub fn normalize_intensity(mm_per_h: f32, max_intensity: f32) -> f32 {
    2.0 * mm_per_h.max(0.0).ln_1p() / max_intensity.ln_1p() - 1.0
}

/// `-mean log D(real) - mean log(1 - D(fake))` from discriminator logits,
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn discriminator_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let pr = g.sigmoid(real_logits);
    let lr = g.log_clamped(pr, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lr = g.mean(lr);
    let neg = g.scale(fake_logits, -1.0);
    let pf = g.sigmoid(neg);
    let lf = g.log_clamped(pf, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lf = g.mean(lf);
    let s = g.add(lr, lf)?;
    Ok(g.scale(s, -1.0))
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn generator_loss(g: &mut Graph, fake_logits: Var) -> Result<Var> {
    let p = g.sigmoid(fake_logits);
    let l = g.log_clamped(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = g.mean(l);
    Ok(g.scale(l, -1.0))
}

/// Discriminator and generator adversarial losses from one pair of logit batches.
pub fn spatial_disc_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<(Var, Var)> {
    Ok((discriminator_loss(g, real_logits, fake_logits)?, generator_loss(g, fake_logits)?))
}

/// `rec_norm / (gan_norm + delta)` clamped to `[0, max]`.
pub fn gan_weight_from_norms(rec_norm: f64, gan_norm: f64, delta: f64, max: f64) -> f64 {
    if rec_norm == 0.0 {
        return 0.0;
    }
    (rec_norm / (gan_norm + delta)).clamp(0.0, max)
}

fn grad_norm(grads: &Grads, g: &Graph, vars: &[Var]) -> f64 {
    vars.iter()
        .flat_map(|v| grads.dense(g, *v))
        .map(|x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Adaptive adversarial weight from L2 gradient norms at `reference` (the
/// decoder's final layer). The result is a plain number: no gradient flows through it.
pub fn adaptive_gan_weight(g: &Graph, rec: Var, gan: Var, reference: &[Var], delta: f64, max: f64) -> Result<f64> {
    let rn = grad_norm(&g.backward(rec)?, g, reference);
    let gn = grad_norm(&g.backward(gan)?, g, reference);
    Ok(gan_weight_from_norms(rn, gn, delta, max))
}

/// Gradient-routing checks on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantProbe {
    pub step: usize,
    /// Max |d rec / d ze - d rec / d zq| over latent entries.
    pub straight_through_gap: f64,
    /// The codebook term reaches the codebook and nothing else.
    pub codebook_term_isolated: bool,
    /// The encoder term reaches encoder parameters and nothing else.
    pub encoder_term_isolated: bool,
}

impl InvariantProbe {
    pub fn holds(&self) -> bool {
        self.straight_through_gap == 0.0 && self.codebook_term_isolated && self.encoder_term_isolated
    }
}

fn touched(grads: &[Option<Vec<f32>>]) -> Vec<bool> {
    grads
        .iter()
        .map(|g| g.as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0)))
        .collect()
}

pub fn probe_invariants(model: &VqGan, g: &Graph, enc: &Encoded, rec: Var, step: usize) -> Result<InvariantProbe> {
    let gr = g.backward(rec)?;
    let (a, b) = (gr.dense(g, enc.ze_flat), gr.dense(g, enc.zst_flat));
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
    let cb = model.codebook_id();
    let t_cb = touched(&g.backward(enc.commit_codebook)?.param_grads(g, &model.store));
    let t_enc = touched(&g.backward(enc.commit_encoder)?.param_grads(g, &model.store));
    let codebook_term_isolated = model.store.ids().all(|id| t_cb[id.index()] == (id == cb));
    let encoder_term_isolated = model
        .store
        .ids()
        .all(|id| !t_enc[id.index()] || model.store.name(id).starts_with("enc."))
        && t_enc.iter().any(|t| *t);
    Ok(InvariantProbe {
        step,
        straight_through_gap: gap,
        codebook_term_isolated,
        encoder_term_isolated,
    })
}

/// Alternating generator / discriminator optimisation over a fixed frame set.
pub struct VqGanTrainer {
    pub model: VqGan,
    data: Tensor,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: usize,
    idle: Vec<usize>,
    /// Run [`probe_invariants`] every this many steps (0 disables).
    pub probe_every: usize,
    pub probes: Vec<InvariantProbe>,
    last_finite: Option<LossReport>,
}

impl VqGanTrainer {
    /// `frames` are in mm/h, all `height x width`.
    pub fn new(model: VqGan, frames: &[&[f32]], height: usize, width: usize, seed: u64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InsufficientData("no training frames".into()));
        }
        let data = model.frames_to_tensor(frames, height, width)?;
        model.check_input(data.shape())?;
        let opt_g = Adam::new(model.cfg.adam, &model.store);
        let opt_d = Adam::new(model.cfg.adam, &model.store);
        let idle = vec![0; model.cfg.codebook_size];
        Ok(Self {
            model,
            data,
            opt_g,
            opt_d,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            idle,
            probe_every: 0,
            probes: Vec::new(),
            last_finite: None,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn sample_batch(&mut self) -> Tensor {
        let s = self.data.shape();
        let (n, hw) = (s[0], s[2] * s[3]);
        let b = self.model.cfg.batch_size;
        let mut data = Vec::with_capacity(b * hw);
        for _ in 0..b {
            let i = self.rng.random_range(0..n);
            data.extend_from_slice(&self.data.data()[i * hw..(i + 1) * hw]);
        }
        Tensor::new(vec![b, 1, s[2], s[3]], data).expect("batch shape")
    }

    fn keep(&self, grads: &mut [Option<Vec<f32>>], disc: bool) {
        for id in self.model.store.ids() {
            if self.model.is_disc(id) != disc {
                grads[id.index()] = None;
            }
        }
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let x = self.sample_batch();
        let step = self.step;
        let adversarial = step >= self.model.cfg.gan_start_step;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let model = &self.model;
        let enc = model.encode_quantize(&mut g, xv)?;
        let xhat = model.decoder(&mut g, enc.zst)?;
        let loss = model.vqvae_loss(&mut g, xv, xhat, &enc)?;
        let mut report = LossReport {
            step,
            rec: g.scalar(loss.rec),
            commit_codebook: g.scalar(loss.commit_codebook),
            commit_encoder: g.scalar(loss.commit_encoder),
            perceptual: g.scalar(loss.perceptual),
            ..Default::default()
        };
        let mut total = loss.total;
        if adversarial {
            let fake = model.disc_logits(&mut g, xhat)?;
            let gan = generator_loss(&mut g, fake)?;
            let reference: Vec<Var> = g
                .param_vars(&model.store)
                .into_iter()
                .filter(|(id, _)| *id == model.decoder_last_layer())
                .map(|(_, v)| v)
                .collect();
            let lambda = adaptive_gan_weight(&g, loss.rec, gan, &reference, model.cfg.delta, model.cfg.lambda_gan_max)?;
            report.gan_g = g.scalar(gan);
            report.lambda_gan = lambda;
            let weighted = g.scale(gan, lambda as f32);
            total = g.add(total, weighted)?;
        }
        if !report.is_finite() || !g.scalar(total).is_finite() {
            return Err(self.non_finite(step, &report));
        }
        if self.probe_every > 0 && step % self.probe_every == 0 {
            self.probes.push(probe_invariants(model, &g, &enc, loss.rec, step)?);
        }
        let mut grads = g.backward(total)?.param_grads(&g, &model.store);
        self.keep(&mut grads, false);
        let ze_rows = g.value(enc.ze_flat).clone();
        let tokens = enc.tokens.clone();
        let xhat_value = g.value(xhat).clone();
        drop(g);
        self.opt_g.step(&mut self.model.store, &grads)?;

        if adversarial {
            let mut g = Graph::new();
            let real = g.constant(x);
            let fake = g.constant(xhat_value);
            let rl = self.model.disc_logits(&mut g, real)?;
            let fl = self.model.disc_logits(&mut g, fake)?;
            let d = discriminator_loss(&mut g, rl, fl)?;
            report.gan_d = g.scalar(d);
            if !report.gan_d.is_finite() {
                return Err(self.non_finite(step, &report));
            }
            let mut grads = g.backward(d)?.param_grads(&g, &self.model.store);
            self.keep(&mut grads, true);
            self.opt_d.step(&mut self.model.store, &grads)?;
        }
        self.reseed_dead_codes(&tokens, &ze_rows);
        self.step += 1;
        self.last_finite = Some(report);
        Ok(report)
    }

    fn non_finite(&self, step: usize, report: &LossReport) -> Error {
        Error::NonFinite {
            step,
            detail: format!("losses {report:?}; last finite report {:?}", self.last_finite),
        }
    }

    fn reseed_dead_codes(&mut self, tokens: &[TokenGrid], ze_rows: &Tensor) {
        let mut used = vec![false; self.idle.len()];
        for t in tokens {
            for &i in &t.indices {
                used[i] = true;
            }
        }
        let d = self.model.cfg.code_dim;
        let n_rows = ze_rows.len() / d;
        let cb = self.model.codebook_id();
        for (k, idle) in self.idle.iter_mut().enumerate() {
            if used[k] {
                *idle = 0;
                continue;
            }
            *idle += 1;
            if *idle >= self.model.cfg.dead_code_patience {
                let r = self.rng.random_range(0..n_rows);
                let src = &ze_rows.data()[r * d..(r + 1) * d];
                self.model.store.get_mut(cb).data_mut()[k * d..(k + 1) * d].copy_from_slice(src);
                *idle = 0;
            }
        }
    }
}

/// A trained model with its loss curve and invariant probes.
#[derive(Debug, Clone)]
pub struct VqGanRun {
    pub model: VqGan,
    pub curve: Vec<LossReport>,
    pub probes: Vec<InvariantProbe>,
}

/// Trains from a seeded initialisation; `frames` in mm/h.
pub fn train_vqgan(
    frames: &[PrecipFrame],
    cfg: &VqGanConfig,
    steps: usize,
    seed: u64,
    probe_every: usize,
) -> Result<VqGanRun> {
    let first = frames.first().ok_or_else(|| Error::InsufficientData("no training frames".into()))?;
    let shape = first.shape();
    if frames.iter().any(|f| f.shape() != shape) {
        return Err(Error::Shape("training frames differ in shape".into()));
    }
    let model = VqGan::new(cfg.clone(), seed)?;
    let views: Vec<&[f32]> = frames.iter().map(|f| f.values()).collect();
    let mut trainer = VqGanTrainer::new(model, &views, shape.height, shape.width, seed.wrapping_add(1))?;
    trainer.probe_every = probe_every;
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        curve.push(trainer.train_step()?);
    }
    Ok(VqGanRun {
        model: trainer.model,
        curve,
        probes: trainer.probes,
    })
}
