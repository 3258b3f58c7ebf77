//! Causal transformer over flattened space-time token streams.
//!
//! Streams are frame-major and row-major within a frame. Every position sees
//! only itself and earlier positions; the logits at position `i` predict the
//! token at `i + 1`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint;
use crate::tensor::nn::{LayerNorm, Linear};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vqgan::TokenGrid;

const MASKED: f32 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Longest stream the positional table covers.
    pub context_len: usize,
    pub vocab: usize,
    pub dropout: f32,
    /// Hidden width of each feed-forward block as a multiple of `model_dim`.
    pub mlp_ratio: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 128,
            context_len: 384,
            vocab: 512,
            dropout: 0.1,
            mlp_ratio: 4,
            batch_size: 4,
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.vocab < 2 || self.context_len == 0 || self.mlp_ratio == 0 || self.batch_size == 0 {
            return bad("vocab >= 2 and positive context_len, mlp_ratio, batch_size required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Checks that `n_cond` conditioning frames plus one predicted frame fit.
    pub fn check_layout(&self, tokens_per_frame: usize, n_cond: usize) -> Result<()> {
        let need = tokens_per_frame * (n_cond + 1);
        if need > self.context_len {
            return Err(Error::Context {
                len: need,
                max: self.context_len,
            });
        }
        Ok(())
    }
}

/// Tokens of consecutive frames laid end to end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<usize>,
    /// Offset of each frame's first token.
    pub frame_boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn from_grids(grids: &[TokenGrid]) -> Self {
        let mut tokens = Vec::new();
        let mut frame_boundaries = Vec::with_capacity(grids.len());
        for g in grids {
            frame_boundaries.push(tokens.len());
            tokens.extend_from_slice(&g.indices);
        }
        Self {
            tokens,
            frame_boundaries,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits the tokens after `skip_frames` frames into `height x width` grids.
    pub fn to_grids(&self, skip_frames: usize, height: usize, width: usize, vocab: usize) -> Result<Vec<TokenGrid>> {
        let n = height * width;
        let start = skip_frames * n;
        if n == 0 || start > self.tokens.len() || (self.tokens.len() - start) % n != 0 {
            return Err(Error::Length {
                expected: start + n,
                found: self.tokens.len(),
            });
        }
        self.tokens[start..]
            .chunks(n)
            .map(|c| TokenGrid::new(height, width, c.to_vec(), vocab))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Softmax temperature; values at or below 1e-6 select the argmax.
    pub temperature: f64,
    /// Sample among the `top_k` most likely tokens; 0 keeps all.
    pub top_k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 64,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_k: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Seeded inverted-dropout masks; `None` during evaluation.
pub struct Dropout<'a> {
    pub rate: f32,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = g.shape(x).to_vec();
        let n = g.value(x).len();
        let data = (0..n)
            .map(|_| if self.rng.random::<f32>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = g.constant(Tensor::new(shape, data)?);
        g.mul(x, mask)
    }
}

fn maybe_drop(drop: &mut Option<Dropout<'_>>, g: &mut Graph, x: Var) -> Result<Var> {
    match drop {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.model_dim;
        let tok_emb = store.add("tok_emb", Tensor::randn(&[cfg.vocab, d], 0.02, &mut rng));
        let pos_emb = store.add("pos_emb", Tensor::randn(&[cfg.context_len, d], 0.02, &mut rng));
        let blocks = (0..cfg.layers)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut store, &format!("block{i}.ln1"), d),
                qkv: Linear::new(&mut store, &format!("block{i}.qkv"), d, 3 * d, &mut rng),
                proj: Linear::new(&mut store, &format!("block{i}.proj"), d, d, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("block{i}.ln2"), d),
                fc1: Linear::new(&mut store, &format!("block{i}.fc1"), d, cfg.mlp_ratio * d, &mut rng),
                fc2: Linear::new(&mut store, &format!("block{i}.fc2"), cfg.mlp_ratio * d, d, &mut rng),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", d);
        let head = Linear::new(&mut store, "head", d, cfg.vocab, &mut rng);
        Ok(Self {
            cfg,
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    fn check_batch(&self, batch: &[&[usize]]) -> Result<usize> {
        let len = batch.first().map_or(0, |s| s.len());
        if len == 0 {
            return Err(Error::Shape("empty token stream".into()));
        }
        if let Some(s) = batch.iter().find(|s| s.len() != len) {
            return Err(Error::Length {
                expected: len,
                found: s.len(),
            });
        }
        if len > self.cfg.context_len {
            return Err(Error::Context {
                len,
                max: self.cfg.context_len,
            });
        }
        if let Some(&bad) = batch.iter().flat_map(|s| s.iter()).find(|t| **t >= self.cfg.vocab) {
            return Err(Error::Index {
                index: bad,
                size: self.cfg.vocab,
            });
        }
        Ok(len)
    }

    /// Token embeddings `[B, L, D]` of equal-length streams, without positions.
    pub fn embed(&self, g: &mut Graph, batch: &[&[usize]]) -> Result<Var> {
        let len = self.check_batch(batch)?;
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let table = g.param(&self.store, self.tok_emb);
        let x = g.embedding(table, &ids)?;
        g.reshape(x, &[batch.len(), len, self.cfg.model_dim])
    }

    /// Logits `[B, L, V]` from token embeddings `[B, L, D]`.
    pub fn forward_embedded(&self, g: &mut Graph, x: Var, mut drop: Option<Dropout<'_>>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let d = self.cfg.model_dim;
        if s.len() != 3 || s[2] != d {
            return Err(Error::Shape(format!("expected [B, L, {d}] embeddings, got {s:?}")));
        }
        let (b, l) = (s[0], s[1]);
        if l > self.cfg.context_len {
            return Err(Error::Context {
                len: l,
                max: self.cfg.context_len,
            });
        }
        let table = g.param(&self.store, self.pos_emb);
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.embedding(table, &positions)?;
        let mut h = g.add(x, pos)?;
        h = maybe_drop(&mut drop, g, h)?;
        let mask = g.constant(causal_mask(l));
        for blk in &self.blocks {
            let a = blk.ln1.forward(g, &self.store, h)?;
            let a = self.attention(g, blk, a, b, l, mask)?;
            let a = maybe_drop(&mut drop, g, a)?;
            h = g.add(h, a)?;
            let m = blk.ln2.forward(g, &self.store, h)?;
            let m = blk.fc1.forward(g, &self.store, m)?;
            let m = g.silu(m);
            let m = blk.fc2.forward(g, &self.store, m)?;
            let m = maybe_drop(&mut drop, g, m)?;
            h = g.add(h, m)?;
        }
        let h = self.ln_f.forward(g, &self.store, h)?;
        self.head.forward(g, &self.store, h)
    }

    fn attention(&self, g: &mut Graph, blk: &Block, x: Var, b: usize, l: usize, mask: Var) -> Result<Var> {
        let (d, nh) = (self.cfg.model_dim, self.cfg.heads);
        let dh = d / nh;
        let qkv = blk.qkv.forward(g, &self.store, x)?;
        let qkv = g.reshape(qkv, &[b, l, 3, nh, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let t = g.narrow(qkv, 0, i, 1)?;
            *p = g.reshape(t, &[b * nh, l, dh])?;
        }
        let [q, k, v] = parts;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        let scores = g.add(scores, mask)?;
        let att = g.softmax(scores)?;
        let out = g.matmul(att, v)?;
        let out = g.reshape(out, &[b, nh, l, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, l, d])?;
        blk.proj.forward(g, &self.store, out)
    }

    /// Logits `[B, L, V]` for a batch of equal-length streams.
    pub fn logits(&self, g: &mut Graph, batch: &[&[usize]], drop: Option<Dropout<'_>>) -> Result<Var> {
        let x = self.embed(g, batch)?;
        self.forward_embedded(g, x, drop)
    }

    /// Mean next-token cross-entropy: logits at `0..L-1` against tokens `1..L`.
    pub fn next_token_loss(&self, g: &mut Graph, logits: Var, batch: &[&[usize]]) -> Result<Var> {
        let s = g.shape(logits).to_vec();
        let (b, l, v) = (s[0], s[1], s[2]);
        if l < 2 {
            return Err(Error::Shape("next-token loss needs streams of length >= 2".into()));
        }
        let head = g.narrow(logits, 1, 0, l - 1)?;
        let head = g.reshape(head, &[b * (l - 1), v])?;
        let targets: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().copied()).collect();
        g.cross_entropy(head, &targets)
    }

    /// Logits `[L, V]` of one stream, evaluation mode.
    pub fn forward_logits(&self, stream: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let frozen = self.frozen();
        let lg = frozen.logits(&mut g, &[stream], None)?;
        let v = self.cfg.vocab;
        g.value(lg).clone().reshaped(&[stream.len(), v])
    }

    /// Next-token loss of one stream, evaluation mode.
    pub fn stream_loss(&self, stream: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let frozen = self.frozen();
        let lg = frozen.logits(&mut g, &[stream], None)?;
        let loss = frozen.next_token_loss(&mut g, lg, &[stream])?;
        Ok(g.scalar(loss))
    }

    fn frozen(&self) -> Transformer {
        let mut m = self.clone();
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.set_trainable(id, false);
        }
        m
    }

    /// Extends `prefix` by `n_new` sampled tokens.
    pub fn sample_tokens(
        &self,
        prefix: &[usize],
        n_new: usize,
        sampling: SamplingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        if prefix.is_empty() {
            return Err(Error::Shape("sampling needs a nonempty prefix".into()));
        }
        let total = prefix.len() + n_new;
        if total > self.cfg.context_len {
            return Err(Error::Context {
                len: total,
                max: self.cfg.context_len,
            });
        }
        let frozen = self.frozen();
        let mut stream = prefix.to_vec();
        let v = self.cfg.vocab;
        for _ in 0..n_new {
            let mut g = Graph::new();
            let lg = frozen.logits(&mut g, &[&stream], None)?;
            let data = g.data(lg);
            let last = &data[data.len() - v..];
            stream.push(pick_token(last, sampling, rng));
        }
        Ok(stream)
    }

    /// Samples `m_pred` frames after the conditioning grids.
    pub fn sample_rollout(
        &self,
        cond: &[TokenGrid],
        m_pred: usize,
        sampling: SamplingConfig,
        seed: u64,
    ) -> Result<Vec<TokenGrid>> {
        let first = cond.first().ok_or_else(|| Error::InsufficientData("no conditioning frames".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some(bad) = cond.iter().find(|c| (c.height, c.width) != (h, w)) {
            return Err(Error::Shape(format!(
                "conditioning grids differ: {}x{} vs {}x{}",
                bad.height, bad.width, h, w
            )));
        }
        let prefix = TokenStream::from_grids(cond);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = self.sample_tokens(&prefix.tokens, m_pred * h * w, sampling, &mut rng)?;
        let stream = TokenStream {
            tokens,
            frame_boundaries: Vec::new(),
        };
        stream.to_grids(cond.len(), h, w, self.cfg.vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, "transformer", cfg, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(path)?;
        Self::from_checkpoint(manifest, &store)
    }

    pub fn from_checkpoint(manifest: checkpoint::Manifest, store: &ParamStore) -> Result<Self> {
        if manifest.model != "transformer" {
            return Err(Error::Checkpoint(format!(
                "expected a transformer checkpoint, found {}",
                manifest.model
            )));
        }
        let cfg: TransformerConfig =
            serde_json::from_value(manifest.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(cfg, 0)?;
        model.store.load_from(store)?;
        Ok(model)
    }
}

/// `[L, L]` additive mask: 0 on and below the diagonal, large negative above.
pub fn causal_mask(l: usize) -> Tensor {
    let data = (0..l * l).map(|i| if i % l > i / l { MASKED } else { 0.0 }).collect();
    Tensor::new(vec![l, l], data).expect("square mask")
}

/// Draws one token from a row of logits.
pub fn pick_token(logits: &[f32], sampling: SamplingConfig, rng: &mut ChaCha8Rng) -> usize {
    if sampling.temperature <= 1e-6 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
    if sampling.top_k > 0 {
        order.truncate(sampling.top_k);
    }
    let top = logits[order[0]] as f64;
    let weights: Vec<f64> = order
        .iter()
        .map(|i| ((logits[*i] as f64 - top) / sampling.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in order.iter().zip(&weights) {
        if u < *w {
            return *i;
        }
        u -= w;
    }
    order[order.len() - 1]
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced optimisation of next-token prediction.
pub struct TransformerTrainer {
    pub model: Transformer,
    streams: Vec<Vec<usize>>,
    opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl TransformerTrainer {
    /// All streams must share one length.
    pub fn new(model: Transformer, streams: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::InsufficientData("no training streams".into()));
        }
        let refs: Vec<&[usize]> = streams.iter().map(|s| s.as_slice()).collect();
        if model.check_batch(&refs)? < 2 {
            return Err(Error::Shape("training streams need length >= 2".into()));
        }
        let opt = Adam::new(model.cfg.adam, &model.store);
        Ok(Self {
            model,
            streams,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Indices of the next minibatch, drawn with replacement.
    pub fn sample_batch(&mut self) -> Vec<usize> {
        let n = self.streams.len();
        (0..self.model.cfg.batch_size).map(|_| self.rng.random_range(0..n)).collect()
    }

    pub fn streams(&self) -> &[Vec<usize>] {
        &self.streams
    }

    /// Builds the training-mode loss graph for the given stream indices.
    pub fn loss_graph(&mut self, g: &mut Graph, picks: &[usize]) -> Result<(Var, Var)> {
        let batch: Vec<&[usize]> = picks.iter().map(|i| self.streams[*i].as_slice()).collect();
        let drop = Dropout {
            rate: self.model.cfg.dropout,
            rng: &mut self.rng,
        };
        let logits = self.model.logits(g, &batch, Some(drop))?;
        let loss = self.model.next_token_loss(g, logits, &batch)?;
        Ok((logits, loss))
    }

    /// Applies gradients computed on a graph built from this model's store.
    pub fn apply(&mut self, g: &Graph, root: Var) -> Result<()> {
        let grads = g.backward(root)?.param_grads(g, &self.model.store);
        self.apply_grads(&grads)
    }

    pub fn apply_grads(&mut self, grads: &[Option<Vec<f32>>]) -> Result<()> {
        self.opt.step(&mut self.model.store, grads)
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let picks = self.sample_batch();
        let mut g = Graph::new();
        let (_, loss) = self.loss_graph(&mut g, &picks)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("cross-entropy {value}"),
            });
        }
        self.apply(&g, loss)?;
        self.step += 1;
        Ok(value)
    }
}

pub const TRANSFORMER_CURVE_HEADER: &str = "step,loss";

pub struct TransformerRun {
    pub model: Transformer,
    pub curve: Vec<(usize, f64)>,
}

impl TransformerRun {
    pub fn curve_csv(&self) -> String {
        let mut s = format!("{TRANSFORMER_CURVE_HEADER}\n");
        for (step, loss) in &self.curve {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }
}

pub fn train_transformer(
    streams: Vec<Vec<usize>>,
    cfg: TransformerConfig,
    steps: usize,
    seed: u64,
) -> Result<TransformerRun> {
    let model = Transformer::new(cfg, seed)?;
    let mut trainer = TransformerTrainer::new(model, streams, seed.wrapping_add(1))?;
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        curve.push((step, trainer.train_step()?));
    }
    Ok(TransformerRun {
        model: trainer.model,
        curve,
    })
}
