//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pidnowcast::grid::{GridShape, PrecipFrame, PrecipSequence, StationObservation};
use pidnowcast::ingest::{
    cubic_time_interp, dedup_sites, krige_to_grid, kriging_weights, KrigingConfig, VariogramChoice, VariogramKind,
    VariogramModel,
};
use pidnowcast::physics::{sequence_residuals, sequence_scores, ConsistencyConfig, ResidualAggregation};
use pidnowcast::pid::{
    evaluate_rollouts, pid_disc_loss, train_pid, AblationFlags, PidConfig, PidTrainer, TemporalDisc,
    TemporalDiscConfig, TrainingSequence,
};
use pidnowcast::synth::{generate, SynthConfig};
use pidnowcast::tensor::check::{grad_check, grad_check_params, grad_check_params_smooth, relative_deviation};
use pidnowcast::tensor::optim::AdamConfig;
use pidnowcast::tensor::{Graph, ParamStore, Tensor, Var};
use pidnowcast::transformer::{train_transformer, TokenStream, Transformer, TransformerConfig, TransformerTrainer};
use pidnowcast::verify::{
    contingency_flat, evaluate, extreme_pr_curve, fss, parse_metrics_csv, parse_pr_curve_csv, pixel_metrics_flat,
    CatchmentMask, VerificationConfig,
};
use pidnowcast::vqgan::{train_vqgan, VqGan, VqGanConfig, VqLoss};
use pidnowcast::Result;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- gradients

const EPS: f32 = 1e-3;
const GRAD_TOL: f64 = 1e-2;

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.1, 1.0, &mut rng(seed));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            *v = -*v;
        }
    }
    t
}

fn probe_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(Tensor::uniform(g.shape(y), 0.5, 1.5, &mut rng(99)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Primitive = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn primitive_cases() -> Vec<(&'static str, Tensor, Primitive)> {
    let x = away_from_zero(&[3, 4], 1);
    let x3 = away_from_zero(&[2, 3, 4], 2);
    let other = Tensor::uniform(&[3, 1], -1.0, 1.0, &mut rng(3));
    let mat = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut rng(4));
    let img = away_from_zero(&[2, 2, 5, 5], 5);
    let kernel = Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng(6));
    let bias = Tensor::uniform(&[3], -0.5, 0.5, &mut rng(7));
    let up_in = away_from_zero(&[2, 3, 3, 3], 8);
    let up_kernel = Tensor::uniform(&[3, 2, 4, 4], -0.5, 0.5, &mut rng(9));
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut rng(10));
    let beta = Tensor::uniform(&[4], -0.5, 0.5, &mut rng(11));
    let target = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng(12));
    let pos = Tensor::uniform(&[3, 4], 0.2, 0.9, &mut rng(13));

    let unary = |f: fn(&mut Graph, Var) -> Var| -> Primitive {
        Box::new(move |g, x| {
            let y = f(g, x);
            probe_sum(g, y)
        })
    };
    let (o, m, k, b, uk, gm, bt, tg) = (
        other.clone(),
        mat.clone(),
        kernel.clone(),
        bias.clone(),
        up_kernel.clone(),
        gamma.clone(),
        beta.clone(),
        target.clone(),
    );
    let (k2, b2, img2, b3, img3, k3) = (kernel.clone(), bias.clone(), img.clone(), bias.clone(), img.clone(), kernel);
    let (tg2, gm2, bt2, x_ln, x_ln2) = (target.clone(), gamma.clone(), beta.clone(), x.clone(), x.clone());
    vec![
        ("relu", x.clone(), unary(|g, x| g.relu(x))),
        ("leaky_relu", x.clone(), unary(|g, x| g.leaky_relu(x, 0.2))),
        ("sigmoid", x.clone(), unary(|g, x| g.sigmoid(x))),
        ("silu", x.clone(), unary(|g, x| g.silu(x))),
        ("tanh", x.clone(), unary(|g, x| g.tanh(x))),
        ("exp", x.clone(), unary(|g, x| g.exp(x))),
        ("abs", x.clone(), unary(|g, x| g.abs(x))),
        ("scale", x.clone(), unary(|g, x| g.scale(x, -2.5))),
        (
            "add_scalar",
            x.clone(),
            Box::new(|g, x| {
                let y = g.add_scalar(x, 3.0);
                let y = g.mul(y, x)?;
                probe_sum(g, y)
            }),
        ),
        ("log_clamped", pos, unary(|g, x| g.log_clamped(x, 1e-7, 1.0 - 1e-7))),
        (
            "add (broadcast)",
            x3.clone(),
            Box::new({
                let o = o.clone();
                move |g, x| {
                    let c = g.constant(o.clone());
                    let y = g.add(x, c)?;
                    let y = g.mul(y, x)?;
                    probe_sum(g, y)
                }
            }),
        ),
        (
            "sub (broadcast)",
            x3.clone(),
            Box::new({
                let o = o.clone();
                move |g, x| {
                    let c = g.constant(o.clone());
                    let y = g.sub(c, x)?;
                    let y = g.mul(y, x)?;
                    probe_sum(g, y)
                }
            }),
        ),
        (
            "mul (broadcast operand)",
            Tensor::uniform(&[4], -1.0, 1.0, &mut rng(14)),
            Box::new(|g, b| {
                let big = g.constant(away_from_zero(&[2, 3, 4], 15));
                let y = g.mul(big, b)?;
                let y = g.add(y, b)?;
                probe_sum(g, y)
            }),
        ),
        (
            "matmul",
            x3.clone(),
            Box::new(move |g, a| {
                let b = g.constant(m.clone());
                let y = g.matmul(a, b)?;
                probe_sum(g, y)
            }),
        ),
        (
            "matmul (shared rhs)",
            Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng(16)),
            Box::new(|g, w| {
                let a = g.constant(away_from_zero(&[2, 3, 4], 17));
                let y = g.matmul(a, w)?;
                probe_sum(g, y)
            }),
        ),
        (
            "permute",
            x3.clone(),
            Box::new(|g, x| {
                let y = g.permute(x, &[2, 0, 1])?;
                let y = g.mul(y, y)?;
                probe_sum(g, y)
            }),
        ),
        (
            "transpose_last",
            x3.clone(),
            Box::new(|g, x| {
                let y = g.transpose_last(x)?;
                probe_sum(g, y)
            }),
        ),
        (
            "reshape",
            x3.clone(),
            Box::new(|g, x| {
                let y = g.reshape(x, &[6, 4])?;
                let y = g.sigmoid(y);
                probe_sum(g, y)
            }),
        ),
        (
            "concat",
            x3.clone(),
            Box::new(|g, x| {
                let s = g.scale(x, 2.0);
                let y = g.concat(&[x, s, x], 1)?;
                let y = g.tanh(y);
                probe_sum(g, y)
            }),
        ),
        (
            "narrow",
            x3.clone(),
            Box::new(|g, x| {
                let y = g.narrow(x, 2, 1, 2)?;
                let y = g.exp(y);
                probe_sum(g, y)
            }),
        ),
        (
            "conv2d input",
            img.clone(),
            Box::new(move |g, x| {
                let (w, b) = (g.constant(k.clone()), g.constant(b.clone()));
                let y = g.conv2d(x, w, Some(b), 2, 1)?;
                probe_sum(g, y)
            }),
        ),
        (
            "conv2d weight",
            k2,
            Box::new(move |g, w| {
                let (x, b) = (g.constant(img2.clone()), g.constant(b2.clone()));
                let y = g.conv2d(x, w, Some(b), 1, 1)?;
                probe_sum(g, y)
            }),
        ),
        (
            "conv2d bias",
            b3,
            Box::new(move |g, b| {
                let (x, w) = (g.constant(img3.clone()), g.constant(k3.clone()));
                let y = g.conv2d(x, w, Some(b), 2, 0)?;
                probe_sum(g, y)
            }),
        ),
        (
            "conv_transpose2d input",
            up_in.clone(),
            Box::new({
                let uk = uk.clone();
                move |g, x| {
                    let w = g.constant(uk.clone());
                    let y = g.conv_transpose2d(x, w, None, 2, 1)?;
                    probe_sum(g, y)
                }
            }),
        ),
        (
            "conv_transpose2d weight",
            uk,
            Box::new(move |g, w| {
                let x = g.constant(up_in.clone());
                let b = g.constant(Tensor::full(&[2], 0.1));
                let y = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
                probe_sum(g, y)
            }),
        ),
        ("softmax", x.clone(), Box::new(|g, x| {
            let y = g.softmax(x)?;
            probe_sum(g, y)
        })),
        (
            "layer_norm input",
            x.clone(),
            Box::new(move |g, x| {
                let (a, b) = (g.constant(gm.clone()), g.constant(bt.clone()));
                let y = g.layer_norm(x, a, b, 1e-5)?;
                probe_sum(g, y)
            }),
        ),
        (
            "layer_norm gain",
            gamma,
            Box::new(move |g, a| {
                let (x, b) = (g.constant(x_ln.clone()), g.constant(bt2.clone()));
                let y = g.layer_norm(x, a, b, 1e-5)?;
                probe_sum(g, y)
            }),
        ),
        (
            "layer_norm shift",
            beta,
            Box::new(move |g, b| {
                let (x, a) = (g.constant(x_ln2.clone()), g.constant(gm2.clone()));
                let y = g.layer_norm(x, a, b, 1e-5)?;
                let y = g.mul(y, y)?;
                probe_sum(g, y)
            }),
        ),
        (
            "embedding",
            away_from_zero(&[4, 3], 18),
            Box::new(|g, t| {
                let y = g.embedding(t, &[2, 0, 2, 3])?;
                let y = g.tanh(y);
                probe_sum(g, y)
            }),
        ),
        ("sum", x.clone(), Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        })),
        ("mean", x.clone(), Box::new(|g, x| {
            let y = g.exp(x);
            Ok(g.mean(y))
        })),
        ("mean_last", x.clone(), Box::new(|g, x| {
            let y = g.mean_last(x)?;
            let y = g.mul(y, y)?;
            probe_sum(g, y)
        })),
        (
            "l1_loss",
            x.clone(),
            Box::new(move |g, x| {
                let t = g.constant(tg.clone());
                g.l1_loss(x, t)
            }),
        ),
        (
            "mse_loss",
            x.clone(),
            Box::new(move |g, x| {
                let t = g.constant(tg2.clone());
                g.mse_loss(t, x)
            }),
        ),
        ("cross_entropy", x, Box::new(|g, x| g.cross_entropy(x, &[3, 0, 1]))),
    ]
}

/// Operators whose gradient is a convention rather than the derivative of
/// their value, checked against a surrogate with the same value and the
/// derivative the convention prescribes.
fn surrogate_cases() -> std::result::Result<Vec<(&'static str, f64)>, String> {
    let at = away_from_zero(&[3, 4], 19);
    let hard = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(20));
    let check = |op: &dyn Fn(&mut Graph, Var) -> Result<Var>, surrogate: &dyn Fn(&mut Graph, Var) -> Result<Var>| {
        let a = grad_check(op, &at, EPS).map_err(err)?;
        let b = grad_check(surrogate, &at, EPS).map_err(err)?;
        let (va, vb) = {
            let (mut ga, mut gb) = (Graph::new(), Graph::new());
            let (xa, xb) = (ga.input(at.clone()), gb.input(at.clone()));
            let (ra, rb) = (op(&mut ga, xa).map_err(err)?, surrogate(&mut gb, xb).map_err(err)?);
            (ga.scalar(ra), gb.scalar(rb))
        };
        ensure!(rel_close(va, vb, 1e-6), "surrogate value {vb} differs from {va}");
        Ok::<f64, String>(relative_deviation(&a.analytic, &b.numeric))
    };
    // value of the hard branch, gradient of the identity
    let st = check(
        &|g, x| {
            let h = g.constant(hard.clone());
            let y = g.straight_through(x, h)?;
            let y = g.mul(y, x)?;
            probe_sum(g, y)
        },
        &|g, x| {
            let (h, x0) = (g.constant(hard.clone()), g.constant(at.clone()));
            let shift = g.sub(x, x0)?;
            let y = g.add(h, shift)?;
            let y = g.mul(y, x)?;
            probe_sum(g, y)
        },
    )?;
    // value of the input, no gradient through it
    let sg = check(
        &|g, x| {
            let s = g.stop_gradient(x);
            let y = g.mul(s, x)?;
            probe_sum(g, y)
        },
        &|g, x| {
            let x0 = g.constant(at.clone());
            let y = g.mul(x0, x)?;
            probe_sum(g, y)
        },
    )?;
    Ok(vec![("straight_through", st), ("stop_gradient", sg)])
}

fn vq_loss_grad_check() -> std::result::Result<f64, String> {
    let cfg = VqGanConfig {
        codebook_size: 8,
        code_dim: 4,
        downsample_factor: 4,
        hidden_channels: 4,
        disc_channels: 2,
        perceptual_channels: 2,
        batch_size: 2,
        ..Default::default()
    };
    let m = VqGan::new(cfg, 13).map_err(err)?;
    let x = Tensor::uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng(14));
    let mut store = m.store.clone();
    store.set_trainable_prefix("disc.", false);
    // code assignments are piecewise constant; hold them at the unperturbed choice
    let frozen = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        m.encode_quantize(&mut g, xv).map_err(err)?.freeze(&g)
    };
    let with_store = |s: &ParamStore| {
        let mut mm = m.clone();
        mm.store = s.clone();
        mm
    };
    let forward = |g: &mut Graph, mm: &VqGan| -> Result<(Var, Var, VqLoss)> {
        let xv = g.constant(x.clone());
        let ze = mm.encoder(g, xv)?;
        let enc = mm.quantize_frozen(g, ze, &frozen)?;
        let xhat = mm.decoder(g, enc.zst)?;
        let loss = mm.vqvae_loss(g, xv, xhat, &enc)?;
        Ok((xv, xhat, loss))
    };
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> { Ok(forward(g, &with_store(s))?.2.total) };
    let kinks = |s: &ParamStore| -> Result<Vec<bool>> {
        let mm = with_store(s);
        let mut g = Graph::new();
        let (xv, xhat, _) = forward(&mut g, &mm)?;
        let mut pairs = vec![(xv, xhat)];
        let fa = mm.perceptual_features(&mut g, xv)?;
        let fb = mm.perceptual_features(&mut g, xhat)?;
        pairs.extend(fa.into_iter().zip(fb));
        Ok(pairs
            .iter()
            .flat_map(|(a, b)| g.data(*a).iter().zip(g.data(*b)).map(|(p, q)| p > q).collect::<Vec<_>>())
            .collect())
    };
    let r = grad_check_params_smooth(&store, f, EPS, kinks).map_err(err)?;
    let total = r.analytic.len() + r.skipped;
    ensure!(r.skipped * 20 <= total, "VQ loss: {} of {total} components straddle a kink", r.skipped);
    Ok(r.max_rel_dev)
}

fn transformer_loss_grad_check() -> std::result::Result<f64, String> {
    let cfg = TransformerConfig {
        layers: 1,
        heads: 2,
        model_dim: 4,
        context_len: 6,
        vocab: 5,
        dropout: 0.0,
        mlp_ratio: 2,
        batch_size: 1,
        adam: AdamConfig::default(),
    };
    let m = Transformer::new(cfg, 13).map_err(err)?;
    let s = random_stream(6, 5, 14);
    let f = |g: &mut Graph, st: &ParamStore| -> Result<Var> {
        let mut mm = m.clone();
        mm.store = st.clone();
        let lg = mm.logits(g, &[&s], None)?;
        mm.next_token_loss(g, lg, &[&s])
    };
    Ok(grad_check_params(&m.store, f, EPS).map_err(err)?.max_rel_dev)
}

fn pid_disc_grad_check() -> std::result::Result<f64, String> {
    let d = TemporalDisc::new(
        TemporalDiscConfig {
            channels: 3,
            ..Default::default()
        },
        3,
        100.0,
        23,
    )
    .map_err(err)?;
    let mut r = rng(24);
    let real = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let fake = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let fake_eta = Tensor::uniform(&[2, 3], 0.2, 1.0, &mut r);
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let mut dd = d.clone();
        dd.store = s.clone();
        let (rv, re) = (g.constant(real.clone()), g.constant(Tensor::full(&[2, 3], 1.0)));
        let (fv, fe) = (g.constant(fake.clone()), g.constant(fake_eta.clone()));
        let ri = dd.input(g, rv, re)?;
        let fi = dd.input(g, fv, fe)?;
        let lr = dd.logits(g, ri)?;
        let lf = dd.logits(g, fi)?;
        pid_disc_loss(g, lr, lf)
    };
    Ok(grad_check_params(&d.store, f, EPS).map_err(err)?.max_rel_dev)
}

fn pid_generator_grad_check() -> std::result::Result<f64, String> {
    let scfg = SynthConfig {
        height: 16,
        width: 16,
        n_sequences: 1,
        seed: 21,
        ..Default::default()
    };
    let data: Vec<TrainingSequence> = generate(&scfg).map_err(err)?.sequences.iter().map(TrainingSequence::from).collect();
    let vq = VqGan::new(
        VqGanConfig {
            codebook_size: 8,
            code_dim: 4,
            downsample_factor: 8,
            hidden_channels: 4,
            disc_channels: 2,
            perceptual_channels: 2,
            batch_size: 2,
            ..Default::default()
        },
        1,
    )
    .map_err(err)?;
    let mut tr = Transformer::new(
        TransformerConfig {
            layers: 1,
            heads: 2,
            model_dim: 4,
            context_len: 36,
            vocab: 8,
            dropout: 0.0,
            mlp_ratio: 2,
            batch_size: 2,
            adam: AdamConfig::default(),
        },
        3,
    )
    .map_err(err)?;
    // unit-scale embeddings keep a 1e-3 step small relative to the layer norm input
    let mut r = rng(25);
    for name in ["tok_emb", "pos_emb"] {
        let id = tr.store.find(name).ok_or("missing embedding")?;
        let shape = tr.store.get(id).shape().to_vec();
        *tr.store.get_mut(id) = Tensor::randn(&shape, 1.0, &mut r);
    }
    let cfg = PidConfig {
        adv_weight: 1.0,
        fakes: pidnowcast::pid::FakeFrames::Soft,
        disc: TemporalDiscConfig {
            channels: 4,
            ..Default::default()
        },
        residual: scfg.residual_config(),
        ..Default::default()
    };
    let t = PidTrainer::new(vq, tr, &data, AblationFlags::FULL, cfg, 22).map_err(err)?;
    let store = t.gen.model.store.clone();
    let implied = t.implied_precip(0).to_vec();
    let cell = RefCell::new(t);
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let mut t = cell.borrow_mut();
        t.gen.model.store = s.clone();
        Ok(t.generator_pass(g, &[0], false)?.total)
    };
    // sign of the output clamp at zero rain and of every |implied - predicted| term
    let kinks = |s: &ParamStore| -> Result<Vec<bool>> {
        let mut t = cell.borrow_mut();
        t.gen.model.store = s.clone();
        let mut g = Graph::new();
        let pass = t.generator_pass(&mut g, &[0], false)?;
        let x = g.data(pass.fake_norm.expect("full mode decodes fakes")).to_vec();
        let mut sig: Vec<bool> = x.iter().map(|v| *v > -1.0).collect();
        sig.extend(x.iter().zip(&implied).map(|(v, c)| t.vqgan.denormalize(*v) < *c));
        Ok(sig)
    };
    let r = grad_check_params_smooth(&store, f, EPS, kinks).map_err(err)?;
    let total = r.analytic.len() + r.skipped;
    ensure!(r.skipped * 20 <= total, "generator: {} of {total} components straddle a kink", r.skipped);
    Ok(r.max_rel_dev)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut record = |name: &str, dev: f64| {
        if dev >= worst.0 || worst.1.is_empty() {
            worst = (dev, name.to_string());
        }
    };
    let mut failures = Vec::new();
    for (name, x, f) in primitive_cases() {
        let dev = grad_check(|g, v| f(g, v), &x, EPS).map_err(err)?.max_rel_dev;
        if !(dev < GRAD_TOL) {
            failures.push(format!("{name} {dev:.2e}"));
        }
        record(name, dev);
    }
    let mut composites = surrogate_cases()?;
    composites.extend([
        ("VQ-VAE objective", vq_loss_grad_check()?),
        ("next-token objective", transformer_loss_grad_check()?),
        ("temporal discriminator objective", pid_disc_grad_check()?),
        ("physics-informed generator objective", pid_generator_grad_check()?),
    ]);
    for (name, dev) in composites {
        if !(dev < GRAD_TOL) {
            failures.push(format!("{name} {dev:.2e}"));
        }
        record(name, dev);
    }
    let elapsed = start.elapsed();
    ensure!(failures.is_empty(), "deviation >= {GRAD_TOL}: {}", failures.join(", "));
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("worst {} at {:.2e}, {:.1}s", worst.1, worst.0, elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- physics

fn criterion_physics_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        n_sequences: 100,
        seed: 2024,
        ..Default::default()
    };
    let ds = generate(&cfg).map_err(err)?;
    let rcfg = cfg.residual_config();
    let ccfg = ConsistencyConfig::default();
    let (mut worst_res, mut worst_eta, mut frames) = (0.0f64, 1.0f64, 0usize);
    for s in &ds.sequences {
        // the first frame has no preceding humidity field
        let (_, scored) = s.precip.split(1, s.precip.len() - 1).map_err(err)?;
        for r in sequence_residuals(&scored, &s.meteo, &rcfg).map_err(err)? {
            worst_res = worst_res.max(r.aggregate(ResidualAggregation::MeanAbs));
            frames += 1;
        }
        for eta in sequence_scores(&scored, &s.meteo, &rcfg, &ccfg, true).map_err(err)? {
            worst_eta = worst_eta.min(eta);
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst_res < 1e-6, "mean |residual| reaches {worst_res:e} mm/h");
    ensure!(worst_eta >= 0.99, "consistency score drops to {worst_eta}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{frames} frames, max mean |residual| {worst_res:.1e} mm/h, min score {worst_eta:.6}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- metrics

fn random_field(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| if r.random_bool(0.35) { 0.0 } else { r.random_range(0.0f32..12.0) })
        .collect()
}

fn brute_pcc(p: &[f64], o: &[f64]) -> Option<f64> {
    let n = p.len() as f64;
    let (sp, so): (f64, f64) = (p.iter().sum(), o.iter().sum());
    let spp: f64 = p.iter().map(|x| x * x).sum();
    let soo: f64 = o.iter().map(|x| x * x).sum();
    let spo: f64 = p.iter().zip(o).map(|(a, b)| a * b).sum();
    let (vp, vo) = (n * spp - sp * sp, n * soo - so * so);
    let exact_const = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if exact_const(p) || exact_const(o) {
        return None;
    }
    Some(((n * spo - sp * so) / (vp.sqrt() * vo.sqrt())).clamp(-1.0, 1.0))
}

fn brute_fss(p: &[f32], o: &[f32], h: usize, w: usize, thr: f64, n: usize) -> Option<f64> {
    let half = n as i64 / 2;
    let frac = |v: &[f32], r: usize, c: usize| {
        let mut count = 0;
        for dr in -half..=half {
            for dc in -half..=half {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && v[rr as usize * w + cc as usize] as f64 >= thr {
                    count += 1;
                }
            }
        }
        count as f64 / (n * n) as f64
    };
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (frac(p, r, c), frac(o, r, c));
            num += (a - b) * (a - b);
            den += a * a + b * b;
        }
    }
    (den > 0.0).then(|| 1.0 - num / den)
}

fn one_frame(values: Vec<f32>, h: usize, w: usize) -> std::result::Result<PrecipSequence, String> {
    let shape = GridShape::plane(h, w).map_err(err)?;
    PrecipSequence::new(vec![PrecipFrame::new(shape, values, 0).map_err(err)?], 30).map_err(err)
}

fn opt_close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => rel_close(a, b, 1e-9),
        (None, None) => true,
        _ => false,
    }
}

fn criterion_metric_oracles() -> Outcome {
    let t = contingency_flat(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 0.5).map_err(err)?;
    ensure!((t.hits, t.misses, t.false_alarms) == (1, 1, 1), "worked table {t:?}");
    ensure!(t.csi() == Some(1.0 / 3.0) && t.far() == Some(0.5), "worked CSI {:?} FAR {:?}", t.csi(), t.far());

    let (h, w) = (8, 8);
    let vcfg = VerificationConfig::default();
    let mut r = rng(31);
    let mut pr_cases = 0;
    for case in 0..1000 {
        let (p, o) = (random_field(&mut r, h * w), random_field(&mut r, h * w));
        let (pd, od): (Vec<f64>, Vec<f64>) = (p.iter().map(|v| *v as f64).collect(), o.iter().map(|v| *v as f64).collect());
        let m = pixel_metrics_flat(&p, &o).map_err(err)?;
        let n = pd.len() as f64;
        let mse = pd.iter().zip(&od).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let mae = pd.iter().zip(&od).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        ensure!(rel_close(m.mse, mse, 1e-9), "case {case}: mse {} vs {mse}", m.mse);
        ensure!(rel_close(m.mae, mae, 1e-9), "case {case}: mae {} vs {mae}", m.mae);
        ensure!(opt_close(m.pcc, brute_pcc(&pd, &od)), "case {case}: pcc {:?}", m.pcc);

        for thr in [1.0, 4.0, 8.0] {
            let t = contingency_flat(&p, &o, thr).map_err(err)?;
            let mut counts = [0u64; 4];
            for (a, b) in pd.iter().zip(&od) {
                counts[match (*a >= thr, *b >= thr) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (true, false) => 2,
                    (false, false) => 3,
                }] += 1;
            }
            ensure!(
                [t.hits, t.misses, t.false_alarms, t.correct_negatives] == counts,
                "case {case}: counts at {thr}"
            );
            let [hi, mi, fa, _] = counts.map(|c| c as f64);
            let csi = (hi + mi + fa > 0.0).then(|| hi / (hi + mi + fa));
            let far = (hi + fa > 0.0).then(|| fa / (hi + fa));
            ensure!(opt_close(t.csi(), csi) && opt_close(t.far(), far), "case {case}: CSI/FAR at {thr}");
        }

        let (ps, os) = (one_frame(p.clone(), h, w)?, one_frame(o.clone(), h, w)?);
        for (scale, window) in [(1.0, 1), (3.0, 3), (5.0, 5)] {
            let got = fss(&ps, &os, 2.0, scale, 1.0).map_err(err)?;
            ensure!(opt_close(got, brute_fss(&p, &o, h, w, 2.0, window)), "case {case}: FSS at {scale} km");
        }

        // catchment totals: the 16 2x2 blocks of the field, in mm/3h
        let blocks = |v: &[f64]| -> Vec<f64> {
            (0..16)
                .map(|b| {
                    let (br, bc) = (b / 4 * 2, b % 4 * 2);
                    (0..4).map(|k| v[(br + k / 2) * w + bc + k % 2]).sum::<f64>() / 4.0 * 1.5
                })
                .collect()
        };
        let (pc, oc) = (blocks(&pd), blocks(&od));
        let positives = oc.iter().filter(|v| **v > vcfg.extreme_threshold).count();
        match extreme_pr_curve(&pc, &oc, &vcfg) {
            Ok(curve) => {
                ensure!(positives > 0, "case {case}: curve without extremes");
                pr_cases += 1;
                for pt in &curve.points {
                    let (mut tp, mut fp) = (0usize, 0usize);
                    for (a, b) in pc.iter().zip(&oc) {
                        if *a > pt.threshold {
                            if *b > vcfg.extreme_threshold {
                                tp += 1;
                            } else {
                                fp += 1;
                            }
                        }
                    }
                    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
                    ensure!(opt_close(pt.precision, precision), "case {case}: precision at {}", pt.threshold);
                    ensure!(
                        rel_close(pt.recall, tp as f64 / positives as f64, 1e-9) || (pt.recall == 0.0 && tp == 0),
                        "case {case}: recall at {}",
                        pt.threshold
                    );
                }
            }
            Err(_) => ensure!(positives == 0, "case {case}: curve refused despite {positives} extremes"),
        }
    }
    Ok(format!("1000 cases, {pr_cases} with extremes; worked CSI 1/3, FAR 1/2"))
}

// ---------------------------------------------------------------- interpolation

fn station(id: usize, x: f64, y: f64, value: f64) -> StationObservation {
    StationObservation {
        station_id: format!("s{id}"),
        x_km: x,
        y_km: y,
        timestamp: 0,
        variable: "T".into(),
        value,
    }
}

fn criterion_interpolation() -> Outcome {
    let mut r = rng(41);
    let (mut worst_knot, mut worst_station, mut worst_sum) = (0.0f64, 0.0f64, 0.0f64);
    let kinds = [VariogramKind::Spherical, VariogramKind::Exponential, VariogramKind::Gaussian];
    for case in 0..100 {
        let n = r.random_range(2..12);
        let mut t = 0i64;
        let knots: Vec<(i64, f64)> = (0..n)
            .map(|_| {
                t += 60 * r.random_range(1..4);
                (t, r.random_range(-50.0..50.0))
            })
            .collect();
        let times: Vec<i64> = knots.iter().map(|k| k.0).collect();
        for (got, (_, want)) in cubic_time_interp(&knots, &times).map_err(err)?.iter().zip(&knots) {
            let dev = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            worst_knot = worst_knot.max(dev);
        }

        let (h, w) = (r.random_range(4..12), r.random_range(4..12));
        let shape = GridShape::plane(h, w).map_err(err)?;
        let n_st = r.random_range(2..14);
        let obs: Vec<StationObservation> = (0..n_st)
            .map(|i| station(i, r.random_range(0..w) as f64, r.random_range(0..h) as f64, r.random_range(-30.0..30.0)))
            .collect();
        let vario = VariogramModel::new(
            kinds[case % 3],
            0.0,
            r.random_range(0.5..20.0),
            r.random_range(2.0..15.0),
        )
        .map_err(err)?;
        let cfg = KrigingConfig {
            variogram: VariogramChoice::Fixed(vario),
            ..Default::default()
        };
        let field = krige_to_grid(&obs, shape, &cfg).map_err(err)?;
        let sites = dedup_sites(&obs);
        for s in &sites {
            let got = field.values[s.y as usize * w + s.x as usize];
            worst_station = worst_station.max((got - s.value).abs() / s.value.abs().max(f64::MIN_POSITIVE));
        }
        if sites.len() > 1 {
            for p in 0..h * w {
                let wts = kriging_weights(&sites, (p % w) as f64, (p / w) as f64, &vario, cfg.max_neighbors).map_err(err)?;
                worst_sum = worst_sum.max((wts.iter().map(|x| x.1).sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure!(worst_knot <= 1e-9, "knot deviation {worst_knot:e}");
    ensure!(worst_station <= 1e-6, "station deviation {worst_station:e}");
    ensure!(worst_sum <= 1e-8, "weight sum off by {worst_sum:e}");
    Ok(format!(
        "knots {worst_knot:.1e}, stations {worst_station:.1e}, weight sums {worst_sum:.1e}"
    ))
}

// ---------------------------------------------------------------- VQ-GAN

fn criterion_vqgan_training() -> Outcome {
    let start = Instant::now();
    let ds = generate(&SynthConfig {
        n_sequences: 4,
        seed: 51,
        ..Default::default()
    })
    .map_err(err)?;
    let frames: Vec<PrecipFrame> = ds.sequences.iter().flat_map(|s| s.precip.frames().to_vec()).take(32).collect();
    ensure!(frames.len() == 32 && frames[0].shape().height == 32, "training set");
    let cfg = VqGanConfig {
        codebook_size: 64,
        code_dim: 16,
        hidden_channels: 16,
        disc_channels: 8,
        perceptual_channels: 4,
        gan_start_step: 250,
        ..Default::default()
    };
    let run = train_vqgan(&frames, &cfg, 500, 5, 25).map_err(err)?;
    let elapsed = start.elapsed();
    let window = |r: &[pidnowcast::vqgan::LossReport]| r.iter().map(|x| x.rec).sum::<f64>() / r.len() as f64;
    let (first, last) = (window(&run.curve[..10]), window(&run.curve[run.curve.len() - 10..]));
    let reduction = 1.0 - last / first;
    ensure!(run.probes.len() >= 20, "only {} invariant probes", run.probes.len());
    if let Some(bad) = run.probes.iter().find(|p| !p.holds()) {
        return Err(format!("gradient routing broken at step {}: {bad:?}", bad.step));
    }
    ensure!(
        run.curve.iter().any(|r| r.lambda_gan > 0.0),
        "adversarial phase never started"
    );
    ensure!(reduction >= 0.5, "L1 reconstruction {first:.4} -> {last:.4} ({:.1}%)", reduction * 100.0);
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "L1 {first:.4} -> {last:.4} (-{:.1}%), {} probes hold, {:.1}s",
        reduction * 100.0,
        run.probes.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- transformer

fn tr_cfg(vocab: usize, context_len: usize) -> TransformerConfig {
    TransformerConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        context_len,
        vocab,
        dropout: 0.0,
        mlp_ratio: 2,
        batch_size: 1,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
    }
}

fn random_stream(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(0..vocab)).collect()
}

fn criterion_transformer() -> Outcome {
    // causality: the loss at position i has exactly zero gradient on inputs after i
    let m = Transformer::new(tr_cfg(12, 32), 3).map_err(err)?;
    let s = random_stream(16, 12, 4);
    let d = m.cfg.model_dim;
    for i in 0..15 {
        let mut g = Graph::new();
        let emb = m.embed(&mut g, &[&s]).map_err(err)?;
        let x = g.input(g.value(emb).clone());
        let lg = m.forward_embedded(&mut g, x, None).map_err(err)?;
        let row = g.narrow(lg, 1, i, 1).map_err(err)?;
        let row = g.reshape(row, &[1, 12]).map_err(err)?;
        let loss = g.cross_entropy(row, &[s[i + 1]]).map_err(err)?;
        let grad = g.backward(loss).map_err(err)?.dense(&g, x);
        for j in i + 1..16 {
            ensure!(grad[j * d..(j + 1) * d].iter().all(|v| *v == 0.0), "position {j} feeds the loss at {i}");
        }
        ensure!(grad[i * d..(i + 1) * d].iter().any(|v| *v != 0.0), "position {i} is cut off from its own loss");
    }

    let vocab = 512;
    let untrained = Transformer::new(tr_cfg(vocab, 64), 9).map_err(err)?;
    let loss0 = untrained.stream_loss(&random_stream(64, vocab, 10)).map_err(err)?;
    let ln_z = (vocab as f64).ln();
    ensure!((loss0 - ln_z).abs() <= 0.5, "untrained loss {loss0:.3} vs ln|Z| {ln_z:.3}");

    let stream = random_stream(24, 16, 15);
    let mut trainer = TransformerTrainer::new(Transformer::new(tr_cfg(16, 32), 16).map_err(err)?, vec![stream.clone()], 17)
        .map_err(err)?;
    let mut reached = None;
    for step in 1..=500 {
        trainer.train_step().map_err(err)?;
        if step % 10 == 0 && trainer.model.stream_loss(&stream).map_err(err)? < 0.1 {
            reached = Some(step);
            break;
        }
    }
    let final_loss = trainer.model.stream_loss(&stream).map_err(err)?;
    let step = reached.ok_or_else(|| format!("loss still {final_loss:.4} after 500 steps"))?;
    Ok(format!(
        "causal over 16 positions, untrained {loss0:.3} vs ln|Z| {ln_z:.3}, overfit {final_loss:.4} at step {step}"
    ))
}

// ---------------------------------------------------------------- ablation

const ABLATION_SEEDS: u64 = 5;

fn criterion_ablation() -> Outcome {
    let start = Instant::now();
    let (n_train, n_test) = (48, 24);
    let scfg = SynthConfig {
        height: 16,
        width: 16,
        n_sequences: n_train + n_test,
        extreme_fraction: 0.1,
        // same drift per domain width as the 32 km default at 2 m/s; faster
        // storms leave a 16 km grid inside the forecast window
        advection_speed: 1.0,
        seed: 1,
        ..Default::default()
    };
    let ds = generate(&scfg).map_err(err)?;
    let data: Vec<TrainingSequence> = ds.sequences.iter().map(TrainingSequence::from).collect();
    let (train, test) = data.split_at(n_train);
    let frames: Vec<PrecipFrame> = train.iter().flat_map(|s| s.precip.frames().to_vec()).collect();
    let vcfg = VqGanConfig {
        codebook_size: 64,
        code_dim: 8,
        hidden_channels: 16,
        disc_channels: 8,
        perceptual_channels: 4,
        gan_start_step: usize::MAX,
        ..Default::default()
    };
    let vq = train_vqgan(&frames, &vcfg, 1000, 1, 0).map_err(err)?.model;
    let streams: Vec<Vec<usize>> = train
        .iter()
        .map(|s| {
            let raw: Vec<&[f32]> = s.precip.frames().iter().map(|f| f.values()).collect();
            Ok(TokenStream::from_grids(&vq.encode_frames(&raw, 16, 16)?).tokens)
        })
        .collect::<Result<_>>()
        .map_err(err)?;
    let tcfg = TransformerConfig {
        layers: 2,
        heads: 2,
        model_dim: 32,
        context_len: 144,
        vocab: 64,
        dropout: 0.1,
        mlp_ratio: 2,
        batch_size: 4,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
    };
    let tr = train_transformer(streams, tcfg, 600, 2).map_err(err)?.model;
    let pcfg = PidConfig {
        residual: scfg.residual_config(),
        ..Default::default()
    };
    let verify_cfg = VerificationConfig::default();
    let (mut residual_wins, mut auc_wins) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let mut evals = Vec::new();
        for flags in [AblationFlags::FULL, AblationFlags::NO_PHYSICS] {
            let run = train_pid(train, vq.clone(), tr.clone(), flags, pcfg.clone(), 200, 100 + seed).map_err(err)?;
            let ev = evaluate_rollouts(
                &run.vqgan,
                &run.transformer,
                test,
                &ds.masks,
                &pcfg,
                &verify_cfg,
                5,
                7 + seed,
                Default::default(),
            )
            .map_err(err)?;
            evals.push(ev);
        }
        let (full, ablated) = (&evals[0], &evals[1]);
        let (fa, aa) = (full.pr_auc.ok_or("no extremes in the test split")?, ablated.pr_auc.ok_or("no extremes")?);
        residual_wins += (full.mean_abs_residual < ablated.mean_abs_residual) as usize;
        auc_wins += (fa >= aa) as usize;
        rows.push(format!(
            "seed {seed}: |R| {:.4} vs {:.4}, AUC {fa:.4} vs {aa:.4}",
            full.mean_abs_residual, ablated.mean_abs_residual
        ));
    }
    let elapsed = start.elapsed();
    for r in &rows {
        println!("    {r}");
    }
    let summary = format!(
        "residual lower in {residual_wins}/{ABLATION_SEEDS}, AUC >= in {auc_wins}/{ABLATION_SEEDS}, {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure!(residual_wins >= 4 && auc_wins >= 4, "{summary}");
    ensure!(elapsed < Duration::from_secs(45 * 60), "{summary}; over 45 min");
    Ok(summary)
}

// ---------------------------------------------------------------- extreme-event PR

fn criterion_pr_pipeline() -> Outcome {
    let cfg = SynthConfig {
        height: 16,
        width: 16,
        n_sequences: 12,
        extreme_fraction: 0.5,
        seed: 61,
        ..Default::default()
    };
    let ds = generate(&cfg).map_err(err)?;
    let obs: Vec<PrecipSequence> = ds
        .sequences
        .iter()
        .map(|s| s.precip.split(cfg.n_cond, cfg.n_pred).map(|p| p.1))
        .collect::<Result<_>>()
        .map_err(err)?;
    let zeros: Vec<PrecipSequence> = obs
        .iter()
        .map(|s| {
            let frames = s
                .frames()
                .iter()
                .map(|f| PrecipFrame::new(f.shape(), vec![0.0; f.values().len()], f.timestamp()))
                .collect::<Result<Vec<_>>>()?;
            PrecipSequence::new(frames, s.step_minutes())
        })
        .collect::<Result<_>>()
        .map_err(err)?;
    let vcfg = VerificationConfig::default();
    let masks: &[CatchmentMask] = &ds.masks;
    let identity = evaluate(&obs, &obs, masks, &vcfg).map_err(err)?.pr_curve.ok_or("no PR curve")?;
    let at5 = identity
        .points
        .iter()
        .find(|p| (p.threshold - 5.0).abs() < 1e-12)
        .ok_or("threshold 5 missing from the sweep")?;
    ensure!(identity.points.len() == 20, "{} sweep points", identity.points.len());
    ensure!(at5.precision == Some(1.0) && at5.recall == 1.0, "at 5 mm/3h: {at5:?}");
    ensure!(identity.auc == 1.0, "identity AUC {}", identity.auc);
    let dry = evaluate(&zeros, &obs, masks, &vcfg).map_err(err)?.pr_curve.ok_or("no PR curve")?;
    ensure!(dry.auc == 0.0, "zero-forecast AUC {}", dry.auc);
    Ok(format!(
        "identity P=R=1 at 5 mm/3h, AUC 1; zero forecast AUC 0 ({} extreme sequences)",
        ds.sequences.iter().filter(|s| s.is_extreme()).count()
    ))
}

// ---------------------------------------------------------------- CLI pipeline

const PIPELINE_CONFIG: &str = r#"{
  "seed": 11,
  "data": {"train_fraction": 0.6667},
  "synth": {"height": 16, "width": 16, "n_sequences": 72, "extreme_fraction": 0.1},
  "vqgan": {"steps": 300, "model": {"codebook_size": 64, "code_dim": 8, "downsample_factor": 4,
            "hidden_channels": 16, "disc_channels": 8, "perceptual_channels": 4, "batch_size": 8,
            "gan_start_step": 200}},
  "transformer": {"steps": 200, "model": {"layers": 2, "heads": 2, "model_dim": 32, "context_len": 144,
                  "vocab": 64, "dropout": 0.1, "mlp_ratio": 2, "batch_size": 4}},
  "pid": {"steps": 40},
  "predict": {"n_samples": 3}
}"#;

struct Pipeline {
    root: tempfile::TempDir,
    elapsed: Duration,
    stages: Vec<&'static str>,
}

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pidnowcast"))
        .args(args)
        .env_remove("PIDNOWCAST_THREADS")
        .output()
        .map_err(err)?;
    ensure!(
        out.status.success(),
        "`{}` exited {:?}: {}",
        args.first().unwrap_or(&""),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(())
}

fn run_pipeline() -> std::result::Result<Pipeline, String> {
    let root = tempfile::tempdir().map_err(err)?;
    let d = root.path().to_path_buf();
    let p = |n: &str| d.join(n).to_string_lossy().into_owned();
    let cfg = p("config.json");
    fs::write(&cfg, PIPELINE_CONFIG).map_err(err)?;
    let start = Instant::now();
    cli(&["synth", "--config", &cfg, "--out", &p("data")])?;
    cli(&["train-vqgan", "--config", &cfg, "--data", &p("data"), "--out", &p("vq")])?;
    let vq = p("vq/checkpoints/vqgan.ckpt");
    cli(&["train-transformer", "--config", &cfg, "--data", &p("data"), "--vqgan", &vq, "--out", &p("tr")])?;
    let tr = p("tr/checkpoints/transformer.ckpt");
    cli(&[
        "train-pid", "--config", &cfg, "--data", &p("data"), "--vqgan", &vq, "--transformer", &tr, "--out", &p("pid"),
    ])?;
    cli(&[
        "predict",
        "--config",
        &cfg,
        "--data",
        &p("data"),
        "--vqgan",
        &p("pid/checkpoints/vqgan.ckpt"),
        "--transformer",
        &p("pid/checkpoints/transformer.ckpt"),
        "--out",
        &p("pred"),
    ])?;
    cli(&[
        "evaluate", "--config", &cfg, "--pred", &p("pred/predictions"), "--obs", &p("pred/observations"), "--masks",
        &p("data/masks.pnwg"), "--out", &p("eval"),
    ])?;
    Ok(Pipeline {
        root,
        elapsed: start.elapsed(),
        stages: vec!["data", "vq", "tr", "pid", "pred", "eval"],
    })
}

fn tree(dir: &Path) -> std::result::Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.insert(p.strip_prefix(root).unwrap_or(&p).to_path_buf(), fs::read(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out).map_err(err)?;
    Ok(out)
}

fn criterion_replay(pipeline: &std::result::Result<Pipeline, String>) -> Outcome {
    let pl = pipeline.as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let d = pl.root.path();
    for stage in &pl.stages {
        let again = d.join(format!("{stage}_replay"));
        let manifest = d.join(stage).join("manifest.json");
        cli(&["replay", "--manifest", &manifest.to_string_lossy(), "--out", &again.to_string_lossy()])?;
        let (a, b) = (tree(&d.join(stage))?, tree(&again)?);
        ensure!(a.keys().eq(b.keys()), "{stage}: replay wrote a different file set");
        if let Some((path, _)) = a.iter().find(|(k, v)| b[*k] != **v) {
            return Err(format!("{stage}: {} differs on replay", path.display()));
        }
    }
    Ok(format!("{} stages replay byte-identically, training included", pl.stages.len()))
}

fn criterion_end_to_end(pipeline: &std::result::Result<Pipeline, String>) -> Outcome {
    let pl = pipeline.as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let metrics_dir = pl.root.path().join("eval/metrics");
    let metrics = parse_metrics_csv(&fs::read_to_string(metrics_dir.join("metrics.csv")).map_err(err)?).map_err(err)?;
    for key in ["mse", "mae", "pcc", "auc"] {
        ensure!(
            metrics.iter().any(|(k, v)| k == key && v.is_some_and(f64::is_finite)),
            "metrics.csv lacks a value for {key}"
        );
    }
    let curve = parse_pr_curve_csv(&fs::read_to_string(metrics_dir.join("pr_curve.csv")).map_err(err)?).map_err(err)?;
    ensure!(curve.len() == 20, "pr_curve.csv has {} points", curve.len());
    ensure!(pl.elapsed < Duration::from_secs(15 * 60), "pipeline took {:?}", pl.elapsed);
    let auc = metrics.iter().find(|(k, _)| k == "auc").and_then(|(_, v)| *v).unwrap_or(f64::NAN);
    Ok(format!(
        "synth -> train x3 -> predict -> evaluate in {:.0}s; {} metrics, {} PR points, AUC {auc:.3}",
        pl.elapsed.as_secs_f64(),
        metrics.len(),
        curve.len()
    ))
}

// ---------------------------------------------------------------- runner

fn report(n: usize, name: &str, f: &mut dyn FnMut() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS {n:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {n:>2} {name}: {detail}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters from the default harness are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // ACCEPTANCE_ONLY=3,5 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut ok = true;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            ok &= report(n, name, f);
        }
    };
    run(1, "gradient correctness", &mut criterion_gradients);
    run(2, "physics oracle on exact synthetic data", &mut criterion_physics_oracle);
    run(3, "metric oracle equivalence", &mut criterion_metric_oracles);
    run(4, "interpolation exactness", &mut criterion_interpolation);
    run(5, "VQ-GAN desk-scale training", &mut criterion_vqgan_training);
    run(6, "transformer causality and learning", &mut criterion_transformer);
    run(7, "ablation direction", &mut criterion_ablation);
    run(8, "extreme-event PR pipeline", &mut criterion_pr_pipeline);
    let pipeline = if wanted(9) || wanted(10) {
        run_pipeline()
    } else {
        Err("skipped".into())
    };
    run(9, "reproducibility", &mut || criterion_replay(&pipeline));
    run(10, "end-to-end smoke", &mut || criterion_end_to_end(&pipeline));
    if !ok {
        std::process::exit(1);
    }
}
