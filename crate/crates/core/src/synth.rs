//! Synthetic weather with a known moisture budget.
//!
//! Rain is a set of Gaussian blobs drifting with a constant wind. Humidity is
//! stepped with the same discrete operator the residual uses (implicit in
//! time, central/one-sided differences in space) with `ET - P` as source, and
//! the radiation field is then set so evapotranspiration closes the budget
//! exactly on the stored f32 fields.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    read_grid_file, read_mask_file, write_grid_file, write_mask_file, GridData, GridShape, MeteoField,
    MeteoStack, PrecipSequence, StationObservation, METEO_CHANNELS,
};
use crate::linalg::solve_banded;
use crate::physics::{dew_from_specific_humidity, makkink_coefficient, moisture_residual_terms, ResidualConfig};
use crate::verify::{catchment_reduce, CatchmentMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ConservationMode {
    Exact,
    /// Residual drawn per pixel from `N(0, sigma^2)` mm/h.
    Noisy { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_sequences: usize,
    pub seed: u64,
    /// Conditioning frames followed by target frames.
    pub n_cond: usize,
    pub n_pred: usize,
    pub step_minutes: u32,
    pub pixel_size_km: f64,
    /// m/s, direction drawn per sequence.
    pub advection_speed: f64,
    pub blob_count: usize,
    pub blob_radius_km: f64,
    /// Peak intensity, mm/h.
    pub blob_intensity: f64,
    /// Fraction of sequences with at least one catchment above 5 mm/3h.
    pub extreme_fraction: f64,
    pub conservation_mode: ConservationMode,
    /// Catchments are a `rows x cols` block partition of the grid.
    pub catchment_rows: usize,
    pub catchment_cols: usize,
    pub column_mass: f64,
    pub base_humidity: f64,
    pub base_temp: f64,
    pub base_radiation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_sequences: 16,
            seed: 0,
            n_cond: 3,
            n_pred: 6,
            step_minutes: 30,
            pixel_size_km: 1.0,
            advection_speed: 2.0,
            blob_count: 3,
            blob_radius_km: 4.0,
            blob_intensity: 3.0,
            extreme_fraction: 0.05,
            conservation_mode: ConservationMode::Exact,
            catchment_rows: 2,
            catchment_cols: 2,
            column_mass: 10_000.0,
            base_humidity: 0.012,
            base_temp: 20.0,
            base_radiation: 250.0,
        }
    }
}

/// Upper bound for the catchment totals of non-extreme sequences, mm/3h.
const ORDINARY_CAP: f64 = 4.5;
const EXTREME_LOW: f64 = 6.0;
const EXTREME_HIGH: f64 = 12.0;
pub const EXTREME_THRESHOLD: f64 = 5.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height < 2 || self.width < 2 {
            return bad("synthetic grids need at least 2x2 pixels");
        }
        if self.n_cond == 0 || self.n_pred == 0 || self.step_minutes == 0 {
            return bad("n_cond, n_pred and step_minutes must be positive");
        }
        if self.n_pred as u32 * self.step_minutes != 180 {
            return bad("the target window must span 3 hours");
        }
        if !(0.0..=1.0).contains(&self.extreme_fraction) {
            return bad("extreme_fraction must lie in [0, 1]");
        }
        if !(self.pixel_size_km > 0.0
            && self.advection_speed >= 0.0
            && self.blob_radius_km > 0.0
            && self.blob_intensity >= 0.0
            && self.column_mass > 0.0
            && self.base_radiation > 0.0)
        {
            return bad("physical parameters must be positive");
        }
        if !(self.base_humidity > 0.0 && self.base_humidity < 0.05) {
            return bad("base_humidity must lie in (0, 0.05)");
        }
        if let ConservationMode::Noisy { sigma } = self.conservation_mode {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad("noise sigma must be positive");
            }
        }
        if self.catchment_rows == 0
            || self.catchment_cols == 0
            || self.catchment_rows > self.height
            || self.catchment_cols > self.width
        {
            return bad("invalid catchment partition");
        }
        Ok(())
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            height: self.height,
            width: self.width,
            channels: 1,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_cond + self.n_pred
    }

    /// The residual configuration the humidity is balanced against.
    pub fn residual_config(&self) -> ResidualConfig {
        ResidualConfig {
            column_mass: self.column_mass,
            dx_km: self.pixel_size_km,
            dy_km: self.pixel_size_km,
            dt_minutes: self.step_minutes as f64,
            ..Default::default()
        }
    }

    pub fn catchments(&self) -> Result<Vec<CatchmentMask>> {
        CatchmentMask::blocks(self.shape(), self.catchment_rows, self.catchment_cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchmentLabel {
    pub catchment_id: String,
    pub obs_mm_per_3h: f64,
    pub extreme: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub id: usize,
    pub precip: PrecipSequence,
    /// One stack per precipitation frame, same timestamps.
    pub meteo: Vec<MeteoStack>,
    pub labels: Vec<CatchmentLabel>,
}

impl SynthSequence {
    pub fn is_extreme(&self) -> bool {
        self.labels.iter().any(|l| l.extreme)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub masks: Vec<CatchmentMask>,
    pub sequences: Vec<SynthSequence>,
}

struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    intensity: f64,
}

fn sequence_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Labels every catchment of the target window.
pub fn label_sequence(target: &PrecipSequence, masks: &[CatchmentMask]) -> Result<Vec<CatchmentLabel>> {
    Ok(catchment_reduce(target, masks)?
        .into_iter()
        .zip(masks)
        .map(|(v, m)| CatchmentLabel {
            catchment_id: m.catchment_id.clone(),
            obs_mm_per_3h: v,
            extreme: v > EXTREME_THRESHOLD,
        })
        .collect())
}

/// Mean over the target frames of each catchment, times 3 (mm/3h), from f64 fields.
fn catchment_totals(frames: &[Vec<f64>], masks: &[CatchmentMask]) -> Vec<f64> {
    masks
        .iter()
        .map(|m| {
            let count = m.mask.iter().filter(|b| **b).count() as f64;
            let sum: f64 = frames
                .iter()
                .map(|f| f.iter().zip(&m.mask).filter(|(_, b)| **b).map(|(v, _)| v).sum::<f64>() / count)
                .sum();
            sum / frames.len() as f64 * 3.0
        })
        .collect()
}

/// Implicit humidity step matrix `I/dt + U d/dx + V d/dy` with the residual's stencil.
fn humidity_operator(h: usize, w: usize, u: f64, v: f64, dt: f64, spacing: f64) -> Vec<f64> {
    let n = h * w;
    let mut a = vec![0.0; n * n];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            a[i * n + i] += 1.0 / dt;
            let (cl, cr, sx) = if c == 0 {
                (c, c + 1, spacing)
            } else if c == w - 1 {
                (c - 1, c, spacing)
            } else {
                (c - 1, c + 1, 2.0 * spacing)
            };
            a[i * n + r * w + cr] += u / sx;
            a[i * n + r * w + cl] -= u / sx;
            let (rl, rr, sy) = if r == 0 {
                (r, r + 1, spacing)
            } else if r == h - 1 {
                (r - 1, r, spacing)
            } else {
                (r - 1, r + 1, 2.0 * spacing)
            };
            a[i * n + rr * w + c] += v / sy;
            a[i * n + rl * w + c] -= v / sy;
        }
    }
    a
}

fn generate_sequence(cfg: &SynthConfig, masks: &[CatchmentMask], id: usize, extreme: bool) -> Result<SynthSequence> {
    let mut rng = sequence_rng(cfg.seed, id as u64 + 1);
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let px = cfg.pixel_size_km;
    let frames = cfg.n_frames();
    let step_s = cfg.step_minutes as f64 * 60.0;
    let rcfg = cfg.residual_config();
    let conv = rcfg.humidity_to_mm_per_hour();

    let theta = rng.random_range(0.0..2.0 * PI);
    let (wind_u, wind_v) = (cfg.advection_speed * theta.cos(), cfg.advection_speed * theta.sin());
    let (u10, u100) = ((0.4 * wind_u) as f32, (0.6 * wind_u) as f32);
    let (v10, v100) = ((0.4 * wind_v) as f32, (0.6 * wind_v) as f32);
    let drift_km = (wind_u * step_s / 1000.0, wind_v * step_s / 1000.0);

    // blob centres are drawn at the middle of the target window
    let mid = cfg.n_cond as f64 + cfg.n_pred as f64 / 2.0;
    let (ext_x, ext_y) = ((w - 1) as f64 * px, (h - 1) as f64 * px);
    let blobs: Vec<Blob> = (0..cfg.blob_count.max(1))
        .map(|b| {
            let (lo, hi) = if b == 0 { (0.2, 0.8) } else { (-0.25, 1.25) };
            Blob {
                x: rng.random_range(lo..hi) * ext_x,
                y: rng.random_range(lo..hi) * ext_y,
                radius: cfg.blob_radius_km * rng.random_range(0.5..1.5),
                intensity: cfg.blob_intensity * rng.random_range(0.5..1.5),
            }
        })
        .collect();
    let mut rain: Vec<Vec<f64>> = (0..frames)
        .map(|k| {
            let dt = k as f64 - mid;
            (0..n)
                .map(|p| {
                    let (x, y) = ((p % w) as f64 * px, (p / w) as f64 * px);
                    blobs
                        .iter()
                        .map(|b| {
                            let (cx, cy) = (b.x + dt * drift_km.0, b.y + dt * drift_km.1);
                            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                            b.intensity * (-d2 / (2.0 * b.radius * b.radius)).exp()
                        })
                        .sum()
                })
                .collect()
        })
        .collect();

    // residual noise: positive part goes to ET, negative part to P
    let noise: Vec<Vec<f64>> = match cfg.conservation_mode {
        ConservationMode::Exact => vec![vec![0.0; n]; frames],
        ConservationMode::Noisy { sigma } => {
            let dist = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            (0..frames)
                .map(|k| {
                    (0..n)
                        .map(|_| if k == 0 { 0.0 } else { dist.sample(&mut rng) })
                        .collect()
                })
                .collect()
        }
    };
    let noise_rain: Vec<Vec<f64>> = noise.iter().map(|f| f.iter().map(|e| (-e).max(0.0)).collect()).collect();

    let blob_tot = catchment_totals(&rain[cfg.n_cond..], masks);
    let noise_tot = catchment_totals(&noise_rain[cfg.n_cond..], masks);
    let scale = if extreme {
        let target = rng.random_range(EXTREME_LOW..EXTREME_HIGH);
        let (best, b) = blob_tot
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |a, (i, v)| if *v > a.1 { (i, *v) } else { a });
        if b <= 0.0 {
            return Err(Error::Solver("extreme sequence has no rain over any catchment".into()));
        }
        ((target - noise_tot[best]) / b).max(0.0)
    } else {
        blob_tot
            .iter()
            .zip(&noise_tot)
            .filter(|(b, _)| **b > 0.0)
            .map(|(b, nz)| ((ORDINARY_CAP - nz) / b).max(0.0))
            .fold(1.0f64, f64::min)
    };
    for f in rain.iter_mut() {
        for v in f.iter_mut() {
            *v = (*v * scale) as f32 as f64;
        }
    }

    let temp: Vec<f32> = (0..n)
        .map(|p| (cfg.base_temp + 2.0 * ((p % w) as f64 / w as f64 - 0.5)) as f32)
        .collect();
    let coef: Vec<f64> = temp
        .iter()
        .map(|t| makkink_coefficient(*t as f64, rcfg.gamma, rcfg.lambda_v))
        .collect();
    let et0: Vec<f64> = coef.iter().map(|c| c * cfg.base_radiation).collect();

    let wind_x = u10 as f64 + u100 as f64;
    let wind_y = v10 as f64 + v100 as f64;
    let op = humidity_operator(h, w, wind_x, wind_y, step_s, px * 1000.0);
    let mut q: Vec<Vec<f32>> = vec![vec![cfg.base_humidity as f32; n]];
    for k in 1..frames {
        let rhs: Vec<f64> = (0..n)
            .map(|i| q[k - 1][i] as f64 / step_s + (et0[i] - rain[k][i]) / conv)
            .collect();
        let next = solve_banded(op.clone(), rhs, n, w, w)?;
        q.push(next.iter().map(|v| v.clamp(0.0, 0.1) as f32).collect());
    }

    let shape = cfg.shape();
    let const_field = |v: f32| vec![v; n];
    let mut meteo = Vec::with_capacity(frames);
    let mut precip = Vec::with_capacity(frames);
    for k in 0..frames {
        let t = k as i64 * cfg.step_minutes as i64;
        let dew: Vec<f32> = q[k]
            .iter()
            .zip(&temp)
            .map(|(qv, tv)| (dew_from_specific_humidity(*qv as f64, crate::physics::STANDARD_PRESSURE_KPA) as f32).min(*tv))
            .collect();
        let mut fields: [Vec<f32>; METEO_CHANNELS] = [
            q[k].clone(),
            const_field(u10),
            const_field(v10),
            const_field(u100),
            const_field(v100),
            const_field(0.0),
            temp.clone(),
            dew,
        ];
        let rain_f32: Vec<f32> = rain[k].iter().map(|v| *v as f32).collect();
        let et: Vec<f64> = if k == 0 {
            et0.clone()
        } else {
            let probe = MeteoStack::new(shape, t, px as f32, fields.clone())?;
            let frame = crate::grid::PrecipFrame::new(shape, rain_f32.clone(), t)?;
            let terms = moisture_residual_terms(&q[k - 1], &q[k], &probe, &frame, &rcfg)?;
            (0..n)
                .map(|i| rain_f32[i] as f64 + terms.tendency[i] + terms.advection[i])
                .collect()
        };
        fields[MeteoField::Rs.index()] = (0..n)
            .map(|i| (((et[i] + noise[k][i].max(0.0)) / coef[i]).max(0.0)) as f32)
            .collect();
        meteo.push(MeteoStack::new(shape, t, px as f32, fields)?);
        precip.push(
            rain_f32
                .iter()
                .zip(&noise_rain[k])
                .map(|(r, e)| (*r as f64 + e) as f32)
                .collect(),
        );
    }
    let precip = PrecipSequence::from_frames(shape, cfg.step_minutes, precip)?.with_pixel_size(px as f32)?;
    let (_, target) = precip.split(cfg.n_cond, cfg.n_pred)?;
    let labels = label_sequence(&target, masks)?;
    Ok(SynthSequence {
        id,
        precip,
        meteo,
        labels,
    })
}

/// Generates a dataset; sequences are independent and built in parallel.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let masks = cfg.catchments()?;
    let n_extreme = (cfg.extreme_fraction * cfg.n_sequences as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_sequences).collect();
    order.shuffle(&mut sequence_rng(cfg.seed, 0));
    let mut extreme = vec![false; cfg.n_sequences];
    for &i in &order[..n_extreme] {
        extreme[i] = true;
    }
    let sequences = (0..cfg.n_sequences)
        .into_par_iter()
        .map(|i| generate_sequence(cfg, &masks, i, extreme[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config: cfg.clone(),
        masks,
        sequences,
    })
}

/// Reads every field of `stack` at `n_stations` distinct random pixels.
pub fn station_subsample(stack: &MeteoStack, n_stations: usize, seed: u64) -> Result<Vec<StationObservation>> {
    let shape = stack.shape();
    if n_stations == 0 || n_stations > shape.pixels() {
        return Err(Error::Config(format!(
            "cannot sample {n_stations} stations from {} pixels",
            shape.pixels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = rand::seq::index::sample(&mut rng, shape.pixels(), n_stations).into_vec();
    pixels.sort_unstable();
    let px = stack.pixel_size_km() as f64;
    let mut out = Vec::with_capacity(n_stations * METEO_CHANNELS);
    for f in MeteoField::ALL {
        for &p in &pixels {
            out.push(StationObservation {
                station_id: format!("s{p:05}"),
                x_km: (p % shape.width) as f64 * px,
                y_km: (p / shape.width) as f64 * px,
                timestamp: stack.timestamp(),
                variable: f.name().to_string(),
                value: stack.field(f)[p] as f64,
            });
        }
    }
    Ok(out)
}

fn precip_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join(format!("seq_{id:04}_precip.pnwg"))
}

fn meteo_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join(format!("seq_{id:04}_meteo.pnwg"))
}

pub const LABELS_HEADER: &str = "sequence_id,catchment_id,obs_mm_per_3h,extreme";

pub fn labels_csv(ds: &SynthDataset) -> String {
    let mut s = format!("{LABELS_HEADER}\n");
    for seq in &ds.sequences {
        for l in &seq.labels {
            s += &format!("{},{},{},{}\n", seq.id, l.catchment_id, l.obs_mm_per_3h, l.extreme as u8);
        }
    }
    s
}

/// Writes `dataset.json`, per-sequence PNWG files, `masks.pnwg` and `labels.csv`.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_json = serde_json::to_string_pretty(&ds.config).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("dataset.json");
    fs::write(&path, cfg_json + "\n").map_err(|e| Error::io(&path, e))?;
    for seq in &ds.sequences {
        write_grid_file(&GridData::Precip(seq.precip.clone()), &precip_path(dir, seq.id))?;
        write_grid_file(&GridData::Meteo(seq.meteo.clone()), &meteo_path(dir, seq.id))?;
    }
    let masks: Vec<Vec<bool>> = ds.masks.iter().map(|m| m.mask.clone()).collect();
    write_mask_file(&dir.join("masks.pnwg"), ds.config.shape(), &masks)?;
    let path = dir.join("labels.csv");
    fs::write(&path, labels_csv(ds)).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset written by [`write_dataset`]; labels are recomputed from the rain.
pub fn read_dataset(dir: &Path) -> Result<SynthDataset> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: SynthConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    let (shape, raw_masks) = read_mask_file(&dir.join("masks.pnwg"))?;
    let masks = raw_masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| CatchmentMask::new(format!("c{i}"), shape, m))
        .collect::<Result<Vec<_>>>()?;
    let sequences = (0..config.n_sequences)
        .map(|id| {
            let precip = read_grid_file(&precip_path(dir, id))?.into_precip()?;
            let meteo = read_grid_file(&meteo_path(dir, id))?.into_meteo()?;
            let (_, target) = precip.split(config.n_cond, config.n_pred)?;
            let labels = label_sequence(&target, &masks)?;
            Ok(SynthSequence {
                id,
                precip,
                meteo,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config,
        masks,
        sequences,
    })
}
