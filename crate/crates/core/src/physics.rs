//! Moisture-conservation physics: Makkink evapotranspiration, the pixel-level
//! moisture residual and the consistency score `eta = exp(-lambda * R)`.
//!
//! Humidity tendencies and advection (1/s) are converted to mm/h water
//! equivalent through an effective column mass, so every term of the residual
//! shares the unit of precipitation. Grid `x` runs along columns and `y` along
//! rows, both in the direction of increasing index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, MeteoField, MeteoStack, PrecipFrame, PrecipSequence};

pub const STANDARD_PRESSURE_KPA: f64 = 101.325;
const SECONDS_PER_HOUR: f64 = 3600.0;

/// Saturation vapour pressure over water (Magnus form), kPa.
pub fn saturation_vapor_pressure(temp_c: f64) -> f64 {
    0.6108 * (17.27 * temp_c / (temp_c + 237.3)).exp()
}

/// Slope of the saturation vapour pressure curve, kPa/°C.
pub fn saturation_slope(temp_c: f64) -> f64 {
    4098.0 * saturation_vapor_pressure(temp_c) / (temp_c + 237.3).powi(2)
}

/// Specific humidity (g/g) of air whose dew point is `dew_c`, at pressure `p_kpa`.
pub fn specific_humidity_from_dew(dew_c: f64, p_kpa: f64) -> f64 {
    let e = saturation_vapor_pressure(dew_c);
    0.622 * e / (p_kpa - 0.378 * e)
}

/// Inverse of [`specific_humidity_from_dew`].
pub fn dew_from_specific_humidity(q: f64, p_kpa: f64) -> f64 {
    let e = q * p_kpa / (0.622 + 0.378 * q);
    let l = (e / 0.6108).ln();
    237.3 * l / (17.27 - l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MakkinkInputs {
    /// Air temperature, °C.
    pub temp: f64,
    /// Global radiation, W/m².
    pub r_s: f64,
    /// Psychrometric constant, kPa/°C.
    pub gamma: f64,
    /// Latent heat of vaporisation, J/kg.
    pub lambda_v: f64,
}

impl MakkinkInputs {
    pub fn new(temp: f64, r_s: f64) -> Self {
        Self {
            temp,
            r_s,
            gamma: 0.066,
            lambda_v: 2.45e6,
        }
    }
}

/// ET in mm/h per W/m² of global radiation.
pub fn makkink_coefficient(temp: f64, gamma: f64, lambda_v: f64) -> f64 {
    let slope = saturation_slope(temp);
    0.65 * slope / (slope + gamma) / lambda_v * SECONDS_PER_HOUR
}

/// Makkink reference evapotranspiration, mm/h.
pub fn makkink_et(inp: &MakkinkInputs) -> Result<f64> {
    if !(inp.r_s >= 0.0 && inp.r_s.is_finite()) {
        return Err(Error::validation("r_s", 0, format!("radiation {} must be >= 0", inp.r_s)));
    }
    if !(inp.gamma > 0.0) || !(inp.lambda_v > 0.0) || !inp.temp.is_finite() {
        return Err(Error::Config("makkink needs gamma > 0, lambda_v > 0 and finite temp".into()));
    }
    Ok(makkink_coefficient(inp.temp, inp.gamma, inp.lambda_v) * inp.r_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// First-order one-sided differences on edge pixels.
    #[default]
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualConfig {
    /// Effective water column, kg/m².
    pub column_mass: f64,
    pub dx_km: f64,
    pub dy_km: f64,
    pub dt_minutes: f64,
    pub boundary: Boundary,
    pub gamma: f64,
    pub lambda_v: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            column_mass: 10_000.0,
            dx_km: 1.0,
            dy_km: 1.0,
            dt_minutes: 30.0,
            boundary: Boundary::OneSided,
            gamma: 0.066,
            lambda_v: 2.45e6,
        }
    }
}

impl ResidualConfig {
    fn validate(&self) -> Result<()> {
        let ok = [self.column_mass, self.dx_km, self.dy_km, self.dt_minutes, self.gamma, self.lambda_v]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("residual config values must all be positive".into()))
        }
    }

    /// Factor turning a humidity rate (1/s) into mm/h water equivalent.
    pub fn humidity_to_mm_per_hour(&self) -> f64 {
        self.column_mass * SECONDS_PER_HOUR
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualAggregation {
    #[default]
    MeanAbs,
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub lambda_sharpness: f64,
    pub aggregation: ResidualAggregation,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            lambda_sharpness: 1.0,
            aggregation: ResidualAggregation::MeanAbs,
        }
    }
}

/// Derivative along columns (x) of a row-major `h x w` field; `spacing` in metres.
pub fn ddx(field: &[f64], h: usize, w: usize, spacing: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if w < 2 {
        return out;
    }
    for r in 0..h {
        let row = &field[r * w..(r + 1) * w];
        for c in 0..w {
            out[r * w + c] = if c == 0 {
                (row[1] - row[0]) / spacing
            } else if c == w - 1 {
                (row[w - 1] - row[w - 2]) / spacing
            } else {
                (row[c + 1] - row[c - 1]) / (2.0 * spacing)
            };
        }
    }
    out
}

/// Derivative along rows (y) of a row-major `h x w` field; `spacing` in metres.
pub fn ddy(field: &[f64], h: usize, w: usize, spacing: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if h < 2 {
        return out;
    }
    for r in 0..h {
        for c in 0..w {
            let at = |rr: usize| field[rr * w + c];
            out[r * w + c] = if r == 0 {
                (at(1) - at(0)) / spacing
            } else if r == h - 1 {
                (at(h - 1) - at(h - 2)) / spacing
            } else {
                (at(r + 1) - at(r - 1)) / (2.0 * spacing)
            };
        }
    }
    out
}

/// The individual contributions to the moisture residual, each in mm/h.
///
/// `R = -tendency - advection + et - precip`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTerms {
    pub shape: GridShape,
    pub tendency: Vec<f64>,
    pub advection: Vec<f64>,
    pub et: Vec<f64>,
    pub precip: Vec<f64>,
}

impl ResidualTerms {
    /// Per-pixel residual.
    pub fn residual(&self) -> Vec<f64> {
        let mut r = self.precip_free();
        for (v, p) in r.iter_mut().zip(&self.precip) {
            *v -= p;
        }
        r
    }

    /// `et - tendency - advection`: the precipitation the humidity budget implies.
    pub fn precip_free(&self) -> Vec<f64> {
        self.tendency
            .iter()
            .zip(&self.advection)
            .zip(&self.et)
            .map(|((t, a), e)| -t - a + e)
            .collect()
    }

    pub fn into_field(self) -> ResidualField {
        ResidualField::from_values(self.shape, self.residual())
    }
}

/// Per-pixel residual with its frame-level reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    pub shape: GridShape,
    pub values: Vec<f64>,
    pub mean_abs: f64,
    pub rms: f64,
    /// Filled in by [`consistency_score`].
    pub score: Option<f64>,
}

impl ResidualField {
    pub fn from_values(shape: GridShape, values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / n;
        let rms = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        Self {
            shape,
            values,
            mean_abs,
            rms,
            score: None,
        }
    }

    pub fn aggregate(&self, rule: ResidualAggregation) -> f64 {
        match rule {
            ResidualAggregation::MeanAbs => self.mean_abs,
            ResidualAggregation::Rms => self.rms,
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Decomposed moisture residual at the step ending in `meteo`.
///
/// Spatial derivatives are taken on `q_curr`. ET comes from the Makkink
/// equation on `meteo`'s temperature and radiation.
pub fn moisture_residual_terms(
    q_prev: &[f32],
    q_curr: &[f32],
    meteo: &MeteoStack,
    precip: &PrecipFrame,
    cfg: &ResidualConfig,
) -> Result<ResidualTerms> {
    cfg.validate()?;
    let shape = meteo.shape();
    let n = shape.pixels();
    if precip.shape() != shape || q_prev.len() != n || q_curr.len() != n {
        return Err(Error::Shape(format!(
            "residual inputs must share grid {}x{}",
            shape.height, shape.width
        )));
    }
    let (h, w) = (shape.height, shape.width);
    let conv = cfg.humidity_to_mm_per_hour();
    let dt = cfg.dt_minutes * 60.0;
    let q = to_f64(q_curr);
    let dqdx = ddx(&q, h, w, cfg.dx_km * 1000.0);
    let dqdy = ddy(&q, h, w, cfg.dy_km * 1000.0);
    let (u10, v10) = (meteo.field(MeteoField::U10), meteo.field(MeteoField::V10));
    let (u100, v100) = (meteo.field(MeteoField::U100), meteo.field(MeteoField::V100));
    let temp = meteo.field(MeteoField::Temp);
    let r_s = meteo.field(MeteoField::Rs);

    let mut tendency = Vec::with_capacity(n);
    let mut advection = Vec::with_capacity(n);
    let mut et = Vec::with_capacity(n);
    for i in 0..n {
        tendency.push(conv * (q_curr[i] as f64 - q_prev[i] as f64) / dt);
        let adv = u10[i] as f64 * dqdx[i]
            + v10[i] as f64 * dqdy[i]
            + u100[i] as f64 * dqdx[i]
            + v100[i] as f64 * dqdy[i];
        advection.push(conv * adv);
        et.push(makkink_coefficient(temp[i] as f64, cfg.gamma, cfg.lambda_v) * r_s[i] as f64);
    }
    Ok(ResidualTerms {
        shape,
        tendency,
        advection,
        et,
        precip: to_f64(precip.values()),
    })
}

/// Per-pixel residual field (score left unset).
pub fn moisture_residual(
    q_prev: &[f32],
    q_curr: &[f32],
    meteo: &MeteoStack,
    precip: &PrecipFrame,
    cfg: &ResidualConfig,
) -> Result<ResidualField> {
    Ok(moisture_residual_terms(q_prev, q_curr, meteo, precip, cfg)?.into_field())
}

/// `eta = exp(-lambda * aggregate(|R|))`, stored into the field and returned.
pub fn consistency_score(res: &mut ResidualField, cfg: &ConsistencyConfig) -> f64 {
    let eta = score_from_scalar(res.aggregate(cfg.aggregation), cfg.lambda_sharpness);
    res.score = Some(eta);
    eta
}

pub fn score_from_scalar(scalar: f64, lambda: f64) -> f64 {
    (-lambda * scalar).exp()
}

fn find_stack(meteo: &[MeteoStack], t: i64) -> Result<&MeteoStack> {
    meteo
        .iter()
        .find(|m| m.timestamp() == t)
        .ok_or(Error::MissingTimestep(t))
}

/// Residual fields for every frame of `pred`, matched to meteo stacks by timestamp.
pub fn sequence_residuals(
    pred: &PrecipSequence,
    meteo: &[MeteoStack],
    rcfg: &ResidualConfig,
) -> Result<Vec<ResidualField>> {
    let step = pred.step_minutes() as i64;
    pred.frames()
        .iter()
        .map(|frame| {
            let cur = find_stack(meteo, frame.timestamp())?;
            let prev = find_stack(meteo, frame.timestamp() - step)?;
            moisture_residual(
                prev.field(MeteoField::Q),
                cur.field(MeteoField::Q),
                cur,
                frame,
                rcfg,
            )
        })
        .collect()
}

/// Per-frame consistency scores of a predicted sequence.
///
/// With `physics_enabled = false` every score is the neutral value 1.
pub fn sequence_scores(
    pred: &PrecipSequence,
    meteo: &[MeteoStack],
    rcfg: &ResidualConfig,
    ccfg: &ConsistencyConfig,
    physics_enabled: bool,
) -> Result<Vec<f64>> {
    if !physics_enabled {
        return Ok(vec![1.0; pred.len()]);
    }
    Ok(sequence_residuals(pred, meteo, rcfg)?
        .iter_mut()
        .map(|r| consistency_score(r, ccfg))
        .collect())
}

/// The precipitation implied by the humidity budget at each frame time
/// (`et - tendency - advection`); the residual of a frame `P` is this minus `P`.
pub fn implied_precip(
    times: &[i64],
    step_minutes: i64,
    meteo: &[MeteoStack],
    rcfg: &ResidualConfig,
) -> Result<Vec<Vec<f64>>> {
    times
        .iter()
        .map(|&t| {
            let cur = find_stack(meteo, t)?;
            let prev = find_stack(meteo, t - step_minutes)?;
            let zero = PrecipFrame::zeros(cur.shape(), t)?;
            let terms = moisture_residual_terms(
                prev.field(MeteoField::Q),
                cur.field(MeteoField::Q),
                cur,
                &zero,
                rcfg,
            )?;
            Ok(terms.precip_free())
        })
        .collect()
}
