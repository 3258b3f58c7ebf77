//! Reconstruction of gridded half-hourly meteorology from sparse hourly
//! station data: natural cubic splines in time, ordinary kriging in space.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, MeteoField, MeteoStack, StationObservation};
use crate::linalg::{solve_dense, solve_tridiagonal};
use crate::physics::{dew_from_specific_humidity, specific_humidity_from_dew, STANDARD_PRESSURE_KPA};

/// Natural cubic spline through `(t, value)` knots.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(knots: &[(f64, f64)]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "cubic interpolation needs >= 2 knots, got {}",
                knots.len()
            )));
        }
        for (i, w) in knots.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::validation("knot time", i + 1, "knot times must strictly increase"));
            }
        }
        let t: Vec<f64> = knots.iter().map(|k| k.0).collect();
        let y: Vec<f64> = knots.iter().map(|k| k.1).collect();
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut lower = vec![0.0; k];
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                lower[j] = h0;
                diag[j] = 2.0 * (h0 + h1);
                upper[j] = h1;
                rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            let inner = solve_tridiagonal(&lower, &diag, &upper, &rhs);
            m[1..n - 1].copy_from_slice(&inner);
        }
        Ok(Self { t, y, m })
    }

    pub fn eval(&self, q: f64) -> Result<f64> {
        let (first, last) = (self.t[0], self.t[self.t.len() - 1]);
        if !(q >= first && q <= last) {
            return Err(Error::Extrapolation { query: q, first, last });
        }
        // exact knot hit
        if let Ok(i) = self.t.binary_search_by(|v| v.partial_cmp(&q).unwrap()) {
            return Ok(self.y[i]);
        }
        let i = self.t.partition_point(|v| *v <= q) - 1;
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t1 - q, q - t0);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        Ok(m0 * a.powi(3) / (6.0 * h)
            + m1 * b.powi(3) / (6.0 * h)
            + (self.y[i] / h - m0 * h / 6.0) * a
            + (self.y[i + 1] / h - m1 * h / 6.0) * b)
    }
}

/// Evaluates a natural cubic spline through `series` at `query_times`.
pub fn cubic_time_interp(series: &[(i64, f64)], query_times: &[i64]) -> Result<Vec<f64>> {
    let knots: Vec<(f64, f64)> = series.iter().map(|(t, v)| (*t as f64, *v)).collect();
    let spline = NaturalSpline::new(&knots)?;
    query_times.iter().map(|q| spline.eval(*q as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramKind {
    Spherical,
    Exponential,
    Gaussian,
}

/// Semivariance model. `gamma(0) = nugget`, rising monotonically to `sill`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub kind: VariogramKind,
    pub nugget: f64,
    pub sill: f64,
    pub range_km: f64,
}

impl VariogramModel {
    pub fn new(kind: VariogramKind, nugget: f64, sill: f64, range_km: f64) -> Result<Self> {
        if !(nugget >= 0.0 && sill >= nugget && range_km > 0.0 && sill.is_finite() && range_km.is_finite()) {
            return Err(Error::Config(format!(
                "invalid variogram nugget={nugget} sill={sill} range={range_km}"
            )));
        }
        Ok(Self {
            kind,
            nugget,
            sill,
            range_km,
        })
    }

    /// Unit-sill shape function, 0 at the origin and approaching 1.
    fn shape(kind: VariogramKind, h: f64, range: f64) -> f64 {
        let r = h / range;
        match kind {
            VariogramKind::Spherical => {
                if r >= 1.0 {
                    1.0
                } else {
                    1.5 * r - 0.5 * r.powi(3)
                }
            }
            VariogramKind::Exponential => 1.0 - (-3.0 * r).exp(),
            VariogramKind::Gaussian => 1.0 - (-3.0 * r * r).exp(),
        }
    }

    pub fn gamma(&self, h: f64) -> f64 {
        self.nugget + (self.sill - self.nugget) * Self::shape(self.kind, h, self.range_km)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariogramChoice {
    AutoFit,
    Fixed(VariogramModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrigingConfig {
    pub variogram: VariogramChoice,
    pub max_neighbors: usize,
    pub fit_bins: usize,
    /// Stations may sit this far outside the grid box.
    pub margin_km: f64,
    pub pixel_size_km: f64,
}

impl Default for KrigingConfig {
    fn default() -> Self {
        Self {
            variogram: VariogramChoice::AutoFit,
            max_neighbors: 16,
            fit_bins: 12,
            margin_km: 50.0,
            pixel_size_km: 1.0,
        }
    }
}

impl KrigingConfig {
    fn validate(&self) -> Result<()> {
        if self.max_neighbors < 1 {
            return Err(Error::Config("max_neighbors must be >= 1".into()));
        }
        if self.fit_bins < 4 {
            return Err(Error::Config("fit_bins must be >= 4".into()));
        }
        Ok(())
    }
}

/// Empirical semivariogram: `(mean lag, semivariance, pair count)` per nonempty bin.
pub fn empirical_variogram(points: &[(f64, f64, f64)], bins: usize) -> Vec<(f64, f64, usize)> {
    let mut max_d: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            max_d = max_d.max(dist(points[i], points[j]));
        }
    }
    let cutoff = max_d / 2.0;
    if cutoff <= 0.0 {
        return Vec::new();
    }
    let width = cutoff / bins as f64;
    let mut acc = vec![(0.0f64, 0.0f64, 0usize); bins];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist(points[i], points[j]);
            if d > cutoff {
                continue;
            }
            let b = ((d / width) as usize).min(bins - 1);
            let dz = points[i].2 - points[j].2;
            acc[b].0 += d;
            acc[b].1 += 0.5 * dz * dz;
            acc[b].2 += 1;
        }
    }
    acc.into_iter()
        .filter(|a| a.2 > 0)
        .map(|(d, g, n)| (d / n as f64, g / n as f64, n))
        .collect()
}

fn dist(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Weighted least-squares fit of one variogram family to station data.
///
/// The range is scanned over a fixed log-spaced grid; for each candidate range
/// the nugget and partial sill follow from a non-negative linear solve.
pub fn fit_variogram_kind(
    obs: &[StationObservation],
    kind: VariogramKind,
    bins: usize,
) -> Result<VariogramModel> {
    if obs.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "variogram fit needs >= 4 stations, got {}",
            obs.len()
        )));
    }
    let first = &obs[0];
    if obs
        .iter()
        .any(|o| o.variable != first.variable || o.timestamp != first.timestamp)
    {
        return Err(Error::validation(
            "observations",
            0,
            "variogram fit needs a single variable at a single timestamp",
        ));
    }
    let mean = obs.iter().map(|o| o.value).sum::<f64>() / obs.len() as f64;
    let var = obs.iter().map(|o| (o.value - mean).powi(2)).sum::<f64>() / obs.len() as f64;
    if var <= f64::EPSILON * mean.abs().max(1.0) {
        return Err(Error::DegenerateField { value: mean });
    }
    let points: Vec<(f64, f64, f64)> = obs.iter().map(|o| (o.x_km, o.y_km, o.value)).collect();
    let emp = empirical_variogram(&points, bins);
    if emp.len() < 2 {
        return Err(Error::InsufficientData("too few distinct station lags".into()));
    }
    let max_lag = emp.iter().map(|e| e.0).fold(0.0, f64::max);
    let min_lag = emp.iter().map(|e| e.0).fold(f64::INFINITY, f64::min).max(1e-6);

    let candidates = 400;
    let (lo, hi) = ((min_lag * 0.5).ln(), (max_lag * 4.0).ln());
    let mut best: Option<(f64, VariogramModel)> = None;
    for k in 0..candidates {
        let range = (lo + (hi - lo) * k as f64 / (candidates - 1) as f64).exp();
        // gamma = nugget + psill * s(h)
        let (mut sw, mut ss, mut sss, mut sg, mut ssg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(h, g, n) in &emp {
            let w = n as f64;
            let s = VariogramModel::shape(kind, h, range);
            sw += w;
            ss += w * s;
            sss += w * s * s;
            sg += w * g;
            ssg += w * s * g;
        }
        let det = sw * sss - ss * ss;
        let (mut nugget, mut psill) = if det.abs() > 1e-300 {
            ((sss * sg - ss * ssg) / det, (sw * ssg - ss * sg) / det)
        } else {
            (0.0, sg / sw)
        };
        if nugget < 0.0 {
            nugget = 0.0;
            psill = if sss > 0.0 { ssg / sss } else { 0.0 };
        }
        if psill < 0.0 {
            psill = 0.0;
            nugget = sg / sw;
        }
        let sse: f64 = emp
            .iter()
            .map(|&(h, g, n)| {
                let r = nugget + psill * VariogramModel::shape(kind, h, range) - g;
                n as f64 * r * r
            })
            .sum();
        if best.as_ref().is_none_or(|b| sse < b.0) {
            best = Some((sse, VariogramModel::new(kind, nugget, nugget + psill, range)?));
        }
    }
    Ok(best.expect("candidate grid is nonempty").1)
}

/// Fits the default (spherical) family.
pub fn fit_variogram(obs: &[StationObservation]) -> Result<VariogramModel> {
    fit_variogram_kind(obs, VariogramKind::Spherical, KrigingConfig::default().fit_bins)
}

/// A station reduced to position and value, with coincident stations merged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

/// Merges stations at identical positions by averaging their values.
pub fn dedup_sites(obs: &[StationObservation]) -> Vec<Site> {
    let mut groups: BTreeMap<(u64, u64), (f64, f64, f64, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for o in obs {
        let key = (o.x_km.to_bits(), o.y_km.to_bits());
        let e = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (o.x_km, o.y_km, 0.0, 0)
        });
        e.2 += o.value;
        e.3 += 1;
    }
    if order.len() < obs.len() {
        warn!(
            "merged {} stations sharing a position into their mean",
            obs.len() - order.len()
        );
    }
    order
        .into_iter()
        .map(|k| {
            let (x, y, s, n) = groups[&k];
            Site {
                x,
                y,
                value: s / n as f64,
            }
        })
        .collect()
}

/// Ordinary-kriging weights for a target point over its nearest sites.
///
/// Returns `(site index, weight)` pairs; weights sum to one.
pub fn kriging_weights(
    sites: &[Site],
    x: f64,
    y: f64,
    vario: &VariogramModel,
    max_neighbors: usize,
) -> Result<Vec<(usize, f64)>> {
    if sites.is_empty() {
        return Err(Error::InsufficientData("kriging needs >= 1 station".into()));
    }
    let mut idx: Vec<(f64, usize)> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (((s.x - x).powi(2) + (s.y - y).powi(2)).sqrt(), i))
        .collect();
    idx.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    idx.truncate(max_neighbors.max(1));
    let n = idx.len();
    if n == 1 {
        return Ok(vec![(idx[0].1, 1.0)]);
    }
    let dim = n + 1;
    let mut a = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    for (r, &(_, i)) in idx.iter().enumerate() {
        for (c, &(_, j)) in idx.iter().enumerate() {
            let d = ((sites[i].x - sites[j].x).powi(2) + (sites[i].y - sites[j].y).powi(2)).sqrt();
            a[r * dim + c] = vario.gamma(d);
        }
        a[r * dim + n] = 1.0;
        a[n * dim + r] = 1.0;
        b[r] = vario.gamma(idx[r].0);
    }
    b[n] = 1.0;
    let sol = solve_dense(a, b, dim)?;
    Ok(idx.iter().zip(&sol).map(|(&(_, i), &w)| (i, w)).collect())
}

/// Result of kriging one variable onto the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigedField {
    pub shape: GridShape,
    pub values: Vec<f64>,
    pub variogram: Option<VariogramModel>,
}

fn fallback_variogram(shape: GridShape, pixel: f64) -> VariogramModel {
    let diag = ((shape.height as f64).hypot(shape.width as f64) * pixel).max(pixel);
    VariogramModel {
        kind: VariogramKind::Spherical,
        nugget: 0.0,
        sill: 1.0,
        range_km: diag,
    }
}

/// Ordinary kriging of one variable at one timestamp onto every pixel centre.
///
/// Pixel `(row, col)` sits at `(x, y) = (col, row) * pixel_size_km`.
pub fn krige_to_grid(obs: &[StationObservation], shape: GridShape, cfg: &KrigingConfig) -> Result<KrigedField> {
    cfg.validate()?;
    if obs.is_empty() {
        return Err(Error::InsufficientData("kriging needs >= 1 station".into()));
    }
    let first = &obs[0];
    for (i, o) in obs.iter().enumerate() {
        if o.variable != first.variable || o.timestamp != first.timestamp {
            return Err(Error::validation(
                "observations",
                i,
                "all observations must share variable and timestamp",
            ));
        }
        o.validate(shape, cfg.pixel_size_km, cfg.margin_km)?;
    }
    let sites = dedup_sites(obs);
    if sites.len() == 1 {
        return Ok(KrigedField {
            shape,
            values: vec![sites[0].value; shape.pixels()],
            variogram: None,
        });
    }
    let vario = match cfg.variogram {
        VariogramChoice::Fixed(v) => v,
        VariogramChoice::AutoFit => {
            let merged: Vec<StationObservation> = sites
                .iter()
                .map(|s| StationObservation {
                    station_id: String::new(),
                    x_km: s.x,
                    y_km: s.y,
                    timestamp: first.timestamp,
                    variable: first.variable.clone(),
                    value: s.value,
                })
                .collect();
            match fit_variogram_kind(&merged, VariogramKind::Spherical, cfg.fit_bins) {
                Ok(v) => v,
                Err(Error::DegenerateField { value }) => {
                    return Ok(KrigedField {
                        shape,
                        values: vec![value; shape.pixels()],
                        variogram: None,
                    })
                }
                Err(Error::InsufficientData(_)) => fallback_variogram(shape, cfg.pixel_size_km),
                Err(e) => return Err(e),
            }
        }
    };
    let values = (0..shape.pixels())
        .map(|p| {
            let x = (p % shape.width) as f64 * cfg.pixel_size_km;
            let y = (p / shape.width) as f64 * cfg.pixel_size_km;
            let w = kriging_weights(&sites, x, y, &vario, cfg.max_neighbors)?;
            Ok(w.iter().map(|(i, wt)| wt * sites[*i].value).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(KrigedField {
        shape,
        values,
        variogram: Some(vario),
    })
}

/// Observations for one variable, keyed by variable name.
pub type ObservationsByVariable = HashMap<String, Vec<StationObservation>>;

fn interp_variable(obs: &[StationObservation], times: &[i64]) -> Result<HashMap<i64, Vec<StationObservation>>> {
    let mut by_station: BTreeMap<&str, Vec<&StationObservation>> = BTreeMap::new();
    for o in obs {
        by_station.entry(o.station_id.as_str()).or_default().push(o);
    }
    let mut out: HashMap<i64, Vec<StationObservation>> = HashMap::new();
    for (id, mut series) in by_station {
        series.sort_by_key(|o| o.timestamp);
        let knots: Vec<(i64, f64)> = series.iter().map(|o| (o.timestamp, o.value)).collect();
        let vals = cubic_time_interp(&knots, times)?;
        let (x, y, var) = (series[0].x_km, series[0].y_km, series[0].variable.clone());
        for (t, v) in times.iter().zip(vals) {
            out.entry(*t).or_default().push(StationObservation {
                station_id: id.to_string(),
                x_km: x,
                y_km: y,
                timestamp: *t,
                variable: var.clone(),
                value: v,
            });
        }
    }
    Ok(out)
}

/// Builds one [`MeteoStack`] per requested time from hourly station series.
///
/// Each station series is first interpolated in time, then every variable is
/// kriged per target time. Specific humidity is derived from dew point when
/// absent (and dew point from humidity when that is absent).
pub fn build_meteo_stack(
    obs_by_variable: &ObservationsByVariable,
    times: &[i64],
    shape: GridShape,
    cfg: &KrigingConfig,
) -> Result<Vec<MeteoStack>> {
    for name in ["u10", "v10", "u100", "v100", "r_s", "temp"] {
        if !obs_by_variable.contains_key(name) {
            return Err(Error::MissingVariable(name.into()));
        }
    }
    if !obs_by_variable.contains_key("q") && !obs_by_variable.contains_key("dew") {
        return Err(Error::MissingVariable("q (or dew)".into()));
    }
    let mut names: Vec<&String> = obs_by_variable
        .keys()
        .filter(|k| MeteoField::from_name(k).is_some())
        .collect();
    names.sort();

    let interpolated: Vec<(String, HashMap<i64, Vec<StationObservation>>)> = names
        .iter()
        .map(|n| Ok(((*n).clone(), interp_variable(&obs_by_variable[*n], times)?)))
        .collect::<Result<_>>()?;

    times
        .par_iter()
        .map(|t| {
            let mut grids: HashMap<&str, Vec<f64>> = HashMap::new();
            for (name, per_time) in &interpolated {
                let field = krige_to_grid(&per_time[t], shape, cfg)?;
                grids.insert(name.as_str(), field.values);
            }
            let temp = grids["temp"].clone();
            let q = match grids.get("q") {
                Some(q) => q.clone(),
                None => grids["dew"]
                    .iter()
                    .map(|d| specific_humidity_from_dew(*d, STANDARD_PRESSURE_KPA))
                    .collect(),
            };
            let dew = match grids.get("dew") {
                Some(d) => d.clone(),
                None => q
                    .iter()
                    .map(|v| dew_from_specific_humidity(v.max(1e-9), STANDARD_PRESSURE_KPA))
                    .collect(),
            };
            let fields = MeteoField::ALL.map(|f| {
                let src: Vec<f64> = match f {
                    MeteoField::Q => q.iter().map(|v| v.clamp(0.0, 0.1)).collect(),
                    MeteoField::Rs => grids["r_s"].iter().map(|v| v.max(0.0)).collect(),
                    MeteoField::Dew => dew.iter().zip(&temp).map(|(d, t)| d.min(*t)).collect(),
                    MeteoField::Temp => temp.clone(),
                    other => grids[other.name()].clone(),
                };
                src.into_iter().map(|v| v as f32).collect::<Vec<f32>>()
            });
            let fields = fix_dew_after_rounding(fields);
            MeteoStack::new(shape, *t, cfg.pixel_size_km as f32, fields)
        })
        .collect()
}

fn fix_dew_after_rounding(mut fields: [Vec<f32>; 8]) -> [Vec<f32>; 8] {
    let temp = fields[MeteoField::Temp.index()].clone();
    for (d, t) in fields[MeteoField::Dew.index()].iter_mut().zip(temp) {
        *d = d.min(t);
    }
    fields
}

/// Groups a flat observation list by variable name.
pub fn group_by_variable(obs: Vec<StationObservation>) -> ObservationsByVariable {
    let mut out: ObservationsByVariable = HashMap::new();
    for o in obs {
        out.entry(o.variable.clone()).or_default().push(o);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn station(id: &str, x: f64, y: f64, v: f64) -> StationObservation {
        StationObservation {
            station_id: id.into(),
            x_km: x,
            y_km: y,
            timestamp: 0,
            variable: "temp".into(),
            value: v,
        }
    }

    #[test]
    fn spline_reproduces_knots() {
        let v = cubic_time_interp(&[(0, 1.0), (60, 3.0), (120, 5.0)], &[60]).unwrap();
        assert_eq!(v, vec![3.0]);
    }

    #[test]
    fn spline_reproduces_linear_data() {
        let knots: Vec<(i64, f64)> = (0..6).map(|i| (i * 60, 2.0 - 0.25 * i as f64)).collect();
        let q: Vec<i64> = (0..=300).step_by(7).collect();
        let v = cubic_time_interp(&knots, &q).unwrap();
        for (t, val) in q.iter().zip(v) {
            let exact = 2.0 - 0.25 * *t as f64 / 60.0;
            assert!((val - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn three_knot_natural_spline_by_hand() {
        // Natural spline through (0,0),(60,1),(120,0): M0 = M2 = 0 and
        // 2 (h0 + h1) M1 = 6 ((y2 - y1)/h1 - (y1 - y0)/h0)  =>  240 M1 = -0.2
        let h = 60.0f64;
        let m1 = 6.0 * ((0.0 - 1.0) / h - (1.0 - 0.0) / h) / (2.0 * (h + h));
        // S(30) on [0, 60] with a = 30, b = 30
        let s30 = m1 * 30f64.powi(3) / (6.0 * h) + (0.0 / h) * 30.0 + (1.0 / h - m1 * h / 6.0) * 30.0;
        assert!((s30 - 0.6875).abs() < 1e-12);
        let v = cubic_time_interp(&[(0, 0.0), (60, 1.0), (120, 0.0)], &[30]).unwrap();
        assert!((v[0] - 0.6875).abs() < 1e-12);
    }

    #[test]
    fn spline_errors() {
        assert!(matches!(
            cubic_time_interp(&[(0, 1.0)], &[0]),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            cubic_time_interp(&[(0, 1.0), (60, 2.0)], &[90]),
            Err(Error::Extrapolation { .. })
        ));
    }

    #[test]
    fn variogram_invariants() {
        for kind in [VariogramKind::Spherical, VariogramKind::Exponential, VariogramKind::Gaussian] {
            let v = VariogramModel::new(kind, 0.3, 2.0, 40.0).unwrap();
            assert_eq!(v.gamma(0.0), 0.3);
            let mut prev = v.gamma(0.0);
            for k in 1..500 {
                let g = v.gamma(k as f64 * 0.5);
                assert!(g >= prev);
                prev = g;
            }
            assert!((v.gamma(1e4) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_errors() {
        let same: Vec<_> = (0..6).map(|i| station(&i.to_string(), i as f64, 0.0, 4.0)).collect();
        assert!(matches!(fit_variogram(&same), Err(Error::DegenerateField { .. })));
        let three: Vec<_> = (0..3).map(|i| station(&i.to_string(), i as f64, 0.0, i as f64)).collect();
        assert!(matches!(fit_variogram(&three), Err(Error::InsufficientData(_))));
    }

    fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
                if i == j {
                    l[i * n + i] = (a[i * n + i] - s).max(1e-12).sqrt();
                } else {
                    l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
                }
            }
        }
        l
    }

    #[test]
    fn fit_recovers_generating_spherical_model() {
        // Oracle: one Gaussian random field realisation with spherical
        // covariance C(h) = 2 - gamma(h), sampled at 200 stations.
        let truth = VariogramModel::new(VariogramKind::Spherical, 0.0, 2.0, 50.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)))
            .collect();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                cov[i * n + j] = truth.sill - truth.gamma(d);
            }
        }
        let l = cholesky(&cov, n);
        let z: Vec<f64> = (0..n)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let obs: Vec<_> = (0..n)
            .map(|i| {
                let v: f64 = (0..=i).map(|k| l[i * n + k] * z[k]).sum();
                station(&i.to_string(), pts[i].0, pts[i].1, v)
            })
            .collect();
        let fit = fit_variogram(&obs).unwrap();
        assert!((fit.sill - 2.0).abs() <= 0.2 * 2.0, "sill {}", fit.sill);
        assert!((fit.range_km - 50.0).abs() <= 0.3 * 50.0, "range {}", fit.range_km);
        assert!(fit.nugget >= 0.0 && fit.sill >= fit.nugget);
    }

    #[test]
    fn fit_is_deterministic() {
        let obs: Vec<_> = (0..30)
            .map(|i| station(&i.to_string(), (i * 7 % 13) as f64, (i * 5 % 11) as f64, ((i * 3) % 7) as f64))
            .collect();
        assert_eq!(fit_variogram(&obs).unwrap(), fit_variogram(&obs).unwrap());
    }

    #[test]
    fn single_station_is_constant() {
        let shape = GridShape::plane(4, 4).unwrap();
        let f = krige_to_grid(&[station("a", 1.0, 2.0, 5.0)], shape, &Default::default()).unwrap();
        assert!(f.values.iter().all(|v| *v == 5.0));
    }

    #[test]
    fn symmetric_pair_gives_midpoint() {
        let shape = GridShape::plane(1, 5).unwrap();
        let cfg = KrigingConfig {
            variogram: VariogramChoice::Fixed(VariogramModel::new(VariogramKind::Exponential, 0.0, 1.0, 10.0).unwrap()),
            ..Default::default()
        };
        let obs = [station("a", 0.0, 0.0, 0.0), station("b", 4.0, 0.0, 10.0)];
        let f = krige_to_grid(&obs, shape, &cfg).unwrap();
        assert!((f.values[2] - 5.0).abs() < 1e-12);
        assert!(f.values[0].abs() < 1e-9 && (f.values[4] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn square_corners_center_by_hand() {
        // Four stations at the corners of a 10 km square; target at the centre.
        // Hand-assembled 5x5 ordinary kriging system (spherical, sill 1, range 100).
        let v = VariogramModel::new(VariogramKind::Spherical, 0.0, 1.0, 100.0).unwrap();
        let sph = |h: f64| if h >= 100.0 { 1.0 } else { 1.5 * h / 100.0 - 0.5 * (h / 100.0).powi(3) };
        let side = 10.0f64;
        let diag = side * 2f64.sqrt();
        let centre = diag / 2.0;
        let (g_s, g_d, g_c) = (sph(side), sph(diag), sph(centre));
        // Symmetry: all four weights equal 1/4, mu from row 0:
        // 0*w + g_s*w + g_d*w + g_s*w + mu = g_c  with w = 1/4.
        let mu = g_c - 0.25 * (2.0 * g_s + g_d);
        let corners = [(0.0, 0.0, 1.0), (10.0, 0.0, 3.0), (0.0, 10.0, 6.0), (10.0, 10.0, 2.0)];
        let expected = corners.iter().map(|c| 0.25 * c.2).sum::<f64>();
        let sites: Vec<Site> = corners.iter().map(|&(x, y, value)| Site { x, y, value }).collect();
        let w = kriging_weights(&sites, 5.0, 5.0, &v, 16).unwrap();
        let est: f64 = w.iter().map(|(i, wt)| wt * sites[*i].value).sum();
        assert!((est - expected).abs() < 1e-12);
        for (_, wt) in &w {
            assert!((wt - 0.25).abs() < 1e-12);
        }
        // the Lagrange multiplier satisfies the first row
        let row0 = 0.25 * (0.0 + g_s + g_s + g_d) + mu;
        assert!((row0 - g_c).abs() < 1e-15);
    }

    #[test]
    fn kriging_exact_and_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = GridShape::plane(8, 8).unwrap();
        let obs: Vec<_> = (0..10)
            .map(|i| {
                station(
                    &i.to_string(),
                    rng.random_range(0..8) as f64,
                    rng.random_range(0..8) as f64,
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect();
        let f = krige_to_grid(&obs, shape, &Default::default()).unwrap();
        let sites = dedup_sites(&obs);
        for s in &sites {
            let p = s.y as usize * 8 + s.x as usize;
            assert!((f.values[p] - s.value).abs() <= 1e-6 * s.value.abs().max(1.0));
        }
        let vario = f.variogram.unwrap();
        for p in 0..64 {
            let w = kriging_weights(&sites, (p % 8) as f64, (p / 8) as f64, &vario, 16).unwrap();
            assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicate_positions_are_merged() {
        let shape = GridShape::plane(3, 3).unwrap();
        let obs = [
            station("a", 0.0, 0.0, 1.0),
            station("b", 0.0, 0.0, 3.0),
            station("c", 2.0, 2.0, 6.0),
        ];
        let f = krige_to_grid(&obs, shape, &Default::default()).unwrap();
        assert!((f.values[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_field_kriges_to_constant() {
        let shape = GridShape::plane(5, 5).unwrap();
        let obs: Vec<_> = (0..7).map(|i| station(&i.to_string(), i as f64 * 0.6, (i % 3) as f64, 2.5)).collect();
        for choice in [
            VariogramChoice::AutoFit,
            VariogramChoice::Fixed(VariogramModel::new(VariogramKind::Gaussian, 0.1, 1.0, 3.0).unwrap()),
        ] {
            let cfg = KrigingConfig {
                variogram: choice,
                ..Default::default()
            };
            let f = krige_to_grid(&obs, shape, &cfg).unwrap();
            assert!(f.values.iter().all(|v| (v - 2.5).abs() < 1e-9));
        }
    }

    fn hourly_obs(var: &str, value: impl Fn(usize, i64) -> f64) -> Vec<StationObservation> {
        let mut out = Vec::new();
        for s in 0..5 {
            for t in [0i64, 60, 120] {
                out.push(StationObservation {
                    station_id: format!("s{s}"),
                    x_km: (s % 3) as f64 * 2.0,
                    y_km: (s / 3) as f64 * 3.0,
                    timestamp: t,
                    variable: var.into(),
                    value: value(s, t),
                });
            }
        }
        out
    }

    #[test]
    fn meteo_stack_half_hourly_and_constant() {
        let mut by = ObservationsByVariable::new();
        for (v, val) in [("u10", 2.0), ("v10", -1.0), ("u100", 4.0), ("v100", 0.5), ("r_s", 300.0), ("temp", 20.0), ("dew", 20.0)] {
            by.insert(v.into(), hourly_obs(v, |_, _| val));
        }
        let shape = GridShape::plane(4, 4).unwrap();
        let stacks = build_meteo_stack(&by, &[0, 30, 60, 90, 120], shape, &Default::default()).unwrap();
        assert_eq!(stacks.iter().map(|s| s.timestamp()).collect::<Vec<_>>(), vec![0, 30, 60, 90, 120]);
        for s in &stacks {
            assert!(s.field(MeteoField::U10).iter().all(|v| *v == 2.0));
            assert!(s.field(MeteoField::Rs).iter().all(|v| *v == 300.0));
        }
        // dew = temp = 20 °C: q from the Magnus formula at 101.325 kPa
        let es = 0.6108 * (17.27f64 * 20.0 / 257.3).exp();
        let q_hand = 0.622 * es / (101.325 - 0.378 * es);
        assert!((es - 2.338).abs() < 1e-3);
        assert!((q_hand - 0.014479).abs() < 1e-5);
        let q = stacks[2].field(MeteoField::Q)[0] as f64;
        assert!((q - q_hand).abs() < 1e-7, "{q}");
    }

    #[test]
    fn missing_variable_is_named() {
        let mut by = ObservationsByVariable::new();
        by.insert("temp".into(), hourly_obs("temp", |_, _| 1.0));
        let err = build_meteo_stack(&by, &[0], GridShape::plane(2, 2).unwrap(), &Default::default()).unwrap_err();
        assert!(matches!(err, Error::MissingVariable(v) if v == "u10"));
    }
}
