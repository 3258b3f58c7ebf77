//! Forecast verification: pixel errors, categorical scores, fractions skill
//! score and the extreme-event precision/recall sweep over catchments.
//!
//! Ratios whose denominator is zero are reported as `None` rather than 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, PrecipSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub csi_far_thresholds: Vec<f64>,
    pub fss_scales_km: Vec<f64>,
    pub fss_threshold: f64,
    /// mm per 3 h.
    pub extreme_threshold: f64,
    pub pr_sweep_start: f64,
    pub pr_sweep_end: f64,
    pub pr_sweep_step: f64,
    /// Pool every pixel of every frame (true) or average per-frame scores.
    pub pooled: bool,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            csi_far_thresholds: vec![1.0, 8.0],
            fss_scales_km: vec![1.0, 10.0, 20.0],
            fss_threshold: 1.0,
            extreme_threshold: 5.0,
            pr_sweep_start: 0.5,
            pr_sweep_end: 10.0,
            pr_sweep_step: 0.5,
            pooled: true,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<()> {
        let sorted_pos = |v: &[f64]| v.iter().all(|x| *x > 0.0) && v.windows(2).all(|w| w[0] < w[1]);
        if !sorted_pos(&self.csi_far_thresholds) || !sorted_pos(&self.fss_scales_km) {
            return Err(Error::Config("thresholds and scales must be positive and sorted".into()));
        }
        if !(self.fss_threshold > 0.0 && self.extreme_threshold > 0.0) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if !(self.pr_sweep_step > 0.0 && self.pr_sweep_start > 0.0 && self.pr_sweep_end >= self.pr_sweep_start) {
            return Err(Error::Config("invalid precision/recall sweep".into()));
        }
        Ok(())
    }

    pub fn pr_thresholds(&self) -> Vec<f64> {
        let n = ((self.pr_sweep_end - self.pr_sweep_start) / self.pr_sweep_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| self.pr_sweep_start + i as f64 * self.pr_sweep_step)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub mse: f64,
    pub mae: f64,
    pub pcc: Option<f64>,
}

fn check_same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} values, observation {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// MSE, MAE and Pearson correlation over flat value arrays.
pub fn pixel_metrics_flat(pred: &[f32], obs: &[f32]) -> Result<PixelMetrics> {
    check_same_len(pred, obs)?;
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    let (mut sp, mut so) = (0.0, 0.0);
    for (p, o) in pred.iter().zip(obs) {
        let (p, o) = (*p as f64, *o as f64);
        se += (p - o) * (p - o);
        ae += (p - o).abs();
        sp += p;
        so += o;
    }
    let (mp, mo) = (sp / n, so / n);
    let (mut cov, mut vp, mut vo) = (0.0, 0.0, 0.0);
    for (p, o) in pred.iter().zip(obs) {
        let (dp, d_o) = (*p as f64 - mp, *o as f64 - mo);
        cov += dp * d_o;
        vp += dp * dp;
        vo += d_o * d_o;
    }
    let pcc = if vp > 0.0 && vo > 0.0 {
        Some((cov / (vp.sqrt() * vo.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    };
    Ok(PixelMetrics {
        mse: se / n,
        mae: ae / n,
        pcc,
    })
}

fn check_sequences(pred: &PrecipSequence, obs: &PrecipSequence) -> Result<()> {
    if pred.shape() != obs.shape() || pred.len() != obs.len() {
        return Err(Error::Shape(format!(
            "prediction {}x{:?} vs observation {}x{:?}",
            pred.len(),
            pred.shape(),
            obs.len(),
            obs.shape()
        )));
    }
    Ok(())
}

pub fn pixel_metrics(pred: &PrecipSequence, obs: &PrecipSequence) -> Result<PixelMetrics> {
    check_sequences(pred, obs)?;
    pixel_metrics_flat(&pred.flat_values(), &obs.flat_values())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    pub fn csi(&self) -> Option<f64> {
        let d = self.hits + self.misses + self.false_alarms;
        (d > 0).then(|| self.hits as f64 / d as f64)
    }

    pub fn far(&self) -> Option<f64> {
        let d = self.hits + self.false_alarms;
        (d > 0).then(|| self.false_alarms as f64 / d as f64)
    }

    pub fn merge(self, o: ContingencyTable) -> ContingencyTable {
        ContingencyTable {
            hits: self.hits + o.hits,
            misses: self.misses + o.misses,
            false_alarms: self.false_alarms + o.false_alarms,
            correct_negatives: self.correct_negatives + o.correct_negatives,
        }
    }
}

/// Exceedance is `value >= threshold`.
pub fn contingency_flat(pred: &[f32], obs: &[f32], threshold: f64) -> Result<ContingencyTable> {
    check_same_len(pred, obs)?;
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("threshold {threshold} must be positive")));
    }
    let mut t = ContingencyTable::default();
    for (p, o) in pred.iter().zip(obs) {
        match (*p as f64 >= threshold, *o as f64 >= threshold) {
            (true, true) => t.hits += 1,
            (false, true) => t.misses += 1,
            (true, false) => t.false_alarms += 1,
            (false, false) => t.correct_negatives += 1,
        }
    }
    Ok(t)
}

pub fn contingency(pred: &PrecipSequence, obs: &PrecipSequence, threshold: f64) -> Result<ContingencyTable> {
    check_sequences(pred, obs)?;
    contingency_flat(&pred.flat_values(), &obs.flat_values(), threshold)
}

/// Odd neighbourhood width for a spatial scale (rounded, then bumped to odd, at least 1).
pub fn fss_window(scale_km: f64, pixel_size_km: f64) -> usize {
    let n = (scale_km / pixel_size_km).round().max(1.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Neighbourhood exceedance fractions of one field, zero-padded at the edges.
pub fn fraction_field(values: &[f32], h: usize, w: usize, threshold: f64, n: usize) -> Vec<f64> {
    // summed-area table over the binary field
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            let b = (values[r * w + c] as f64 >= threshold) as u32;
            sat[(r + 1) * (w + 1) + c + 1] =
                b + sat[r * (w + 1) + c + 1] + sat[(r + 1) * (w + 1) + c] - sat[r * (w + 1) + c];
        }
    }
    let half = n / 2;
    let area = (n * n) as f64;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(h));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(w));
            let s = sat[r1 * (w + 1) + c1] + sat[r0 * (w + 1) + c0] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0];
            out[r * w + c] = s as f64 / area;
        }
    }
    out
}

/// FSS numerator `sum (Pf - Po)^2` and denominator `sum Pf^2 + sum Po^2` for one frame.
pub fn fss_terms(pred: &[f32], obs: &[f32], h: usize, w: usize, threshold: f64, n: usize) -> (f64, f64) {
    let pf = fraction_field(pred, h, w, threshold, n);
    let po = fraction_field(obs, h, w, threshold, n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in pf.iter().zip(&po) {
        num += (a - b) * (a - b);
        den += a * a + b * b;
    }
    (num, den)
}

/// Fractions skill score pooled over every frame; `None` when both fields are dry.
pub fn fss(
    pred: &PrecipSequence,
    obs: &PrecipSequence,
    threshold: f64,
    scale_km: f64,
    pixel_size_km: f64,
) -> Result<Option<f64>> {
    check_sequences(pred, obs)?;
    if scale_km < pixel_size_km {
        return Err(Error::Config(format!(
            "FSS scale {scale_km} km is below the pixel size {pixel_size_km} km"
        )));
    }
    let s = pred.shape();
    let n = fss_window(scale_km, pixel_size_km);
    let (mut num, mut den) = (0.0, 0.0);
    for (p, o) in pred.frames().iter().zip(obs.frames()) {
        let (a, b) = fss_terms(p.values(), o.values(), s.height, s.width, threshold, n);
        num += a;
        den += b;
    }
    Ok((den > 0.0).then(|| 1.0 - num / den))
}

/// Boolean pixel mask identifying one catchment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchmentMask {
    pub catchment_id: String,
    pub shape: GridShape,
    pub mask: Vec<bool>,
}

impl CatchmentMask {
    pub fn new(catchment_id: impl Into<String>, shape: GridShape, mask: Vec<bool>) -> Result<Self> {
        let catchment_id = catchment_id.into();
        if mask.len() != shape.pixels() {
            return Err(Error::Mask(format!(
                "mask {catchment_id} has {} pixels, grid has {}",
                mask.len(),
                shape.pixels()
            )));
        }
        if !mask.iter().any(|b| *b) {
            return Err(Error::Mask(format!("mask {catchment_id} is empty")));
        }
        Ok(Self {
            catchment_id,
            shape,
            mask,
        })
    }

    /// Splits the grid into `rows x cols` rectangular blocks.
    pub fn blocks(shape: GridShape, rows: usize, cols: usize) -> Result<Vec<Self>> {
        if rows == 0 || cols == 0 || rows > shape.height || cols > shape.width {
            return Err(Error::Mask(format!("cannot split {shape:?} into {rows}x{cols} blocks")));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for br in 0..rows {
            for bc in 0..cols {
                let mask = (0..shape.pixels())
                    .map(|p| {
                        let (r, c) = (p / shape.width, p % shape.width);
                        r * rows / shape.height == br && c * cols / shape.width == bc
                    })
                    .collect();
                out.push(Self::new(format!("c{}", br * cols + bc), shape, mask)?);
            }
        }
        Ok(out)
    }
}

pub const THREE_HOURS_MIN: u32 = 180;

/// 3-hour catchment totals (mm/3h) of a 3-hour sequence, one per mask.
pub fn catchment_reduce(seq: &PrecipSequence, masks: &[CatchmentMask]) -> Result<Vec<f64>> {
    if seq.len() as u32 * seq.step_minutes() != THREE_HOURS_MIN {
        return Err(Error::Arity {
            expected: (THREE_HOURS_MIN / seq.step_minutes()) as usize,
            found: seq.len(),
        });
    }
    masks
        .iter()
        .map(|m| {
            if m.shape.pixels() != seq.shape().pixels() {
                return Err(Error::Mask(format!("mask {} does not match the grid", m.catchment_id)));
            }
            let count = m.mask.iter().filter(|b| **b).count();
            if count == 0 {
                return Err(Error::Mask(format!("mask {} is empty", m.catchment_id)));
            }
            let frame_means: f64 = seq
                .frames()
                .iter()
                .map(|f| {
                    f.values()
                        .iter()
                        .zip(&m.mask)
                        .filter(|(_, b)| **b)
                        .map(|(v, _)| *v as f64)
                        .sum::<f64>()
                        / count as f64
                })
                .sum();
            Ok(frame_means / seq.len() as f64 * 3.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    /// `None` when nothing is predicted positive at this threshold.
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// Area under the swept precision/recall points, normalised by the recall span.
///
/// Points without a defined precision are skipped; points sharing a recall
/// keep their best precision. A single recall level scores its precision
/// (0 when the recall is 0), and no defined points score 0.
pub fn pr_auc(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.precision.map(|pr| (p.recall, pr)))
        .collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.partial_cmp(&a.1).unwrap()));
    pts.dedup_by(|b, a| a.0 == b.0);
    let (r_min, r_max) = (pts[0].0, pts[pts.len() - 1].0);
    if r_max - r_min <= 0.0 {
        return if r_max > 0.0 { pts[0].1 } else { 0.0 };
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum();
    (area / (r_max - r_min)).clamp(0.0, 1.0)
}

/// Precision/recall of extreme-event detection over `(event, catchment)` pairs.
///
/// Ground truth is `obs > extreme_threshold`; a prediction is positive at a
/// swept threshold when `pred > threshold`.
pub fn extreme_pr_curve(pred: &[f64], obs: &[f64], cfg: &VerificationConfig) -> Result<PrCurve> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predicted vs {} observed catchment means",
            pred.len(),
            obs.len()
        )));
    }
    let labels: Vec<bool> = obs.iter().map(|o| *o > cfg.extreme_threshold).collect();
    let positives = labels.iter().filter(|b| **b).count();
    if positives == 0 {
        return Err(Error::Undefined(
            "no extreme events in the observations; recall is undefined (use a dataset with extremes)".into(),
        ));
    }
    let points: Vec<PrPoint> = cfg
        .pr_thresholds()
        .into_iter()
        .map(|thr| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for (p, l) in pred.iter().zip(&labels) {
                if *p > thr {
                    if *l {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            PrPoint {
                threshold: thr,
                precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
                recall: tp as f64 / positives as f64,
            }
        })
        .collect();
    let auc = pr_auc(&points);
    Ok(PrCurve { points, auc })
}

/// All verification scores for a set of forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub pixel: PixelMetrics,
    /// `(threshold mm, CSI, FAR)`.
    pub categorical: Vec<(f64, Option<f64>, Option<f64>)>,
    /// `(scale km, FSS)`.
    pub fss: Vec<(f64, Option<f64>)>,
    pub pr_curve: Option<PrCurve>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores paired forecast and observed sequences. The PR curve is computed
/// when masks are given and the observations contain at least one extreme.
pub fn evaluate(
    preds: &[PrecipSequence],
    obs: &[PrecipSequence],
    masks: &[CatchmentMask],
    cfg: &VerificationConfig,
) -> Result<VerificationReport> {
    cfg.validate()?;
    if preds.len() != obs.len() || preds.is_empty() {
        return Err(Error::Arity {
            expected: obs.len(),
            found: preds.len(),
        });
    }
    for (p, o) in preds.iter().zip(obs) {
        check_sequences(p, o)?;
    }
    let shape = obs[0].shape();
    let pixel_size = obs[0].pixel_size_km() as f64;

    // frame-level pairs
    let frames: Vec<(&[f32], &[f32])> = preds
        .iter()
        .zip(obs)
        .flat_map(|(p, o)| p.frames().iter().zip(o.frames()).map(|(a, b)| (a.values(), b.values())))
        .collect();

    let pixel = if cfg.pooled {
        let pf: Vec<f32> = frames.iter().flat_map(|f| f.0.iter().copied()).collect();
        let of: Vec<f32> = frames.iter().flat_map(|f| f.1.iter().copied()).collect();
        pixel_metrics_flat(&pf, &of)?
    } else {
        let per: Vec<PixelMetrics> = frames
            .iter()
            .map(|(p, o)| pixel_metrics_flat(p, o))
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        PixelMetrics {
            mse: per.iter().map(|m| m.mse).sum::<f64>() / n,
            mae: per.iter().map(|m| m.mae).sum::<f64>() / n,
            pcc: mean_defined(per.iter().map(|m| m.pcc)),
        }
    };

    let categorical = cfg
        .csi_far_thresholds
        .iter()
        .map(|&thr| {
            let tables: Vec<ContingencyTable> = frames
                .iter()
                .map(|(p, o)| contingency_flat(p, o, thr))
                .collect::<Result<_>>()?;
            Ok(if cfg.pooled {
                let t = tables.into_iter().fold(ContingencyTable::default(), ContingencyTable::merge);
                (thr, t.csi(), t.far())
            } else {
                (
                    thr,
                    mean_defined(tables.iter().map(|t| t.csi())),
                    mean_defined(tables.iter().map(|t| t.far())),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let fss_scores = cfg
        .fss_scales_km
        .iter()
        .map(|&scale| {
            let n = fss_window(scale, pixel_size);
            let terms: Vec<(f64, f64)> = frames
                .iter()
                .map(|(p, o)| fss_terms(p, o, shape.height, shape.width, cfg.fss_threshold, n))
                .collect();
            let v = if cfg.pooled {
                let (num, den) = terms.iter().fold((0.0, 0.0), |a, t| (a.0 + t.0, a.1 + t.1));
                (den > 0.0).then(|| 1.0 - num / den)
            } else {
                mean_defined(terms.iter().map(|(num, den)| (*den > 0.0).then(|| 1.0 - num / den)))
            };
            (scale, v)
        })
        .collect();

    let pr_curve = if masks.is_empty() {
        None
    } else {
        let mut pm = Vec::new();
        let mut om = Vec::new();
        for (p, o) in preds.iter().zip(obs) {
            pm.extend(catchment_reduce(p, masks)?);
            om.extend(catchment_reduce(o, masks)?);
        }
        match extreme_pr_curve(&pm, &om, cfg) {
            Ok(c) => Some(c),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        }
    };

    Ok(VerificationReport {
        pixel,
        categorical,
        fss: fss_scores,
        pr_curve,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl VerificationReport {
    /// `metric,value` rows; missing values are left empty.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s += &format!("mse,{}\n", self.pixel.mse);
        s += &format!("mae,{}\n", self.pixel.mae);
        s += &format!("pcc,{}\n", fmt_opt(self.pixel.pcc));
        for (thr, csi, _) in &self.categorical {
            s += &format!("csi_{}mm,{}\n", fmt_num(*thr), fmt_opt(*csi));
        }
        for (thr, _, far) in &self.categorical {
            s += &format!("far_{}mm,{}\n", fmt_num(*thr), fmt_opt(*far));
        }
        for (scale, v) in &self.fss {
            s += &format!("fss_{}km,{}\n", fmt_num(*scale), fmt_opt(*v));
        }
        s += &format!("auc,{}\n", fmt_opt(self.pr_curve.as_ref().map(|c| c.auc)));
        s
    }
}

impl PrCurve {
    /// `threshold,precision,recall` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.points {
            s += &format!("{},{},{}\n", p.threshold, fmt_opt(p.precision), p.recall);
        }
        s
    }
}

fn parse_optional(field: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    let v: f64 = field
        .parse()
        .map_err(|_| Error::validation(column, row, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::validation(column, row, "not finite"));
    }
    Ok(Some(v))
}

fn csv_rows(text: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let found = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Format(format!("expected header {}, found {}", header.join(","), found.iter().collect::<Vec<_>>().join(","))));
    }
    rdr.records()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Reads `metrics.csv` back into `(metric, value)` pairs; empty values are `None`.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    let rows = csv_rows(text, &["metric", "value"])?;
    let mut seen = std::collections::HashSet::new();
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let name = r[0].to_string();
            if name.is_empty() || !seen.insert(name.clone()) {
                return Err(Error::validation("metric", i, "empty or repeated name"));
            }
            Ok((name, parse_optional(&r[1], i, "value")?))
        })
        .collect()
}

/// Reads `pr_curve.csv` back into points, checking probabilities lie in [0, 1].
pub fn parse_pr_curve_csv(text: &str) -> Result<Vec<PrPoint>> {
    let rows = csv_rows(text, &["threshold", "precision", "recall"])?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let threshold = parse_optional(&r[0], i, "threshold")?.ok_or_else(|| Error::validation("threshold", i, "missing"))?;
            let precision = parse_optional(&r[1], i, "precision")?;
            let recall = parse_optional(&r[2], i, "recall")?.ok_or_else(|| Error::validation("recall", i, "missing"))?;
            if precision.is_some_and(|p| !(0.0..=1.0).contains(&p)) || !(0.0..=1.0).contains(&recall) {
                return Err(Error::validation("precision/recall", i, "outside [0, 1]"));
            }
            Ok(PrPoint {
                threshold,
                precision,
                recall,
            })
        })
        .collect()
}
