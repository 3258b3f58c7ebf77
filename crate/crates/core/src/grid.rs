//! Gridded spatio-temporal data model and the PNWG / station-CSV file formats.
//!
//! Every grid is row-major `[T, H, W, C]` with `f32` values. Timestamps are
//! integer minutes relative to the first frame of a sequence.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PNWG_MAGIC: &[u8; 4] = b"PNWG";
pub const PNWG_VERSION: u16 = 1;
pub const PNWG_DTYPE_F32LE: u8 = 1;
pub const PNWG_HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "grid dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(channels))
            .ok_or_else(|| Error::Shape("grid element count overflows usize".into()))?;
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    /// Single-channel shape.
    pub fn plane(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 1)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_finite_nonneg(field: &str, values: &[f32]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::validation(field, i, format!("non-finite value {v}")));
        }
        if *v < 0.0 {
            return Err(Error::validation(field, i, format!("negative value {v}")));
        }
    }
    Ok(())
}

/// One precipitation map in mm/h.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecipFrame {
    shape: GridShape,
    values: Vec<f32>,
    timestamp: i64,
}

impl PrecipFrame {
    pub fn new(shape: GridShape, values: Vec<f32>, timestamp: i64) -> Result<Self> {
        if shape.channels != 1 {
            return Err(Error::Shape(format!(
                "precipitation frames have one channel, got {}",
                shape.channels
            )));
        }
        if values.len() != shape.pixels() {
            return Err(Error::Length {
                expected: shape.pixels(),
                found: values.len(),
            });
        }
        check_finite_nonneg("values", &values)?;
        Ok(Self {
            shape,
            values,
            timestamp,
        })
    }

    pub fn zeros(shape: GridShape, timestamp: i64) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.pixels()], timestamp)
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.shape.width + col]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// How sub-step frames are reduced when coarsening temporal resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Time-ordered stack of precipitation frames sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecipSequence {
    frames: Vec<PrecipFrame>,
    step_minutes: u32,
    pixel_size_km: f32,
}

impl PrecipSequence {
    pub fn new(frames: Vec<PrecipFrame>, step_minutes: u32) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InsufficientData("sequence has no frames".into()));
        }
        if step_minutes == 0 {
            return Err(Error::Config("step_minutes must be positive".into()));
        }
        let shape = frames[0].shape;
        for (i, pair) in frames.windows(2).enumerate() {
            if pair[1].shape != shape {
                return Err(Error::Shape(format!(
                    "frame {} has shape {:?}, expected {:?}",
                    i + 1,
                    pair[1].shape,
                    shape
                )));
            }
            if pair[1].timestamp - pair[0].timestamp != step_minutes as i64 {
                return Err(Error::validation(
                    "timestamp",
                    i + 1,
                    format!(
                        "expected {} min after previous frame, found {}",
                        step_minutes,
                        pair[1].timestamp - pair[0].timestamp
                    ),
                ));
            }
        }
        Ok(Self {
            frames,
            step_minutes,
            pixel_size_km: 1.0,
        })
    }

    /// Builds a sequence from raw frame buffers with timestamps `0, step, 2*step, ...`.
    pub fn from_frames(shape: GridShape, step_minutes: u32, frames: Vec<Vec<f32>>) -> Result<Self> {
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(t, v)| PrecipFrame::new(shape, v, t as i64 * step_minutes as i64))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, step_minutes)
    }

    pub fn with_pixel_size(mut self, pixel_size_km: f32) -> Result<Self> {
        if !(pixel_size_km.is_finite() && pixel_size_km > 0.0) {
            return Err(Error::Config(format!("invalid pixel size {pixel_size_km}")));
        }
        self.pixel_size_km = pixel_size_km;
        Ok(self)
    }

    pub fn frames(&self) -> &[PrecipFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> GridShape {
        self.frames[0].shape
    }

    pub fn step_minutes(&self) -> u32 {
        self.step_minutes
    }

    pub fn pixel_size_km(&self) -> f32 {
        self.pixel_size_km
    }

    /// All frame values concatenated in `[T, H, W]` order.
    pub fn flat_values(&self) -> Vec<f32> {
        self.frames
            .iter()
            .flat_map(|f| f.values.iter().copied())
            .collect()
    }

    /// Splits into `n_cond` conditioning frames and `m_pred` target frames.
    pub fn split(&self, n_cond: usize, m_pred: usize) -> Result<(PrecipSequence, PrecipSequence)> {
        split_sequence(self, n_cond, m_pred)
    }

    /// Re-bases timestamps so the first frame sits at minute 0.
    pub fn rebased(&self) -> PrecipSequence {
        let origin = self.frames[0].timestamp;
        let frames = self
            .frames
            .iter()
            .map(|f| PrecipFrame {
                timestamp: f.timestamp - origin,
                ..f.clone()
            })
            .collect();
        PrecipSequence {
            frames,
            step_minutes: self.step_minutes,
            pixel_size_km: self.pixel_size_km,
        }
    }

    /// Coarsens temporal resolution by reducing each block of `factor` frames.
    pub fn aggregate(&self, factor: usize, rule: Aggregation) -> Result<PrecipSequence> {
        if factor == 0 || self.len() % factor != 0 {
            return Err(Error::Arity {
                expected: factor.max(1) * (self.len() / factor.max(1)).max(1),
                found: self.len(),
            });
        }
        let shape = self.shape();
        let out = self
            .frames
            .chunks(factor)
            .map(|block| {
                let mut acc = vec![0.0f64; shape.pixels()];
                if rule == Aggregation::Max {
                    acc.iter_mut().for_each(|a| *a = f64::NEG_INFINITY);
                }
                for f in block {
                    for (a, v) in acc.iter_mut().zip(&f.values) {
                        match rule {
                            Aggregation::Mean => *a += *v as f64,
                            Aggregation::Max => *a = a.max(*v as f64),
                        }
                    }
                }
                let values = acc
                    .into_iter()
                    .map(|a| match rule {
                        Aggregation::Mean => (a / factor as f64) as f32,
                        Aggregation::Max => a as f32,
                    })
                    .collect();
                PrecipFrame::new(shape, values, block[0].timestamp)
            })
            .collect::<Result<Vec<_>>>()?;
        let step = self.step_minutes * factor as u32;
        PrecipSequence::new(out, step)?.with_pixel_size(self.pixel_size_km)
    }
}

pub fn split_sequence(
    seq: &PrecipSequence,
    n_cond: usize,
    m_pred: usize,
) -> Result<(PrecipSequence, PrecipSequence)> {
    if n_cond == 0 || m_pred == 0 || seq.len() != n_cond + m_pred {
        return Err(Error::Arity {
            expected: n_cond + m_pred,
            found: seq.len(),
        });
    }
    let cond = PrecipSequence {
        frames: seq.frames[..n_cond].to_vec(),
        step_minutes: seq.step_minutes,
        pixel_size_km: seq.pixel_size_km,
    };
    let target = PrecipSequence {
        frames: seq.frames[n_cond..].to_vec(),
        step_minutes: seq.step_minutes,
        pixel_size_km: seq.pixel_size_km,
    };
    Ok((cond, target))
}

/// Meteorological variables carried by a [`MeteoStack`], in file channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeteoField {
    Q,
    U10,
    V10,
    U100,
    V100,
    Rs,
    Temp,
    Dew,
}

impl MeteoField {
    pub const ALL: [MeteoField; 8] = [
        MeteoField::Q,
        MeteoField::U10,
        MeteoField::V10,
        MeteoField::U100,
        MeteoField::V100,
        MeteoField::Rs,
        MeteoField::Temp,
        MeteoField::Dew,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MeteoField::Q => "q",
            MeteoField::U10 => "u10",
            MeteoField::V10 => "v10",
            MeteoField::U100 => "u100",
            MeteoField::V100 => "v100",
            MeteoField::Rs => "r_s",
            MeteoField::Temp => "temp",
            MeteoField::Dew => "dew",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const METEO_CHANNELS: usize = 8;

/// Co-registered meteorological fields at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MeteoStack {
    shape: GridShape,
    timestamp: i64,
    pixel_size_km: f32,
    fields: [Vec<f32>; METEO_CHANNELS],
}

impl MeteoStack {
    /// `shape` is the single-channel precipitation grid shape.
    pub fn new(
        shape: GridShape,
        timestamp: i64,
        pixel_size_km: f32,
        fields: [Vec<f32>; METEO_CHANNELS],
    ) -> Result<Self> {
        if shape.channels != 1 {
            return Err(Error::Shape("meteo stacks use a single-channel grid shape".into()));
        }
        if !(pixel_size_km.is_finite() && pixel_size_km > 0.0) {
            return Err(Error::Config(format!("invalid pixel size {pixel_size_km}")));
        }
        for f in MeteoField::ALL {
            let v = &fields[f.index()];
            if v.len() != shape.pixels() {
                return Err(Error::Length {
                    expected: shape.pixels(),
                    found: v.len(),
                });
            }
            for (i, x) in v.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::validation(f.name(), i, format!("non-finite value {x}")));
                }
            }
        }
        for (i, q) in fields[MeteoField::Q.index()].iter().enumerate() {
            if !(0.0..=0.1).contains(q) {
                return Err(Error::validation("q", i, format!("specific humidity {q} outside [0, 0.1]")));
            }
        }
        for (i, r) in fields[MeteoField::Rs.index()].iter().enumerate() {
            if *r < 0.0 {
                return Err(Error::validation("r_s", i, format!("negative radiation {r}")));
            }
        }
        let temp = &fields[MeteoField::Temp.index()];
        for (i, (d, t)) in fields[MeteoField::Dew.index()].iter().zip(temp).enumerate() {
            if d > t {
                return Err(Error::validation("dew", i, format!("dew point {d} above temperature {t}")));
            }
        }
        Ok(Self {
            shape,
            timestamp,
            pixel_size_km,
            fields,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn pixel_size_km(&self) -> f32 {
        self.pixel_size_km
    }

    pub fn field(&self, f: MeteoField) -> &[f32] {
        &self.fields[f.index()]
    }

    pub fn with_timestamp(mut self, timestamp: i64) -> Self {
        self.timestamp = timestamp;
        self
    }
}

/// A point measurement from a weather station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationObservation {
    pub station_id: String,
    pub x_km: f64,
    pub y_km: f64,
    #[serde(rename = "timestamp_min")]
    pub timestamp: i64,
    pub variable: String,
    pub value: f64,
}

impl StationObservation {
    /// Checks the value is finite and the position lies within `margin_km` of the grid box.
    pub fn validate(&self, shape: GridShape, pixel_size_km: f64, margin_km: f64) -> Result<()> {
        if !self.value.is_finite() {
            return Err(Error::validation(
                format!("station {}", self.station_id),
                0,
                "non-finite value",
            ));
        }
        let max_x = (shape.width as f64 - 1.0) * pixel_size_km;
        let max_y = (shape.height as f64 - 1.0) * pixel_size_km;
        let inside = |v: f64, hi: f64| v >= -margin_km && v <= hi + margin_km;
        if !(inside(self.x_km, max_x) && inside(self.y_km, max_y)) {
            return Err(Error::validation(
                format!("station {}", self.station_id),
                0,
                format!("position ({}, {}) outside grid box", self.x_km, self.y_km),
            ));
        }
        Ok(())
    }
}

pub fn read_station_csv(path: &Path) -> Result<Vec<StationObservation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_station_csv_from(file)
}

pub fn read_station_csv_from<R: Read>(reader: R) -> Result<Vec<StationObservation>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("station CSV header: {e}")))?
        .clone();
    let expected = ["station_id", "x_km", "y_km", "timestamp_min", "variable", "value"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "station CSV header must be `{}`",
            expected.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let obs: StationObservation =
            row.map_err(|e| Error::Format(format!("station CSV row {}: {e}", i + 1)))?;
        if !obs.value.is_finite() {
            return Err(Error::validation("value", i, "non-finite station value"));
        }
        out.push(obs);
    }
    Ok(out)
}

pub fn write_station_csv(path: &Path, obs: &[StationObservation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    for o in obs {
        wtr.serialize(o)
            .map_err(|e| Error::Format(format!("station CSV write: {e}")))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Precip = 1,
    Meteo = 2,
}

/// Header plus payload of a PNWG file with no semantic validation beyond layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub kind: GridKind,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub step_minutes: u32,
    pub pixel_size_km: f32,
    pub data: Vec<f32>,
}

impl RawGrid {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.t * self.h * self.w * self.c;
        if self.data.len() != n {
            return Err(Error::Length {
                expected: n,
                found: self.data.len(),
            });
        }
        let dim = |v: usize, name: &str| {
            u32::try_from(v).map_err(|_| Error::Shape(format!("{name}={v} does not fit in u32")))
        };
        let mut buf = Vec::with_capacity(PNWG_HEADER_LEN + 4 * n);
        buf.extend_from_slice(PNWG_MAGIC);
        buf.extend_from_slice(&PNWG_VERSION.to_le_bytes());
        buf.push(PNWG_DTYPE_F32LE);
        buf.push(self.kind as u8);
        for (v, name) in [(self.t, "T"), (self.h, "H"), (self.w, "W"), (self.c, "C")] {
            buf.extend_from_slice(&dim(v, name)?.to_le_bytes());
        }
        buf.extend_from_slice(&self.step_minutes.to_le_bytes());
        buf.extend_from_slice(&self.pixel_size_km.to_le_bytes());
        buf.resize(PNWG_HEADER_LEN, 0);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PNWG_HEADER_LEN {
            return Err(Error::Format(format!(
                "file shorter than the {PNWG_HEADER_LEN}-byte header"
            )));
        }
        if &bytes[0..4] != PNWG_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != PNWG_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if bytes[6] != PNWG_DTYPE_F32LE {
            return Err(Error::Format(format!("unsupported dtype code {}", bytes[6])));
        }
        let kind = match bytes[7] {
            1 => GridKind::Precip,
            2 => GridKind::Meteo,
            k => return Err(Error::Format(format!("unknown kind {k}"))),
        };
        let (t, h, w, c) = (
            u32_at(8) as usize,
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        );
        let step_minutes = u32_at(24);
        let pixel_size_km = f32::from_le_bytes(bytes[28..32].try_into().unwrap());
        let n = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Format("declared shape overflows".into()))?;
        let payload = &bytes[PNWG_HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(Error::Length {
                expected: n,
                found: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            kind,
            t,
            h,
            w,
            c,
            step_minutes,
            pixel_size_km,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    /// Slice for frame `t`, channel `c` as an `H*W` plane copy.
    pub fn plane(&self, t: usize, c: usize) -> Vec<f32> {
        let px = self.h * self.w;
        let base = t * px * self.c;
        (0..px).map(|p| self.data[base + p * self.c + c]).collect()
    }
}

/// Contents of a PNWG file.
#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    Precip(PrecipSequence),
    Meteo(Vec<MeteoStack>),
}

impl From<PrecipSequence> for GridData {
    fn from(s: PrecipSequence) -> Self {
        GridData::Precip(s)
    }
}

impl From<Vec<MeteoStack>> for GridData {
    fn from(s: Vec<MeteoStack>) -> Self {
        GridData::Meteo(s)
    }
}

impl GridData {
    pub fn into_precip(self) -> Result<PrecipSequence> {
        match self {
            GridData::Precip(p) => Ok(p),
            GridData::Meteo(_) => Err(Error::Format("expected a precipitation file, found meteo".into())),
        }
    }

    pub fn into_meteo(self) -> Result<Vec<MeteoStack>> {
        match self {
            GridData::Meteo(m) => Ok(m),
            GridData::Precip(_) => Err(Error::Format("expected a meteo file, found precipitation".into())),
        }
    }

    pub fn to_raw(&self) -> Result<RawGrid> {
        match self {
            GridData::Precip(seq) => {
                let s = seq.shape();
                Ok(RawGrid {
                    kind: GridKind::Precip,
                    t: seq.len(),
                    h: s.height,
                    w: s.width,
                    c: 1,
                    step_minutes: seq.step_minutes(),
                    pixel_size_km: seq.pixel_size_km(),
                    data: seq.flat_values(),
                })
            }
            GridData::Meteo(stacks) => {
                let first = stacks
                    .first()
                    .ok_or_else(|| Error::InsufficientData("no meteo stacks to write".into()))?;
                let shape = first.shape();
                let step = meteo_step(stacks)?;
                let px = shape.pixels();
                let mut data = Vec::with_capacity(stacks.len() * px * METEO_CHANNELS);
                for (t, st) in stacks.iter().enumerate() {
                    if st.shape() != shape || st.pixel_size_km() != first.pixel_size_km() {
                        return Err(Error::Shape(format!("meteo stack {t} does not match stack 0")));
                    }
                    for p in 0..px {
                        for f in MeteoField::ALL {
                            data.push(st.field(f)[p]);
                        }
                    }
                }
                Ok(RawGrid {
                    kind: GridKind::Meteo,
                    t: stacks.len(),
                    h: shape.height,
                    w: shape.width,
                    c: METEO_CHANNELS,
                    step_minutes: step,
                    pixel_size_km: first.pixel_size_km(),
                    data,
                })
            }
        }
    }

    pub fn from_raw(raw: RawGrid) -> Result<Self> {
        match raw.kind {
            GridKind::Precip => {
                if raw.c != 1 {
                    return Err(Error::Format(format!("precipitation file with C={}", raw.c)));
                }
                let shape = GridShape::plane(raw.h, raw.w)?;
                let px = shape.pixels();
                let frames = raw.data.chunks(px).map(|c| c.to_vec()).collect();
                let step = raw.step_minutes.max(1);
                Ok(GridData::Precip(
                    PrecipSequence::from_frames(shape, step, frames)?.with_pixel_size(raw.pixel_size_km)?,
                ))
            }
            GridKind::Meteo => {
                if raw.c != METEO_CHANNELS {
                    return Err(Error::Format(format!(
                        "meteo stack file needs C={METEO_CHANNELS}, found {}",
                        raw.c
                    )));
                }
                let shape = GridShape::plane(raw.h, raw.w)?;
                let stacks = (0..raw.t)
                    .map(|t| {
                        let fields = MeteoField::ALL.map(|f| raw.plane(t, f.index()));
                        MeteoStack::new(
                            shape,
                            t as i64 * raw.step_minutes as i64,
                            raw.pixel_size_km,
                            fields,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GridData::Meteo(stacks))
            }
        }
    }
}

fn meteo_step(stacks: &[MeteoStack]) -> Result<u32> {
    if stacks.len() < 2 {
        return Ok(30);
    }
    let step = stacks[1].timestamp() - stacks[0].timestamp();
    if step <= 0 {
        return Err(Error::validation("timestamp", 1, "meteo timestamps must increase"));
    }
    for (i, pair) in stacks.windows(2).enumerate() {
        if pair[1].timestamp() - pair[0].timestamp() != step {
            return Err(Error::validation("timestamp", i + 1, "meteo stacks must be evenly spaced"));
        }
    }
    Ok(step as u32)
}

/// Writes a precipitation sequence or meteo stack list as PNWG.
///
/// Timestamps are stored implicitly as `t * step_minutes`, so a sequence whose
/// first frame is not at minute 0 reads back re-based to 0.
pub fn write_grid_file(data: &GridData, path: &Path) -> Result<()> {
    data.to_raw()?.write(path)
}

pub fn read_grid_file(path: &Path) -> Result<GridData> {
    GridData::from_raw(RawGrid::read(path)?)
}

/// Reads a mask file: a meteo-kind PNWG with `C = 1`, one 0/1 frame per catchment.
pub fn read_mask_file(path: &Path) -> Result<(GridShape, Vec<Vec<bool>>)> {
    let raw = RawGrid::read(path)?;
    if raw.kind != GridKind::Meteo || raw.c != 1 {
        return Err(Error::Format("mask files are meteo-kind PNWG with C=1".into()));
    }
    let shape = GridShape::plane(raw.h, raw.w)?;
    let masks = raw
        .data
        .chunks(shape.pixels())
        .map(|c| c.iter().map(|v| *v != 0.0).collect())
        .collect();
    Ok((shape, masks))
}

pub fn write_mask_file(path: &Path, shape: GridShape, masks: &[Vec<bool>]) -> Result<()> {
    let raw = RawGrid {
        kind: GridKind::Meteo,
        t: masks.len(),
        h: shape.height,
        w: shape.width,
        c: 1,
        step_minutes: 0,
        pixel_size_km: 1.0,
        data: masks
            .iter()
            .flat_map(|m| m.iter().map(|b| if *b { 1.0 } else { 0.0 }))
            .collect(),
    };
    raw.write(path)
}
