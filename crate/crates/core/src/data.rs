//! Telemetry ingestion, resampling and error metrics.
//!
//! Canonical CSV schema: `time_s,current_a,voltage_v,temp_c`, current
//! discharge-positive. Extra columns are ignored on input.

use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIME_COLUMN: &str = "time_s";
pub const CURRENT_COLUMN: &str = "current_a";
pub const VOLTAGE_COLUMN: &str = "voltage_v";
pub const TEMP_COLUMN: &str = "temp_c";

const UNIFORM_TOL_S: f64 = 1e-6;
const VOLTAGE_BAND: (f64, f64) = (0.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub time_s: f64,
    pub current_a: f64,
    pub voltage_v: f64,
    pub temp_c: f64,
}

/// Source column names for each canonical channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub time: String,
    pub current: String,
    pub voltage: String,
    pub temp: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            time: TIME_COLUMN.into(),
            current: CURRENT_COLUMN.into(),
            voltage: VOLTAGE_COLUMN.into(),
            temp: TEMP_COLUMN.into(),
        }
    }
}

impl ColumnMap {
    /// Parses `time=Time,current=Current(A),...`; unspecified channels keep
    /// their canonical names.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut map = ColumnMap::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidParam(format!("bad column mapping `{part}`")))?;
            let slot = match key.trim() {
                "time" => &mut map.time,
                "current" => &mut map.current,
                "voltage" => &mut map.voltage,
                "temp" | "temperature" => &mut map.temp,
                other => {
                    return Err(Error::InvalidParam(format!(
                        "unknown channel `{other}` in column mapping"
                    )))
                }
            };
            *slot = value.trim().to_string();
        }
        Ok(map)
    }
}

pub fn parse_csv(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
    parse_csv_mapped(path, &ColumnMap::default())
}

pub fn parse_csv_mapped(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_reader(file, map, path)
}

pub fn parse_csv_reader<R: Read>(input: R, map: &ColumnMap, path: &Path) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let cols = [
        find(&map.time)?,
        find(&map.current)?,
        find(&map.voltage)?,
        find(&map.temp)?,
    ];

    let mut out = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| Error::BadRow {
            path: path.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let mut vals = [0.0; 4];
        for (v, &c) in vals.iter_mut().zip(&cols) {
            let cell = rec.get(c).unwrap_or("");
            *v = cell
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::BadRow {
                    path: path.to_path_buf(),
                    row,
                    message: format!("non-numeric value `{cell}` in column `{}`", &headers[c]),
                })?;
        }
        out.push(RawRecord {
            time_s: vals[0],
            current_a: vals[1],
            voltage_v: vals[2],
            temp_c: vals[3],
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

/// Uniformly sampled telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesData {
    pub dt_s: f64,
    pub t0_s: f64,
    pub time_s: Vec<f64>,
    pub current_a: Vec<f64>,
    pub voltage_v: Vec<f64>,
    pub temp_c: Vec<f64>,
}

impl SeriesData {
    /// Checks uniform timing (±1 µs), equal lengths, finiteness and the
    /// voltage sanity band.
    pub fn new(
        dt_s: f64,
        time_s: Vec<f64>,
        current_a: Vec<f64>,
        voltage_v: Vec<f64>,
        temp_c: Vec<f64>,
    ) -> Result<Self> {
        let n = time_s.len();
        for (what, len) in [
            ("current column", current_a.len()),
            ("voltage column", voltage_v.len()),
            ("temperature column", temp_c.len()),
        ] {
            if len != n {
                return Err(Error::LengthMismatch {
                    what,
                    left: len,
                    right: n,
                });
            }
        }
        if n == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if !(dt_s.is_finite() && dt_s > 0.0) {
            return Err(Error::InvalidParam(format!("dt must be positive, got {dt_s}")));
        }
        let t0_s = time_s[0];
        for (k, t) in time_s.iter().enumerate() {
            let expected = t0_s + dt_s * k as f64;
            if !t.is_finite() || (t - expected).abs() > UNIFORM_TOL_S {
                return Err(Error::InvalidParam(format!(
                    "sample {k}: time {t} is not on the uniform {dt_s} s grid"
                )));
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&current_a) || !finite(&temp_c) || !finite(&voltage_v) {
            return Err(Error::InvalidParam("non-finite telemetry value".into()));
        }
        if let Some(k) = voltage_v
            .iter()
            .position(|v| *v <= VOLTAGE_BAND.0 || *v >= VOLTAGE_BAND.1)
        {
            return Err(Error::InvalidParam(format!(
                "sample {k}: voltage {} V outside the ({}, {}) V sanity band",
                voltage_v[k], VOLTAGE_BAND.0, VOLTAGE_BAND.1
            )));
        }
        Ok(SeriesData {
            dt_s,
            t0_s,
            time_s,
            current_a,
            voltage_v,
            temp_c,
        })
    }

    pub fn len(&self) -> usize {
        self.time_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_s.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> SeriesData {
        SeriesData {
            dt_s: self.dt_s,
            t0_s: self.time_s[range.start],
            time_s: self.time_s[range.clone()].to_vec(),
            current_a: self.current_a[range.clone()].to_vec(),
            voltage_v: self.voltage_v[range.clone()].to_vec(),
            temp_c: self.temp_c[range].to_vec(),
        }
    }

    /// Total charge drawn, ampere-seconds.
    pub fn charge(&self) -> f64 {
        self.current_a.iter().sum::<f64>() * self.dt_s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([TIME_COLUMN, CURRENT_COLUMN, VOLTAGE_COLUMN, TEMP_COLUMN])?;
        for k in 0..self.len() {
            w.write_record([
                self.time_s[k].to_string(),
                self.current_a[k].to_string(),
                self.voltage_v[k].to_string(),
                self.temp_c[k].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<series csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses and resamples a telemetry file in one go.
    pub fn load_csv(path: impl AsRef<Path>, map: &ColumnMap, dt_s: f64) -> Result<Self> {
        resample(&parse_csv_mapped(path, map)?, dt_s)
    }
}

/// Bin-mean resampling onto a `dt_s` grid anchored at the first timestamp.
/// Every bin must hold at least one sample.
pub fn resample(raw: &[RawRecord], dt_s: f64) -> Result<SeriesData> {
    if !(dt_s.is_finite() && dt_s > 0.0) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt_s}")));
    }
    if raw.is_empty() {
        return Err(Error::InsufficientData { needed: 2, got: 0 });
    }
    if let Some(w) = raw.windows(2).position(|w| w[1].time_s <= w[0].time_s) {
        return Err(Error::InvalidParam(format!(
            "time not strictly increasing at t = {} s",
            raw[w + 1].time_s
        )));
    }
    let t0 = raw[0].time_s;
    let bin_of = |t: f64| ((t - t0) / dt_s + 1e-9).floor() as usize;
    let n_bins = bin_of(raw[raw.len() - 1].time_s) + 1;
    if n_bins < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n_bins });
    }

    // Deviations from each bin's first sample; constant bins stay exact.
    let mut refs = vec![[0.0f64; 3]; n_bins];
    let mut sums = vec![[0.0f64; 3]; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in raw {
        let b = bin_of(r.time_s);
        let vals = [r.current_a, r.voltage_v, r.temp_c];
        if counts[b] == 0 {
            refs[b] = vals;
        }
        for j in 0..3 {
            sums[b][j] += vals[j] - refs[b][j];
        }
        counts[b] += 1;
    }
    if let Some(b) = counts.iter().position(|&c| c == 0) {
        return Err(Error::TimeGap {
            time_s: t0 + dt_s * b as f64,
            bin: b,
        });
    }

    let mut time = Vec::with_capacity(n_bins);
    let mut current = Vec::with_capacity(n_bins);
    let mut voltage = Vec::with_capacity(n_bins);
    let mut temp = Vec::with_capacity(n_bins);
    for (b, ((s, r), &c)) in sums.iter().zip(&refs).zip(&counts).enumerate() {
        let c = c as f64;
        time.push(t0 + dt_s * b as f64);
        current.push(r[0] + s[0] / c);
        voltage.push(r[1] + s[1] / c);
        temp.push(r[2] + s[2] / c);
    }
    SeriesData::new(dt_s, time, current, voltage, temp)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "prediction and truth",
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    mse(pred, truth).map(f64::sqrt)
}

/// Relative reduction of `candidate_err` against `baseline_err`, percent.
pub fn improvement_pct(baseline_err: f64, candidate_err: f64) -> Result<f64> {
    if !(baseline_err > 0.0) {
        return Err(Error::InvalidParam(format!(
            "baseline error must be positive, got {baseline_err}"
        )));
    }
    Ok(100.0 * (baseline_err - candidate_err) / baseline_err)
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub model: String,
    /// What the errors are measured on, e.g. `soc` or `voltage`.
    pub quantity: String,
    pub mse: f64,
    pub rmse: f64,
    /// Against the baseline row of the same scenario; absent for the baseline.
    pub improvement_pct: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "model", "quantity", "mse", "rmse", "improvement_pct"])?;
    for r in records {
        w.write_record([
            r.scenario.clone(),
            r.model.clone(),
            r.quantity.clone(),
            r.mse.to_string(),
            r.rmse.to_string(),
            r.improvement_pct.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}
