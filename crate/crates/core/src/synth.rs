//! Synthetic ground truth: a second-order RC cell whose resistances depend on
//! temperature and SOC, plus current-profile generators.
//!
//! The truth model is deliberately richer than the first-order ECM so the
//! correction networks have a structured residual to learn.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SeriesData;
use crate::ecm::{soc_step, BatteryConfig, OcvCurve};
use crate::error::{Error, Result};

/// Ascending coefficients of the reference cell's OCV, monotone on [0, 1]
/// from 2.5 V to 4.2 V.
pub const REFERENCE_OCV_COEFFS: [f64; 10] = [
    2.500633,
    11.094525,
    -63.972262,
    245.001043,
    -633.73217,
    1122.604289,
    -1332.562005,
    1008.368195,
    -437.956692,
    82.854805,
];

pub fn reference_ocv() -> OcvCurve {
    OcvCurve::new(REFERENCE_OCV_COEFFS.to_vec(), [0.0, 1.0]).expect("reference OCV is monotone")
}

/// Inner Euler sub-steps per sample.
pub const SUBSTEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub r0_ref: f64,
    pub rd1_ref: f64,
    pub cd1_ref: f64,
    /// Zero disables the second RC branch.
    pub rd2_ref: f64,
    pub cd2_ref: f64,
    /// Resistances scale by `1 + alpha * (25 - T)`.
    pub alpha: f64,
    /// Resistances scale by `1 + beta * (0.5 - SOC)` below half charge.
    pub beta: f64,
    pub sigma_v: f64,
    pub sigma_i: f64,
    pub ambient_c: f64,
    pub seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            r0_ref: 0.03,
            rd1_ref: 0.02,
            cd1_ref: 1500.0,
            rd2_ref: 0.01,
            cd2_ref: 20000.0,
            alpha: 0.03,
            beta: 0.5,
            sigma_v: 0.002,
            sigma_i: 0.005,
            ambient_c: 25.0,
            seed: 0,
        }
    }
}

impl TruthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.r0_ref, self.rd1_ref, self.cd1_ref, self.cd2_ref];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParam(
                "truth r0, rd1, cd1 and cd2 must be positive".into(),
            ));
        }
        if !(self.rd2_ref >= 0.0) || !(self.sigma_v >= 0.0) || !(self.sigma_i >= 0.0) {
            return Err(Error::InvalidParam(
                "truth rd2 and noise levels must be non-negative".into(),
            ));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() || !self.ambient_c.is_finite() {
            return Err(Error::InvalidParam("non-finite truth sensitivity".into()));
        }
        Ok(())
    }

    /// Multiplier applied to every resistance.
    pub fn resistance_factor(&self, temp_c: f64, soc: f64) -> f64 {
        let thermal = 1.0 + self.alpha * (25.0 - temp_c);
        let depletion = if soc < 0.5 { 1.0 + self.beta * (0.5 - soc) } else { 1.0 };
        thermal * depletion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleKind {
    Hppc,
    Dynamic,
    Constant,
}

impl std::str::FromStr for CycleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hppc" => Ok(CycleKind::Hppc),
            "dynamic" => Ok(CycleKind::Dynamic),
            "constant" => Ok(CycleKind::Constant),
            other => Err(Error::InvalidParam(format!("unknown cycle kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleSpec {
    pub kind: CycleKind,
    /// Pulse current (hppc), flat current (constant) or stationary standard
    /// deviation around the mean (dynamic), amperes.
    pub amplitude: f64,
    pub pulse_s: f64,
    pub rest_s: f64,
    pub corr_time_s: f64,
    pub mean_a: f64,
    pub max_current_a: f64,
    /// Largest per-step change of the dynamic current, amperes.
    pub slew_a: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for CycleSpec {
    fn default() -> Self {
        CycleSpec {
            kind: CycleKind::Dynamic,
            amplitude: 1.0,
            pulse_s: 10.0,
            rest_s: 40.0,
            corr_time_s: 20.0,
            mean_a: 1.5,
            max_current_a: 6.0,
            slew_a: 1.0,
            duration_s: 6000.0,
            seed: 0,
        }
    }
}

impl CycleSpec {
    pub fn validate(&self) -> Result<()> {
        let durations = match self.kind {
            CycleKind::Hppc => vec![self.pulse_s, self.rest_s, self.duration_s],
            CycleKind::Dynamic => vec![self.corr_time_s, self.duration_s],
            CycleKind::Constant => vec![self.duration_s],
        };
        if durations.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidParam("cycle durations must be positive".into()));
        }
        if self.kind == CycleKind::Dynamic && !(self.slew_a > 0.0 && self.max_current_a >= 0.0) {
            return Err(Error::InvalidParam(
                "dynamic cycle needs a positive slew and non-negative current ceiling".into(),
            ));
        }
        Ok(())
    }
}

pub fn gen_cycle(spec: &CycleSpec, dt_s: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    if !(dt_s > 0.0) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt_s}")));
    }
    let n = (spec.duration_s / dt_s).round() as usize;
    let out = match spec.kind {
        CycleKind::Constant => vec![spec.amplitude; n],
        CycleKind::Hppc => {
            let pulse = (spec.pulse_s / dt_s).round() as usize;
            let period = pulse + (spec.rest_s / dt_s).round() as usize;
            (0..n)
                .map(|k| if k % period < pulse { spec.amplitude } else { 0.0 })
                .collect()
        }
        CycleKind::Dynamic => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let theta = dt_s / spec.corr_time_s;
            let diffusion = spec.amplitude * (2.0 * theta).sqrt();
            let mut target = spec.mean_a;
            let mut current = 0.0f64;
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    target += theta * (spec.mean_a - target) + diffusion * z;
                    let step = (target - current).clamp(-spec.slew_a, spec.slew_a);
                    current = (current + step).clamp(0.0, spec.max_current_a);
                    current
                })
                .collect()
        }
    };
    Ok(out)
}

/// Output of [`simulate_truth`].
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRun {
    /// Noisy measurements.
    pub data: SeriesData,
    pub soc: Vec<f64>,
    pub u_rc1: Vec<f64>,
    pub u_rc2: Vec<f64>,
    pub voltage_clean: Vec<f64>,
    pub current_true: Vec<f64>,
    /// The series stopped early because the cell ran empty.
    pub exhausted: bool,
}

/// Integrates the truth cell over `currents` (discharge-positive) starting
/// at rest with `soc0`.
pub fn simulate_truth(cfg: &TruthConfig, batt: &BatteryConfig, currents: &[f64], soc0: f64) -> Result<TruthRun> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&soc0) {
        return Err(Error::InvalidParam(format!("soc0 must lie in [0, 1], got {soc0}")));
    }
    if currents.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise = |sigma: f64| -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        }
    };
    let h = batt.dt_s / SUBSTEPS as f64;
    let temp = cfg.ambient_c;

    let mut run = TruthRun {
        data: SeriesData {
            dt_s: batt.dt_s,
            t0_s: 0.0,
            time_s: Vec::new(),
            current_a: Vec::new(),
            voltage_v: Vec::new(),
            temp_c: Vec::new(),
        },
        soc: Vec::new(),
        u_rc1: Vec::new(),
        u_rc2: Vec::new(),
        voltage_clean: Vec::new(),
        current_true: Vec::new(),
        exhausted: false,
    };
    let (mut soc, mut u1, mut u2) = (soc0, 0.0f64, 0.0f64);
    for (k, &i) in currents.iter().enumerate() {
        let next_soc = soc_step(soc, i, batt);
        if next_soc < 0.0 {
            run.exhausted = true;
            break;
        }
        soc = next_soc;
        let factor = cfg.resistance_factor(temp, soc);
        let (r0, rd1, rd2) = (cfg.r0_ref * factor, cfg.rd1_ref * factor, cfg.rd2_ref * factor);
        for _ in 0..SUBSTEPS {
            u1 += h * (i / cfg.cd1_ref - u1 / (rd1 * cfg.cd1_ref));
            if rd2 > 0.0 {
                u2 += h * (i / cfg.cd2_ref - u2 / (rd2 * cfg.cd2_ref));
            }
        }
        let v = batt.ocv.value(soc) - u1 - u2 - i * r0;
        run.data.time_s.push(batt.dt_s * k as f64);
        run.data.current_a.push(i + noise(cfg.sigma_i));
        run.data.voltage_v.push(v + noise(cfg.sigma_v));
        run.data.temp_c.push(temp);
        run.soc.push(soc);
        run.u_rc1.push(u1);
        run.u_rc2.push(u2);
        run.voltage_clean.push(v);
        run.current_true.push(i);
    }
    if run.soc.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let d = run.data;
    run.data = SeriesData::new(d.dt_s, d.time_s, d.current_a, d.voltage_v, d.temp_c)?;
    Ok(run)
}

/// `step,time_s,soc_true,u_rc1,u_rc2,voltage_clean,current_true`.
pub fn write_truth_csv<W: Write>(run: &TruthRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "time_s",
        "soc_true",
        "u_rc1",
        "u_rc2",
        "voltage_clean",
        "current_true",
    ])?;
    for k in 0..run.soc.len() {
        w.write_record([
            k.to_string(),
            run.data.time_s[k].to_string(),
            run.soc[k].to_string(),
            run.u_rc1[k].to_string(),
            run.u_rc2[k].to_string(),
            run.voltage_clean[k].to_string(),
            run.current_true[k].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<truth csv>", e))?;
    Ok(())
}

/// Reads the `soc_true` column of a truth CSV.
pub fn read_truth_soc<R: std::io::Read>(input: R) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "soc_true")
        .ok_or_else(|| Error::MissingColumn {
            path: "<truth csv>".into(),
            column: "soc_true".into(),
        })?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        out.push(
            rec.get(col)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::BadRow {
                    path: "<truth csv>".into(),
                    row: row + 1,
                    message: "bad soc_true".into(),
                })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::{simulate_series, EcmParams};

    fn batt() -> BatteryConfig {
        BatteryConfig::new(10440.0, 1.0, reference_ocv()).unwrap()
    }

    #[test]
    fn reference_ocv_spans_cell_range() {
        let c = reference_ocv();
        assert!((c.value(0.0) - 2.5).abs() < 1e-3);
        assert!((c.value(1.0) - 4.2).abs() < 1e-3);
    }

    #[test]
    fn hppc_pattern() {
        let spec = CycleSpec {
            kind: CycleKind::Hppc,
            amplitude: 2.9,
            pulse_s: 10.0,
            rest_s: 40.0,
            duration_s: 150.0,
            ..Default::default()
        };
        let c = gen_cycle(&spec, 1.0).unwrap();
        assert_eq!(c.len(), 150);
        for (k, i) in c.iter().enumerate() {
            let expected = if k % 50 < 10 { 2.9 } else { 0.0 };
            assert_eq!(*i, expected, "sample {k}");
        }
    }

    #[test]
    fn constant_zero_cycle() {
        let spec = CycleSpec {
            kind: CycleKind::Constant,
            amplitude: 0.0,
            duration_s: 20.0,
            ..Default::default()
        };
        assert!(gen_cycle(&spec, 1.0).unwrap().iter().all(|&i| i == 0.0));
    }

    #[test]
    fn dynamic_is_seeded_and_bounded() {
        let spec = CycleSpec {
            seed: 11,
            ..Default::default()
        };
        let a = gen_cycle(&spec, 1.0).unwrap();
        assert_eq!(a, gen_cycle(&spec, 1.0).unwrap());
        assert_ne!(
            a,
            gen_cycle(
                &CycleSpec {
                    seed: 12,
                    ..spec.clone()
                },
                1.0
            )
            .unwrap()
        );
        let mut prev = 0.0;
        for &i in &a {
            assert!((0.0..=spec.max_current_a).contains(&i));
            assert!((i - prev).abs() <= spec.slew_a + 1e-12);
            prev = i;
        }
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - spec.mean_a).abs() < 0.3, "mean {mean}");
    }

    #[test]
    fn degenerates_to_first_order_ecm() {
        let cfg = TruthConfig {
            rd2_ref: 0.0,
            beta: 0.0,
            sigma_v: 0.0,
            sigma_i: 0.0,
            ambient_c: 25.0,
            ..Default::default()
        };
        let b = batt();
        let currents = gen_cycle(
            &CycleSpec {
                duration_s: 1500.0,
                seed: 3,
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        let run = simulate_truth(&cfg, &b, &currents, 0.9).unwrap();
        let p = EcmParams::new(cfg.r0_ref, cfg.rd1_ref, cfg.cd1_ref).unwrap();
        let ecm = simulate_series(&vec![p; currents.len()], &currents, &run.soc, &b, 0.0).unwrap();
        let worst = ecm
            .iter()
            .zip(&run.data.voltage_v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "max deviation {worst}");
    }

    #[test]
    fn rest_reads_ocv() {
        let cfg = TruthConfig {
            sigma_v: 0.0,
            sigma_i: 0.0,
            ..Default::default()
        };
        let b = batt();
        let run = simulate_truth(&cfg, &b, &[0.0; 10], 0.7).unwrap();
        for (v, s) in run.data.voltage_v.iter().zip(&run.soc) {
            assert_eq!(*v, b.ocv.value(*s));
        }
    }

    #[test]
    fn colder_cell_sags_more() {
        let b = batt();
        let pulse = gen_cycle(
            &CycleSpec {
                kind: CycleKind::Hppc,
                amplitude: 2.9,
                pulse_s: 10.0,
                rest_s: 40.0,
                duration_s: 50.0,
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        let sag = |t: f64| {
            let cfg = TruthConfig {
                ambient_c: t,
                sigma_v: 0.0,
                sigma_i: 0.0,
                ..Default::default()
            };
            let run = simulate_truth(&cfg, &b, &pulse, 0.8).unwrap();
            b.ocv.value(0.8) - run.data.voltage_v[9]
        };
        assert!(sag(-20.0) > sag(10.0));
    }

    #[test]
    fn charge_bookkeeping() {
        let b = batt();
        let cfg = TruthConfig::default();
        let currents = gen_cycle(
            &CycleSpec {
                duration_s: 3000.0,
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        let run = simulate_truth(&cfg, &b, &currents, 1.0).unwrap();
        let drawn: f64 = currents.iter().sum::<f64>() / b.capacity_coulombs;
        let last = *run.soc.last().unwrap();
        assert!(((1.0 - last) - drawn).abs() < 1e-9);
    }

    #[test]
    fn stops_when_empty() {
        let b = batt();
        let run = simulate_truth(&TruthConfig::default(), &b, &vec![2.9; 5000], 0.1005).unwrap();
        assert!(run.exhausted);
        assert_eq!(run.soc.len(), 361);
    }
}
