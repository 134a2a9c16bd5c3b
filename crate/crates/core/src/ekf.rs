//! Extended Kalman filter over the state `x = (SOC, U_D)`.
//!
//! Transition: `soc' = soc - i*dt/C_b`, `u_d' = ud_step(u_d, i)`, Jacobian
//! `A = diag(1, exp(-dt/tau))`. Output: `h = f(soc) - u_d - i*r0`,
//! Jacobian `C = [f'(soc), -1]`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::data::SeriesData;
use crate::ecm::{soc_step, ud_step, BatteryConfig, BatteryState, EcmParams, OcvCurve};
use crate::error::{Error, Result};
use crate::ffrls::{FfrlsOptions, StreamingIdentifier};
use crate::hybrid::HybridModel;

/// Tolerance of the OCV bisection used for the default initial SOC.
pub const OCV_INVERSION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfConfig {
    /// Process-noise covariance, row-major.
    pub q: [[f64; 2]; 2],
    /// Measurement-noise variance, V^2.
    pub r: f64,
    pub p0: [[f64; 2]; 2],
    /// Initial state; `None` inverts the OCV curve at the first voltage.
    pub x0: Option<BatteryState>,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            q: [[1e-8, 0.0], [0.0, 1e-6]],
            r: 1e-3,
            p0: [[1e-2, 0.0], [0.0, 1e-4]],
            x0: None,
        }
    }
}

fn matrix(m: &[[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

fn is_psd_symmetric(m: &Matrix2<f64>) -> bool {
    let sym = (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * m.abs().max().max(1.0);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    sym && m[(0, 0)] >= 0.0 && m[(1, 1)] >= 0.0 && det >= -1e-18
}

impl EkfConfig {
    pub fn q_matrix(&self) -> Matrix2<f64> {
        matrix(&self.q)
    }

    pub fn p0_matrix(&self) -> Matrix2<f64> {
        matrix(&self.p0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::InvalidParam(format!(
                "measurement variance must be positive, got {}",
                self.r
            )));
        }
        if !is_psd_symmetric(&self.q_matrix()) {
            return Err(Error::InvalidParam("Q must be symmetric positive semidefinite".into()));
        }
        if !is_psd_symmetric(&self.p0_matrix()) {
            return Err(Error::InvalidParam("P0 must be symmetric positive semidefinite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    /// `(soc, u_d)`.
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
}

impl EkfState {
    pub fn new(x0: BatteryState, p0: Matrix2<f64>) -> Self {
        EkfState {
            x: Vector2::new(x0.soc, x0.u_d),
            p: p0,
        }
    }

    pub fn soc(&self) -> f64 {
        self.x[0]
    }

    pub fn u_d(&self) -> f64 {
        self.x[1]
    }
}

pub fn ekf_predict(
    state: &EkfState,
    i_l: f64,
    params: &EcmParams,
    cfg: &BatteryConfig,
    ekf_cfg: &EkfConfig,
) -> EkfState {
    let soc = soc_step(state.x[0], i_l, cfg);
    let u_d = ud_step(state.x[1], i_l, params, cfg.dt_s);
    let a = Matrix2::new(1.0, 0.0, 0.0, (-cfg.dt_s / params.tau()).exp());
    EkfState {
        x: Vector2::new(soc, u_d),
        p: a * state.p * a.transpose() + ekf_cfg.q_matrix(),
    }
}

/// Extra outputs of a measurement update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    /// `h(x_prior)`.
    pub predicted_v: f64,
    pub innovation: f64,
    pub gain: Vector2<f64>,
}

pub fn ekf_update(
    prior: &EkfState,
    measured_v: f64,
    i_l: f64,
    params: &EcmParams,
    curve: &OcvCurve,
    ekf_cfg: &EkfConfig,
) -> Result<(EkfState, UpdateInfo)> {
    let (ocv, slope) = curve.eval(prior.x[0]);
    let predicted_v = ocv - prior.x[1] - i_l * params.r0;
    let c = RowVector2::new(slope, -1.0);
    let pct = prior.p * c.transpose();
    let s = (c * pct)[(0, 0)] + ekf_cfg.r;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Numerical(format!("innovation covariance {s} is not positive")));
    }
    let gain = pct / s;
    let innovation = measured_v - predicted_v;
    let x = prior.x + gain * innovation;
    let mut p = (Matrix2::identity() - gain * c) * prior.p;
    p = (p + p.transpose()) * 0.5;
    Ok((
        EkfState { x, p },
        UpdateInfo {
            predicted_v,
            innovation,
            gain,
        },
    ))
}

/// SOC at which the streaming identifier evaluates `U_OC`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SocReference {
    /// The filter's own prior SOC. The identifier then absorbs SOC error into
    /// the parameters, so trained corrections can walk the estimate away.
    Filter,
    /// Coulomb counting on measured current from a known initial SOC, the
    /// same convention used for training.
    Counted(f64),
}

/// Where the per-step circuit parameters come from during estimation.
#[derive(Debug, Clone, Copy)]
pub enum ParamSource<'a> {
    /// FFRLS runs alongside the filter.
    Streaming(&'a FfrlsOptions, SocReference),
    /// A fixed per-step trajectory, e.g. from an offline identification.
    Frozen(&'a [EcmParams]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateStep {
    pub soc: f64,
    pub u_d: f64,
    pub voltage_pred: f64,
    pub innovation: f64,
    pub params: EcmParams,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateDiagnostics {
    pub hold_events: usize,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimation {
    pub steps: Vec<EstimateStep>,
    pub initial: BatteryState,
    pub diagnostics: EstimateDiagnostics,
}

impl Estimation {
    pub fn socs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.soc).collect()
    }
}

/// Runs the filter over a series. With `model` set, the frozen networks
/// correct the per-step parameters before each predict/update.
pub fn estimate_soc_series(
    data: &SeriesData,
    model: Option<&HybridModel>,
    cfg: &BatteryConfig,
    ekf_cfg: &EkfConfig,
    source: ParamSource<'_>,
) -> Result<Estimation> {
    ekf_cfg.validate()?;
    let n = data.len();
    let mut ident = match source {
        ParamSource::Streaming(opts, soc_ref) => {
            if let SocReference::Counted(soc0) = soc_ref {
                if !(0.0..=1.0).contains(&soc0) {
                    return Err(Error::InvalidParam(format!("reference SOC {soc0} outside [0, 1]")));
                }
            }
            Some(StreamingIdentifier::new(opts, cfg.dt_s, cfg.tau_bounds)?)
        }
        ParamSource::Frozen(params) => {
            if params.len() != n {
                return Err(Error::LengthMismatch {
                    what: "frozen parameters and series",
                    left: params.len(),
                    right: n,
                });
            }
            None
        }
    };
    let initial = ekf_cfg.x0.unwrap_or_else(|| BatteryState {
        soc: cfg.ocv.invert(data.voltage_v[0], OCV_INVERSION_TOL),
        u_d: 0.0,
    });
    let mut state = EkfState::new(initial, ekf_cfg.p0_matrix());
    let mut counted = match source {
        ParamSource::Streaming(_, SocReference::Counted(soc0)) => soc0,
        _ => 0.0,
    };
    let mut diagnostics = EstimateDiagnostics::default();
    let mut steps = Vec::with_capacity(n);

    for k in 0..n {
        let i = data.current_a[k];
        let v = data.voltage_v[k];
        let base = match (&mut ident, source) {
            (Some(id), ParamSource::Streaming(_, soc_ref)) => {
                let soc_ref = match soc_ref {
                    SocReference::Filter => soc_step(state.x[0], i, cfg),
                    SocReference::Counted(_) => {
                        counted = soc_step(counted, i, cfg);
                        counted
                    }
                };
                let step = id.push(cfg.ocv.value(soc_ref) - v, i);
                if step.updated && !step.valid {
                    diagnostics.hold_events += 1;
                }
                step.params
            }
            (None, ParamSource::Frozen(params)) => params[k],
            _ => unreachable!(),
        };
        let params = match model {
            Some(m) => {
                let (p, flags) = m.corrected(&base, &[i, v, data.temp_c[k]]);
                if flags.any() {
                    diagnostics.clamp_events += 1;
                }
                p
            }
            None => base,
        };
        let prior = ekf_predict(&state, i, &params, cfg, ekf_cfg);
        let (post, info) = ekf_update(&prior, v, i, &params, &cfg.ocv, ekf_cfg)
            .map_err(|e| Error::Numerical(format!("step {k}: {e}")))?;
        state = post;
        steps.push(EstimateStep {
            soc: state.soc(),
            u_d: state.u_d(),
            voltage_pred: info.predicted_v,
            innovation: info.innovation,
            params,
        });
    }
    Ok(Estimation {
        steps,
        initial,
        diagnostics,
    })
}

/// `step,time_s,soc_true,soc_est,u_d_est,voltage_meas,voltage_pred,innovation`;
/// `soc_true` is left empty when unknown. Reported SOC is clamped to [0, 1].
pub fn write_estimation_csv<W: Write>(
    est: &Estimation,
    data: &SeriesData,
    soc_true: Option<&[f64]>,
    out: W,
) -> Result<()> {
    if let Some(t) = soc_true {
        if t.len() != est.steps.len() {
            return Err(Error::LengthMismatch {
                what: "true SOC and estimate",
                left: t.len(),
                right: est.steps.len(),
            });
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "time_s",
        "soc_true",
        "soc_est",
        "u_d_est",
        "voltage_meas",
        "voltage_pred",
        "innovation",
    ])?;
    for (k, s) in est.steps.iter().enumerate() {
        w.write_record([
            k.to_string(),
            data.time_s[k].to_string(),
            soc_true.map(|t| t[k].to_string()).unwrap_or_default(),
            s.soc.clamp(0.0, 1.0).to_string(),
            s.u_d.to_string(),
            data.voltage_v[k].to_string(),
            s.voltage_pred.to_string(),
            s.innovation.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<estimation csv>", e))?;
    Ok(())
}

/// Columns of an estimation CSV needed for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationTable {
    pub soc_true: Option<Vec<f64>>,
    pub soc_est: Vec<f64>,
    pub voltage_meas: Vec<f64>,
    pub voltage_pred: Vec<f64>,
}

/// Reads back [`write_estimation_csv`] output. `soc_true` is `None` unless
/// every row carries it.
pub fn read_estimation_csv<R: std::io::Read>(input: R, path: &Path) -> Result<EstimationTable> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.into(),
            })
    };
    let cols = [col("soc_est")?, col("voltage_meas")?, col("voltage_pred")?];
    let true_col = headers.iter().position(|h| h == "soc_true");
    let mut table = EstimationTable {
        soc_true: None,
        soc_est: Vec::new(),
        voltage_meas: Vec::new(),
        voltage_pred: Vec::new(),
    };
    let mut truth = Vec::new();
    let mut truth_complete = true_col.is_some();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| rec.get(c).and_then(|s| s.trim().parse::<f64>().ok());
        let mut vals = [0.0; 3];
        for (v, &c) in vals.iter_mut().zip(&cols) {
            *v = parse(c).ok_or_else(|| Error::BadRow {
                path: path.to_path_buf(),
                row: row + 1,
                message: format!("non-numeric `{}`", &headers[c]),
            })?;
        }
        table.soc_est.push(vals[0]);
        table.voltage_meas.push(vals[1]);
        table.voltage_pred.push(vals[2]);
        if let Some(c) = true_col {
            match parse(c) {
                Some(v) => truth.push(v),
                None => truth_complete = false,
            }
        }
    }
    if table.soc_est.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    table.soc_true = truth_complete.then_some(truth);
    Ok(table)
}
