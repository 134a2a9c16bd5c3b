//! Forgetting-factor recursive least squares on the bilinear form of the
//! first-order ECM, and the algebra between the regression coefficients and
//! the circuit parameters.
//!
//! The regression output is the overpotential `y = U_OC - U_t`, which is
//! positive under discharge. With discharge-positive current this is the
//! orientation for which the coefficient map below yields positive
//! resistances:
//!
//! ```text
//! y_k = -a1 * y_{k-1} + a2 * i_k + a3 * i_{k-1}
//! ```

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::SeriesData;
use crate::ecm::{BatteryConfig, EcmParams, OcvCurve, TauBounds};
use crate::error::{Error, Result};

/// Minimum distance of `a1` from `+1` and `-1` for the inverse map.
pub const SINGULAR_A1_MARGIN: f64 = 1e-9;

/// Condition number of `P` above which a run is reported ill-conditioned.
pub const ILL_CONDITIONED_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl ThetaVector {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.a1, self.a2, self.a3)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        ThetaVector {
            a1: v[0],
            a2: v[1],
            a3: v[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a1.is_finite() && self.a2.is_finite() && self.a3.is_finite()
    }
}

/// `[-y_{k-1}, i_k, i_{k-1}]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regressor(pub Vector3<f64>);

impl Regressor {
    pub fn new(y_prev: f64, i_now: f64, i_prev: f64) -> Self {
        Regressor(Vector3::new(-y_prev, i_now, i_prev))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub fn theta_forward(params: &EcmParams, dt_s: f64) -> ThetaVector {
    let tau = params.tau();
    let den = dt_s + 2.0 * tau;
    let cross = 2.0 * params.r0 * params.rd * params.cd;
    let series = params.r0 * dt_s + params.rd * dt_s;
    ThetaVector {
        a1: (dt_s - 2.0 * tau) / den,
        a2: (series + cross) / den,
        a3: (series - cross) / den,
    }
}

/// Inverse of [`theta_forward`]. Fails on a near-singular `a1` or when the
/// result is not a physical circuit within `bounds`.
pub fn params_from_theta(theta: &ThetaVector, dt_s: f64, bounds: &TauBounds) -> Result<EcmParams> {
    let ThetaVector { a1, a2, a3 } = *theta;
    if !theta.is_finite() || (1.0 + a1).abs() <= SINGULAR_A1_MARGIN || (1.0 - a1).abs() <= SINGULAR_A1_MARGIN {
        return Err(Error::SingularTheta { a1 });
    }
    let tau = dt_s * (1.0 - a1) / (2.0 * (1.0 + a1));
    let r0 = (a2 - a3) / (1.0 - a1);
    let rd = (a2 + a3) / (1.0 + a1) - r0;
    let cd = tau / rd;
    let params = EcmParams { r0, rd, cd };
    if !params.is_valid(bounds) {
        return Err(Error::NonPhysical { r0, rd, cd });
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfrlsState {
    pub theta: ThetaVector,
    pub p: Matrix3<f64>,
    pub lambda: f64,
    pub last_valid_params: Option<EcmParams>,
}

impl FfrlsState {
    pub fn new(lambda: f64, p0_scale: f64, theta0: ThetaVector) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "forgetting factor must lie in (0, 1], got {lambda}"
            )));
        }
        if !(p0_scale.is_finite() && p0_scale > 0.0) {
            return Err(Error::InvalidParam(format!(
                "initial covariance scale must be positive, got {p0_scale}"
            )));
        }
        Ok(FfrlsState {
            theta: theta0,
            p: Matrix3::identity() * p0_scale,
            lambda,
            last_valid_params: None,
        })
    }

    /// One FFRLS update. Returns `false` and leaves the state untouched when
    /// the regressor or any intermediate is non-finite.
    pub fn step(&mut self, y: f64, phi: &Regressor) -> bool {
        if !y.is_finite() || !phi.is_finite() {
            return false;
        }
        let phi = phi.0;
        let p_phi = self.p * phi;
        let denom = self.lambda + phi.dot(&p_phi);
        let gain = p_phi / denom;
        let theta = self.theta.as_vector();
        let innovation = y - phi.dot(&theta);
        let theta_next = theta + gain * innovation;
        let mut p_next = (Matrix3::identity() - gain * phi.transpose()) * self.p / self.lambda;
        p_next = (p_next + p_next.transpose()) * 0.5;

        if !denom.is_finite()
            || denom <= 0.0
            || theta_next.iter().any(|v| !v.is_finite())
            || p_next.iter().any(|v| !v.is_finite())
        {
            return false;
        }
        self.theta = ThetaVector::from_vector(&theta_next);
        self.p = p_next;
        true
    }

    /// Ratio of largest to smallest eigenvalue of `P`; infinite when `P` has
    /// lost definiteness.
    pub fn p_condition(&self) -> f64 {
        let eig = SymmetricEigen::new(self.p).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

pub fn ffrls_init(lambda: f64, p0_scale: f64, theta0: ThetaVector) -> Result<FfrlsState> {
    FfrlsState::new(lambda, p0_scale, theta0)
}

/// Functional form of [`FfrlsState::step`]: the updated state and whether
/// the update was applied.
pub fn ffrls_step(state: &FfrlsState, y: f64, phi: &Regressor) -> (FfrlsState, bool) {
    let mut next = state.clone();
    let applied = next.step(y, phi);
    (next, applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfrlsOptions {
    pub lambda: f64,
    pub p0_scale: f64,
    /// Mild prior used for `theta0` and as the first held parameter set.
    pub prior: EcmParams,
    /// Leading steps excluded from training targets downstream.
    pub warmup_skip: usize,
}

impl Default for FfrlsOptions {
    fn default() -> Self {
        FfrlsOptions {
            lambda: 0.99,
            p0_scale: 1e5,
            prior: EcmParams {
                r0: 0.05,
                rd: 0.03,
                cd: 1000.0,
            },
            warmup_skip: 200,
        }
    }
}

/// Output of one streaming step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentStep {
    pub theta: ThetaVector,
    /// Parameters to use at this step (held when the inversion failed).
    pub params: EcmParams,
    /// Whether `params` came from this step's estimate.
    pub valid: bool,
    /// Whether the FFRLS update itself was applied.
    pub updated: bool,
}

/// Streaming identifier: one sample in, one parameter set out.
#[derive(Debug, Clone)]
pub struct StreamingIdentifier {
    state: FfrlsState,
    dt_s: f64,
    bounds: TauBounds,
    prev: Option<(f64, f64)>,
}

impl StreamingIdentifier {
    pub fn new(opts: &FfrlsOptions, dt_s: f64, bounds: TauBounds) -> Result<Self> {
        opts.prior.validate(&bounds)?;
        let mut state = FfrlsState::new(opts.lambda, opts.p0_scale, theta_forward(&opts.prior, dt_s))?;
        state.last_valid_params = Some(opts.prior);
        Ok(StreamingIdentifier {
            state,
            dt_s,
            bounds,
            prev: None,
        })
    }

    pub fn state(&self) -> &FfrlsState {
        &self.state
    }

    /// Feeds the overpotential `y = U_OC - U_t` and the current of this step.
    pub fn push(&mut self, y: f64, current: f64) -> IdentStep {
        let updated = match self.prev {
            Some((y_prev, i_prev)) => self.state.step(y, &Regressor::new(y_prev, current, i_prev)),
            None => false,
        };
        self.prev = Some((y, current));

        let theta = self.state.theta;
        let (params, valid) = if updated {
            match params_from_theta(&theta, self.dt_s, &self.bounds) {
                Ok(p) => {
                    self.state.last_valid_params = Some(p);
                    (p, true)
                }
                Err(_) => (self.held(), false),
            }
        } else {
            (self.held(), false)
        };
        IdentStep {
            theta,
            params,
            valid,
            updated,
        }
    }

    fn held(&self) -> EcmParams {
        self.state
            .last_valid_params
            .expect("streaming identifier always holds a prior")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentDiagnostics {
    /// Steps where the estimate was non-physical and the last valid set was held.
    pub hold_events: Vec<usize>,
    /// Steps where the FFRLS update was rejected as numerically degenerate.
    pub degenerate_steps: Vec<usize>,
    pub final_p_condition: f64,
    pub ill_conditioned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub params: Vec<EcmParams>,
    pub steps: Vec<IdentStep>,
    pub diagnostics: IdentDiagnostics,
}

/// Runs FFRLS over a series using the given SOC trajectory for `U_OC`.
pub fn identify_series(
    data: &SeriesData,
    curve: &OcvCurve,
    socs: &[f64],
    cfg: &BatteryConfig,
    opts: &FfrlsOptions,
) -> Result<Identification> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if socs.len() != n {
        return Err(Error::LengthMismatch {
            what: "socs and series",
            left: socs.len(),
            right: n,
        });
    }
    let mut ident = StreamingIdentifier::new(opts, cfg.dt_s, cfg.tau_bounds)?;
    let mut steps = Vec::with_capacity(n);
    let mut diagnostics = IdentDiagnostics::default();
    for k in 0..n {
        let y = curve.value(socs[k]) - data.voltage_v[k];
        let step = ident.push(y, data.current_a[k]);
        if k > 0 {
            if !step.updated {
                diagnostics.degenerate_steps.push(k);
            } else if !step.valid {
                diagnostics.hold_events.push(k);
            }
        }
        steps.push(step);
    }
    diagnostics.final_p_condition = ident.state().p_condition();
    diagnostics.ill_conditioned =
        !diagnostics.degenerate_steps.is_empty() || !(diagnostics.final_p_condition < ILL_CONDITIONED_THRESHOLD);
    Ok(Identification {
        params: steps.iter().map(|s| s.params).collect(),
        steps,
        diagnostics,
    })
}

/// Writes the per-step identification CSV:
/// `step,a1,a2,a3,r0,rd,cd,valid_flag`.
pub fn write_identification_csv<W: std::io::Write>(ident: &Identification, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "a1", "a2", "a3", "r0", "rd", "cd", "valid_flag"])?;
    for (k, s) in ident.steps.iter().enumerate() {
        w.write_record([
            k.to_string(),
            s.theta.a1.to_string(),
            s.theta.a2.to_string(),
            s.theta.a3.to_string(),
            s.params.r0.to_string(),
            s.params.rd.to_string(),
            s.params.cd.to_string(),
            u8::from(s.valid).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<identification csv>", e))?;
    Ok(())
}

/// Reads back the parameter columns of an identification CSV.
pub fn read_identification_csv<R: std::io::Read>(input: R) -> Result<Vec<EcmParams>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: "<identification csv>".into(),
                column: name.into(),
            })
    };
    let (ir0, ird, icd) = (col("r0")?, col("rd")?, col("cd")?);
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |idx: usize| -> Result<f64> {
            rec.get(idx)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::BadRow {
                    path: "<identification csv>".into(),
                    row: row + 1,
                    message: format!("bad number in column {idx}"),
                })
        };
        out.push(EcmParams {
            r0: get(ir0)?,
            rd: get(ird)?,
            cd: get(icd)?,
        });
    }
    Ok(out)
}
