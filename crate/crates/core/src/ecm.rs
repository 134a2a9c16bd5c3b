//! First-order equivalent circuit model: OCV curve, coulomb counting, the
//! discretized RC recurrence and terminal-voltage prediction.
//!
//! Sign convention: current is discharge-positive. SOC is never clamped in
//! here; clamping to [0, 1] is a reporting concern.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of grid points used for the OCV monotonicity check.
pub const OCV_CHECK_POINTS: usize = 101;

/// Default polynomial degree for fitted OCV curves.
pub const DEFAULT_OCV_DEGREE: usize = 9;

/// Terminal voltage range of the reference 18650 cell.
pub const CELL_VOLTAGE_RANGE: (f64, f64) = (2.5, 4.2);

/// Rated capacity of the reference cell, 2.9 Ah.
pub const RATED_CAPACITY_AH: f64 = 2.9;

pub fn amp_hours_to_coulombs(ah: f64) -> f64 {
    ah * 3600.0
}

/// Allowed range of the RC time constant `rd * cd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauBounds {
    pub min_s: f64,
    pub max_s: f64,
}

impl TauBounds {
    /// `[dt/10, 1e5 s]`; keeps `exp(-dt/tau)` away from underflow and 1.
    pub fn for_dt(dt_s: f64) -> Self {
        TauBounds {
            min_s: dt_s / 10.0,
            max_s: 1e5,
        }
    }

    pub fn contains(&self, tau: f64) -> bool {
        tau >= self.min_s && tau <= self.max_s
    }
}

/// The circuit triple (R0, RD, CD).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcmParams {
    /// Ohmic resistance, ohms.
    pub r0: f64,
    /// Polarization resistance, ohms.
    pub rd: f64,
    /// Polarization capacitance, farads.
    pub cd: f64,
}

impl EcmParams {
    /// Builds a triple, checking positivity and finiteness. The time-constant
    /// bound is checked separately by [`EcmParams::validate`] since it depends
    /// on the sampling interval.
    pub fn new(r0: f64, rd: f64, cd: f64) -> Result<Self> {
        let p = EcmParams { r0, rd, cd };
        if !p.is_positive() {
            return Err(Error::InvalidParam(format!(
                "ECM parameters must be finite and positive: r0={r0}, rd={rd}, cd={cd}"
            )));
        }
        Ok(p)
    }

    pub fn tau(&self) -> f64 {
        self.rd * self.cd
    }

    fn is_positive(&self) -> bool {
        [self.r0, self.rd, self.cd].iter().all(|v| v.is_finite() && *v > 0.0)
    }

    pub fn is_valid(&self, bounds: &TauBounds) -> bool {
        self.is_positive() && bounds.contains(self.tau())
    }

    pub fn validate(&self, bounds: &TauBounds) -> Result<()> {
        if !self.is_positive() {
            return Err(Error::InvalidParam(format!(
                "ECM parameters must be finite and positive: {self:?}"
            )));
        }
        let tau = self.tau();
        if !bounds.contains(tau) {
            return Err(Error::InvalidParam(format!(
                "time constant {tau:.6e} s outside [{}, {}]",
                bounds.min_s, bounds.max_s
            )));
        }
        Ok(())
    }
}

/// (SOC, U_D) pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryState {
    pub soc: f64,
    pub u_d: f64,
}

/// Open-circuit voltage as a polynomial in SOC, ascending coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcvCurve {
    coeffs: Vec<f64>,
    valid_soc_range: [f64; 2],
}

impl OcvCurve {
    /// Checks that the polynomial is strictly increasing on a uniform
    /// 101-point grid over `valid_soc_range`.
    pub fn new(coeffs: Vec<f64>, valid_soc_range: [f64; 2]) -> Result<Self> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParam(
                "OCV coefficients must be non-empty and finite".into(),
            ));
        }
        let [lo, hi] = valid_soc_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParam(format!("invalid OCV soc range [{lo}, {hi}]")));
        }
        let curve = OcvCurve {
            coeffs,
            valid_soc_range,
        };
        curve.check_monotone()?;
        Ok(curve)
    }

    /// Constant and other non-increasing curves are accepted here; used for
    /// tests and for callers that validate elsewhere.
    pub fn new_unchecked(coeffs: Vec<f64>, valid_soc_range: [f64; 2]) -> Self {
        OcvCurve {
            coeffs,
            valid_soc_range,
        }
    }

    fn check_monotone(&self) -> Result<()> {
        let [lo, hi] = self.valid_soc_range;
        let step = (hi - lo) / (OCV_CHECK_POINTS - 1) as f64;
        let mut prev = self.value(lo);
        for k in 1..OCV_CHECK_POINTS {
            let s = lo + step * k as f64;
            let v = self.value(s);
            if v <= prev {
                return Err(Error::NonMonotoneOcv {
                    soc: s,
                    slope: (v - prev) / step,
                });
            }
            prev = v;
        }
        Ok(())
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn valid_soc_range(&self) -> [f64; 2] {
        self.valid_soc_range
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_extrapolated(&self, soc: f64) -> bool {
        soc < self.valid_soc_range[0] || soc > self.valid_soc_range[1]
    }

    /// Horner evaluation of the polynomial and its derivative.
    pub fn eval(&self, soc: f64) -> (f64, f64) {
        let mut value = 0.0;
        let mut slope = 0.0;
        for &c in self.coeffs.iter().rev() {
            slope = slope * soc + value;
            value = value * soc + c;
        }
        (value, slope)
    }

    pub fn value(&self, soc: f64) -> f64 {
        self.eval(soc).0
    }

    /// Warns when the endpoints of the valid range evaluate outside the
    /// cell's terminal-voltage window.
    pub fn endpoint_warning(&self, v_min: f64, v_max: f64) -> Option<String> {
        let [lo, hi] = self.valid_soc_range;
        let (v_lo, v_hi) = (self.value(lo), self.value(hi));
        let tol = 0.05;
        if v_lo < v_min - tol || v_hi > v_max + tol {
            Some(format!(
                "OCV endpoints {v_lo:.4} V / {v_hi:.4} V fall outside the cell range {v_min}-{v_max} V"
            ))
        } else {
            None
        }
    }

    /// SOC whose OCV equals `voltage`, by bisection over the valid range.
    /// Saturates at the range ends.
    pub fn invert(&self, voltage: f64, tol: f64) -> f64 {
        let [mut lo, mut hi] = self.valid_soc_range;
        if voltage <= self.value(lo) {
            return lo;
        }
        if voltage >= self.value(hi) {
            return hi;
        }
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.value(mid) < voltage {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// `(f(soc), f'(soc))`, plus whether the point lies outside the fitted range.
pub fn ocv_eval(curve: &OcvCurve, soc: f64) -> (f64, f64, bool) {
    let (v, dv) = curve.eval(soc);
    (v, dv, curve.is_extrapolated(soc))
}

/// Least-squares polynomial fit of OCV against SOC.
pub fn fit_ocv(soc_points: &[f64], voltage_points: &[f64], degree: usize) -> Result<OcvCurve> {
    if soc_points.len() != voltage_points.len() {
        return Err(Error::LengthMismatch {
            what: "soc and voltage points",
            left: soc_points.len(),
            right: voltage_points.len(),
        });
    }
    if let Some(s) = soc_points.iter().find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0) {
        return Err(Error::InvalidParam(format!("soc point {s} outside [0, 1]")));
    }
    if voltage_points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("non-finite voltage point".into()));
    }
    let mut distinct = soc_points.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < degree + 1 {
        return Err(Error::InsufficientData {
            needed: degree + 1,
            got: distinct.len(),
        });
    }

    let n = soc_points.len();
    let vander = DMatrix::from_fn(n, degree + 1, |r, c| soc_points[r].powi(c as i32));
    let rhs = DVector::from_column_slice(voltage_points);
    let svd = vander.svd(true, true);
    let coeffs = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Numerical(format!("OCV least squares failed: {e}")))?;

    let lo = distinct[0];
    let hi = distinct[distinct.len() - 1];
    OcvCurve::new(coeffs.iter().copied().collect(), [lo, hi])
}

/// Battery constants shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    /// Usable capacity, ampere-seconds.
    pub capacity_coulombs: f64,
    /// Sampling interval, seconds.
    pub dt_s: f64,
    pub ocv: OcvCurve,
    pub tau_bounds: TauBounds,
}

impl BatteryConfig {
    pub fn new(capacity_coulombs: f64, dt_s: f64, ocv: OcvCurve) -> Result<Self> {
        if !(capacity_coulombs.is_finite() && capacity_coulombs > 0.0) {
            return Err(Error::InvalidParam(format!(
                "capacity must be positive, got {capacity_coulombs}"
            )));
        }
        if !(dt_s.is_finite() && dt_s > 0.0) {
            return Err(Error::InvalidParam(format!(
                "sampling interval must be positive, got {dt_s}"
            )));
        }
        Ok(BatteryConfig {
            capacity_coulombs,
            dt_s,
            ocv,
            tau_bounds: TauBounds::for_dt(dt_s),
        })
    }
}

/// Coulomb counting, left rectangle rule.
pub fn soc_step(soc: f64, i_l: f64, cfg: &BatteryConfig) -> f64 {
    soc - i_l * cfg.dt_s / cfg.capacity_coulombs
}

/// SOC trajectory from coulomb counting; element `k` is the SOC after the
/// current of step `k` has flowed.
pub fn coulomb_count(soc0: f64, currents: &[f64], cfg: &BatteryConfig) -> Vec<f64> {
    let mut soc = soc0;
    currents
        .iter()
        .map(|&i| {
            soc = soc_step(soc, i, cfg);
            soc
        })
        .collect()
}

/// Exact zero-order-hold update of the RC voltage over one interval.
pub fn ud_step(u_d: f64, i_l: f64, params: &EcmParams, dt_s: f64) -> f64 {
    let decay = (-dt_s / params.tau()).exp();
    let steady = params.rd * i_l;
    steady + decay * (u_d - steady)
}

pub fn terminal_voltage(soc: f64, u_d: f64, i_l: f64, r0: f64, curve: &OcvCurve) -> f64 {
    curve.value(soc) - u_d - i_l * r0
}

/// Forward simulation: at each step the RC voltage is advanced with that
/// step's current and parameters, then the terminal voltage is read out.
pub fn simulate_series(
    params_per_step: &[EcmParams],
    currents: &[f64],
    socs: &[f64],
    cfg: &BatteryConfig,
    u_d0: f64,
) -> Result<Vec<f64>> {
    let n = currents.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if params_per_step.len() != n {
        return Err(Error::LengthMismatch {
            what: "parameters and currents",
            left: params_per_step.len(),
            right: n,
        });
    }
    if socs.len() != n {
        return Err(Error::LengthMismatch {
            what: "socs and currents",
            left: socs.len(),
            right: n,
        });
    }
    let mut u_d = u_d0;
    let mut out = Vec::with_capacity(n);
    for (k, ((p, &i), &soc)) in params_per_step.iter().zip(currents).zip(socs).enumerate() {
        p.validate(&cfg.tau_bounds)
            .map_err(|e| Error::InvalidParam(format!("step {k}: {e}")))?;
        u_d = ud_step(u_d, i, p, cfg.dt_s);
        out.push(terminal_voltage(soc, u_d, i, p.r0, &cfg.ocv));
    }
    Ok(out)
}
