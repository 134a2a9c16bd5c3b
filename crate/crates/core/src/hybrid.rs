//! Neural-corrected ECM: three networks add corrections to the identified
//! (R0, RD, CD), the corrected circuit is pushed through the RC recurrence,
//! and the networks are trained on the terminal-voltage MSE by
//! backpropagating through the unrolled recurrence.
//!
//! Gradients are truncated at window boundaries: the RC voltage entering a
//! window comes from a sequential forward pass and is treated as a constant.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mse, SeriesData};
use crate::ecm::{terminal_voltage, ud_step, BatteryConfig, EcmParams, OcvCurve, TauBounds};
use crate::error::{Error, Result};
use crate::nn::{
    fnn_backward_into, fnn_forward, fnn_init, optimizer_step, FnnConfig, FnnModel, ForwardCache, Gradients, NormStats,
    OptimizerState, INPUTS,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Floors applied after correction, plus the time-constant window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamGuards {
    pub r0_floor: f64,
    pub rd_floor: f64,
    pub cd_floor: f64,
    pub tau: TauBounds,
}

impl ParamGuards {
    pub fn for_dt(dt_s: f64) -> Self {
        ParamGuards {
            r0_floor: 1e-6,
            rd_floor: 1e-6,
            cd_floor: 1.0,
            tau: TauBounds::for_dt(dt_s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrectionTriple {
    pub d_r0: f64,
    pub d_rd: f64,
    pub d_cd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClampFlags {
    pub r0: bool,
    pub rd: bool,
    pub cd: bool,
    /// `cd` was moved to bring `rd * cd` into the tau bounds; the time
    /// constant is then fixed at the bound.
    pub tau: bool,
}

impl ClampFlags {
    pub fn any(&self) -> bool {
        self.r0 || self.rd || self.cd || self.tau
    }
}

/// Adds the corrections and projects the result onto the guards.
pub fn correct_params(base: &EcmParams, corr: &CorrectionTriple, guards: &ParamGuards) -> (EcmParams, ClampFlags) {
    let mut flags = ClampFlags::default();
    let mut r0 = base.r0 + corr.d_r0;
    if !(r0 >= guards.r0_floor) {
        r0 = guards.r0_floor;
        flags.r0 = true;
    }
    let mut rd = base.rd + corr.d_rd;
    if !(rd >= guards.rd_floor) {
        rd = guards.rd_floor;
        flags.rd = true;
    }
    let mut cd = base.cd + corr.d_cd;
    if !(cd >= guards.cd_floor) {
        cd = guards.cd_floor;
        flags.cd = true;
    }
    let tau = rd * cd;
    if tau < guards.tau.min_s {
        cd = guards.tau.min_s / rd;
        flags.cd = true;
        flags.tau = true;
    } else if tau > guards.tau.max_s {
        cd = guards.tau.max_s / rd;
        flags.cd = true;
        flags.tau = true;
    }
    (EcmParams { r0, rd, cd }, flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub fnn_r0: FnnModel,
    pub fnn_rd: FnnModel,
    pub fnn_cd: FnnModel,
    pub ocv: OcvCurve,
    pub dt_s: f64,
    pub guards: ParamGuards,
    pub meta: TrainingMeta,
}

impl HybridModel {
    /// Untrained model; every network outputs exactly zero.
    pub fn fresh(configs: &[FnnConfig; 3], norm: NormStats, cfg: &BatteryConfig, seed: u64) -> Result<Self> {
        let mut nets = Vec::with_capacity(3);
        for c in configs {
            let mut net = fnn_init(c)?;
            net.norm_stats = norm;
            nets.push(net);
        }
        let fnn_cd = nets.pop().unwrap();
        let fnn_rd = nets.pop().unwrap();
        let fnn_r0 = nets.pop().unwrap();
        Ok(HybridModel {
            fnn_r0,
            fnn_rd,
            fnn_cd,
            ocv: cfg.ocv.clone(),
            dt_s: cfg.dt_s,
            guards: ParamGuards {
                tau: cfg.tau_bounds,
                ..ParamGuards::for_dt(cfg.dt_s)
            },
            meta: TrainingMeta {
                seed,
                epochs_run: 0,
                final_loss: None,
            },
        })
    }

    pub fn networks(&self) -> [&FnnModel; 3] {
        [&self.fnn_r0, &self.fnn_rd, &self.fnn_cd]
    }

    fn networks_mut(&mut self) -> [&mut FnnModel; 3] {
        [&mut self.fnn_r0, &mut self.fnn_rd, &mut self.fnn_cd]
    }

    pub fn corrections(&self, input: &[f64; INPUTS]) -> CorrectionTriple {
        CorrectionTriple {
            d_r0: fnn_forward(&self.fnn_r0, input).0,
            d_rd: fnn_forward(&self.fnn_rd, input).0,
            d_cd: fnn_forward(&self.fnn_cd, input).0,
        }
    }

    fn corrections_cached(&self, input: &[f64; INPUTS]) -> (CorrectionTriple, [ForwardCache; 3]) {
        let (d_r0, c0) = fnn_forward(&self.fnn_r0, input);
        let (d_rd, c1) = fnn_forward(&self.fnn_rd, input);
        let (d_cd, c2) = fnn_forward(&self.fnn_cd, input);
        (CorrectionTriple { d_r0, d_rd, d_cd }, [c0, c1, c2])
    }

    /// Corrected parameters for one measurement `(current, voltage, temp)`.
    pub fn corrected(&self, base: &EcmParams, input: &[f64; INPUTS]) -> (EcmParams, ClampFlags) {
        correct_params(base, &self.corrections(input), &self.guards)
    }

    pub fn validate(&self) -> Result<()> {
        for net in self.networks() {
            net.validate()?;
        }
        if self.fnn_rd.norm_stats != self.fnn_r0.norm_stats || self.fnn_cd.norm_stats != self.fnn_r0.norm_stats {
            return Err(Error::CorruptModel(
                "all three networks must share normalization statistics".into(),
            ));
        }
        Ok(())
    }
}

/// Aligned slices for one stretch of a series.
#[derive(Debug, Clone, Copy)]
pub struct WindowInput<'a> {
    pub current: &'a [f64],
    pub voltage: &'a [f64],
    pub temp: &'a [f64],
    pub socs: &'a [f64],
    pub base: &'a [EcmParams],
}

impl<'a> WindowInput<'a> {
    pub fn from_series(data: &'a SeriesData, socs: &'a [f64], base: &'a [EcmParams]) -> Self {
        WindowInput {
            current: &data.current_a,
            voltage: &data.voltage_v,
            temp: &data.temp_c,
            socs,
            base,
        }
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> WindowInput<'a> {
        WindowInput {
            current: &self.current[start..end],
            voltage: &self.voltage[start..end],
            temp: &self.temp[start..end],
            socs: &self.socs[start..end],
            base: &self.base[start..end],
        }
    }

    fn features(&self, k: usize) -> [f64; INPUTS] {
        [self.current[k], self.voltage[k], self.temp[k]]
    }

    fn check(&self) -> Result<()> {
        let n = self.current.len();
        if n == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        for (what, len) in [
            ("window voltage", self.voltage.len()),
            ("window temperature", self.temp.len()),
            ("window socs", self.socs.len()),
            ("window base parameters", self.base.len()),
        ] {
            if len != n {
                return Err(Error::LengthMismatch {
                    what,
                    left: len,
                    right: n,
                });
            }
        }
        Ok(())
    }
}

/// Everything the reverse pass needs about one step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub nets: [ForwardCache; 3],
    pub params: EcmParams,
    pub flags: ClampFlags,
    pub current: f64,
    pub u_prev: f64,
    pub u: f64,
    pub decay: f64,
}

#[derive(Debug, Clone)]
pub struct WindowCache {
    pub steps: Vec<StepCache>,
    pub predictions: Vec<f64>,
}

fn advance(ocv: &OcvCurve, params: &EcmParams, u_prev: f64, current: f64, soc: f64, dt_s: f64) -> (f64, f64) {
    let u = ud_step(u_prev, current, params, dt_s);
    (u, terminal_voltage(soc, u, current, params.r0, ocv))
}

/// Forward pass over a window with the differentiation cache.
pub fn predict_window(model: &HybridModel, window: &WindowInput<'_>, u_d0: f64) -> Result<(Vec<f64>, WindowCache)> {
    window.check()?;
    let mut steps = Vec::with_capacity(window.len());
    let mut predictions = Vec::with_capacity(window.len());
    let mut u_prev = u_d0;
    for k in 0..window.len() {
        let base = &window.base[k];
        base.validate(&model.guards.tau)
            .map_err(|e| Error::InvalidParam(format!("base parameters at window step {k}: {e}")))?;
        let (corr, nets) = model.corrections_cached(&window.features(k));
        let (params, flags) = correct_params(base, &corr, &model.guards);
        let current = window.current[k];
        let (u, v) = advance(&model.ocv, &params, u_prev, current, window.socs[k], model.dt_s);
        predictions.push(v);
        steps.push(StepCache {
            nets,
            params,
            flags,
            current,
            u_prev,
            u,
            decay: (-model.dt_s / params.tau()).exp(),
        });
        u_prev = u;
    }
    Ok((predictions.clone(), WindowCache { steps, predictions }))
}

/// Forward-only run over a whole input. Returns predicted voltages and the
/// RC voltage after every step.
pub fn simulate_hybrid(
    model: Option<&HybridModel>,
    input: &WindowInput<'_>,
    ocv: &OcvCurve,
    dt_s: f64,
    u_d0: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    input.check()?;
    let mut preds = Vec::with_capacity(input.len());
    let mut uds = Vec::with_capacity(input.len());
    let mut u = u_d0;
    for k in 0..input.len() {
        let params = match model {
            Some(m) => m.corrected(&input.base[k], &input.features(k)).0,
            None => input.base[k],
        };
        let (u_next, v) = advance(ocv, &params, u, input.current[k], input.socs[k], dt_s);
        u = u_next;
        preds.push(v);
        uds.push(u);
    }
    Ok((preds, uds))
}

/// Physics-informed loss: MSE between predicted and measured terminal voltage.
pub fn loss_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    mse(pred, truth)
}

/// Gradients of the three networks, in `[r0, rd, cd]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridGradients(pub [Gradients; 3]);

impl HybridGradients {
    pub fn zeros_like(model: &HybridModel) -> Self {
        HybridGradients([
            Gradients::zeros_like(&model.fnn_r0),
            Gradients::zeros_like(&model.fnn_rd),
            Gradients::zeros_like(&model.fnn_cd),
        ])
    }
}

/// Per-step sensitivities of the window loss with respect to the three
/// corrections, before they enter the networks.
pub fn correction_sensitivities(cache: &WindowCache, truth: &[f64], dt_s: f64) -> Result<Vec<[f64; 3]>> {
    let n = cache.steps.len();
    if truth.len() != n {
        return Err(Error::LengthMismatch {
            what: "truth window and cache",
            left: truth.len(),
            right: n,
        });
    }
    let mut sens = vec![[0.0; 3]; n];
    // adjoint of u_k, accumulated backwards
    let mut adj_u = 0.0;
    let mut next_decay = 0.0;
    for k in (0..n).rev() {
        let s = &cache.steps[k];
        let dl_dv = 2.0 * (cache.predictions[k] - truth[k]) / n as f64;
        adj_u = -dl_dv + adj_u * next_decay;
        next_decay = s.decay;

        let p = &s.params;
        let tau = p.tau();
        let du_dtau = (s.u_prev - p.rd * s.current) * s.decay * dt_s / (tau * tau);
        let (dtau_drd, dtau_dcd) = if s.flags.tau { (0.0, 0.0) } else { (p.cd, p.rd) };
        let du_drd = s.current * (1.0 - s.decay) + du_dtau * dtau_drd;
        let du_dcd = du_dtau * dtau_dcd;

        sens[k] = [
            if s.flags.r0 { 0.0 } else { -dl_dv * s.current },
            if s.flags.rd { 0.0 } else { adj_u * du_drd },
            if s.flags.cd { 0.0 } else { adj_u * du_dcd },
        ];
    }
    Ok(sens)
}

/// Exact gradient of the window MSE with respect to every weight of the
/// three networks. The RC voltage entering the window is a constant.
pub fn backward_window(model: &HybridModel, cache: &WindowCache, truth: &[f64]) -> Result<HybridGradients> {
    let sens = correction_sensitivities(cache, truth, model.dt_s)?;
    let mut grads = HybridGradients::zeros_like(model);
    let nets = model.networks();
    for (step, s) in cache.steps.iter().zip(&sens) {
        for j in 0..3 {
            fnn_backward_into(nets[j], &step.nets[j], s[j], &mut grads.0[j]);
        }
    }
    Ok(grads)
}

/// Gradient truncation policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingWindowing {
    pub window_len: usize,
    pub stride: usize,
}

impl Default for TrainingWindowing {
    fn default() -> Self {
        TrainingWindowing {
            window_len: 64,
            stride: 64,
        }
    }
}

impl TrainingWindowing {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 || self.stride > self.window_len {
            return Err(Error::InvalidParam(format!(
                "windowing requires 1 <= stride <= window_len, got stride {} window {}",
                self.stride, self.window_len
            )));
        }
        Ok(())
    }

    /// Window ranges covering `[start, end)`.
    pub fn windows(&self, start: usize, end: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut s = start;
        while s < end {
            out.push((s, (s + self.window_len).min(end)));
            if s + self.window_len >= end {
                break;
            }
            s += self.stride;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub windowing: TrainingWindowing,
    /// Leading steps excluded from the loss (FFRLS warm-up).
    pub warmup_skip: usize,
    /// Stop once the relative epoch improvement stays below this ...
    pub rel_tol: f64,
    /// ... for this many consecutive epochs.
    pub patience: usize,
    /// Seed for the per-epoch window shuffle.
    pub seed: u64,
    /// Training stops at the series index `train_end` when set; later
    /// samples are left for evaluation.
    pub train_end: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            windowing: TrainingWindowing::default(),
            warmup_skip: 200,
            rel_tol: 1e-6,
            patience: 5,
            seed: 0,
            train_end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full training-range MSE before each epoch's updates, plus the final
    /// one after the last epoch.
    pub loss_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub baseline_loss: f64,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
}

/// Offline training of the three correction networks.
pub fn train_offline(
    base_params: &[EcmParams],
    data: &SeriesData,
    socs: &[f64],
    cfg: &BatteryConfig,
    fnn_configs: &[FnnConfig; 3],
    opts: &TrainOptions,
) -> Result<(HybridModel, TrainReport)> {
    opts.windowing.validate()?;
    let n_total = data.len();
    let input = WindowInput::from_series(data, socs, base_params);
    input.check()?;
    let end = opts.train_end.unwrap_or(n_total).min(n_total);
    let start = opts.warmup_skip.min(end);
    if end - start < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: end - start,
        });
    }
    let train_input = input.slice(0, end);

    let rows: Vec<[f64; INPUTS]> = (start..end).map(|k| input.features(k)).collect();
    let norm = NormStats::from_rows(&rows)?;
    let mut model = HybridModel::fresh(fnn_configs, norm, cfg, opts.seed)?;
    let mut opt_states: Vec<OptimizerState> = model
        .networks()
        .iter()
        .map(|n| OptimizerState::new(n.optimizer, n))
        .collect();
    let max_epochs = fnn_configs.iter().map(|c| c.epochs).max().unwrap_or(0);
    let windows = opts.windowing.windows(start, end);
    let truth = &data.voltage_v[..end];

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut stalled = 0usize;
    let mut diverged = None;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..=max_epochs {
        let (preds, uds) = simulate_hybrid(Some(&model), &train_input, &model.ocv, model.dt_s, 0.0)?;
        let loss = mse(&preds[start..end], &truth[start..end])?;
        history.push(loss);
        if !loss.is_finite() {
            diverged = Some(format!("loss became non-finite at epoch {epoch}"));
            break;
        }
        if loss < best.0 {
            best = (loss, epoch, model.clone());
        }
        if epoch > 0 {
            let prev = history[epoch - 1];
            if (prev - loss) / prev < opts.rel_tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
            if stalled >= opts.patience {
                break;
            }
        }
        if epoch == max_epochs {
            break;
        }

        order.shuffle(&mut rng);
        for &w in &order {
            let (ws, we) = windows[w];
            let u_d0 = if ws == 0 { 0.0 } else { uds[ws - 1] };
            let (_, cache) = predict_window(&model, &input.slice(ws, we), u_d0)?;
            let grads = backward_window(&model, &cache, &truth[ws..we])?;
            for (j, (net, g)) in model.networks_mut().into_iter().zip(&grads.0).enumerate() {
                if epoch < fnn_configs[j].epochs && g.is_finite() {
                    optimizer_step(net, g, &mut opt_states[j], fnn_configs[j].learning_rate);
                }
            }
        }
    }

    let (best_loss, best_epoch, mut trained) = best;
    trained.meta = TrainingMeta {
        seed: opts.seed,
        epochs_run: history.len().saturating_sub(1),
        final_loss: Some(best_loss),
    };
    Ok((
        trained,
        TrainReport {
            baseline_loss: history[0],
            loss_history: history,
            best_epoch,
            best_loss,
            diverged,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkSet {
    r0: FnnModel,
    rd: FnnModel,
    cd: FnnModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    dt_s: f64,
    ocv: OcvCurve,
    guards: ParamGuards,
    networks: NetworkSet,
    training: TrainingMeta,
}

pub fn model_to_json(model: &HybridModel) -> Result<String> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        dt_s: model.dt_s,
        ocv: model.ocv.clone(),
        guards: model.guards,
        networks: NetworkSet {
            r0: model.fnn_r0.clone(),
            rd: model.fnn_rd.clone(),
            cd: model.fnn_cd.clone(),
        },
        training: model.meta.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn model_from_json(text: &str) -> Result<HybridModel> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptModel("missing format_version".into()))?;
    if version != u64::from(MODEL_FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let ocv = OcvCurve::new(file.ocv.coeffs().to_vec(), file.ocv.valid_soc_range())
        .map_err(|e| Error::CorruptModel(e.to_string()))?;
    let model = HybridModel {
        fnn_r0: file.networks.r0,
        fnn_rd: file.networks.rd,
        fnn_cd: file.networks.cd,
        ocv,
        dt_s: file.dt_s,
        guards: file.guards,
        meta: file.training,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &HybridModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HybridModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::simulate_series;

    fn base() -> EcmParams {
        EcmParams::new(0.05, 0.03, 1000.0).unwrap()
    }

    #[test]
    fn correction_adds_elementwise() {
        let g = ParamGuards::for_dt(1.0);
        let corr = CorrectionTriple {
            d_r0: 0.001,
            d_rd: -0.002,
            d_cd: 10.0,
        };
        let (p, flags) = correct_params(&base(), &corr, &g);
        assert!((p.r0 - 0.051).abs() < 1e-15);
        assert!((p.rd - 0.028).abs() < 1e-15);
        assert!((p.cd - 1010.0).abs() < 1e-12);
        assert!(!flags.any());
    }

    #[test]
    fn correction_clamps_at_floor() {
        let g = ParamGuards::for_dt(1.0);
        let corr = CorrectionTriple {
            d_rd: -0.05,
            ..Default::default()
        };
        let (p, flags) = correct_params(&base(), &corr, &g);
        assert_eq!(p.rd, 1e-6);
        assert!(flags.rd);
        // rd at the floor pushes tau below its minimum, so cd is lifted too
        assert!(flags.tau);
        assert!((p.tau() - g.tau.min_s).abs() < 1e-12);
    }

    #[test]
    fn zero_correction_is_identity() {
        let (p, flags) = correct_params(&base(), &CorrectionTriple::default(), &ParamGuards::for_dt(1.0));
        assert_eq!(p, base());
        assert!(!flags.any());
    }

    #[test]
    fn windows_cover_range() {
        let w = TrainingWindowing {
            window_len: 4,
            stride: 4,
        };
        assert_eq!(w.windows(2, 11), vec![(2, 6), (6, 10), (10, 11)]);
        let w = TrainingWindowing {
            window_len: 4,
            stride: 2,
        };
        assert_eq!(w.windows(0, 8), vec![(0, 4), (2, 6), (4, 8)]);
        assert!(TrainingWindowing {
            window_len: 2,
            stride: 3
        }
        .validate()
        .is_err());
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss_mse(&[3.6, 3.7], &[3.6, 3.7]).unwrap(), 0.0);
        assert!((loss_mse(&[3.5], &[3.6]).unwrap() - 0.01).abs() < 1e-15);
        assert!(loss_mse(&[3.5], &[3.6, 3.7]).is_err());
    }

    fn tiny_setup() -> (HybridModel, BatteryConfig) {
        let ocv = OcvCurve::new(vec![3.0, 1.0], [0.0, 1.0]).unwrap();
        let cfg = BatteryConfig::new(10440.0, 1.0, ocv).unwrap();
        let c = FnnConfig {
            hidden_sizes: [4, 4],
            activation: crate::nn::Activation::Tanh,
            epochs: 2,
            learning_rate: 0.01,
            optimizer: crate::nn::OptimizerKind::Adam,
            seed: 5,
            output_scale: 0.01,
        };
        let model = HybridModel::fresh(&[c.clone(), c.clone(), c], NormStats::default(), &cfg, 0).unwrap();
        (model, cfg)
    }

    #[test]
    fn fresh_model_reduces_to_ecm() {
        let (model, cfg) = tiny_setup();
        let current = [1.0, 2.0, 0.5, 0.0, 1.5];
        let voltage = [3.6; 5];
        let temp = [25.0; 5];
        let socs = [0.9, 0.89, 0.88, 0.87, 0.86];
        let params = [base(); 5];
        let win = WindowInput {
            current: &current,
            voltage: &voltage,
            temp: &temp,
            socs: &socs,
            base: &params,
        };
        let (pred, _) = predict_window(&model, &win, 0.01).unwrap();
        let ecm = simulate_series(&params, &current, &socs, &cfg, 0.01).unwrap();
        assert_eq!(pred, ecm);
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let (model, _) = tiny_setup();
        let current = [1.0, 2.0, 0.5];
        let socs = [0.9, 0.89, 0.88];
        let params = [base(); 3];
        let win = WindowInput {
            current: &current,
            voltage: &[3.8; 3],
            temp: &[25.0; 3],
            socs: &socs,
            base: &params,
        };
        let (pred, cache) = predict_window(&model, &win, 0.0).unwrap();
        let grads = backward_window(&model, &cache, &pred).unwrap();
        assert!(grads.0.iter().all(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn model_json_roundtrip_and_version_check() {
        let (model, _) = tiny_setup();
        let text = model_to_json(&model).unwrap();
        let back = model_from_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(model_to_json(&back).unwrap(), text);

        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(matches!(
            model_from_json(&bumped),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
        assert!(matches!(model_from_json("{ not json"), Err(Error::CorruptModel(_))));
    }
}
