//! `hybrid-ecm` command-line pipeline.
//!
//! Offline: `gen` → `identify` → `train`. Online: `estimate`. Scoring:
//! `evaluate` and `report`. Each run writes `<out>.config.json` holding the
//! fully merged configuration; passing it back through `--config`
//! reproduces that run's artifacts byte for byte.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hybrid_ecm::data::{rmse, ColumnMap, MetricsRecord};
use hybrid_ecm::ecm::{coulomb_count, fit_ocv, CELL_VOLTAGE_RANGE};
use hybrid_ecm::ekf::{estimate_soc_series, read_estimation_csv, write_estimation_csv, ParamSource, SocReference};
use hybrid_ecm::ffrls::{identify_series, read_identification_csv, write_identification_csv};
use hybrid_ecm::hybrid::{load_model, save_model, simulate_hybrid, train_offline, HybridModel, WindowInput};
use hybrid_ecm::synth::{gen_cycle, read_truth_soc, simulate_truth, write_truth_csv, CycleKind};
use hybrid_ecm::{improvement_pct, mse, BatteryConfig, EcmParams, Error, OcvCurve, SeriesData};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SocReferenceKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable capping the number of scenarios handled in parallel.
pub const THREADS_ENV: &str = "HYBRID_ECM_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }

    fn core(context: impl fmt::Display, e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INVALID };
        CliError {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "hybrid-ecm",
    version,
    about = "Hybrid ECM/FNN battery modelling and SOC estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize telemetry and ground truth from the second-order truth cell.
    Gen(GenArgs),
    /// Fit the OCV polynomial to a low-rate discharge.
    FitOcv(FitOcvArgs),
    /// Run FFRLS over a telemetry file and write per-step parameters.
    Identify(IdentifyArgs),
    /// Train the three correction networks offline.
    Train(TrainArgs),
    /// Estimate SOC with the EKF, with or without the trained corrections.
    Estimate(EstimateArgs),
    /// Score a baseline and a candidate estimation against the truth.
    Evaluate(EvaluateArgs),
    /// Aggregate metric files into one table.
    Report(ReportArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON). Flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Primary output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Column mapping for input telemetry, e.g. `time=Time,current=Current`.
    #[arg(long)]
    pub map: Option<String>,
    /// Cell capacity in ampere-hours.
    #[arg(long)]
    pub capacity_ah: Option<f64>,
    /// Sampling interval in seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Known SOC at the first sample.
    #[arg(long)]
    pub soc0: Option<f64>,
    /// OCV curve file written by `fit-ocv`.
    #[arg(long)]
    pub ocv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub cycle: Option<CycleKind>,
    /// Ambient temperature, degrees Celsius.
    #[arg(long, allow_hyphen_values = true)]
    pub temp: Option<f64>,
    /// Seeds both the cycle and the sensor noise.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub duration: Option<f64>,
    /// Mean current of the dynamic cycle, amperes.
    #[arg(long)]
    pub mean_current: Option<f64>,
    /// Pulse current (hppc), flat current (constant) or spread (dynamic), amperes.
    #[arg(long)]
    pub amplitude: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitOcvArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub degree: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Per-step parameters from `identify`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Epoch budget applied to all three networks.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Trailing fraction of the series held out of training.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Ignore the networks: the plain FFRLS-ECM baseline.
    #[arg(long)]
    pub plain_ecm: bool,
    /// Use the offline parameter trajectory from `--params` instead of
    /// running FFRLS online.
    #[arg(long)]
    pub freeze_ffrls: bool,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// SOC at which online FFRLS evaluates the OCV.
    #[arg(long, value_enum)]
    pub soc_reference: Option<SocReferenceKind>,
    /// Truth file from `gen`, copied into the `soc_true` column.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    /// Truth file; falls back to the `soc_true` column of the trajectories.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Metric files written by `evaluate` or `train`.
    #[arg(long, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}

/// Parses arguments, runs, and maps the outcome to an exit code. Messages go
/// to stderr; summaries to stdout.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::FitOcv(a) => cmd_fit_ocv(a),
        Command::Identify(a) => cmd_identify(a),
        Command::Train(a) => cmd_train(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Loads the config file (or defaults) and applies the shared flags.
fn base_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set_path(&mut cfg.paths.out, common.out.clone());
    if let Some(spec) = &common.map {
        cfg.columns = ColumnMap::parse(spec).map_err(|e| CliError::config(format!("--map: {e}")))?;
    }
    set(&mut cfg.battery.capacity_ah, common.capacity_ah);
    set(&mut cfg.battery.dt_s, common.dt);
    set(&mut cfg.battery.soc0, common.soc0);
    if let Some(p) = &common.ocv {
        let curve = read_ocv(p)?;
        cfg.battery.ocv_coeffs = Some(curve.coeffs().to_vec());
        cfg.battery.ocv_soc_range = curve.valid_soc_range();
    }
    Ok(cfg)
}

fn required<'a>(slot: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    slot.as_deref()
        .ok_or_else(|| CliError::config(format!("missing --{flag} (or paths.{flag} in the config)")))
}

/// `dir/name.ext` → `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    write_text(&sibling(out, "config.json"), &cfg.to_json())
}

fn read_ocv(path: &Path) -> CliResult<OcvCurve> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let raw: OcvCurve =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    OcvCurve::new(raw.coeffs().to_vec(), raw.valid_soc_range()).map_err(|e| CliError::core(path.display(), e))
}

fn load_series(cfg: &RunConfig, path: &Path) -> CliResult<SeriesData> {
    SeriesData::load_csv(path, &cfg.columns, cfg.battery.dt_s).map_err(|e| CliError::core(path.display(), e))
}

fn battery(cfg: &RunConfig) -> CliResult<BatteryConfig> {
    cfg.battery.build(cfg.battery.ocv()?)
}

fn read_params(path: &Path, n: usize) -> CliResult<Vec<EcmParams>> {
    let file = File::open(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let params = read_identification_csv(file).map_err(|e| CliError::core(path.display(), e))?;
    if params.len() != n {
        return Err(CliError::config(format!(
            "{}: {} parameter rows for a {n}-sample series",
            path.display(),
            params.len()
        )));
    }
    Ok(params)
}

fn read_truth(path: &Path) -> CliResult<Vec<f64>> {
    let file = File::open(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    read_truth_soc(file).map_err(|e| CliError::core(path.display(), e))
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.synth.cycle.kind, a.cycle);
    set(&mut cfg.synth.truth.ambient_c, a.temp);
    if let Some(seed) = a.seed {
        cfg.synth.cycle.seed = seed;
        cfg.synth.truth.seed = seed;
    }
    set(&mut cfg.synth.cycle.duration_s, a.duration);
    set(&mut cfg.synth.cycle.mean_a, a.mean_current);
    set(&mut cfg.synth.cycle.amplitude, a.amplitude);
    cfg.validate()?;
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let batt = battery(&cfg)?;
    let currents = gen_cycle(&cfg.synth.cycle, batt.dt_s).map_err(|e| CliError::core("cycle", e))?;
    let run = simulate_truth(&cfg.synth.truth, &batt, &currents, cfg.battery.soc0)
        .map_err(|e| CliError::core("truth cell", e))?;
    if run.exhausted {
        eprintln!(
            "warning: cell ran empty after {} of {} samples",
            run.data.len(),
            currents.len()
        );
    }
    let mut w = create(&out)?;
    run.data
        .write_csv(&mut w)
        .map_err(|e| CliError::core(out.display(), e))?;
    let truth_path = sibling(&out, "truth.csv");
    write_truth_csv(&run, create(&truth_path)?).map_err(|e| CliError::core(truth_path.display(), e))?;
    echo_config(&cfg, &out)?;
    println!(
        "gen: {} samples at {} C -> {} (+ {})",
        run.data.len(),
        cfg.synth.truth.ambient_c,
        out.display(),
        truth_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct OcvPlotRow {
    soc: f64,
    voltage_meas: f64,
    voltage_fit: f64,
}

fn cmd_fit_ocv(a: FitOcvArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    set_path(&mut cfg.paths.input, a.input);
    set(&mut cfg.ocv_fit.degree, a.degree);
    cfg.validate()?;
    let input = required(&cfg.paths.input, "input")?.to_path_buf();
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let data = load_series(&cfg, &input)?;
    let batt = battery(&cfg)?;
    let socs = coulomb_count(cfg.battery.soc0, &data.current_a, &batt);
    let curve = fit_ocv(&socs, &data.voltage_v, cfg.ocv_fit.degree).map_err(|e| CliError::core(input.display(), e))?;
    if let Some(w) = curve.endpoint_warning(CELL_VOLTAGE_RANGE.0, CELL_VOLTAGE_RANGE.1) {
        eprintln!("warning: {w}");
    }
    write_json(&out, &curve)?;
    let plot_path = sibling(&out, "plot.csv");
    let mut w = csv::Writer::from_writer(create(&plot_path)?);
    for (s, v) in socs.iter().zip(&data.voltage_v) {
        w.serialize(OcvPlotRow {
            soc: *s,
            voltage_meas: *v,
            voltage_fit: curve.value(*s),
        })
        .map_err(|e| CliError::config(format!("{}: {e}", plot_path.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::config(format!("{}: {e}", plot_path.display())))?;
    echo_config(&cfg, &out)?;
    println!(
        "fit-ocv: degree {} over soc {:?} -> {}",
        curve.degree(),
        curve.valid_soc_range(),
        out.display()
    );
    Ok(())
}

fn cmd_identify(a: IdentifyArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    set_path(&mut cfg.paths.input, a.input);
    set(&mut cfg.ffrls.lambda, a.lambda);
    cfg.validate()?;
    let input = required(&cfg.paths.input, "input")?.to_path_buf();
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let data = load_series(&cfg, &input)?;
    let batt = battery(&cfg)?;
    let socs = coulomb_count(cfg.battery.soc0, &data.current_a, &batt);
    let ident =
        identify_series(&data, &batt.ocv, &socs, &batt, &cfg.ffrls).map_err(|e| CliError::core(input.display(), e))?;
    let d = &ident.diagnostics;
    if ident.steps.iter().skip(1).all(|s| !s.valid) {
        return Err(CliError::numerical(format!(
            "{}: no step produced physical parameters (final P condition {:.3e})",
            input.display(),
            d.final_p_condition
        )));
    }
    if d.ill_conditioned {
        eprintln!(
            "warning: identification ill-conditioned (P condition {:.3e}, {} degenerate steps)",
            d.final_p_condition,
            d.degenerate_steps.len()
        );
    }
    write_identification_csv(&ident, create(&out)?).map_err(|e| CliError::core(out.display(), e))?;
    echo_config(&cfg, &out)?;
    let last = ident.params.last().expect("non-empty");
    println!(
        "identify: {} steps, {} held, final r0 {:.5} rd {:.5} cd {:.1} -> {}",
        ident.params.len(),
        d.hold_events.len(),
        last.r0,
        last.rd,
        last.cd,
        out.display()
    );
    Ok(())
}

/// Training summary written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_end: usize,
    pub samples: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Serialize)]
struct VoltageRow {
    step: usize,
    time_s: f64,
    voltage_meas: f64,
    voltage_ecm: f64,
    voltage_hybrid: f64,
    held_out: bool,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    set_path(&mut cfg.paths.input, a.input);
    set_path(&mut cfg.paths.params, a.params);
    if let Some(e) = a.epochs {
        cfg.networks.r0.epochs = e;
        cfg.networks.rd.epochs = e;
        cfg.networks.cd.epochs = e;
    }
    set(&mut cfg.training.holdout_fraction, a.holdout);
    set(&mut cfg.training.seed, a.seed);
    cfg.validate()?;
    let input = required(&cfg.paths.input, "input")?.to_path_buf();
    let params_path = required(&cfg.paths.params, "params")?.to_path_buf();
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let data = load_series(&cfg, &input)?;
    let batt = battery(&cfg)?;
    let base = read_params(&params_path, data.len())?;
    let socs = coulomb_count(cfg.battery.soc0, &data.current_a, &batt);
    let n = data.len();
    let opts = cfg.training.options(n);

    let started = Instant::now();
    let (model, report) = train_offline(&base, &data, &socs, &batt, &cfg.networks.as_array(), &opts)
        .map_err(|e| CliError::core(input.display(), e))?;
    let elapsed = started.elapsed();

    let input_view = WindowInput::from_series(&data, &socs, &base);
    let (v_ecm, _) =
        simulate_hybrid(None, &input_view, &batt.ocv, batt.dt_s, 0.0).map_err(|e| CliError::core("baseline", e))?;
    let (v_hyb, _) = simulate_hybrid(Some(&model), &input_view, &batt.ocv, batt.dt_s, 0.0)
        .map_err(|e| CliError::core("hybrid", e))?;
    let train_end = opts.train_end.unwrap_or(n);
    let start = opts.warmup_skip.min(train_end);
    let mut metrics = voltage_metrics(
        &cfg.scenario,
        "voltage_train",
        &v_ecm[start..train_end],
        &v_hyb[start..train_end],
        &data.voltage_v[start..train_end],
    );
    if train_end < n {
        metrics.extend(voltage_metrics(
            &cfg.scenario,
            "voltage_holdout",
            &v_ecm[train_end..],
            &v_hyb[train_end..],
            &data.voltage_v[train_end..],
        ));
    }

    save_model(&model, &out).map_err(|e| CliError::core(out.display(), e))?;
    let loss_path = sibling(&out, "loss.csv");
    let mut loss = String::from("epoch,loss\n");
    for (k, l) in report.loss_history.iter().enumerate() {
        loss.push_str(&format!("{k},{l}\n"));
    }
    write_text(&loss_path, &loss)?;
    let volt_path = sibling(&out, "voltage.csv");
    let mut w = csv::Writer::from_writer(create(&volt_path)?);
    for k in 0..n {
        w.serialize(VoltageRow {
            step: k,
            time_s: data.time_s[k],
            voltage_meas: data.voltage_v[k],
            voltage_ecm: v_ecm[k],
            voltage_hybrid: v_hyb[k],
            held_out: k >= train_end,
        })
        .map_err(|e| CliError::config(format!("{}: {e}", volt_path.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::config(format!("{}: {e}", volt_path.display())))?;
    let summary = TrainSummary {
        train_end,
        samples: n,
        epochs_run: model.meta.epochs_run,
        best_epoch: report.best_epoch,
        metrics,
    };
    write_json(&sibling(&out, "report.json"), &summary)?;
    echo_config(&cfg, &out)?;

    println!(
        "train: {} epochs, best loss {:.4e} at epoch {} (baseline {:.4e}) -> {}",
        summary.epochs_run,
        report.best_loss,
        report.best_epoch,
        report.baseline_loss,
        out.display()
    );
    for m in summary.metrics.iter().filter(|m| m.improvement_pct.is_some()) {
        println!(
            "train: {} mse {:.4e}, improvement {:.2}%",
            m.quantity,
            m.mse,
            m.improvement_pct.unwrap_or(0.0)
        );
    }
    println!("timing: offline training {:.3} s", elapsed.as_secs_f64());
    if let Some(why) = report.diverged {
        return Err(CliError::numerical(format!(
            "training diverged: {why}; best model saved to {}",
            out.display()
        )));
    }
    Ok(())
}

fn voltage_metrics(scenario: &str, quantity: &str, ecm: &[f64], hybrid: &[f64], truth: &[f64]) -> Vec<MetricsRecord> {
    let base_mse = mse(ecm, truth).unwrap_or(f64::NAN);
    let hyb_mse = mse(hybrid, truth).unwrap_or(f64::NAN);
    vec![
        MetricsRecord {
            scenario: scenario.into(),
            model: "ecm".into(),
            quantity: quantity.into(),
            mse: base_mse,
            rmse: base_mse.sqrt(),
            improvement_pct: None,
        },
        MetricsRecord {
            scenario: scenario.into(),
            model: "hybrid".into(),
            quantity: quantity.into(),
            mse: hyb_mse,
            rmse: hyb_mse.sqrt(),
            improvement_pct: improvement_pct(base_mse, hyb_mse).ok(),
        },
    ]
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    set_path(&mut cfg.paths.input, a.input);
    set_path(&mut cfg.paths.model, a.model);
    set_path(&mut cfg.paths.params, a.params);
    set_path(&mut cfg.paths.truth, a.truth);
    cfg.estimate.plain_ecm |= a.plain_ecm;
    cfg.estimate.freeze_ffrls |= a.freeze_ffrls;
    set(&mut cfg.estimate.soc_reference, a.soc_reference);
    cfg.validate()?;
    let input = required(&cfg.paths.input, "input")?.to_path_buf();
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let model: Option<HybridModel> = match &cfg.paths.model {
        Some(p) => Some(load_model(p).map_err(|e| CliError::core(p.display(), e))?),
        None if cfg.estimate.plain_ecm => None,
        None => return Err(CliError::config("missing --model (or pass --plain-ecm)")),
    };
    let data = load_series(&cfg, &input)?;
    let batt = match &model {
        Some(m) => {
            if (m.dt_s - cfg.battery.dt_s).abs() > 1e-12 {
                return Err(CliError::config(format!(
                    "model was trained at dt {} s but the run uses {} s",
                    m.dt_s, cfg.battery.dt_s
                )));
            }
            cfg.battery.build(m.ocv.clone())?
        }
        None => battery(&cfg)?,
    };
    let frozen;
    let source = if cfg.estimate.freeze_ffrls {
        let p = required(&cfg.paths.params, "params")?;
        frozen = read_params(p, data.len())?;
        ParamSource::Frozen(&frozen)
    } else {
        let soc_ref = match cfg.estimate.soc_reference {
            SocReferenceKind::Filter => SocReference::Filter,
            SocReferenceKind::Counted => SocReference::Counted(cfg.battery.soc0),
        };
        ParamSource::Streaming(&cfg.ffrls, soc_ref)
    };
    let truth = match &cfg.paths.truth {
        Some(p) => {
            let t = read_truth(p)?;
            if t.len() != data.len() {
                return Err(CliError::config(format!(
                    "{}: {} rows for a {}-sample series",
                    p.display(),
                    t.len(),
                    data.len()
                )));
            }
            Some(t)
        }
        None => None,
    };

    let corrections = if cfg.estimate.plain_ecm { None } else { model.as_ref() };
    let started = Instant::now();
    let est = estimate_soc_series(&data, corrections, &batt, &cfg.ekf, source)
        .map_err(|e| CliError::core(input.display(), e))?;
    let elapsed = started.elapsed();

    write_estimation_csv(&est, &data, truth.as_deref(), create(&out)?).map_err(|e| CliError::core(out.display(), e))?;
    echo_config(&cfg, &out)?;
    let mode = if corrections.is_some() { "hybrid" } else { "plain ECM" };
    print!(
        "estimate: {mode}, {} steps, {} clamp events",
        est.steps.len(),
        est.diagnostics.clamp_events
    );
    if let Some(t) = &truth {
        let socs: Vec<f64> = est.socs().iter().map(|s| s.clamp(0.0, 1.0)).collect();
        print!(", SOC RMSE {:.5}", rmse(&socs, t).unwrap_or(f64::NAN));
    }
    println!(" -> {}", out.display());
    println!("timing: online estimation {:.3} s", elapsed.as_secs_f64());
    Ok(())
}

fn soc_metrics(scenario: &str, base: &[f64], cand: &[f64], truth: &[f64]) -> CliResult<Vec<MetricsRecord>> {
    let wrap = |e| CliError::core("soc metrics", e);
    let bm = mse(base, truth).map_err(wrap)?;
    let cm = mse(cand, truth).map_err(wrap)?;
    let (br, cr) = (bm.sqrt(), cm.sqrt());
    Ok(vec![
        MetricsRecord {
            scenario: scenario.into(),
            model: "ecm".into(),
            quantity: "soc".into(),
            mse: bm,
            rmse: br,
            improvement_pct: None,
        },
        MetricsRecord {
            scenario: scenario.into(),
            model: "hybrid".into(),
            quantity: "soc".into(),
            mse: cm,
            rmse: cr,
            improvement_pct: improvement_pct(br, cr).ok(),
        },
    ])
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    set_path(&mut cfg.paths.baseline, a.baseline);
    set_path(&mut cfg.paths.candidate, a.candidate);
    set_path(&mut cfg.paths.truth, a.truth);
    set(&mut cfg.scenario, a.scenario);
    cfg.validate()?;
    let out = required(&cfg.paths.out, "out")?.to_path_buf();
    let read = |p: &Path| -> CliResult<_> {
        let file = File::open(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
        read_estimation_csv(file, p).map_err(|e| CliError::core(p.display(), e))
    };
    let base_path = required(&cfg.paths.baseline, "baseline")?;
    let cand_path = required(&cfg.paths.candidate, "candidate")?;
    let base = read(base_path)?;
    let cand = read(cand_path)?;
    if base.soc_est.len() != cand.soc_est.len() {
        return Err(CliError::config(format!(
            "trajectories differ in length: {} vs {}",
            base.soc_est.len(),
            cand.soc_est.len()
        )));
    }
    let truth = match &cfg.paths.truth {
        Some(p) => read_truth(p)?,
        None => base
            .soc_true
            .clone()
            .or_else(|| cand.soc_true.clone())
            .ok_or_else(|| CliError::config("no truth: pass --truth or estimate with --truth"))?,
    };
    if truth.len() != base.soc_est.len() {
        return Err(CliError::config(format!(
            "truth has {} rows, trajectories {}",
            truth.len(),
            base.soc_est.len()
        )));
    }
    let mut records = soc_metrics(&cfg.scenario, &base.soc_est, &cand.soc_est, &truth)?;
    // Filter-side voltage fit: predicted versus measured terminal voltage.
    records.extend(voltage_metrics(
        &cfg.scenario,
        "voltage_filter",
        &base.voltage_pred,
        &cand.voltage_pred,
        &base.voltage_meas,
    ));
    write_json(&out, &records)?;
    let csv_path = sibling(&out, "csv");
    hybrid_ecm::data::write_metrics_csv(&records, create(&csv_path)?)
        .map_err(|e| CliError::core(csv_path.display(), e))?;
    echo_config(&cfg, &out)?;
    for r in &records {
        match r.improvement_pct {
            Some(p) => println!("evaluate: {} {} rmse {:.5} ({p:+.2}%)", r.quantity, r.model, r.rmse),
            None => println!("evaluate: {} {} rmse {:.5}", r.quantity, r.model, r.rmse),
        }
    }
    Ok(())
}

/// Reads a metrics file: a bare record list from `evaluate` or a training
/// summary from `train`.
fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if let Ok(records) = serde_json::from_str::<Vec<MetricsRecord>>(&text) {
        return Ok(records);
    }
    serde_json::from_str::<TrainSummary>(&text)
        .map(|s| s.metrics)
        .map_err(|e| CliError::config(format!("{}: not a metrics file: {e}", path.display())))
}

/// Worker cap from [`THREADS_ENV`], defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// One table row: a scenario and quantity with the baseline and hybrid errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub quantity: String,
    pub ecm_mse: f64,
    pub ecm_rmse: f64,
    pub hybrid_mse: f64,
    pub hybrid_rmse: f64,
    pub improvement_pct: Option<f64>,
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    if !a.inputs.is_empty() {
        cfg.paths.inputs = a.inputs;
    }
    cfg.validate()?;
    let out = required(&cfg.paths.out, "out")?.to_path_buf();
    if cfg.paths.inputs.is_empty() {
        return Err(CliError::config("report needs at least one --inputs file"));
    }

    let inputs = &cfg.paths.inputs;
    let workers = thread_cap().min(inputs.len());
    let chunk = inputs.len().div_ceil(workers);
    // Results are gathered per chunk in input order, so the table does not
    // depend on the worker count.
    let loaded: Vec<CliResult<Vec<MetricsRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| read_metrics(p)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("report worker panicked"))
            .collect()
    });

    let mut rows: Vec<ReportRow> = Vec::new();
    for records in loaded {
        let records = records?;
        for r in &records {
            let idx = match rows
                .iter()
                .position(|x| x.scenario == r.scenario && x.quantity == r.quantity)
            {
                Some(i) => i,
                None => {
                    rows.push(ReportRow {
                        scenario: r.scenario.clone(),
                        quantity: r.quantity.clone(),
                        ecm_mse: f64::NAN,
                        ecm_rmse: f64::NAN,
                        hybrid_mse: f64::NAN,
                        hybrid_rmse: f64::NAN,
                        improvement_pct: None,
                    });
                    rows.len() - 1
                }
            };
            let row = &mut rows[idx];
            match r.model.as_str() {
                "ecm" => {
                    row.ecm_mse = r.mse;
                    row.ecm_rmse = r.rmse;
                }
                _ => {
                    row.hybrid_mse = r.mse;
                    row.hybrid_rmse = r.rmse;
                    row.improvement_pct = r.improvement_pct;
                }
            }
        }
    }

    let mut w = csv::Writer::from_writer(create(&out)?);
    for row in &rows {
        w.serialize(row)
            .map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
    echo_config(&cfg, &out)?;

    println!("| scenario | quantity | ECM MSE | ECM RMSE | hybrid MSE | hybrid RMSE | improvement |");
    println!("|---|---|---|---|---|---|---|");
    for r in &rows {
        let imp = r
            .improvement_pct
            .map(|p| format!("{p:.2}%"))
            .unwrap_or_else(|| "-".into());
        println!(
            "| {} | {} | {:.4e} | {:.4e} | {:.4e} | {:.4e} | {imp} |",
            r.scenario, r.quantity, r.ecm_mse, r.ecm_rmse, r.hybrid_mse, r.hybrid_rmse
        );
    }
    Ok(())
}
