//! Run configuration: one JSON document holding every knob of every stage.
//! Command-line flags override fields; the merged result is echoed next to
//! each run's primary output.

use std::fs;
use std::path::{Path, PathBuf};

use hybrid_ecm::data::ColumnMap;
use hybrid_ecm::ecm::{amp_hours_to_coulombs, TauBounds, DEFAULT_OCV_DEGREE, RATED_CAPACITY_AH};
use hybrid_ecm::nn::FnnConfig;
use hybrid_ecm::synth::{reference_ocv, CycleSpec, TruthConfig};
use hybrid_ecm::{BatteryConfig, EkfConfig, FfrlsOptions, OcvCurve, TrainOptions, TrainingWindowing};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatterySection {
    pub capacity_ah: f64,
    pub dt_s: f64,
    /// Ascending OCV polynomial coefficients; `None` selects the built-in
    /// reference curve.
    pub ocv_coeffs: Option<Vec<f64>>,
    pub ocv_soc_range: [f64; 2],
    /// Defaults to `[dt / 10, 1e5]` seconds.
    pub tau_bounds: Option<TauBounds>,
    /// Known SOC at the first sample, used for coulomb counting.
    pub soc0: f64,
}

impl Default for BatterySection {
    fn default() -> Self {
        BatterySection {
            capacity_ah: RATED_CAPACITY_AH,
            dt_s: 1.0,
            ocv_coeffs: None,
            ocv_soc_range: [0.0, 1.0],
            tau_bounds: None,
            soc0: 1.0,
        }
    }
}

impl BatterySection {
    pub fn ocv(&self) -> Result<OcvCurve, CliError> {
        match &self.ocv_coeffs {
            None => Ok(reference_ocv()),
            Some(c) => OcvCurve::new(c.clone(), self.ocv_soc_range)
                .map_err(|e| CliError::config(format!("battery.ocv_coeffs: {e}"))),
        }
    }

    pub fn build(&self, ocv: OcvCurve) -> Result<BatteryConfig, CliError> {
        let mut cfg = BatteryConfig::new(amp_hours_to_coulombs(self.capacity_ah), self.dt_s, ocv)
            .map_err(|e| CliError::config(format!("battery: {e}")))?;
        if let Some(bounds) = self.tau_bounds {
            if !(bounds.min_s > 0.0 && bounds.min_s < bounds.max_s) {
                return Err(CliError::config("battery.tau_bounds: need 0 < min_s < max_s"));
            }
            cfg.tau_bounds = bounds;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub r0: FnnConfig,
    pub rd: FnnConfig,
    pub cd: FnnConfig,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            r0: FnnConfig::r0_default(),
            rd: FnnConfig::rd_default(),
            cd: FnnConfig::cd_default(),
        }
    }
}

impl NetworkSection {
    pub fn as_array(&self) -> [FnnConfig; 3] {
        [self.r0.clone(), self.rd.clone(), self.cd.clone()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub windowing: TrainingWindowing,
    pub warmup_skip: usize,
    pub rel_tol: f64,
    pub patience: usize,
    pub seed: u64,
    /// Trailing fraction of the series kept out of training.
    pub holdout_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainOptions::default();
        TrainingSection {
            windowing: d.windowing,
            warmup_skip: d.warmup_skip,
            rel_tol: d.rel_tol,
            patience: d.patience,
            seed: d.seed,
            holdout_fraction: 0.0,
        }
    }
}

impl TrainingSection {
    /// Index of the first held-out sample of an `n`-sample series.
    pub fn train_end(&self, n: usize) -> usize {
        n - ((n as f64) * self.holdout_fraction).round() as usize
    }

    pub fn options(&self, n: usize) -> TrainOptions {
        TrainOptions {
            windowing: self.windowing,
            warmup_skip: self.warmup_skip,
            rel_tol: self.rel_tol,
            patience: self.patience,
            seed: self.seed,
            train_end: Some(self.train_end(n)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SocReferenceKind {
    /// FFRLS evaluates the OCV at the filter's own SOC.
    Filter,
    /// FFRLS evaluates the OCV at a coulomb count from `battery.soc0`.
    Counted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    pub plain_ecm: bool,
    pub freeze_ffrls: bool,
    pub soc_reference: SocReferenceKind,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection {
            plain_ecm: false,
            freeze_ffrls: false,
            soc_reference: SocReferenceKind::Counted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub truth: TruthConfig,
    pub cycle: CycleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcvFitSection {
    pub degree: usize,
}

impl Default for OcvFitSection {
    fn default() -> Self {
        OcvFitSection {
            degree: DEFAULT_OCV_DEGREE,
        }
    }
}

/// File locations. Each subcommand reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub candidate: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub battery: BatterySection,
    pub columns: ColumnMap,
    pub ffrls: FfrlsOptions,
    pub networks: NetworkSection,
    pub training: TrainingSection,
    pub ekf: EkfConfig,
    pub estimate: EstimateSection,
    pub synth: SynthSection,
    pub ocv_fit: OcvFitSection,
    /// Scenario label carried into metrics.
    pub scenario: String,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            battery: BatterySection::default(),
            columns: ColumnMap::default(),
            ffrls: FfrlsOptions::default(),
            networks: NetworkSection::default(),
            training: TrainingSection::default(),
            ekf: EkfConfig::default(),
            estimate: EstimateSection::default(),
            synth: SynthSection::default(),
            ocv_fit: OcvFitSection::default(),
            scenario: "default".into(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Cross-field checks run before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |what: &str, e: hybrid_ecm::Error| CliError::config(format!("{what}: {e}"));
        if !(self.battery.capacity_ah.is_finite() && self.battery.capacity_ah > 0.0) {
            return Err(CliError::config("battery.capacity_ah must be positive"));
        }
        if !(0.0..=1.0).contains(&self.battery.soc0) {
            return Err(CliError::config("battery.soc0 must lie in [0, 1]"));
        }
        self.battery.ocv()?;
        if !(0.0 < self.ffrls.lambda && self.ffrls.lambda <= 1.0)
            || !(self.ffrls.p0_scale.is_finite() && self.ffrls.p0_scale > 0.0)
        {
            return Err(CliError::config("ffrls: need 0 < lambda <= 1 and p0_scale > 0"));
        }
        for (name, c) in [
            ("r0", &self.networks.r0),
            ("rd", &self.networks.rd),
            ("cd", &self.networks.cd),
        ] {
            c.validate().map_err(|e| bad(&format!("networks.{name}"), e))?;
        }
        self.training
            .windowing
            .validate()
            .map_err(|e| bad("training.windowing", e))?;
        if !(0.0..1.0).contains(&self.training.holdout_fraction) {
            return Err(CliError::config("training.holdout_fraction must lie in [0, 1)"));
        }
        self.ekf.validate().map_err(|e| bad("ekf", e))?;
        self.synth.truth.validate().map_err(|e| bad("synth.truth", e))?;
        self.synth.cycle.validate().map_err(|e| bad("synth.cycle", e))?;
        if self.ocv_fit.degree == 0 {
            return Err(CliError::config("ocv_fit.degree must be >= 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}
