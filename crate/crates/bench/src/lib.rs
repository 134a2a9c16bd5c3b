//! Fixtures shared by the criterion benchmarks.

use hybrid_ecm::ecm::{amp_hours_to_coulombs, coulomb_count, RATED_CAPACITY_AH};
use hybrid_ecm::synth::{gen_cycle, reference_ocv, simulate_truth, CycleSpec, TruthConfig, TruthRun};
use hybrid_ecm::BatteryConfig;

pub fn battery() -> BatteryConfig {
    BatteryConfig::new(amp_hours_to_coulombs(RATED_CAPACITY_AH), 1.0, reference_ocv()).expect("valid battery")
}

/// Cold dynamic-cycle run of `steps` samples.
pub fn cold_run(steps: usize, seed: u64) -> (BatteryConfig, TruthRun, Vec<f64>) {
    let batt = battery();
    let spec = CycleSpec {
        duration_s: steps as f64,
        mean_a: 0.8,
        seed,
        ..Default::default()
    };
    let currents = gen_cycle(&spec, batt.dt_s).expect("valid cycle");
    let truth = TruthConfig {
        ambient_c: -20.0,
        seed,
        ..Default::default()
    };
    let run = simulate_truth(&truth, &batt, &currents, 1.0).expect("truth run");
    let socs = coulomb_count(1.0, &run.data.current_a, &batt);
    (batt, run, socs)
}
