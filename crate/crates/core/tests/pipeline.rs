//! End-to-end properties of training, persistence and estimation.

use hybrid_ecm::ecm::{coulomb_count, simulate_series, BatteryState};
use hybrid_ecm::ekf::{estimate_soc_series, EkfConfig, ParamSource, SocReference};
use hybrid_ecm::ffrls::identify_series;
use hybrid_ecm::hybrid::{
    load_model, model_to_json, predict_window, save_model, simulate_hybrid, train_offline, HybridModel, WindowInput,
};
use hybrid_ecm::nn::{FnnConfig, NormStats, OptimizerKind};
use hybrid_ecm::synth::{gen_cycle, reference_ocv, simulate_truth, write_truth_csv, CycleSpec, TruthConfig};
use hybrid_ecm::{mse, rmse, BatteryConfig, EcmParams, FfrlsOptions, SeriesData, TrainOptions, TrainingWindowing};

fn battery() -> BatteryConfig {
    BatteryConfig::new(10_440.0, 1.0, reference_ocv()).unwrap()
}

fn small_configs(epochs: usize) -> [FnnConfig; 3] {
    let small = |base: FnnConfig, h: usize| FnnConfig {
        hidden_sizes: [h, 4],
        epochs,
        ..base
    };
    [
        small(FnnConfig::r0_default(), 16),
        small(FnnConfig::rd_default(), 16),
        small(FnnConfig::cd_default(), 8),
    ]
}

struct Scenario {
    batt: BatteryConfig,
    data: SeriesData,
    soc_true: Vec<f64>,
    socs: Vec<f64>,
    base: Vec<EcmParams>,
}

fn cold_scenario(steps: usize, seed: u64) -> Scenario {
    let batt = battery();
    let spec = CycleSpec {
        duration_s: steps as f64,
        mean_a: 0.8,
        seed,
        ..Default::default()
    };
    let currents = gen_cycle(&spec, 1.0).unwrap();
    let truth = TruthConfig {
        ambient_c: -20.0,
        seed,
        ..Default::default()
    };
    let run = simulate_truth(&truth, &batt, &currents, 1.0).unwrap();
    let socs = coulomb_count(1.0, &run.data.current_a, &batt);
    let base = identify_series(&run.data, &batt.ocv, &socs, &batt, &FfrlsOptions::default())
        .unwrap()
        .params;
    Scenario {
        batt,
        data: run.data,
        soc_true: run.soc,
        socs,
        base,
    }
}

fn train(s: &Scenario, epochs: usize, opts: &TrainOptions) -> (HybridModel, hybrid_ecm::TrainReport) {
    train_offline(&s.base, &s.data, &s.socs, &s.batt, &small_configs(epochs), opts).unwrap()
}

#[test]
fn epoch_zero_loss_is_the_baseline() {
    let s = cold_scenario(1200, 1);
    let opts = TrainOptions::default();
    let (_, report) = train(&s, 3, &opts);
    let input = WindowInput::from_series(&s.data, &s.socs, &s.base);
    let (pred, _) = simulate_hybrid(None, &input, &s.batt.ocv, 1.0, 0.0).unwrap();
    let w = opts.warmup_skip;
    let baseline = mse(&pred[w..], &s.data.voltage_v[w..]).unwrap();
    assert_eq!(report.loss_history[0], baseline);
    assert_eq!(report.baseline_loss, baseline);
}

#[test]
fn best_loss_never_exceeds_baseline_and_improves() {
    let s = cold_scenario(1500, 2);
    let (model, report) = train(&s, 15, &TrainOptions::default());
    assert!(report.diverged.is_none());
    assert!(report.best_loss <= report.loss_history[0]);
    assert!(report.best_loss < 0.9 * report.baseline_loss, "{report:?}");
    let running_min: Vec<f64> = report
        .loss_history
        .iter()
        .scan(f64::INFINITY, |m, l| {
            *m = m.min(*l);
            Some(*m)
        })
        .collect();
    assert!(running_min.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(model.meta.final_loss, Some(report.best_loss));
}

#[test]
fn training_is_deterministic_and_persists_exactly() {
    let s = cold_scenario(800, 3);
    let opts = TrainOptions {
        seed: 9,
        ..Default::default()
    };
    let (a, _) = train(&s, 4, &opts);
    let (b, _) = train(&s, 4, &opts);
    let text = model_to_json(&a).unwrap();
    assert_eq!(text, model_to_json(&b).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.json");
    let second = dir.path().join("b.json");
    save_model(&a, &first).unwrap();
    let loaded = load_model(&first).unwrap();
    assert_eq!(loaded, a);
    save_model(&loaded, &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn samples_after_train_end_do_not_influence_training() {
    let s = cold_scenario(1000, 4);
    let opts = TrainOptions {
        train_end: Some(700),
        ..Default::default()
    };
    let (a, _) = train(&s, 3, &opts);
    let mut altered = cold_scenario(1000, 4);
    for v in &mut altered.data.voltage_v[700..] {
        *v -= 0.1;
    }
    let (b, _) = train(&altered, 3, &opts);
    assert_eq!(a, b);
}

#[test]
fn chained_windows_equal_one_sequential_pass() {
    let s = cold_scenario(500, 5);
    let (model, _) = train(&s, 2, &TrainOptions::default());
    let input = WindowInput::from_series(&s.data, &s.socs, &s.base);
    let (whole, uds) = simulate_hybrid(Some(&model), &input, &model.ocv, model.dt_s, 0.0).unwrap();
    for windowing in [
        TrainingWindowing {
            window_len: 64,
            stride: 64,
        },
        TrainingWindowing {
            window_len: 7,
            stride: 7,
        },
    ] {
        let mut chained = Vec::new();
        for (ws, we) in windowing.windows(0, input.len()) {
            let u0 = if ws == 0 { 0.0 } else { uds[ws - 1] };
            let (pred, _) = predict_window(&model, &input.slice(ws, we), u0).unwrap();
            chained.extend(pred);
        }
        assert_eq!(chained, whole);
    }
}

#[test]
fn fresh_model_estimates_like_plain_ecm() {
    let s = cold_scenario(800, 6);
    let rows: Vec<[f64; 3]> = (0..s.data.len())
        .map(|k| [s.data.current_a[k], s.data.voltage_v[k], s.data.temp_c[k]])
        .collect();
    let fresh = HybridModel::fresh(&small_configs(1), NormStats::from_rows(&rows).unwrap(), &s.batt, 0).unwrap();
    let ekf = EkfConfig::default();
    let opts = FfrlsOptions::default();
    for source in [
        ParamSource::Streaming(&opts, SocReference::Filter),
        ParamSource::Streaming(&opts, SocReference::Counted(1.0)),
        ParamSource::Frozen(&s.base),
    ] {
        let plain = estimate_soc_series(&s.data, None, &s.batt, &ekf, source).unwrap();
        let hybrid = estimate_soc_series(&s.data, Some(&fresh), &s.batt, &ekf, source).unwrap();
        assert_eq!(plain.steps, hybrid.steps);
    }
}

#[test]
fn counted_reference_matches_frozen_offline_parameters() {
    let s = cold_scenario(1000, 7);
    let ekf = EkfConfig::default();
    let opts = FfrlsOptions::default();
    let streaming = estimate_soc_series(
        &s.data,
        None,
        &s.batt,
        &ekf,
        ParamSource::Streaming(&opts, SocReference::Counted(1.0)),
    )
    .unwrap();
    let frozen = estimate_soc_series(&s.data, None, &s.batt, &ekf, ParamSource::Frozen(&s.base)).unwrap();
    assert_eq!(streaming.steps, frozen.steps);
    assert!(rmse(&frozen.socs(), &s.soc_true).unwrap() < 0.02);
}

fn exact_model_series(soc0: f64) -> (BatteryConfig, SeriesData, Vec<f64>, Vec<EcmParams>) {
    let batt = battery();
    let currents = gen_cycle(
        &CycleSpec {
            duration_s: 1500.0,
            seed: 3,
            ..Default::default()
        },
        1.0,
    )
    .unwrap();
    let socs = coulomb_count(soc0, &currents, &batt);
    let params = vec![EcmParams::new(0.05, 0.03, 1000.0).unwrap(); currents.len()];
    let v = simulate_series(&params, &currents, &socs, &batt, 0.0).unwrap();
    let n = currents.len();
    let data = SeriesData::new(1.0, (0..n).map(|k| k as f64).collect(), currents, v, vec![25.0; n]).unwrap();
    (batt, data, socs, params)
}

#[test]
fn ekf_tracks_exact_model_from_truth() {
    let (batt, data, socs, params) = exact_model_series(0.8);
    let ekf = EkfConfig {
        x0: Some(BatteryState { soc: 0.8, u_d: 0.0 }),
        ..Default::default()
    };
    let est = estimate_soc_series(&data, None, &batt, &ekf, ParamSource::Frozen(&params)).unwrap();
    assert!(rmse(&est.socs(), &socs).unwrap() < 1e-3);
}

#[test]
fn ekf_recovers_from_initial_soc_error() {
    let (batt, data, socs, params) = exact_model_series(0.8);
    for soc0 in [0.6, 1.0] {
        let ekf = EkfConfig {
            x0: Some(BatteryState { soc: soc0, u_d: 0.0 }),
            ..Default::default()
        };
        let est = estimate_soc_series(&data, None, &batt, &ekf, ParamSource::Frozen(&params)).unwrap();
        let err: Vec<f64> = est.socs().iter().zip(&socs).map(|(a, b)| (a - b).abs()).collect();
        assert!(err[300..].iter().all(|e| *e < 0.02), "start {soc0}");
    }
}

#[test]
fn truth_generation_is_reproducible() {
    let batt = battery();
    let spec = CycleSpec {
        seed: 7,
        duration_s: 500.0,
        ..Default::default()
    };
    let render = || {
        let currents = gen_cycle(&spec, 1.0).unwrap();
        let run = simulate_truth(
            &TruthConfig {
                seed: 7,
                ambient_c: -20.0,
                ..Default::default()
            },
            &batt,
            &currents,
            0.9,
        )
        .unwrap();
        let mut telemetry = Vec::new();
        run.data.write_csv(&mut telemetry).unwrap();
        let mut truth = Vec::new();
        write_truth_csv(&run, &mut truth).unwrap();
        (telemetry, truth)
    };
    assert_eq!(render(), render());
}

#[test]
fn adam_and_adagrad_both_train() {
    let s = cold_scenario(800, 8);
    let mut configs = small_configs(5);
    for c in &mut configs {
        c.optimizer = OptimizerKind::Adam;
    }
    let (_, report) = train_offline(&s.base, &s.data, &s.socs, &s.batt, &configs, &TrainOptions::default()).unwrap();
    assert!(report.best_loss < report.baseline_loss);
}
