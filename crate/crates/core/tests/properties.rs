use hybrid_ecm::data::{mse, resample, rmse, RawRecord};
use hybrid_ecm::ecm::{soc_step, ud_step, OcvCurve, TauBounds};
use hybrid_ecm::ffrls::{params_from_theta, theta_forward};
use hybrid_ecm::synth::reference_ocv;
use hybrid_ecm::{BatteryConfig, EcmParams};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = EcmParams> {
    (1e-4..1.0f64, 1e-4..1.0f64, 10.0..1e5f64)
        .prop_filter("tau in bounds", |(_, rd, cd)| rd * cd >= 0.1 && rd * cd <= 1e5)
        .prop_map(|(r0, rd, cd)| EcmParams::new(r0, rd, cd).unwrap())
}

proptest! {
    #[test]
    fn theta_round_trip(p in params(), dt in 0.1..10.0f64) {
        let bounds = TauBounds::for_dt(dt);
        prop_assume!(bounds.contains(p.tau()));
        let back = params_from_theta(&theta_forward(&p, dt), dt, &bounds).unwrap();
        for (a, b) in [(p.r0, back.r0), (p.rd, back.rd), (p.cd, back.cd)] {
            prop_assert!(((a - b) / a).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn ud_step_contracts_towards_steady_state(p in params(), u in -1.0..1.0f64, i in -10.0..10.0f64) {
        let steady = p.rd * i;
        let next = ud_step(u, i, &p, 1.0);
        prop_assert!((next - steady).abs() <= (u - steady).abs() + 1e-15);
        prop_assert!((ud_step(steady, i, &p, 1.0) - steady).abs() <= 1e-12 * steady.abs().max(1.0));
    }

    #[test]
    fn soc_step_is_affine_in_current(soc in 0.0..1.0f64, a in -5.0..5.0f64, b in -5.0..5.0f64) {
        let cfg = BatteryConfig::new(10_440.0, 1.0, reference_ocv()).unwrap();
        let lhs = soc_step(soc, a + b, &cfg) - soc;
        let rhs = (soc_step(soc, a, &cfg) - soc) + (soc_step(soc, b, &cfg) - soc);
        prop_assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn ocv_derivative_matches_finite_difference(
        coeffs in prop::collection::vec(-3.0..3.0f64, 2..=13),
        soc in 0.05..0.95f64,
    ) {
        let curve = OcvCurve::new_unchecked(coeffs, [0.0, 1.0]);
        let h = 1e-6;
        let fd = (curve.value(soc + h) - curve.value(soc - h)) / (2.0 * h);
        let (_, dv) = curve.eval(soc);
        prop_assert!((dv - fd).abs() <= 1e-6 * dv.abs().max(1.0), "{dv} vs {fd}");
    }

    #[test]
    fn mse_scales_quadratically(pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..50), c in 0.1..10.0f64) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base = mse(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        prop_assert!((mse(&xs, &ys).unwrap() - c * c * base).abs() <= 1e-9 * (1.0 + c * c * base));
        prop_assert!((rmse(&xs, &ys).unwrap() - c * rmse(&x, &y).unwrap()).abs() <= 1e-9 * (1.0 + c));
    }

    #[test]
    fn resampling_preserves_charge(
        currents in prop::collection::vec(-6.0..6.0f64, 20..400),
        per_bin in 1usize..20,
    ) {
        let sub = 1.0 / per_bin as f64;
        let raw: Vec<RawRecord> = currents
            .iter()
            .enumerate()
            .map(|(k, i)| RawRecord { time_s: k as f64 * sub, current_a: *i, voltage_v: 3.7, temp_c: 25.0 })
            .collect();
        let full = currents.len() / per_bin * per_bin;
        prop_assume!(full / per_bin >= 2);
        let series = resample(&raw[..full], 1.0).unwrap();
        let before: f64 = currents[..full].iter().sum::<f64>() * sub;
        let after = series.charge();
        prop_assert!((before - after).abs() <= 1e-9 * before.abs().max(1.0), "{before} vs {after}");
    }
}
