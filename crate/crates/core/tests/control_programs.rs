use periodic_harris::control::*;
use periodic_harris::model::*;
use proptest::prelude::*;

fn suite(spec: &ModelSpec, seed: u64) -> Vec<ControlRun> {
    let starts = random_start_points(spec, 10, seed).unwrap();
    let opts = IntegrateOptions { record_stride: 100, ..Default::default() };
    run_suite(spec, &starts, &ControlParams::default(), &opts).unwrap()
}

fn check_common(runs: &[ControlRun]) {
    for run in runs {
        assert!(run.converged, "{:?}", run.terminal);
        assert!(run.terminal_distance < 1e-2, "{:?}", run.terminal);
        assert!(run.energy.is_finite() && run.energy >= 0.0);
        assert!(run.phases.iter().all(|p| p.energy.is_finite()));
    }
    for a in runs {
        for b in runs {
            assert!(distance(&a.terminal, &b.terminal) < 2e-2);
        }
    }
}

#[test]
fn cir_suite_reaches_one_target() {
    let spec = ModelSpec::cir(1.0, default_signal()).unwrap();
    let runs = suite(&spec, 21);
    check_common(&runs);
    for run in &runs {
        let names: Vec<&str> = run.phases.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["II", "III", "IV", "V", "VI"]);
        assert!(run.phases.iter().all(|p| p.xi_min > 0.0));
        let climb = &run.phases[1];
        assert!(climb.v_min > -12.0 && climb.v_max < 120.0);
        assert!(run.phases[3..].iter().all(|p| p.xi_min > 1.0 - 1e-9));
        let t = run.phase_times();
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn ou_suite_reaches_one_target() {
    let spec = ModelSpec::ou(default_signal());
    let runs = suite(&spec, 22);
    check_common(&runs);
    for run in &runs {
        assert!(run.terminal[4].abs() < 1e-2);
    }
}

#[test]
fn suite_rejects_models_without_a_construction() {
    assert!(random_start_points(&ModelSpec::toy(1.0).unwrap(), 3, 0).is_err());
}

#[test]
fn constants_satisfy_their_inequalities() {
    let k = ControlConstants::standard();
    assert!(k.f >= 36.0 * 132.0 + 0.3 * 109.4);
    assert!((k.k as f64 - 121.0) * (1.0 + k.f) - k.c / k.lambda > 1.0);
    assert!(k.lambda > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ramps_meet_their_bounds(
        start in -50.0f64..50.0,
        end in -50.0f64..50.0,
        slope in 0.01f64..5.0,
        order in 1u32..8,
    ) {
        let ramp = smooth_ramp(RampSpec { start, end, slope, order }).unwrap();
        prop_assert_eq!(ramp.eval(0.0).0, start);
        let settle = (end - start).abs() / slope + 1.0;
        prop_assert!((ramp.eval(settle).0 - end).abs() <= 1e-9 * (1.0 + end.abs()));
        prop_assert!((ramp.eval(settle * 3.0).0 - end).abs() <= 1e-9 * (1.0 + end.abs()));
        for i in 0..=400 {
            let t = settle * i as f64 / 400.0;
            let (r, dr) = ramp.eval(t);
            prop_assert!(dr.abs() <= slope * (1.0 + 1e-9), "r'({t}) = {dr}");
            prop_assert!(r >= start.min(end) - 1e-9 && r <= start.max(end) + 1e-9);
        }
    }
}
