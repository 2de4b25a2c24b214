mod common;

use homcirc::builtins::{
    builtin, OPPOSED_DIODES, RC_LINEAR, VDP_CCONTROLLED, VDP_CUBIC, VDP_LAPSHIN,
};
use homcirc::devices::catalog;
use homcirc::netlist::DeviceKind;
use homcirc::solver::{
    consistent_init, impasse_monitor, integrate, integrate_from, quasilinear_chart, state_rhs,
    Chart, Classification, EventKind, SimulationConfig, SolverError, Termination,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{builtin_model, model};

fn inv_sqrt3() -> f64 {
    (1.0f64 / 3.0).sqrt()
}

fn solve(e: &nalgebra::DMatrix<f64>, f: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
    e.clone().lu().solve(f).expect("nonsingular")
}

#[test]
fn rc_rhs_is_minus_voltage() {
    let m = model(RC_LINEAR);
    let cfg = SimulationConfig::default();
    let u = consistent_init(&m, &[1.0, 0.0], &cfg).unwrap();
    let rhs = state_rhs(&m, &u).unwrap();
    assert_eq!(rhs.len(), 1);
    assert!((rhs[0] + 1.0).abs() < 1e-12);
}

#[test]
fn vdp_lapshin_rhs_matches_explicit_form() {
    let m = model(VDP_LAPSHIN);
    let cfg = SimulationConfig::default();
    let lap = catalog::lapshin(3, 3, 0.2, 1.0, 1.0, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 30 {
        let (uc, ul): (f64, f64) = (
            rng.gen_range(-1.5..1.5),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let (_, ql) = lap.incremental_pq(ul);
        if ql.abs() < 0.05 {
            continue;
        }
        let u = consistent_init(&m, &[uc, ul, 0.0], &cfg).unwrap();
        assert!((u[2] - uc).abs() < 1e-12, "u_r follows v_c");
        let rhs = state_rhs(&m, &u).unwrap();
        let il = lap.evaluate(ul).0;
        let ir = -uc + uc.powi(3);
        // C v_c′ = i_l − i_r, ζ_l′ u_l′ = −v_c
        assert!((rhs[0] - (il - ir) / 0.15).abs() < 1e-9 * (1.0 + rhs[0].abs()));
        assert!((rhs[1] + uc / ql).abs() < 1e-9 * (1.0 + rhs[1].abs()));
        checked += 1;
    }
}

#[test]
fn consistent_initialization_examples() {
    let cfg = SimulationConfig::default();
    let cubic = model(VDP_CUBIC);
    let u = consistent_init(&cubic, &[0.7, 0.3, 0.0], &cfg).unwrap();
    assert!((u[2] - 0.7).abs() < 1e-14);
    assert_eq!(&u[..2], &[0.7, 0.3]);

    let cc = model(VDP_CCONTROLLED);
    let u = consistent_init(&cc, &[0.0, 0.0, 0.1], &cfg).unwrap();
    assert!(u[2].abs() < 1e-10, "the root nearest the guess");
    let u = consistent_init(&cc, &[0.0, 0.0, 0.9], &cfg).unwrap();
    assert!((u[2] - 1.0).abs() < 1e-10);
}

#[test]
fn empty_constraint_set_fails() {
    let m = model(OPPOSED_DIODES);
    let b = builtin("opposed_diodes").unwrap();
    let guess = b.scenario.initial_guess(&m).unwrap();
    let err = consistent_init(&m, &guess, &b.scenario).unwrap_err();
    assert!(
        matches!(
            err,
            SolverError::NewtonDivergence { .. } | SolverError::SingularJacobian { .. }
        ),
        "{err}"
    );
    assert!(integrate(&m, &b.scenario).is_err());
}

#[test]
fn equilibrium_start_stays_put() {
    let m = model(VDP_CUBIC);
    let zero = vec![0.0; 3];
    assert!(state_rhs(&m, &zero).unwrap().amax() < 1e-15);
    let cfg = SimulationConfig {
        t_end: 1.0,
        ..SimulationConfig::default()
    };
    let tr = integrate_from(&m, &zero, &cfg, None, true).unwrap();
    assert_eq!(tr.termination, Termination::Completed);
    assert!(tr.states.iter().all(|s| s.iter().all(|x| x.abs() < 1e-12)));
    assert!(tr.events_of(EventKind::EquilibriumHit).next().is_some());
}

#[test]
fn zero_horizon_gives_empty_trajectory() {
    let m = model(RC_LINEAR);
    let cfg = SimulationConfig {
        t_end: 0.0,
        ..builtin("rc_linear").unwrap().scenario
    };
    let tr = integrate(&m, &cfg).unwrap();
    assert!(tr.is_empty());
    assert!(tr.events.is_empty());
    assert_eq!(tr.termination, Termination::Completed);
}

#[test]
fn config_errors() {
    let m = model(RC_LINEAR);
    for cfg in [
        SimulationConfig {
            rtol: -1.0,
            ..Default::default()
        },
        SimulationConfig {
            t_end: f64::NAN,
            ..Default::default()
        },
        SimulationConfig {
            max_steps: 0,
            ..Default::default()
        },
        SimulationConfig {
            singular_capture_tol: -0.1,
            ..Default::default()
        },
    ] {
        assert!(matches!(
            integrate(&m, &cfg),
            Err(SolverError::InvalidConfig(_))
        ));
    }
    let mut cfg = SimulationConfig::default();
    cfg.initial.insert("Z".into(), 1.0);
    assert!(matches!(integrate(&m, &cfg), Err(SolverError::UnknownBranch(id)) if id == "Z"));
    assert!(matches!(
        Chart::from_coords(&m, &[0, 1]),
        Err(SolverError::UnsolvableChart)
    ));
}

#[test]
fn step_budget_terminates() {
    let m = builtin_model("vdp_cubic");
    let cfg = SimulationConfig {
        max_steps: 5,
        ..builtin("vdp_cubic").unwrap().scenario
    };
    let tr = integrate(&m, &cfg).unwrap();
    assert_eq!(tr.termination, Termination::MaxSteps);
}

#[test]
fn quasilinear_charts() {
    let m = model(VDP_CCONTROLLED);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let ur: f64 = rng.gen_range(-1.5..1.5);
        let rp = -1.0 + 3.0 * ur * ur;
        if rp.abs() < 0.1 {
            continue;
        }
        let ul: f64 = rng.gen_range(-1.0..1.0);
        let u = [-ur + ur.powi(3), ul, ur];
        assert!(m.constraint_residual(&u).amax() < 1e-14);
        // (u_l, u_r) chart: u_l′ = −r(u_r), r′(u_r) u_r′ = u_l − u_r
        let cm = quasilinear_chart(&m, &u, &[1, 2]).unwrap();
        let z = solve(&cm.e, &cm.f);
        assert!((z[0] + (-ur + ur.powi(3))).abs() < 1e-10);
        assert!((z[1] - (ul - ur) / rp).abs() < 1e-10 * (1.0 + z[1].abs()));
        // the standard chart reproduces the state-space right-hand side
        let std = quasilinear_chart(&m, &u, &[0, 1]).unwrap();
        let x = solve(&std.e, &std.f);
        let rhs = state_rhs(&m, &u).unwrap();
        assert!((x - rhs).amax() < 1e-12);
    }
}

#[test]
fn impasse_monitor_classifications() {
    let cfg = SimulationConfig::default();
    let cc = model(VDP_CCONTROLLED);
    let ur = inv_sqrt3();
    let fold = [-ur + ur.powi(3), 0.2, ur];
    assert_eq!(
        impasse_monitor(&cc, &fold, &cfg).unwrap(),
        Classification::ImpasseCandidate
    );
    assert_eq!(
        impasse_monitor(&cc, &[0.0, 0.2, 0.0], &cfg).unwrap(),
        Classification::Regular
    );

    // capacitor–memristor loop: v_c = 0 along the line of equilibria, and
    // q(u_m) = 0 at u_m = 1/√3 for the charge-controlled device
    let mc = builtin_model("mc_charge");
    assert_eq!(mc.kind(1), DeviceKind::Memristor);
    let u = [0.0, ur];
    assert_eq!(
        impasse_monitor(&mc, &u, &cfg).unwrap(),
        Classification::SingularEquilibriumCandidate
    );
    assert_eq!(
        impasse_monitor(&mc, &[0.0, 1.0], &cfg).unwrap(),
        Classification::Regular
    );
}

#[test]
fn ccontrolled_vdp_runs_into_the_fold() {
    let b = builtin("vdp_ccontrolled").unwrap();
    let m = model(b.netlist);
    let tr = integrate(&m, &b.scenario).unwrap();
    assert_eq!(tr.termination, Termination::Impasse);
    let last = tr
        .events_of(EventKind::Impasse)
        .last()
        .expect("impasse event");
    assert!(
        (last.state[2].abs() - inv_sqrt3()).abs() < 1e-3,
        "u_r = {}",
        last.state[2]
    );
    assert!(tr.residuals(&m).constraint < 1e-8);
}

#[test]
fn chart_choice_does_not_change_the_solution() {
    let b = builtin("vdp_ccontrolled").unwrap();
    let m = model(b.netlist);
    let cfg = SimulationConfig {
        t_end: 0.3,
        ..b.scenario.clone()
    };
    // start both runs from the same consistent point
    let guess = consistent_init(&m, &cfg.initial_guess(&m).unwrap(), &cfg).unwrap();
    let a = integrate_from(&m, &guess, &cfg, None, false).unwrap();
    let chart = Chart::from_coords(&m, &[1, 2]).unwrap();
    let c = integrate_from(&m, &guess, &cfg, Some(chart), false).unwrap();
    assert_eq!(a.termination, Termination::Completed);
    assert_eq!(c.termination, Termination::Completed);
    let (ua, uc) = (a.last_state().unwrap(), c.last_state().unwrap());
    // reference: u_l′ = −r(u_r), r′(u_r) u_r′ = u_l − u_r integrated to t = 0.3
    // with an independent high-accuracy Runge–Kutta code
    let reference = [1.024202392322527, -0.3807340703089431, 1.3303633560462453];
    for k in 0..3 {
        assert!((ua[k] - reference[k]).abs() < 1e-6, "{ua:?}");
    }
    for k in 0..3 {
        assert!((ua[k] - uc[k]).abs() < 1e-6, "{ua:?} vs {uc:?}");
    }
}

#[test]
fn lapshin_events_are_ordered() {
    let b = builtin("vdp_lapshin").unwrap();
    let m = model(b.netlist);
    let tr = integrate(&m, &b.scenario).unwrap();
    assert_eq!(tr.termination, Termination::Completed);
    assert!(tr.times.windows(2).all(|w| w[0] < w[1]));
    assert!(tr.events.windows(2).all(|w| w[0].time <= w[1].time));
    let psi = EventKind::DerivativeZero {
        kind: DeviceKind::Inductor,
        zeta: false,
    };
    let zeta = EventKind::DerivativeZero {
        kind: DeviceKind::Inductor,
        zeta: true,
    };
    assert!(tr.events_of(psi).count() >= 3);
    assert!(tr.events_of(zeta).count() >= 1);
    assert!(tr.events_of(psi).all(|e| e.branch.as_deref() == Some("L")));
    assert!(tr.residuals(&m).constraint < 1e-8);
}

#[test]
fn lapshin_with_unit_capacitance_reaches_an_impasse() {
    let text = VDP_LAPSHIN.replace("C=0.15", "C=1");
    let m = model(&text);
    let cfg = SimulationConfig {
        singular_capture_tol: 0.0,
        ..builtin("vdp_lapshin").unwrap().scenario
    };
    let tr = integrate(&m, &cfg).unwrap();
    assert_eq!(tr.termination, Termination::Impasse);
    assert!(tr.diagnostic.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rc_decay_is_exponential(c in 0.3f64..3.0, r in 0.3f64..3.0, v0 in -2.0f64..2.0) {
        let text = format!(
            "circuit rc\nground 0\nnode 1\n\
             branch C kind=capacitor from=1 to=0 model=linear_c C={c}\n\
             branch R kind=resistor from=1 to=0 model=linear_r p=1 q={r}\n"
        );
        let m = model(&text);
        let mut cfg = SimulationConfig { t_end: 1.0, ..Default::default() };
        cfg.initial.insert("C".into(), v0);
        let tr = integrate(&m, &cfg).unwrap();
        prop_assert_eq!(tr.termination, Termination::Completed);
        let v0 = tr.outputs[0].v[0];
        for (t, out) in tr.times.iter().zip(&tr.outputs) {
            let vc = out.v[0];
            let exact = v0 * (-t / (r * c)).exp();
            prop_assert!((vc - exact).abs() < 1e-6, "t={} {} vs {}", t, vc, exact);
        }
    }
}
