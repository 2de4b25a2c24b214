mod common;

use homcirc::builtins::{MLC_COUPLED, RC_LINEAR, RC_SHORT, VDP_CCONTROLLED, VDP_LAPSHIN};
use homcirc::circuit::load_circuit;
use homcirc::homomodel::{assemble, ModelError};
use homcirc::netlist::DeviceKind;
use homcirc::rational::{q, QMatrix};
use homcirc::solver::{consistent_init, SimulationConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::model;

#[test]
fn vdp_constraint_is_capacitor_voltage_against_resistor() {
    let m = model(VDP_LAPSHIN);
    assert_eq!(m.splitting.a_c_minus, QMatrix::from_i64(1, 1, &[1]));
    assert_eq!(m.splitting.a_c_perp.nrows(), 0);
    assert_eq!(m.report().residual_dimension, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sign = 0.0;
    for _ in 0..20 {
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = m.constraint_residual(&u)[0];
        let diff = u[0] - u[2]; // ζ_c(u_c) − ζ_r(u_r)
        if sign == 0.0 {
            sign = (r / diff).signum();
        }
        assert!((r - sign * diff).abs() < 1e-12);
    }
}

#[test]
fn mlc_dimensions_and_linear_origin() {
    let m = model(MLC_COUPLED);
    assert_eq!(m.report().residual_dimension, 5);
    assert_eq!(m.dims.m_r, 5);
    assert!(m.splitting.a0().det() != q(0));
    assert!(m.splitting.b0().det() != q(0));
    let rc = model(RC_LINEAR);
    assert_eq!(rc.constraint_residual(&[0.0, 0.0]).norm(), 0.0);
}

#[test]
fn capacitor_loop_is_rejected() {
    let text = "circuit cloop\nground 0\nnode 1\n\
        branch C1 kind=capacitor from=1 to=0 model=linear_c C=1\n\
        branch C2 kind=capacitor from=1 to=0 model=linear_c C=1\n\
        branch R kind=resistor from=1 to=0 model=linear_r p=1 q=1\n";
    assert!(matches!(
        assemble(load_circuit(text).unwrap()),
        Err(ModelError::Degenerate { .. })
    ));
}

#[test]
fn newton_projection_lands_on_constraint_set() {
    let m = model(MLC_COUPLED);
    let cfg = SimulationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = 0;
    for _ in 0..50 {
        let guess: Vec<f64> = (0..m.dims.m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Ok(u) = consistent_init(&m, &guess, &cfg) {
            assert!(m.constraint_residual(&u).amax() <= 1e-10);
            assert_eq!(&u[..4], &guess[..4], "only algebraic variables move");
            ok += 1;
        }
    }
    assert!(ok >= 40, "{ok}/50 projections converged");
}

#[test]
fn vdp_constraint_jacobian_depends_on_resistor_only() {
    let m = model(VDP_LAPSHIN);
    let a = m.constraint_jacobian_ur_at(&[0.1, 0.2, 0.7]);
    let b = m.constraint_jacobian_ur_at(&[-1.3, 2.9, 0.7]);
    assert_eq!(a, b);
    // −ζ_r′ up to the sign convention of the residual
    assert_eq!(a.shape(), (1, 1));
    assert!((a[(0, 0)].abs() - 1.0).abs() < 1e-14);
    let cc = model(VDP_CCONTROLLED);
    for ur in [-1.0, 0.2, 0.577, 1.5] {
        let j = cc.constraint_jacobian_ur_at(&[0.0, 0.0, ur])[(0, 0)];
        assert!((j.abs() - (-1.0 + 3.0 * ur * ur).abs()).abs() < 1e-12);
    }
}

#[test]
fn regularity_flags() {
    let m = model(VDP_LAPSHIN);
    let at_extremum = m.regularity_check(&[0.0, std::f64::consts::FRAC_PI_2, 0.0]);
    assert!(!at_extremum.regular);
    assert!(at_extremum.l_nonzero.iter().any(|x| !x));
    assert!(m.regularity_check(&[0.5, -1.805, 0.5]).regular);

    let rc = model(RC_LINEAR);
    let short = model(RC_SHORT);
    for ur in [-2.0, -0.5, 0.0, 0.3, 1.9] {
        assert!(rc.regularity_check(&[0.4, ur]).regular);
        assert!(!short.regularity_check(&[0.4, ur]).regular);
    }
}

#[test]
fn manifold_rank() {
    let cc = model(VDP_CCONTROLLED);
    let ur = (1.0f64 / 3.0).sqrt();
    let impasse = [-ur + ur.powi(3), 0.3, ur];
    assert!(!cc.regularity_check(&impasse).regular);
    let rep = cc.manifold_rank_check(&impasse);
    assert_eq!(rep.resistive_rank, 1);
    assert!(rep.manifold_guaranteed);
    assert!(cc.manifold_rank_check(&[0.0, 0.0, 0.0]).manifold_guaranteed);

    let flat = "circuit flat\nground 0\nnode 1\n\
        branch C kind=capacitor from=1 to=0 model=linear_c C=1\n\
        branch R kind=resistor from=1 to=0 model=param psi=\"u^2\" zeta=\"u^3\"\n";
    let f = model(flat);
    let rep = f.manifold_rank_check(&[0.0, 0.0]);
    assert!(rep.resistive_rank < rep.m_r && !rep.manifold_guaranteed);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splitting_identities_hold(seed in any::<u64>()) {
        let m = common::random_rlc_model(&mut ChaCha8Rng::seed_from_u64(seed), 6, 10);
        let t = &m.topology;
        let s = &m.splitting;
        let a_c = t.a_block(DeviceKind::Capacitor);
        let b_l = t.b_block(DeviceKind::Inductor);
        if a_c.ncols() > 0 {
            prop_assert_eq!(s.a_c_minus.mul(&a_c), QMatrix::identity(a_c.ncols()));
            prop_assert!(s.a_c_perp.nrows() == 0 || s.a_c_perp.mul(&a_c).is_zero());
        }
        if b_l.ncols() > 0 {
            prop_assert_eq!(s.b_l_minus.mul(&b_l), QMatrix::identity(b_l.ncols()));
            prop_assert!(s.b_l_perp.nrows() == 0 || s.b_l_perp.mul(&b_l).is_zero());
        }
        prop_assert!(s.a0().det() != q(0));
        prop_assert!(s.b0().det() != q(0));
        prop_assert_eq!(m.report().residual_dimension, m.dims.m_r);
    }

    #[test]
    fn constraint_determinant_is_a_multiple_of_k(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_rlc_model(&mut rng, 6, 10);
        let mut c: Option<f64> = None;
        for _ in 0..100 {
            let mut u = vec![0.0; m.dims.m];
            for k in m.y_range() {
                u[k] = rng.gen_range(-2.0..2.0);
            }
            let det = m.constraint_jacobian_ur_at(&u).determinant();
            let (kv, scale) = m.kirchhoff_value(&u).unwrap();
            match c {
                None if kv.abs() > 1e-3 * scale => c = Some(det / kv),
                None => {}
                Some(c0) => prop_assert!((det - c0 * kv).abs() <= 1e-8 * c0.abs() * scale),
            }
        }
        prop_assert!(c.is_some_and(|c| c != 0.0));
    }
}
