//! Property suite run against a single circuit (and its scenario).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::devices::{Slot, CHECK_SAMPLES};
use crate::graph::{is_proper, matrix_tree_count, proper_trees, spanning_trees};
use crate::homomodel::HomogeneousModel;
use crate::netlist::{DeviceKind, Domain};
use crate::rational::QMatrix;
use crate::solver::{integrate, SimulationConfig, Termination};
use crate::treepoly::{kirchhoff_polynomial, weighted_det};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub circuit: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

/// Runs every applicable property on `model`; `scenario` (if given) is
/// integrated and its trajectory checked.
pub fn validate(
    model: &HomogeneousModel,
    scenario: Option<&SimulationConfig>,
    seed: u64,
) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![
        topology_checks(model),
        tree_checks(model),
        weighted_det_check(model, &mut rng),
        device_checks(model),
        splitting_checks(model),
    ];
    if model.kirchhoff.is_some() {
        checks.push(constraint_det_check(model, &mut rng));
    }
    if let Some(cfg) = scenario {
        checks.push(simulation_check(model, cfg));
    }
    let passed = checks.iter().all(|c| c.passed);
    ValidationReport {
        circuit: model.circuit.name.clone(),
        seed,
        checks,
        passed,
    }
}

fn topology_checks(model: &HomogeneousModel) -> Check {
    let t = &model.topology;
    let ok = t.a.mul(&t.b.transpose()).is_zero();
    check("incidence_cutset_orthogonality", ok, "A·Bᵀ = 0")
}

fn tree_checks(model: &HomogeneousModel) -> Check {
    let g = &model.circuit.graph;
    let count = matrix_tree_count(&model.topology);
    let (trees, proper) = match (spanning_trees(g), proper_trees(g)) {
        (Ok(t), Ok(p)) => (t, p),
        (Err(e), _) | (_, Err(e)) => {
            return check("tree_enumeration", true, format!("skipped: {e}"))
        }
    };
    let count_ok = count == trees.len().into();
    let subset_ok = proper.iter().all(|p| trees.contains(p) && is_proper(g, p));
    let nondeg_ok = model.nondegeneracy.nondegenerate == !proper.is_empty();
    check(
        "tree_enumeration",
        count_ok && subset_ok && nondeg_ok,
        format!(
            "{} spanning trees (det AAᵀ = {count}), {} proper",
            trees.len(),
            proper.len()
        ),
    )
}

fn weighted_det_check(model: &HomogeneousModel, rng: &mut ChaCha8Rng) -> Check {
    let Ok(k) = kirchhoff_polynomial(&model.circuit.graph, None) else {
        return check("weighted_matrix_tree", true, "skipped: too many branches");
    };
    let m = model.dims.m;
    let mut ratio: Option<f64> = None;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
        let pq: Vec<(f64, f64)> = p.iter().copied().zip(q.iter().copied()).collect();
        let kv = k.evaluate(&pq).unwrap_or(f64::NAN);
        let r = weighted_det(&model.topology, &p, &q) / kv;
        match ratio {
            None => ratio = Some(r),
            Some(r0) => worst = worst.max(((r - r0) / r0).abs()),
        }
    }
    check(
        "weighted_matrix_tree",
        worst <= 1e-9 && ratio.is_some_and(f64::is_finite),
        format!("ratio {:?}, max relative deviation {worst:.2e}", ratio),
    )
}

fn device_checks(model: &HomogeneousModel) -> Check {
    let mut bad = Vec::new();
    for (k, slot) in model.devices().slots.iter().enumerate() {
        if let Slot::Simple(ch) = slot {
            let reg = ch.regularity_check(CHECK_SAMPLES);
            let per = ch.domain == Domain::Line || ch.periodicity_check(CHECK_SAMPLES).passed;
            if !reg.passed || !per {
                bad.push(model.ids()[k].clone());
            }
        }
    }
    check(
        "device_regularity",
        bad.is_empty(),
        if bad.is_empty() {
            "all characteristics regular".to_string()
        } else {
            format!("irregular: {bad:?}")
        },
    )
}

fn splitting_checks(model: &HomogeneousModel) -> Check {
    let t = &model.topology;
    let s = &model.splitting;
    let a_c = t.a_block(DeviceKind::Capacitor);
    let b_l = t.b_block(DeviceKind::Inductor);
    let ok_part = |minus: &QMatrix, perp: &QMatrix, x: &QMatrix| -> bool {
        if x.ncols() == 0 {
            return true;
        }
        minus.mul(x) == QMatrix::identity(x.ncols()) && (perp.nrows() == 0 || perp.mul(x).is_zero())
    };
    let ok = ok_part(&s.a_c_minus, &s.a_c_perp, &a_c) && ok_part(&s.b_l_minus, &s.b_l_perp, &b_l);
    check(
        "splitting_identities",
        ok,
        "A_c⁻A_c = I, A_c^⊥A_c = 0, B_l⁻B_l = I, B_l^⊥B_l = 0",
    )
}

fn constraint_det_check(model: &HomogeneousModel, rng: &mut ChaCha8Rng) -> Check {
    let y = model.y_range();
    let mut c: Option<f64> = None;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut u = vec![0.0; model.dims.m];
        for k in y.clone() {
            u[k] = rng.gen_range(-2.0..2.0);
        }
        let det = model.constraint_jacobian_ur_at(&u).determinant();
        let Some((kv, scale)) = model.kirchhoff_value(&u) else {
            continue;
        };
        match c {
            None if kv.abs() > 1e-3 * scale => c = Some(det / kv),
            None => {}
            Some(c0) => {
                let dev = (det - c0 * kv).abs() / (c0.abs() * scale).max(1e-300);
                worst = worst.max(dev);
            }
        }
    }
    check(
        "constraint_determinant_polynomial",
        c.is_some() && worst <= 1e-8,
        format!("constant {:?}, max scaled deviation {worst:.2e}", c),
    )
}

fn simulation_check(model: &HomogeneousModel, cfg: &SimulationConfig) -> Check {
    match integrate(model, cfg) {
        Err(e) => check("trajectory_invariants", false, e.to_string()),
        Ok(tr) => {
            let r = tr.residuals(model);
            let mono = tr.times.windows(2).all(|w| w[1] > w[0]);
            let ok = tr.termination != Termination::NewtonFailure
                && mono
                && r.constraint <= 10.0 * cfg.newton_tol
                && r.kcl <= 1e-8
                && r.kvl <= 1e-8;
            check(
                "trajectory_invariants",
                ok,
                format!(
                    "{} samples, {:?}, constraint {:.2e}, KCL {:.2e}, KVL {:.2e}",
                    tr.len(),
                    tr.termination,
                    r.constraint,
                    r.kcl,
                    r.kvl
                ),
            )
        }
    }
}
