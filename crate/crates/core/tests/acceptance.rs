//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line
//! with a short measurement summary; the test fails if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use homcirc::analysis::{
    eigen_loci, eigenvalue_symmetry_check, equilibrium_through, linearization_pencil,
    singular_scan, LocusKind,
};
use homcirc::builtins::{builtin, MC_CHARGE, MC_FLUX, RC_LINEAR, RC_SHORT};
use homcirc::expr::{parse_expression, Expr};
use homcirc::graph::{proper_trees, topology_matrices};
use homcirc::solver::{integrate, EventKind, Termination};
use homcirc::treepoly::{kirchhoff_polynomial, weighted_det, Assignment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    builtin_model, central_difference, model, random_expr, random_graph, random_rlc_model,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn run(
    results: &mut Vec<(String, bool)>,
    name: &str,
    budget: Option<Duration>,
    f: impl FnOnce() -> Outcome,
) {
    let t0 = Instant::now();
    let mut o = f();
    let elapsed = t0.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            o.passed = false;
            o.detail.push_str(&format!("; over budget {b:?}"));
        }
    }
    println!(
        "{} {name}: {} ({:.3} s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    results.push((name.to_string(), o.passed));
}

fn mlc_proper_trees() -> Outcome {
    let m = builtin_model("mlc_coupled");
    let trees = proper_trees(&m.circuit.graph).unwrap();
    let k = m.kirchhoff.as_ref().unwrap();
    let got: BTreeSet<String> = k.to_string().split(" + ").map(str::to_string).collect();
    let expected: BTreeSet<String> = [
        "p1*q2*p3*q4*q5",
        "p1*q2*q3*p4*q5",
        "q1*p2*p3*q4*q5",
        "q1*p2*q3*p4*q5",
        "p1*q2*q3*q4*p5",
        "q1*p2*q3*q4*p5",
        "q1*q2*p3*q4*p5",
        "q1*q2*q3*p4*p5",
    ]
    .into_iter()
    .map(str::to_string)
    .collect();
    outcome(
        trees.len() == 8 && got == expected,
        format!(
            "{} proper trees, polynomial set-equal: {}",
            trees.len(),
            got == expected
        ),
    )
}

fn weighted_matrix_tree() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = random_graph(&mut rng, 8, 14);
        let t = topology_matrices(&g).unwrap();
        let k = kirchhoff_polynomial(&g, None).unwrap();
        let m = g.branch_count();
        let mut first: Option<f64> = None;
        for _ in 0..20 {
            let p: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pq: Vec<(f64, f64)> = p.iter().copied().zip(q.iter().copied()).collect();
            let (kv, scale) = k.evaluate_with_scale(&pq).unwrap();
            let det = weighted_det(&t, &p, &q);
            match first {
                None if kv.abs() > 1e-6 * scale => first = Some(det / kv),
                None => {}
                Some(c) => worst = worst.max((det - c * kv).abs() / (c.abs() * scale)),
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!("50 graphs x 20 draws, max relative deviation {worst:.2e}"),
    )
}

fn constraint_determinant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut constants = Vec::new();
    for _ in 0..10 {
        let m = random_rlc_model(&mut rng, 6, 9);
        let mut c: Option<f64> = None;
        for _ in 0..1000 {
            let mut u = vec![0.0; m.dims.m];
            for k in m.y_range() {
                u[k] = rng.gen_range(-2.0..2.0);
            }
            let det = m.constraint_jacobian_ur_at(&u).determinant();
            let (kv, scale) = m.kirchhoff_value(&u).unwrap();
            match c {
                None if kv.abs() > 1e-3 * scale => c = Some(det / kv),
                None => {}
                Some(c0) => worst = worst.max((det - c0 * kv).abs() / (c0.abs() * scale)),
            }
        }
        constants.push(c.unwrap_or(f64::NAN));
    }
    let ok = worst <= 1e-8 && constants.iter().all(|c| c.is_finite() && *c != 0.0);
    outcome(
        ok,
        format!(
            "10 circuits x 1000 points, max scaled deviation {worst:.2e}, constants {constants:?}"
        ),
    )
}

fn mlc_fault() -> Outcome {
    let m = builtin_model("mlc_coupled");
    let k = m.kirchhoff.as_ref().unwrap();
    let one = Assignment::Value { p: 1.0, q: 1.0 };
    let fixed = vec![
        ("1".to_string(), one),
        ("3".to_string(), one),
        ("5".to_string(), one),
        ("2".to_string(), Assignment::Value { p: 1.0, q: 0.0 }),
        ("4".to_string(), Assignment::DivideByQ),
    ];
    let g4 = k.dehomogenize(&fixed).unwrap().linear_root("g4").unwrap();
    // general resistances against the closed form
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let r: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..3.0)).collect();
        let fixed = vec![
            ("1".to_string(), Assignment::Value { p: 1.0, q: r[0] }),
            ("3".to_string(), Assignment::Value { p: 1.0, q: r[1] }),
            ("5".to_string(), Assignment::Value { p: 1.0, q: r[2] }),
            ("2".to_string(), Assignment::Value { p: 1.0, q: 0.0 }),
            ("4".to_string(), Assignment::DivideByQ),
        ];
        let got = k.dehomogenize(&fixed).unwrap().linear_root("g4").unwrap();
        let formula = -(r[0] * r[1] + r[0] * r[2]) / (r[0] * r[1] * r[2]);
        worst = worst.max((got - formula).abs());
    }
    outcome(
        (g4 + 2.0).abs() <= 1e-12 && worst <= 1e-12,
        format!("g4 = {g4}, closed-form deviation over random r {worst:.1e}"),
    )
}

/// Runs the Lapshin scenario with the given capacitance.
fn vdp_lapshin(cap: &str) -> Outcome {
    let b = builtin("vdp_lapshin").unwrap();
    let m = model(&b.netlist.replace("C=0.15", &format!("C={cap}")));
    let tr = match integrate(&m, &b.scenario) {
        Ok(tr) => tr,
        Err(e) => return outcome(false, format!("integration error: {e}")),
    };
    let psi: Vec<f64> = tr
        .events_of(EventKind::DerivativeZero {
            kind: homcirc::netlist::DeviceKind::Inductor,
            zeta: false,
        })
        .map(|e| e.time)
        .collect();
    let zeta: Vec<&homcirc::solver::Event> = tr
        .events_of(EventKind::DerivativeZero {
            kind: homcirc::netlist::DeviceKind::Inductor,
            zeta: true,
        })
        .collect();
    let ids = &tr.ids;
    let (ic, il) = (
        ids.iter().position(|s| s == "C").unwrap(),
        ids.iter().position(|s| s == "L").unwrap(),
    );
    let zeta_ok = zeta.first().is_some_and(|e| {
        (e.state[ic] - 0.0).abs() <= 2e-2
            && (e.state[il] + std::f64::consts::FRAC_PI_2).abs() <= 2e-2
    });
    let order_ok = match (psi.first(), zeta.first()) {
        (Some(&p), Some(z)) => p < z.time,
        _ => false,
    };
    let horizon = 3.2 * 1.1;
    let by_horizon = psi.iter().filter(|&&t| t <= horizon).count();
    let ok = tr.termination == Termination::Completed && zeta_ok && order_ok && by_horizon == 5;
    outcome(
        ok,
        format!(
            "C={cap}: {:?}{}, zeta_l'=0 at {:?}, psi_l'=0 at {:?}",
            tr.termination,
            tr.diagnostic
                .as_ref()
                .map(|d| format!(" ({d})"))
                .unwrap_or_default(),
            zeta.first().map(|e| (e.time, e.state[ic], e.state[il])),
            psi
        ),
    )
}

fn memristor_pencil() -> Outcome {
    let flux = model(MC_FLUX);
    let charge = model(MC_CHARGE);
    let mut eig_dev = 0.0f64;
    let mut prod_dev = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let um: f64 = rng.gen_range(-2.0..2.0);
        for mdl in [&flux, &charge] {
            let u = equilibrium_through(mdl, 1, um).unwrap();
            let (p, q) = mdl.incremental_pairs(&u)[1];
            let pencil = linearization_pencil(mdl, &u).unwrap();
            let lam = pencil
                .nontrivial()
                .find(|e| e.im == 0.0)
                .map(|e| e.re)
                .unwrap();
            eig_dev = eig_dev.max((lam - (-p / q)).abs() / (1.0 + (p / q).abs()));
        }
        let s = eigenvalue_symmetry_check(&flux, &charge, um).unwrap();
        if let Some(pr) = s.product {
            prod_dev = prod_dev.max((pr - 1.0).abs());
        }
    }
    let family = |s: f64| vec![0.0, s];
    let root = (1.0f64 / 3.0).sqrt();
    let locus_err = |mdl, kind| -> f64 {
        let loci = eigen_loci(mdl, &family, -2.0, 2.0, 401, 1e-12).unwrap();
        let mut xs: Vec<f64> = loci
            .iter()
            .filter(|l| l.kind == kind)
            .map(|l| l.parameter)
            .collect();
        xs.sort_by(f64::total_cmp);
        if xs.len() != 2 {
            return f64::INFINITY;
        }
        (xs[0] + root).abs().max((xs[1] - root).abs())
    };
    let zero_err = locus_err(&flux, LocusKind::Zero);
    let inf_err = locus_err(&charge, LocusKind::Infinite);
    outcome(
        eig_dev <= 1e-10 && prod_dev <= 1e-10 && zero_err <= 1e-9 && inf_err <= 1e-9,
        format!(
            "eigenvalue deviation {eig_dev:.1e}, product deviation {prod_dev:.1e}, zero locus err {zero_err:.1e}, infinite locus err {inf_err:.1e}"
        ),
    )
}

fn linear_sanity() -> Outcome {
    let rc = model(RC_LINEAR);
    let short = model(RC_SHORT);
    let tr = integrate(&rc, &builtin("rc_linear").unwrap().scenario).unwrap();
    let vc = tr.last_state().unwrap()[0];
    let t_end = *tr.times.last().unwrap();
    let decay_ok = (t_end - 1.0).abs() < 1e-12 && (vc - (-1.0f64).exp()).abs() <= 1e-6;
    let scan_short = singular_scan(&short, -2.0, 2.0, 41).unwrap();
    let scan_rc = singular_scan(&rc, -2.0, 2.0, 41).unwrap();
    let sample = |m: &homcirc::homomodel::HomogeneousModel| -> usize {
        (0..41)
            .filter(|j| {
                let ur = -2.0 + 0.1 * *j as f64;
                m.regularity_check(&[1.0, ur]).regular
            })
            .count()
    };
    let (reg_short, reg_rc) = (sample(&short), sample(&rc));
    outcome(
        decay_ok && scan_short.fraction == 1.0 && scan_rc.fraction == 0.0 && reg_short == 0 && reg_rc == 41,
        format!(
            "v_c(1) = {vc:.12}, short: {} of {} cells flagged, {reg_short}/41 regular; R=1: {} flagged, {reg_rc}/41 regular",
            scan_short.flagged, scan_short.cells, scan_rc.flagged
        ),
    )
}

fn constraint_preservation() -> Outcome {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut samples = 0;
    let mut failures = Vec::new();
    for name in [
        "vdp_lapshin",
        "mlc_coupled",
        "mc_flux",
        "mc_charge",
        "rc_linear",
        "vdp_cubic",
    ] {
        let b = builtin(name).unwrap();
        let m = model(b.netlist);
        match integrate(&m, &b.scenario) {
            Ok(tr) if tr.termination == Termination::Completed => {
                let r = tr.residuals(&m);
                samples += tr.len();
                worst = (
                    worst.0.max(r.constraint),
                    worst.1.max(r.kcl),
                    worst.2.max(r.kvl),
                );
            }
            Ok(tr) => failures.push(format!("{name}: {:?}", tr.termination)),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    outcome(
        failures.is_empty() && worst.0 <= 1e-9 && worst.1 <= 1e-8 && worst.2 <= 1e-8,
        format!(
            "{samples} samples, constraint {:.1e}, KCL {:.1e}, KVL {:.1e}{}",
            worst.0,
            worst.1,
            worst.2,
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failures {failures:?}")
            }
        ),
    )
}

fn parser_differentiator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let e = random_expr(&mut rng, 4);
        let reparsed: Expr = parse_expression(&e.to_string()).unwrap();
        let d = reparsed.derivative(0);
        for _ in 0..5 {
            let u: f64 = rng.gen_range(-2.0..2.0);
            let exact = d.eval1(u);
            let fd = central_difference(&reparsed, u);
            worst = worst.max((exact - fd).abs() / exact.abs().max(1.0));
        }
    }
    let golden = include_str!("golden/expressions.txt");
    let mut stable = 0;
    let mut total = 0;
    for line in golden
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
    {
        let (input, printed) = line.split_once(" => ").unwrap();
        total += 1;
        let e = parse_expression(input).unwrap();
        if e.to_string() == printed && parse_expression(printed).unwrap() == e {
            stable += 1;
        }
    }
    outcome(
        worst <= 1e-5 && stable == total,
        format!(
            "100 ASTs, worst relative derivative error {worst:.1e}; golden {stable}/{total} stable"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    run(
        &mut results,
        "1 mlc proper trees",
        Some(Duration::from_secs(1)),
        mlc_proper_trees,
    );
    run(
        &mut results,
        "2 weighted matrix-tree",
        Some(Duration::from_secs(30)),
        weighted_matrix_tree,
    );
    run(
        &mut results,
        "3 constraint determinant",
        None,
        constraint_determinant,
    );
    run(&mut results, "4 mlc fault conductance", None, mlc_fault);
    run(
        &mut results,
        "5 vdp lapshin trajectory",
        Some(Duration::from_secs(5)),
        || vdp_lapshin("0.15"),
    );
    run(&mut results, "6 memristor pencil", None, memristor_pencil);
    run(&mut results, "7 linear sanity", None, linear_sanity);
    run(
        &mut results,
        "8 constraint preservation",
        None,
        constraint_preservation,
    );
    run(
        &mut results,
        "9 parser/differentiator",
        None,
        parser_differentiator,
    );

    // Reported but not gating: the unit capacitance reaches an impasse
    // before the inductor's turning point (see README, "Van der Pol").
    let o = vdp_lapshin("1");
    println!(
        "{} 5' vdp lapshin with C=1 (informational): {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );

    let failed: Vec<&String> = results.iter().filter(|r| !r.1).map(|r| &r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
