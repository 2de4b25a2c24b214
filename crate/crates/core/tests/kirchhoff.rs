mod common;

use std::collections::BTreeMap;

use homcirc::builtins::{MLC_COUPLED, VDP_LAPSHIN};
use homcirc::circuit::load_circuit;
use homcirc::graph::{proper_trees, spanning_trees, topology_matrices};
use homcirc::treepoly::{
    kirchhoff_polynomial, proper_k_support, weighted_det, Assignment, Flag, TreePolyError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn values(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn vdp_polynomials() {
    let c = load_circuit(VDP_LAPSHIN).unwrap();
    let all = kirchhoff_polynomial(&c.graph, None).unwrap();
    assert_eq!(all.to_string(), "p1*q2*q3 + q1*p2*q3 + q1*q2*p3");
    let proper = proper_k_support(&c.graph, Some(&c.ids)).unwrap();
    assert_eq!(proper.to_string(), "q_R");
}

#[test]
fn mlc_unit_evaluation_counts_proper_trees() {
    let c = load_circuit(MLC_COUPLED).unwrap();
    let k = proper_k_support(&c.graph, Some(&c.ids)).unwrap();
    assert_eq!(k.evaluate(&vec![(1.0, 1.0); 9]).unwrap(), 8.0);
}

#[test]
fn mlc_exaux_form() {
    let c = load_circuit(MLC_COUPLED).unwrap();
    let k = proper_k_support(&c.graph, Some(&c.ids)).unwrap();
    let fixed: Vec<(String, Assignment)> = vec![
        ("1".into(), Assignment::DivideByP),
        ("3".into(), Assignment::DivideByP),
        ("5".into(), Assignment::DivideByP),
        ("4".into(), Assignment::DivideByQ),
    ];
    let d = k.dehomogenize(&fixed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let [p2, q2, g4, r1, r3, r5]: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        let expected = p2 * g4 * r1 * r3 * r5
            + p2 * (r1 * r3 + r1 * r5)
            + q2 * g4 * (r1 * r3 + r3 * r5)
            + q2 * (r1 + r3 + r5);
        let got = d
            .evaluate(&values(&[
                ("p2", p2),
                ("q2", q2),
                ("g4", g4),
                ("r1", r1),
                ("r3", r3),
                ("r5", r5),
            ]))
            .unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
    // no assignment: the same polynomial
    let same = k.dehomogenize(&[]).unwrap();
    assert_eq!(same.to_string(), k.to_string());
}

#[test]
fn degenerate_and_bad_labels() {
    let text = "circuit cloop\nground 0\nnode 1\n\
        branch C1 kind=capacitor from=1 to=0 model=linear_c C=1\n\
        branch C2 kind=capacitor from=1 to=0 model=linear_c C=1\n\
        branch R kind=resistor from=1 to=0 model=linear_r p=1 q=1\n";
    let c = load_circuit(text).unwrap();
    assert!(matches!(
        proper_k_support(&c.graph, None),
        Err(TreePolyError::DegenerateTopology)
    ));
    let c = load_circuit(MLC_COUPLED).unwrap();
    let k = proper_k_support(&c.graph, Some(&c.ids)).unwrap();
    assert!(matches!(
        k.dehomogenize(&[("C1".into(), Assignment::DivideByP)]),
        Err(TreePolyError::NotSymbolic(_))
    ));
    assert!(matches!(
        k.dehomogenize(&[("9".into(), Assignment::DivideByP)]),
        Err(TreePolyError::UnknownLabel(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn monomials_are_distinct_trees(seed in any::<u64>()) {
        let g = common::random_graph(&mut ChaCha8Rng::seed_from_u64(seed), 7, 11);
        let k = kirchhoff_polynomial(&g, None).unwrap();
        let n = g.node_count();
        prop_assert_eq!(k.len(), spanning_trees(&g).unwrap().len());
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..k.len() {
            let flags = k.flags(i);
            prop_assert_eq!(flags.iter().filter(|f| **f == Flag::P).count(), n - 1);
            prop_assert!(seen.insert(flags.iter().map(|f| *f == Flag::P).collect::<Vec<_>>()));
        }
        if let Ok(p) = proper_k_support(&g, None) {
            prop_assert_eq!(p.len(), proper_trees(&g).unwrap().len());
        }
    }

    #[test]
    fn polynomial_is_multihomogeneous(seed in any::<u64>(), lambda in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, 6, 10);
        let k = kirchhoff_polynomial(&g, None).unwrap();
        let pq: Vec<(f64, f64)> = (0..g.branch_count())
            .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let (base, scale) = k.evaluate_with_scale(&pq).unwrap();
        let i = rng.gen_range(0..g.branch_count());
        let mut scaled = pq.clone();
        scaled[i] = (lambda * pq[i].0, lambda * pq[i].1);
        let v = k.evaluate(&scaled).unwrap();
        prop_assert!((v - lambda * base).abs() <= 1e-12 * scale.max(1.0) * (1.0 + lambda.abs()));
    }

    #[test]
    fn weighted_determinant_is_proportional(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, 8, 14);
        let t = topology_matrices(&g).unwrap();
        let k = kirchhoff_polynomial(&g, None).unwrap();
        let m = g.branch_count();
        let mut ratio: Option<f64> = None;
        for _ in 0..20 {
            let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
            let q: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
            let pq: Vec<(f64, f64)> = p.iter().copied().zip(q.iter().copied()).collect();
            let r = weighted_det(&t, &p, &q) / k.evaluate(&pq).unwrap();
            match ratio {
                None => ratio = Some(r),
                Some(r0) => prop_assert!(((r - r0) / r0).abs() <= 1e-9, "{} vs {}", r, r0),
            }
        }
        // the constant is ±1 times an integer
        let r0 = ratio.unwrap();
        prop_assert!(r0.abs() >= 1.0 - 1e-9 && (r0 - r0.round()).abs() <= 1e-9);
    }

    #[test]
    fn dehomogenization_preserves_values(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, 6, 9);
        let m = g.branch_count();
        let k = kirchhoff_polynomial(&g, None).unwrap();
        let pq: Vec<(f64, f64)> = (0..m).map(|_| (rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0))).collect();
        let mut fixed = Vec::new();
        let mut vals = BTreeMap::new();
        let mut divisor = 1.0;
        for (i, &(p, q)) in pq.iter().enumerate() {
            let label = (i + 1).to_string();
            match rng.gen_range(0..3) {
                0 => {
                    fixed.push((label.clone(), Assignment::DivideByP));
                    vals.insert(format!("r{label}"), q / p);
                    divisor *= p;
                }
                1 => {
                    fixed.push((label.clone(), Assignment::DivideByQ));
                    vals.insert(format!("g{label}"), p / q);
                    divisor *= q;
                }
                _ => {
                    vals.insert(format!("p{label}"), p);
                    vals.insert(format!("q{label}"), q);
                }
            }
        }
        let d = k.dehomogenize(&fixed).unwrap();
        let expected = k.evaluate(&pq).unwrap() / divisor;
        let got = d.evaluate(&vals).unwrap();
        prop_assert!((got - expected).abs() <= 1e-10 * (1.0 + expected.abs()) * k.len() as f64);
    }
}
