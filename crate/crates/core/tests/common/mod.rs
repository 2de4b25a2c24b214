#![allow(dead_code)]

use std::fmt::Write as _;

use homcirc::builtins::builtin;
use homcirc::circuit::load_circuit;
use homcirc::expr::{self, Expr};
use homcirc::graph::{CircuitGraph, GraphBranch};
use homcirc::homomodel::{assemble, HomogeneousModel};
use homcirc::netlist::DeviceKind;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn model(netlist: &str) -> HomogeneousModel {
    assemble(load_circuit(netlist).expect("netlist loads")).expect("model assembles")
}

pub fn builtin_model(name: &str) -> HomogeneousModel {
    model(builtin(name).expect("known builtin").netlist)
}

const KINDS: [DeviceKind; 4] = [
    DeviceKind::Capacitor,
    DeviceKind::Inductor,
    DeviceKind::Memristor,
    DeviceKind::Resistor,
];

/// Connected random edge list: a random spanning tree plus extra branches.
/// Returns `(nodes, [(tail, head)])`.
pub fn random_edges<R: Rng>(
    rng: &mut R,
    max_nodes: usize,
    max_branches: usize,
) -> (usize, Vec<(usize, usize)>) {
    let n = rng.gen_range(2..=max_nodes);
    let m = rng.gen_range(n - 1..=max_branches.max(n - 1));
    let mut edges = Vec::with_capacity(m);
    for v in 1..n {
        let w = rng.gen_range(0..v);
        edges.push((v, w));
    }
    while edges.len() < m {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    edges.shuffle(rng);
    for e in &mut edges {
        if rng.gen_bool(0.5) {
            *e = (e.1, e.0);
        }
    }
    (n, edges)
}

/// Random connected digraph with random device kinds.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize, max_branches: usize) -> CircuitGraph {
    let (n, edges) = random_edges(rng, max_nodes, max_branches);
    let branches = edges
        .into_iter()
        .map(|(tail, head)| GraphBranch {
            tail,
            head,
            kind: *KINDS.choose(rng).unwrap(),
        })
        .collect();
    CircuitGraph::sorted(n, 0, branches).expect("valid graph").0
}

fn coef<R: Rng>(rng: &mut R) -> f64 {
    (rng.gen_range(-2.0f64..2.0) * 100.0).round() / 100.0
}

/// Netlist text of a random RLC circuit with nonlinear resistors; may be
/// topologically degenerate.
pub fn random_rlc_netlist<R: Rng>(rng: &mut R, max_nodes: usize, max_branches: usize) -> String {
    let (n, edges) = random_edges(rng, max_nodes, max_branches);
    let mut s = String::from("circuit random_rlc\nground 0\nnode");
    for v in 1..n {
        let _ = write!(s, " {v}");
    }
    s.push('\n');
    let mut has_r = false;
    for (k, (tail, head)) in edges.iter().enumerate() {
        let pick = if k + 1 == edges.len() && !has_r {
            2
        } else {
            rng.gen_range(0..3)
        };
        let line = match pick {
            0 => format!(
                "kind=capacitor from={tail} to={head} model=linear_c C={}",
                rng.gen_range(0.5..2.0)
            ),
            1 => format!(
                "kind=inductor from={tail} to={head} model=linear_l L={}",
                rng.gen_range(0.5..2.0)
            ),
            _ => {
                has_r = true;
                let model = match rng.gen_range(0..4) {
                    0 => format!("linear_r p={} q={}", coef(rng), coef(rng)),
                    1 => format!("vcontrolled g=\"{}*u+{}*u^3\"", coef(rng), coef(rng)),
                    2 => format!("ccontrolled r=\"{}*u+{}*u^2\"", coef(rng), coef(rng)),
                    _ => "param psi=\"sin(u)\" zeta=\"cos(u)\" domain=circle".to_string(),
                };
                format!("kind=resistor from={tail} to={head} model={model}")
            }
        };
        let _ = writeln!(s, "branch B{k} {line}");
    }
    s
}

/// A nondegenerate random RLC model with at least one resistor.
pub fn random_rlc_model<R: Rng>(
    rng: &mut R,
    max_nodes: usize,
    max_branches: usize,
) -> HomogeneousModel {
    loop {
        let text = random_rlc_netlist(rng, max_nodes, max_branches);
        let Ok(c) = load_circuit(&text) else { continue };
        if let Ok(m) = assemble(c) {
            if m.kirchhoff.is_some() && m.dims.m_r > 0 {
                return m;
            }
        }
    }
}

/// Random expression in `u` whose value stays finite and moderate on
/// [-2, 2] (denominators are bounded away from zero).
pub fn random_expr<R: Rng>(rng: &mut R, depth: u32) -> Expr {
    if depth == 0 || rng.gen_bool(0.2) {
        return if rng.gen_bool(0.6) {
            Expr::var(0)
        } else {
            Expr::constant(coef(rng))
        };
    }
    let a = random_expr(rng, depth - 1);
    match rng.gen_range(0..8) {
        0 => expr::add(a, random_expr(rng, depth - 1)),
        1 => expr::sub(a, random_expr(rng, depth - 1)),
        2 => expr::mul(a, random_expr(rng, depth - 1)),
        3 => {
            let b = random_expr(rng, depth - 1);
            expr::div(a, expr::add(Expr::constant(1.5), expr::pow(b, 2)))
        }
        4 => expr::neg(a),
        5 => expr::pow(a, rng.gen_range(0..4)),
        6 => Expr::Sin(Box::new(a)),
        _ => Expr::Cos(Box::new(a)),
    }
}

/// Numerical derivative by Ridders' extrapolation of central differences;
/// returns the estimate with the smallest internal error.
pub fn central_difference(e: &Expr, u: f64) -> f64 {
    const CON: f64 = 1.4;
    const N: usize = 12;
    let cd = |h: f64| (e.eval1(u + h) - e.eval1(u - h)) / (2.0 * h);
    let mut h = 1e-3 * (1.0 + u.abs());
    let mut table = vec![vec![0.0; N]; N];
    table[0][0] = cd(h);
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..N {
        h /= CON;
        table[0][i] = cd(h);
        let mut fac = CON * CON;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON * CON;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}
