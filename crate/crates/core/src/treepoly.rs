//! Multihomogeneous Kirchhoff (tree-enumerator) polynomials.
//!
//! Each spanning tree `T` contributes the monomial
//! `Π_{i∈T} p_i · Π_{j∉T} q_j`. Restricted to proper trees, with reactive
//! flags fixed to one, the polynomial characterizes the regular set of an
//! RLC circuit through the resistive incremental parameters.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{proper_trees, spanning_trees, CircuitGraph, GraphError, TopologyMatrices};
use crate::netlist::DeviceKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreePolyError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no proper tree: the topology has a capacitor loop or an inductor cutset")]
    DegenerateTopology,
    #[error("tree analysis is only defined for RLC circuits (found {0} memristor branches)")]
    Unsupported(usize),
    #[error("expected {expected} (p, q) values, got {got}")]
    MissingValue { expected: usize, got: usize },
    #[error("unknown branch label `{0}`")]
    UnknownLabel(String),
    #[error("cannot divide by a flag of branch `{0}`: it is not symbolic in this polynomial")]
    NotSymbolic(String),
    #[error("polynomial is not affine in `{0}` alone")]
    NotAffine(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    AllTrees,
    ProperTrees,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Flag {
    P,
    Q,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KirchhoffPolynomial {
    m: usize,
    labels: Vec<String>,
    /// Branches whose flags appear in printed/evaluated monomials.
    symbolic: Vec<bool>,
    support: Support,
    /// Tree membership bitmask per monomial, in lexicographic tree order.
    monomials: Vec<u64>,
}

/// Variable name for branch `label` with prefix `p`, `q`, `r` or `g`.
pub fn var_name(prefix: char, label: &str) -> String {
    if !label.is_empty() && label.chars().all(|c| c.is_ascii_digit()) {
        format!("{prefix}{label}")
    } else {
        format!("{prefix}_{label}")
    }
}

fn mask(tree: &[usize]) -> u64 {
    tree.iter().fold(0u64, |acc, &i| acc | (1u64 << i))
}

fn default_labels(m: usize) -> Vec<String> {
    (1..=m).map(|i| i.to_string()).collect()
}

/// One monomial per spanning tree; labels default to 1-based indices.
pub fn kirchhoff_polynomial(
    g: &CircuitGraph,
    labels: Option<&[String]>,
) -> Result<KirchhoffPolynomial, TreePolyError> {
    let trees = spanning_trees(g)?;
    let m = g.branch_count();
    Ok(KirchhoffPolynomial {
        m,
        labels: labels
            .map(<[String]>::to_vec)
            .unwrap_or_else(|| default_labels(m)),
        symbolic: vec![true; m],
        support: Support::AllTrees,
        monomials: trees.iter().map(|t| mask(t)).collect(),
    })
}

/// Proper-tree support with reactive flags fixed (`p_c = 1`, `q_l = 1`);
/// only resistive `p`/`q` stay symbolic.
pub fn proper_k_support(
    g: &CircuitGraph,
    labels: Option<&[String]>,
) -> Result<KirchhoffPolynomial, TreePolyError> {
    let mm = g.count(DeviceKind::Memristor);
    if mm > 0 {
        return Err(TreePolyError::Unsupported(mm));
    }
    let trees = proper_trees(g)?;
    if trees.is_empty() {
        return Err(TreePolyError::DegenerateTopology);
    }
    let m = g.branch_count();
    Ok(KirchhoffPolynomial {
        m,
        labels: labels
            .map(<[String]>::to_vec)
            .unwrap_or_else(|| default_labels(m)),
        symbolic: g.kinds().map(|k| k == DeviceKind::Resistor).collect(),
        support: Support::ProperTrees,
        monomials: trees.iter().map(|t| mask(t)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonomialReport {
    pub p: Vec<String>,
    pub q: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolynomialReport {
    pub support: Support,
    pub terms: usize,
    pub text: String,
    pub monomials: Vec<MonomialReport>,
}

impl KirchhoffPolynomial {
    pub fn branch_count(&self) -> usize {
        self.m
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_symbolic(&self, i: usize) -> bool {
        self.symbolic[i]
    }

    /// Tree branch indices of monomial `k`.
    pub fn tree(&self, k: usize) -> Vec<usize> {
        (0..self.m)
            .filter(|&i| self.monomials[k] >> i & 1 == 1)
            .collect()
    }

    pub fn flags(&self, k: usize) -> Vec<Flag> {
        (0..self.m)
            .map(|i| {
                if self.monomials[k] >> i & 1 == 1 {
                    Flag::P
                } else {
                    Flag::Q
                }
            })
            .collect()
    }

    /// Symbolic (P-labels, Q-labels) of monomial `k`.
    pub fn monomial_labels(&self, k: usize) -> (Vec<String>, Vec<String>) {
        let mut p = Vec::new();
        let mut q = Vec::new();
        for (i, f) in self.flags(k).into_iter().enumerate() {
            if !self.symbolic[i] {
                continue;
            }
            match f {
                Flag::P => p.push(self.labels[i].clone()),
                Flag::Q => q.push(self.labels[i].clone()),
            }
        }
        (p, q)
    }

    /// Σ_T Π p Π q with `pq[i] = (p_i, q_i)`; fixed flags count as one.
    pub fn evaluate(&self, pq: &[(f64, f64)]) -> Result<f64, TreePolyError> {
        self.evaluate_with_scale(pq).map(|(v, _)| v)
    }

    /// Value together with Σ |monomial|, the natural scale for relative
    /// comparisons when terms cancel.
    pub fn evaluate_with_scale(&self, pq: &[(f64, f64)]) -> Result<(f64, f64), TreePolyError> {
        if pq.len() != self.m {
            return Err(TreePolyError::MissingValue {
                expected: self.m,
                got: pq.len(),
            });
        }
        let mut sum = 0.0;
        let mut scale = 0.0;
        for &mono in &self.monomials {
            let mut t = 1.0;
            for (i, &(p, q)) in pq.iter().enumerate() {
                if self.symbolic[i] {
                    t *= if mono >> i & 1 == 1 { p } else { q };
                }
            }
            sum += t;
            scale += t.abs();
        }
        Ok((sum, scale))
    }

    pub fn report(&self) -> PolynomialReport {
        PolynomialReport {
            support: self.support,
            terms: self.len(),
            text: self.to_string(),
            monomials: (0..self.len())
                .map(|k| {
                    let (p, q) = self.monomial_labels(k);
                    MonomialReport { p, q }
                })
                .collect(),
        }
    }

    /// Apply per-branch assignments (by label) and collect like terms.
    pub fn dehomogenize(
        &self,
        fixed: &[(String, Assignment)],
    ) -> Result<DehomPolynomial, TreePolyError> {
        let mut assign: Vec<Option<Assignment>> = vec![None; self.m];
        for (label, a) in fixed {
            let i = self
                .labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| TreePolyError::UnknownLabel(label.clone()))?;
            if !self.symbolic[i] {
                return Err(TreePolyError::NotSymbolic(label.clone()));
            }
            assign[i] = Some(*a);
        }
        let mut terms: BTreeMap<Vec<Atom>, f64> = BTreeMap::new();
        for &mono in &self.monomials {
            let mut coef = 1.0;
            let mut atoms = Vec::new();
            for i in 0..self.m {
                if !self.symbolic[i] {
                    continue;
                }
                let in_tree = mono >> i & 1 == 1;
                let lab = self.labels[i].clone();
                match (assign[i], in_tree) {
                    (None, true) => atoms.push(Atom::new(i, AtomKind::P, lab)),
                    (None, false) => atoms.push(Atom::new(i, AtomKind::Q, lab)),
                    (Some(Assignment::DivideByP), true) => {}
                    (Some(Assignment::DivideByP), false) => {
                        atoms.push(Atom::new(i, AtomKind::R, lab))
                    }
                    (Some(Assignment::DivideByQ), true) => {
                        atoms.push(Atom::new(i, AtomKind::G, lab))
                    }
                    (Some(Assignment::DivideByQ), false) => {}
                    (Some(Assignment::Value { p, .. }), true) => coef *= p,
                    (Some(Assignment::Value { q, .. }), false) => coef *= q,
                }
            }
            atoms.sort();
            *terms.entry(atoms).or_insert(0.0) += coef;
        }
        terms.retain(|_, c| *c != 0.0);
        Ok(DehomPolynomial { terms })
    }
}

impl fmt::Display for KirchhoffPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.monomials.is_empty() {
            return f.write_str("0");
        }
        let mut first = true;
        for k in 0..self.len() {
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            let mut factors = Vec::new();
            for (i, fl) in self.flags(k).into_iter().enumerate() {
                if self.symbolic[i] {
                    let pre = if fl == Flag::P { 'p' } else { 'q' };
                    factors.push(var_name(pre, &self.labels[i]));
                }
            }
            if factors.is_empty() {
                f.write_str("1")?;
            } else {
                f.write_str(&factors.join("*"))?;
            }
        }
        Ok(())
    }
}

/// How one branch is eliminated during dehomogenization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Assignment {
    /// Divide by `p_i`: `p_i → 1`, `q_i → r_i = q_i/p_i`.
    DivideByP,
    /// Divide by `q_i`: `q_i → 1`, `p_i → g_i = p_i/q_i`.
    DivideByQ,
    /// Numeric incremental parameters.
    Value { p: f64, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum AtomKind {
    P,
    Q,
    R,
    G,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Atom {
    pub branch: usize,
    pub kind: AtomKind,
    pub label: String,
}

impl Atom {
    fn new(branch: usize, kind: AtomKind, label: String) -> Self {
        Atom {
            branch,
            kind,
            label,
        }
    }

    pub fn is_ratio(&self) -> bool {
        matches!(self.kind, AtomKind::R | AtomKind::G)
    }

    pub fn name(&self) -> String {
        let pre = match self.kind {
            AtomKind::P => 'p',
            AtomKind::Q => 'q',
            AtomKind::R => 'r',
            AtomKind::G => 'g',
        };
        var_name(pre, &self.label)
    }
}

/// Polynomial in the remaining homogeneous flags and the ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct DehomPolynomial {
    pub terms: BTreeMap<Vec<Atom>, f64>,
}

fn product(atoms: &[Atom], coef: f64) -> String {
    let mut parts: Vec<String> = Vec::new();
    if coef != 1.0 || atoms.is_empty() {
        parts.push(format!("{coef}"));
    }
    parts.extend(atoms.iter().map(Atom::name));
    parts.join("*")
}

impl DehomPolynomial {
    /// Terms grouped by their homogeneous (p/q) part; the value maps each
    /// ratio monomial to its coefficient.
    pub fn grouped(&self) -> BTreeMap<Vec<Atom>, BTreeMap<Vec<Atom>, f64>> {
        let mut out: BTreeMap<Vec<Atom>, BTreeMap<Vec<Atom>, f64>> = BTreeMap::new();
        for (atoms, &c) in &self.terms {
            let (ratio, homog): (Vec<Atom>, Vec<Atom>) =
                atoms.iter().cloned().partition(Atom::is_ratio);
            *out.entry(homog).or_default().entry(ratio).or_insert(0.0) += c;
        }
        out
    }

    pub fn evaluate(&self, values: &BTreeMap<String, f64>) -> Option<f64> {
        let mut s = 0.0;
        for (atoms, c) in &self.terms {
            let mut t = *c;
            for a in atoms {
                t *= values.get(&a.name())?;
            }
            s += t;
        }
        Some(s)
    }

    /// Root of a polynomial of the form `c₁·x + c₀` in the single atom `x`.
    pub fn linear_root(&self, name: &str) -> Result<f64, TreePolyError> {
        let mut c0 = 0.0;
        let mut c1 = 0.0;
        for (atoms, &c) in &self.terms {
            match atoms.as_slice() {
                [] => c0 += c,
                [a] if a.name() == name => c1 += c,
                _ => return Err(TreePolyError::NotAffine(name.to_string())),
            }
        }
        if c1 == 0.0 {
            return Err(TreePolyError::NotAffine(name.to_string()));
        }
        Ok(-c0 / c1)
    }
}

impl fmt::Display for DehomPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups = self.grouped();
        if groups.is_empty() {
            return f.write_str("0");
        }
        let mut parts = Vec::new();
        for (homog, inner) in &groups {
            let inner_terms: Vec<String> = inner.iter().map(|(r, c)| product(r, *c)).collect();
            let head: Vec<String> = homog.iter().map(Atom::name).collect();
            let s = if head.is_empty() {
                inner_terms.join(" + ")
            } else if inner.len() == 1 && inner.keys().next().is_some_and(|r| r.is_empty()) {
                let c = *inner.values().next().unwrap();
                product(homog, c)
            } else {
                format!("{}*({})", head.join("*"), inner_terms.join(" + "))
            };
            parts.push(s);
        }
        f.write_str(&parts.join(" + "))
    }
}

/// det[A·P; B·Q] with `P = diag(p)`, `Q = diag(q)`.
pub fn weighted_det(t: &TopologyMatrices, p: &[f64], q: &[f64]) -> f64 {
    let a = t.a.to_f64();
    let b = t.b.to_f64();
    let m = a.ncols();
    let mut s = DMatrix::zeros(m, m);
    for j in 0..m {
        for r in 0..a.nrows() {
            s[(r, j)] = a[(r, j)] * p[j];
        }
        for r in 0..b.nrows() {
            s[(a.nrows() + r, j)] = b[(r, j)] * q[j];
        }
    }
    s.determinant()
}
