//! The homogeneous circuit model
//!
//! ```text
//! A_c ψ_c′(u_c) u_c′ + A_l ψ_l(u_l) + A_m ψ_m′(u_m) u_m′ + A_r ψ_r(u_r) = 0
//! B_c ζ_c(u_c) + B_l ζ_l′(u_l) u_l′ + B_m ζ_m′(u_m) u_m′ + B_r ζ_r(u_r) = 0
//! ```
//!
//! written as `M(x)·x′ + G(x, y) = 0` with dynamic variables
//! `x = (u_c, u_l, u_m)` and algebraic variables `y = u_r`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::circuit::Circuit;
use crate::devices::{BranchEval, DeviceTable};
use crate::graph::{
    nondegeneracy_check, topology_matrices, GraphError, NondegeneracyReport, TopologyMatrices,
};
use crate::netlist::DeviceKind;
use crate::rational::{MatrixReport, QMatrix};
use crate::treepoly::{proper_k_support, KirchhoffPolynomial};

/// Relative threshold for calling a determinant nonzero.
pub const REGULAR_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("topologically degenerate circuit:{}{}",
        if *.capacitor_loop { " capacitor-only loop" } else { "" },
        if *.inductor_cutset { " inductor-only cutset" } else { "" })]
    Degenerate {
        capacitor_loop: bool,
        inductor_cutset: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    /// Number of nodes.
    pub n: usize,
    pub m: usize,
    pub m_c: usize,
    pub m_l: usize,
    pub m_m: usize,
    pub m_r: usize,
}

impl Dims {
    /// Number of dynamic variables.
    pub fn d(&self) -> usize {
        self.m_c + self.m_l + self.m_m
    }
}

/// Splitting matrices (exact).
#[derive(Debug, Clone, PartialEq)]
pub struct Splitting {
    pub a_c_minus: QMatrix,
    pub a_c_perp: QMatrix,
    pub b_l_minus: QMatrix,
    pub b_l_perp: QMatrix,
}

impl Splitting {
    pub fn a0(&self) -> QMatrix {
        self.a_c_minus.vstack(&self.a_c_perp)
    }

    pub fn b0(&self) -> QMatrix {
        self.b_l_perp.vstack(&self.b_l_minus)
    }
}

#[derive(Debug, Clone)]
pub struct HomogeneousModel {
    pub circuit: Circuit,
    pub topology: TopologyMatrices,
    pub dims: Dims,
    pub nondegeneracy: NondegeneracyReport,
    pub splitting: Splitting,
    /// Proper-tree polynomial (RLC circuits within the enumeration cap).
    pub kirchhoff: Option<KirchhoffPolynomial>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    w_const: DMatrix<f64>,
    l_const: DMatrix<f64>,
}

/// (AᵀA)⁻¹Aᵀ for a full column rank integral matrix.
fn left_inverse(a: &QMatrix) -> QMatrix {
    let ata = a.transpose().mul(a);
    ata.inverse().expect("full column rank").mul(&a.transpose())
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    out
}

/// Product of row norms, the scale used for relative determinants.
pub fn row_norm_product(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).product()
}

/// det / Π‖row‖ (Hadamard ratio, in [−1, 1]); zero for a zero row.
pub fn relative_det(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let s = row_norm_product(m);
    if s == 0.0 {
        0.0
    } else {
        m.determinant() / s
    }
}

pub fn assemble(circuit: Circuit) -> Result<HomogeneousModel, ModelError> {
    let g = &circuit.graph;
    let topology = topology_matrices(g)?;
    let nondegeneracy = nondegeneracy_check(g, &topology);
    if !nondegeneracy.nondegenerate {
        return Err(ModelError::Degenerate {
            capacitor_loop: !nondegeneracy.no_capacitor_loop,
            inductor_cutset: !nondegeneracy.no_inductor_cutset,
        });
    }
    let dims = Dims {
        n: g.node_count(),
        m: g.branch_count(),
        m_c: g.count(DeviceKind::Capacitor),
        m_l: g.count(DeviceKind::Inductor),
        m_m: g.count(DeviceKind::Memristor),
        m_r: g.count(DeviceKind::Resistor),
    };
    let a_c = topology.a_block(DeviceKind::Capacitor);
    let b_l = topology.b_block(DeviceKind::Inductor);
    let splitting = Splitting {
        a_c_minus: left_inverse(&a_c),
        a_c_perp: a_c.left_nullspace(),
        b_l_minus: left_inverse(&b_l),
        b_l_perp: b_l.left_nullspace(),
    };
    let kirchhoff = if dims.m_m == 0 {
        proper_k_support(g, Some(&circuit.ids)).ok()
    } else {
        None
    };
    let a = topology.a.to_f64();
    let b = topology.b.to_f64();
    let w_const = block_diag(&splitting.a_c_perp.to_f64(), &splitting.b_l_perp.to_f64());
    let l_const = block_diag(&splitting.a_c_minus.to_f64(), &splitting.b_l_minus.to_f64());
    Ok(HomogeneousModel {
        circuit,
        topology,
        dims,
        nondegeneracy,
        splitting,
        kirchhoff,
        a,
        b,
        w_const,
        l_const,
    })
}

impl HomogeneousModel {
    pub fn devices(&self) -> &DeviceTable {
        &self.circuit.devices
    }

    pub fn ids(&self) -> &[String] {
        &self.circuit.ids
    }

    pub fn kind(&self, k: usize) -> DeviceKind {
        self.circuit.kind(k)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn is_rlc(&self) -> bool {
        self.dims.m_m == 0
    }

    /// Branch index ranges of x (dynamic) and y (algebraic) variables.
    pub fn x_range(&self) -> std::ops::Range<usize> {
        0..self.dims.d()
    }

    pub fn y_range(&self) -> std::ops::Range<usize> {
        self.dims.d()..self.dims.m
    }

    pub fn evaluate(&self, u: &[f64]) -> BranchEval {
        self.circuit.devices.evaluate(u)
    }

    fn kcl_rows(&self) -> usize {
        self.dims.n - 1
    }

    /// Leading matrix M(x), m × d.
    pub fn leading_matrix(&self, ev: &BranchEval) -> DMatrix<f64> {
        let dm = self.dims;
        let d = dm.d();
        let nr = self.kcl_rows();
        let mut out = DMatrix::zeros(dm.m, d);
        for k in 0..d {
            let kind = self.kind(k);
            let (mat, off, der) = match kind {
                DeviceKind::Capacitor => (&self.a, 0, &ev.dpsi),
                DeviceKind::Inductor => (&self.b, nr, &ev.dzeta),
                DeviceKind::Memristor => {
                    // Memristors enter both laws.
                    for j in 0..d {
                        let (p, q) = (ev.dpsi[(k, j)], ev.dzeta[(k, j)]);
                        if p != 0.0 {
                            for r in 0..nr {
                                out[(r, j)] += self.a[(r, k)] * p;
                            }
                        }
                        if q != 0.0 {
                            for r in 0..self.b.nrows() {
                                out[(nr + r, j)] += self.b[(r, k)] * q;
                            }
                        }
                    }
                    continue;
                }
                DeviceKind::Resistor => unreachable!(),
            };
            for j in 0..d {
                let w = der[(k, j)];
                if w != 0.0 {
                    for r in 0..mat.nrows() {
                        out[(off + r, j)] += mat[(r, k)] * w;
                    }
                }
            }
        }
        out
    }

    /// G(x, y) = [A_l ψ_l + A_r ψ_r; B_c ζ_c + B_r ζ_r].
    pub fn algebraic_part(&self, ev: &BranchEval) -> DVector<f64> {
        let nr = self.kcl_rows();
        let mut g = DVector::zeros(self.dims.m);
        for k in 0..self.dims.m {
            match self.kind(k) {
                DeviceKind::Inductor => add_col(&mut g, 0, &self.a, k, ev.psi[k]),
                DeviceKind::Capacitor => add_col(&mut g, nr, &self.b, k, ev.zeta[k]),
                DeviceKind::Resistor => {
                    add_col(&mut g, 0, &self.a, k, ev.psi[k]);
                    add_col(&mut g, nr, &self.b, k, ev.zeta[k]);
                }
                DeviceKind::Memristor => {}
            }
        }
        g
    }

    /// ∂G/∂u, m × m.
    pub fn algebraic_jacobian(&self, ev: &BranchEval) -> DMatrix<f64> {
        let nr = self.kcl_rows();
        let m = self.dims.m;
        let mut out = DMatrix::zeros(m, m);
        for k in 0..m {
            let (use_psi, use_zeta) = match self.kind(k) {
                DeviceKind::Inductor => (true, false),
                DeviceKind::Capacitor => (false, true),
                DeviceKind::Resistor => (true, true),
                DeviceKind::Memristor => (false, false),
            };
            for j in 0..m {
                if use_psi && ev.dpsi[(k, j)] != 0.0 {
                    for r in 0..nr {
                        out[(r, j)] += self.a[(r, k)] * ev.dpsi[(k, j)];
                    }
                }
                if use_zeta && ev.dzeta[(k, j)] != 0.0 {
                    for r in 0..self.b.nrows() {
                        out[(nr + r, j)] += self.b[(r, k)] * ev.dzeta[(k, j)];
                    }
                }
            }
        }
        out
    }

    /// Rows spanning the left nullspace of M(x): constant
    /// blockdiag(A_c^⊥, B_l^⊥) for RLC circuits, orthonormal and
    /// point-dependent when memristors are present.
    pub fn annihilator(&self, lead: &DMatrix<f64>) -> DMatrix<f64> {
        if self.is_rlc() {
            return self.w_const.clone();
        }
        let (m, d) = lead.shape();
        if m == d {
            return DMatrix::zeros(0, m);
        }
        let mut aug = DMatrix::zeros(m, d + m);
        aug.view_mut((0, 0), (m, d)).copy_from(lead);
        aug.view_mut((0, d), (m, m)).fill_with_identity();
        let qm = aug.qr().q();
        qm.columns(d, m - d).transpose()
    }

    /// Operator L with E₀ = L·M square: blockdiag(A_c⁻, B_l⁻) for RLC
    /// circuits, identity or Mᵀ with memristors.
    pub fn differential_operator(&self, lead: &DMatrix<f64>) -> DMatrix<f64> {
        if self.is_rlc() {
            self.l_const.clone()
        } else if self.dims.m_r == 0 {
            DMatrix::identity(self.dims.m, self.dims.m)
        } else {
            lead.transpose()
        }
    }

    /// Constraint residual W·G (length m_r for nondegenerate circuits).
    pub fn constraint_residual(&self, u: &[f64]) -> DVector<f64> {
        let ev = self.evaluate(u);
        let w = self.annihilator(&self.leading_matrix(&ev));
        w * self.algebraic_part(&ev)
    }

    /// ∂(W·G)/∂u, m_r × m. For memristive circuits the derivative of W(x)
    /// itself is not included.
    pub fn full_constraint_jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let ev = self.evaluate(u);
        let w = self.annihilator(&self.leading_matrix(&ev));
        w * self.algebraic_jacobian(&ev)
    }

    /// [A_c^⊥ A_r ψ_r′; B_l^⊥ B_r ζ_r′] at the given resistor variables.
    pub fn constraint_jacobian_ur(&self, u_r: &[f64]) -> DMatrix<f64> {
        let mut u = vec![0.0; self.dims.m];
        u[self.y_range()].copy_from_slice(u_r);
        self.constraint_jacobian_ur_at(&u)
    }

    /// Same, reading u_r from a full state.
    pub fn constraint_jacobian_ur_at(&self, u: &[f64]) -> DMatrix<f64> {
        let jac = self.full_constraint_jacobian(u);
        let y = self.y_range();
        jac.columns(y.start, y.len()).into_owned()
    }

    /// `(p_k, q_k)` of every branch at `u` (diagonal entries).
    pub fn incremental_pairs(&self, u: &[f64]) -> Vec<(f64, f64)> {
        let ev = self.evaluate(u);
        (0..self.dims.m)
            .map(|k| (ev.dpsi[(k, k)], ev.dzeta[(k, k)]))
            .collect()
    }

    /// K(u_r) from the proper-tree polynomial, with its magnitude scale.
    pub fn kirchhoff_value(&self, u: &[f64]) -> Option<(f64, f64)> {
        let k = self.kirchhoff.as_ref()?;
        k.evaluate_with_scale(&self.incremental_pairs(u)).ok()
    }

    pub fn regularity_check(&self, u: &[f64]) -> RegularityReport {
        let ev = self.evaluate(u);
        let dm = self.dims;
        let psi_c_prime: Vec<f64> = (0..dm.m_c).map(|k| ev.dpsi[(k, k)]).collect();
        let l0 = dm.m_c;
        let zl = ev.dzeta.view((l0, l0), (dm.m_l, dm.m_l)).into_owned();
        let zeta_l_prime: Vec<f64> = (0..dm.m_l).map(|k| zl[(k, k)]).collect();
        // Coupled coils are judged by the determinant of their block.
        let mut l_nonzero: Vec<bool> = (l0..l0 + dm.m_l)
            .map(|k| nonzero_component(ev.dzeta[(k, k)], ev.dpsi[(k, k)]))
            .collect();
        if self.circuit.devices.has_blocks() && dm.m_l > 0 {
            let ok = relative_det(&zl).abs() > REGULAR_THRESHOLD;
            for (k, flag) in l_nonzero.iter_mut().enumerate() {
                if self.circuit.devices.simple(l0 + k).is_none() {
                    *flag = ok;
                }
            }
        }
        let c_nonzero: Vec<bool> = (0..dm.m_c)
            .map(|k| nonzero_component(ev.dpsi[(k, k)], ev.dzeta[(k, k)]))
            .collect();
        let lead = self.leading_matrix(&ev);
        let l = self.differential_operator(&lead);
        let e0 = &l * &lead;
        let leading_scaled_det = self.leading_scaled_det(&ev, &e0);
        let w = self.annihilator(&lead);
        let jac = &w * self.algebraic_jacobian(&ev);
        let y = self.y_range();
        let jy = jac.columns(y.start, y.len()).into_owned();
        let det = if jy.nrows() == 0 {
            1.0
        } else {
            jy.determinant()
        };
        let scaled = if jy.nrows() == 0 {
            1.0
        } else if jy.nrows() == jy.ncols() {
            let norm = row_norm_product(&jac);
            if norm > 0.0 {
                det / norm
            } else {
                0.0
            }
        } else {
            0.0
        };
        let k_value = self.kirchhoff.as_ref().and_then(|k| {
            let pq: Vec<(f64, f64)> = (0..dm.m)
                .map(|k| (ev.dpsi[(k, k)], ev.dzeta[(k, k)]))
                .collect();
            k.evaluate(&pq).ok()
        });
        let regular = c_nonzero.iter().all(|&f| f)
            && l_nonzero.iter().all(|&f| f)
            && leading_scaled_det.abs() > REGULAR_THRESHOLD
            && scaled.abs() > REGULAR_THRESHOLD;
        RegularityReport {
            psi_c_prime,
            zeta_l_prime,
            c_nonzero,
            l_nonzero,
            leading_scaled_det,
            constraint_det: det,
            constraint_scaled_det: scaled,
            k_value,
            regular,
        }
    }

    /// det E₀ with every dynamic column scaled by its branch's
    /// hypot(ψ′, ζ′) (squared when E₀ = MᵀM), so that diagonal factors count
    /// by their size relative to the curve speed.
    fn leading_scaled_det(&self, ev: &BranchEval, e0: &DMatrix<f64>) -> f64 {
        let gram = !self.is_rlc() && self.dims.m_r > 0;
        let mut scale = 1.0;
        for k in self.x_range() {
            let h = ev.dpsi.row(k).norm().hypot(ev.dzeta.row(k).norm());
            scale *= if gram { h * h } else { h };
        }
        if scale == 0.0 {
            return 0.0;
        }
        e0.determinant() / scale
    }

    pub fn manifold_rank_check(&self, u: &[f64]) -> ManifoldReport {
        let ev = self.evaluate(u);
        let dm = self.dims;
        let psi_l_nonzero =
            (dm.m_c..dm.m_c + dm.m_l).all(|k| nonzero_component(ev.dpsi[(k, k)], ev.dzeta[(k, k)]));
        let zeta_c_nonzero =
            (0..dm.m_c).all(|k| nonzero_component(ev.dzeta[(k, k)], ev.dpsi[(k, k)]));
        let y = self.y_range();
        let nr = self.kcl_rows();
        let mut stacked = DMatrix::zeros(dm.m, dm.m_r);
        for (jj, j) in y.clone().enumerate() {
            for k in y.clone() {
                for r in 0..nr {
                    stacked[(r, jj)] += self.a[(r, k)] * ev.dpsi[(k, j)];
                }
                for r in 0..self.b.nrows() {
                    stacked[(nr + r, jj)] += self.b[(r, k)] * ev.dzeta[(k, j)];
                }
            }
        }
        let resistive_rank = numeric_rank(&stacked);
        ManifoldReport {
            psi_l_nonzero,
            zeta_c_nonzero,
            resistive_rank,
            m_r: dm.m_r,
            manifold_guaranteed: psi_l_nonzero && zeta_c_nonzero && resistive_rank == dm.m_r,
        }
    }

    pub fn report(&self) -> ModelReport {
        ModelReport {
            dims: self.dims,
            residual_dimension: self.splitting.a_c_perp.nrows() + self.splitting.b_l_perp.nrows(),
            nondegeneracy: self.nondegeneracy.clone(),
            a: (&self.topology.a).into(),
            b: (&self.topology.b).into(),
            a_c_minus: (&self.splitting.a_c_minus).into(),
            a_c_perp: (&self.splitting.a_c_perp).into(),
            b_l_minus: (&self.splitting.b_l_minus).into(),
            b_l_perp: (&self.splitting.b_l_perp).into(),
        }
    }
}

/// `value` is nonzero relative to the size of the derivative pair.
pub fn nonzero_component(value: f64, other: f64) -> bool {
    value.abs() > REGULAR_THRESHOLD * value.hypot(other)
}

fn add_col(g: &mut DVector<f64>, off: usize, mat: &DMatrix<f64>, k: usize, val: f64) {
    if val != 0.0 {
        for r in 0..mat.nrows() {
            g[off + r] += mat[(r, k)] * val;
        }
    }
}

/// Rank with singular-value threshold 1e−10·‖M‖.
pub fn numeric_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * top).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub psi_c_prime: Vec<f64>,
    pub zeta_l_prime: Vec<f64>,
    pub c_nonzero: Vec<bool>,
    pub l_nonzero: Vec<bool>,
    /// Relative determinant of the leading coefficient block.
    pub leading_scaled_det: f64,
    /// Raw determinant of the constraint Jacobian in u_r.
    pub constraint_det: f64,
    /// Same divided by the product of its row norms.
    pub constraint_scaled_det: f64,
    pub k_value: Option<f64>,
    pub regular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldReport {
    pub psi_l_nonzero: bool,
    pub zeta_c_nonzero: bool,
    pub resistive_rank: usize,
    pub m_r: usize,
    pub manifold_guaranteed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelReport {
    pub dims: Dims,
    pub residual_dimension: usize,
    pub nondegeneracy: NondegeneracyReport,
    pub a: MatrixReport,
    pub b: MatrixReport,
    pub a_c_minus: MatrixReport,
    pub a_c_perp: MatrixReport,
    pub b_l_minus: MatrixReport,
    pub b_l_perp: MatrixReport,
}
