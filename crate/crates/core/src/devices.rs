//! Branch characteristics as global parametrizations `(ψ(u), ζ(u))`.
//!
//! The meaning of the pair depends on the device kind:
//! resistor `(i, v)`, capacitor `(σ, v)`, inductor `(i, φ)`,
//! memristor `(σ, φ)`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, Expr};
use crate::netlist::{DeviceKind, Domain};

/// Sampling grid used by the regularity / periodicity checks.
pub const CHECK_SAMPLES: usize = 10_000;
/// Half-width of the sampled interval for line-domain characteristics.
pub const LINE_CHECK_RADIUS: f64 = 10.0;
pub const CHECK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("parametrization is degenerate at u = {u}: ψ′ = ζ′ = 0")]
    Degenerate { u: f64 },
    #[error("controlled source needs p2² + q2² > 0")]
    InvalidSourceCoefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Characteristic {
    pub role: DeviceKind,
    pub domain: Domain,
    psi: Expr,
    zeta: Expr,
    dpsi: Expr,
    dzeta: Expr,
    ddpsi: Expr,
    ddzeta: Expr,
}

impl Characteristic {
    pub fn new(role: DeviceKind, domain: Domain, psi: Expr, zeta: Expr) -> Self {
        let dpsi = expr::differentiate(&psi);
        let dzeta = expr::differentiate(&zeta);
        let ddpsi = expr::differentiate(&dpsi);
        let ddzeta = expr::differentiate(&dzeta);
        Characteristic {
            role,
            domain,
            psi,
            zeta,
            dpsi,
            dzeta,
            ddpsi,
            ddzeta,
        }
    }

    pub fn with_role(mut self, role: DeviceKind) -> Self {
        self.role = role;
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn psi(&self) -> &Expr {
        &self.psi
    }

    pub fn zeta(&self) -> &Expr {
        &self.zeta
    }

    pub fn psi_prime(&self) -> &Expr {
        &self.dpsi
    }

    pub fn zeta_prime(&self) -> &Expr {
        &self.dzeta
    }

    /// `(ψ(u), ζ(u))`. Circle characteristics are 2π-periodic, so the
    /// lifted angle can be passed as is.
    pub fn evaluate(&self, u: f64) -> (f64, f64) {
        (self.psi.eval1(u), self.zeta.eval1(u))
    }

    /// Incremental parameters `(p, q) = (ψ′(u), ζ′(u))`.
    pub fn incremental_pq(&self, u: f64) -> (f64, f64) {
        (self.dpsi.eval1(u), self.dzeta.eval1(u))
    }

    pub fn second_derivatives(&self, u: f64) -> (f64, f64) {
        (self.ddpsi.eval1(u), self.ddzeta.eval1(u))
    }

    /// Whether `p` (resp. `q`) is a constant function, so it can never
    /// change sign along a trajectory.
    pub fn constant_pq(&self) -> (bool, bool) {
        (self.dpsi.is_const(), self.dzeta.is_const())
    }

    pub fn curvature(&self, u: f64) -> Result<f64, DeviceError> {
        let (p, q) = self.incremental_pq(u);
        let (pp, qq) = self.second_derivatives(u);
        let n2 = p * p + q * q;
        if n2 == 0.0 {
            return Err(DeviceError::Degenerate { u });
        }
        Ok((p * qq - pp * q).abs() / n2.powf(1.5))
    }

    /// Sample points for the dense checks.
    pub fn check_grid(&self, samples: usize) -> Vec<f64> {
        match self.domain {
            Domain::Circle => (0..samples)
                .map(|k| TAU * k as f64 / samples as f64)
                .collect(),
            Domain::Line => (0..samples)
                .map(|k| {
                    -LINE_CHECK_RADIUS
                        + 2.0 * LINE_CHECK_RADIUS * k as f64 / (samples.max(2) - 1) as f64
                })
                .collect(),
        }
    }

    /// Dense check of ψ′² + ζ′² > 0.
    pub fn regularity_check(&self, samples: usize) -> GridCheck {
        let mut worst = f64::INFINITY;
        let mut worst_u = 0.0;
        for u in self.check_grid(samples) {
            let (p, q) = self.incremental_pq(u);
            let n = p.hypot(q);
            if n < worst {
                worst = n;
                worst_u = u;
            }
        }
        GridCheck {
            samples,
            passed: worst > CHECK_TOL,
            worst_value: worst,
            worst_u,
        }
    }

    /// Dense check of 2π-periodicity; trivially passes on the line.
    pub fn periodicity_check(&self, samples: usize) -> GridCheck {
        if self.domain == Domain::Line {
            return GridCheck {
                samples: 0,
                passed: true,
                worst_value: 0.0,
                worst_u: 0.0,
            };
        }
        let mut worst = 0.0f64;
        let mut worst_u = 0.0;
        for u in self.check_grid(samples) {
            let (a, b) = self.evaluate(u);
            let (c, d) = self.evaluate(u + TAU);
            let dev = (a - c).abs().max((b - d).abs());
            if dev > worst {
                worst = dev;
                worst_u = u;
            }
        }
        GridCheck {
            samples,
            passed: worst <= CHECK_TOL,
            worst_value: worst,
            worst_u,
        }
    }

    /// Sampled test of local nonlinearity: the curvature must not vanish
    /// on more than two consecutive grid points.
    pub fn local_nonlinearity_check(&self, grid: usize) -> LocalNonlinearity {
        let grid = grid.max(100);
        let mut run = 0usize;
        let mut max_run = 0usize;
        for u in self.check_grid(grid) {
            let flat = self.curvature(u).map(|k| k < 1e-12).unwrap_or(true);
            if flat {
                run += 1;
                max_run = max_run.max(run);
            } else {
                run = 0;
            }
        }
        LocalNonlinearity {
            grid,
            max_flat_run: max_run,
            locally_nonlinear: max_run <= 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCheck {
    pub samples: usize,
    pub passed: bool,
    pub worst_value: f64,
    pub worst_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalNonlinearity {
    pub grid: usize,
    pub max_flat_run: usize,
    pub locally_nonlinear: bool,
}

fn u() -> Expr {
    Expr::Var(0)
}

fn c(x: f64) -> Expr {
    Expr::Const(x)
}

/// Catalog of one-port characteristics.
pub mod catalog {
    use super::*;

    /// Linear device `ψ = p·u`, `ζ = q·u`.
    pub fn linear(role: DeviceKind, p: f64, q: f64) -> Characteristic {
        Characteristic::new(
            role,
            Domain::Line,
            expr::mul(c(p), u()),
            expr::mul(c(q), u()),
        )
    }

    pub fn linear_r(p: f64, q: f64) -> Characteristic {
        linear(DeviceKind::Resistor, p, q)
    }

    /// `σ = C·v`, parametrized by the voltage.
    pub fn linear_c(cap: f64) -> Characteristic {
        linear(DeviceKind::Capacitor, cap, 1.0)
    }

    /// `φ = L·i`, parametrized by the current.
    pub fn linear_l(ind: f64) -> Characteristic {
        linear(DeviceKind::Inductor, 1.0, ind)
    }

    /// Voltage-controlled resistor `i = g(v)`; `u` is the voltage.
    pub fn vcontrolled(g: Expr) -> Characteristic {
        Characteristic::new(DeviceKind::Resistor, Domain::Line, g, u())
    }

    /// Current-controlled resistor `v = r(i)`; `u` is the current.
    pub fn ccontrolled(r: Expr) -> Characteristic {
        Characteristic::new(DeviceKind::Resistor, Domain::Line, u(), r)
    }

    pub fn param(role: DeviceKind, psi: Expr, zeta: Expr, domain: Domain) -> Characteristic {
        Characteristic::new(role, domain, psi, zeta)
    }

    /// Hysteresis loop `ψ = α cosᵐu + β sinⁿ(u+δ)`, `ζ = γ sin u` on the circle.
    pub fn lapshin(
        m: u32,
        n: u32,
        alpha: f64,
        beta: f64,
        gamma: f64,
        delta: f64,
    ) -> Characteristic {
        let psi = expr::add(
            expr::mul(c(alpha), expr::pow(Expr::Cos(Box::new(u())), m)),
            expr::mul(
                c(beta),
                expr::pow(Expr::Sin(Box::new(expr::add(u(), c(delta)))), n),
            ),
        );
        let zeta = expr::mul(c(gamma), Expr::Sin(Box::new(u())));
        Characteristic::new(DeviceKind::Inductor, Domain::Circle, psi, zeta)
    }

    /// χ(u) = −u + u³.
    pub fn chi() -> Expr {
        expr::add(expr::neg(u()), expr::pow(u(), 3))
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
    #[serde(rename_all = "lowercase")]
    pub enum Control {
        Flux,
        Charge,
    }

    /// Cubic memristor: `σ = χ(φ)` (flux control) or `φ = χ(σ)` (charge control).
    pub fn cubic_memristor(control: Control) -> Characteristic {
        let (psi, zeta) = match control {
            Control::Flux => (chi(), u()),
            Control::Charge => (u(), chi()),
        };
        Characteristic::new(DeviceKind::Memristor, Domain::Line, psi, zeta)
    }
}

/// Multi-branch devices whose characteristics couple several homogeneous
/// variables.
#[derive(Debug, Clone, PartialEq)]
pub enum CoupledBlock {
    /// `i_k = u_k`, `φ = L·u` with `L = [[L1, M], [M, L2]]`.
    Inductors {
        members: [usize; 2],
        l: [[f64; 2]; 2],
    },
    /// Source `p₂v₂ − q₂i₂ + f₂(i₁, v₁) = 0` driven by a resistor.
    ControlledSource {
        controller: usize,
        controlled: usize,
        controller_char: Characteristic,
        p2: f64,
        q2: f64,
        f2: Expr,
        f2_di: Expr,
        f2_dv: Expr,
    },
}

pub fn coupled_inductor_parametrization(
    members: [usize; 2],
    l1: f64,
    l2: f64,
    m: f64,
) -> CoupledBlock {
    CoupledBlock::Inductors {
        members,
        l: [[l1, m], [m, l2]],
    }
}

pub fn controlled_source_parametrization(
    controller: usize,
    controlled: usize,
    p2: f64,
    q2: f64,
    f2: Expr,
    controller_char: Characteristic,
) -> Result<CoupledBlock, DeviceError> {
    if p2 * p2 + q2 * q2 == 0.0 {
        return Err(DeviceError::InvalidSourceCoefficients);
    }
    let f2_di = f2.derivative(0);
    let f2_dv = f2.derivative(1);
    Ok(CoupledBlock::ControlledSource {
        controller,
        controlled,
        controller_char,
        p2,
        q2,
        f2,
        f2_di,
        f2_dv,
    })
}

/// Values of a coupled block: for each member branch `(ψ, ζ)` and the
/// partial derivatives with respect to each member's `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEval {
    pub members: Vec<usize>,
    pub psi: Vec<f64>,
    pub zeta: Vec<f64>,
    /// dpsi[a][b] = ∂ψ_{members[a]} / ∂u_{members[b]}
    pub dpsi: Vec<Vec<f64>>,
    pub dzeta: Vec<Vec<f64>>,
}

impl CoupledBlock {
    /// Branches whose characteristics this block defines.
    pub fn defined(&self) -> Vec<usize> {
        match self {
            CoupledBlock::Inductors { members, .. } => members.to_vec(),
            CoupledBlock::ControlledSource { controlled, .. } => vec![*controlled],
        }
    }

    /// Branch variables the block reads, in order.
    pub fn members(&self) -> Vec<usize> {
        match self {
            CoupledBlock::Inductors { members, .. } => members.to_vec(),
            CoupledBlock::ControlledSource {
                controller,
                controlled,
                ..
            } => vec![*controller, *controlled],
        }
    }

    /// Evaluate at the member variables `us` (ordered as [`members`]).
    pub fn evaluate(&self, us: &[f64]) -> BlockEval {
        match self {
            CoupledBlock::Inductors { members, l } => BlockEval {
                members: members.to_vec(),
                psi: vec![us[0], us[1]],
                zeta: vec![
                    l[0][0] * us[0] + l[0][1] * us[1],
                    l[1][0] * us[0] + l[1][1] * us[1],
                ],
                dpsi: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                dzeta: vec![l[0].to_vec(), l[1].to_vec()],
            },
            CoupledBlock::ControlledSource {
                controller,
                controlled,
                controller_char,
                p2,
                q2,
                f2,
                f2_di,
                f2_dv,
            } => {
                let (u1, u2) = (us[0], us[1]);
                let (i1, v1) = controller_char.evaluate(u1);
                let (p1, q1) = controller_char.incremental_pq(u1);
                let s = p2 * p2 + q2 * q2;
                let slots = [i1, v1];
                let f = f2.eval(&slots);
                let df = f2_di.eval(&slots) * p1 + f2_dv.eval(&slots) * q1;
                BlockEval {
                    members: vec![*controller, *controlled],
                    psi: vec![p2 * u2 + q2 / s * f],
                    zeta: vec![q2 * u2 - p2 / s * f],
                    dpsi: vec![vec![q2 / s * df, *p2]],
                    dzeta: vec![vec![-p2 / s * df, *q2]],
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Simple(Characteristic),
    /// Defined by `blocks[index]`.
    Block(usize),
}

/// Per-branch device models in graph branch order.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTable {
    pub slots: Vec<Slot>,
    pub blocks: Vec<CoupledBlock>,
}

/// All branch characteristics and their Jacobians at a point.
#[derive(Debug, Clone)]
pub struct BranchEval {
    pub psi: DVector<f64>,
    pub zeta: DVector<f64>,
    /// ∂ψ_k/∂u_j
    pub dpsi: DMatrix<f64>,
    pub dzeta: DMatrix<f64>,
}

impl DeviceTable {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn simple(&self, k: usize) -> Option<&Characteristic> {
        match &self.slots[k] {
            Slot::Simple(c) => Some(c),
            Slot::Block(_) => None,
        }
    }

    pub fn has_blocks(&self) -> bool {
        !self.blocks.is_empty()
    }

    pub fn domain(&self, k: usize) -> Domain {
        self.simple(k).map(|c| c.domain).unwrap_or(Domain::Line)
    }

    pub fn evaluate(&self, u: &[f64]) -> BranchEval {
        let m = self.slots.len();
        let mut psi = DVector::zeros(m);
        let mut zeta = DVector::zeros(m);
        let mut dpsi = DMatrix::zeros(m, m);
        let mut dzeta = DMatrix::zeros(m, m);
        for (k, slot) in self.slots.iter().enumerate() {
            if let Slot::Simple(c) = slot {
                let (a, b) = c.evaluate(u[k]);
                let (p, q) = c.incremental_pq(u[k]);
                psi[k] = a;
                zeta[k] = b;
                dpsi[(k, k)] = p;
                dzeta[(k, k)] = q;
            }
        }
        for block in &self.blocks {
            let members = block.members();
            let us: Vec<f64> = members.iter().map(|&j| u[j]).collect();
            let ev = block.evaluate(&us);
            for (a, &k) in block.defined().iter().enumerate() {
                psi[k] = ev.psi[a];
                zeta[k] = ev.zeta[a];
                for (b, &j) in members.iter().enumerate() {
                    dpsi[(k, j)] = ev.dpsi[a][b];
                    dzeta[(k, j)] = ev.dzeta[a][b];
                }
            }
        }
        BranchEval {
            psi,
            zeta,
            dpsi,
            dzeta,
        }
    }

    /// For branch k: whether the diagonal ψ′ / ζ′ are constant functions.
    pub fn constant_diagonals(&self, k: usize) -> (bool, bool) {
        match &self.slots[k] {
            Slot::Simple(c) => c.constant_pq(),
            Slot::Block(b) => match &self.blocks[*b] {
                CoupledBlock::Inductors { .. } => (true, true),
                CoupledBlock::ControlledSource { .. } => (true, true),
            },
        }
    }
}
