//! Consistent initialization, state-space / quasilinear integration and
//! event detection.
//!
//! The dynamic variables are integrated explicitly with an embedded
//! Dormand–Prince 4(5) pair; the remaining variables are recovered at every
//! stage by Newton's method on the constraints (`u_r = η_r(u_c, u_l)` in the
//! standard chart). Near points where the leading matrix `E` of the reduced
//! system `E(z) z′ = F(z)` degenerates, time is reparametrized
//! (`dz/dτ = σ·adj(E)F/ρ₀`, `dt/dτ = σ·det E/ρ₀`) so the integration
//! reaches the singular set with bounded speed.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homomodel::HomogeneousModel;
use crate::netlist::DeviceKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("unknown branch `{0}` in initial state")]
    UnknownBranch(String),
    #[error("Newton iteration diverged after {iterations} iterations (residual {residual:e}); the constraint set may be empty")]
    NewtonDivergence { iterations: usize, residual: f64 },
    #[error("singular constraint Jacobian at Newton iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("leading coefficient matrix is singular; a quasilinear chart is needed")]
    SingularLeading,
    #[error("Newton solution jumped by {jump:e} from its warm start (root branch change)")]
    BranchJump { jump: f64 },
    #[error("chart coordinates do not determine the remaining variables")]
    UnsolvableChart,
    #[error("{0}")]
    Unsupported(String),
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub t_end: f64,
    pub initial_step: f64,
    /// Upper bound on a step (in t, or in τ while desingularized).
    #[serde(default = "pos_inf")]
    pub max_step: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub atol: f64,
    pub rtol: f64,
    /// Event location tolerance in t.
    pub event_tol: f64,
    /// Scaled determinant below which a non-regular point counts as singular.
    pub impasse_threshold: f64,
    /// Relative conditioning of the solved block that triggers a chart change.
    pub chart_switch_threshold: f64,
    /// Speed ‖z′‖∞ above which time is reparametrized.
    pub desingularize_speed: f64,
    /// Largest |ℓᵀF| at a singular point still treated as a singular
    /// equilibrium to be crossed; 0 stops at every impasse.
    pub singular_capture_tol: f64,
    pub max_steps: usize,
    /// Largest move of a re-solved variable from its warm start, relative
    /// to 1 + its size; larger moves are treated as a jump to another root.
    pub max_newton_jump: f64,
    /// Initial homogeneous variables by branch id (others start at 0;
    /// algebraic variables are only a Newton guess).
    pub initial: BTreeMap<String, f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            t_end: 1.0,
            initial_step: 1e-3,
            max_step: f64::INFINITY,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            atol: 1e-8,
            rtol: 1e-8,
            event_tol: 1e-10,
            impasse_threshold: 1e-8,
            chart_switch_threshold: 1e-3,
            desingularize_speed: 100.0,
            singular_capture_tol: 0.0,
            max_steps: 200_000,
            max_newton_jump: 0.25,
            initial: BTreeMap::new(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |what: &str| {
            Err(SolverError::InvalidConfig(format!(
                "{what} must be positive"
            )))
        };
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(SolverError::InvalidConfig(
                "t_end must be finite and non-negative".into(),
            ));
        }
        for (name, v) in [
            ("initial_step", self.initial_step),
            ("max_step", self.max_step),
            ("newton_tol", self.newton_tol),
            ("atol", self.atol),
            ("rtol", self.rtol),
            ("event_tol", self.event_tol),
            ("impasse_threshold", self.impasse_threshold),
            ("chart_switch_threshold", self.chart_switch_threshold),
            ("desingularize_speed", self.desingularize_speed),
            ("max_newton_jump", self.max_newton_jump),
        ] {
            if !(v > 0.0) {
                return bad(name);
            }
        }
        if self.newton_max_iter == 0 {
            return bad("newton_max_iter");
        }
        if self.max_steps == 0 {
            return bad("max_steps");
        }
        if !(self.singular_capture_tol >= 0.0) {
            return Err(SolverError::InvalidConfig(
                "singular_capture_tol must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Full initial guess vector in graph branch order.
    pub fn initial_guess(&self, model: &HomogeneousModel) -> Result<Vec<f64>, SolverError> {
        let mut u = vec![0.0; model.dims.m];
        for (id, &v) in &self.initial {
            let k = model
                .circuit
                .index_of(id)
                .ok_or_else(|| SolverError::UnknownBranch(id.clone()))?;
            u[k] = v;
        }
        Ok(u)
    }
}

/// A coordinate chart of the constraint set: `coords` are integrated,
/// `solved` are recovered from the constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Chart {
    pub coords: Vec<usize>,
    pub solved: Vec<usize>,
}

impl Chart {
    pub fn standard(model: &HomogeneousModel) -> Self {
        Chart {
            coords: model.x_range().collect(),
            solved: model.y_range().collect(),
        }
    }

    pub fn from_coords(model: &HomogeneousModel, coords: &[usize]) -> Result<Self, SolverError> {
        let d = model.dims.d();
        let mut c = coords.to_vec();
        c.sort_unstable();
        c.dedup();
        if c.len() != d || c.iter().any(|&k| k >= model.dims.m) {
            return Err(SolverError::UnsolvableChart);
        }
        let solved = (0..model.dims.m).filter(|k| !c.contains(k)).collect();
        Ok(Chart { coords: c, solved })
    }
}

/// Quasilinear reduction `E z′ = F` at a point, with the tangent map
/// `x′ = T_x z′`.
#[derive(Debug, Clone)]
pub struct ChartModel {
    pub chart: Chart,
    pub e: DMatrix<f64>,
    pub f: DVector<f64>,
    pub tx: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Regular,
    ImpasseCandidate,
    SingularEquilibriumCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    /// Diagonal incremental parameter ψ′ (`false`) or ζ′ (`true`) of a branch
    /// of the given kind changes sign.
    DerivativeZero {
        kind: DeviceKind,
        zeta: bool,
    },
    SingularCrossing,
    Impasse,
    EquilibriumHit,
    NewtonFailure,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::DerivativeZero { kind, zeta } => {
                write!(
                    f,
                    "{}_{}'=0",
                    if *zeta { "zeta" } else { "psi" },
                    kind.tag()
                )
            }
            EventKind::SingularCrossing => f.write_str("singular_crossing"),
            EventKind::Impasse => f.write_str("impasse"),
            EventKind::EquilibriumHit => f.write_str("equilibrium_hit"),
            EventKind::NewtonFailure => f.write_str("newton_failure"),
        }
    }
}

impl Serialize for EventKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub branch: Option<String>,
    /// Full homogeneous state (branch order).
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Impasse,
    NewtonFailure,
    MaxSteps,
}

/// Classical variables at one sample. `sigma` / `phi` are NaN where the
/// branch kind does not define them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outputs {
    pub i: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub ids: Vec<String>,
    pub kinds: Vec<DeviceKind>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Outputs>,
    pub events: Vec<Event>,
    pub termination: Termination,
    pub diagnostic: Option<String>,
}

impl Trajectory {
    fn empty(model: &HomogeneousModel) -> Self {
        Trajectory {
            ids: model.ids().to_vec(),
            kinds: (0..model.dims.m).map(|k| model.kind(k)).collect(),
            times: Vec::new(),
            states: Vec::new(),
            outputs: Vec::new(),
            events: Vec::new(),
            termination: Termination::Completed,
            diagnostic: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Largest constraint residual ‖W·G‖∞ and Kirchhoff residuals of the
    /// reported outputs, ‖A i‖∞ / max(1, ‖i‖∞) and ‖B v‖∞ / max(1, ‖v‖∞).
    pub fn residuals(&self, model: &HomogeneousModel) -> Residuals {
        let mut r = Residuals::default();
        for (u, out) in self.states.iter().zip(&self.outputs) {
            let c = model.constraint_residual(u).amax();
            r.constraint = r.constraint.max(c);
            let i = DVector::from_column_slice(&out.i);
            let v = DVector::from_column_slice(&out.v);
            let ai = (model.a() * &i).amax() / i.amax().max(1.0);
            let bv = if model.b().nrows() > 0 {
                (model.b() * &v).amax() / v.amax().max(1.0)
            } else {
                0.0
            };
            r.kcl = r.kcl.max(ai);
            r.kvl = r.kvl.max(bv);
        }
        r
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Residuals {
    pub constraint: f64,
    pub kcl: f64,
    pub kvl: f64,
}

/// Newton on the constraints for the `solved` variables of `u`, in place.
fn newton(
    model: &HomogeneousModel,
    solved: &[usize],
    u: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<usize, SolverError> {
    let mut residual = f64::INFINITY;
    for it in 0..=max_iter {
        let ev = model.evaluate(u);
        let lead = model.leading_matrix(&ev);
        let w = model.annihilator(&lead);
        let h = &w * model.algebraic_part(&ev);
        residual = h.amax();
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(it);
        }
        if it == max_iter || solved.is_empty() {
            break;
        }
        let hu = &w * model.algebraic_jacobian(&ev);
        let jw = DMatrix::from_fn(hu.nrows(), solved.len(), |r, c| hu[(r, solved[c])]);
        let step = jw
            .lu()
            .solve(&(-h))
            .filter(|s| s.iter().all(|x| x.is_finite()))
            .ok_or(SolverError::SingularJacobian { iteration: it })?;
        for (c, &k) in solved.iter().enumerate() {
            u[k] += step[c];
        }
    }
    Err(SolverError::NewtonDivergence {
        iterations: max_iter,
        residual,
    })
}

/// Project a guess onto the constraint set by adjusting only the algebraic
/// variables.
pub fn consistent_init(
    model: &HomogeneousModel,
    guess: &[f64],
    cfg: &SimulationConfig,
) -> Result<Vec<f64>, SolverError> {
    let mut u = guess.to_vec();
    let solved: Vec<usize> = model.y_range().collect();
    newton(model, &solved, &mut u, cfg.newton_tol, cfg.newton_max_iter)?;
    Ok(u)
}

/// Explicit state-space right-hand side `x′` at a point of the constraint
/// set.
pub fn state_rhs(model: &HomogeneousModel, u: &[f64]) -> Result<DVector<f64>, SolverError> {
    let cm = chart_model(model, &Chart::standard(model), u)?;
    if !model.regularity_check(u).regular {
        return Err(SolverError::SingularLeading);
    }
    cm.e.lu().solve(&cm.f).ok_or(SolverError::SingularLeading)
}

/// Quasilinear reduction in the chart with coordinates `coords`.
pub fn quasilinear_chart(
    model: &HomogeneousModel,
    u: &[f64],
    coords: &[usize],
) -> Result<ChartModel, SolverError> {
    let chart = Chart::from_coords(model, coords)?;
    chart_model(model, &chart, u)
}

fn chart_model(
    model: &HomogeneousModel,
    chart: &Chart,
    u: &[f64],
) -> Result<ChartModel, SolverError> {
    let ev = model.evaluate(u);
    let lead = model.leading_matrix(&ev);
    let l = model.differential_operator(&lead);
    let e0 = &l * &lead;
    let f0 = -(&l * model.algebraic_part(&ev));
    let d = model.dims.d();
    let standard = chart.coords.iter().copied().eq(model.x_range());
    let tx = if standard {
        DMatrix::identity(d, d)
    } else {
        if !model.is_rlc() && model.dims.m_r > 0 {
            return Err(SolverError::Unsupported(
                "non-standard charts are not supported for memristive circuits with resistors"
                    .into(),
            ));
        }
        let w = model.annihilator(&lead);
        let hu = &w * model.algebraic_jacobian(&ev);
        let hw = DMatrix::from_fn(hu.nrows(), chart.solved.len(), |r, c| {
            hu[(r, chart.solved[c])]
        });
        let hz = DMatrix::from_fn(hu.nrows(), d, |r, c| hu[(r, chart.coords[c])]);
        let sol = hw.lu().solve(&(-hz)).ok_or(SolverError::UnsolvableChart)?;
        if sol.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::UnsolvableChart);
        }
        // T maps z′ to u′; keep the rows belonging to x.
        let mut t = DMatrix::zeros(model.dims.m, d);
        for (c, &k) in chart.coords.iter().enumerate() {
            t[(k, c)] = 1.0;
        }
        for (r, &k) in chart.solved.iter().enumerate() {
            for c in 0..d {
                t[(k, c)] = sol[(r, c)];
            }
        }
        t.rows(0, d).into_owned()
    };
    Ok(ChartModel {
        chart: chart.clone(),
        e: &e0 * &tx,
        f: f0,
        tx,
    })
}

/// Conditioning of the solved block: det(h_w) / Π‖rows of h_u‖.
fn solved_conditioning(model: &HomogeneousModel, chart: &Chart, u: &[f64]) -> f64 {
    if chart.solved.is_empty() {
        return 1.0;
    }
    let hu = model.full_constraint_jacobian(u);
    let scale = crate::homomodel::row_norm_product(&hu);
    if scale == 0.0 {
        return 0.0;
    }
    let hw = DMatrix::from_fn(hu.nrows(), chart.solved.len(), |r, c| {
        hu[(r, chart.solved[c])]
    });
    hw.determinant() / scale
}

/// Greedy column-pivoted selection of well-conditioned solved variables.
fn pivot_solved(model: &HomogeneousModel, u: &[f64]) -> Vec<usize> {
    let mut hu = model.full_constraint_jacobian(u);
    let (rows, m) = hu.shape();
    // Prefer algebraic variables on ties: scan them first.
    let order: Vec<usize> = model.y_range().chain(model.x_range()).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..rows {
        let mut best = None;
        let mut best_norm = 0.0;
        for &j in &order {
            if chosen.contains(&j) {
                continue;
            }
            let n = hu.column(j).norm();
            if n > best_norm * (1.0 + 1e-12) {
                best_norm = n;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        let q = hu.column(j) / best_norm;
        for k in 0..m {
            let proj = q.dot(&hu.column(k));
            let upd = hu.column(k) - &q * proj;
            hu.set_column(k, &upd);
        }
        chosen.push(j);
    }
    chosen.sort_unstable();
    chosen
}

fn adjugate(e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = e.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    DMatrix::from_fn(n, n, |i, j| {
        // adj[i][j] = (−1)^{i+j} · minor(j, i)
        let minor = e.clone().remove_row(j).remove_column(i);
        let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        s * minor.determinant()
    })
}

pub fn impasse_monitor(
    model: &HomogeneousModel,
    u: &[f64],
    cfg: &SimulationConfig,
) -> Result<Classification, SolverError> {
    if model.regularity_check(u).regular {
        return Ok(Classification::Regular);
    }
    let mut chart = Chart::standard(model);
    if solved_conditioning(model, &chart, u).abs() < cfg.chart_switch_threshold {
        chart = Chart::from_coords(model, &{
            let solved = pivot_solved(model, u);
            (0..model.dims.m)
                .filter(|k| !solved.contains(k))
                .collect::<Vec<_>>()
        })?;
    }
    let cm = chart_model(model, &chart, u)?;
    let svd = cm.e.clone().svd(true, false);
    let (kmin, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc },
            );
    let ell = svd.u.as_ref().expect("requested").column(kmin).into_owned();
    let lf = ell.dot(&cm.f).abs();
    if lf > cfg.impasse_threshold * cm.f.amax().max(1.0) {
        Ok(Classification::ImpasseCandidate)
    } else {
        Ok(Classification::SingularEquilibriumCandidate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Time,
    Tau { sigma: f64, rho0: f64 },
}

#[derive(Debug, Clone, Copy)]
struct EventFn {
    branch: usize,
    zeta: bool,
}

struct Step {
    s: Vec<f64>,
    f: Vec<f64>,
    u: Vec<f64>,
    err: f64,
}

/// Dormand–Prince 4(5) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Integrator<'a> {
    model: &'a HomogeneousModel,
    cfg: &'a SimulationConfig,
    chart: Chart,
    allow_switch: bool,
    guess: Vec<f64>,
    events: Vec<EventFn>,
    d: usize,
    guard_jumps: bool,
}

impl<'a> Integrator<'a> {
    fn complete(&mut self, z: &[f64]) -> Result<Vec<f64>, SolverError> {
        let mut u = self.guess.clone();
        for (c, &k) in self.chart.coords.iter().enumerate() {
            u[k] = z[c];
        }
        newton(
            self.model,
            &self.chart.solved,
            &mut u,
            self.cfg.newton_tol,
            self.cfg.newton_max_iter,
        )?;
        let jump = self
            .chart
            .solved
            .iter()
            .map(|&k| (u[k] - self.guess[k]).abs() / (1.0 + self.guess[k].abs()))
            .fold(0.0f64, f64::max);
        if self.guard_jumps && jump > self.cfg.max_newton_jump {
            return Err(SolverError::BranchJump { jump });
        }
        self.guess.clone_from(&u);
        Ok(u)
    }

    fn chart_model(&self, u: &[f64]) -> Result<ChartModel, SolverError> {
        chart_model(self.model, &self.chart, u)
    }

    fn field(&self, u: &[f64], t: f64, mode: Mode) -> Result<Vec<f64>, SolverError> {
        let cm = self.chart_model(u)?;
        let mut out = match mode {
            Mode::Time => {
                let z = cm.e.lu().solve(&cm.f).ok_or(SolverError::SingularLeading)?;
                let mut v: Vec<f64> = z.iter().copied().collect();
                v.push(1.0);
                v
            }
            Mode::Tau { sigma, rho0 } => {
                let adj = adjugate(&cm.e);
                let dz = adj * &cm.f;
                let mut v: Vec<f64> = dz.iter().map(|x| sigma * x / rho0).collect();
                v.push(sigma * cm.e.determinant() / rho0);
                v
            }
        };
        if out.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::SingularLeading);
        }
        let _ = t;
        out.shrink_to_fit();
        Ok(out)
    }

    fn rhs(&mut self, s: &[f64], mode: Mode) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
        let u = self.complete(&s[..self.d])?;
        let f = self.field(&u, s[self.d], mode)?;
        Ok((f, u))
    }

    fn dp_step(&mut self, s: &[f64], f0: &[f64], h: f64, mode: Mode) -> Result<Step, SolverError> {
        let n = s.len();
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(f0.to_vec());
        let mut u_last = Vec::new();
        for st in 1..7 {
            let mut y = s.to_vec();
            for (j, kj) in k.iter().enumerate() {
                let a = A[st][j];
                if a != 0.0 {
                    for i in 0..n {
                        y[i] += h * a * kj[i];
                    }
                }
            }
            let (f, u) = self.rhs(&y, mode)?;
            let _ = C[st];
            k.push(f);
            u_last = u;
        }
        let mut y5 = s.to_vec();
        let mut err = 0.0;
        for i in 0..n {
            let mut d5 = 0.0;
            let mut de = 0.0;
            for j in 0..7 {
                d5 += B5[j] * k[j][i];
                de += (B5[j] - B4[j]) * k[j][i];
            }
            y5[i] += h * d5;
            let sc = self.cfg.atol + self.cfg.rtol * s[i].abs().max(y5[i].abs());
            err += (h * de / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        // FSAL: the last stage is evaluated at y5.
        Ok(Step {
            s: y5,
            f: k.pop().unwrap(),
            u: u_last,
            err,
        })
    }

    fn event_values(&self, u: &[f64]) -> Vec<f64> {
        let ev = self.model.evaluate(u);
        self.events
            .iter()
            .map(|e| {
                if e.zeta {
                    ev.dzeta[(e.branch, e.branch)]
                } else {
                    ev.dpsi[(e.branch, e.branch)]
                }
            })
            .collect()
    }

    fn det_e(&self, u: &[f64]) -> f64 {
        self.chart_model(u)
            .map(|cm| cm.e.determinant())
            .unwrap_or(f64::NAN)
    }

    fn speed(&self, u: &[f64]) -> f64 {
        match self.chart_model(u) {
            Ok(cm) => {
                cm.e.clone()
                    .lu()
                    .solve(&cm.f)
                    .map(|z| z.amax())
                    .filter(|v| v.is_finite())
                    .unwrap_or(f64::INFINITY)
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn tau_mode(&self, u: &[f64]) -> Option<Mode> {
        let cm = self.chart_model(u).ok()?;
        let det = cm.e.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let adj_f = adjugate(&cm.e) * &cm.f;
        let rho0 = (adj_f.norm_squared() + det * det).sqrt();
        Some(Mode::Tau {
            sigma: det.signum(),
            rho0,
        })
    }

    /// x′ and the classical outputs at a point.
    fn outputs(&self, u: &[f64], mode: Mode) -> Outputs {
        let model = self.model;
        let m = model.dims.m;
        let d = self.d;
        let xdot: Vec<f64> = match self.chart_model(u) {
            Ok(cm) => {
                let z = match mode {
                    Mode::Time => cm.e.clone().lu().solve(&cm.f),
                    Mode::Tau { .. } => {
                        let det = cm.e.determinant();
                        Some(adjugate(&cm.e) * &cm.f / det)
                    }
                };
                match z {
                    Some(z) => (&cm.tx * z).iter().copied().collect(),
                    None => vec![f64::NAN; d],
                }
            }
            Err(_) => vec![f64::NAN; d],
        };
        let ev = model.evaluate(u);
        let mut out = Outputs {
            i: vec![0.0; m],
            v: vec![0.0; m],
            sigma: vec![f64::NAN; m],
            phi: vec![f64::NAN; m],
        };
        let rate =
            |row: &DMatrix<f64>, k: usize| -> f64 { (0..d).map(|j| row[(k, j)] * xdot[j]).sum() };
        for k in 0..m {
            match model.kind(k) {
                DeviceKind::Capacitor => {
                    out.sigma[k] = ev.psi[k];
                    out.v[k] = ev.zeta[k];
                    out.i[k] = rate(&ev.dpsi, k);
                }
                DeviceKind::Inductor => {
                    out.i[k] = ev.psi[k];
                    out.phi[k] = ev.zeta[k];
                    out.v[k] = rate(&ev.dzeta, k);
                }
                DeviceKind::Memristor => {
                    out.sigma[k] = ev.psi[k];
                    out.phi[k] = ev.zeta[k];
                    out.i[k] = rate(&ev.dpsi, k);
                    out.v[k] = rate(&ev.dzeta, k);
                }
                DeviceKind::Resistor => {
                    out.i[k] = ev.psi[k];
                    out.v[k] = ev.zeta[k];
                }
            }
        }
        out
    }

    /// Switch charts when the solved block degenerates (or back to the
    /// standard chart once it is comfortably regular again).
    fn maybe_switch_chart(&mut self, u: &[f64]) -> bool {
        if !self.allow_switch || self.chart.solved.is_empty() {
            return false;
        }
        if !self.model.is_rlc() {
            return false;
        }
        let standard = Chart::standard(self.model);
        let thr = self.cfg.chart_switch_threshold;
        if self.chart != standard
            && solved_conditioning(self.model, &standard, u).abs() > 10.0 * thr
        {
            self.chart = standard;
            return true;
        }
        if solved_conditioning(self.model, &self.chart, u).abs() < thr {
            let solved = pivot_solved(self.model, u);
            if solved.len() == self.chart.solved.len() && solved != self.chart.solved {
                let coords: Vec<usize> = (0..self.model.dims.m)
                    .filter(|k| !solved.contains(k))
                    .collect();
                self.chart = Chart { coords, solved };
                return true;
            }
        }
        false
    }

    /// Root of `g` along the step from `s0` (bracket as fractions of `h`).
    fn locate(
        &mut self,
        s0: &[f64],
        f0: &[f64],
        h: f64,
        mode: Mode,
        mut lo: f64,
        mut hi: f64,
        g_lo: f64,
        g: &dyn Fn(&Self, &[f64], &[f64]) -> f64,
    ) -> Result<(f64, f64), SolverError> {
        let d = self.d;
        let t_at = |this: &mut Self, th: f64| -> Result<(Vec<f64>, Vec<f64>), SolverError> {
            if th == 0.0 {
                let u = this.complete(&s0[..d])?;
                return Ok((s0.to_vec(), u));
            }
            let st = this.dp_step(s0, f0, th * h, mode)?;
            Ok((st.s, st.u))
        };
        let (s_lo, _) = t_at(self, lo)?;
        let (s_hi, _) = t_at(self, hi)?;
        let mut t_lo = s_lo[d];
        let mut t_hi = s_hi[d];
        let sign_lo = g_lo.signum();
        for _ in 0..200 {
            if (t_hi - t_lo).abs() <= self.cfg.event_tol || hi - lo <= 1e-15 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (sm, um) = t_at(self, mid)?;
            let gm = g(self, &sm, &um);
            if gm.signum() == sign_lo && gm != 0.0 {
                lo = mid;
                t_lo = sm[d];
            } else {
                hi = mid;
                t_hi = sm[d];
            }
        }
        Ok((lo, hi))
    }

    /// Derivative-zero events inside an accepted step.
    #[allow(clippy::too_many_arguments)]
    fn step_events(
        &mut self,
        s0: &[f64],
        f0: &[f64],
        u0: &[f64],
        h: f64,
        end: &Step,
        mode: Mode,
        out: &mut Vec<Event>,
    ) -> Result<(), SolverError> {
        if self.events.is_empty() {
            return Ok(());
        }
        let d = self.d;
        const THETAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(THETAS.len());
        vals.push(self.event_values(u0));
        for &th in &THETAS[1..5] {
            // cubic Hermite interpolation of z, then Newton for the rest
            let (h00, h10, h01, h11) = (
                2.0 * th.powi(3) - 3.0 * th.powi(2) + 1.0,
                th.powi(3) - 2.0 * th.powi(2) + th,
                -2.0 * th.powi(3) + 3.0 * th.powi(2),
                th.powi(3) - th.powi(2),
            );
            let z: Vec<f64> = (0..d)
                .map(|i| h00 * s0[i] + h10 * h * f0[i] + h01 * end.s[i] + h11 * h * end.f[i])
                .collect();
            let u = self.complete(&z)?;
            vals.push(self.event_values(&u));
        }
        vals.push(self.event_values(&end.u));
        let mut found = Vec::new();
        for (e_idx, ef) in self.events.clone().iter().enumerate() {
            for w in 0..THETAS.len() - 1 {
                let (a, b) = (vals[w][e_idx], vals[w + 1][e_idx]);
                let crosses =
                    (a < 0.0 && b > 0.0) || (a > 0.0 && b < 0.0) || (a != 0.0 && b == 0.0);
                if !crosses {
                    continue;
                }
                let ef = *ef;
                let g = move |this: &Self, _s: &[f64], u: &[f64]| -> f64 {
                    let ev = this.model.evaluate(u);
                    if ef.zeta {
                        ev.dzeta[(ef.branch, ef.branch)]
                    } else {
                        ev.dpsi[(ef.branch, ef.branch)]
                    }
                };
                let (lo, hi) = self.locate(s0, f0, h, mode, THETAS[w], THETAS[w + 1], a, &g)?;
                let th = 0.5 * (lo + hi);
                let st = self.dp_step(s0, f0, th * h, mode)?;
                found.push(Event {
                    time: st.s[d],
                    kind: EventKind::DerivativeZero {
                        kind: self.model.kind(ef.branch),
                        zeta: ef.zeta,
                    },
                    branch: Some(self.model.ids()[ef.branch].clone()),
                    state: st.u,
                });
                let _ = b;
            }
        }
        found.sort_by(|a, b| {
            a.time.total_cmp(&b.time).then_with(|| {
                self.model
                    .circuit
                    .index_of(a.branch.as_deref().unwrap_or(""))
                    .cmp(
                        &self
                            .model
                            .circuit
                            .index_of(b.branch.as_deref().unwrap_or("")),
                    )
            })
        });
        out.extend(found);
        Ok(())
    }

    /// Singular point of the reduced field near `z0`: det E = 0, adj(E)F = 0.
    fn locate_singular_point(&mut self, z0: &[f64]) -> Option<Vec<f64>> {
        let d = self.d;
        let mut z = z0.to_vec();
        let resid = |this: &mut Self, z: &[f64]| -> Option<DVector<f64>> {
            let u = this.complete(z).ok()?;
            let cm = this.chart_model(&u).ok()?;
            let adj_f = adjugate(&cm.e) * &cm.f;
            let mut r = DVector::zeros(d + 1);
            r[0] = cm.e.determinant();
            for i in 0..d {
                r[i + 1] = adj_f[i];
            }
            Some(r)
        };
        for _ in 0..60 {
            let r = resid(self, &z)?;
            if r.amax() < 1e-13 {
                return Some(z);
            }
            let mut jac = DMatrix::zeros(d + 1, d);
            for j in 0..d {
                let hstep = 1e-7 * (1.0 + z[j].abs());
                let mut zp = z.clone();
                zp[j] += hstep;
                let mut zm = z.clone();
                zm[j] -= hstep;
                let rp = resid(self, &zp)?;
                let rm = resid(self, &zm)?;
                jac.set_column(j, &((rp - rm) / (2.0 * hstep)));
            }
            let step = jac.svd(true, true).solve(&(-&r), 1e-12).ok()?;
            for j in 0..d {
                z[j] += step[j];
            }
            if step.amax() < 1e-15 * (1.0 + z.iter().fold(0.0f64, |a, b| a.max(b.abs()))) {
                let r = resid(self, &z)?;
                return (r.amax() < 1e-9).then_some(z);
            }
        }
        let r = resid(self, &z)?;
        (r.amax() < 1e-9).then_some(z)
    }

    /// Outgoing direction through a singular equilibrium: an eigenvector of
    /// the desingularized field whose motion continues forward in time on
    /// the far side of det E = 0.
    fn crossing_direction(&mut self, zs: &[f64], sigma_in: f64) -> Option<Vec<f64>> {
        let d = self.d;
        let field = |this: &mut Self, z: &[f64]| -> Option<(DVector<f64>, f64)> {
            let u = this.complete(z).ok()?;
            let cm = this.chart_model(&u).ok()?;
            Some((adjugate(&cm.e) * &cm.f, cm.e.determinant()))
        };
        let mut jac = DMatrix::zeros(d, d);
        let mut grad = DVector::zeros(d);
        for j in 0..d {
            let hstep = 1e-6 * (1.0 + zs[j].abs());
            let mut zp = zs.to_vec();
            zp[j] += hstep;
            let mut zm = zs.to_vec();
            zm[j] -= hstep;
            let (fp, dp) = field(self, &zp)?;
            let (fm, dm) = field(self, &zm)?;
            jac.set_column(j, &((fp - fm) / (2.0 * hstep)));
            grad[j] = (dp - dm) / (2.0 * hstep);
        }
        let scale = jac.amax().max(1e-300);
        let mut best: Option<(f64, DVector<f64>)> = None;
        for lam in jac.complex_eigenvalues().iter() {
            if lam.im.abs() > 1e-8 * scale || lam.re * sigma_in >= 0.0 {
                continue;
            }
            let shifted = &jac - DMatrix::identity(d, d) * lam.re;
            let svd = shifted.svd(false, true);
            let vt = svd.v_t?;
            let (kmin, _) =
                svd.singular_values
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::INFINITY),
                        |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc },
                    );
            let e = vt.row(kmin).transpose();
            let gd = grad.dot(&e);
            if gd.abs() < 1e-8 * grad.norm() {
                continue;
            }
            let e = if gd.signum() == -sigma_in { e } else { -e };
            if best.as_ref().is_none_or(|(l, _)| lam.re.abs() > l.abs()) {
                best = Some((lam.re, e));
            }
        }
        best.map(|(_, e)| e.iter().copied().collect())
    }
}

/// Integrate from the initial state in `cfg`.
pub fn integrate(
    model: &HomogeneousModel,
    cfg: &SimulationConfig,
) -> Result<Trajectory, SolverError> {
    let guess = cfg.initial_guess(model)?;
    integrate_from(model, &guess, cfg, None, true)
}

/// Integrate from `guess` (projected onto the constraint set). `chart`
/// selects the initial chart (standard if `None`); `allow_switch` enables
/// automatic chart changes.
pub fn integrate_from(
    model: &HomogeneousModel,
    guess: &[f64],
    cfg: &SimulationConfig,
    chart: Option<Chart>,
    allow_switch: bool,
) -> Result<Trajectory, SolverError> {
    cfg.validate()?;
    let chart = chart.unwrap_or_else(|| Chart::standard(model));
    let d = model.dims.d();
    let mut events = Vec::new();
    for k in 0..model.dims.m {
        let (cp, cq) = model.devices().constant_diagonals(k);
        if !cp {
            events.push(EventFn {
                branch: k,
                zeta: false,
            });
        }
        if !cq {
            events.push(EventFn {
                branch: k,
                zeta: true,
            });
        }
    }
    let mut it = Integrator {
        model,
        cfg,
        chart,
        allow_switch,
        guess: guess.to_vec(),
        events,
        d,
        guard_jumps: false,
    };
    let mut traj = Trajectory::empty(model);
    let mut u = if it.chart.solved.is_empty() {
        guess.to_vec()
    } else {
        let z0: Vec<f64> = it.chart.coords.iter().map(|&k| guess[k]).collect();
        it.complete(&z0)?
    };
    it.guard_jumps = true;
    let zs = |it: &Integrator, u: &[f64]| -> Vec<f64> {
        let mut s: Vec<f64> = it.chart.coords.iter().map(|&k| u[k]).collect();
        s.push(0.0);
        s
    };
    let mut s = zs(&it, &u);
    let mut mode = Mode::Time;
    if it.speed(&u) > cfg.desingularize_speed {
        mode = it.tau_mode(&u).ok_or(SolverError::SingularLeading)?;
    }
    traj.times.push(0.0);
    traj.outputs.push(it.outputs(&u, mode));
    traj.states.push(u.clone());
    if cfg.t_end == 0.0 {
        traj.times.clear();
        traj.outputs.clear();
        traj.states.clear();
        return Ok(traj);
    }
    if it
        .chart_model(&u)
        .map(|cm| cm.f.amax() == 0.0)
        .unwrap_or(false)
    {
        traj.events.push(Event {
            time: 0.0,
            kind: EventKind::EquilibriumHit,
            branch: None,
            state: u.clone(),
        });
    }
    let (mut f, _) = it.rhs(&s, mode)?;
    let mut h = cfg.initial_step.min(cfg.max_step);
    let h_min = 1e-14 * cfg.t_end.max(1.0);
    let mut steps = 0usize;

    loop {
        let t = s[d];
        if t >= cfg.t_end {
            break;
        }
        steps += 1;
        if steps > cfg.max_steps {
            traj.termination = Termination::MaxSteps;
            traj.diagnostic = Some(format!("step limit {} reached at t = {t}", cfg.max_steps));
            break;
        }
        // Chart and time-parametrization management.
        let mut refresh = false;
        if it.maybe_switch_chart(&u) {
            let t = s[d];
            s = zs(&it, &u);
            s[d] = t;
            refresh = true;
        }
        let speed = it.speed(&u);
        match mode {
            Mode::Time if speed > cfg.desingularize_speed => {
                if let Some(m) = it.tau_mode(&u) {
                    mode = m;
                    refresh = true;
                }
            }
            Mode::Tau { sigma, .. } if speed < 0.25 * cfg.desingularize_speed => {
                if it.det_e(&u).signum() == sigma {
                    mode = Mode::Time;
                    refresh = true;
                }
            }
            _ => {}
        }
        if refresh {
            match it.rhs(&s, mode) {
                Ok((ff, uu)) => {
                    f = ff;
                    u = uu;
                }
                Err(e) => {
                    fail(&mut traj, &u, s[d], e);
                    break;
                }
            }
        }
        if mode == Mode::Time {
            h = h.min(cfg.t_end - t);
        }
        h = h.min(cfg.max_step);

        let step = match it.dp_step(&s, &f, h, mode) {
            Ok(st) if st.err.is_finite() && st.err <= 1.0 => st,
            Ok(st) => {
                let fac = if st.err.is_finite() {
                    (0.9 * st.err.powf(-0.2)).clamp(0.1, 0.9)
                } else {
                    0.25
                };
                h *= fac;
                if h < h_min {
                    if let Some(m) = (mode == Mode::Time).then(|| it.tau_mode(&u)).flatten() {
                        mode = m;
                        h = cfg.initial_step;
                        if let Ok((ff, _)) = it.rhs(&s, mode) {
                            f = ff;
                            continue;
                        }
                    }
                    impasse(&mut traj, &u, s[d], "step size underflow");
                    break;
                }
                continue;
            }
            Err(e) => {
                h *= 0.25;
                if h < h_min {
                    if let Some(m) = (mode == Mode::Time).then(|| it.tau_mode(&u)).flatten() {
                        mode = m;
                        h = cfg.initial_step;
                        if let Ok((ff, _)) = it.rhs(&s, mode) {
                            f = ff;
                            continue;
                        }
                    }
                    fail(&mut traj, &u, s[d], e);
                    break;
                }
                continue;
            }
        };

        let det0 = it.det_e(&u);
        let det1 = it.det_e(&step.u);
        if mode == Mode::Time && det0.signum() != det1.signum() {
            // The step jumped over the singular set: redo it desingularized.
            if let Some(m) = it.tau_mode(&u) {
                mode = m;
                let (ff, _) = match it.rhs(&s, mode) {
                    Ok(v) => v,
                    Err(e) => {
                        fail(&mut traj, &u, s[d], e);
                        break;
                    }
                };
                f = ff;
                continue;
            }
        }

        let mut end = step;
        let mut hit_singular = false;
        let mut hit_end = false;
        let mut h_used = h;
        if let Mode::Tau { sigma, .. } = mode {
            let g_det = |this: &Integrator, _s: &[f64], u: &[f64]| this.det_e(u);
            if det1.signum() != sigma {
                let (lo, _) = it.locate(&s, &f, h, mode, 0.0, 1.0, det0, &g_det)?;
                h_used = lo * h;
                hit_singular = true;
            } else if end.s[d] > cfg.t_end {
                let t_end = cfg.t_end;
                let g_t = move |_: &Integrator, s: &[f64], _u: &[f64]| s[d] - t_end;
                let (_, hi) = it.locate(&s, &f, h, mode, 0.0, 1.0, s[d] - t_end, &g_t)?;
                h_used = hi * h;
                hit_end = true;
            }
            if hit_singular || hit_end {
                end = if h_used > 0.0 {
                    it.dp_step(&s, &f, h_used, mode)?
                } else {
                    Step {
                        s: s.clone(),
                        f: f.clone(),
                        u: u.clone(),
                        err: 0.0,
                    }
                };
            }
        }

        if h_used > 0.0 {
            let mut evs = Vec::new();
            it.step_events(&s, &f, &u, h_used, &end, mode, &mut evs)?;
            traj.events.extend(evs);
        }
        let err = end.err;
        s = end.s;
        f = end.f;
        u = end.u;
        it.guess.clone_from(&u);
        if hit_end {
            s[d] = s[d].min(cfg.t_end);
        }
        if s[d] > *traj.times.last().unwrap() {
            traj.times.push(s[d]);
            traj.outputs.push(it.outputs(&u, mode));
            traj.states.push(u.clone());
        }
        if !hit_singular {
            let fac = if err > 0.0 {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h = h_used.max(h) * fac;
        }
        if hit_end {
            break;
        }
        if hit_singular {
            let Mode::Tau { sigma, .. } = mode else {
                unreachable!()
            };
            match cross_singular(&mut it, &u, s[d], sigma, &mut traj) {
                Some((u_new, z_new)) => {
                    let t = s[d];
                    u = u_new;
                    s = z_new;
                    s.push(t);
                    mode = it.tau_mode(&u).unwrap_or(Mode::Time);
                    match it.rhs(&s, mode) {
                        Ok((ff, _)) => f = ff,
                        Err(e) => {
                            fail(&mut traj, &u, t, e);
                            break;
                        }
                    }
                    h = cfg.initial_step.min(cfg.max_step);
                }
                None => break,
            }
        }
    }
    Ok(traj)
}

/// Classify a point on the singular set; either restart past a singular
/// equilibrium or record an impasse.
fn cross_singular(
    it: &mut Integrator,
    u: &[f64],
    t: f64,
    sigma: f64,
    traj: &mut Trajectory,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let cm = it.chart_model(u).ok()?;
    let svd = cm.e.clone().svd(true, false);
    let (kmin, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc },
            );
    let ell = svd.u.as_ref()?.column(kmin).into_owned();
    let lf = ell.dot(&cm.f).abs();
    if lf > it.cfg.singular_capture_tol {
        impasse(traj, u, t, &format!("impasse point (|lᵀF| = {lf:.3e})"));
        return None;
    }
    let z0: Vec<f64> = it.chart.coords.iter().map(|&k| u[k]).collect();
    let Some(zs) = it.locate_singular_point(&z0) else {
        impasse(traj, u, t, "singular point could not be located");
        return None;
    };
    let Some(dir) = it.crossing_direction(&zs, sigma) else {
        impasse(
            traj,
            u,
            t,
            "no forward crossing direction at the singular point",
        );
        return None;
    };
    let u_star = it.complete(&zs).ok()?;
    let eps = 1e-6 * (1.0 + zs.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    let z_new: Vec<f64> = zs.iter().zip(&dir).map(|(z, e)| z + eps * e).collect();
    let Ok(u_new) = it.complete(&z_new) else {
        impasse(traj, u, t, "Newton failure after crossing");
        return None;
    };
    let before = it.event_values(u);
    let after = it.event_values(&u_new);
    let mut evs: Vec<Event> = Vec::new();
    for (k, ef) in it.events.iter().enumerate() {
        if before[k].signum() != after[k].signum() {
            evs.push(Event {
                time: t,
                kind: EventKind::DerivativeZero {
                    kind: it.model.kind(ef.branch),
                    zeta: ef.zeta,
                },
                branch: Some(it.model.ids()[ef.branch].clone()),
                state: u_star.clone(),
            });
        }
    }
    evs.push(Event {
        time: t,
        kind: EventKind::SingularCrossing,
        branch: None,
        state: u_star,
    });
    traj.events.extend(evs);
    Some((u_new, z_new))
}

fn impasse(traj: &mut Trajectory, u: &[f64], t: f64, why: &str) {
    traj.events.push(Event {
        time: t,
        kind: EventKind::Impasse,
        branch: None,
        state: u.to_vec(),
    });
    traj.termination = Termination::Impasse;
    traj.diagnostic = Some(format!("{why} at t = {t}"));
}

fn fail(traj: &mut Trajectory, u: &[f64], t: f64, e: SolverError) {
    traj.events.push(Event {
        time: t,
        kind: EventKind::NewtonFailure,
        branch: None,
        state: u.to_vec(),
    });
    traj.termination = Termination::NewtonFailure;
    traj.diagnostic = Some(format!("{e} at t = {t}"));
}
