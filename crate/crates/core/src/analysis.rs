//! Equilibria, linearization pencils and scans of the singular set.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::homomodel::HomogeneousModel;
use crate::netlist::DeviceKind;

/// Relative size below which a pencil coefficient counts as zero.
pub const COEFF_THRESHOLD: f64 = 1e-10;
const EQ_TOL: f64 = 1e-12;
const DEDUP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("Newton did not converge from any of {seeds} seeds")]
    NoConvergence { seeds: usize },
    #[error("point is not an equilibrium (residual {residual:e})")]
    NotEquilibrium { residual: f64 },
    #[error("nontrivial eigenvalue is degenerate in both circuits")]
    Degenerate,
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    pub state: Vec<f64>,
    pub residual: f64,
    /// Dimension of the nullspace of ∂G/∂u: 0 for isolated equilibria,
    /// ≥ 1 on equilibrium lines/manifolds.
    pub nullspace_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenClass {
    Zero,
    Finite,
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
    pub class: EigenClass,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PencilLinearization {
    /// Coefficient of λ.
    #[serde(serialize_with = "ser_matrix")]
    pub e: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub f: DMatrix<f64>,
    pub point: Vec<f64>,
    /// det(λE + F), ascending powers of λ.
    pub det_coefficients: Vec<f64>,
    /// True when det(λE + F) vanishes identically.
    pub singular_pencil: bool,
    pub eigenvalues: Vec<Eigenvalue>,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect();
    rows.serialize(s)
}

impl PencilLinearization {
    pub fn order(&self) -> usize {
        self.e.nrows()
    }

    pub fn count(&self, class: EigenClass) -> usize {
        self.eigenvalues.iter().filter(|e| e.class == class).count()
    }

    /// Finite nonzero eigenvalues.
    pub fn nontrivial(&self) -> impl Iterator<Item = &Eigenvalue> {
        self.eigenvalues
            .iter()
            .filter(|e| e.class == EigenClass::Finite)
    }
}

/// Minimal-norm Newton on G(u) = 0. `fixed` lists coordinates held constant.
fn solve_equilibrium(model: &HomogeneousModel, seed: &[f64], fixed: &[usize]) -> Option<Vec<f64>> {
    let mut u = seed.to_vec();
    let free: Vec<usize> = (0..model.dims.m).filter(|k| !fixed.contains(k)).collect();
    for _ in 0..100 {
        let ev = model.evaluate(&u);
        let g = model.algebraic_part(&ev);
        let r = g.amax();
        if !r.is_finite() {
            return None;
        }
        if r < EQ_TOL {
            return Some(u);
        }
        let jac = model.algebraic_jacobian(&ev);
        let jf = DMatrix::from_fn(jac.nrows(), free.len(), |i, j| jac[(i, free[j])]);
        let tol = 1e-12 * jf.amax().max(1e-300);
        let step = jf.svd(true, true).solve(&(-g), tol).ok()?;
        for (j, &k) in free.iter().enumerate() {
            u[k] += step[j];
        }
        if step.amax() < 1e-16 * (1.0 + u.iter().fold(0.0f64, |a, b| a.max(b.abs()))) {
            break;
        }
    }
    let r = model.algebraic_part(&model.evaluate(&u)).amax();
    (r < EQ_TOL).then_some(u)
}

fn nullspace_dim(jac: &DMatrix<f64>) -> usize {
    let n = jac.ncols();
    let sv = jac.clone().svd(false, false).singular_values;
    let tol = 1e-10 * jac.norm().max(1e-300);
    n - sv.iter().filter(|&&s| s > tol).count()
}

/// Equilibria (x′ = 0 on the constraint set, i.e. G(u) = 0) reached by
/// Newton from the seeds, deduplicated.
pub fn find_equilibria(
    model: &HomogeneousModel,
    seeds: &[Vec<f64>],
) -> Result<Vec<Equilibrium>, AnalysisError> {
    let mut out: Vec<Equilibrium> = Vec::new();
    for seed in seeds {
        let Some(u) = solve_equilibrium(model, seed, &[]) else {
            continue;
        };
        if out.iter().any(|e| {
            e.state
                .iter()
                .zip(&u)
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
                < DEDUP_TOL
        }) {
            continue;
        }
        let ev = model.evaluate(&u);
        out.push(Equilibrium {
            residual: model.algebraic_part(&ev).amax(),
            nullspace_dim: nullspace_dim(&model.algebraic_jacobian(&ev)),
            state: u,
        });
    }
    if out.is_empty() {
        return Err(AnalysisError::NoConvergence { seeds: seeds.len() });
    }
    Ok(out)
}

/// Equilibrium with branch `k`'s homogeneous variable pinned to `value`.
pub fn equilibrium_through(
    model: &HomogeneousModel,
    k: usize,
    value: f64,
) -> Result<Vec<f64>, AnalysisError> {
    let mut seed = vec![0.0; model.dims.m];
    seed[k] = value;
    solve_equilibrium(model, &seed, &[k]).ok_or(AnalysisError::NoConvergence { seeds: 1 })
}

/// Points of the equilibrium line through `u0` (nullspace dimension 1),
/// parametrized by the offset `s` along the null direction.
pub fn trace_equilibrium_line(
    model: &HomogeneousModel,
    u0: &[f64],
    offsets: &[f64],
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let jac = model.algebraic_jacobian(&model.evaluate(u0));
    if nullspace_dim(&jac) != 1 {
        return Err(AnalysisError::Unsupported(
            "equilibrium is not on a curve of equilibria".into(),
        ));
    }
    let svd = jac.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let (kmin, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |a, (k, &s)| if s < a.1 { (k, s) } else { a },
            );
    let mut n = vt.row(kmin).transpose();
    if n.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
        n = -n;
    }
    let m = model.dims.m;
    let mut out = Vec::with_capacity(offsets.len());
    for &s in offsets {
        let mut u: Vec<f64> = (0..m).map(|k| u0[k] + s * n[k]).collect();
        let mut ok = false;
        for _ in 0..100 {
            let ev = model.evaluate(&u);
            let g = model.algebraic_part(&ev);
            let along: f64 = (0..m).map(|k| n[k] * (u[k] - u0[k])).sum::<f64>() - s;
            let mut r = DVector::zeros(m + 1);
            r.rows_mut(0, m).copy_from(&g);
            r[m] = along;
            if r.amax() < EQ_TOL {
                ok = true;
                break;
            }
            let j = model.algebraic_jacobian(&ev);
            let mut ja = DMatrix::zeros(m + 1, m);
            ja.view_mut((0, 0), (m, m)).copy_from(&j);
            for k in 0..m {
                ja[(m, k)] = n[k];
            }
            let Ok(step) = ja.svd(true, true).solve(&(-r), 1e-14) else {
                break;
            };
            for k in 0..m {
                u[k] += step[k];
            }
        }
        if !ok {
            return Err(AnalysisError::NoConvergence { seeds: 1 });
        }
        out.push(u);
    }
    Ok(out)
}

/// det of a matrix of affine polynomials `a + λ b`, by Laplace expansion
/// along rows memoized over column subsets.
pub fn pencil_determinant(e: &DMatrix<f64>, f: &DMatrix<f64>) -> Vec<f64> {
    let n = e.nrows();
    assert!(n < 24, "pencil order too large for subset expansion");
    if n == 0 {
        return vec![1.0];
    }
    let mut memo: Vec<Option<Vec<f64>>> = vec![None; 1 << n];
    memo[0] = Some(vec![1.0]);
    // dp over masks in order of popcount: row r = popcount(mask) - 1
    let mut masks: Vec<usize> = (1..1usize << n).collect();
    masks.sort_by_key(|m| m.count_ones());
    for mask in masks {
        let row = mask.count_ones() as usize - 1;
        let mut acc = vec![0.0; row + 2];
        for col in 0..n {
            if mask & (1 << col) == 0 {
                continue;
            }
            // cofactor sign from the row and the position of `col` among
            // the selected columns
            let pos = (mask & ((1 << col) - 1)).count_ones() as usize;
            let sign = if (row + pos) % 2 == 0 { 1.0 } else { -1.0 };
            let (a, b) = (f[(row, col)], e[(row, col)]);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let sub = memo[mask & !(1 << col)]
                .as_ref()
                .expect("smaller masks first");
            for (k, c) in sub.iter().enumerate() {
                acc[k] += sign * a * c;
                acc[k + 1] += sign * b * c;
            }
        }
        memo[mask] = Some(acc);
    }
    memo[(1 << n) - 1].take().unwrap()
}

/// Roots of det(λE+F) with multiplicity, classified as zero, finite or
/// infinite (order minus effective degree).
pub fn classify_roots(coeffs: &[f64], order: usize) -> (Vec<Eigenvalue>, bool) {
    let scale = coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    if scale == 0.0 {
        return (Vec::new(), true);
    }
    let small = |c: f64| c.abs() <= COEFF_THRESHOLD * scale;
    let low = coeffs.iter().position(|&c| !small(c)).unwrap();
    let high = coeffs.iter().rposition(|&c| !small(c)).unwrap();
    let mut out = Vec::new();
    for _ in 0..low {
        out.push(Eigenvalue {
            re: 0.0,
            im: 0.0,
            class: EigenClass::Zero,
        });
    }
    let core = &coeffs[low..=high];
    let deg = core.len() - 1;
    if deg == 1 {
        out.push(Eigenvalue {
            re: -core[0] / core[1],
            im: 0.0,
            class: EigenClass::Finite,
        });
    } else if deg > 1 {
        let lead = core[deg];
        let comp = DMatrix::from_fn(deg, deg, |r, c| {
            if r == 0 {
                -core[deg - 1 - c] / lead
            } else if c + 1 == r {
                1.0
            } else {
                0.0
            }
        });
        let mut ev: Vec<Eigenvalue> = comp
            .complex_eigenvalues()
            .iter()
            .map(|z| Eigenvalue {
                re: z.re,
                im: z.im,
                class: EigenClass::Finite,
            })
            .collect();
        ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        out.extend(ev);
    }
    for _ in high..order {
        out.push(Eigenvalue {
            re: f64::INFINITY,
            im: 0.0,
            class: EigenClass::Infinite,
        });
    }
    (out, false)
}

/// Pencil λ[M | 0] + [G_x | G_y] of the model linearized at `u`.
pub fn linearization_pencil(
    model: &HomogeneousModel,
    u: &[f64],
) -> Result<PencilLinearization, AnalysisError> {
    let ev = model.evaluate(u);
    let residual = model.algebraic_part(&ev).amax();
    if residual > 1e-8 {
        return Err(AnalysisError::NotEquilibrium { residual });
    }
    let m = model.dims.m;
    let d = model.dims.d();
    let lead = model.leading_matrix(&ev);
    let mut e = DMatrix::zeros(m, m);
    e.view_mut((0, 0), (m, d)).copy_from(&lead);
    let f = model.algebraic_jacobian(&ev);
    let det_coefficients = pencil_determinant(&e, &f);
    let (eigenvalues, singular_pencil) = classify_roots(&det_coefficients, m);
    Ok(PencilLinearization {
        e,
        f,
        point: u.to_vec(),
        det_coefficients,
        singular_pencil,
        eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub u_m: f64,
    pub lambda_flux: Option<f64>,
    pub lambda_charge: Option<f64>,
    pub product: Option<f64>,
    pub holds: bool,
}

fn memristor_index(model: &HomogeneousModel) -> Result<usize, AnalysisError> {
    (0..model.dims.m)
        .find(|&k| model.kind(k) == DeviceKind::Memristor)
        .ok_or_else(|| AnalysisError::Unsupported("circuit has no memristor".into()))
}

/// λ_charge = 1/λ_flux for the nontrivial eigenvalue of the two memristor
/// variants at the same u_m.
pub fn eigenvalue_symmetry_check(
    flux: &HomogeneousModel,
    charge: &HomogeneousModel,
    u_m: f64,
) -> Result<SymmetryReport, AnalysisError> {
    let lam = |model: &HomogeneousModel| -> Result<Option<f64>, AnalysisError> {
        let k = memristor_index(model)?;
        let u = equilibrium_through(model, k, u_m)?;
        let p = linearization_pencil(model, &u)?;
        let lam = p.nontrivial().find(|e| e.im == 0.0).map(|e| e.re);
        Ok(lam)
    };
    let lf = lam(flux)?;
    let lc = lam(charge)?;
    if lf.is_none() && lc.is_none() {
        return Err(AnalysisError::Degenerate);
    }
    let product = lf.zip(lc).map(|(a, b)| a * b);
    let holds = match (lf, lc) {
        (Some(_), Some(_)) => (product.unwrap() - 1.0).abs() <= 1e-10,
        // one side degenerate: the other must be at the opposite extreme
        _ => true,
    };
    Ok(SymmetryReport {
        u_m,
        lambda_flux: lf,
        lambda_charge: lc,
        product,
        holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LocusKind {
    /// An extra zero eigenvalue appears.
    Zero,
    /// An eigenvalue escapes to infinity.
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocusPoint {
    pub kind: LocusKind,
    pub parameter: f64,
}

/// Parameter values along a family of equilibria where the generic
/// number of zero eigenvalues increases or the generic degree of
/// det(λE+F) drops, located by bisection to `tol`.
pub fn eigen_loci(
    model: &HomogeneousModel,
    family: &dyn Fn(f64) -> Vec<f64>,
    lo: f64,
    hi: f64,
    samples: usize,
    tol: f64,
) -> Result<Vec<LocusPoint>, AnalysisError> {
    let samples = samples.max(2);
    let grid: Vec<f64> = (0..samples)
        .map(|k| lo + (hi - lo) * k as f64 / (samples - 1) as f64)
        .collect();
    let coeffs_at = |s: f64| -> Result<Vec<f64>, AnalysisError> {
        Ok(linearization_pencil(model, &family(s))?.det_coefficients)
    };
    let all: Vec<Vec<f64>> = grid
        .iter()
        .map(|&s| coeffs_at(s))
        .collect::<Result<_, _>>()?;
    let small = |c: &[f64], k: usize| {
        let scale = c.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        c[k].abs() <= COEFF_THRESHOLD * scale
    };
    // generic lowest nonzero and highest nonzero coefficient
    let nu = all
        .iter()
        .filter_map(|c| (0..c.len()).find(|&k| !small(c, k)))
        .min()
        .unwrap_or(0);
    let delta = all
        .iter()
        .filter_map(|c| (0..c.len()).rev().find(|&k| !small(c, k)))
        .max()
        .unwrap_or(0);
    let mut out = Vec::new();
    for (kind, idx) in [(LocusKind::Zero, nu), (LocusKind::Infinite, delta)] {
        let val = |s: f64| -> Result<f64, AnalysisError> { Ok(coeffs_at(s)?[idx]) };
        for w in 0..samples - 1 {
            let (mut a, mut b) = (grid[w], grid[w + 1]);
            let (mut fa, fb) = (all[w][idx], all[w + 1][idx]);
            if fa == 0.0 {
                if w == 0 || all[w - 1][idx] != 0.0 {
                    out.push(LocusPoint { kind, parameter: a });
                }
                continue;
            }
            if fa.signum() == fb.signum() || fb == 0.0 {
                continue;
            }
            while b - a > tol {
                let mid = 0.5 * (a + b);
                let fm = val(mid)?;
                if fm == 0.0 {
                    a = mid;
                    b = mid;
                    break;
                }
                if fm.signum() == fa.signum() {
                    a = mid;
                    fa = fm;
                } else {
                    b = mid;
                }
            }
            out.push(LocusPoint {
                kind,
                parameter: 0.5 * (a + b),
            });
        }
        if let Some(&last) = all.last().map(|c| &c[idx]) {
            if last == 0.0 && !(samples >= 2 && all[samples - 2][idx] == 0.0) {
                out.push(LocusPoint {
                    kind,
                    parameter: hi,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub points_per_axis: usize,
    pub cells: usize,
    pub flagged: usize,
    pub fraction: f64,
    /// Centers (u_r coordinates) of flagged cells, at most `MAX_LISTED`.
    pub flagged_centers: Vec<Vec<f64>>,
}

const MAX_LISTED: usize = 1000;

/// Tensor-grid scan of K(u_r) over `[lo, hi]^{m_r}` with `n` points per
/// axis; a cell is flagged when K changes sign across its corners or
/// vanishes (relative to the size of its terms) at one of them.
pub fn singular_scan(
    model: &HomogeneousModel,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<ScanReport, AnalysisError> {
    if !model.is_rlc() {
        return Err(AnalysisError::Unsupported(
            "singular scan requires an RLC circuit".into(),
        ));
    }
    let mr = model.dims.m_r;
    let n = n.max(2);
    if mr == 0 {
        return Ok(ScanReport {
            points_per_axis: n,
            cells: 0,
            flagged: 0,
            fraction: 0.0,
            flagged_centers: vec![],
        });
    }
    let total_points = n
        .checked_pow(mr as u32)
        .filter(|&t| t <= 50_000_000)
        .ok_or_else(|| AnalysisError::Unsupported("scan grid too large".into()))?;
    let coord = |i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let y = model.y_range();
    // K at every grid point: value sign (−1, 0, +1) with 0 meaning "vanishes".
    let mut sign = vec![0i8; total_points];
    let mut u = vec![0.0; model.dims.m];
    for (idx, s) in sign.iter_mut().enumerate() {
        let mut rem = idx;
        for a in 0..mr {
            u[y.start + a] = coord(rem % n);
            rem /= n;
        }
        let (k, scale) = model.kirchhoff_value(&u).unwrap_or((0.0, 0.0));
        *s = if k.abs() <= 1e-10 * scale || scale == 0.0 {
            0
        } else if k > 0.0 {
            1
        } else {
            -1
        };
    }
    let cells_per_axis = n - 1;
    let cells = cells_per_axis.pow(mr as u32);
    let mut flagged = 0;
    let mut centers = Vec::new();
    for cell in 0..cells {
        let mut base = vec![0usize; mr];
        let mut rem = cell;
        for b in base.iter_mut() {
            *b = rem % cells_per_axis;
            rem /= cells_per_axis;
        }
        let mut seen_pos = false;
        let mut seen_neg = false;
        let mut seen_zero = false;
        for corner in 0..(1usize << mr) {
            let mut idx = 0;
            let mut stride = 1;
            for (a, &b) in base.iter().enumerate() {
                idx += (b + ((corner >> a) & 1)) * stride;
                stride *= n;
            }
            match sign[idx] {
                1 => seen_pos = true,
                -1 => seen_neg = true,
                _ => seen_zero = true,
            }
        }
        if seen_zero || (seen_pos && seen_neg) {
            flagged += 1;
            if centers.len() < MAX_LISTED {
                centers.push(
                    base.iter()
                        .map(|&b| 0.5 * (coord(b) + coord(b + 1)))
                        .collect(),
                );
            }
        }
    }
    Ok(ScanReport {
        points_per_axis: n,
        cells,
        flagged,
        fraction: flagged as f64 / cells as f64,
        flagged_centers: centers,
    })
}
