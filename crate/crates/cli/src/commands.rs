use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use homcirc::analysis::{
    eigen_loci, find_equilibria, linearization_pencil, trace_equilibrium_line, AnalysisError,
    LocusKind, PencilLinearization,
};
use homcirc::builtins::builtin;
use homcirc::circuit::{load_circuit, CircuitError};
use homcirc::graph::{proper_trees, spanning_trees, GraphError};
use homcirc::homomodel::{assemble, HomogeneousModel, ModelError, ModelReport};
use homcirc::solver::{integrate, SimulationConfig, SolverError, Termination};
use homcirc::treepoly::{kirchhoff_polynomial, Assignment, PolynomialReport, TreePolyError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::output::{trajectory_csv, OutDir, RunManifest};
use crate::Source;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Poly(#[from] TreePolyError),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Circuit(CircuitError::Graph(_)) => 3,
            CliError::Circuit(_) => 2,
            CliError::Model(_) => 3,
            CliError::Solver(SolverError::InvalidConfig(_) | SolverError::UnknownBranch(_)) => 2,
            CliError::Solver(_) | CliError::Analysis(_) => 4,
            CliError::Poly(TreePolyError::DegenerateTopology | TreePolyError::Graph(_)) => 3,
            CliError::Poly(TreePolyError::UnknownLabel(_) | TreePolyError::NotSymbolic(_)) => 2,
            CliError::Poly(_) => 4,
            CliError::Validation(_) => 5,
        }
    }
}

struct Loaded {
    model: HomogeneousModel,
    scenario: Option<SimulationConfig>,
}

fn load(src: &Source) -> Result<Loaded, CliError> {
    let (text, scenario) = match (&src.netlist, &src.builtin) {
        (Some(path), None) => (
            fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
            None,
        ),
        (None, Some(name)) => {
            let b = builtin(name)
                .ok_or_else(|| CliError::Usage(format!("unknown built-in circuit `{name}`")))?;
            (b.netlist.to_string(), Some(b.scenario))
        }
        _ => {
            return Err(CliError::Usage(
                "exactly one of --netlist or --builtin is required".into(),
            ))
        }
    };
    let circuit = load_circuit(&text)?;
    let model = assemble(circuit)?;
    Ok(Loaded { model, scenario })
}

fn load_config(path: &Path) -> Result<SimulationConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let cfg: SimulationConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(command: &str, src: &Source, config: Option<&Path>, seed: Option<u64>) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        netlist: src.netlist.as_ref().map(|p| p.display().to_string()),
        builtin: src.builtin.clone(),
        config: config.map(|p| p.display().to_string()),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: Vec::new(),
    }
}

#[derive(Serialize)]
struct AnalyzeReport {
    circuit: String,
    branches: Vec<String>,
    #[serde(flatten)]
    model: ModelReport,
    spanning_tree_count: Option<usize>,
    proper_tree_count: Option<usize>,
    proper_trees: Option<Vec<Vec<String>>>,
    polynomial: Option<PolynomialReport>,
}

pub fn analyze(src: &Source) -> Result<(), CliError> {
    let loaded = load(src)?;
    let model = &loaded.model;
    let g = &model.circuit.graph;
    let names = |t: &Vec<usize>| {
        t.iter()
            .map(|&k| model.ids()[k].clone())
            .collect::<Vec<_>>()
    };
    let spanning = spanning_trees(g).ok().map(|t| t.len());
    let proper = match proper_trees(g) {
        Ok(p) => Some(p),
        Err(GraphError::CapExceeded { .. }) => None,
        Err(e) => return Err(CliError::Circuit(CircuitError::Graph(e))),
    };
    let report = AnalyzeReport {
        circuit: model.circuit.name.clone(),
        branches: model.ids().to_vec(),
        model: model.report(),
        spanning_tree_count: spanning,
        proper_tree_count: proper.as_ref().map(Vec::len),
        proper_trees: proper.as_ref().map(|p| p.iter().map(names).collect()),
        polynomial: model.kirchhoff.as_ref().map(|k| k.report()),
    };
    let mut out = OutDir::create(&src.out)?;
    out.write_json("analyze.json", &report)?;
    out.finish(manifest("analyze", src, None, None))?;
    println!(
        "{}: {} branches, {} proper trees",
        report.circuit,
        report.branches.len(),
        report
            .proper_tree_count
            .map_or("?".to_string(), |c| c.to_string())
    );
    if let Some(p) = &report.polynomial {
        println!("K = {}", p.text);
    }
    Ok(())
}

pub fn simulate(src: &Source, config: Option<&Path>) -> Result<(), CliError> {
    let loaded = load(src)?;
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => loaded.scenario.clone().unwrap_or_default(),
    };
    let tr = integrate(&loaded.model, &cfg)?;
    let mut out = OutDir::create(&src.out)?;
    out.write("trajectory.csv", &trajectory_csv(&tr))?;
    #[derive(Serialize)]
    struct Events<'a> {
        termination: Termination,
        diagnostic: &'a Option<String>,
        branches: &'a [String],
        events: &'a [homcirc::solver::Event],
    }
    out.write_json(
        "events.json",
        &Events {
            termination: tr.termination,
            diagnostic: &tr.diagnostic,
            branches: &tr.ids,
            events: &tr.events,
        },
    )?;
    out.finish(manifest("simulate", src, config, None))?;
    println!(
        "{} samples, {} events, {:?}",
        tr.len(),
        tr.events.len(),
        tr.termination
    );
    if let Some(d) = &tr.diagnostic {
        println!("{d}");
    }
    Ok(())
}

/// `r1,g4,2=1:0` → assignments by branch label.
pub fn parse_assignments(list: &str) -> Result<Vec<(String, Assignment)>, CliError> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((label, val)) = item.split_once('=') {
            let (p, q) = val
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("expected `label=p:q`, got `{item}`")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("bad number in `{item}`")))
            };
            out.push((
                label.trim().to_string(),
                Assignment::Value {
                    p: num(p)?,
                    q: num(q)?,
                },
            ));
        } else if let Some(label) = item.strip_prefix('r') {
            out.push((label.to_string(), Assignment::DivideByP));
        } else if let Some(label) = item.strip_prefix('g') {
            out.push((label.to_string(), Assignment::DivideByQ));
        } else {
            return Err(CliError::Usage(format!(
                "cannot read dehomogenization item `{item}`"
            )));
        }
    }
    Ok(out)
}

pub fn polynomial(src: &Source, dehom: Option<&str>, all_trees: bool) -> Result<(), CliError> {
    let loaded = load(src)?;
    let model = &loaded.model;
    let k = if all_trees {
        kirchhoff_polynomial(&model.circuit.graph, Some(model.ids()))?
    } else {
        match &model.kirchhoff {
            Some(k) => k.clone(),
            None => homcirc::treepoly::proper_k_support(&model.circuit.graph, Some(model.ids()))?,
        }
    };
    #[derive(Serialize)]
    struct PolyOut {
        polynomial: PolynomialReport,
        dehomogenized: Option<String>,
    }
    let dehomogenized = match dehom {
        Some(list) => Some(k.dehomogenize(&parse_assignments(list)?)?.to_string()),
        None => None,
    };
    let report = PolyOut {
        polynomial: k.report(),
        dehomogenized,
    };
    let mut text = format!("{}\n", report.polynomial.text);
    if let Some(d) = &report.dehomogenized {
        text.push_str(d);
        text.push('\n');
    }
    let mut out = OutDir::create(&src.out)?;
    out.write("polynomial.txt", &text)?;
    out.write_json("polynomial.json", &report)?;
    out.finish(manifest("polynomial", src, None, None))?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct LocusOut {
    kind: LocusKind,
    parameter: f64,
    state: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct LineSample {
    parameter: f64,
    state: Vec<f64>,
    eigenvalues: Vec<homcirc::analysis::Eigenvalue>,
}

#[derive(Serialize)]
struct EquilibriumOut {
    state: BTreeMap<String, f64>,
    nullspace_dim: usize,
    residual: f64,
    pencil: PencilLinearization,
    /// For equilibrium lines: position along the unit null direction from
    /// the point of the line closest to the origin.
    line: Option<LineOut>,
}

#[derive(Serialize)]
struct LineOut {
    direction: Vec<f64>,
    loci: Vec<LocusOut>,
    table: Vec<LineSample>,
}

const LINE_SPAN: f64 = 2.0;
const LINE_SAMPLES: usize = 401;

pub fn equilibria(src: &Source, grid: usize, seed: u64) -> Result<(), CliError> {
    let loaded = load(src)?;
    let model = &loaded.model;
    let m = model.dims.m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = vec![vec![0.0; m]];
    for _ in 0..grid {
        seeds.push((0..m).map(|_| rng.gen_range(-2.0..2.0)).collect());
    }
    let eqs = find_equilibria(model, &seeds)?;
    let named = |u: &[f64]| -> BTreeMap<String, f64> {
        model.ids().iter().cloned().zip(u.iter().copied()).collect()
    };
    let mut lines: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut report = Vec::new();
    for eq in &eqs {
        let pencil = linearization_pencil(model, &eq.state)?;
        let mut line = None;
        if eq.nullspace_dim == 1 {
            let dir = null_direction(model, &eq.state);
            let on_known = lines.iter().any(|(base, d)| same_line(base, d, &eq.state));
            if !on_known {
                let s0 = -eq.state.iter().zip(&dir).map(|(u, n)| u * n).sum::<f64>();
                let base = trace_equilibrium_line(model, &eq.state, &[s0])?.remove(0);
                let family = |s: f64| {
                    trace_equilibrium_line(model, &base, &[s])
                        .map(|mut v| v.remove(0))
                        .unwrap_or_else(|_| vec![f64::NAN; m])
                };
                let loci = eigen_loci(model, &family, -LINE_SPAN, LINE_SPAN, LINE_SAMPLES, 1e-12)?
                    .into_iter()
                    .map(|l| LocusOut {
                        kind: l.kind,
                        parameter: l.parameter,
                        state: named(&family(l.parameter)),
                    })
                    .collect();
                let mut table = Vec::new();
                for j in 0..41 {
                    let s = -LINE_SPAN + 2.0 * LINE_SPAN * j as f64 / 40.0;
                    let u = family(s);
                    table.push(LineSample {
                        parameter: s,
                        eigenvalues: linearization_pencil(model, &u)?.eigenvalues,
                        state: u,
                    });
                }
                line = Some(LineOut {
                    direction: dir.clone(),
                    loci,
                    table,
                });
                lines.push((base, dir));
            }
        }
        report.push(EquilibriumOut {
            state: named(&eq.state),
            nullspace_dim: eq.nullspace_dim,
            residual: eq.residual,
            pencil,
            line,
        });
    }
    let mut out = OutDir::create(&src.out)?;
    out.write_json("equilibria.json", &report)?;
    out.finish(manifest("equilibria", src, None, Some(seed)))?;
    for e in &report {
        println!("equilibrium {:?} (nullspace {})", e.state, e.nullspace_dim);
        if let Some(l) = &e.line {
            for p in &l.loci {
                println!("  {:?} locus at {:?}", p.kind, p.state);
            }
        }
    }
    Ok(())
}

fn null_direction(model: &HomogeneousModel, u: &[f64]) -> Vec<f64> {
    let jac = model.algebraic_jacobian(&model.evaluate(u));
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
    let mut n: Vec<f64> = vt.row(kmin).iter().copied().collect();
    if n.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
        n.iter_mut().for_each(|x| *x = -*x);
    }
    n
}

fn same_line(base: &[f64], dir: &[f64], u: &[f64]) -> bool {
    let diff: Vec<f64> = u.iter().zip(base).map(|(a, b)| a - b).collect();
    let along: f64 = diff.iter().zip(dir).map(|(a, n)| a * n).sum();
    diff.iter()
        .zip(dir)
        .all(|(d, n)| (d - along * n).abs() < 1e-6)
}

pub fn validate(src: &Source, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let loaded = load(src)?;
    let cfg = match config {
        Some(p) => Some(load_config(p)?),
        None => loaded.scenario.clone(),
    };
    let report = homcirc::validate::validate(&loaded.model, cfg.as_ref(), seed);
    let mut out = OutDir::create(&src.out)?;
    out.write_json("validation.json", &report)?;
    out.finish(manifest("validate", src, config, Some(seed)))?;
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Validation(failed.join(", ")))
    }
}
