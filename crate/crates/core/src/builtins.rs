//! Named example circuits with their default simulation scenarios.

use std::collections::BTreeMap;

use crate::solver::SimulationConfig;

pub const VDP_LAPSHIN: &str = "\
circuit vdp_lapshin
# Van der Pol oscillator whose inductor follows a Lapshin hysteresis loop.
ground 0
node 1
branch C kind=capacitor from=1 to=0 model=linear_c C=0.15
branch L kind=inductor from=0 to=1 model=lapshin m=3 n=3 alpha=0.2 beta=1 gamma=1 delta=0.05 domain=circle
branch R kind=resistor from=1 to=0 model=vcontrolled g=\"-u+u^3\"
";

pub const VDP_CUBIC: &str = "\
circuit vdp_cubic
ground 0
node 1
branch C kind=capacitor from=1 to=0 model=linear_c C=1
branch L kind=inductor from=0 to=1 model=linear_l L=1
branch R kind=resistor from=1 to=0 model=vcontrolled g=\"-u+u^3\"
";

/// Current-controlled cubic resistor: the constraint can fold (ζ_r′ = 0).
pub const VDP_CCONTROLLED: &str = "\
circuit vdp_ccontrolled
ground 0
node 1
branch C kind=capacitor from=1 to=0 model=linear_c C=1
branch L kind=inductor from=0 to=1 model=linear_l L=1
branch R kind=resistor from=1 to=0 model=ccontrolled r=\"-u+u^3\"
";

/// Two resistively coupled Murali–Lakshmanan–Chua cells (C = L = 1).
/// Resistors 2 and 4 are the nonlinear elements.
pub const MLC_COUPLED: &str = "\
circuit mlc_coupled
ground 0
# 1 = x1, 2 = y1, 3 = x2, 4 = y2
node 1 2 3 4
branch C1 kind=capacitor from=1 to=0 model=linear_c C=1
branch C2 kind=capacitor from=3 to=0 model=linear_c C=1
branch L1 kind=inductor from=1 to=2 model=linear_l L=1
branch L2 kind=inductor from=3 to=4 model=linear_l L=1
branch 1 kind=resistor from=2 to=0 model=linear_r p=1 q=1
branch 2 kind=resistor from=1 to=2 model=vcontrolled g=\"-0.5*u+0.1*u^3\"
branch 3 kind=resistor from=4 to=0 model=linear_r p=1 q=1
branch 4 kind=resistor from=3 to=4 model=vcontrolled g=\"-0.5*u+0.1*u^3\"
branch 5 kind=resistor from=2 to=4 model=linear_r p=1 q=1
";

pub const MC_FLUX: &str = "\
circuit mc_flux
ground 0
node 1
branch M kind=memristor from=1 to=0 model=cubic_memristor control=flux
branch C kind=capacitor from=0 to=1 model=linear_c C=1
";

pub const MC_CHARGE: &str = "\
circuit mc_charge
ground 0
node 1
branch M kind=memristor from=1 to=0 model=cubic_memristor control=charge
branch C kind=capacitor from=0 to=1 model=linear_c C=1
";

pub const RC_LINEAR: &str = "\
circuit rc_linear
ground 0
node 1
branch C kind=capacitor from=1 to=0 model=linear_c C=1
branch R kind=resistor from=1 to=0 model=linear_r p=1 q=1
";

/// Same loop with a short in place of the resistor (q = 0).
pub const RC_SHORT: &str = "\
circuit rc_short
ground 0
node 1
branch C kind=capacitor from=1 to=0 model=linear_c C=1
branch R kind=resistor from=1 to=0 model=linear_r p=1 q=0
";

/// A current source feeding two opposed square-law devices in series: the
/// constraint set is empty, so consistent initialization must fail.
pub const OPPOSED_DIODES: &str = "\
circuit opposed_diodes
ground 0
node 1 2 3
branch C kind=capacitor from=3 to=0 model=linear_c C=1
branch S kind=resistor from=0 to=1 model=param psi=\"2\" zeta=\"u\"
branch D1 kind=resistor from=1 to=2 model=param psi=\"u^2\" zeta=\"u\"
branch D2 kind=resistor from=3 to=2 model=param psi=\"u^2\" zeta=\"u\"
";

pub const NAMES: [&str; 5] = [
    "vdp_lapshin",
    "mlc_coupled",
    "mc_flux",
    "mc_charge",
    "rc_linear",
];

#[derive(Debug, Clone)]
pub struct Builtin {
    pub name: &'static str,
    pub netlist: &'static str,
    pub scenario: SimulationConfig,
}

fn initial(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

pub fn builtin(name: &str) -> Option<Builtin> {
    let base = SimulationConfig::default();
    let (netlist, scenario) = match name {
        "vdp_lapshin" => (
            VDP_LAPSHIN,
            SimulationConfig {
                t_end: 3.52,
                max_step: 5e-3,
                singular_capture_tol: 0.05,
                initial: initial(&[("C", 0.5), ("L", -1.805), ("R", 0.5)]),
                ..base
            },
        ),
        "vdp_cubic" => (
            VDP_CUBIC,
            SimulationConfig {
                t_end: 5.0,
                initial: initial(&[("C", 0.5), ("L", 0.0), ("R", 0.5)]),
                ..base
            },
        ),
        "vdp_ccontrolled" => (
            VDP_CCONTROLLED,
            SimulationConfig {
                t_end: 5.0,
                initial: initial(&[("C", 1.5), ("L", 0.0), ("R", 1.4)]),
                ..base
            },
        ),
        "mlc_coupled" => (
            MLC_COUPLED,
            SimulationConfig {
                t_end: 2.0,
                initial: initial(&[("C1", 0.1), ("C2", -0.1), ("L1", 0.0), ("L2", 0.05)]),
                ..base
            },
        ),
        "mc_flux" => (
            MC_FLUX,
            SimulationConfig {
                t_end: 2.0,
                initial: initial(&[("M", 0.2), ("C", 0.5)]),
                ..base
            },
        ),
        "mc_charge" => (
            MC_CHARGE,
            SimulationConfig {
                t_end: 1.0,
                initial: initial(&[("M", 1.0), ("C", 0.3)]),
                ..base
            },
        ),
        "rc_linear" => (
            RC_LINEAR,
            SimulationConfig {
                t_end: 1.0,
                initial: initial(&[("C", 1.0)]),
                ..base
            },
        ),
        "rc_short" => (
            RC_SHORT,
            SimulationConfig {
                initial: initial(&[("C", 1.0)]),
                ..base
            },
        ),
        "opposed_diodes" => (
            OPPOSED_DIODES,
            SimulationConfig {
                initial: initial(&[("C", 0.1)]),
                ..base
            },
        ),
        _ => return None,
    };
    let name = [
        "vdp_lapshin",
        "vdp_cubic",
        "vdp_ccontrolled",
        "mlc_coupled",
        "mc_flux",
        "mc_charge",
        "rc_linear",
        "rc_short",
        "opposed_diodes",
    ]
    .into_iter()
    .find(|n| *n == name)?;
    Some(Builtin {
        name,
        netlist,
        scenario,
    })
}
