//! Line-oriented circuit description format.
//!
//! ```text
//! circuit vdp
//! ground 0
//! node 1
//! branch C kind=capacitor from=1 to=0 model=linear_c C=1
//! branch L kind=inductor  from=0 to=1 model=lapshin m=3 n=3 alpha=0.2 beta=1 gamma=1 delta=0.05
//! branch R kind=resistor  from=1 to=0 model=vcontrolled g="-u+u^3"
//! ```
//!
//! Values may be double-quoted to include spaces. `#` starts a comment
//! outside quotes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{parse_expression, parse_expression_in, ExprError, CONTROLLER_VARS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Capacitor,
    Inductor,
    Memristor,
    Resistor,
}

impl DeviceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "capacitor" => Some(DeviceKind::Capacitor),
            "inductor" => Some(DeviceKind::Inductor),
            "memristor" => Some(DeviceKind::Memristor),
            "resistor" => Some(DeviceKind::Resistor),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Capacitor => "capacitor",
            DeviceKind::Inductor => "inductor",
            DeviceKind::Memristor => "memristor",
            DeviceKind::Resistor => "resistor",
        }
    }

    /// Single-letter block tag (c, l, m, r).
    pub fn tag(self) -> char {
        match self {
            DeviceKind::Capacitor => 'c',
            DeviceKind::Inductor => 'l',
            DeviceKind::Memristor => 'm',
            DeviceKind::Resistor => 'r',
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    #[default]
    Line,
    Circle,
}

impl Domain {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "line" => Some(Domain::Line),
            "circle" => Some(Domain::Circle),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Line => "line",
            Domain::Circle => "circle",
        }
    }
}

/// How a branch participates in a multi-branch device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    None,
    /// Carries the coupled-inductor parameters; `partner` names the other coil.
    CoupledPrimary {
        partner: String,
    },
    /// Second coil of a coupled pair, parameters live on `primary`.
    CoupledSecondary {
        primary: String,
    },
    /// Controlled resistor, driven by `controller`.
    ControlledSource {
        controller: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchRecord {
    pub id: String,
    pub kind: DeviceKind,
    pub tail: u32,
    pub head: u32,
    pub model: String,
    pub params: BTreeMap<String, String>,
    pub psi: Option<String>,
    pub zeta: Option<String>,
    pub domain: Option<Domain>,
    pub line: usize,
}

impl BranchRecord {
    pub fn pairing(&self) -> Pairing {
        match self.model.as_str() {
            "coupled_l" => {
                let partner = self.params.get("partner").cloned().unwrap_or_default();
                if self.params.contains_key("L1") {
                    Pairing::CoupledPrimary { partner }
                } else {
                    Pairing::CoupledSecondary { primary: partner }
                }
            }
            "controlled_src" => Pairing::ControlledSource {
                controller: self.params.get("controller").cloned().unwrap_or_default(),
            },
            _ => Pairing::None,
        }
    }

    /// Numeric parameter (already validated by the parser).
    pub fn number(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(|s| s.parse().ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetlistDocument {
    pub name: String,
    pub ground: u32,
    pub nodes: Vec<u32>,
    pub branches: Vec<BranchRecord>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetlistError {
    #[error("line {line}: malformed line: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate branch id `{id}`")]
    DuplicateBranch { line: usize, id: String },
    #[error("line {line}: undeclared node {node}")]
    UndeclaredNode { line: usize, node: u32 },
    #[error("line {line}: branch `{branch}` connects node {node} to itself")]
    SelfLoop {
        line: usize,
        branch: String,
        node: u32,
    },
    #[error("line {line}: unknown model `{model}`")]
    UnknownModel { line: usize, model: String },
    #[error("line {line}: model `{model}` on branch `{branch}` requires parameter `{param}`")]
    MissingParameter {
        line: usize,
        branch: String,
        model: String,
        param: String,
    },
    #[error("line {line}: invalid value for `{param}` on branch `{branch}`: {message}")]
    InvalidParameter {
        line: usize,
        branch: String,
        param: String,
        message: String,
    },
    #[error("line {line}: expression `{param}` on branch `{branch}`: {source}")]
    Expression {
        line: usize,
        branch: String,
        param: String,
        #[source]
        source: ExprError,
    },
    #[error("line {line}: branch `{branch}`: {message}")]
    Pairing {
        line: usize,
        branch: String,
        message: String,
    },
    #[error("no ground node declared")]
    MissingGround,
    #[error("netlist declares no branches")]
    NoBranches,
}

enum ParamType {
    Number,
    NonNegInt,
    Expr,
    ControllerExpr,
    Choice(&'static [&'static str]),
    BranchRef,
}

/// Parameter table of a catalog model: (name, type, required).
fn model_params(model: &str) -> Option<&'static [(&'static str, ParamType, bool)]> {
    use ParamType::*;
    Some(match model {
        "linear_r" => &[("p", Number, true), ("q", Number, true)],
        "linear_c" => &[("C", Number, true)],
        "linear_l" => &[("L", Number, true)],
        "vcontrolled" => &[("g", Expr, true)],
        "ccontrolled" => &[("r", Expr, true)],
        "param" => &[],
        "lapshin" => &[
            ("m", NonNegInt, true),
            ("n", NonNegInt, true),
            ("alpha", Number, true),
            ("beta", Number, true),
            ("gamma", Number, true),
            ("delta", Number, true),
        ],
        "cubic_memristor" => &[("control", Choice(&["flux", "charge"]), true)],
        // L1/L2/M are required on the primary coil only; checked separately.
        "coupled_l" => &[
            ("L1", Number, false),
            ("L2", Number, false),
            ("M", Number, false),
            ("partner", BranchRef, true),
        ],
        "controlled_src" => &[
            ("p2", Number, true),
            ("q2", Number, true),
            ("f2", ControllerExpr, true),
            ("controller", BranchRef, true),
        ],
        _ => return None,
    })
}

/// Parse and validate a netlist.
pub fn parse_netlist(text: &str) -> Result<NetlistDocument, NetlistError> {
    let mut name: Option<String> = None;
    let mut ground: Option<u32> = None;
    let mut nodes: BTreeSet<u32> = BTreeSet::new();
    let mut raw: Vec<(usize, Vec<String>)> = Vec::new();

    for (ln0, line) in text.lines().enumerate() {
        let ln = ln0 + 1;
        let toks =
            tokenize(line).map_err(|message| NetlistError::Malformed { line: ln, message })?;
        let Some(head) = toks.first() else { continue };
        match head.as_str() {
            "circuit" => {
                if toks.len() != 2 {
                    return Err(malformed(ln, "expected `circuit <name>`"));
                }
                if name.is_some() {
                    return Err(malformed(ln, "circuit name declared twice"));
                }
                name = Some(toks[1].clone());
            }
            "ground" => {
                if toks.len() != 2 {
                    return Err(malformed(ln, "expected `ground <node>`"));
                }
                if ground.is_some() {
                    return Err(malformed(ln, "ground declared twice"));
                }
                let g = parse_node(&toks[1], ln)?;
                ground = Some(g);
                nodes.insert(g);
            }
            "node" => {
                if toks.len() < 2 {
                    return Err(malformed(ln, "expected `node <id>...`"));
                }
                for t in &toks[1..] {
                    nodes.insert(parse_node(t, ln)?);
                }
            }
            "branch" => raw.push((ln, toks)),
            other => return Err(malformed(ln, &format!("unknown directive `{other}`"))),
        }
    }

    let ground = ground.ok_or(NetlistError::MissingGround)?;
    let mut branches: Vec<BranchRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (ln, toks) in raw {
        let rec = parse_branch(ln, &toks)?;
        if !seen.insert(rec.id.clone()) {
            return Err(NetlistError::DuplicateBranch {
                line: ln,
                id: rec.id,
            });
        }
        for node in [rec.tail, rec.head] {
            if !nodes.contains(&node) {
                return Err(NetlistError::UndeclaredNode { line: ln, node });
            }
        }
        if rec.tail == rec.head {
            return Err(NetlistError::SelfLoop {
                line: ln,
                branch: rec.id,
                node: rec.tail,
            });
        }
        branches.push(rec);
    }
    if branches.is_empty() {
        return Err(NetlistError::NoBranches);
    }
    check_pairings(&branches)?;

    Ok(NetlistDocument {
        name: name.unwrap_or_else(|| "unnamed".to_string()),
        ground,
        nodes: nodes.into_iter().collect(),
        branches,
    })
}

fn malformed(line: usize, message: &str) -> NetlistError {
    NetlistError::Malformed {
        line,
        message: message.to_string(),
    }
}

fn parse_node(t: &str, line: usize) -> Result<u32, NetlistError> {
    t.parse::<u32>().map_err(|_| {
        malformed(
            line,
            &format!("node id `{t}` is not a non-negative integer"),
        )
    })
}

/// Split on whitespace, honouring double quotes inside tokens
/// (`psi="a b"` is one token `psi=a b`). Comments start at an unquoted `#`.
fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut toks = Vec::new();
    let mut cur = String::new();
    let mut in_tok = false;
    let mut quoted = false;
    for c in line.chars() {
        if quoted {
            if c == '"' {
                quoted = false;
            } else {
                cur.push(c);
            }
            continue;
        }
        match c {
            '#' => break,
            '"' => {
                quoted = true;
                in_tok = true;
            }
            c if c.is_whitespace() => {
                if in_tok {
                    toks.push(std::mem::take(&mut cur));
                    in_tok = false;
                }
            }
            c => {
                cur.push(c);
                in_tok = true;
            }
        }
    }
    if quoted {
        return Err("unterminated quote".into());
    }
    if in_tok {
        toks.push(cur);
    }
    Ok(toks)
}

fn parse_branch(ln: usize, toks: &[String]) -> Result<BranchRecord, NetlistError> {
    if toks.len() < 2 || toks[1].contains('=') {
        return Err(malformed(ln, "expected `branch <id> key=value...`"));
    }
    let id = toks[1].clone();
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for t in &toks[2..] {
        let Some((k, v)) = t.split_once('=') else {
            return Err(malformed(ln, &format!("expected key=value, found `{t}`")));
        };
        if k.is_empty() {
            return Err(malformed(ln, &format!("empty key in `{t}`")));
        }
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(malformed(ln, &format!("key `{k}` given twice")));
        }
    }
    let mut take = |key: &str| kv.remove(key);
    let kind_s = take("kind").ok_or_else(|| malformed(ln, "branch needs kind="))?;
    let kind = DeviceKind::parse(&kind_s)
        .ok_or_else(|| malformed(ln, &format!("unknown kind `{kind_s}`")))?;
    let tail_s = take("from").ok_or_else(|| malformed(ln, "branch needs from="))?;
    let head_s = take("to").ok_or_else(|| malformed(ln, "branch needs to="))?;
    let tail = parse_node(&tail_s, ln)?;
    let head = parse_node(&head_s, ln)?;
    let model = take("model").ok_or_else(|| malformed(ln, "branch needs model="))?;
    let psi = take("psi");
    let zeta = take("zeta");
    let domain = match take("domain") {
        None => None,
        Some(d) => Some(
            Domain::parse(&d).ok_or_else(|| NetlistError::InvalidParameter {
                line: ln,
                branch: id.clone(),
                param: "domain".into(),
                message: format!("expected line or circle, found `{d}`"),
            })?,
        ),
    };

    let table = model_params(&model).ok_or_else(|| NetlistError::UnknownModel {
        line: ln,
        model: model.clone(),
    })?;
    for key in kv.keys() {
        if !table.iter().any(|(k, _, _)| k == key) {
            return Err(NetlistError::InvalidParameter {
                line: ln,
                branch: id.clone(),
                param: key.clone(),
                message: format!("not a parameter of model `{model}`"),
            });
        }
    }
    let missing = |param: &str| NetlistError::MissingParameter {
        line: ln,
        branch: id.clone(),
        model: model.clone(),
        param: param.to_string(),
    };
    let invalid = |param: &str, message: String| NetlistError::InvalidParameter {
        line: ln,
        branch: id.clone(),
        param: param.to_string(),
        message,
    };
    for (key, ty, required) in table {
        let Some(val) = kv.get(*key) else {
            if *required {
                return Err(missing(key));
            }
            continue;
        };
        match ty {
            ParamType::Number => {
                let x: f64 = val
                    .parse()
                    .map_err(|_| invalid(key, format!("`{val}` is not a number")))?;
                if !x.is_finite() {
                    return Err(invalid(key, "must be finite".into()));
                }
            }
            ParamType::NonNegInt => {
                val.parse::<u32>()
                    .map_err(|_| invalid(key, format!("`{val}` is not a non-negative integer")))?;
            }
            ParamType::Expr => {
                parse_expression(val).map_err(|source| NetlistError::Expression {
                    line: ln,
                    branch: id.clone(),
                    param: key.to_string(),
                    source,
                })?;
            }
            ParamType::ControllerExpr => {
                parse_expression_in(val, CONTROLLER_VARS).map_err(|source| {
                    NetlistError::Expression {
                        line: ln,
                        branch: id.clone(),
                        param: key.to_string(),
                        source,
                    }
                })?;
            }
            ParamType::Choice(opts) => {
                if !opts.contains(&val.as_str()) {
                    return Err(invalid(key, format!("expected one of {opts:?}")));
                }
            }
            ParamType::BranchRef => {
                if val.is_empty() {
                    return Err(invalid(key, "empty branch reference".into()));
                }
            }
        }
    }
    if model == "param" {
        for (key, val) in [("psi", &psi), ("zeta", &zeta)] {
            let Some(text) = val else {
                return Err(missing(key));
            };
            parse_expression(text).map_err(|source| NetlistError::Expression {
                line: ln,
                branch: id.clone(),
                param: key.to_string(),
                source,
            })?;
        }
    } else if psi.is_some() || zeta.is_some() {
        return Err(invalid(
            if psi.is_some() { "psi" } else { "zeta" },
            format!("explicit characteristics are only accepted by model `param`, not `{model}`"),
        ));
    }
    Ok(BranchRecord {
        id,
        kind,
        tail,
        head,
        model,
        params: kv,
        psi,
        zeta,
        domain,
        line: ln,
    })
}

fn check_pairings(branches: &[BranchRecord]) -> Result<(), NetlistError> {
    let find = |id: &str| branches.iter().find(|b| b.id == id);
    for b in branches {
        let err = |message: String| NetlistError::Pairing {
            line: b.line,
            branch: b.id.clone(),
            message,
        };
        match b.pairing() {
            Pairing::None => {}
            Pairing::CoupledPrimary { partner } => {
                if b.kind != DeviceKind::Inductor {
                    return Err(err("coupled_l must be declared on inductors".into()));
                }
                for k in ["L2", "M"] {
                    if !b.params.contains_key(k) {
                        return Err(NetlistError::MissingParameter {
                            line: b.line,
                            branch: b.id.clone(),
                            model: b.model.clone(),
                            param: k.into(),
                        });
                    }
                }
                let Some(p) = find(&partner) else {
                    return Err(err(format!("partner `{partner}` does not exist")));
                };
                if p.id == b.id {
                    return Err(err("an inductor cannot be coupled to itself".into()));
                }
                if p.kind != DeviceKind::Inductor || p.model != "coupled_l" {
                    return Err(err(format!(
                        "partner `{partner}` must be an inductor with model=coupled_l"
                    )));
                }
                if p.params.contains_key("L1") {
                    return Err(err(format!(
                        "both `{}` and `{partner}` carry coupling parameters",
                        b.id
                    )));
                }
                if p.params.get("partner") != Some(&b.id) {
                    return Err(err(format!("partner `{partner}` does not point back")));
                }
            }
            Pairing::CoupledSecondary { primary } => {
                if b.params.contains_key("L2") || b.params.contains_key("M") {
                    return Err(err("L2/M given without L1".into()));
                }
                let ok = find(&primary)
                    .is_some_and(|p| p.model == "coupled_l" && p.params.contains_key("L1"));
                if !ok {
                    return Err(err(format!(
                        "coupled pair `{}`/`{primary}` has no coupling parameters",
                        b.id
                    )));
                }
            }
            Pairing::ControlledSource { controller } => {
                if b.kind != DeviceKind::Resistor {
                    return Err(err("controlled_src must be declared on a resistor".into()));
                }
                let Some(c) = find(&controller) else {
                    return Err(err(format!("controller `{controller}` does not exist")));
                };
                if c.id == b.id {
                    return Err(err("a source cannot control itself".into()));
                }
                if c.kind != DeviceKind::Resistor
                    || matches!(c.model.as_str(), "controlled_src" | "coupled_l")
                {
                    return Err(err(format!(
                        "controller `{controller}` must be a plain resistor"
                    )));
                }
            }
        }
    }
    Ok(())
}

impl NetlistDocument {
    /// Render back to the netlist format; parsing the result yields an
    /// equal document (up to line numbers).
    pub fn to_text(&self) -> String {
        let mut s = format!("circuit {}\nground {}\n", self.name, self.ground);
        let others: Vec<String> = self
            .nodes
            .iter()
            .filter(|&&n| n != self.ground)
            .map(|n| n.to_string())
            .collect();
        if !others.is_empty() {
            s.push_str(&format!("node {}\n", others.join(" ")));
        }
        for b in &self.branches {
            s.push_str(&format!(
                "branch {} kind={} from={} to={} model={}",
                b.id, b.kind, b.tail, b.head, b.model
            ));
            for (k, v) in &b.params {
                s.push_str(&format!(" {k}={}", quote(v)));
            }
            if let Some(p) = &b.psi {
                s.push_str(&format!(" psi={}", quote(p)));
            }
            if let Some(z) = &b.zeta {
                s.push_str(&format!(" zeta={}", quote(z)));
            }
            if let Some(d) = b.domain {
                s.push_str(&format!(" domain={}", d.as_str()));
            }
            s.push('\n');
        }
        s
    }

    pub fn branch(&self, id: &str) -> Option<&BranchRecord> {
        self.branches.iter().find(|b| b.id == id)
    }
}

fn quote(v: &str) -> String {
    if v.chars().any(|c| c.is_whitespace() || c == '#') {
        format!("\"{v}\"")
    } else {
        v.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VDP: &str = "\
circuit vdp
ground 0
node 1
branch C kind=capacitor from=1 to=0 model=linear_c C=1
branch L kind=inductor from=0 to=1 model=lapshin m=3 n=3 alpha=0.2 beta=1 gamma=1 delta=0.05 domain=circle
branch R kind=resistor from=1 to=0 model=vcontrolled g=\"-u + u^3\"   # cubic
";

    #[test]
    fn parallel_vdp() {
        let d = parse_netlist(VDP).unwrap();
        assert_eq!(d.name, "vdp");
        assert_eq!(d.nodes, vec![0, 1]);
        assert_eq!(d.branches.len(), 3);
        assert_eq!(d.branches[2].params["g"], "-u + u^3");
        assert_eq!(d.branches[1].domain, Some(Domain::Circle));
    }

    #[test]
    fn undeclared_node() {
        let text = VDP.replace("from=1 to=0 model=linear_c", "from=7 to=0 model=linear_c");
        let e = parse_netlist(&text).unwrap_err();
        assert_eq!(e, NetlistError::UndeclaredNode { line: 4, node: 7 });
        assert!(e.to_string().contains("undeclared node"));
    }

    #[test]
    fn duplicate_and_missing() {
        let text = format!("{VDP}branch R kind=resistor from=1 to=0 model=linear_r p=1 q=1\n");
        assert!(matches!(
            parse_netlist(&text),
            Err(NetlistError::DuplicateBranch { line: 7, .. })
        ));
        let text = VDP.replace(" C=1", "");
        assert!(matches!(
            parse_netlist(&text),
            Err(NetlistError::MissingParameter { ref param, .. }) if param == "C"
        ));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = VDP.replace("node 1", "node one");
        assert!(matches!(
            parse_netlist(&text),
            Err(NetlistError::Malformed { line: 3, .. })
        ));
        let text = VDP.replace("g=\"-u + u^3\"", "g=\"-u + u^3");
        assert!(matches!(
            parse_netlist(&text),
            Err(NetlistError::Malformed { line: 6, .. })
        ));
        let text = VDP.replace("g=\"-u + u^3\"", "g=\"-u + w\"");
        assert!(matches!(
            parse_netlist(&text),
            Err(NetlistError::Expression { line: 6, .. })
        ));
        let text = VDP.replace("from=1 to=0 model=linear_c", "from=1 to=1 model=linear_c");
        assert!(matches!(
            parse_netlist(&text),
            Err(NetlistError::SelfLoop { .. })
        ));
    }

    #[test]
    fn coupled_pair_rules() {
        let base = "ground 0\nnode 1 2\n\
            branch A kind=inductor from=1 to=0 model=coupled_l L1=1 L2=2 M=0.5 partner=B\n\
            branch B kind=inductor from=2 to=0 model=coupled_l partner=A\n\
            branch R kind=resistor from=1 to=2 model=linear_r p=1 q=1\n";
        let d = parse_netlist(base).unwrap();
        assert_eq!(
            d.branches[0].pairing(),
            Pairing::CoupledPrimary {
                partner: "B".into()
            }
        );
        assert_eq!(
            d.branches[1].pairing(),
            Pairing::CoupledSecondary {
                primary: "A".into()
            }
        );
        let both = base.replace("partner=A", "L1=1 L2=1 M=0 partner=A");
        assert!(matches!(
            parse_netlist(&both),
            Err(NetlistError::Pairing { .. })
        ));
        let neither = base.replace("L1=1 L2=2 M=0.5 ", "");
        assert!(matches!(
            parse_netlist(&neither),
            Err(NetlistError::Pairing { .. })
        ));
    }

    #[test]
    fn to_text_round_trip() {
        let d = parse_netlist(VDP).unwrap();
        let again = parse_netlist(&d.to_text()).unwrap();
        assert_eq!(d.branches.len(), again.branches.len());
        for (a, b) in d.branches.iter().zip(&again.branches) {
            assert_eq!(
                (a.id.as_str(), &a.params, a.domain),
                (b.id.as_str(), &b.params, b.domain)
            );
        }
    }
}
