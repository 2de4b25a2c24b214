//! Elaboration: netlist document → graph + device table.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::devices::{
    catalog, controlled_source_parametrization, coupled_inductor_parametrization, Characteristic,
    DeviceError, DeviceTable, Slot,
};
use crate::expr::{parse_expression, parse_expression_in, ExprError, CONTROLLER_VARS};
use crate::graph::{CircuitGraph, GraphBranch, GraphError};
use crate::netlist::{
    parse_netlist, BranchRecord, DeviceKind, Domain, NetlistDocument, NetlistError, Pairing,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CircuitError {
    #[error(transparent)]
    Parse(#[from] NetlistError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("branch `{branch}`: {source}")]
    Device {
        branch: String,
        #[source]
        source: DeviceError,
    },
    #[error("branch `{branch}`: {source}")]
    Expression {
        branch: String,
        #[source]
        source: ExprError,
    },
}

/// An elaborated circuit. Branch data is held in graph order (capacitors,
/// inductors, memristors, resistors); `ids[k]` is the netlist id of graph
/// branch `k`.
#[derive(Debug, Clone)]
pub struct Circuit {
    pub name: String,
    pub graph: CircuitGraph,
    pub devices: DeviceTable,
    pub ids: Vec<String>,
    /// Netlist node id of each graph node.
    pub node_ids: Vec<u32>,
}

impl Circuit {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|b| b == id)
    }

    pub fn kind(&self, k: usize) -> DeviceKind {
        self.graph.branches()[k].kind
    }

    pub fn branch_count(&self) -> usize {
        self.ids.len()
    }
}

pub fn load_circuit(text: &str) -> Result<Circuit, CircuitError> {
    let doc = parse_netlist(text)?;
    elaborate(&doc)
}

pub fn elaborate(doc: &NetlistDocument) -> Result<Circuit, CircuitError> {
    let node_ids = doc.nodes.clone();
    let node_index: BTreeMap<u32, usize> =
        node_ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let raw: Vec<GraphBranch> = doc
        .branches
        .iter()
        .map(|b| GraphBranch {
            tail: node_index[&b.tail],
            head: node_index[&b.head],
            kind: b.kind,
        })
        .collect();
    let (graph, order) = CircuitGraph::sorted(node_ids.len(), node_index[&doc.ground], raw)?;
    let records: Vec<&BranchRecord> = order.iter().map(|&i| &doc.branches[i]).collect();
    let ids: Vec<String> = records.iter().map(|b| b.id.clone()).collect();
    let pos = |id: &str| {
        ids.iter()
            .position(|x| x == id)
            .expect("validated reference")
    };

    let mut slots: Vec<Option<Slot>> = vec![None; records.len()];
    for (k, rec) in records.iter().enumerate() {
        if rec.pairing() == Pairing::None {
            slots[k] = Some(Slot::Simple(simple_characteristic(rec)?));
        }
    }
    let mut blocks = Vec::new();
    for (k, rec) in records.iter().enumerate() {
        match rec.pairing() {
            Pairing::None | Pairing::CoupledSecondary { .. } => {}
            Pairing::CoupledPrimary { partner } => {
                let j = pos(&partner);
                let l1 = rec.number("L1").unwrap_or(0.0);
                let l2 = rec.number("L2").unwrap_or(0.0);
                let m = rec.number("M").unwrap_or(0.0);
                slots[k] = Some(Slot::Block(blocks.len()));
                slots[j] = Some(Slot::Block(blocks.len()));
                blocks.push(coupled_inductor_parametrization([k, j], l1, l2, m));
            }
            Pairing::ControlledSource { controller } => {
                let j = pos(&controller);
                let ctrl = match &slots[j] {
                    Some(Slot::Simple(c)) => c.clone(),
                    _ => unreachable!("controller validated as plain resistor"),
                };
                let text = &rec.params["f2"];
                let f2 = parse_expression_in(text, CONTROLLER_VARS).map_err(|source| {
                    CircuitError::Expression {
                        branch: rec.id.clone(),
                        source,
                    }
                })?;
                let block = controlled_source_parametrization(
                    j,
                    k,
                    rec.number("p2").unwrap_or(0.0),
                    rec.number("q2").unwrap_or(0.0),
                    f2,
                    ctrl,
                )
                .map_err(|source| CircuitError::Device {
                    branch: rec.id.clone(),
                    source,
                })?;
                slots[k] = Some(Slot::Block(blocks.len()));
                blocks.push(block);
            }
        }
    }
    let slots = slots
        .into_iter()
        .map(|s| s.expect("every branch resolves to a characteristic"))
        .collect();
    Ok(Circuit {
        name: doc.name.clone(),
        graph,
        devices: DeviceTable { slots, blocks },
        ids,
        node_ids,
    })
}

fn simple_characteristic(rec: &BranchRecord) -> Result<Characteristic, CircuitError> {
    let num = |k: &str| rec.number(k).unwrap_or(0.0);
    let ex = |text: &str| {
        parse_expression(text).map_err(|source| CircuitError::Expression {
            branch: rec.id.clone(),
            source,
        })
    };
    let ch = match rec.model.as_str() {
        "linear_r" => catalog::linear(rec.kind, num("p"), num("q")),
        "linear_c" => catalog::linear(rec.kind, num("C"), 1.0),
        "linear_l" => catalog::linear(rec.kind, 1.0, num("L")),
        "vcontrolled" => catalog::vcontrolled(ex(&rec.params["g"])?),
        "ccontrolled" => catalog::ccontrolled(ex(&rec.params["r"])?),
        "param" => catalog::param(
            rec.kind,
            ex(rec.psi.as_deref().unwrap_or_default())?,
            ex(rec.zeta.as_deref().unwrap_or_default())?,
            Domain::Line,
        ),
        "lapshin" => catalog::lapshin(
            rec.params["m"].parse().unwrap_or(0),
            rec.params["n"].parse().unwrap_or(0),
            num("alpha"),
            num("beta"),
            num("gamma"),
            num("delta"),
        ),
        "cubic_memristor" => catalog::cubic_memristor(if rec.params["control"] == "flux" {
            catalog::Control::Flux
        } else {
            catalog::Control::Charge
        }),
        other => unreachable!("model `{other}` validated by the parser"),
    };
    let ch = ch.with_role(rec.kind);
    Ok(match rec.domain {
        Some(d) => ch.with_domain(d),
        None => ch,
    })
}
