//! Homogeneous-variable modelling of smooth nonlinear circuits.

pub mod analysis;
pub mod builtins;
pub mod circuit;
pub mod devices;
pub mod expr;
pub mod graph;
pub mod homomodel;
pub mod netlist;
pub mod rational;
pub mod solver;
pub mod treepoly;
pub mod validate;
