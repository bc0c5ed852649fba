#![allow(dead_code)]

pub mod convergence;
pub mod gradcheck;
pub mod metric_oracles;
pub mod schedule;
pub mod toy_flow;
