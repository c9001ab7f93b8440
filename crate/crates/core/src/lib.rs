//! Optimal transport densities computed as minimizers of a regularized
//! transport energy.

pub mod cli;
pub mod diagnostics;
pub mod elliptic;
pub mod energy;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod metric;
