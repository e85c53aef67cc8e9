//! Heat kernel estimates for jump processes on weighted graphs.

pub mod error;
pub mod graph;
pub mod kernel;
pub mod dirichlet;
pub mod cutoff;
pub mod estimates;
pub mod davies;
pub mod experiment;

pub use error::{Error, Result};
pub use graph::{build_graph, GraphSpec, Vertex, WeightedGraph};
pub use kernel::{KernelKind, MarkovKernel};
