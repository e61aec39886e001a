pub mod automaton;
pub mod conditional;
pub mod dataset;
pub mod error;
pub mod equivalence;
pub mod estimation;
pub mod fixtures;
mod graph;
pub mod inference;
pub mod io;
pub mod ingest;
pub mod merging;
pub mod selection;

pub use automaton::{Apfa, Edge, StateId, Symbol};
pub use dataset::{Covariate, Dataset};
pub use error::{Error, ErrorKind, Result};
pub use estimation::{fit_mle, FittedApfa};
pub use graph::EdgeStats;
pub use ingest::{sample_apfa, sample_tree, CountedApfa, SampleTree};
