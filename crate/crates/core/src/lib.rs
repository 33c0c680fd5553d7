//! Condensation of bipartite user-item interaction graphs into small graphs
//! of representative users and items, and top-K recommendation trained on
//! the condensed graph.

pub mod autodiff;
pub mod condense;
pub mod condensed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod recommend;
pub mod relay;

pub use error::{Error, Result};
