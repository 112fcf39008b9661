//! Potential theory of tree and ultrametric matrices.

pub mod bracket;
pub mod chain;
pub mod error;
pub mod fixtures;
pub mod martin;
pub mod matrix;
pub mod measure;
pub mod process;
pub mod report;
pub mod stats;
pub mod tree;
pub mod ultra;
pub mod walk;
pub mod weights;

pub use bracket::Bracket;
pub use error::{Error, ErrorKind, Result};
pub use matrix::RootMode;
pub use tree::{BoundaryRay, NodeId, RootedTree, TreeSpec};
pub use weights::WeightSequence;
