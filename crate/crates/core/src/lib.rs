//! Neural AC-OPF proxies trained through an embedded fast-decoupled power
//! flow, with implicit gradients and batch-mean Jacobian estimation.

pub mod augment;
pub mod cases;
pub mod error;
pub mod eval;
pub mod grid;
pub mod jacobian;
pub mod opf;
pub mod powerflow;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{parse_case, Branch, Bus, BusKind, BusPartition, CostPoly, Generator, Network};
pub use jacobian::Mode;
pub use powerflow::{BranchFlows, FdpfSolver, PFState, SplitVectors};
