//! Constraint-masked trajectory generation on a 3D lattice.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithmic piece:
//!
//! - [`lattice`]: integer cell coordinates, bounded workspaces with obstacle
//!   masks, Manhattan adjacency and millimetre voxelization.
//! - [`taskgrid`]: the task DAG ("what") and the context features it compiles to.
//! - [`corpus`]: breadth-first oracle paths, seeded corpus synthesis and the
//!   deterministic train/validation split.
//! - [`model`]: a causal transformer over lattice prefixes with a 7-way move
//!   head, the composite training loss and the optimizers.
//! - [`decoder`]: legality-masked greedy and beam decoding.
//! - [`evaluator`]: stepwise accuracy, coordinate precision/recall/F1, valid
//!   path percent and the residual error taxonomy.
//! - [`twinsim`]: the lattice episode simulator that compiles paths into
//!   approach/engage/transport/release phases and recovers from perturbations.
//!
//! File formats, checkpoints, training orchestration and the command line
//! live in the companion `pathgrid` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod evaluator;
pub mod lattice;
pub mod model;
pub mod rng;
pub mod taskgrid;
pub mod twinsim;

pub use corpus::{CorpusRecord, GenerationConfig, SplitTag, Trajectory};
pub use decoder::{DecodeConfig, DecodeMode, DecodedPath, Termination};
pub use evaluator::EvalReport;

pub use lattice::{CellBox, LatticeCoord, Move, Workspace};
pub use model::{LossBreakdown, LossConfig, ModelConfig, PathModel, StepLogits};
pub use taskgrid::{TaskContext, TaskGraph, TaskKind, TaskNode};
