//! Model locking for transformer FFN modules, desk scale.
//!
//! The crate builds up from a small dense linear algebra layer to a toy
//! transformer, locates the FFN block whose features carry emergent
//! outliers, folds a secret group-local permutation into its weights behind
//! a randomized Hadamard rotation, and runs the result bit-faithfully only
//! when a key-controlled Benes switch fabric routes the hidden lanes back.
//! A cycle-level systolic-array simulator checks the hardware story and an
//! attack harness (genetic and gradient-based) probes how much of the key an
//! adversary with oracle access can recover.
//!
//! Numeric code is generic over [`scalar::Scalar`] so every component runs
//! in f32 (deployment width) and f64 (oracle width). The [`Mat`]/[`Mat64`]
//! aliases cover the common cases.

pub mod attack;
pub mod error;
pub mod fabric;
pub mod hwsim;
pub mod linalg;
pub mod locker;
pub mod model;
pub mod outlier;
pub mod rng;
pub mod scalar;

pub use attack::{
    genetic_attack, gradient_attack, hpnn_gradient_attack, jsd, AttackConfig, AttackMethod,
    AttackResult, Guidance, Oracle, TranscriptOracle,
};
pub use error::{Error, Result};
pub use fabric::{BenesFabric, GroupedKey, KeyBits};
pub use hwsim::{locked_layer_sim, systolic_matmul, Dataflow, SimTrace, SystolicConfig};
pub use linalg::DenseMatrix;
pub use locker::{LockPlan, LockSpec, LockedFfn, LockedModel, PlanOptions};
pub use model::{Activation, FfnBlock, FfnKind, SynthConfig, ToyModel};
pub use rng::{Seed, SplitMix64};
pub use scalar::Scalar;

/// Deployment-width dense matrix.
pub type Mat = DenseMatrix<f32>;
/// Oracle-width dense matrix.
pub type Mat64 = DenseMatrix<f64>;
/// Deployment-width model.
pub type Model = ToyModel<f32>;
/// Oracle-width model.
pub type Model64 = ToyModel<f64>;
