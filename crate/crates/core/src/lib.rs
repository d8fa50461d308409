//! Differentiable channel search for small CNNs under a memory budget.
//!
//! The engine trains a seed network while learning per-output-channel binary
//! masks, so that the final model lands on a target parameter count while
//! inference operations are co-minimized. Everything runs on a built-in f64
//! tensor engine with reverse-mode autodiff; no external ML runtime.
//!
//! Pipeline: build a seed from a [`graph::NetworkSpec`], warm it up, run the
//! joint weight/mask search against the composite loss, fine-tune with the
//! architecture frozen, and sweep the OPs strength to assemble Pareto fronts
//! per size target.

pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use cost::{exact_counts, ops_cost, size_cost, CostReport, LayerCost};
pub use error::{Error, Result};
pub use graph::{load_network_spec, LayerKind, LayerSpec, NetworkSpec, ResolvedNet};
pub use loss::{composite_loss, compute_lambda, single_reg_loss, LossBreakdown, Metric};
pub use mask::{apply_mask, ste_backward, ChannelMask};
pub use model::{accuracy, build_seed, task_loss, ChannelEntry, Mode, Model};
pub use sweep::{export_architecture, report, run_sweep, ParetoPoint, SweepPlan};
pub use tape::Tape;
pub use tensor::Tensor;
pub use trainer::{
    finetune, run_single, search, split_validation, warmup, EpochRecord, PhaseEpochs, RunResult,
    SearchConfig, SeedStats,
};
