//! Balance Adversarial Training and robust-fairness analysis.
//!
//! A small define-by-run autodiff engine, MLP/CNN classifiers, ℓ∞ PGD and
//! boundary-example search, the PGD-AT, TRADES and BAT trainers, and
//! per-class error, attack-step and target-class diagnostics.

pub mod analysis;
pub mod attack;
pub mod autograd;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use analysis::{
    class_errors, confusion_matrix, fairness_report, spearman, target_distribution, trace_dataset, ClassErrors,
    ConfusionMatrix, Diagnostics, EvalOptions, FairnessReport, TargetDistribution,
};
pub use attack::{
    attack_step_count, boundary_search, boundary_search_batch, pgd, project_linf, AttackConfig, AttackLoss,
    BoundaryBatch, BoundaryPair, NoiseKey, StepRule,
};
pub use autograd::{Graph, Var};
pub use data::{batches, filter_classes, gen_mixture, load_dataset, save_dataset, Batch, Dataset, MixtureSpec};
pub use error::{Error, Result};
pub use model::{init_model, Model, ModelSpec};
pub use optim::{sgd_step, OptimizerState, Param, SgdConfig};
pub use tensor::Tensor;
pub use train::{train, train_model, Method, TargetOperands, TrainConfig, TrainHistory};
