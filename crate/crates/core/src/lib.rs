//! Multi-instance partial-label learning with scaled additive attention and a
//! conjugate-label-information loss.
//!
//! Bags of instances are embedded (`model`), pooled by gated attention
//! (`attention`) and classified; training (`trainer`) combines a weighted
//! candidate-mapping loss, a candidate sparsity penalty and a non-candidate
//! inhibition penalty (`losses`). `synth` builds controlled datasets, `eval`
//! runs repeated-split experiments, and `gradcheck` verifies the hand-written
//! backward pass against finite differences.

pub mod attention;
pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod network;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use data::{complement, load_dataset, reduce_bag_maxmin, reduce_bag_mean, Bag, BagView, LabelMask, MiplDataset};
pub use error::{Error, Result};
pub use eval::{accuracy, probability_diagnostics, Diagnostics, EvalSummary, Evaluation, ExperimentConfig};
pub use losses::{
    ce_loss, cli_loss, inhibition_loss, init_weights, mapping_loss, sparsity_loss, update_weights,
    DisambiguationWeights, LossBreakdown, Variant,
};
pub use model::{classify, extract_features, init_params, InstanceFeatures, ModelParams, Psi1Kind};
pub use synth::{generate, SynthConfig};
pub use trainer::{cosine_lr, sgd_step, train, train_with_eval, TrainConfig, TrainReport};
