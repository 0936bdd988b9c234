//! Training objective, optimizer, schedule and evaluation over Φ.

mod loss;
mod optim;
mod train;

pub use loss::{composite_loss, LossTerms, LossWeights};
pub use optim::{cosine_lr, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    argmax, batch_gradient, evaluate, sample_gradient, train_loop, train_step, BatchOutcome,
    Evaluation, FeatureCache, SampleOutcome, StepMetrics, TrainConfig, TrainOutcome, TrainState,
    METRICS_HEADER,
};
