//! The conditional feature generator, the cosine classifier, their
//! hand-written gradients, and momentum SGD.

mod checkpoint;
mod classifier;
mod generator;
mod sgd;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use classifier::{extend_classifier, ClassifierParams, DEFAULT_SCALE, RANDOM_PROTOTYPE_STD};
pub use generator::{default_hidden, Activation, DenseLayer, GenCache, GenGrads, GeneratorParams};
pub use sgd::{sgd_step, sgd_step_classifier, sgd_step_generator, SgdConfig, SgdState};
