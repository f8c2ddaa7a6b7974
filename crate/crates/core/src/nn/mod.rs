//! Tiny pre-norm encoder–decoder transformer with hand-written gradients.

mod config;
mod decode;
mod kernels;
mod layers;
mod model;
mod optim;
mod state;
mod train;

pub use config::ModelConfig;
pub use decode::greedy_decode;
pub use model::{backward, forward_loss, Gradients};
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use state::{init_model, parameter_shapes, ModelState};
pub use train::{train_steps, TrainOutcome};
