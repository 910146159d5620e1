//! Small CPU network library: layers with hand-written gradients, losses,
//! Adam and a best-by-validation training loop.

mod layers;
mod loss;
mod network;
mod optim;
mod tensor;
mod train;

pub mod gradcheck;

pub use layers::{softmax, LayerSpec, Param};
pub use loss::{mae, mae_per_example, mse, mse_to_zero, softmax_cross_entropy};
pub use network::Network;
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
pub use train::{train, write_log, EpochLog, Objective, TrainConfig, TrainOutcome};
