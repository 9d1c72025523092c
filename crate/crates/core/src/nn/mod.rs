//! CPU 3D encoder-decoder with hand-written backpropagation.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod optim;
pub mod real;
pub mod segnet;
pub mod simd;
pub mod sliding;

pub use checkpoint::{ModelCheckpoint, Provenance};
pub use loss::{compound_loss, compound_loss_grad, loss_and_logit_grad};
pub use optim::{Adam, AdamConfig};
pub use real::Real;
pub use segnet::{predict_binary, Grads, SegNet, SegNetConfig};
pub use sliding::{sliding_window_predict, sliding_window_probabilities};
