//! Recurrent instance segmentation.
//!
//! A fully convolutional encoder feeds a stack of convolutional LSTMs that is
//! unrolled for several steps over the same feature map. Each step emits one
//! instance mask through a spatial inhibition head (1x1 projection, spatial
//! log-softmax, learned threshold, sigmoid) plus a confidence score used as
//! the stopping signal. Training uses a permutation-invariant loss: predicted
//! and ground-truth masks are matched with the Hungarian algorithm on a
//! relaxed IoU, and the scores are fitted with binary cross entropy.

pub mod checkpoint;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod fcn;
pub mod gradcheck;
pub mod inhibition;
pub mod matchloss;
pub mod metrics;
pub mod model;
pub mod nnops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Gradients, Init, Real, Tape, Tensor, Var};
