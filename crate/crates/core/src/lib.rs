//! Gradient leakage toolkit: recovers the label of a private training example
//! analytically from the gradients it produces on a small convolutional
//! classifier, then reconstructs the example itself by matching gradients.
//!
//! * [`tensor`]: dense tensors, convolution kernels and seeded sampling.
//! * [`model`]: the LeNet-style classifier with first- and second-order
//!   gradients.
//! * [`leakage`]: the sign structure of the logit gradient and label
//!   extraction.
//! * [`attack`]: iDLG and DLG reconstruction loops and their optimizers.
//! * [`data`]: MNIST IDX, CIFAR-100 binary, PPM directory and synthetic
//!   datasets.
//! * [`harness`]: trials, benchmarks, CSV and image output.

pub mod attack;
pub mod data;
pub mod error;
pub mod harness;
pub mod leakage;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Architecture, GradSet, Label, Model};
pub use tensor::{Rng, Tensor};
