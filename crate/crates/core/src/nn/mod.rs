//! Dense tensors and the handful of layers the classifier needs, with
//! hand-written backward passes, SGD and a finite-difference checker.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod sequential;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_gradcheck, GradCheckReport, Objective};
pub use layers::{BatchNorm2d, Cache, Conv2d, Layer, Linear, Mode, Param};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use optim::{Sgd, SgdConfig};
pub use sequential::Sequential;
pub use tensor::{matmul, Scalar, Tensor};
