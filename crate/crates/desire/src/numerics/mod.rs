//! Numeric foundation: tensors, kernels, reverse-mode autodiff, SPD linear
//! algebra, SGD with momentum, and deterministic RNG streams.

pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use kernels::MinMaxInfo;
pub use optim::{cosine_anneal_lr, SgdMomentum};
pub use rng::SeededRng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
