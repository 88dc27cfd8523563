//! Dense `f64` tensors, a reverse-mode tape, and the training plumbing
//! (parameters, archive, optimizer, gradient checks) built on them.

pub mod archive;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use archive::Archive;
pub use gradcheck::{check_fn, check_params, finite_diff_check, GradCheckReport};
pub use params::{Ctx, ParamStore};
pub use rng::RngState;
pub use tape::{concat_rows, sum_all, Gradients, Tape, Var};
pub use tensor::{cosine_similarity, cross_entropy, matmul, softmax, Tensor};
