//! Dense tensors with tape-based reverse-mode differentiation.

mod archive;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use archive::{decode_archive, encode_archive, read_archive, write_archive, ARCHIVE_MAGIC};
pub use gradcheck::{check_primitive, grad_check, grad_check_params};
pub use kernels::Padding;
pub use params::{ParamStore, Params};
pub use tape::{concat, CustomOp, Gradients, Primitive, PrimitiveKind, Tape, Var};
pub use tensor::Tensor;
