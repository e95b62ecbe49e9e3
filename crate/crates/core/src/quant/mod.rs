//! Software emulation of FP8 and FP4 training recipes: element formats,
//! per-tensor, blockwise, MXFP8 and NVFP4 scaling, the random Hadamard
//! transform, sharded primary-weight casting and token alignment.

pub mod cast;
pub mod check;
pub mod format;
pub mod rht;
pub mod tensor;

pub use cast::{alignment_pad, primary_weight_cast, Alignment, CastResult, Fragment, SyncStep};
pub use check::{run_checks, QuantCheckReport};
pub use format::FloatFormat;
pub use rht::{rht, rht_inverse};
pub use tensor::{
    dequantize, mxfp8_scale, nvfp4_quantize, quantize, quantize_grouped, BlockGeometry,
    QuantTensor, Recipe, RhtMeta, TensorRole,
};
