//! Numerical kernels on [`Tensor`](crate::Tensor).

pub mod activation;
pub mod conv;
pub mod layout;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod strip;

pub use activation::{gelu, softmax_axis};
pub use conv::conv2d;
pub use layout::{concat, permute, slice, split};
pub use linear::linear;
pub use norm::{batch_norm2d, grn, NormMode};
pub use pool::global_avg_pool;
pub use strip::{axial_mlp, strip_mix, StripAxis};
