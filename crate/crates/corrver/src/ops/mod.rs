//! Minimal dense kernel layer: bilinear resize, 2D convolution, pooling,
//! normalization, and the finite-difference gradient checker used to verify
//! every hand-written backward pass in the crate.
//!
//! All operations are pure functions with fixed loop nests, so repeated
//! calls on the same inputs produce bitwise-identical outputs.

mod conv2d;
mod gradcheck;
mod norm;
mod pool;
mod resize;

pub use conv2d::{conv2d, conv2d_backward, Conv2dGrads};
pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use norm::{group_norm_backward, group_norm_forward, l2_normalize, GroupNormCtx};
pub use pool::{gem_pool, global_avg_pool, global_avg_pool_backward};
pub use resize::{resize_axes_backward, resize_axes_forward, resize_bilinear, ResizePlan};
