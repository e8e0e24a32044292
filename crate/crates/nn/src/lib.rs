//! Dense building blocks with hand-written backward passes.
//!
//! Every layer is generic over [`Float`] so the same code trains in `f32`
//! and is checked against finite differences in `f64`. Layers keep their
//! forward activations in explicit cache structs; `backward` consumes a cache
//! and the output gradient, optionally accumulating parameter gradients.

pub mod act;
pub mod attention;
pub mod block;
pub mod float;
pub mod layout;
pub mod linear;
pub mod mat;
pub mod norm;
pub mod optim;
pub mod param;

pub use attention::Attention;
pub use block::{Block, BlockSpec, Context};
pub use float::Float;
pub use linear::Linear;
pub use norm::LayerNorm;
pub use optim::Adam;
pub use param::{Module, Param};
