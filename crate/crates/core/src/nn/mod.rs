//! Minimal CPU network building blocks with hand-written backward passes.

mod conv;
pub mod ops;
mod optim;

pub use conv::{crop, pad_to, Conv2d, ConvCache, Padding};
pub use optim::{Adam, Parameters, Sgd};
