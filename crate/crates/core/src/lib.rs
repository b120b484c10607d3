//! Sparse window attention backbone, slicing pipeline and cross-slice NMS,
//! with reference implementations and the invariant suite that checks them.

pub mod attention;
pub mod backbone;
pub mod cnms;
pub mod error;
pub mod flops;
pub mod reference;
pub mod slicer;
pub mod sparsify;
pub mod tensor;
pub mod verify;
pub mod windowing;

pub use error::{Error, Result};
