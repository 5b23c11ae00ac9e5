//! Event-image fusion depth estimation on a self-contained tensor engine.

pub mod tensor;
