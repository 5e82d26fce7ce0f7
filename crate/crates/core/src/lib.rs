pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod scoring;
pub mod tensor;
pub mod train;
pub mod vocab;
