pub mod distill;
pub mod error;
pub mod fed;
pub mod harness;
pub mod rng;
pub mod tensor;
pub mod subfm;
pub mod transformer;
