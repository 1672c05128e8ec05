pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;
