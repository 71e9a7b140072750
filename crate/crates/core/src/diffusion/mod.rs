pub mod codec;
pub mod context;
pub mod schedule;
pub mod train;
pub mod sampler;
