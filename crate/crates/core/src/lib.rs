pub mod experiment;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod viz;
