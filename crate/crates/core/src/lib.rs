pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod energy;
pub mod experiments;
pub mod graph;
pub mod layers;
pub mod lif;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod train;
