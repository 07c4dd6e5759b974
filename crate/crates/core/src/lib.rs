pub mod autodiff;
pub mod coloring;
pub mod crystal;
pub mod dataset;
pub mod equivariance;
pub mod graph;
pub mod model;
pub mod train;
