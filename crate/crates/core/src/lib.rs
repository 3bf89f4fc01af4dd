pub mod autodiff;
pub mod fourier;
pub mod physics;
pub mod sampling;
pub mod classic;
pub mod text;
pub mod model;
pub mod phantom;
pub mod eval;
pub mod train;
pub mod cli;
