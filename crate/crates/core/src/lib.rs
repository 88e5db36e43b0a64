pub mod audio;
pub mod autograd;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod fixture;
pub mod model;
pub mod trainer;
