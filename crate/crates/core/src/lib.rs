pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod superevent;
pub mod synth;
pub mod training;
pub mod tsf;
