pub mod error;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod separation;
pub mod stats;
pub mod profile;
pub mod augment;
pub mod lab;
pub mod seed;
pub mod synth;
pub mod normalize;
pub mod loss;
pub mod bench;
pub mod cli;
