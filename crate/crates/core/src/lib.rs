pub mod data;
pub mod grading;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod segnet;
pub mod transfer;
