pub mod group;
pub mod avae;
pub mod env;
pub mod nn;
pub mod exact;
pub mod cluster;
pub mod gmavae;
pub mod metrics;
pub mod cli;
