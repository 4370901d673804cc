pub mod assignment;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod scene;
pub mod spatial;
pub mod targets;
