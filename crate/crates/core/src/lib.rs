pub mod alignment;
pub mod config;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod loops;
pub mod pipeline;
pub mod pose_graph;
pub mod sim3;
pub mod synthetic;

pub use sim3::{Rotation3, Sim3, Sim3Error, Sim3Tangent};
