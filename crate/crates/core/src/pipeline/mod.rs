//! End-to-end orchestration: preprocessing cache, synthetic targets,
//! adaptation, inference and visualization.

pub mod adapt;
pub mod cache;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod synth;
pub mod visualize;

use crate::error::Result;
use crate::geometry::{CameraPose, TriMesh};

/// Radius of the camera ring used by the bundled scenes.
pub const SCENE_RADIUS: f64 = 4.5;

/// Unit icosphere viewed by `count` cameras on a 90 degree arc around it.
pub fn ring_scene(subdivisions: u32, count: usize) -> Result<(TriMesh, Vec<CameraPose>)> {
    let mesh = TriMesh::icosphere(subdivisions);
    let poses = CameraPose::ring(count, SCENE_RADIUS, 90.0, 0.6)?;
    Ok((mesh, poses))
}
