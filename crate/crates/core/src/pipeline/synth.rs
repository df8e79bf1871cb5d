//! Synthetic stand-ins for dense image features.
//!
//! Channel `c` at a face pixel is `sin(omega_c * <n_c, x(p)> + phi_c)`, where
//! `x(p)` is the surface position carried to the pixel by the same scatter
//! and inverse-distance fill that builds `f_S`. Background pixels hold a
//! per-channel constant.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::featuremap::{assemble, VertexEmbeddings};
use crate::frame::FrameGeometry;
use crate::geometry::TriMesh;
use crate::plane::FeaturePlane;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthChannel {
    pub omega: f64,
    pub direction: Vector3<f64>,
    pub phase: f64,
    pub background: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub channels: Vec<SynthChannel>,
}

impl SynthSpec {
    pub fn from_seed(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = (0..channels)
            .map(|_| {
                let mut d;
                loop {
                    d = Vector3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    if d.norm() > 1e-6 {
                        break;
                    }
                }
                SynthChannel {
                    omega: rng.gen_range(1.0..2.5),
                    direction: d.normalize(),
                    phase: rng.gen_range(0.0..TAU),
                    background: rng.gen_range(-0.5..0.5),
                }
            })
            .collect();
        SynthSpec { channels }
    }

    /// Feature plane for one cached frame of `mesh`.
    pub fn render(&self, mesh: &TriMesh, frame: &FrameGeometry) -> Result<FeaturePlane<f64>> {
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("synthetic spec has no channels".into()));
        }
        let rows: Vec<f64> = mesh.vertices().iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let positions = VertexEmbeddings::new(mesh.vertex_count(), 3, rows, vec![0.0; 3])?;
        let x = assemble::<f64>(frame, &positions)?;
        let mut face = vec![true; frame.height * frame.width];
        for px in frame.background_pixels() {
            face[px.index(frame.width)] = false;
        }
        let c = self.channels.len();
        Ok(FeaturePlane::from_fn(frame.height, frame.width, c, |r, col, ch| {
            let spec = &self.channels[ch];
            if face[r * frame.width + col] {
                let p = x.at(r, col);
                let proj = spec.direction.x * p[0] + spec.direction.y * p[1] + spec.direction.z * p[2];
                (spec.omega * proj + spec.phase).sin()
            } else {
                spec.background
            }
        }))
    }
}
