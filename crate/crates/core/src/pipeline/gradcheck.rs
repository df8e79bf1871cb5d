//! Finite-difference check of the full training objective on a tiny scene.

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frame::{FrameGeometry, GeometryParams};
use crate::geometry::{make_intrinsics, CameraPose, TriMesh};
use crate::optim::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::pipeline::model::{AdapterModel, Sample};
use crate::plane::FeaturePlane;
use crate::registers::LossWeights;
use crate::visibility::Bvh;

pub const DESK_GRID: usize = 8;
pub const DESK_DIM: usize = 6;
pub const DESK_DIM_OUT: usize = 4;
pub const DESK_K: usize = 3;
pub const DESK_RANK: usize = 2;

/// Icosahedron seen from two poses, with random source and target planes
/// and a head whose `B` factor is already non-zero.
pub struct DeskInstance {
    pub mesh: TriMesh,
    pub frames: Vec<FrameGeometry>,
    pub f_src: FeaturePlane<f64>,
    pub targets: Vec<FeaturePlane<f64>>,
    pub model: AdapterModel,
    pub weights: LossWeights,
}

impl DeskInstance {
    pub fn new(seed: u64) -> Result<Self> {
        let mesh = TriMesh::icosphere(0);
        let bvh = Bvh::build(&mesh)?;
        let intr = make_intrinsics(DESK_GRID, DESK_GRID, 60.0)?;
        let params = GeometryParams { alpha: 0.065, k: DESK_K };
        let poses = [
            CameraPose::look_at(Point3::new(0.3, 0.4, 3.0), Point3::origin(), nalgebra::Vector3::y())?,
            CameraPose::look_at(Point3::new(-1.5, 0.2, 2.6), Point3::origin(), nalgebra::Vector3::y())?,
        ];
        let frames = poses
            .iter()
            .map(|p| FrameGeometry::compute(&mesh, &bvh, p, &intr, &params))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = |rng: &mut ChaCha8Rng| {
            FeaturePlane::from_fn(DESK_GRID, DESK_GRID, DESK_DIM_OUT, |_, _, _| rng.gen_range(-1.0..1.0))
        };
        let f_src = plane(&mut rng);
        let targets = vec![plane(&mut rng), plane(&mut rng)];
        let mut model = AdapterModel::init(mesh.vertex_count(), DESK_DIM, DESK_DIM_OUT, DESK_RANK, seed)?;
        model.head.b_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        // Non-zero biases so every parameter kind is exercised away from init.
        let (emb, e1, e2) = model.register.parts_mut();
        emb.background_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        for l in e1.layers.iter_mut().chain(e2.layers.iter_mut()) {
            l.bias.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        Ok(DeskInstance {
            mesh,
            frames,
            f_src,
            targets,
            model,
            weights: LossWeights::default(),
        })
    }

    fn samples(&self) -> Vec<Sample<'_>> {
        self.frames
            .iter()
            .zip(&self.targets)
            .map(|(frame, target)| Sample { frame, target })
            .collect()
    }

    pub fn loss_at(&self, theta: &[f64]) -> Result<f64> {
        let mut m = self.model.clone();
        m.unflatten(theta)?;
        Ok(m.losses(&self.samples(), &self.f_src, &self.weights)?.l_register)
    }

    pub fn analytic(&self) -> Result<Vec<f64>> {
        Ok(self.model.objective(&self.samples(), &self.f_src, &self.weights)?.1.flatten())
    }
}

#[derive(Debug, Clone)]
pub struct DeskGradcheck {
    /// `e`, `e_b` and both encoders.
    pub register: GradcheckReport,
    /// LoRA factors `A` and `B`.
    pub head: GradcheckReport,
}

impl DeskGradcheck {
    pub fn passed(&self) -> bool {
        self.register.passed && self.head.passed
    }
}

/// Central differences on every coordinate of the desk instance.
pub fn desk_gradcheck(seed: u64, opts: &GradcheckOptions) -> Result<DeskGradcheck> {
    let inst = DeskInstance::new(seed)?;
    let theta = inst.model.flatten();
    let analytic = inst.analytic()?;
    let split = inst.model.register.parameter_count();
    let check = |range: std::ops::Range<usize>| {
        let base = theta.clone();
        let offset = range.start;
        gradcheck(
            |sub: &[f64]| {
                let mut full = base.clone();
                full[offset..offset + sub.len()].copy_from_slice(sub);
                inst.loss_at(&full)
            },
            &theta[range.clone()],
            &analytic[range],
            opts,
        )
    };
    Ok(DeskGradcheck {
        register: check(0..split)?,
        head: check(split..theta.len())?,
    })
}
