//! Per-pose geometry cache (`PCCH` files).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point2;
use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::frame::{fingerprint, FrameGeometry, ProjectedVertex, Site};
use crate::geometry::{CameraPose, PixelCoord, TriMesh};
use crate::knn::KnnTable;
use crate::pipeline::config::AdaptConfig;
use crate::visibility::{Bvh, VisibleSet};

pub const PCCH_MAGIC: &[u8; 4] = b"PCCH";

#[derive(Debug, Clone, PartialEq)]
pub struct CachedFrame {
    pub pose_index: usize,
    pub frame: FrameGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessCache {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<CachedFrame>,
}

/// Pose that could not be preprocessed.
#[derive(Debug)]
pub struct PoseFailure {
    pub pose_index: usize,
    pub error: Error,
}

impl PreprocessCache {
    /// Computes every pose in parallel. Failed poses are returned alongside
    /// the cache; it is an error only if every pose fails.
    pub fn build(mesh: &TriMesh, poses: &[CameraPose], cfg: &AdaptConfig) -> Result<(Self, Vec<PoseFailure>)> {
        if poses.is_empty() {
            return Err(Error::InvalidArgument("no poses to preprocess".into()));
        }
        mesh.ensure_usable()?;
        let intr = cfg.intrinsics()?;
        let params = cfg.geometry();
        let bvh = Bvh::build(mesh)?;
        let results: Vec<Result<FrameGeometry>> = poses
            .par_iter()
            .map(|pose| FrameGeometry::compute(mesh, &bvh, pose, &intr, &params))
            .collect();
        let mut frames = Vec::new();
        let mut failures = Vec::new();
        for (pose_index, r) in results.into_iter().enumerate() {
            match r {
                Ok(frame) => frames.push(CachedFrame { pose_index, frame }),
                Err(error) => failures.push(PoseFailure { pose_index, error }),
            }
        }
        if frames.is_empty() {
            let list: Vec<String> = failures.iter().map(|f| format!("pose {}: {}", f.pose_index, f.error)).collect();
            return Err(Error::Degenerate(format!("every pose failed: {}", list.join("; "))));
        }
        Ok((
            PreprocessCache {
                height: cfg.height,
                width: cfg.width,
                frames,
            },
            failures,
        ))
    }

    pub fn frame(&self, pose_index: usize) -> Result<&FrameGeometry> {
        self.frames
            .iter()
            .find(|f| f.pose_index == pose_index)
            .map(|f| &f.frame)
            .ok_or_else(|| Error::InvalidArgument(format!("pose {pose_index} is not in the cache")))
    }

    /// Checks every cached frame against fingerprints recomputed from the
    /// given inputs.
    pub fn verify(&self, mesh: &TriMesh, poses: &[CameraPose], cfg: &AdaptConfig) -> Result<()> {
        if (self.height, self.width) != (cfg.height, cfg.width) {
            return Err(Error::Config(format!(
                "cache grid {}x{} differs from config {}x{}",
                self.height, self.width, cfg.height, cfg.width
            )));
        }
        let intr = cfg.intrinsics()?;
        let params = cfg.geometry();
        for f in &self.frames {
            let pose = poses
                .get(f.pose_index)
                .ok_or_else(|| Error::Config(format!("cache refers to pose {} beyond the pose list", f.pose_index)))?;
            f.frame.check_fingerprint(fingerprint(mesh, pose, &intr, &params))?;
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, PCCH_MAGIC, 1)?;
        binio::write_len(w, self.height)?;
        binio::write_len(w, self.width)?;
        binio::write_len(w, self.frames.len())?;
        for cf in &self.frames {
            let f = &cf.frame;
            binio::write_len(w, cf.pose_index)?;
            binio::write_u64(w, f.fingerprint)?;

            binio::write_len(w, f.visible.len())?;
            for &v in f.visible.indices() {
                binio::write_u32(w, v)?;
            }

            binio::write_len(w, f.projections.len())?;
            for p in &f.projections {
                binio::write_u32(w, p.vertex)?;
                binio::write_f64(w, p.pixel.x)?;
                binio::write_f64(w, p.pixel.y)?;
                binio::write_f64(w, p.depth)?;
            }

            binio::write_len(w, f.sites.len())?;
            for s in &f.sites {
                binio::write_len(w, s.pixel.row)?;
                binio::write_len(w, s.pixel.col)?;
                binio::write_u32(w, s.vertex)?;
                binio::write_f64(w, s.depth)?;
            }

            binio::write_len(w, f.interior.len())?;
            for p in &f.interior {
                binio::write_len(w, p.row)?;
                binio::write_len(w, p.col)?;
            }

            binio::write_len(w, f.knn.k())?;
            for &i in f.knn.indices() {
                binio::write_u32(w, i)?;
            }
            for &d in f.knn.distances() {
                binio::write_f64(w, d)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, PCCH_MAGIC, 1)?;
        let height = binio::read_len(r)?;
        let width = binio::read_len(r)?;
        let count = binio::read_len(r)?;
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let pose_index = binio::read_len(r)?;
            let fp = binio::read_u64(r)?;

            let nv = binio::read_len(r)?;
            let visible = VisibleSet::from_sorted((0..nv).map(|_| binio::read_u32(r)).collect::<Result<_>>()?)?;

            let np = binio::read_len(r)?;
            let mut projections = Vec::with_capacity(np);
            for _ in 0..np {
                let vertex = binio::read_u32(r)?;
                let x = binio::read_f64(r)?;
                let y = binio::read_f64(r)?;
                let depth = binio::read_f64(r)?;
                projections.push(ProjectedVertex {
                    vertex,
                    pixel: Point2::new(x, y),
                    depth,
                });
            }

            let ns = binio::read_len(r)?;
            let mut sites = Vec::with_capacity(ns);
            for _ in 0..ns {
                let row = binio::read_len(r)?;
                let col = binio::read_len(r)?;
                let vertex = binio::read_u32(r)?;
                let depth = binio::read_f64(r)?;
                sites.push(Site {
                    pixel: PixelCoord::new(row, col),
                    vertex,
                    depth,
                });
            }

            let ni = binio::read_len(r)?;
            let mut interior = Vec::with_capacity(ni);
            for _ in 0..ni {
                let row = binio::read_len(r)?;
                let col = binio::read_len(r)?;
                interior.push(PixelCoord::new(row, col));
            }

            let k = binio::read_len(r)?;
            let indices: Vec<u32> = (0..ni * k).map(|_| binio::read_u32(r)).collect::<Result<_>>()?;
            let distances: Vec<f64> = (0..ni * k).map(|_| binio::read_f64(r)).collect::<Result<_>>()?;
            if indices.iter().any(|&i| i as usize >= ns) {
                return Err(Error::Format("k-NN table refers to a missing site".into()));
            }
            if sites.iter().any(|s| s.pixel.row >= height || s.pixel.col >= width)
                || interior.iter().any(|p| p.row >= height || p.col >= width)
            {
                return Err(Error::Format("cached pixel lies outside the grid".into()));
            }
            let knn = KnnTable::from_parts(k, indices, distances)?;
            frames.push(CachedFrame {
                pose_index,
                frame: FrameGeometry {
                    fingerprint: fp,
                    height,
                    width,
                    visible,
                    projections,
                    sites,
                    interior,
                    knn,
                },
            });
        }
        binio::expect_eof(r)?;
        Ok(PreprocessCache { height, width, frames })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        PreprocessCache::read(&mut f)
    }
}
