//! Per-pose geometry shared by every embedding update: visible vertices,
//! their pixels, the face contour interior and the k-NN interpolation table.

use std::hash::Hasher;

use fnv::FnvHasher;
use nalgebra::Point2;

use crate::alphashape::{alpha_shape, interior_points};
use crate::error::{Error, Result};
use crate::featuremap::resolve_sites;
use crate::geometry::{project_point, round_to_grid, CameraPose, Intrinsics, PixelCoord, TriMesh};
use crate::knn::{knn_projected, KnnTable};
use crate::visibility::{visible_vertices, Bvh, VisibleSet};

/// Contour and interpolation settings that a frame is computed for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryParams {
    pub alpha: f64,
    pub k: usize,
}

/// A projected visible vertex before rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedVertex {
    pub vertex: u32,
    pub pixel: Point2<f64>,
    pub depth: f64,
}

/// An occupied pixel and the vertex whose embedding it holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub pixel: PixelCoord,
    pub vertex: u32,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGeometry {
    pub fingerprint: u64,
    pub height: usize,
    pub width: usize,
    pub visible: VisibleSet,
    /// Visible vertices in front of the camera, in vertex order.
    pub projections: Vec<ProjectedVertex>,
    /// Occupied pixels in row-major order; k-NN indices refer to this list.
    pub sites: Vec<Site>,
    /// Contour pixels (inside or on the polygon) that hold no site.
    pub interior: Vec<PixelCoord>,
    /// One row per `interior` pixel.
    pub knn: KnnTable,
}

/// 64-bit FNV-1a over the mesh bytes, pose, intrinsics and contour settings.
pub fn fingerprint(mesh: &TriMesh, pose: &CameraPose, intr: &Intrinsics, params: &GeometryParams) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(mesh.vertex_count() as u64);
    for v in mesh.vertices() {
        for c in v.iter() {
            h.write(&c.to_le_bytes());
        }
    }
    h.write_u64(mesh.faces().len() as u64);
    for f in mesh.faces() {
        for i in f {
            h.write(&i.to_le_bytes());
        }
    }
    for r in pose.rotation().iter() {
        h.write(&r.to_le_bytes());
    }
    for t in pose.translation().iter() {
        h.write(&t.to_le_bytes());
    }
    for x in [intr.focal_x, intr.focal_y, intr.principal_x, intr.principal_y] {
        h.write(&x.to_le_bytes());
    }
    h.write_u64(intr.width as u64);
    h.write_u64(intr.height as u64);
    h.write(&params.alpha.to_le_bytes());
    h.write_u64(params.k as u64);
    h.finish()
}

impl FrameGeometry {
    /// Runs visibility, projection, contour extraction and k-NN for one pose.
    pub fn compute(
        mesh: &TriMesh,
        bvh: &Bvh,
        pose: &CameraPose,
        intr: &Intrinsics,
        params: &GeometryParams,
    ) -> Result<Self> {
        mesh.ensure_usable()?;
        if bvh.contains_point(&pose.origin()) {
            return Err(Error::Degenerate("camera center lies inside the mesh".into()));
        }
        let visible = visible_vertices(mesh, pose, bvh);
        let projections: Vec<ProjectedVertex> = visible
            .indices()
            .iter()
            .filter_map(|&v| {
                project_point(&mesh.vertices()[v as usize], pose, intr)
                    .ok()
                    .map(|p| ProjectedVertex {
                        vertex: v,
                        pixel: p.pixel,
                        depth: p.depth,
                    })
            })
            .collect();
        if projections.is_empty() {
            return Err(Error::Degenerate("no visible vertex lies in front of the camera".into()));
        }
        let (pixels, ids): (Vec<(PixelCoord, f64)>, Vec<u32>) = projections
            .iter()
            .filter_map(|p| round_to_grid(&p.pixel, intr).map(|px| ((px, p.depth), p.vertex)))
            .unzip();
        let sites = resolve_sites(&pixels, &ids)?;
        if sites.len() < 3 {
            return Err(Error::Degenerate(format!(
                "only {} visible vertices land on distinct grid pixels",
                sites.len()
            )));
        }
        if sites.len() < params.k {
            return Err(Error::Degenerate(format!(
                "{} occupied pixels cannot supply k = {} neighbors",
                sites.len(),
                params.k
            )));
        }
        let centers: Vec<Point2<f64>> = sites.iter().map(|s| s.pixel.center()).collect();
        let shape = alpha_shape(&centers, params.alpha)?;
        let occupied: Vec<PixelCoord> = sites.iter().map(|s| s.pixel).collect();
        let interior = interior_points(&shape.polygon, intr.width, intr.height, &occupied);
        let queries: Vec<Point2<f64>> = interior.iter().map(|p| p.center()).collect();
        let knn = knn_projected(&centers, &queries, params.k)?;
        Ok(FrameGeometry {
            fingerprint: fingerprint(mesh, pose, intr, params),
            height: intr.height,
            width: intr.width,
            visible,
            projections,
            sites,
            interior,
            knn,
        })
    }

    /// Pixels that are neither occupied nor interior, row-major.
    pub fn background_pixels(&self) -> Vec<PixelCoord> {
        let mut taken = vec![false; self.height * self.width];
        for s in &self.sites {
            taken[s.pixel.index(self.width)] = true;
        }
        for p in &self.interior {
            taken[p.index(self.width)] = true;
        }
        taken
            .iter()
            .enumerate()
            .filter(|(_, &t)| !t)
            .map(|(i, _)| PixelCoord::new(i / self.width, i % self.width))
            .collect()
    }

    pub fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                cached: self.fingerprint,
                computed: expected,
            });
        }
        Ok(())
    }
}
