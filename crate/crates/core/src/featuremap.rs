//! Assembly of the dense constructed feature `f_S` from vertex embeddings:
//! scatter at projected pixels, inverse-distance-weighted fill of the face
//! interior, and a background vector everywhere else.
//!
//! The map `(e, e_b) -> f_S` is linear; [`FrameGeometry::backward`] is its
//! exact transpose.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::error::{Error, Result};
use crate::frame::{fingerprint, FrameGeometry, GeometryParams, Site};
use crate::geometry::{CameraPose, Intrinsics, PixelCoord, TriMesh};
use crate::init::xavier_normal;
use crate::knn::KnnTable;
use crate::plane::{FeaturePlane, Real};

/// Learnable per-vertex embeddings `e` (`n x D`, row-major) and the
/// background feature `e_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexEmbeddings {
    vertex_count: usize,
    dim: usize,
    rows: Vec<f64>,
    background: Vec<f64>,
}

pub const VEMB_MAGIC: &[u8; 4] = b"VEMB";

impl VertexEmbeddings {
    pub fn new(vertex_count: usize, dim: usize, rows: Vec<f64>, background: Vec<f64>) -> Result<Self> {
        if rows.len() != vertex_count * dim || background.len() != dim {
            return Err(Error::Shape(format!(
                "embeddings for {vertex_count} vertices of dim {dim} need {} + {dim} values, got {} + {}",
                vertex_count * dim,
                rows.len(),
                background.len()
            )));
        }
        if !rows.iter().chain(&background).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite embedding entry".into()));
        }
        Ok(VertexEmbeddings {
            vertex_count,
            dim,
            rows,
            background,
        })
    }

    pub fn zeros(vertex_count: usize, dim: usize) -> Self {
        VertexEmbeddings {
            vertex_count,
            dim,
            rows: vec![0.0; vertex_count * dim],
            background: vec![0.0; dim],
        }
    }

    /// Xavier-normal `e` (fan-in `D`, fan-out `n`) and `e_b` (fan-in `D`,
    /// fan-out 1).
    pub fn xavier(vertex_count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = xavier_normal(&mut rng, vertex_count * dim, dim, vertex_count);
        let background = xavier_normal(&mut rng, dim, dim, 1);
        VertexEmbeddings {
            vertex_count,
            dim,
            rows,
            background,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.rows[v * self.dim..(v + 1) * self.dim]
    }

    pub fn row_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.rows[v * self.dim..(v + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [f64] {
        &mut self.rows
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// `e` and `e_b` borrowed mutably together.
    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.rows, &mut self.background)
    }

    pub fn background_mut(&mut self) -> &mut [f64] {
        &mut self.background
    }

    /// `a * self + b * other`, entrywise over `e` and `e_b`.
    pub fn combine(&self, a: f64, other: &VertexEmbeddings, b: f64) -> VertexEmbeddings {
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(x, y)| a * x + b * y).collect();
        VertexEmbeddings {
            vertex_count: self.vertex_count,
            dim: self.dim,
            rows: mix(&self.rows, &other.rows),
            background: mix(&self.background, &other.background),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, VEMB_MAGIC, 1)?;
        binio::write_len(w, self.vertex_count)?;
        binio::write_len(w, self.dim)?;
        binio::write_f32s(w, self.rows.iter().copied())?;
        binio::write_f32s(w, self.background.iter().copied())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, VEMB_MAGIC, 1)?;
        let n = binio::read_len(r)?;
        let d = binio::read_len(r)?;
        let rows = binio::read_f32s(r, n * d)?.into_iter().map(f64::from).collect();
        let background = binio::read_f32s(r, d)?.into_iter().map(f64::from).collect();
        VertexEmbeddings::new(n, d, rows, background)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Resolves pixel collisions with z-buffer semantics: the nearest vertex
/// wins, equal depths go to the smaller vertex id. Sites come back in
/// row-major pixel order.
pub fn resolve_sites(pixels: &[(PixelCoord, f64)], vertex_ids: &[u32]) -> Result<Vec<Site>> {
    if pixels.len() != vertex_ids.len() {
        return Err(Error::Shape(format!(
            "{} pixels but {} vertex ids",
            pixels.len(),
            vertex_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    order.sort_by(|&a, &b| {
        pixels[a]
            .0
            .cmp(&pixels[b].0)
            .then(pixels[a].1.total_cmp(&pixels[b].1))
            .then(vertex_ids[a].cmp(&vertex_ids[b]))
    });
    let mut sites: Vec<Site> = Vec::new();
    for i in order {
        let (pixel, depth) = pixels[i];
        if sites.last().map_or(true, |s| s.pixel != pixel) {
            sites.push(Site {
                pixel,
                vertex: vertex_ids[i],
                depth,
            });
        }
    }
    Ok(sites)
}

fn check_channels<T: Real>(plane: &FeaturePlane<T>, emb: &VertexEmbeddings) -> Result<()> {
    if plane.channels() != emb.dim() {
        return Err(Error::Shape(format!(
            "plane has {} channels, embeddings have dim {}",
            plane.channels(),
            emb.dim()
        )));
    }
    Ok(())
}

/// Writes each projected vertex's embedding row at its pixel and returns the
/// occupied pixels.
pub fn scatter_embeddings<T: Real>(
    plane: &mut FeaturePlane<T>,
    pixels: &[(PixelCoord, f64)],
    vertex_ids: &[u32],
    emb: &VertexEmbeddings,
) -> Result<Vec<Site>> {
    check_channels(plane, emb)?;
    if let Some((px, _)) = pixels.iter().find(|(p, _)| p.row >= plane.height() || p.col >= plane.width()) {
        return Err(Error::InvalidArgument(format!("pixel {px:?} outside the plane")));
    }
    if let Some(&v) = vertex_ids.iter().find(|&&v| v as usize >= emb.vertex_count()) {
        return Err(Error::InvalidArgument(format!("vertex {v} has no embedding row")));
    }
    let sites = resolve_sites(pixels, vertex_ids)?;
    write_sites(plane, &sites, emb);
    Ok(sites)
}

pub(crate) fn write_sites<T: Real>(plane: &mut FeaturePlane<T>, sites: &[Site], emb: &VertexEmbeddings) {
    for s in sites {
        let row = emb.row(s.vertex as usize);
        for (dst, &v) in plane.pixel_mut(s.pixel).iter_mut().zip(row) {
            *dst = T::from_f64_lossy(v);
        }
    }
}

/// IDW interpolation at each interior pixel from its `k` nearest sites,
/// accumulated in 64-bit.
pub fn idw_fill<T: Real>(
    plane: &mut FeaturePlane<T>,
    interior: &[PixelCoord],
    knn: &KnnTable,
    emb: &VertexEmbeddings,
    vertex_of_site: &[u32],
) -> Result<()> {
    check_channels(plane, emb)?;
    if knn.len() != interior.len() {
        return Err(Error::Shape(format!(
            "knn table has {} rows for {} interior pixels",
            knn.len(),
            interior.len()
        )));
    }
    let dim = emb.dim();
    let mut acc = vec![0.0f64; dim];
    for (q, &px) in interior.iter().enumerate() {
        let (sites, dists) = knn.neighbors(q);
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut total = 0.0f64;
        for (&s, &d) in sites.iter().zip(dists) {
            if !(d > 0.0) {
                return Err(Error::ZeroDistance { row: px.row, col: px.col });
            }
            let w = 1.0 / d;
            total += w;
            let v = *vertex_of_site
                .get(s as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("site {s} has no vertex")))?;
            for (a, &e) in acc.iter_mut().zip(emb.row(v as usize)) {
                *a += w * e;
            }
        }
        for (dst, a) in plane.pixel_mut(px).iter_mut().zip(&acc) {
            *dst = T::from_f64_lossy(a / total);
        }
    }
    Ok(())
}

/// Sets every pixel of `mask` to `background`.
pub fn background_fill<T: Real>(plane: &mut FeaturePlane<T>, mask: &[PixelCoord], background: &[f64]) -> Result<()> {
    if background.len() != plane.channels() {
        return Err(Error::Shape(format!(
            "background has {} entries for {} channels",
            background.len(),
            plane.channels()
        )));
    }
    let value: Vec<T> = background.iter().map(|&v| T::from_f64_lossy(v)).collect();
    for &px in mask {
        plane.pixel_mut(px).copy_from_slice(&value);
    }
    Ok(())
}

/// `f_S` for one frame: scatter, then IDW interior, then background.
pub fn assemble<T: Real>(frame: &FrameGeometry, emb: &VertexEmbeddings) -> Result<FeaturePlane<T>> {
    let mut plane = FeaturePlane::zeros(frame.height, frame.width, emb.dim());
    check_channels(&plane, emb)?;
    if let Some(s) = frame.sites.iter().find(|s| s.vertex as usize >= emb.vertex_count()) {
        return Err(Error::Shape(format!(
            "frame references vertex {} but embeddings cover {}",
            s.vertex,
            emb.vertex_count()
        )));
    }
    write_sites(&mut plane, &frame.sites, emb);
    let vertex_of_site: Vec<u32> = frame.sites.iter().map(|s| s.vertex).collect();
    idw_fill(&mut plane, &frame.interior, &frame.knn, emb, &vertex_of_site)?;
    background_fill(&mut plane, &frame.background_pixels(), emb.background())?;
    Ok(plane)
}

/// `f_S` for `(mesh, pose)` from its precomputed frame; fails if the frame
/// was computed for different inputs.
pub fn build_dense_feature<T: Real>(
    mesh: &TriMesh,
    pose: &CameraPose,
    intr: &Intrinsics,
    params: &GeometryParams,
    emb: &VertexEmbeddings,
    frame: &FrameGeometry,
) -> Result<FeaturePlane<T>> {
    frame.check_fingerprint(fingerprint(mesh, pose, intr, params))?;
    if emb.vertex_count() != mesh.vertex_count() {
        return Err(Error::Shape(format!(
            "{} embedding rows for a mesh of {} vertices",
            emb.vertex_count(),
            mesh.vertex_count()
        )));
    }
    assemble(frame, emb)
}

impl FrameGeometry {
    /// Transpose of [`assemble`]: gradients of a scalar loss with respect to
    /// `e` (row-major `n x D`) and `e_b`, given its gradient on `f_S`.
    pub fn backward(&self, grad: &FeaturePlane<f64>, vertex_count: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let dim = grad.channels();
        if grad.height() != self.height || grad.width() != self.width {
            return Err(Error::Shape("gradient plane does not match the frame grid".into()));
        }
        let mut grad_e = vec![0.0; vertex_count * dim];
        let mut grad_b = vec![0.0; dim];
        let mut add = |v: usize, w: f64, g: &[f64]| {
            for (dst, &gv) in grad_e[v * dim..(v + 1) * dim].iter_mut().zip(g) {
                *dst += w * gv;
            }
        };
        for s in &self.sites {
            add(s.vertex as usize, 1.0, grad.pixel(s.pixel));
        }
        for (q, &px) in self.interior.iter().enumerate() {
            let (sites, dists) = self.knn.neighbors(q);
            let total: f64 = dists.iter().map(|d| 1.0 / d).sum();
            let g = grad.pixel(px);
            for (&s, &d) in sites.iter().zip(dists) {
                add(self.sites[s as usize].vertex as usize, (1.0 / d) / total, g);
            }
        }
        for px in self.background_pixels() {
            for (dst, &gv) in grad_b.iter_mut().zip(grad.pixel(px)) {
                *dst += gv;
            }
        }
        Ok((grad_e, grad_b))
    }

    /// Pixels whose value depends on the embedding row of `vertex`.
    pub fn pixels_touching(&self, vertex: u32) -> Vec<PixelCoord> {
        let mut out: Vec<PixelCoord> = self
            .sites
            .iter()
            .filter(|s| s.vertex == vertex)
            .map(|s| s.pixel)
            .collect();
        for (q, &px) in self.interior.iter().enumerate() {
            if self.knn.neighbors(q).0.iter().any(|&s| self.sites[s as usize].vertex == vertex) {
                out.push(px);
            }
        }
        out.sort();
        out
    }
}
