//! Mesh and camera primitives, and perspective projection onto the feature grid.
//!
//! Conventions: the camera looks down its +z axis, image columns grow with
//! camera +x and image rows grow with camera +y. Pixel grids are indexed
//! `(row, col)` from zero.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Point2, Point3, Vector3};

use crate::error::{Error, Result};

/// Triangle mesh. The edge set is implied by the faces and never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::InvalidArgument(format!(
                    "face {fi} references a vertex outside 0..{n}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidArgument(format!(
                    "face {fi} repeats a vertex index"
                )));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("non-finite vertex coordinate".into()));
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Guard used by every consumer: meshes with fewer than three vertices
    /// cannot be projected into a polygon.
    pub fn ensure_usable(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::Degenerate(format!(
                "mesh has {} vertices, need at least 3",
                self.vertices.len()
            )));
        }
        Ok(())
    }

    pub fn triangle(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Diagonal length of the axis-aligned bounding box of the vertices.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(&v.coords);
            hi = hi.sup(&v.coords);
        }
        if self.vertices.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }

    /// Copy of the mesh with one face removed (vertices are kept).
    pub fn without_face(&self, face: usize) -> TriMesh {
        let mut faces = self.faces.clone();
        faces.remove(face);
        TriMesh {
            vertices: self.vertices.clone(),
            faces,
        }
    }

    /// Applies `x -> rotation * x + translation` to every vertex.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> TriMesh {
        TriMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| Point3::from(rotation * v.coords + translation))
                .collect(),
            faces: self.faces.clone(),
        }
    }

    /// Unit-radius icosphere. Subdivision level 0 is the icosahedron
    /// (12 vertices, 20 faces); level 3 has 642 vertices and 1280 faces.
    pub fn icosphere(subdivisions: u32) -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point3<f64>> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Point3::from(Vector3::from(*p).normalize()))
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Point3<f64>>| -> u32 {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    let m = (verts[a as usize].coords + verts[b as usize].coords).normalize();
                    verts.push(Point3::from(m));
                    (verts.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for &[a, b, c] in &faces {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.push([a, ab, ca]);
                next.push([b, bc, ab]);
                next.push([c, ca, bc]);
                next.push([ab, bc, ca]);
            }
            faces = next;
        }
        TriMesh { vertices, faces }
    }

    /// Wavefront OBJ text with `v` and `f` records (1-based indices).
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }
}

/// Reads the `v`/`f` subset of Wavefront OBJ. Polygons are fan-triangulated,
/// `#` comments and blank lines are skipped, and `f` entries may carry
/// `/vt/vn` suffixes which are ignored.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, path)
}

pub fn parse_obj(text: &str, origin: &Path) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut polys: Vec<(usize, Vec<usize>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(lineno, format!("bad vertex coordinate: {e}")))?;
                // A fourth (w) component is allowed by the format; ignore it.
                if coords.len() != 3 && coords.len() != 4 {
                    return Err(err(
                        lineno,
                        format!("vertex needs 3 coordinates, got {}", coords.len()),
                    ));
                }
                if !coords.iter().all(|c| c.is_finite()) {
                    return Err(err(lineno, "non-finite vertex coordinate".into()));
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in tokens {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| err(lineno, format!("bad face index `{tok}`")))?;
                    if i < 1 {
                        return Err(err(lineno, format!("face index {i} must be 1-based positive")));
                    }
                    idx.push(i as usize - 1);
                }
                if idx.len() < 3 {
                    return Err(err(lineno, format!("face needs 3 indices, got {}", idx.len())));
                }
                polys.push((lineno, idx));
            }
            Some(other) => {
                return Err(err(lineno, format!("unsupported record `{other}`")));
            }
            None => {}
        }
    }
    let n = vertices.len();
    let mut faces = Vec::new();
    for (lineno, poly) in polys {
        if let Some(&bad) = poly.iter().find(|&&i| i >= n) {
            return Err(err(
                lineno,
                format!("face index {} out of range (mesh has {n} vertices)", bad + 1),
            ));
        }
        for j in 1..poly.len() - 1 {
            let tri = [poly[0] as u32, poly[j] as u32, poly[j + 1] as u32];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(err(lineno, "face repeats a vertex index".into()));
            }
            faces.push(tri);
        }
    }
    TriMesh::new(vertices, faces)
}

/// World-to-camera rigid transform: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(ortho <= ROTATION_TOL) {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(CameraPose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image rows
    /// grow opposite to `up`).
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::InvalidArgument("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidArgument("up vector is parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        CameraPose::new(rotation, translation)
    }

    /// Ring of `count` cameras at `radius` around the origin in the x-z plane,
    /// starting on +z and sweeping `arc_deg` degrees in total, all looking at
    /// the origin with +y up.
    pub fn ring(count: usize, radius: f64, arc_deg: f64, elevation: f64) -> Result<Vec<Self>> {
        (0..count)
            .map(|i| {
                let frac = if count > 1 { i as f64 / (count - 1) as f64 - 0.5 } else { 0.0 };
                let theta = (frac * arc_deg).to_radians();
                let eye = Point3::new(radius * theta.sin(), elevation, radius * theta.cos());
                CameraPose::look_at(eye, Point3::origin(), Vector3::y())
            })
            .collect()
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn origin(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    /// Pose seen by the same physical camera after the world is moved by
    /// `x -> rotation * x + translation`.
    pub fn after_world_transform(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        // x_cam = R (Rt^T (y - t)) + T  with y the transformed point.
        let r = self.rotation * rotation.transpose();
        let t = self.translation - r * translation;
        CameraPose {
            rotation: r,
            translation: t,
        }
    }
}

/// Pinhole intrinsics for a `width` x `height` pixel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_x: f64,
    pub principal_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        focal_x: f64,
        focal_y: f64,
        principal_x: f64,
        principal_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(focal_x > 0.0 && focal_y > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(0.0..width as f64).contains(&principal_x) || !(0.0..height as f64).contains(&principal_y)
        {
            return Err(Error::InvalidArgument(format!(
                "principal point ({principal_x}, {principal_y}) outside {width}x{height} grid"
            )));
        }
        Ok(Intrinsics {
            focal_x,
            focal_y,
            principal_x,
            principal_y,
            width,
            height,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Square-pixel intrinsics from a horizontal field of view, with the
/// principal point at the center of the pixel lattice.
pub fn make_intrinsics(width: usize, height: usize, fov_deg: f64) -> Result<Intrinsics> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::InvalidArgument(format!(
            "field of view {fov_deg} must lie in (0, 180) degrees"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("grid must be non-empty".into()));
    }
    let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    Intrinsics::new(
        focal,
        focal,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    )
}

/// Continuous image coordinate (x along columns, y along rows) and camera depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Point2<f64>,
    pub depth: f64,
}

/// Marker for a point that cannot be projected because it is not in front
/// of the camera.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("point has non-positive camera depth {depth}")]
pub struct BehindCamera {
    pub depth: f64,
}

pub fn project_point(
    point: &Point3<f64>,
    pose: &CameraPose,
    intr: &Intrinsics,
) -> std::result::Result<Projection, BehindCamera> {
    let c = pose.to_camera(point);
    if !(c.z > 0.0) {
        return Err(BehindCamera { depth: c.z });
    }
    Ok(Projection {
        pixel: Point2::new(
            intr.focal_x * c.x / c.z + intr.principal_x,
            intr.focal_y * c.y / c.z + intr.principal_y,
        ),
        depth: c.z,
    })
}

pub fn perspective_project(
    points: &[Point3<f64>],
    pose: &CameraPose,
    intr: &Intrinsics,
) -> Vec<std::result::Result<Projection, BehindCamera>> {
    points.iter().map(|p| project_point(p, pose, intr)).collect()
}

/// Grid cell, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        PixelCoord { row, col }
    }

    /// Row-major flat index on a grid of the given width.
    pub fn index(&self, width: usize) -> usize {
        self.row * width + self.col
    }

    /// Continuous coordinate of the pixel center, `(x = col, y = row)`.
    pub fn center(&self) -> Point2<f64> {
        Point2::new(self.col as f64, self.row as f64)
    }
}

/// Nearest grid cell, rounding ties away from zero; `None` when the rounded
/// cell falls outside the grid.
pub fn round_to_grid(coord: &Point2<f64>, intr: &Intrinsics) -> Option<PixelCoord> {
    let col = coord.x.round();
    let row = coord.y.round();
    if !(col >= 0.0 && row >= 0.0 && col < intr.width as f64 && row < intr.height as f64) {
        return None;
    }
    Some(PixelCoord {
        row: row as usize,
        col: col as usize,
    })
}
