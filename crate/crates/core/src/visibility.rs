//! Vertex visibility by ray casting from the camera center.
//!
//! A vertex is visible when the segment from the camera center to it crosses
//! no triangle before `‖v - origin‖ - eps_vis`. The offset keeps a vertex's own
//! incident triangles (which the segment always touches at its far end) from
//! occluding it.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, TriMesh};

/// Minimum ray parameter accepted as a hit.
pub const EPS_RAY: f64 = 1e-7;

/// Self-occlusion offset as a fraction of the mesh bounding-box diagonal.
pub const EPS_VIS_REL: f64 = 1e-4;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn join(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.min[i] && self.max[i] >= other.max[i])
    }

    /// Entry parameter of the ray into the box, or `None` if it misses
    /// `[0, t_max]`.
    fn entry(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for i in 0..3 {
            let a = (self.min[i] - origin[i]) * inv_dir[i];
            let b = (self.max[i] - origin[i]) * inv_dir[i];
            // NaN arises for 0 * inf when the origin sits on a slab plane and
            // the ray is parallel to it; such a ray is inside the slab.
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if !lo.is_nan() {
                t0 = t0.max(lo);
            }
            if !hi.is_nan() {
                t1 = t1.min(hi);
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Bounding-volume hierarchy over the triangles of one mesh.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    /// Triangle indices, grouped contiguously per leaf.
    order: Vec<usize>,
    triangles: Vec<[Point3<f64>; 3]>,
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub triangle: usize,
    pub t: f64,
}

impl Bvh {
    /// Median split on the longest axis of the centroid bounds. Ties in the
    /// centroid coordinate are ordered by triangle index so the tree is
    /// reproducible.
    pub fn build(mesh: &TriMesh) -> Result<Self> {
        let n = mesh.faces().len();
        if n == 0 {
            return Err(Error::Degenerate("cannot build a BVH over a mesh with no faces".into()));
        }
        let triangles: Vec<_> = (0..n).map(|f| mesh.triangle(f)).collect();
        let diag = mesh.bbox_diagonal();
        let pad = Vector3::repeat(1e-9 * diag.max(1e-300));
        let boxes: Vec<Aabb> = triangles
            .iter()
            .map(|tri| {
                let mut b = Aabb::empty();
                tri.iter().for_each(|p| b.grow(&p.coords));
                b.min -= pad;
                b.max += pad;
                b
            })
            .collect();
        let centroids: Vec<Vector3<f64>> = triangles
            .iter()
            .map(|t| (t[0].coords + t[1].coords + t[2].coords) / 3.0)
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::with_capacity(2 * n / LEAF_SIZE + 1),
            order: (0..n).collect(),
            triangles,
        };
        bvh.build_node(0, n, &boxes, &centroids);
        Ok(bvh)
    }

    fn build_node(&mut self, start: usize, end: usize, boxes: &[Aabb], centroids: &[Vector3<f64>]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &self.order[start..end] {
            bounds.join(&boxes[t]);
            cbounds.grow(&centroids[t]);
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            bounds,
            kind: NodeKind::Leaf {
                start,
                count: end - start,
            },
        });
        if end - start <= LEAF_SIZE {
            return idx;
        }
        let extent = cbounds.max - cbounds.min;
        let axis = extent.imax();
        self.order[start..end].sort_by(|&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        let left = self.build_node(start, mid, boxes, centroids);
        let right = self.build_node(mid, end, boxes, centroids);
        self.nodes[idx].kind = NodeKind::Inner { left, right };
        idx
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn root_bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    /// Triangle indices of every leaf, in depth-first order.
    pub fn leaves(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            match self.nodes[i].kind {
                NodeKind::Leaf { start, count } => out.push(self.order[start..start + count].to_vec()),
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        out
    }

    /// Checks that every node's box contains its children's boxes and the
    /// boxes of the triangles under it.
    pub fn check_nesting(&self) -> bool {
        self.nodes.iter().all(|node| match node.kind {
            NodeKind::Leaf { start, count } => self.order[start..start + count].iter().all(|&t| {
                self.triangles[t]
                    .iter()
                    .all(|p| (0..3).all(|i| node.bounds.min[i] <= p[i] && p[i] <= node.bounds.max[i]))
            }),
            NodeKind::Inner { left, right } => {
                node.bounds.contains(&self.nodes[left].bounds) && node.bounds.contains(&self.nodes[right].bounds)
            }
        })
    }

    /// Nearest hit with `t > EPS_RAY`; equal distances resolve to the
    /// smaller triangle index.
    pub fn ray_first_hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Result<Option<Hit>> {
        check_unit(dir)?;
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            let limit = best.map_or(f64::INFINITY, |h| h.t);
            match node.bounds.entry(&origin.coords, &inv, limit) {
                None => continue,
                Some(_) => {}
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &tri in &self.order[start..start + count] {
                        if let Some(t) = intersect_triangle(origin, dir, &self.triangles[tri]) {
                            let better = match best {
                                None => true,
                                Some(b) => t < b.t || (t == b.t && tri < b.triangle),
                            };
                            if better {
                                best = Some(Hit { triangle: tri, t });
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        Ok(best)
    }

    /// True when some triangle is hit at `EPS_RAY < t < t_max`.
    pub fn occluded(&self, origin: &Point3<f64>, dir: &Vector3<f64>, t_max: f64) -> bool {
        let inv = dir.map(|d| 1.0 / d);
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if node.bounds.entry(&origin.coords, &inv, t_max).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &tri in &self.order[start..start + count] {
                        if matches!(intersect_triangle(origin, dir, &self.triangles[tri]), Some(t) if t < t_max) {
                            return true;
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        false
    }

    /// Number of triangles crossed by the ray (all `t > EPS_RAY`).
    pub fn hit_count(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> usize {
        let inv = dir.map(|d| 1.0 / d);
        let mut count = 0;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if node.bounds.entry(&origin.coords, &inv, f64::INFINITY).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count: c } => {
                    count += self.order[start..start + c]
                        .iter()
                        .filter(|&&tri| intersect_triangle(origin, dir, &self.triangles[tri]).is_some())
                        .count();
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        count
    }

    /// Parity test for closed meshes: a point is inside when a ray from it
    /// crosses the surface an odd number of times.
    pub fn contains_point(&self, p: &Point3<f64>) -> bool {
        // An irrational-looking direction keeps the probe off edges and
        // vertices of axis-aligned or symmetric meshes.
        let dir = Vector3::new(0.5773, 0.6312, 0.5181).normalize();
        self.hit_count(p, &dir) % 2 == 1
    }
}

fn check_unit(dir: &Vector3<f64>) -> Result<()> {
    let norm = dir.norm();
    if !((norm - 1.0).abs() <= 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "ray direction must be unit length, got norm {norm}"
        )));
    }
    Ok(())
}

/// Barycentric slack so rays through a shared edge hit at least one of the
/// two triangles.
const BARY_TOL: f64 = 1e-12;

/// Möller–Trumbore ray/triangle test. Returns `t > EPS_RAY` on a hit; rays
/// parallel to the triangle plane miss.
pub fn intersect_triangle(origin: &Point3<f64>, dir: &Vector3<f64>, tri: &[Point3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() <= 1e-14 * e1.norm() * e2.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(-BARY_TOL..=1.0 + BARY_TOL).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -BARY_TOL || u + v > 1.0 + BARY_TOL {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > EPS_RAY).then_some(t)
}

/// Strictly increasing vertex indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VisibleSet(Vec<u32>);

impl VisibleSet {
    pub fn from_sorted(indices: Vec<u32>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("visible set must be strictly increasing".into()));
        }
        Ok(VisibleSet(indices))
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: u32) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    pub fn is_subset(&self, other: &VisibleSet) -> bool {
        self.0.iter().all(|&v| other.contains(v))
    }
}

pub fn self_occlusion_epsilon(mesh: &TriMesh) -> f64 {
    EPS_VIS_REL * mesh.bbox_diagonal()
}

/// Segment from the camera center to `vertex`, as a unit direction and
/// the maximum occluding distance. `None` if the camera sits on the vertex.
fn shadow_segment(origin: &Point3<f64>, vertex: &Point3<f64>, eps_vis: f64) -> Option<(Vector3<f64>, f64)> {
    let d = vertex - origin;
    let dist = d.norm();
    if dist == 0.0 {
        return None;
    }
    Some((d / dist, dist - eps_vis))
}

/// Visible vertices of `mesh` from the camera center of `pose`.
pub fn visible_vertices(mesh: &TriMesh, pose: &CameraPose, bvh: &Bvh) -> VisibleSet {
    let origin = pose.origin();
    let eps = self_occlusion_epsilon(mesh);
    let flags: Vec<bool> = mesh
        .vertices()
        .par_iter()
        .map(|v| match shadow_segment(&origin, v, eps) {
            None => true,
            Some((dir, t_max)) => !bvh.occluded(&origin, &dir, t_max),
        })
        .collect();
    VisibleSet(
        flags
            .iter()
            .enumerate()
            .filter_map(|(i, &vis)| vis.then_some(i as u32))
            .collect(),
    )
}

/// Exhaustive reference for [`visible_vertices`]: every segment is tested
/// against every triangle.
#[cfg(any(test, feature = "oracle"))]
pub fn brute_force_visible(mesh: &TriMesh, pose: &CameraPose) -> VisibleSet {
    let origin = pose.origin();
    let eps = self_occlusion_epsilon(mesh);
    let tris: Vec<_> = (0..mesh.faces().len()).map(|f| mesh.triangle(f)).collect();
    let visible = mesh
        .vertices()
        .iter()
        .enumerate()
        .filter(|(_, v)| match shadow_segment(&origin, v, eps) {
            None => true,
            Some((dir, t_max)) => !tris
                .iter()
                .any(|tri| matches!(intersect_triangle(&origin, &dir, tri), Some(t) if t < t_max)),
        })
        .map(|(i, _)| i as u32)
        .collect();
    VisibleSet(visible)
}

/// Exhaustive nearest hit, same tie rule as [`Bvh::ray_first_hit`].
#[cfg(any(test, feature = "oracle"))]
pub fn brute_force_first_hit(mesh: &TriMesh, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for f in 0..mesh.faces().len() {
        if let Some(t) = intersect_triangle(origin, dir, &mesh.triangle(f)) {
            if best.map_or(true, |b| t < b.t) {
                best = Some(Hit { triangle: f, t });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_triangle() -> TriMesh {
        TriMesh::new(
            vec![Point3::new(-1.0, -1.0, 0.0), Point3::new(1.0, -1.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    /// Two unit quads centered on the z axis at z = 0 and z = 1.
    fn stacked_quads() -> TriMesh {
        let mut v = Vec::new();
        for z in [0.0, 1.0] {
            v.push(Point3::new(-0.5, -0.5, z));
            v.push(Point3::new(0.5, -0.5, z));
            v.push(Point3::new(0.5, 0.5, z));
            v.push(Point3::new(-0.5, 0.5, z));
        }
        TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]]).unwrap()
    }

    fn camera_at(eye: [f64; 3]) -> CameraPose {
        CameraPose::look_at(Point3::from(eye), Point3::origin(), Vector3::y()).unwrap()
    }

    #[test]
    fn single_triangle_is_one_leaf() {
        let bvh = Bvh::build(&single_triangle()).unwrap();
        assert_eq!(bvh.leaves(), vec![vec![0]]);
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let m = TriMesh::new(vec![Point3::origin(); 3], vec![]).unwrap();
        assert!(Bvh::build(&m).is_err());
    }

    #[test]
    fn icosahedron_leaves_partition_triangles() {
        let mesh = TriMesh::icosphere(0);
        let bvh = Bvh::build(&mesh).unwrap();
        let mut all: Vec<usize> = bvh.leaves().into_iter().flatten().collect();
        assert!(bvh.leaves().iter().all(|l| l.len() <= LEAF_SIZE));
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(bvh.check_nesting());
    }

    #[test]
    fn perpendicular_ray_hits_at_plane_distance() {
        let bvh = Bvh::build(&single_triangle()).unwrap();
        let centroid = Point3::new(0.0, -1.0 / 3.0, 0.0);
        let origin = centroid + Vector3::new(0.0, 0.0, 2.5);
        let hit = bvh.ray_first_hit(&origin, &-Vector3::z()).unwrap().unwrap();
        assert_eq!(hit.triangle, 0);
        assert_relative_eq!(hit.t, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn parallel_ray_misses() {
        let bvh = Bvh::build(&single_triangle()).unwrap();
        let hit = bvh.ray_first_hit(&Point3::new(-5.0, 0.0, 0.0), &Vector3::x()).unwrap();
        assert_eq!(hit, None);
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        let bvh = Bvh::build(&single_triangle()).unwrap();
        assert!(bvh.ray_first_hit(&Point3::origin(), &Vector3::new(0.0, 0.0, 2.0)).is_err());
    }

    #[test]
    fn random_rays_match_exhaustive_loop() {
        let mesh = TriMesh::icosphere(3);
        let bvh = Bvh::build(&mesh).unwrap();
        assert!(bvh.check_nesting());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0;
        for _ in 0..1000 {
            let origin = Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let target = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let dir = (target - origin).normalize();
            let fast = bvh.ray_first_hit(&origin, &dir).unwrap();
            let slow = brute_force_first_hit(&mesh, &origin, &dir);
            assert_eq!(fast, slow);
            hits += fast.is_some() as usize;
        }
        assert!(hits > 100);
    }

    #[test]
    fn lone_triangle_fully_visible() {
        let mesh = single_triangle();
        let bvh = Bvh::build(&mesh).unwrap();
        let pose = camera_at([0.0, 0.0, 2.0]);
        let vis = visible_vertices(&mesh, &pose, &bvh);
        assert_eq!(vis.indices(), &[0, 1, 2]);
        assert_eq!(vis, brute_force_visible(&mesh, &pose));
    }

    #[test]
    fn near_quad_occludes_far_quad() {
        let mesh = stacked_quads();
        let bvh = Bvh::build(&mesh).unwrap();
        let pose = camera_at([0.0, 0.0, 3.0]);
        let vis = visible_vertices(&mesh, &pose, &bvh);
        // Segments from (0,0,3) to the far corners (±0.5, ±0.5, 0) pass the
        // z = 1 plane at (±1/3, ±1/3), inside the near quad.
        assert_eq!(vis.indices(), &[4, 5, 6, 7]);
        assert_eq!(vis, brute_force_visible(&mesh, &pose));
        // Off to the side, some far corners peek out.
        let pose = camera_at([2.0, 0.3, 2.5]);
        assert_eq!(visible_vertices(&mesh, &pose, &bvh), brute_force_visible(&mesh, &pose));
    }

    #[test]
    fn icosphere_sees_front_hemisphere() {
        let mesh = TriMesh::icosphere(3);
        let bvh = Bvh::build(&mesh).unwrap();
        let pose = camera_at([0.0, 0.0, 4.0]);
        let vis = visible_vertices(&mesh, &pose, &bvh);
        assert_eq!(vis, brute_force_visible(&mesh, &pose));
        // Horizon from distance 4 on a unit sphere sits at z = 1/4.
        for (i, v) in mesh.vertices().iter().enumerate() {
            if v.z > 0.3 {
                assert!(vis.contains(i as u32), "vertex {i} at z={} should be visible", v.z);
            }
            if v.z < 0.2 {
                assert!(!vis.contains(i as u32), "vertex {i} at z={} should be hidden", v.z);
            }
        }
    }

    #[test]
    fn removing_a_triangle_never_hides_vertices() {
        let mesh = TriMesh::icosphere(2);
        let pose = camera_at([0.4, 1.0, 3.0]);
        let full = visible_vertices(&mesh, &pose, &Bvh::build(&mesh).unwrap());
        for f in (0..mesh.faces().len()).step_by(17) {
            let cut = mesh.without_face(f);
            let vis = visible_vertices(&cut, &pose, &Bvh::build(&cut).unwrap());
            assert!(full.is_subset(&vis));
        }
    }

    #[test]
    fn visibility_is_thread_count_independent() {
        let mesh = TriMesh::icosphere(3);
        let bvh = Bvh::build(&mesh).unwrap();
        let pose = camera_at([1.0, 0.5, 3.5]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| visible_vertices(&mesh, &pose, &bvh));
        let b = four.install(|| visible_vertices(&mesh, &pose, &bvh));
        assert_eq!(a, b);
    }

    #[test]
    fn camera_inside_detection() {
        let mesh = TriMesh::icosphere(2);
        let bvh = Bvh::build(&mesh).unwrap();
        assert!(bvh.contains_point(&Point3::new(0.1, 0.0, 0.2)));
        assert!(!bvh.contains_point(&Point3::new(0.0, 0.0, 3.0)));
    }
}
