//! Face contour of the projected vertices: Delaunay triangulation, alpha
//! shape extraction, point-in-polygon classification and interior pixel
//! enumeration.

use std::collections::HashMap;

use nalgebra::Point2;
use rayon::prelude::*;
use spade::{DelaunayTriangulation, Triangulation};

use crate::error::{Error, Result};
use crate::geometry::PixelCoord;

pub use crate::knn::{knn_projected, KdTree, KnnTable};

/// Delaunay triangulation of a deduplicated point set.
#[derive(Debug, Clone)]
pub struct Triangulation2D {
    /// Distinct input points in lexicographic (x, then y) order.
    pub points: Vec<Point2<f64>>,
    /// Index of each point in the caller's input (first occurrence).
    pub source: Vec<usize>,
    /// Counter-clockwise vertex triples into `points`.
    pub triangles: Vec<[usize; 3]>,
}

fn lex_cmp(a: &Point2<f64>, b: &Point2<f64>) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Incremental Delaunay triangulation with exact predicates. Exact
/// duplicates are dropped; points are inserted in lexicographic order so
/// the output does not depend on input order.
pub fn delaunay_2d(points: &[Point2<f64>]) -> Result<Triangulation2D> {
    if let Some(i) = points.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::InvalidArgument(format!("point {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]).then(a.cmp(&b)));
    order.dedup_by(|a, b| points[*a] == points[*b]);
    if order.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 distinct points, got {}",
            order.len()
        )));
    }

    let mut dt: DelaunayTriangulation<spade::Point2<f64>> = DelaunayTriangulation::new();
    for &i in &order {
        let p = spade::mitigate_underflow(spade::Point2::new(points[i].x, points[i].y));
        dt.insert(p)
            .map_err(|e| Error::Degenerate(format!("point {i} rejected by triangulator: {e:?}")))?;
    }
    if dt.num_inner_faces() == 0 {
        return Err(Error::Degenerate("all points are collinear".into()));
    }
    // Vertex handles are numbered in insertion order.
    let triangles = dt
        .inner_faces()
        .map(|f| f.vertices().map(|v| v.fix().index()))
        .collect();
    Ok(Triangulation2D {
        points: order.iter().map(|&i| points[i]).collect(),
        source: order,
        triangles,
    })
}

impl Triangulation2D {
    pub fn corners(&self, t: usize) -> [Point2<f64>; 3] {
        self.triangles[t].map(|i| self.points[i])
    }

    pub fn circumradius(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        circumradius(&a, &b, &c)
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        orient(&a, &b, &c) / 2.0
    }
}

/// Twice the signed area of `abc`; positive when counter-clockwise.
fn orient(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

pub fn circumradius(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> f64 {
    let ab = (b - a).norm();
    let bc = (c - b).norm();
    let ca = (a - c).norm();
    let twice_area = orient(a, b, c).abs();
    if twice_area == 0.0 {
        return f64::INFINITY;
    }
    ab * bc * ca / (2.0 * twice_area)
}

/// One simple closed contour, counter-clockwise, closure implied.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPolygon {
    vertices: Vec<Point2<f64>>,
}

impl AlphaPolygon {
    /// Wraps a vertex ring, reversing it if it is clockwise.
    pub fn new(mut vertices: Vec<Point2<f64>>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Degenerate("polygon needs at least 3 vertices".into()));
        }
        if vertices.first() == vertices.last() {
            vertices.pop();
        }
        let mut poly = AlphaPolygon { vertices };
        if poly.signed_area() < 0.0 {
            poly.vertices.reverse();
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[Point2<f64>] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2<f64>, Point2<f64>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        self.edges().map(|(a, b)| a.x * b.y - b.x * a.y).sum::<f64>() / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Exhaustive check that no two non-adjacent edges touch and no vertex
    /// repeats.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            for j in i + 1..n {
                if self.vertices[i] == self.vertices[j] {
                    return false;
                }
            }
        }
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if !adjacent && segments_touch(&edges[i], &edges[j]) {
                    return false;
                }
            }
        }
        true
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Point2<f64>, Point2<f64>) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = Point2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Point2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        (lo, hi)
    }
}

fn segments_touch(s: &(Point2<f64>, Point2<f64>), t: &(Point2<f64>, Point2<f64>)) -> bool {
    let d1 = orient(&t.0, &t.1, &s.0);
    let d2 = orient(&t.0, &t.1, &s.1);
    let d3 = orient(&s.0, &s.1, &t.0);
    let d4 = orient(&s.0, &s.1, &t.1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: &Point2<f64>, b: &Point2<f64>, p: &Point2<f64>, d: f64| {
        d == 0.0 && p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
    };
    on(&t.0, &t.1, &s.0, d1) || on(&t.0, &t.1, &s.1, d2) || on(&s.0, &s.1, &t.0, d3) || on(&s.0, &s.1, &t.1, d4)
}

/// Result of [`alpha_shape`].
#[derive(Debug, Clone)]
pub struct AlphaShape {
    pub polygon: AlphaPolygon,
    /// Number of edge-connected components of the kept triangles. Only the
    /// largest one is returned as `polygon`.
    pub component_count: usize,
    pub triangulation: Triangulation2D,
    /// Indices into `triangulation.triangles` of the kept triangles.
    pub kept: Vec<usize>,
}

/// Alpha shape with the "circumradius < 1/alpha" criterion; `alpha = 0`
/// keeps every triangle and yields the convex hull.
pub fn alpha_shape(points: &[Point2<f64>], alpha: f64) -> Result<AlphaShape> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let tri = delaunay_2d(points)?;
    let radii: Vec<f64> = (0..tri.triangles.len()).map(|t| tri.circumradius(t)).collect();
    let kept: Vec<usize> = (0..tri.triangles.len())
        .filter(|&t| alpha == 0.0 || radii[t] * alpha < 1.0)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyAlphaShape {
            min_circumradius: radii.iter().cloned().fold(f64::INFINITY, f64::min),
            max_radius: 1.0 / alpha,
        });
    }

    // Directed boundary edges (kept region on the left) and edge adjacency.
    let mut owners: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for &t in &kept {
        let [a, b, c] = tri.triangles[t];
        for (u, v) in [(a, b), (b, c), (c, a)] {
            owners.entry((u.min(v), u.max(v))).or_default().push(t);
        }
    }

    // Union-find over kept triangles sharing an edge.
    let mut parent: HashMap<usize, usize> = kept.iter().map(|&t| (t, t)).collect();
    fn find(parent: &mut HashMap<usize, usize>, x: usize) -> usize {
        let mut r = x;
        while parent[&r] != r {
            r = parent[&r];
        }
        let mut y = x;
        while parent[&y] != r {
            let next = parent[&y];
            parent.insert(y, r);
            y = next;
        }
        r
    }
    for tris in owners.values() {
        if let [s, t] = tris[..] {
            let (rs, rt) = (find(&mut parent, s), find(&mut parent, t));
            if rs != rt {
                parent.insert(rs.max(rt), rs.min(rt));
            }
        }
    }
    let mut area_by_root: HashMap<usize, f64> = HashMap::new();
    for &t in &kept {
        let r = find(&mut parent, t);
        *area_by_root.entry(r).or_default() += tri.area(t);
    }
    let component_count = area_by_root.len();
    let mut roots: Vec<(usize, f64)> = area_by_root.into_iter().collect();
    // Largest area first; ties go to the component with the smaller root.
    roots.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let best_root = roots[0].0;
    if component_count > 1 {
        log::warn!(
            "alpha shape has {component_count} components; keeping the largest (area {:.3})",
            roots[0].1
        );
    }

    let mut outgoing: HashMap<usize, Vec<usize>> = HashMap::new();
    for &t in &kept {
        if find(&mut parent, t) != best_root {
            continue;
        }
        let [a, b, c] = tri.triangles[t];
        for (u, v) in [(a, b), (b, c), (c, a)] {
            if owners[&(u.min(v), u.max(v))].len() == 1 {
                outgoing.entry(u).or_default().push(v);
            }
        }
    }
    let polygon = outer_loop(&tri.points, outgoing)?;
    Ok(AlphaShape {
        polygon,
        component_count,
        triangulation: tri,
        kept,
    })
}

/// Traces every boundary loop and returns the one enclosing the largest
/// area. At vertices with several outgoing edges the walk takes the first
/// edge clockwise from the reversed incoming edge, which keeps each loop on
/// one wedge of the region so loops never cross.
fn outer_loop(points: &[Point2<f64>], mut outgoing: HashMap<usize, Vec<usize>>) -> Result<AlphaPolygon> {
    let angle = |from: usize, to: usize| {
        let d = points[to] - points[from];
        d.y.atan2(d.x)
    };
    let mut starts: Vec<usize> = outgoing.keys().copied().collect();
    starts.sort_unstable();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for start in starts {
        while let Some(first) = outgoing.get_mut(&start).and_then(|v| v.pop()) {
            let mut ring = vec![start];
            let (mut prev, mut cur) = (start, first);
            while cur != start {
                ring.push(cur);
                let cands = outgoing
                    .get_mut(&cur)
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| Error::Degenerate("open alpha-shape boundary".into()))?;
                let back = angle(cur, prev);
                let pick = (0..cands.len())
                    .min_by(|&i, &j| {
                        let cw = |k: usize| (back - angle(cur, cands[k])).rem_euclid(std::f64::consts::TAU);
                        let (ci, cj) = (cw(i), cw(j));
                        // A zero turn would retrace the incoming edge.
                        let ci = if ci == 0.0 { std::f64::consts::TAU } else { ci };
                        let cj = if cj == 0.0 { std::f64::consts::TAU } else { cj };
                        ci.total_cmp(&cj).then(cands[i].cmp(&cands[j]))
                    })
                    .expect("non-empty candidates");
                let next = cands.swap_remove(pick);
                prev = cur;
                cur = next;
            }
            let area: f64 = (0..ring.len())
                .map(|i| {
                    let (a, b) = (points[ring[i]], points[ring[(i + 1) % ring.len()]]);
                    a.x * b.y - b.x * a.y
                })
                .sum::<f64>()
                / 2.0;
            if best.as_ref().map_or(true, |(ba, _)| area > *ba) {
                best = Some((area, ring));
            }
        }
    }
    let (_, ring) = best.ok_or_else(|| Error::Degenerate("alpha shape has no boundary".into()))?;
    AlphaPolygon::new(ring.into_iter().map(|i| points[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside,
    Boundary,
    Outside,
}

const BOUNDARY_TOL: f64 = 1e-9;

fn segment_distance(p: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    };
    (p - (a + ab * t)).norm()
}

/// Even-odd crossing test; points within 1e-9 of an edge are `Boundary`.
pub fn point_in_polygon(poly: &AlphaPolygon, p: &Point2<f64>) -> Location {
    let mut inside = false;
    for (a, b) in poly.edges() {
        if segment_distance(p, &a, &b) < BOUNDARY_TOL {
            return Location::Boundary;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}

/// Grid pixels inside or on `poly`, minus `exclude`, in row-major order.
/// Rows are classified in parallel.
pub fn interior_points(poly: &AlphaPolygon, width: usize, height: usize, exclude: &[PixelCoord]) -> Vec<PixelCoord> {
    let mut skip = vec![false; width * height];
    for px in exclude {
        if px.row < height && px.col < width {
            skip[px.index(width)] = true;
        }
    }
    let (lo, hi) = poly.bounds();
    if width == 0 || height == 0 || hi.x < 0.0 || hi.y < 0.0 {
        return Vec::new();
    }
    let col0 = lo.x.ceil().max(0.0) as usize;
    let row0 = lo.y.ceil().max(0.0) as usize;
    let col1 = (hi.x.floor().max(-1.0) as i64).min(width as i64 - 1);
    let row1 = (hi.y.floor().max(-1.0) as i64).min(height as i64 - 1);
    if col1 < col0 as i64 || row1 < row0 as i64 {
        return Vec::new();
    }
    let (col1, row1) = (col1 as usize, row1 as usize);
    (row0..=row1)
        .into_par_iter()
        .map(|row| {
            (col0..=col1)
                .filter(|&col| {
                    !skip[row * width + col]
                        && point_in_polygon(poly, &Point2::new(col as f64, row as f64)) != Location::Outside
                })
                .map(|col| PixelCoord { row, col })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect()
}

/// Every grid pixel classified one by one; reference for [`interior_points`].
#[cfg(any(test, feature = "oracle"))]
pub fn brute_force_interior(poly: &AlphaPolygon, width: usize, height: usize, exclude: &[PixelCoord]) -> Vec<PixelCoord> {
    let mut out = Vec::new();
    for row in 0..height {
        for col in 0..width {
            let px = PixelCoord { row, col };
            if !exclude.contains(&px) && point_in_polygon(poly, &px.center()) != Location::Outside {
                out.push(px);
            }
        }
    }
    out
}
