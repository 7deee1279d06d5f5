//! Bounding-volume hierarchy over triangles: closest-point and segment
//! occlusion queries.

use crate::geometry::vec3::{add, cross, dist2, dot, scale, sub};
use crate::geometry::Point3;

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Point3,
    hi: Point3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow(&mut self, p: Point3) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a]);
        }
    }

    fn dist2(&self, p: Point3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.lo[a] {
                self.lo[a] - p[a]
            } else if p[a] > self.hi[a] {
                p[a] - self.hi[a]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    /// Slab test for the segment `o + t·d`, `t ∈ [0, 1]`.
    fn hits_segment(&self, o: Point3, d: Point3) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.lo[a] - o[a]) * inv, (self.hi[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Leaf { start: u32, end: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb,
    kind: Kind,
}

/// Result of a closest-point query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Closest {
    pub dist2: f64,
    pub point: Point3,
    /// Caller-supplied id of the closest triangle.
    pub id: u32,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    tris: Vec<[Point3; 3]>,
    ids: Vec<u32>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl Bvh {
    /// Builds over `tris`; `ids[i]` is reported for triangle `i`.
    pub fn build(tris: Vec<[Point3; 3]>, ids: Vec<u32>) -> Self {
        assert_eq!(tris.len(), ids.len());
        let mut bvh = Self {
            order: (0..tris.len() as u32).collect(),
            tris,
            ids,
            nodes: Vec::new(),
        };
        if !bvh.tris.is_empty() {
            let centroids: Vec<Point3> = bvh
                .tris
                .iter()
                .map(|t| scale(add(add(t[0], t[1]), t[2]), 1.0 / 3.0))
                .collect();
            bvh.build_node(&centroids, 0, bvh.tris.len());
        }
        bvh
    }

    pub fn from_mesh(mesh: &super::TriangleMesh) -> Self {
        let tris = (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        let ids = (0..mesh.triangles.len() as u32).collect();
        Self::build(tris, ids)
    }

    /// BVH over a subset of a mesh's triangles; ids are mesh triangle indices.
    pub fn from_subset(mesh: &super::TriangleMesh, subset: &[u32]) -> Self {
        let tris = subset.iter().map(|&t| mesh.corners(t as usize)).collect();
        Self::build(tris, subset.to_vec())
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    fn build_node(&mut self, centroids: &[Point3], start: usize, end: usize) -> u32 {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &i in &self.order[start..end] {
            for &p in &self.tris[i as usize] {
                bounds.grow(p);
            }
            cb.grow(centroids[i as usize]);
        }
        let id = self.nodes.len() as u32;
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node {
                bounds,
                kind: Kind::Leaf {
                    start: start as u32,
                    end: end as u32,
                },
            });
            return id;
        }
        let axis = (0..3)
            .max_by(|&a, &b| (cb.hi[a] - cb.lo[a]).total_cmp(&(cb.hi[b] - cb.lo[b])))
            .unwrap();
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis])
        });
        self.nodes.push(Node {
            bounds,
            kind: Kind::Leaf { start: 0, end: 0 },
        });
        let left = self.build_node(centroids, start, mid);
        let right = self.build_node(centroids, mid, end);
        self.nodes[id as usize].kind = Kind::Inner { left, right };
        id
    }

    /// Exact closest point on any triangle. `None` for an empty hierarchy.
    pub fn closest(&self, p: Point3) -> Option<Closest> {
        if self.tris.is_empty() {
            return None;
        }
        let mut best = Closest {
            dist2: f64::INFINITY,
            point: p,
            id: u32::MAX,
        };
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.bounds.dist2(p) > best.dist2 {
                continue;
            }
            match node.kind {
                Kind::Leaf { start, end } => {
                    for &i in &self.order[start as usize..end as usize] {
                        let [a, b, c] = self.tris[i as usize];
                        let q = closest_point_on_triangle(p, a, b, c);
                        let d = dist2(p, q);
                        let id = self.ids[i as usize];
                        if d < best.dist2 || (d == best.dist2 && id < best.id) {
                            best = Closest { dist2: d, point: q, id };
                        }
                    }
                }
                Kind::Inner { left, right } => {
                    let dl = self.nodes[left as usize].bounds.dist2(p);
                    let dr = self.nodes[right as usize].bounds.dist2(p);
                    // Push the farther child first so the nearer is searched first.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        Some(best)
    }

    pub fn distance(&self, p: Point3) -> Option<f64> {
        self.closest(p).map(|c| c.dist2.sqrt())
    }

    /// Whether the open segment `a→b` crosses any triangle other than `skip`.
    pub fn segment_hits(&self, a: Point3, b: Point3, skip: Option<u32>) -> bool {
        if self.tris.is_empty() {
            return false;
        }
        let d = sub(b, a);
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if !node.bounds.hits_segment(a, d) {
                continue;
            }
            match node.kind {
                Kind::Leaf { start, end } => {
                    for &i in &self.order[start as usize..end as usize] {
                        if Some(self.ids[i as usize]) == skip {
                            continue;
                        }
                        let [p, q, r] = self.tris[i as usize];
                        if segment_triangle(a, d, p, q, r) {
                            return true;
                        }
                    }
                }
                Kind::Inner { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        false
    }
}

/// Möller–Trumbore intersection restricted to `t ∈ (0, 1)`.
pub fn segment_triangle(o: Point3, d: Point3, a: Point3, b: Point3, c: Point3) -> bool {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let h = cross(d, e2);
    let det = dot(e1, h);
    if det.abs() < 1e-15 {
        return false;
    }
    let inv = 1.0 / det;
    let s = sub(o, a);
    let u = inv * dot(s, h);
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = cross(s, e1);
    let v = inv * dot(d, q);
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    let t = inv * dot(e2, q);
    t > 0.0 && t < 1.0
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: Point3, a: Point3, b: Point3, c: Point3) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

/// Linear scan over triangles; used as an oracle.
pub fn brute_force_distance(tris: &[[Point3; 3]], p: Point3) -> f64 {
    tris.iter()
        .map(|t| dist2(p, closest_point_on_triangle(p, t[0], t[1], t[2])))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}
