//! Camera placement, visible-surface sampling and UDF sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::bvh::Bvh;
use super::mesh::TriangleMesh;
use crate::error::{Error, Result};
use crate::geometry::vec3::{add, dot, norm, normalize, scale, sub};
use crate::geometry::Point3;

/// Offset along the camera ray before the occlusion test.
pub const RAY_EPS: f64 = 1e-6;

/// Maximum surface draws per requested visible point.
const DRAW_BUDGET: usize = 64;

/// Centrally symmetric Fibonacci sphere of `n` points at `radius`, rotated by
/// a seeded uniform random rotation.
pub fn sample_cameras(n: usize, radius: f64, rng: &mut impl Rng) -> Vec<Point3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts = vec![[0.0; 3]; n];
    for i in 0..n.div_ceil(2) {
        let z = 1.0 - (2 * i + 1) as f64 / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let th = golden * i as f64;
        pts[i] = [r * th.cos(), r * th.sin(), z];
        if n - 1 - i != i {
            pts[n - 1 - i] = scale(pts[i], -1.0);
        }
    }
    let rot = random_rotation(rng);
    pts.iter()
        .map(|&p| scale(mat_vec(&rot, p), radius))
        .collect()
}

fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: Point3) -> Point3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Area-weighted surface sampler.
pub struct SurfaceSampler<'a> {
    mesh: &'a TriangleMesh,
    cdf: Vec<f64>,
}

impl<'a> SurfaceSampler<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Self {
        let mut acc = 0.0;
        let cdf = (0..mesh.triangles.len())
            .map(|t| {
                acc += mesh.area(t);
                acc
            })
            .collect();
        Self { mesh, cdf }
    }

    /// Random point and the triangle it lies on.
    pub fn sample(&self, rng: &mut impl Rng) -> (Point3, u32) {
        let total = *self.cdf.last().expect("non-empty mesh");
        let u = rng.random_range(0.0..total);
        let t = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        let [a, b, c] = self.mesh.corners(t);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let p = add(
            add(scale(a, 1.0 - s), scale(b, s * (1.0 - r2))),
            scale(c, s * r2),
        );
        (p, t as u32)
    }
}

/// Whether surface point `p` on triangle `tri` is seen from `cam`: the
/// triangle faces the camera and nothing blocks the segment to it.
pub fn is_visible(mesh: &TriangleMesh, bvh: &Bvh, p: Point3, tri: u32, cam: Point3) -> bool {
    let v = sub(cam, p);
    if dot(mesh.face_cross(tri as usize), v) <= 0.0 {
        return false;
    }
    let start = add(p, scale(normalize(v), RAY_EPS));
    !bvh.segment_hits(start, cam, Some(tri))
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub points: Vec<Point3>,
    /// Triangle of each kept point.
    pub point_triangles: Vec<u32>,
    /// Triangles forming the seen surface: every triangle holding a kept
    /// point plus every triangle whose centroid is visible. Sorted.
    pub visible_triangles: Vec<u32>,
    pub draws: usize,
}

/// Samples up to `n_points` visible surface points. Draws stop after
/// `64·n_points` attempts; a view with no visible point is an error.
pub fn render_partial(
    mesh: &TriangleMesh,
    bvh: &Bvh,
    cam: Point3,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<RenderedView> {
    if mesh.is_empty() {
        return Err(Error::Generation("cannot render an empty mesh".into()));
    }
    let sampler = SurfaceSampler::new(mesh);
    let mut points = Vec::with_capacity(n_points);
    let mut point_triangles = Vec::with_capacity(n_points);
    let mut draws = 0;
    while points.len() < n_points && draws < DRAW_BUDGET * n_points {
        draws += 1;
        let (p, t) = sampler.sample(rng);
        if is_visible(mesh, bvh, p, t, cam) {
            points.push(p);
            point_triangles.push(t);
        }
    }
    if points.is_empty() {
        return Err(Error::Generation(format!(
            "no visible surface from camera {cam:?} after {draws} draws"
        )));
    }
    let mut vis = vec![false; mesh.triangles.len()];
    for &t in &point_triangles {
        vis[t as usize] = true;
    }
    for (t, v) in vis.iter_mut().enumerate() {
        if !*v {
            let [a, b, c] = mesh.corners(t);
            let centroid = scale(add(add(a, b), c), 1.0 / 3.0);
            *v = is_visible(mesh, bvh, centroid, t as u32, cam);
        }
    }
    let visible_triangles = (0..vis.len() as u32).filter(|&t| vis[t as usize]).collect();
    Ok(RenderedView {
        points,
        point_triangles,
        visible_triangles,
        draws,
    })
}

/// Uniform point in the unit ball by rejection.
pub fn uniform_in_ball(rng: &mut impl Rng) -> Point3 {
    loop {
        let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        if dot(p, p) <= 1.0 {
            return p;
        }
    }
}

/// UDF samples `(x, y, z, d)`: `n_near` jittered surface points (half with
/// std `sigmas.0`, half with `sigmas.1`) plus `n_uniform` points in the unit
/// ball. `d` is the exact distance to the triangles in `partial`.
pub fn sample_udf(
    surface: &[Point3],
    partial: &Bvh,
    n_near: usize,
    n_uniform: usize,
    sigmas: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<[f64; 4]>> {
    if surface.is_empty() || partial.is_empty() {
        return Err(Error::Contract("UDF sampling needs a non-empty partial surface".into()));
    }
    let n1 = Normal::new(0.0, sigmas.0).map_err(|e| Error::Config(e.to_string()))?;
    let n2 = Normal::new(0.0, sigmas.1).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(n_near + n_uniform);
    for i in 0..n_near {
        let base = surface[rng.random_range(0..surface.len())];
        let dist = if i < n_near / 2 { &n1 } else { &n2 };
        let p = [0, 1, 2].map(|a| base[a] + dist.sample(rng));
        out.push(p);
    }
    for _ in 0..n_uniform {
        out.push(uniform_in_ball(rng));
    }
    Ok(out
        .into_iter()
        .map(|p| {
            let d = partial.distance(p).expect("non-empty");
            [p[0], p[1], p[2], d]
        })
        .collect())
}

/// Fraction of the sampled surface area seen from `cam`, estimated by
/// `n` uniform draws.
pub fn visible_fraction(mesh: &TriangleMesh, bvh: &Bvh, cam: Point3, n: usize, rng: &mut impl Rng) -> f64 {
    let sampler = SurfaceSampler::new(mesh);
    let seen = (0..n)
        .filter(|_| {
            let (p, t) = sampler.sample(rng);
            is_visible(mesh, bvh, p, t, cam)
        })
        .count();
    seen as f64 / n as f64
}

pub fn angle_between(a: Point3, b: Point3) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scansynth::mesh::{icosphere, normalize_mesh};
    use crate::seeds;

    #[test]
    fn two_cameras_are_antipodal() {
        let c = sample_cameras(2, 2.0, &mut seeds::rng(1, &[]));
        assert!(norm(add(c[0], c[1])) < 1e-12);
        assert!((norm(c[0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn thirty_cameras_are_spread() {
        let c = sample_cameras(30, 2.0, &mut seeds::rng(4, &[]));
        let mut min = f64::INFINITY;
        for i in 0..30 {
            for j in 0..i {
                min = min.min(angle_between(c[i], c[j]));
            }
        }
        assert!(min.to_degrees() > 20.0, "{}", min.to_degrees());
        assert_eq!(c, sample_cameras(30, 2.0, &mut seeds::rng(4, &[])));
    }

    #[test]
    fn sphere_seen_from_far_away_is_half_visible() {
        let (m, _) = normalize_mesh(&icosphere(4)).unwrap();
        let bvh = Bvh::from_mesh(&m);
        let f = visible_fraction(&m, &bvh, [0.0, 0.0, 1000.0], 4000, &mut seeds::rng(2, &[]));
        assert!((f - 0.5).abs() < 0.05, "{f}");
        // At distance R a sphere of radius r shows a cap of area fraction (1 - r/R)/2.
        let r = 1.0 / 1.03;
        let f2 = visible_fraction(&m, &bvh, [0.0, 2.0, 0.0], 4000, &mut seeds::rng(3, &[]));
        assert!((f2 - (1.0 - r / 2.0) / 2.0).abs() < 0.03, "{f2}");
    }

    #[test]
    fn single_triangle_front_and_back() {
        let m = TriangleMesh::new(
            vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.0, 0.5, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let bvh = Bvh::from_mesh(&m);
        let mut rng = seeds::rng(0, &[]);
        let v = render_partial(&m, &bvh, [0.0, 0.0, 2.0], 100, &mut rng).unwrap();
        assert_eq!((v.points.len(), v.draws), (100, 100));
        assert!(render_partial(&m, &bvh, [0.0, 0.0, -2.0], 100, &mut rng).is_err());
    }

    #[test]
    fn udf_offsets_along_flat_normal() {
        let m = TriangleMesh::new(
            vec![[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let bvh = Bvh::from_mesh(&m);
        assert!(bvh.distance([0.0, 0.0, 0.0]).unwrap() < 1e-9);
        assert!((bvh.distance([0.1, 0.0, 0.37]).unwrap() - 0.37).abs() < 1e-12);
    }
}
