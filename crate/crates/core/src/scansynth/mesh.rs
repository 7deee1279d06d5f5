use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::vec3::{add, cross, norm, scale, sub};
use crate::geometry::Point3;

/// Margin kept between a normalized mesh and the unit sphere.
pub const NORMALIZE_MARGIN: f64 = 1.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

/// Edge-manifold check: a closed mesh has every undirected edge on exactly
/// two triangles.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatertightReport {
    pub boundary_edges: usize,
    pub nonmanifold_edges: usize,
}

impl WatertightReport {
    pub fn is_watertight(&self) -> bool {
        self.boundary_edges == 0 && self.nonmanifold_edges == 0
    }
}

/// `x_normalized = (x - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub center: Point3,
    pub scale: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        scale(sub(p, self.center), self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        add(scale(p, 1.0 / self.scale), self.center)
    }
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Validation(format!(
                "triangle {t:?} references a vertex outside 0..{n}"
            )));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Validation("mesh has non-finite vertex coordinates".into()));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized normal (twice the area, right-hand winding).
    pub fn face_cross(&self, t: usize) -> Point3 {
        let [a, b, c] = self.corners(t);
        cross(sub(b, a), sub(c, a))
    }

    pub fn area(&self, t: usize) -> f64 {
        0.5 * norm(self.face_cross(t))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    /// Signed enclosed volume; positive for outward-oriented closed meshes.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                crate::geometry::vec3::dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn watertight_report(&self) -> WatertightReport {
        let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let mut r = WatertightReport::default();
        for &c in edges.values() {
            match c {
                2 => {}
                1 => r.boundary_edges += 1,
                _ => r.nonmanifold_edges += 1,
            }
        }
        r
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight_report().is_watertight()
    }

    /// Drops zero-area triangles and unreferenced vertices.
    pub fn cleaned(&self) -> Self {
        let keep: Vec<[u32; 3]> = (0..self.triangles.len())
            .filter(|&t| self.area(t) > 1e-14)
            .map(|t| self.triangles[t])
            .collect();
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let triangles = keep
            .iter()
            .map(|t| {
                t.map(|i| {
                    if remap[i as usize] == u32::MAX {
                        remap[i as usize] = vertices.len() as u32;
                        vertices.push(self.vertices[i as usize]);
                    }
                    remap[i as usize]
                })
            })
            .collect();
        Self {
            vertices,
            triangles,
        }
    }

    /// Area-weighted centroid of the surface.
    pub fn surface_centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            let [a, b, d] = self.corners(t);
            let w = self.area(t);
            let m = scale(add(add(a, b), d), 1.0 / 3.0);
            c = add(c, scale(m, w));
            total += w;
        }
        scale(c, 1.0 / total)
    }

    pub fn transformed(&self, tf: &Transform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| tf.apply(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// Centers the surface centroid at the origin and scales the farthest vertex
/// to radius `1/1.03`.
pub fn normalize_mesh(m: &TriangleMesh) -> Result<(TriangleMesh, Transform)> {
    let m = m.cleaned();
    if m.is_empty() {
        return Err(Error::Validation("mesh is empty or fully degenerate".into()));
    }
    let report = m.watertight_report();
    if !report.is_watertight() {
        return Err(Error::Validation(format!(
            "mesh is not watertight: {} boundary edges, {} non-manifold edges",
            report.boundary_edges, report.nonmanifold_edges
        )));
    }
    let center = m.surface_centroid();
    let r = m
        .vertices
        .iter()
        .map(|&v| norm(sub(v, center)))
        .fold(0.0, f64::max);
    if !(r > 0.0) {
        return Err(Error::Validation("mesh has zero extent".into()));
    }
    let tf = Transform {
        center,
        scale: 1.0 / (NORMALIZE_MARGIN * r),
    };
    Ok((m.transformed(&tf), tf))
}

/// Icosphere of radius 1 after `subdivisions` rounds of 4-way splitting.
pub fn icosphere(subdivisions: u32) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3> = [
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
    .map(|&v| crate::geometry::vec3::normalize(v))
    .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
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
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Point3>| -> u32 {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let p = crate::geometry::vec3::lerp(vertices[a as usize], vertices[b as usize], 0.5);
                vertices.push(crate::geometry::vec3::normalize(p));
                vertices.len() as u32 - 1
            })
        };
        for &[a, b, c] in &triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube_at(c: f64) -> TriangleMesh {
        crate::scansynth::primitives::rectilinear_box([0.5; 3], 1).transformed(&Transform {
            center: [-c; 3],
            scale: 1.0,
        })
    }

    #[test]
    fn cube_is_centered_and_scaled() {
        let (m, tf) = normalize_mesh(&unit_cube_at(5.0)).unwrap();
        let c = m.surface_centroid();
        assert!(norm(c) < 1e-12);
        let r = m.vertices.iter().map(|&v| norm(v)).fold(0.0, f64::max);
        assert!((r - 1.0 / 1.03).abs() < 1e-12);
        assert!((tf.center[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_mesh_is_a_fixed_point() {
        let (m, _) = normalize_mesh(&icosphere(2)).unwrap();
        let (_, tf) = normalize_mesh(&m).unwrap();
        assert!(norm(tf.center) < 1e-12);
        assert!((tf.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hole_is_rejected() {
        let mut m = icosphere(1);
        m.triangles.pop();
        let err = normalize_mesh(&m).unwrap_err().to_string();
        assert!(err.contains("3 boundary edges"), "{err}");
    }

    #[test]
    fn icosphere_is_closed_and_outward() {
        let m = icosphere(3);
        assert!(m.is_watertight());
        assert_eq!(m.triangles.len(), 1280);
        assert!(m.signed_volume() > 0.0);
    }
}
