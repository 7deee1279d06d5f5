//! Procedural shape families with a known per-point parameterization, used
//! as ground-truth correspondences between instances of one family.

use std::collections::HashMap;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mesh::{icosphere, TriangleMesh};
use crate::error::{Error, Result};
use crate::geometry::Point3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Box,
    Ellipsoid,
    #[serde(alias = "couch")]
    CapsuleCouch,
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Family::Box),
            "ellipsoid" => Ok(Family::Ellipsoid),
            "capsule-couch" | "couch" => Ok(Family::CapsuleCouch),
            _ => Err(Error::Validation(format!(
                "unknown family '{s}' (expected box, ellipsoid or capsule-couch)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Box => "box",
            Family::Ellipsoid => "ellipsoid",
            Family::CapsuleCouch => "capsule-couch",
        })
    }
}

/// Axis-aligned solid made of grid cells. `lines[a]` are the cell
/// boundaries along axis `a`; `canonical[a]` are the matching boundaries of
/// the family template, which define the per-axis parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rectilinear {
    pub lines: [Vec<f64>; 3],
    pub canonical: [Vec<f64>; 3],
    /// Occupancy of the coarse cells, x-major.
    pub filled: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { half: [f64; 3] },
    Ellipsoid { radii: [f64; 3] },
    Couch { solid: Rectilinear, dims: Vec<f64> },
}

/// Target edge length for refined rectilinear meshes.
const CELL: f64 = 0.125;

impl Primitive {
    pub fn family(&self) -> Family {
        match self {
            Primitive::Box { .. } => Family::Box,
            Primitive::Ellipsoid { .. } => Family::Ellipsoid,
            Primitive::Couch { .. } => Family::CapsuleCouch,
        }
    }

    /// Shape parameters as a flat vector (for distinctness checks).
    pub fn param_vector(&self) -> Vec<f64> {
        match self {
            Primitive::Box { half } => half.to_vec(),
            Primitive::Ellipsoid { radii } => radii.to_vec(),
            Primitive::Couch { dims, .. } => dims.clone(),
        }
    }

    pub fn draw(family: Family, rng: &mut impl Rng) -> Self {
        match family {
            Family::Box => Primitive::Box {
                half: [0; 3].map(|_| rng.random_range(0.5..1.0)),
            },
            Family::Ellipsoid => Primitive::Ellipsoid {
                radii: [0; 3].map(|_| rng.random_range(0.5..1.0)),
            },
            Family::CapsuleCouch => {
                let w = rng.random_range(1.6..2.4);
                let d = rng.random_range(0.8..1.2);
                let seat = rng.random_range(0.3..0.5);
                let arm = seat + rng.random_range(0.15..0.3);
                let back = arm + rng.random_range(0.2..0.4);
                let arm_w = rng.random_range(0.15..0.3);
                let back_t = rng.random_range(0.15..0.3);
                let dims = vec![w, d, seat, arm, back, arm_w, back_t];
                Primitive::Couch {
                    solid: couch_solid(&dims),
                    dims,
                }
            }
        }
    }

    pub fn mesh(&self) -> TriangleMesh {
        match self {
            Primitive::Box { half } => rectilinear_box(*half, 0),
            Primitive::Ellipsoid { radii } => {
                let mut m = icosphere(3);
                for v in &mut m.vertices {
                    for a in 0..3 {
                        v[a] *= radii[a];
                    }
                }
                m
            }
            Primitive::Couch { solid, .. } => solid.mesh(0),
        }
    }

    /// Maps a surface point (in the primitive's own frame) to family-shared
    /// coordinates.
    pub fn param(&self, p: Point3) -> Point3 {
        match self {
            Primitive::Box { half } => [0, 1, 2].map(|a| p[a] / half[a]),
            Primitive::Ellipsoid { radii } => [0, 1, 2].map(|a| p[a] / radii[a]),
            Primitive::Couch { solid, .. } => {
                [0, 1, 2].map(|a| piecewise(&solid.lines[a], &solid.canonical[a], p[a]))
            }
        }
    }

    /// Inverse of [`Primitive::param`].
    pub fn unparam(&self, u: Point3) -> Point3 {
        match self {
            Primitive::Box { half } => [0, 1, 2].map(|a| u[a] * half[a]),
            Primitive::Ellipsoid { radii } => [0, 1, 2].map(|a| u[a] * radii[a]),
            Primitive::Couch { solid, .. } => {
                [0, 1, 2].map(|a| piecewise(&solid.canonical[a], &solid.lines[a], u[a]))
            }
        }
    }
}

/// Monotone piecewise-linear map sending `from[i]` to `to[i]`, extended
/// linearly beyond the ends.
fn piecewise(from: &[f64], to: &[f64], x: f64) -> f64 {
    let n = from.len();
    let i = match from.iter().position(|&b| x < b) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => n - 2,
    }
    .min(n - 2);
    let t = (x - from[i]) / (from[i + 1] - from[i]);
    to[i] + t * (to[i + 1] - to[i])
}

/// Seat, back and two arms on a 3×3×2 coarse grid (x: width, y: up,
/// z: depth with the back at low z).
fn couch_solid(dims: &[f64]) -> Rectilinear {
    let (w, d, seat, arm, back, arm_w, back_t) =
        (dims[0], dims[1], dims[2], dims[3], dims[4], dims[5], dims[6]);
    let lines = [
        vec![-w / 2.0, -w / 2.0 + arm_w, w / 2.0 - arm_w, w / 2.0],
        vec![0.0, seat, arm, back],
        vec![-d / 2.0, -d / 2.0 + back_t, d / 2.0],
    ];
    let canonical = [
        vec![-1.0, -0.75, 0.75, 1.0],
        vec![0.0, 0.4, 0.65, 1.0],
        vec![-1.0, -0.6, 1.0],
    ];
    let mut filled = vec![false; 3 * 3 * 2];
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..2 {
                let seat_cell = y == 0;
                let back_cell = z == 0;
                let arm_cell = y == 1 && x != 1;
                filled[(x * 3 + y) * 2 + z] = seat_cell || back_cell || arm_cell;
            }
        }
    }
    Rectilinear {
        lines,
        canonical,
        filled,
    }
}

/// Closed box with half-extents `half`, refined so edges are at most about
/// [`CELL`] long (or `splits` segments per side when non-zero).
pub fn rectilinear_box(half: [f64; 3], splits: usize) -> TriangleMesh {
    Rectilinear {
        lines: half.map(|h| vec![-h, h]),
        canonical: [0; 3].map(|_| vec![-1.0, 1.0]),
        filled: vec![true],
    }
    .mesh(splits)
}

impl Rectilinear {
    fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.lines[a].len() - 1)
    }

    /// Boundary surface between filled and empty cells after splitting each
    /// coarse interval into segments of at most [`CELL`] (or exactly
    /// `splits` when non-zero). Watertight whenever no two filled cells meet
    /// only along an edge.
    pub fn mesh(&self, splits: usize) -> TriangleMesh {
        let coarse = self.dims();
        let mut fine_lines: [Vec<f64>; 3] = Default::default();
        let mut owner: [Vec<usize>; 3] = Default::default();
        for a in 0..3 {
            let l = &self.lines[a];
            fine_lines[a].push(l[0]);
            for i in 0..coarse[a] {
                let len = l[i + 1] - l[i];
                let k = if splits > 0 { splits } else { (len / CELL).ceil().max(1.0) as usize };
                for j in 1..=k {
                    fine_lines[a].push(l[i] + len * j as f64 / k as f64);
                    owner[a].push(i);
                }
            }
        }
        let n = [0, 1, 2].map(|a| owner[a].len());
        let filled = |c: [isize; 3]| -> bool {
            if (0..3).any(|a| c[a] < 0 || c[a] >= n[a] as isize) {
                return false;
            }
            let k = [0, 1, 2].map(|a| owner[a][c[a] as usize]);
            self.filled[(k[0] * coarse[1] + k[1]) * coarse[2] + k[2]]
        };
        let mut index: HashMap<[usize; 3], u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut vid = |g: [usize; 3], vertices: &mut Vec<Point3>| -> u32 {
            *index.entry(g).or_insert_with(|| {
                vertices.push([0, 1, 2].map(|a| fine_lines[a][g[a]]));
                vertices.len() as u32 - 1
            })
        };
        let mut triangles = Vec::new();
        for x in 0..n[0] {
            for y in 0..n[1] {
                for z in 0..n[2] {
                    let c = [x as isize, y as isize, z as isize];
                    if !filled(c) {
                        continue;
                    }
                    for a in 0..3 {
                        for dir in [-1isize, 1] {
                            let mut nb = c;
                            nb[a] += dir;
                            if filled(nb) {
                                continue;
                            }
                            let (b, cc) = ((a + 1) % 3, (a + 2) % 3);
                            let mut g = [x, y, z];
                            if dir > 0 {
                                g[a] += 1;
                            }
                            let corner = |db: usize, dc: usize| {
                                let mut q = g;
                                q[b] += db;
                                q[cc] += dc;
                                q
                            };
                            let q = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                            let v = q.map(|q| vid(q, &mut vertices));
                            // e_b × e_c = e_a, so this winding faces +a.
                            if dir > 0 {
                                triangles.push([v[0], v[1], v[2]]);
                                triangles.push([v[0], v[2], v[3]]);
                            } else {
                                triangles.push([v[0], v[2], v[1]]);
                                triangles.push([v[0], v[3], v[2]]);
                            }
                        }
                    }
                }
            }
        }
        TriangleMesh {
            vertices,
            triangles,
        }
    }
}

/// `n` independently drawn primitives of one family, normalized, with their
/// parameters.
pub fn gen_primitive_corpus(
    n: usize,
    family: Family,
    seed: u64,
) -> Result<Vec<(Primitive, TriangleMesh, super::mesh::Transform)>> {
    if n == 0 {
        return Err(Error::Validation("corpus needs at least one instance".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = super::instance_rng(seed, i as u64, 0);
            let prim = Primitive::draw(family, &mut rng);
            let (mesh, tf) = super::normalize_mesh(&prim.mesh())?;
            Ok((prim, mesh, tf))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec3::norm;

    #[test]
    fn every_family_is_closed_and_outward() {
        for fam in [Family::Box, Family::Ellipsoid, Family::CapsuleCouch] {
            for (prim, mesh, _) in gen_primitive_corpus(5, fam, 3).unwrap() {
                assert!(mesh.is_watertight(), "{fam} {:?}", mesh.watertight_report());
                assert!(mesh.signed_volume() > 0.0, "{fam}");
                let r = mesh.vertices.iter().map(|&v| norm(v)).fold(0.0, f64::max);
                assert!((r - 1.0 / 1.03).abs() < 1e-12);
                assert_eq!(prim.family(), fam);
            }
        }
    }

    #[test]
    fn box_aspect_ratios_are_bounded() {
        for (prim, _, _) in gen_primitive_corpus(20, Family::Box, 1).unwrap() {
            let h = prim.param_vector();
            for a in 0..3 {
                for b in 0..3 {
                    let r = h[a] / h[b];
                    assert!((0.5..=2.0).contains(&r));
                }
            }
        }
    }

    #[test]
    fn param_round_trip() {
        for fam in [Family::Box, Family::Ellipsoid, Family::CapsuleCouch] {
            let (prim, _, _) = gen_primitive_corpus(1, fam, 8).unwrap().remove(0);
            for &v in prim.mesh().vertices.iter().take(50) {
                let back = prim.unparam(prim.param(v));
                assert!((0..3).all(|a| (back[a] - v[a]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn family_names_parse() {
        assert_eq!("couch".parse::<Family>().unwrap(), Family::CapsuleCouch);
        assert_eq!("capsule-couch".parse::<Family>().unwrap(), Family::CapsuleCouch);
        assert!("torus".parse::<Family>().is_err());
    }
}
