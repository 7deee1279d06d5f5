//! Marching cubes on the eps level set of a sampled UDF.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::mc_tables::{CORNERS, EDGES, TRIANGLES};
use super::project::DistanceField;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::vec3::lerp;
use crate::geometry::Point3;
use crate::scansynth::TriangleMesh;

pub const DEFAULT_BOUND: f64 = 1.1;

/// UDF values at the nodes of a regular `r³` grid over `[-b, b]³`.
/// Node `(i, j, k)` is stored at `i + r·(j + r·k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub resolution: usize,
    pub bound: f64,
    pub values: Vec<f64>,
}

impl FieldGrid {
    fn check(resolution: usize, bound: f64) -> Result<()> {
        if resolution < 8 {
            return Err(Error::Config(format!("grid resolution {resolution} < 8")));
        }
        if !(bound > 0.0) {
            return Err(Error::Config(format!("grid bound {bound} must be positive")));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.bound / (self.resolution - 1) as f64
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Point3 {
        let h = self.cell_size();
        [i, j, k].map(|c| -self.bound + c as f64 * h)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        let r = self.resolution;
        self.values[i + r * (j + r * k)]
    }

    fn nodes(resolution: usize, bound: f64) -> Vec<Point3> {
        let h = 2.0 * bound / (resolution - 1) as f64;
        let r = resolution;
        (0..r * r * r)
            .map(|n| [n % r, (n / r) % r, n / (r * r)].map(|c| -bound + c as f64 * h))
            .collect()
    }

    /// Samples a closure, e.g. an analytic oracle.
    pub fn from_fn(resolution: usize, bound: f64, f: impl Fn(Point3) -> f64 + Sync + Send, exec: Execution) -> Result<Self> {
        Self::check(resolution, bound)?;
        let nodes = Self::nodes(resolution, bound);
        let values = exec.map(&nodes, |&p| f(p));
        Ok(Self {
            resolution,
            bound,
            values,
        })
    }

    /// Evaluates `field` in chunks of `chunk` nodes.
    pub fn evaluate(field: &dyn DistanceField, resolution: usize, bound: f64, chunk: usize, exec: Execution) -> Result<Self> {
        Self::check(resolution, bound)?;
        let nodes = Self::nodes(resolution, bound);
        let chunks: Vec<&[Point3]> = nodes.chunks(chunk.max(1)).collect();
        let parts = exec.try_map_range(chunks.len(), |c| field.eval(chunks[c]))?;
        let values: Vec<f64> = parts.into_iter().flatten().collect();
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!("field value {v} is not a finite distance")));
        }
        Ok(Self {
            resolution,
            bound,
            values,
        })
    }
}

/// Output of [`mc_mesh`]. `empty` flags a level set that never crosses the
/// grid.
#[derive(Clone, Debug)]
pub struct McMesh {
    pub mesh: TriangleMesh,
    pub empty: bool,
}

/// Grid edge id: lower node index times 3 plus axis.
fn edge_key(r: usize, cell: [usize; 3], e: usize) -> u64 {
    let [a, b] = EDGES[e];
    let (ca, cb) = (CORNERS[a], CORNERS[b]);
    let lo: [usize; 3] = std::array::from_fn(|d| cell[d] + ca[d].min(cb[d]));
    let axis = (0..3).find(|&d| ca[d] != cb[d]).expect("edge spans one axis");
    (((lo[2] * r + lo[1]) * r + lo[0]) * 3 + axis) as u64
}

/// Marching cubes on `values − eps`. Cells are processed in z-slabs (in
/// parallel when enabled) and merged in slab order, so vertex and triangle
/// order do not depend on the execution mode. Vertices are shared through
/// their grid edge, which makes each closed shell watertight.
pub fn mc_mesh(grid: &FieldGrid, eps: f64, exec: Execution) -> Result<McMesh> {
    let r = grid.resolution;
    if grid.values.len() != r * r * r {
        return Err(Error::Contract(format!(
            "grid of resolution {r} holds {} values",
            grid.values.len()
        )));
    }
    let slabs: Vec<Vec<[u64; 3]>> = exec.map_range(r - 1, |k| {
        let mut tris = Vec::new();
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let mut case = 0usize;
                for (c, o) in CORNERS.iter().enumerate() {
                    if grid.value(i + o[0], j + o[1], k + o[2]) < eps {
                        case |= 1 << c;
                    }
                }
                let row = &TRIANGLES[case];
                for t in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                    tris.push([0, 1, 2].map(|m| edge_key(r, [i, j, k], t[m] as usize)));
                }
            }
        }
        tris
    });
    let mut index: HashMap<u64, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let ids = tri.map(|key| {
            *index.entry(key).or_insert_with(|| {
                vertices.push(edge_vertex(grid, key, eps));
                (vertices.len() - 1) as u32
            })
        });
        triangles.push(ids);
    }
    let empty = triangles.is_empty();
    Ok(McMesh {
        mesh: TriangleMesh::new(vertices, triangles)?,
        empty,
    })
}

fn edge_vertex(grid: &FieldGrid, key: u64, eps: f64) -> Point3 {
    let r = grid.resolution;
    let axis = (key % 3) as usize;
    let n = (key / 3) as usize;
    let lo = [n % r, (n / r) % r, n / (r * r)];
    let mut hi = lo;
    hi[axis] += 1;
    let (va, vb) = (grid.value(lo[0], lo[1], lo[2]), grid.value(hi[0], hi[1], hi[2]));
    let t = if va == vb { 0.5 } else { ((eps - va) / (vb - va)).clamp(0.0, 1.0) };
    lerp(grid.node(lo[0], lo[1], lo[2]), grid.node(hi[0], hi[1], hi[2]), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec3::norm;

    fn sphere_grid(res: usize) -> FieldGrid {
        FieldGrid::from_fn(res, DEFAULT_BOUND, |p| (norm(p) - 0.5).abs(), Execution::default()).unwrap()
    }

    #[test]
    fn sphere_shells() {
        let g = sphere_grid(48);
        let out = mc_mesh(&g, 0.01, Execution::default()).unwrap();
        assert!(!out.empty);
        let h = g.cell_size();
        let (mut inner, mut outer) = (0, 0);
        for v in &out.mesh.vertices {
            let r = norm(*v);
            let err = (r - 0.49).abs().min((r - 0.51).abs());
            assert!(err < 2.0 * h, "radius {r}");
            if r < 0.5 {
                inner += 1
            } else {
                outer += 1
            }
        }
        assert!(inner > 0 && outer > 0);
        let rep = out.mesh.watertight_report();
        assert!(rep.is_watertight(), "{rep:?}");
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let g = sphere_grid(24);
        let a = mc_mesh(&g, 0.05, Execution::Sequential).unwrap();
        let b = mc_mesh(&g, 0.05, Execution::default()).unwrap();
        assert_eq!(a.mesh, b.mesh);
    }

    #[test]
    fn degenerate_levels() {
        let g = sphere_grid(12);
        assert!(mc_mesh(&g, -1.0, Execution::default()).unwrap().empty);
        assert!(mc_mesh(&g, 100.0, Execution::default()).unwrap().empty);
        assert!(FieldGrid::from_fn(4, 1.0, |_| 0.0, Execution::default()).is_err());
    }

    #[test]
    fn vertices_lie_on_crossing_edges() {
        let g = sphere_grid(16);
        let eps = 0.05;
        let out = mc_mesh(&g, eps, Execution::default()).unwrap();
        let h = g.cell_size();
        for v in &out.mesh.vertices {
            // Exactly one coordinate is off-grid, and the straddled edge crosses eps.
            let f = v.map(|c| (c + g.bound) / h);
            let off: Vec<usize> = (0..3).filter(|&d| (f[d] - f[d].round()).abs() > 1e-9).collect();
            assert!(off.len() <= 1);
            let mut lo = f.map(|c| c.round() as usize);
            let mut hi = lo;
            if let Some(&d) = off.first() {
                lo[d] = f[d].floor() as usize;
                hi[d] = lo[d] + 1;
            }
            let (a, b) = (g.value(lo[0], lo[1], lo[2]), g.value(hi[0], hi[1], hi[2]));
            assert!((a - eps) * (b - eps) <= 0.0);
        }
    }
}
