//! Mesh and point-cloud file I/O. OBJ is parsed by `tobj`, PLY by `ply-rs`.

use std::io::BufReader;
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Ply, Property};

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Reads an OBJ or PLY mesh, chosen by file extension.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => read_obj(path),
        Some("ply") => read_ply_mesh(path),
        _ => Err(Error::format(path, "unsupported mesh extension (expected .obj or .ply)")),
    }
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let opts = tobj::LoadOptions {
        triangulate: true,
        single_index: true,
        ..Default::default()
    };
    let (models, _) = tobj::load_obj(path, &opts).map_err(|e| Error::format(path, e.to_string()))?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for m in models {
        let base = vertices.len() as u32;
        vertices.extend(m.mesh.positions.chunks_exact(3).map(|p| [p[0], p[1], p[2]]));
        triangles.extend(
            m.mesh
                .indices
                .chunks_exact(3)
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }
    TriangleMesh::new(vertices, triangles).map_err(|e| Error::format(path, e.to_string()))
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn index_list(p: &Property) -> Option<Vec<u32>> {
    Some(match p {
        Property::ListUChar(v) => v.iter().map(|&i| i as u32).collect(),
        Property::ListChar(v) => v.iter().map(|&i| i as u32).collect(),
        Property::ListShort(v) => v.iter().map(|&i| i as u32).collect(),
        Property::ListUShort(v) => v.iter().map(|&i| i as u32).collect(),
        Property::ListInt(v) => v.iter().map(|&i| i as u32).collect(),
        Property::ListUInt(v) => v.clone(),
        _ => return None,
    })
}

fn read_ply(path: &Path) -> Result<Ply<DefaultElement>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Parser::<DefaultElement>::new()
        .read_ply(&mut BufReader::new(f))
        .map_err(|e| Error::format(path, e.to_string()))
}

fn ply_vertices(ply: &Ply<DefaultElement>, path: &Path) -> Result<Vec<Point3>> {
    let verts = ply
        .payload
        .get("vertex")
        .ok_or_else(|| Error::format(path, "PLY has no vertex element"))?;
    verts
        .iter()
        .map(|v| {
            let c = |k: &str| {
                v.get(k)
                    .and_then(scalar)
                    .ok_or_else(|| Error::format(path, format!("vertex without numeric '{k}'")))
            };
            Ok([c("x")?, c("y")?, c("z")?])
        })
        .collect()
}

/// Reads ASCII or binary PLY; polygons are fan-triangulated.
pub fn read_ply_mesh(path: &Path) -> Result<TriangleMesh> {
    let ply = read_ply(path)?;
    let vertices = ply_vertices(&ply, path)?;
    let mut triangles = Vec::new();
    for f in ply.payload.get("face").map(|v| v.as_slice()).unwrap_or(&[]) {
        let idx = f
            .get("vertex_indices")
            .or_else(|| f.get("vertex_index"))
            .and_then(index_list)
            .ok_or_else(|| Error::format(path, "face without a vertex index list"))?;
        for k in 1..idx.len().saturating_sub(1) {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    TriangleMesh::new(vertices, triangles).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_ply_points(path: &Path) -> Result<Vec<Point3>> {
    ply_vertices(&read_ply(path)?, path)
}

fn ply_header(n_vertices: usize, n_faces: Option<usize>) -> String {
    let mut h = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {n_vertices}\n\
         property double x\nproperty double y\nproperty double z\n"
    );
    if let Some(f) = n_faces {
        h.push_str(&format!("element face {f}\nproperty list uchar uint vertex_indices\n"));
    }
    h.push_str("end_header\n");
    h
}

fn push_vertices(buf: &mut Vec<u8>, points: &[Point3]) {
    for p in points {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
}

// Written by hand: the binary list writer of ply-rs 0.1.3 omits the list
// length prefix, producing files no reader (including its own) accepts.

/// Binary little-endian PLY with double vertices and `uint` index lists.
pub fn write_ply_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut buf = ply_header(mesh.vertices.len(), Some(mesh.triangles.len())).into_bytes();
    push_vertices(&mut buf, &mesh.vertices);
    for t in &mesh.triangles {
        buf.push(3);
        for i in t {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Binary little-endian PLY point cloud.
pub fn write_ply_points(path: &Path, points: &[Point3]) -> Result<()> {
    let mut buf = ply_header(points.len(), None).into_bytes();
    push_vertices(&mut buf, points);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scansynth::mesh::icosphere;

    #[test]
    fn ply_round_trip_binary_and_ascii() {
        let dir = tempfile::tempdir().unwrap();
        let m = icosphere(1);
        let p = dir.path().join("m.ply");
        write_ply_mesh(&p, &m).unwrap();
        assert_eq!(read_mesh(&p).unwrap(), m);

        let ascii = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
                     element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                     0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let q = dir.path().join("q.ply");
        std::fs::write(&q, ascii).unwrap();
        let quad = read_mesh(&q).unwrap();
        assert_eq!(quad.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn obj_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.ply");
        let pts = vec![[0.1, -0.2, 0.3], [1.0, 2.0, 3.0]];
        write_ply_points(&p, &pts).unwrap();
        assert_eq!(read_ply_points(&p).unwrap(), pts);
    }
}
