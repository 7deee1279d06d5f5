//! Synthetic partial-scan corpus: procedural shapes, visibility rendering,
//! UDF sampling and on-disk formats.

pub mod bvh;
mod dataset;
mod format;
mod mesh;
mod meshio;
mod primitives;
mod render;

pub use bvh::{brute_force_distance, closest_point_on_triangle, Bvh};
pub use dataset::{
    build_dataset, primitive_sources, sample_surface, Dataset, DatasetConfig, DatasetManifest,
    InstanceEntry, ShapeSource, Split, ViewEntry, MANIFEST_FILE,
};
pub use format::{
    decode_observation, encode_observation, read_observation, write_observation,
    PartialObservation, GT_VIEW, PUDF_MAGIC, PUDF_VERSION,
};
pub use mesh::{icosphere, normalize_mesh, Transform, TriangleMesh, WatertightReport, NORMALIZE_MARGIN};
pub use meshio::{read_mesh, read_obj, read_ply_mesh, read_ply_points, write_ply_mesh, write_ply_points};
pub use primitives::{gen_primitive_corpus, rectilinear_box, Family, Primitive, Rectilinear};
pub use render::{
    angle_between, is_visible, render_partial, sample_cameras, sample_udf, uniform_in_ball,
    visible_fraction, RenderedView, SurfaceSampler, RAY_EPS,
};

pub(crate) fn instance_rng(seed: u64, instance: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    crate::seeds::rng(seed, &[instance, stream])
}
