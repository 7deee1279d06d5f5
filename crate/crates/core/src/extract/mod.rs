//! Surface extraction from implicit fields: gradient projection, eps-shell
//! marching cubes and canonical-space correspondences.

mod correspondences;
mod mc;
mod mc_tables;
mod project;

pub use correspondences::{correspondences, match_canonical};
pub use mc::{mc_mesh, FieldGrid, McMesh, DEFAULT_BOUND};
pub use project::{project_points, DistanceField, Projection, ProjectionConfig, SphereUdf};
