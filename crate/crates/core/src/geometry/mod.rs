//! Point-set kernels: nearest neighbours, Chamfer, F1, FPS, Huber.

mod diff;
mod kdtree;
mod metrics;
mod pointset;
pub mod vec3;

pub use diff::{diff_chamfer_bi, diff_chamfer_single, diff_huber};
pub use kdtree::{nearest_brute, KdTree};
pub use metrics::{
    chamfer_bi, chamfer_bi_with, chamfer_single, chamfer_single_with, f1_score, f1_score_with,
    fidelity, fps, fps_points, huber, mmd, nearest_all, nearest_all_tree,
};
pub use pointset::{PointSet, Provenance};
pub use vec3::Point3;
