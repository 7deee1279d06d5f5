//! Dense correspondences through the shared canonical space.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{nearest_all, Point3};

/// For each canonical query point, the pre-warp position of the nearest
/// canonical target point. `target` and `target_canon` are index-aligned.
pub fn match_canonical(
    query_canon: &[Point3],
    target_canon: &[Point3],
    target: &[Point3],
    exec: Execution,
) -> Result<Vec<Point3>> {
    if target.len() != target_canon.len() || target.is_empty() {
        return Err(Error::Contract(format!(
            "{} target points for {} canonical positions",
            target.len(),
            target_canon.len()
        )));
    }
    Ok(nearest_all(query_canon, target_canon, exec)
        .into_iter()
        .map(|(i, _)| target[i])
        .collect())
}

/// Warps `query` under `code_a` and `target` under `code_b`, then matches in
/// canonical space.
pub fn correspondences<W>(
    warp: W,
    query: &[Point3],
    code_a: &[f64],
    target: &[Point3],
    code_b: &[f64],
    exec: Execution,
) -> Result<Vec<Point3>>
where
    W: Fn(&[Point3], &[f64]) -> Result<Vec<Point3>>,
{
    let qa = warp(query, code_a)?;
    let tb = warp(target, code_b)?;
    match_canonical(&qa, &tb, target, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec3::add;

    fn grid() -> Vec<Point3> {
        (0..27).map(|n| [(n % 3) as f64, ((n / 3) % 3) as f64, (n / 9) as f64].map(|c| 0.3 * c)).collect()
    }

    #[test]
    fn same_code_subset_is_identity() {
        let pts = grid();
        let ident = |p: &[Point3], _: &[f64]| Ok(p.to_vec());
        let q = &pts[3..9];
        let m = correspondences(ident, q, &[0.0], &pts, &[0.0], Execution::default()).unwrap();
        assert_eq!(m, q);
    }

    #[test]
    fn translated_copy_recovers_pairing() {
        let a = grid();
        let t = [1.5, -0.25, 0.75];
        let b: Vec<Point3> = a.iter().map(|&p| add(p, t)).collect();
        // Identity warp after removing each shape's offset, which the code carries.
        let warp = |p: &[Point3], c: &[f64]| Ok(p.iter().map(|&x| [x[0] - c[0], x[1] - c[1], x[2] - c[2]]).collect());
        let m = correspondences(warp, &a, &[0.0; 3], &b, &t, Execution::default()).unwrap();
        assert_eq!(m.len(), a.len());
        assert_eq!(m, b);
    }

    #[test]
    fn misaligned_target_is_rejected() {
        assert!(match_canonical(&grid(), &grid(), &grid()[..3], Execution::default()).is_err());
    }
}
