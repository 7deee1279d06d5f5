//! Point extraction from a distance field by gradient projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::vec3::{dot, norm, scale, sub};
use crate::geometry::{fps, Point3};
use crate::scansynth::uniform_in_ball;
use crate::seeds;

/// An unsigned distance field that can report its spatial gradient.
pub trait DistanceField: Sync {
    /// Field values and gradients at `pts`.
    fn eval_grad(&self, pts: &[Point3]) -> Result<(Vec<f64>, Vec<Point3>)>;

    fn eval(&self, pts: &[Point3]) -> Result<Vec<f64>> {
        Ok(self.eval_grad(pts)?.0)
    }
}

/// Exact UDF of a sphere centred at `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereUdf {
    pub center: Point3,
    pub radius: f64,
}

impl DistanceField for SphereUdf {
    fn eval_grad(&self, pts: &[Point3]) -> Result<(Vec<f64>, Vec<Point3>)> {
        Ok(pts
            .iter()
            .map(|&p| {
                let v = sub(p, self.center);
                let r = norm(v);
                let s = r - self.radius;
                let g = if r > 0.0 { scale(v, s.signum() / r) } else { [0.0; 3] };
                (s.abs(), g)
            })
            .unzip())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Candidates drawn uniformly in the ball of radius `radius`.
    pub candidates: usize,
    pub radius: f64,
    pub iterations: usize,
    pub level_tol: f64,
    /// Points per field evaluation chunk.
    pub chunk: usize,
    /// Projected points farther than this from the origin are discarded:
    /// shapes live in the unit ball, and Newton steps on a poorly trained
    /// field can throw candidates far outside it.
    pub keep_radius: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            candidates: 4096,
            radius: 1.0,
            iterations: 10,
            level_tol: 5e-3,
            chunk: 512,
            keep_radius: 1.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<Point3>,
    /// Field value at each returned point.
    pub values: Vec<f64>,
    /// Candidates that ended below `level_tol`.
    pub survivors: usize,
    /// False when fewer than the requested number survived.
    pub complete: bool,
}

/// Field statistics used in extraction diagnostics.
fn stats(v: &[f64]) -> String {
    let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return "no finite values".into();
    }
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    format!("min {min:.3e}, mean {mean:.3e}, max {max:.3e}, {} non-finite", v.len() - finite.len())
}

/// Moves random candidates onto the zero level set with
/// `x ← x − d·∇d/‖∇d‖²`, keeps those with `d < level_tol` and reduces them
/// to `n` points by farthest point sampling. Returns every survivor (with
/// `complete = false`) when fewer than `n` remain.
pub fn project_points(
    field: &dyn DistanceField,
    n: usize,
    cfg: &ProjectionConfig,
    seed: u64,
    exec: Execution,
) -> Result<Projection> {
    if n == 0 || cfg.candidates == 0 {
        return Err(Error::Contract("projection needs n >= 1 and candidates >= 1".into()));
    }
    let mut rng = seeds::rng(seed, &[0x9e0]);
    let start: Vec<Point3> = (0..cfg.candidates)
        .map(|_| scale(uniform_in_ball(&mut rng), cfg.radius))
        .collect();
    let chunk = cfg.chunk.max(1);
    let n_chunks = start.len().div_ceil(chunk);
    let parts = exec.try_map_range(n_chunks, |k| -> Result<(Vec<Point3>, Vec<f64>)> {
        let mut pts = start[k * chunk..((k + 1) * chunk).min(start.len())].to_vec();
        for _ in 0..cfg.iterations {
            let (d, g) = field.eval_grad(&pts)?;
            for ((p, &d), g) in pts.iter_mut().zip(&d).zip(&g) {
                let g2 = dot(*g, *g);
                if g2 > 1e-20 && d.is_finite() {
                    *p = sub(*p, scale(*g, d / g2));
                }
            }
        }
        let d = field.eval(&pts)?;
        Ok((pts, d))
    })?;
    let (mut all_pts, mut all_d) = (Vec::new(), Vec::new());
    for (p, d) in parts {
        all_pts.extend(p);
        all_d.extend(d);
    }
    let keep: Vec<usize> = (0..all_pts.len())
        .filter(|&i| all_d[i] < cfg.level_tol && norm(all_pts[i]) <= cfg.keep_radius)
        .collect();
    if keep.is_empty() {
        return Err(Error::Extraction(format!(
            "no candidate reached the level set (tol {:.1e}) inside radius {} after {} iterations; field {}",
            cfg.level_tol,
            cfg.keep_radius,
            cfg.iterations,
            stats(&all_d)
        )));
    }
    let pts: Vec<Point3> = keep.iter().map(|&i| all_pts[i]).collect();
    let vals: Vec<f64> = keep.iter().map(|&i| all_d[i]).collect();
    let survivors = pts.len();
    if survivors < n {
        log::warn!("projection kept {survivors} of {n} requested points");
        return Ok(Projection {
            points: pts,
            values: vals,
            survivors,
            complete: false,
        });
    }
    let idx = fps(&pts, n, 0)?;
    Ok(Projection {
        points: idx.iter().map(|&i| pts[i]).collect(),
        values: idx.iter().map(|&i| vals[i]).collect(),
        survivors,
        complete: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escaped_points_are_dropped() {
        // Most of this sphere lies outside the unit ball.
        let f = SphereUdf {
            center: [2.0, 0.0, 0.0],
            radius: 1.5,
        };
        let cfg = ProjectionConfig::default();
        let p = project_points(&f, 64, &cfg, 1, Execution::Sequential).unwrap();
        assert!(!p.points.is_empty());
        assert!(p.points.iter().all(|q| norm(*q) <= cfg.keep_radius));
    }

    #[test]
    fn sphere_points_land_on_radius() {
        let f = SphereUdf {
            center: [0.0; 3],
            radius: 0.5,
        };
        let p = project_points(&f, 512, &ProjectionConfig::default(), 3, Execution::default()).unwrap();
        assert!(p.complete);
        assert_eq!(p.points.len(), 512);
        for q in &p.points {
            assert!((norm(*q) - 0.5).abs() < 1e-3);
        }
        let again = project_points(&f, 512, &ProjectionConfig::default(), 3, Execution::Sequential).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn unreachable_level_is_an_error() {
        struct Constant;
        impl DistanceField for Constant {
            fn eval_grad(&self, pts: &[Point3]) -> Result<(Vec<f64>, Vec<Point3>)> {
                Ok((vec![1.0; pts.len()], vec![[0.0; 3]; pts.len()]))
            }
        }
        let err = project_points(&Constant, 8, &ProjectionConfig::default(), 0, Execution::Sequential)
            .unwrap_err()
            .to_string();
        assert!(err.contains("min 1.000e0"), "{err}");
    }
}
