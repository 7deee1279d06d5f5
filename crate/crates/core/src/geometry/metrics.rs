use super::kdtree::{nearest_brute, KdTree};
use super::vec3::{dist2, Point3};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Below this many reference points a linear scan beats building a tree.
const BRUTE_LIMIT: usize = 32;

fn non_empty(a: &[Point3], b: &[Point3], op: &str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(format!(
            "{op} needs non-empty point sets (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// For every query, the index of its nearest point in `refs` and the squared
/// distance. Ties go to the lowest index.
pub fn nearest_all(queries: &[Point3], refs: &[Point3], exec: Execution) -> Vec<(usize, f64)> {
    if refs.len() <= BRUTE_LIMIT {
        return exec.map_chunks(queries, 256, |c| c.iter().map(|&q| nearest_brute(refs, q)).collect());
    }
    let tree = KdTree::build(refs);
    nearest_all_tree(queries, &tree, exec)
}

pub fn nearest_all_tree(queries: &[Point3], tree: &KdTree, exec: Execution) -> Vec<(usize, f64)> {
    exec.map_chunks(queries, 256, |c| c.iter().map(|&q| tree.nearest(q)).collect())
}

fn mean_nn_d2(a: &[Point3], b: &[Point3], exec: Execution) -> f64 {
    let nn = nearest_all(a, b, exec);
    nn.iter().map(|x| x.1).sum::<f64>() / a.len() as f64
}

/// Mean over `a` of the squared distance to the nearest point of `b`.
pub fn chamfer_single(a: &[Point3], b: &[Point3]) -> Result<f64> {
    chamfer_single_with(a, b, Execution::Sequential)
}

pub fn chamfer_single_with(a: &[Point3], b: &[Point3], exec: Execution) -> Result<f64> {
    non_empty(a, b, "chamfer_single")?;
    Ok(mean_nn_d2(a, b, exec))
}

/// Sum of both directed mean squared nearest-neighbour distances.
pub fn chamfer_bi(a: &[Point3], b: &[Point3]) -> Result<f64> {
    chamfer_bi_with(a, b, Execution::Sequential)
}

pub fn chamfer_bi_with(a: &[Point3], b: &[Point3], exec: Execution) -> Result<f64> {
    non_empty(a, b, "chamfer_bi")?;
    Ok(mean_nn_d2(a, b, exec) + mean_nn_d2(b, a, exec))
}

/// F1 at threshold `tau` (unsquared Euclidean distance), in percent.
pub fn f1_score(pred: &[Point3], gt: &[Point3], tau: f64) -> Result<f64> {
    f1_score_with(pred, gt, tau, Execution::Sequential)
}

pub fn f1_score_with(pred: &[Point3], gt: &[Point3], tau: f64, exec: Execution) -> Result<f64> {
    non_empty(pred, gt, "f1_score")?;
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("f1 threshold must be positive, got {tau}")));
    }
    let within = |q: &[Point3], r: &[Point3]| {
        let nn = nearest_all(q, r, exec);
        nn.iter().filter(|x| x.1.sqrt() <= tau).count() as f64 / q.len() as f64
    };
    let precision = within(pred, gt);
    let recall = within(gt, pred);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

/// Farthest point sampling: greedy max-min selection starting at
/// `seed_index`. Returns indices into `points`; ties go to the lowest index.
pub fn fps(points: &[Point3], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("fps needs 1 <= k <= N, got k={k}, N={n}")));
    }
    if seed_index >= n {
        return Err(Error::Contract(format!("fps seed index {seed_index} out of {n}")));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = seed_index;
    for _ in 0..k {
        selected.push(cur);
        taken[cur] = true;
        let c = points[cur];
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(points[i], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.1 {
                best = (i, min_d[i]);
            }
        }
        cur = best.0;
    }
    Ok(selected)
}

/// [`fps`] returning the selected coordinates.
pub fn fps_points(points: &[Point3], k: usize, seed_index: usize) -> Result<Vec<Point3>> {
    Ok(fps(points, k, seed_index)?.into_iter().map(|i| points[i]).collect())
}

/// `t²/2` inside `[-delta, delta]`, linear with matching slope outside.
pub fn huber(t: f64, delta: f64) -> f64 {
    let a = t.abs();
    if a <= delta {
        0.5 * t * t
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Single-sided Chamfer from a partial scan to its completion.
pub fn fidelity(partial: &[Point3], completed: &[Point3]) -> Result<f64> {
    chamfer_single(partial, completed)
}

/// Minimal matching distance: smallest bidirectional Chamfer to any reference.
pub fn mmd(completed: &[Point3], refs: &[Vec<Point3>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Contract("mmd needs a non-empty reference corpus".into()));
    }
    let mut best = f64::INFINITY;
    for r in refs {
        best = best.min(chamfer_bi(completed, r)?);
    }
    Ok(best)
}
