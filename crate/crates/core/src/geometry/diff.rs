//! Differentiable Chamfer and Huber losses on the tape. Nearest pairs are
//! selected on the current values; gradients flow only through them.

use super::metrics::nearest_all;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Execution;

fn points_of(tape: &Tape, v: Var, op: &'static str) -> Result<Vec<[f64; 3]>> {
    let t = tape.value(v);
    let (n, c) = t.dims2(op)?;
    if c != 3 {
        return Err(Error::dim(op, format!("expected N×3, got {:?}", t.shape())));
    }
    if n == 0 {
        return Err(Error::Contract(format!("{op} needs non-empty point sets")));
    }
    t.to_points()
}

/// Mean over rows of `a` of the squared distance to the nearest row of `b`.
pub fn diff_chamfer_single(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let pa = points_of(tape, a, "diff_chamfer_single")?;
    let pb = points_of(tape, b, "diff_chamfer_single")?;
    let idx: Vec<usize> = nearest_all(&pa, &pb, Execution::Sequential)
        .into_iter()
        .map(|x| x.0)
        .collect();
    let matched = tape.gather(b, &idx)?;
    let d = tape.sub(a, matched)?;
    let sq = tape.square(d);
    let per = tape.sum_cols(sq)?;
    tape.mean(per)
}

pub fn diff_chamfer_bi(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = diff_chamfer_single(tape, a, b)?;
    let ba = diff_chamfer_single(tape, b, a)?;
    tape.add(ab, ba)
}

/// Mean Huber of the entries of `a`.
pub fn diff_huber(tape: &mut Tape, a: Var, delta: f64) -> Result<Var> {
    let h = tape.huber(a, delta)?;
    tape.mean(h)
}
