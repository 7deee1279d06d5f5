//! Template-based implicit field: a code-conditioned warp `D` into a shared
//! canonical space followed by a UDF decoder `T`, plus the INR losses.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, Init, Mlp, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::extract::{project_points, DistanceField, Projection, ProjectionConfig};
use crate::geometry::vec3::dist2;
use crate::geometry::{diff_huber, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub code_dim: usize,
    pub warp_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Std of the last warp layer, so training starts near the identity.
    pub warp_init_std: f64,
    pub clamp_dist: f64,
    pub huber_delta: f64,
    pub pp_pairs: usize,
    pub l3: f64,
    pub l4: f64,
    pub reduction: Reduction,
    /// Points in the template cloud `P`.
    pub template_points: usize,
    pub template_projection: ProjectionConfig,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            code_dim: 128,
            warp_hidden: vec![256; 8],
            decoder_hidden: vec![256; 3],
            warp_init_std: 1e-4,
            clamp_dist: 0.1,
            huber_delta: 0.25,
            pp_pairs: 256,
            l3: 0.0005,
            l4: 0.0001,
            reduction: Reduction::Mean,
            template_points: 512,
            template_projection: ProjectionConfig {
                iterations: 20,
                ..ProjectionConfig::default()
            },
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 || self.decoder_hidden.is_empty() {
            return Err(Error::Config("template network needs a code and decoder layers".into()));
        }
        if self.l3 < 0.0 || self.l4 < 0.0 || !(self.clamp_dist > 0.0) || !(self.huber_delta > 0.0) {
            return Err(Error::Config("template loss weights must be >= 0, clamp and delta > 0".into()));
        }
        if self.template_points == 0 {
            return Err(Error::Config("template_points must be positive".into()));
        }
        Ok(())
    }
}

/// Layer layout of `θ_T`. Parameters live in a separate [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateNet {
    pub cfg: TemplateConfig,
    pub warp: Mlp,
    pub decoder: Mlp,
}

impl TemplateNet {
    pub fn new(cfg: TemplateConfig, rng: &mut impl Rng) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut ps = ParamSet::new("theta_T");
        let mut wd = vec![3 + cfg.code_dim];
        wd.extend(&cfg.warp_hidden);
        wd.push(3);
        let last = wd.len() - 2;
        let std = cfg.warp_init_std;
        let warp = Mlp::new(&mut ps, "warp", &wd, Activation::Relu, Activation::Identity, |i| {
            if i == last {
                Init::Normal(std)
            } else {
                Init::KaimingUniform
            }
        }, rng);
        let mut dd = vec![3];
        dd.extend(&cfg.decoder_hidden);
        dd.push(1);
        let decoder = Mlp::new(&mut ps, "decoder", &dd, Activation::Relu, Activation::Tanh, |_| {
            Init::KaimingUniform
        }, rng);
        Ok((Self { cfg, warp, decoder }, ps))
    }

    /// `D(x; code) = x + MLP([x, code])` for `x: N×3`, `code: 1×k`.
    pub fn warp(&self, tape: &mut Tape, p: &Bound, x: Var, code: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let c = tape.broadcast_rows(code, n)?;
        let inp = tape.concat_cols(x, c)?;
        let off = self.warp.forward(tape, p, inp)?;
        tape.add(x, off)
    }

    /// `T(x) = |tanh(MLP(x))|` as an `N×1` column.
    pub fn udf(&self, tape: &mut Tape, p: &Bound, xc: Var) -> Result<Var> {
        let t = self.decoder.forward(tape, p, xc)?;
        Ok(tape.abs(t))
    }

    /// `T(D(x; code))`; also returns the canonical coordinates.
    pub fn field(&self, tape: &mut Tape, p: &Bound, x: Var, code: Var) -> Result<(Var, Var)> {
        let xc = self.warp(tape, p, x, code)?;
        Ok((self.udf(tape, p, xc)?, xc))
    }
}

/// Mean absolute error against clamped targets.
pub fn loss_t(tape: &mut Tape, pred: Var, targets: &[f64], clamp: f64) -> Result<Var> {
    let n = tape.value(pred).len();
    if n != targets.len() || n == 0 {
        return Err(Error::Contract(format!(
            "{n} UDF predictions for {} targets",
            targets.len()
        )));
    }
    let shape = tape.value(pred).shape().to_vec();
    let t = tape.constant(Tensor::new(shape, targets.iter().map(|d| d.min(clamp)).collect())?);
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    tape.mean(a)
}

fn reduce(tape: &mut Tape, v: Var, r: Reduction) -> Result<Var> {
    match r {
        Reduction::Mean => tape.mean(v),
        Reduction::Sum => Ok(tape.sum(v)),
    }
}

/// Huber of the warp displacement norm, per point.
pub fn loss_pw(tape: &mut Tape, x: Var, warped: Var, delta: f64, r: Reduction) -> Result<Var> {
    let d = tape.sub(warped, x)?;
    let sq = tape.square(d);
    let s = tape.sum_cols(sq)?;
    let len = tape.sqrt(s)?;
    match r {
        Reduction::Mean => diff_huber(tape, len, delta),
        Reduction::Sum => {
            let h = tape.huber(len, delta)?;
            Ok(tape.sum(h))
        }
    }
}

/// Random index pairs `(i, j)` with distinct coordinates.
pub fn sample_pairs(points: &[Point3], n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let m = points.len();
    let mut out = Vec::with_capacity(n);
    if m < 2 {
        return out;
    }
    for _ in 0..n {
        let v = sample_indices(rng, m, 2);
        let (i, j) = (v.index(0), v.index(1));
        if dist2(points[i], points[j]) > 0.0 {
            out.push((i, j));
        }
    }
    out
}

/// `‖Δx_i − Δx_j‖ / ‖x_i − x_j‖` over the given pairs, with `Δx = D(x) − x`.
/// Pairs of coincident points are skipped.
pub fn loss_pp(
    tape: &mut Tape,
    x: Var,
    warped: Var,
    pairs: &[(usize, usize)],
    r: Reduction,
) -> Result<Var> {
    let pts = tape.value(x).to_points()?;
    let pairs: Vec<(usize, usize)> = pairs
        .iter()
        .copied()
        .filter(|&(i, j)| dist2(pts[i], pts[j]) > 0.0)
        .collect();
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let delta = tape.sub(warped, x)?;
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let a = tape.gather(delta, &is)?;
    let b = tape.gather(delta, &js)?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let s = tape.sum_cols(sq)?;
    let len = tape.sqrt(s)?;
    let inv: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| 1.0 / dist2(pts[i], pts[j]).sqrt())
        .collect();
    let inv = tape.constant(Tensor::column(inv));
    let ratio = tape.mul(len, inv)?;
    let ratio = tape.relu(ratio);
    reduce(tape, ratio, r)
}

/// `L_T + l3·L_pw + l4·L_pp`.
pub fn inr_loss(tape: &mut Tape, l_t: Var, l_pw: Var, l_pp: Var, l3: f64, l4: f64) -> Result<Var> {
    let a = tape.scale(l_pw, l3);
    let b = tape.scale(l_pp, l4);
    let s = tape.add(l_t, a)?;
    tape.add(s, b)
}

/// One observation's share of the INR objective.
pub struct InrTerms {
    pub l_t: Var,
    pub l_pw: Var,
    pub l_pp: Var,
}

/// Builds `L_T`, `L_pw`, `L_pp` for one shape: `udf_pts`/`udf_d` are the
/// supervised samples (surface anchors included with `d = 0`), `surface` is
/// `X'` used by the warp regularizers.
#[allow(clippy::too_many_arguments)]
pub fn inr_terms(
    net: &TemplateNet,
    tape: &mut Tape,
    p: &Bound,
    code: Var,
    udf_pts: &[Point3],
    udf_d: &[f64],
    surface: &[Point3],
    pairs: &[(usize, usize)],
) -> Result<InrTerms> {
    let xs = tape.constant(Tensor::from_points(udf_pts));
    let (pred, _) = net.field(tape, p, xs, code)?;
    let l_t = loss_t(tape, pred, udf_d, net.cfg.clamp_dist)?;
    let xp = tape.constant(Tensor::from_points(surface));
    let wp = net.warp(tape, p, xp, code)?;
    let l_pw = loss_pw(tape, xp, wp, net.cfg.huber_delta, net.cfg.reduction)?;
    let l_pp = loss_pp(tape, xp, wp, pairs, net.cfg.reduction)?;
    Ok(InrTerms { l_t, l_pw, l_pp })
}

/// The decoder `T` alone (canonical space) or the conditioned field
/// `T∘D(·; code)`, evaluated on a parameter snapshot.
pub struct NetworkField<'a> {
    pub net: &'a TemplateNet,
    pub params: &'a ParamSet,
    pub code: Option<Vec<f64>>,
}

impl DistanceField for NetworkField<'_> {
    fn eval_grad(&self, pts: &[Point3]) -> Result<(Vec<f64>, Vec<Point3>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_const(&mut tape);
        let x = tape.leaf(Tensor::from_points(pts), true);
        let d = match &self.code {
            Some(c) => {
                let code = tape.constant(Tensor::row(c.clone()));
                self.net.field(&mut tape, &p, x, code)?.0
            }
            None => self.net.udf(&mut tape, &p, x)?,
        };
        let vals = tape.value(d).data().to_vec();
        let s = tape.sum(d);
        tape.backward(s)?;
        let g = tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; pts.len() * 3]);
        Ok((vals, g.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
    }
}

/// Template cloud `P`: points near the zero level set of `T` in canonical
/// space.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateCloud {
    pub points: Vec<Point3>,
    /// Training iteration at which it was extracted.
    pub iteration: u64,
    /// Fewer survivors than requested.
    pub short: bool,
}

pub fn extract_template(
    field: &dyn DistanceField,
    n_points: usize,
    cfg: &ProjectionConfig,
    seed: u64,
    iteration: u64,
    exec: Execution,
) -> Result<TemplateCloud> {
    let Projection { points, complete, .. } = project_points(field, n_points, cfg, seed, exec)?;
    Ok(TemplateCloud {
        points,
        iteration,
        short: !complete,
    })
}
