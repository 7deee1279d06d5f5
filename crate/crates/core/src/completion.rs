//! Completion module: shared encoder `E`, missing-part generator `G`,
//! point-splitting upsampler `U`, and the completion-side losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, Init, Mlp, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{diff_chamfer_bi, diff_chamfer_single, fps, Point3, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub code_dim: usize,
    /// Per-point encoder widths before the max-pool.
    pub point_hidden: Vec<usize>,
    pub gen_hidden: Vec<usize>,
    pub n_seeds: usize,
    pub n_coarse: usize,
    pub up_ratio: usize,
    pub up_hidden: Vec<usize>,
    /// Child offsets are `up_scale·tanh(·)`.
    pub up_scale: f64,
    pub gen_init_std: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            code_dim: 128,
            point_hidden: vec![64, 128],
            gen_hidden: vec![256],
            n_seeds: 128,
            n_coarse: 512,
            up_ratio: 4,
            up_hidden: vec![128],
            up_scale: 0.1,
            gen_init_std: 0.01,
            l1: 1.0,
            l2: 1.0,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 || self.point_hidden.is_empty() || self.n_seeds == 0 {
            return Err(Error::Config("completion network needs a code, encoder layers and seeds".into()));
        }
        if self.n_coarse == 0 || self.up_ratio == 0 {
            return Err(Error::Config("n_coarse and up_ratio must be positive".into()));
        }
        if self.l1 < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_output(&self) -> usize {
        self.n_coarse * self.up_ratio
    }
}

/// Layer layout. Encoder and generator live in `θ_G`, the upsampler in `θ_U`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionNet {
    pub cfg: CompletionConfig,
    pub point_mlp: Mlp,
    pub head: Mlp,
    pub generator: Mlp,
    pub upsampler: Mlp,
}

/// Forward products for one partial input.
#[derive(Clone, Debug)]
pub struct CompletionForward {
    pub y: Var,
    pub xc: Var,
    pub x: Var,
    pub c_prime: Var,
    pub c: Var,
    pub c_x: Var,
    pub provenance: Vec<Provenance>,
}

impl CompletionNet {
    pub fn new(cfg: CompletionConfig, rng: &mut impl Rng) -> Result<(Self, ParamSet, ParamSet)> {
        cfg.validate()?;
        let mut g = ParamSet::new("theta_G");
        let mut u = ParamSet::new("theta_U");
        let kaiming = |_| Init::KaimingUniform;
        let mut pd = vec![3];
        pd.extend(&cfg.point_hidden);
        let point_mlp = Mlp::new(&mut g, "enc.point", &pd, Activation::Relu, Activation::Relu, kaiming, rng);
        let pooled = *pd.last().unwrap();
        let head = Mlp::new(&mut g, "enc.head", &[pooled, cfg.code_dim], Activation::Relu, Activation::Identity, kaiming, rng);
        let mut gd = vec![cfg.code_dim];
        gd.extend(&cfg.gen_hidden);
        gd.push(3 * cfg.n_seeds);
        let last = gd.len() - 2;
        let std = cfg.gen_init_std;
        let generator = Mlp::new(&mut g, "gen", &gd, Activation::Relu, Activation::Identity, |i| {
            if i == last {
                Init::Normal(std)
            } else {
                Init::KaimingUniform
            }
        }, rng);
        let mut ud = vec![3 + cfg.code_dim];
        ud.extend(&cfg.up_hidden);
        ud.push(3 * cfg.up_ratio);
        let upsampler = Mlp::new(&mut u, "up", &ud, Activation::Relu, Activation::Tanh, kaiming, rng);
        Ok((
            Self {
                cfg,
                point_mlp,
                head,
                generator,
                upsampler,
            },
            g,
            u,
        ))
    }

    /// Codes of several point sets at once: `B×k`.
    pub fn encode_many(&self, tape: &mut Tape, g: &Bound, sets: &[Var]) -> Result<Var> {
        let lens: Vec<usize> = sets.iter().map(|&s| tape.value(s).rows()).collect();
        let all = if sets.len() == 1 { sets[0] } else { tape.concat_rows(sets)? };
        let h = self.point_mlp.forward(tape, g, all)?;
        let pooled = tape.max_pool_segments(h, &lens)?;
        self.head.forward(tape, g, pooled)
    }

    /// `E(P)` as a `1×k` row.
    pub fn encode(&self, tape: &mut Tape, g: &Bound, pts: Var) -> Result<Var> {
        self.encode_many(tape, g, &[pts])
    }

    /// Decodes each row of `codes: B×k` into `n_seeds×3` points.
    pub fn generate(&self, tape: &mut Tape, g: &Bound, codes: Var) -> Result<Vec<Var>> {
        let out = self.generator.forward(tape, g, codes)?;
        let b = tape.value(out).rows();
        let s = self.cfg.n_seeds;
        (0..b)
            .map(|i| {
                let row = tape.slice_rows(out, i, 1)?;
                tape.reshape(row, vec![s, 3])
            })
            .collect()
    }

    /// `G = G∘E` applied to several inputs.
    pub fn complete_many(&self, tape: &mut Tape, g: &Bound, inputs: &[Var]) -> Result<Vec<Var>> {
        let codes = self.encode_many(tape, g, inputs)?;
        self.generate(tape, g, codes)
    }

    pub fn complete(&self, tape: &mut Tape, g: &Bound, input: Var) -> Result<Var> {
        Ok(self.complete_many(tape, g, &[input])?.remove(0))
    }

    /// Splits every parent of each `xc[i]` into `up_ratio` children
    /// `parent + up_scale·tanh(MLP([parent, code_i]))`, rows parent-major.
    pub fn upsample_many(&self, tape: &mut Tape, u: &Bound, xc: &[Var], codes: &[Var]) -> Result<Vec<Var>> {
        let r = self.cfg.up_ratio;
        let mut inputs = Vec::with_capacity(xc.len());
        let mut lens = Vec::with_capacity(xc.len());
        for (&p, &c) in xc.iter().zip(codes) {
            let n = tape.value(p).rows();
            let cb = tape.broadcast_rows(c, n)?;
            inputs.push(tape.concat_cols(p, cb)?);
            lens.push(n);
        }
        let inp = if inputs.len() == 1 { inputs[0] } else { tape.concat_rows(&inputs)? };
        let off = self.upsampler.forward(tape, u, inp)?;
        let off = tape.scale(off, self.cfg.up_scale);
        let total: usize = lens.iter().sum();
        let off = tape.reshape(off, vec![total * r, 3])?;
        let parents = if xc.len() == 1 { xc[0] } else { tape.concat_rows(xc)? };
        let rep: Vec<usize> = (0..total).flat_map(|i| std::iter::repeat(i).take(r)).collect();
        let rep = tape.gather(parents, &rep)?;
        let children = tape.add(rep, off)?;
        let mut out = Vec::with_capacity(xc.len());
        let mut start = 0;
        for n in lens {
            out.push(tape.slice_rows(children, start * r, n * r)?);
            start += n;
        }
        Ok(out)
    }

    pub fn upsample(&self, tape: &mut Tape, u: &Bound, xc: Var, code: Var) -> Result<Var> {
        Ok(self.upsample_many(tape, u, &[xc], &[code])?.remove(0))
    }

    /// Full forward pass for a batch of partial inputs.
    pub fn forward_many(&self, tape: &mut Tape, g: &Bound, u: &Bound, inputs: &[Var]) -> Result<Vec<CompletionForward>> {
        let c_prime = self.encode_many(tape, g, inputs)?;
        let ys = self.generate(tape, g, c_prime)?;
        let mut xcs = Vec::with_capacity(inputs.len());
        let mut provs = Vec::with_capacity(inputs.len());
        for (&xp, &y) in inputs.iter().zip(&ys) {
            let (xc, prov) = assemble_coarse(tape, xp, y, self.cfg.n_coarse)?;
            xcs.push(xc);
            provs.push(prov);
        }
        let c = self.encode_many(tape, g, &xcs)?;
        let c_rows: Vec<Var> = (0..inputs.len())
            .map(|i| tape.slice_rows(c, i, 1))
            .collect::<Result<_>>()?;
        let xs = self.upsample_many(tape, u, &xcs, &c_rows)?;
        let c_x = self.encode_many(tape, g, &xs)?;
        let mut out = Vec::with_capacity(inputs.len());
        for (i, prov) in provs.into_iter().enumerate() {
            out.push(CompletionForward {
                y: ys[i],
                xc: xcs[i],
                x: xs[i],
                c_prime: tape.slice_rows(c_prime, i, 1)?,
                c: c_rows[i],
                c_x: tape.slice_rows(c_x, i, 1)?,
                provenance: prov,
            });
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, g: &Bound, u: &Bound, input: Var) -> Result<CompletionForward> {
        Ok(self.forward_many(tape, g, u, &[input])?.remove(0))
    }
}

/// `FPS(X' ∪ Y)` down to `n` points, starting from the first input point.
/// The selection is a gather, so gradients reach `Y`.
pub fn assemble_coarse(tape: &mut Tape, xp: Var, y: Var, n: usize) -> Result<(Var, Vec<Provenance>)> {
    let a = tape.value(xp).to_points()?;
    let b = tape.value(y).to_points()?;
    if a.len() + b.len() < n {
        return Err(Error::Contract(format!(
            "coarse assembly needs {n} points, got {} + {}",
            a.len(),
            b.len()
        )));
    }
    let mut all = a.clone();
    all.extend_from_slice(&b);
    let idx = fps(&all, n, 0)?;
    let prov = idx
        .iter()
        .map(|&i| if i < a.len() { Provenance::Input } else { Provenance::Generated })
        .collect();
    let cat = tape.concat_rows(&[xp, y])?;
    Ok((tape.gather(cat, &idx)?, prov))
}

/// `Chamfer(G(G(X')), X')` for an arbitrary completion function `g`.
pub fn loss_invo_with<F>(tape: &mut Tape, mut g: F, xp: Var) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let y = g(tape, xp)?;
    let back = g(tape, y)?;
    diff_chamfer_bi(tape, back, xp)
}

/// Involution loss given an already computed `Y`: `Chamfer(G(Y), X')`.
pub fn loss_invo(net: &CompletionNet, tape: &mut Tape, g: &Bound, xp: Var, y: Var) -> Result<Var> {
    let back = net.complete(tape, g, y)?;
    diff_chamfer_bi(tape, back, xp)
}

/// `Chamfer(warped, P)` against a fixed template cloud.
pub fn loss_template(tape: &mut Tape, warped: Var, template: &[Point3]) -> Result<Var> {
    if template.is_empty() {
        return Err(Error::Contract("template cloud is empty".into()));
    }
    let p = tape.constant(Tensor::from_points(template));
    diff_chamfer_bi(tape, warped, p)
}

/// Single-sided `X_c → X`.
pub fn loss_part(tape: &mut Tape, xc: Var, x: Var) -> Result<Var> {
    diff_chamfer_single(tape, xc, x)
}

/// `(L_G + l1·L_invo, L_U + l2·L_part)`.
pub fn completion_losses(
    tape: &mut Tape,
    l_g: Var,
    l_u: Var,
    l_invo: Var,
    l_part: Var,
    l1: f64,
    l2: f64,
) -> Result<(Var, Var)> {
    let a = tape.scale(l_invo, l1);
    let b = tape.scale(l_part, l2);
    Ok((tape.add(l_g, a)?, tape.add(l_u, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::seeds;

    fn tiny() -> CompletionConfig {
        CompletionConfig {
            code_dim: 6,
            point_hidden: vec![8, 8],
            gen_hidden: vec![8],
            n_seeds: 4,
            n_coarse: 8,
            up_ratio: 2,
            up_hidden: vec![8],
            ..CompletionConfig::default()
        }
    }

    fn cloud(seed: u64, n: usize) -> Vec<Point3> {
        let mut rng = seeds::rng(seed, &[]);
        (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let (net, g, _) = CompletionNet::new(tiny(), &mut seeds::rng(0, &[])).unwrap();
        let pts = cloud(1, 20);
        let mut rev = pts.clone();
        rev.reverse();
        let mut tape = Tape::new();
        let b = g.bind(&mut tape);
        let x = tape.constant(Tensor::from_points(&pts));
        let xr = tape.constant(Tensor::from_points(&rev));
        let c1 = net.encode(&mut tape, &b, x).unwrap();
        let c2 = net.encode(&mut tape, &b, xr).unwrap();
        assert_eq!(tape.value(c1), tape.value(c2));
    }

    #[test]
    fn shapes_and_zero_offset_upsampling() {
        let (net, g, mut u) = CompletionNet::new(tiny(), &mut seeds::rng(2, &[])).unwrap();
        for p in u.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let (bg, bu) = (g.bind(&mut tape), u.bind(&mut tape));
        let x = tape.constant(Tensor::from_points(&cloud(3, 12)));
        let f = net.forward(&mut tape, &bg, &bu, x).unwrap();
        assert_eq!(tape.value(f.y).shape(), &[4, 3]);
        assert_eq!(tape.value(f.xc).shape(), &[8, 3]);
        assert_eq!(tape.value(f.x).shape(), &[16, 3]);
        let parents = tape.value(f.xc).to_points().unwrap();
        let kids = tape.value(f.x).to_points().unwrap();
        for (i, k) in kids.iter().enumerate() {
            assert_eq!(*k, parents[i / 2]);
        }
        let lp = loss_part(&mut tape, f.xc, f.x).unwrap();
        assert_eq!(tape.scalar_value(lp).unwrap(), 0.0);
        assert_eq!(f.provenance.len(), 8);
    }

    #[test]
    fn batched_forward_matches_single() {
        let (net, g, u) = CompletionNet::new(tiny(), &mut seeds::rng(4, &[])).unwrap();
        let mut tape = Tape::new();
        let (bg, bu) = (g.bind(&mut tape), u.bind(&mut tape));
        let a = tape.constant(Tensor::from_points(&cloud(5, 10)));
        let b = tape.constant(Tensor::from_points(&cloud(6, 14)));
        let both = net.forward_many(&mut tape, &bg, &bu, &[a, b]).unwrap();
        let single = net.forward(&mut tape, &bg, &bu, b).unwrap();
        assert_eq!(tape.value(both[1].x), tape.value(single.x));
        assert_eq!(tape.value(both[1].c_x), tape.value(single.c_x));
    }

    #[test]
    fn coarse_assembly_rules() {
        let mut tape = Tape::new();
        let xp_pts = cloud(7, 6);
        let xp = tape.constant(Tensor::from_points(&xp_pts));
        let dup = tape.constant(Tensor::from_points(&xp_pts[..3]));
        let (xc, prov) = assemble_coarse(&mut tape, xp, dup, 6).unwrap();
        // Duplicates never beat the originals (ties go to the lower index).
        assert!(prov.iter().all(|&p| p == Provenance::Input));
        assert_eq!(tape.value(xc).rows(), 6);
        assert!(assemble_coarse(&mut tape, xp, dup, 10).is_err());
    }

    #[test]
    fn involution_fixed_points() {
        let a = cloud(8, 5);
        let b = cloud(9, 5);
        let (ta, tb) = (Tensor::from_points(&a), Tensor::from_points(&b));
        let swap = |tape: &mut Tape, v: Var| -> Result<Var> {
            let out = if tape.value(v) == &ta { tb.clone() } else { ta.clone() };
            Ok(tape.constant(out))
        };
        let mut tape = Tape::new();
        let xp = tape.constant(ta.clone());
        let l = loss_invo_with(&mut tape, swap, xp).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);
        let l = loss_invo_with(&mut tape, |_, v| Ok(v), xp).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);
    }

    #[test]
    fn random_init_has_positive_invo_loss_and_correct_gradient() {
        let (net, g, _) = CompletionNet::new(tiny(), &mut seeds::rng(10, &[])).unwrap();
        let pts = Tensor::from_points(&cloud(11, 9));
        let mut frozen = g.clone();
        frozen.freeze();
        let err = grad_check(
            |tape, x| {
                let b = frozen.bind(tape);
                let y = net.complete(tape, &b, x)?;
                loss_invo(&net, tape, &b, x, y)
            },
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let mut tape = Tape::new();
        let b = g.bind(&mut tape);
        let x = tape.constant(pts);
        let y = net.complete(&mut tape, &b, x).unwrap();
        let l = loss_invo(&net, &mut tape, &b, x, y).unwrap();
        assert!(tape.scalar_value(l).unwrap() > 0.0);
    }

    #[test]
    fn weights_combine() {
        let mut tape = Tape::new();
        let [g, u, i, p] = [0.5, 0.25, 2.0, 4.0].map(|v| tape.constant(Tensor::scalar(v)));
        let (a, b) = completion_losses(&mut tape, g, u, i, p, 1.0, 1.0).unwrap();
        assert_eq!(tape.scalar_value(a).unwrap(), 2.5);
        assert_eq!(tape.scalar_value(b).unwrap(), 4.25);
    }
}
