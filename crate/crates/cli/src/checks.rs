//! Oracle checks shared by `selftest` and the acceptance suite.

use std::fmt;
use std::path::Path;

use rand::Rng;

use involute::autodiff::{grad_check_params, Tape, Tensor, Var};
use involute::completion::{assemble_coarse, loss_invo_with, loss_part, loss_template, CompletionConfig, CompletionNet};
use involute::extract::{mc_mesh, project_points, FieldGrid, ProjectionConfig, SphereUdf, DEFAULT_BOUND};
use involute::geometry::vec3::{add, cross, dist2, dot, norm, scale, sub};
use involute::geometry::{chamfer_bi, chamfer_single, diff_chamfer_bi, f1_score, fidelity, fps, mmd, Point3};
use involute::templateinr::{loss_pp, loss_pw, loss_t, sample_pairs, Reduction, TemplateConfig, TemplateNet};
use involute::scansynth::{brute_force_distance, read_observation, read_ply_mesh, DatasetManifest, MANIFEST_FILE};
use involute::{seeds, Execution, Result};

/// Finite-difference step of every gradient check.
pub const GRAD_STEP: f64 = 1e-6;
/// Largest allowed relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Agreement required between metric kernels and brute force.
pub const ORACLE_TOL: f64 = 1e-9;
pub const INVOLUTION_TOL: f64 = 1e-12;
pub const PROJECTION_TOL: f64 = 1e-3;
/// MC vertex error bound, in grid cells.
pub const MC_TOL_CELLS: f64 = 2.0;
pub const MC_RESOLUTION: usize = 128;
/// Stored UDF values against brute-force point-to-triangle distance.
pub const UDF_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `value < tol` (NaN fails).
    pub fn below(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self::new(name, value < tol, format!("{value:.3e} (< {tol:.0e})"))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()
}

fn tiny_completion() -> CompletionConfig {
    CompletionConfig {
        code_dim: 4,
        point_hidden: vec![8, 8],
        gen_hidden: vec![8],
        n_seeds: 8,
        n_coarse: 16,
        up_ratio: 2,
        up_hidden: vec![8],
        gen_init_std: 0.3,
        ..CompletionConfig::default()
    }
}

fn tiny_template() -> TemplateConfig {
    TemplateConfig {
        code_dim: 4,
        warp_hidden: vec![8, 8],
        decoder_hidden: vec![8, 8],
        warp_init_std: 0.1,
        ..TemplateConfig::default()
    }
}

/// Max relative gradient error of each loss with respect to the parameters
/// it trains, on tiny random networks and ≤ 32-point sets.
pub fn gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64, usize)>> {
    let mut rng = seeds::rng(seed, &[0x96]);
    let (cnet, g, u) = CompletionNet::new(tiny_completion(), &mut rng)?;
    let (tnet, t) = TemplateNet::new(tiny_template(), &mut rng)?;
    let xp = cloud(&mut rng, 24);
    let template = cloud(&mut rng, 20);
    let code: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let udf_pts = cloud(&mut rng, 32);
    let udf_d: Vec<f64> = udf_pts.iter().map(|p| (norm(*p) - 0.5).abs()).collect();
    let surface: Vec<Point3> = cloud(&mut rng, 24);
    let pairs = sample_pairs(&surface, 16, &mut rng);
    let h = GRAD_STEP;

    // Completion forward with θ_G/θ_U bound from `gb`/`ub` (one may be constant).
    let forward = |tape: &mut Tape, gb: &involute::autodiff::Bound, ub: &involute::autodiff::Bound| {
        let x = tape.constant(Tensor::from_points(&xp));
        cnet.forward(tape, gb, ub, x).map(|f| (x, f))
    };
    let warp_const = |tape: &mut Tape, pts: Var, c: Var| -> Result<Var> {
        let tb = t.bind_const(tape);
        tnet.warp(tape, &tb, pts, c)
    };

    let mut out = Vec::new();
    let e = grad_check_params(
        &g,
        |tape, gb| {
            let x = tape.constant(Tensor::from_points(&xp));
            loss_invo_with(tape, |tp, v| cnet.complete(tp, gb, v), x)
        },
        h,
    )?;
    out.push(("L_invo", e, g.num_scalars()));
    let e = grad_check_params(
        &g,
        |tape, gb| {
            let ub = u.bind_const(tape);
            let (_, f) = forward(tape, gb, &ub)?;
            let w = warp_const(tape, f.xc, f.c)?;
            loss_template(tape, w, &template)
        },
        h,
    )?;
    out.push(("L_G", e, g.num_scalars()));
    let e = grad_check_params(
        &u,
        |tape, ub| {
            let gb = g.bind_const(tape);
            let (_, f) = forward(tape, &gb, ub)?;
            let w = warp_const(tape, f.x, f.c_x)?;
            loss_template(tape, w, &template)
        },
        h,
    )?;
    out.push(("L_U", e, u.num_scalars()));
    let e = grad_check_params(
        &u,
        |tape, ub| {
            let gb = g.bind_const(tape);
            let (_, f) = forward(tape, &gb, ub)?;
            loss_part(tape, f.xc, f.x)
        },
        h,
    )?;
    out.push(("L_part", e, u.num_scalars()));
    let e = grad_check_params(
        &t,
        |tape, tb| {
            let x = tape.constant(Tensor::from_points(&udf_pts));
            let c = tape.constant(Tensor::row(code.clone()));
            let (d, _) = tnet.field(tape, tb, x, c)?;
            loss_t(tape, d, &udf_d, tnet.cfg.clamp_dist)
        },
        h,
    )?;
    out.push(("L_T", e, t.num_scalars()));
    let e = grad_check_params(
        &t,
        |tape, tb| {
            let x = tape.constant(Tensor::from_points(&surface));
            let c = tape.constant(Tensor::row(code.clone()));
            let w = tnet.warp(tape, tb, x, c)?;
            loss_pw(tape, x, w, tnet.cfg.huber_delta, Reduction::Mean)
        },
        h,
    )?;
    out.push(("L_pw", e, t.num_scalars()));
    let e = grad_check_params(
        &t,
        |tape, tb| {
            let x = tape.constant(Tensor::from_points(&surface));
            let c = tape.constant(Tensor::row(code.clone()));
            let w = tnet.warp(tape, tb, x, c)?;
            loss_pp(tape, x, w, &pairs, Reduction::Mean)
        },
        h,
    )?;
    out.push(("L_pp", e, t.num_scalars()));
    Ok(out)
}

fn brute_nn(q: Point3, refs: &[Point3]) -> f64 {
    refs.iter().map(|r| dist2(q, *r)).fold(f64::INFINITY, f64::min)
}

fn brute_single(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter().map(|p| brute_nn(*p, b)).sum::<f64>() / a.len() as f64
}

fn brute_f1(pred: &[Point3], gt: &[Point3], tau: f64) -> f64 {
    let frac = |a: &[Point3], b: &[Point3]| a.iter().filter(|p| brute_nn(**p, b).sqrt() <= tau).count() as f64 / a.len() as f64;
    let (p, r) = (frac(pred, gt), frac(gt, pred));
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * p * r / (p + r)
    }
}

fn brute_fps(pts: &[Point3], k: usize) -> Vec<usize> {
    let mut sel = vec![0usize];
    while sel.len() < k {
        let mut best = (0, -1.0);
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| dist2(pts[i], pts[s])).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        sel.push(best.0);
    }
    sel
}

/// Largest disagreement of each metric kernel with a brute-force version over
/// `instances` random cases of at most 50 points, plus FPS mismatches.
pub fn geometry_oracles(seed: u64, instances: usize) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = seeds::rng(seed, &[0x6e0]);
    let mut worst = [0.0f64; 6];
    for _ in 0..instances {
        let na = rng.random_range(1..=50);
        let nb = rng.random_range(1..=50);
        let a = cloud(&mut rng, na);
        let b = cloud(&mut rng, nb);
        let tau = rng.random_range(0.05..0.6);
        let refs: Vec<Vec<Point3>> = (0..rng.random_range(1..=10)).map(|_| {
            let n = rng.random_range(1..=50);
            cloud(&mut rng, n)
        }).collect();
        let bi = brute_single(&a, &b) + brute_single(&b, &a);
        let diffs = [
            (chamfer_bi(&a, &b)? - bi).abs(),
            (chamfer_single(&a, &b)? - brute_single(&a, &b)).abs(),
            (f1_score(&a, &b, tau)? - brute_f1(&a, &b, tau)).abs(),
            {
                let k = rng.random_range(1..=na);
                if fps(&a, k, 0)? == brute_fps(&a, k) { 0.0 } else { 1.0 }
            },
            (mmd(&a, &refs)? - refs.iter().map(|r| brute_single(&a, r) + brute_single(r, &a)).fold(f64::INFINITY, f64::min)).abs(),
            (fidelity(&a, &b)? - brute_single(&a, &b)).abs(),
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = w.max(d);
        }
    }
    let names = ["chamfer_bi", "chamfer_single", "f1", "fps", "mmd", "fidelity"];
    Ok(names.into_iter().zip(worst).collect())
}

/// `(oracle swap, identity)` involution losses on a two-part partition.
pub fn involution_semantics(seed: u64) -> Result<(f64, f64)> {
    let mut rng = seeds::rng(seed, &[0x1a]);
    let shape = cloud(&mut rng, 40);
    let (left, right): (Vec<Point3>, Vec<Point3>) = shape.iter().partition(|p| p[0] < 0.0);
    let (tl, tr) = (Tensor::from_points(&left), Tensor::from_points(&right));
    let swap = |tape: &mut Tape, v: Var| -> Result<Var> {
        let other = if tape.value(v) == &tl { tr.clone() } else { tl.clone() };
        Ok(tape.constant(other))
    };
    let mut tape = Tape::new();
    let xp = tape.constant(tl.clone());
    let oracle = loss_invo_with(&mut tape, swap, xp)?;
    let ident = loss_invo_with(&mut tape, |_, v| Ok(v), xp)?;
    // Direct replay of the two passes for the oracle.
    let back = tape.constant(tl.clone());
    let replay = diff_chamfer_bi(&mut tape, back, xp)?;
    debug_assert_eq!(tape.scalar_value(replay)?, tape.scalar_value(oracle)?);
    Ok((tape.scalar_value(oracle)?, tape.scalar_value(ident)?))
}

/// `(projection max radial error, MC max radial error in cells)` on the
/// analytic sphere UDF of radius 0.5.
pub fn extraction_oracle(seed: u64, exec: Execution) -> Result<(f64, f64)> {
    let sphere = SphereUdf {
        center: [0.0; 3],
        radius: 0.5,
    };
    let proj = project_points(&sphere, 2048, &ProjectionConfig::default(), seed, exec)?;
    let perr = proj.points.iter().map(|p| (norm(*p) - 0.5).abs()).fold(0.0, f64::max);
    let eps = 0.01;
    let grid = FieldGrid::from_fn(MC_RESOLUTION, DEFAULT_BOUND, |p| (norm(p) - 0.5).abs(), exec)?;
    let mesh = mc_mesh(&grid, eps, exec)?;
    let h = grid.cell_size();
    let merr = mesh
        .mesh
        .vertices
        .iter()
        .map(|v| {
            let r = norm(*v);
            (r - (0.5 - eps)).abs().min((r - (0.5 + eps)).abs())
        })
        .fold(if mesh.empty { f64::INFINITY } else { 0.0 }, f64::max);
    Ok((perr, merr / h))
}

/// Coarse assembly sanity: duplicates of the input never displace it.
pub fn assembly_check() -> Result<bool> {
    let mut rng = seeds::rng(3, &[]);
    let xp = cloud(&mut rng, 20);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_points(&xp));
    let d = tape.constant(Tensor::from_points(&xp[..8]));
    let (_, prov) = assemble_coarse(&mut tape, a, d, 20)?;
    Ok(prov.iter().all(|p| *p == involute::geometry::Provenance::Input))
}

/// Result of re-verifying a generated corpus from its files alone.
#[derive(Clone, Debug, Default)]
pub struct DatasetAudit {
    pub udf_samples: usize,
    /// Largest |stored d − brute-force distance to the seen triangles|.
    pub max_udf_err: f64,
    pub surface_points: usize,
    /// Stored surface points that fail the occlusion recheck.
    pub occluded: usize,
    pub splits_disjoint: bool,
}

/// Segment `o → cam` against triangle `abc` through the supporting plane
/// and edge half-spaces (deliberately not the renderer's formulation).
fn blocks(o: Point3, cam: Point3, t: &[Point3; 3]) -> bool {
    let n = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    let d = sub(cam, o);
    let denom = dot(n, d);
    if denom.abs() < 1e-300 {
        return false;
    }
    let s = dot(n, sub(t[0], o)) / denom;
    if !(s > 0.0 && s < 1.0) {
        return false;
    }
    let q = add(o, scale(d, s));
    (0..3).all(|k| dot(cross(sub(t[(k + 1) % 3], t[k]), sub(q, t[k])), n) >= 0.0)
}

/// Reloads every observation of the corpus at `root` and checks stored UDF
/// values against a linear scan over the seen triangles, surface points
/// against an all-triangle occlusion test, and the view split.
pub fn dataset_soundness(root: &Path, exec: Execution) -> Result<DatasetAudit> {
    let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
    let per_instance = exec.try_map_range(manifest.instances.len(), |i| {
        let inst = &manifest.instances[i];
        let mesh = read_ply_mesh(&root.join(&inst.mesh_path))?;
        let tris: Vec<[Point3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        let mut a = DatasetAudit {
            splits_disjoint: inst.train_views.iter().all(|v| !inst.test_views.contains(v))
                && inst.train_views.iter().chain(&inst.test_views).all(|v| inst.view(*v).is_some()),
            ..DatasetAudit::default()
        };
        for view in &inst.views {
            let obs = read_observation(&root.join(&view.path))?;
            let seen: Vec<[Point3; 3]> = view.visible_triangles.iter().map(|&t| tris[t as usize]).collect();
            for s in &obs.udf {
                let d = brute_force_distance(&seen, [s[0], s[1], s[2]]);
                a.max_udf_err = a.max_udf_err.max((d - s[3]).abs());
            }
            a.udf_samples += obs.udf.len();
            for &p in &obs.surface {
                let touching: Vec<usize> = (0..tris.len())
                    .filter(|&t| brute_force_distance(&tris[t..t + 1], p) < 1e-9)
                    .collect();
                let facing = touching.iter().any(|&t| {
                    let n = cross(sub(tris[t][1], tris[t][0]), sub(tris[t][2], tris[t][0]));
                    dot(n, sub(obs.camera, p)) > 0.0
                });
                let clear = (0..tris.len()).all(|t| touching.contains(&t) || !blocks(p, obs.camera, &tris[t]));
                if !(facing && clear) {
                    a.occluded += 1;
                }
            }
            a.surface_points += obs.surface.len();
        }
        Ok::<_, involute::Error>(a)
    })?;
    Ok(per_instance.into_iter().fold(
        DatasetAudit {
            splits_disjoint: true,
            ..DatasetAudit::default()
        },
        |acc, a| DatasetAudit {
            udf_samples: acc.udf_samples + a.udf_samples,
            max_udf_err: acc.max_udf_err.max(a.max_udf_err),
            surface_points: acc.surface_points + a.surface_points,
            occluded: acc.occluded + a.occluded,
            splits_disjoint: acc.splits_disjoint && a.splits_disjoint,
        },
    ))
}

/// Quick checks run by `selftest`.
pub fn quick_checks(seed: u64, exec: Execution) -> Vec<Check> {
    let mut out = Vec::new();
    match gradient_errors(seed) {
        Ok(errs) => out.extend(errs.into_iter().map(|(n, e, _)| Check::below(format!("grad {n}"), e, GRAD_TOL))),
        Err(e) => out.push(Check::new("grad", false, e.to_string())),
    }
    match geometry_oracles(seed, 100) {
        Ok(errs) => out.extend(errs.into_iter().map(|(n, e)| Check::new(format!("oracle {n}"), e <= ORACLE_TOL, format!("{e:.3e}")))),
        Err(e) => out.push(Check::new("oracle", false, e.to_string())),
    }
    let mut rng = seeds::rng(seed, &[0xf1]);
    let same = cloud(&mut rng, 50);
    match f1_score(&same, &same, 0.03) {
        Ok(f) => out.push(Check::new("oracle f1 identical", f == 100.0, format!("{f}"))),
        Err(e) => out.push(Check::new("oracle f1 identical", false, e.to_string())),
    }
    match involution_semantics(seed) {
        Ok((o, i)) => out.push(Check::new("involution fixed points", o.abs() <= INVOLUTION_TOL && i.abs() <= INVOLUTION_TOL, format!("oracle {o:e}, identity {i:e}"))),
        Err(e) => out.push(Check::new("involution fixed points", false, e.to_string())),
    }
    match extraction_oracle(seed, exec) {
        Ok((p, m)) => {
            out.push(Check::below("projection radial error", p, PROJECTION_TOL));
            out.push(Check::below("mc radial error (cells)", m, MC_TOL_CELLS));
        }
        Err(e) => out.push(Check::new("extraction", false, e.to_string())),
    }
    match assembly_check() {
        Ok(b) => out.push(Check::new("coarse assembly provenance", b, "")),
        Err(e) => out.push(Check::new("coarse assembly provenance", false, e.to_string())),
    }
    out
}
