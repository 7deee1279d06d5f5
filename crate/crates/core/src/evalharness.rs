//! Completion, fidelity, plausibility and correspondence metrics over a test
//! split, plus JSON/CSV/SVG report emission.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::extract::{correspondences, project_points, ProjectionConfig};
use crate::geometry::vec3::dist2;
use crate::geometry::{chamfer_bi, f1_score, fidelity, fps_points, mmd, Point3};
use crate::scansynth::{Dataset, PartialObservation, Split};
use crate::seeds;
use crate::trainer::{LogRow, Model};

pub const F1_TAU: f64 = 0.03;
/// CD is reported ×10³.
pub const CD_SCALE: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Points taken from the partial input.
    pub n_input: usize,
    /// Points extracted from the field per shape.
    pub n_points: usize,
    pub projection: ProjectionConfig,
    /// Query points per correspondence pair.
    pub corr_points: usize,
    pub corr_pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_input: 2048,
            n_points: 2048,
            projection: ProjectionConfig::default(),
            corr_points: 512,
            corr_pairs: 50,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn for_model(model: &Model) -> Self {
        Self {
            n_input: model.cfg.n_input,
            n_points: model.cfg.completion.n_output(),
            seed: model.cfg.seed,
            ..Self::default()
        }
    }
}

/// Where the evaluated point set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    /// Gradient projection onto the implicit field.
    Field,
    /// Upsampler output `X` (modes without a field).
    Upsampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub instance_id: u32,
    pub view_id: u32,
    pub source: Option<PointSource>,
    pub f1: Option<f64>,
    pub cd: Option<f64>,
    pub fidelity: Option<f64>,
    pub mmd: Option<f64>,
    pub corr_l2: Option<f64>,
    /// CD of the upsampler output `X`, for reference.
    pub cd_x: Option<f64>,
    pub skipped: Option<String>,
}

impl ShapeMetrics {
    fn empty(instance_id: u32, view_id: u32) -> Self {
        Self {
            instance_id,
            view_id,
            source: None,
            f1: None,
            cd: None,
            fidelity: None,
            mmd: None,
            corr_l2: None,
            cd_x: None,
            skipped: None,
        }
    }

    fn columns(&self) -> [Option<f64>; 6] {
        [self.f1, self.cd, self.fidelity, self.mmd, self.corr_l2, self.cd_x]
    }
}

pub const METRIC_NAMES: [&str; 6] = ["f1", "cd", "fidelity", "mmd", "corr_l2", "cd_x"];

/// Mean of each metric over the rows that have it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub f1: Option<f64>,
    pub cd: Option<f64>,
    pub fidelity: Option<f64>,
    pub mmd: Option<f64>,
    pub corr_l2: Option<f64>,
    pub cd_x: Option<f64>,
    pub count: usize,
}

impl Aggregates {
    pub fn compute(rows: &[ShapeMetrics]) -> Self {
        let mean = |k: usize| {
            let v: Vec<f64> = rows.iter().filter_map(|r| r.columns()[k]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            f1: mean(0),
            cd: mean(1),
            fidelity: mean(2),
            mmd: mean(3),
            corr_l2: mean(4),
            cd_x: mean(5),
            count: rows.len(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        let i = METRIC_NAMES.iter().position(|&n| n == name)?;
        [self.f1, self.cd, self.fidelity, self.mmd, self.corr_l2, self.cd_x][i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mode: String,
    pub seed: u64,
    pub checkpoint: String,
    pub split: Split,
    pub rows: Vec<ShapeMetrics>,
    /// Per-pair correspondence errors (instance A, instance B, Corr ℓ2).
    pub corr_pairs: Vec<(u32, u32, f64)>,
    pub aggregates: Aggregates,
}

impl MetricsRecord {
    pub fn new(mode: String, seed: u64, checkpoint: String, split: Split, rows: Vec<ShapeMetrics>, corr_pairs: Vec<(u32, u32, f64)>) -> Self {
        let mut aggregates = Aggregates::compute(&rows);
        if !corr_pairs.is_empty() {
            aggregates.corr_l2 = Some(corr_pairs.iter().map(|p| p.2).sum::<f64>() / corr_pairs.len() as f64);
        }
        Self {
            mode,
            seed,
            checkpoint,
            split,
            rows,
            corr_pairs,
            aggregates,
        }
    }

    /// Checks that aggregates are the means of the rows.
    pub fn validate(&self) -> Result<()> {
        let mut expect = Aggregates::compute(&self.rows);
        if !self.corr_pairs.is_empty() {
            expect.corr_l2 = Some(self.corr_pairs.iter().map(|p| p.2).sum::<f64>() / self.corr_pairs.len() as f64);
        }
        for name in METRIC_NAMES {
            let (a, b) = (self.aggregates.get(name), expect.get(name));
            let ok = match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                (None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Validation(format!("aggregate {name} is {a:?}, rows give {b:?}")));
            }
        }
        Ok(())
    }
}

/// Fidelity: single-sided Chamfer from the partial scan to the completion.
pub fn eval_fidelity(partial: &[Point3], completed: &[Point3]) -> Result<f64> {
    fidelity(partial, completed)
}

/// Minimal matching distance to a reference corpus.
pub fn eval_mmd(completed: &[Point3], reference: &[Vec<Point3>]) -> Result<f64> {
    mmd(completed, reference)
}

/// Deterministic subset of a partial scan used as network input.
pub fn select_input(o: &PartialObservation, n: usize) -> Result<Vec<Point3>> {
    if o.surface.len() <= n {
        Ok(o.surface.clone())
    } else {
        fps_points(&o.surface, n, 0)
    }
}

/// Completed point set of one partial input and its field code.
pub struct Completed {
    pub points: Vec<Point3>,
    pub source: PointSource,
    pub upsampled: Vec<Point3>,
    pub code: Vec<f64>,
}

pub fn complete_shape(model: &Model, partial: &[Point3], cfg: &EvalConfig, seed: u64) -> Result<Completed> {
    let inf = model.infer(partial)?;
    if !model.cfg.mode.has_field() {
        return Ok(Completed {
            points: inf.x.clone(),
            source: PointSource::Upsampled,
            upsampled: inf.x,
            code: inf.code,
        });
    }
    let field = model.field(inf.code.clone());
    // Projection runs sequentially here: callers parallelize over shapes.
    let proj = project_points(&field, cfg.n_points, &cfg.projection, seed, Execution::Sequential)?;
    Ok(Completed {
        points: proj.points,
        source: PointSource::Field,
        upsampled: inf.x,
        code: inf.code,
    })
}

fn shape_seed(cfg: &EvalConfig, o: &PartialObservation) -> u64 {
    seeds::derive(cfg.seed, &[0xe7a1, o.instance_id as u64, o.view_id as u64])
}

/// F1, CD, Fidelity and MMD for every observation of `split`. MMD uses the
/// training instances' complete clouds as the reference corpus.
pub fn eval_completion(model: &Model, ds: &Dataset, split: Split, cfg: &EvalConfig, exec: Execution) -> Result<Vec<ShapeMetrics>> {
    let obs = ds.split(split);
    let reference: Vec<Vec<Point3>> = {
        let mut ids: Vec<u32> = ds.train.iter().map(|o| o.instance_id).collect();
        ids.dedup();
        ids.iter().filter_map(|i| ds.gt.get(i).cloned()).collect()
    };
    exec.try_map_range(obs.len(), |k| {
        let o = &obs[k];
        let mut row = ShapeMetrics::empty(o.instance_id, o.view_id);
        let partial = select_input(o, cfg.n_input)?;
        let done = match complete_shape(model, &partial, cfg, shape_seed(cfg, o)) {
            Ok(c) => c,
            Err(e @ Error::Extraction(_)) => {
                row.skipped = Some(e.to_string());
                return Ok(row);
            }
            Err(e) => return Err(e),
        };
        row.source = Some(done.source);
        row.fidelity = Some(eval_fidelity(&o.surface, &done.points)?);
        if !reference.is_empty() {
            row.mmd = Some(eval_mmd(&done.points, &reference)?);
        }
        match ds.gt.get(&o.instance_id) {
            Some(gt) => {
                row.f1 = Some(f1_score(&done.points, gt, F1_TAU)?);
                row.cd = Some(CD_SCALE * chamfer_bi(&done.points, gt)?);
                row.cd_x = Some(CD_SCALE * chamfer_bi(&done.upsampled, gt)?);
            }
            None => row.skipped = Some(format!("no ground truth for instance {}", o.instance_id)),
        }
        Ok(row)
    })
}

/// Mean ℓ2 between predicted and ground-truth matches.
pub fn corr_l2(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!("{} predicted vs {} GT matches", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| dist2(*a, *b).sqrt()).sum::<f64>() / pred.len() as f64)
}

/// Ground-truth partner of normalized points of instance `a` on instance `b`,
/// through the shared primitive parameterization. `None` if either instance
/// has no primitive or the families differ.
pub fn gt_matches(ds: &Dataset, a: u32, b: u32, query: &[Point3]) -> Option<Vec<Point3>> {
    let ia = ds.manifest.instance(a)?;
    let ib = ds.manifest.instance(b)?;
    let (pa, pb) = (ia.primitive.as_ref()?, ib.primitive.as_ref()?);
    if pa.family() != pb.family() {
        return None;
    }
    Some(
        query
            .iter()
            .map(|&q| ib.transform.apply(pb.unparam(pa.param(ia.transform.invert(q)))))
            .collect(),
    )
}

/// Correspondence error over consecutive instance pairs of the split:
/// queries are ground-truth points of A, targets are the points extracted
/// from B's field, both warped with codes from the first view of each.
pub fn eval_corr(model: &Model, ds: &Dataset, split: Split, cfg: &EvalConfig, exec: Execution) -> Result<Vec<(u32, u32, f64)>> {
    if !model.cfg.mode.has_field() {
        return Ok(Vec::new());
    }
    let mut first: Vec<&PartialObservation> = Vec::new();
    for o in ds.split(split) {
        if first.last().is_none_or(|f| f.instance_id != o.instance_id) {
            first.push(o);
        }
    }
    let pairs: Vec<(usize, usize)> = (0..first.len().saturating_sub(1))
        .map(|i| (i, i + 1))
        .take(cfg.corr_pairs)
        .collect();
    let out = exec.try_map_range(pairs.len(), |k| -> Result<Option<(u32, u32, f64)>> {
        let (oa, ob) = (first[pairs[k].0], first[pairs[k].1]);
        let Some(gt_a) = ds.gt.get(&oa.instance_id) else { return Ok(None) };
        let query = fps_points(gt_a, cfg.corr_points.min(gt_a.len()), 0)?;
        let Some(truth) = gt_matches(ds, oa.instance_id, ob.instance_id, &query) else {
            return Ok(None);
        };
        let ca = model.infer(&select_input(oa, cfg.n_input)?)?.code;
        let b = match complete_shape(model, &select_input(ob, cfg.n_input)?, cfg, shape_seed(cfg, ob)) {
            Ok(b) => b,
            Err(Error::Extraction(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let pred = correspondences(|p, c| model.warp(p, c), &query, &ca, &b.points, &b.code, Execution::Sequential)?;
        Ok(Some((oa.instance_id, ob.instance_id, corr_l2(&pred, &truth)?)))
    })?;
    Ok(out.into_iter().flatten().collect())
}

/// Full evaluation of one checkpoint.
pub fn evaluate(model: &Model, checkpoint: &str, ds: &Dataset, split: Split, cfg: &EvalConfig, exec: Execution) -> Result<MetricsRecord> {
    let rows = eval_completion(model, ds, split, cfg, exec)?;
    let corr = eval_corr(model, ds, split, cfg, exec)?;
    Ok(MetricsRecord::new(
        model.cfg.mode.to_string(),
        model.cfg.seed,
        checkpoint.to_string(),
        split,
        rows,
        corr,
    ))
}

pub const CSV_HEADER: &str = "instance_id,view_id,source,f1,cd,fidelity,mmd,corr_l2,cd_x,skipped";

pub fn metrics_csv(rec: &MetricsRecord) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in &rec.rows {
        let cells: Vec<String> = r.columns().iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
        let src = match r.source {
            Some(PointSource::Field) => "field",
            Some(PointSource::Upsampled) => "upsampled",
            None => "",
        };
        let skipped = r.skipped.as_deref().unwrap_or("").replace([',', '\n'], " ");
        s.push_str(&format!("{},{},{src},{},{skipped}\n", r.instance_id, r.view_id, cells.join(",")));
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plotting failed: {e}"))
}

/// Histogram of one metric over the rows.
fn histogram_svg(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let bins = 20usize;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0u32; bins];
    for &v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(name, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(lo..lo + width * bins as f64, 0u32..top + 1)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().draw().map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(counts.iter().enumerate().map(|(i, &c)| {
            let x0 = lo + i as f64 * width;
            Rectangle::new([(x0, 0), (x0 + width, c)], BLUE.mix(0.6).filled())
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// One line per loss component, smoothed with a trailing window.
fn loss_curves_svg(path: &Path, log: &[LogRow]) -> Result<()> {
    let window = 50usize;
    let names = ["L_T", "L_pw", "L_pp", "L_G", "L_U", "L_invo", "L_part"];
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let pts: Vec<(u64, f64)> = log
            .iter()
            .filter_map(|r| r.components()[k].1.filter(|v| *v > 0.0).map(|v| (r.iteration, v)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let smooth = pts
            .iter()
            .enumerate()
            .map(|(i, &(it, _))| {
                let s = &pts[i.saturating_sub(window - 1)..=i];
                (it as f64, (s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64).log10())
            })
            .collect();
        series.push((name, smooth));
    }
    let xs = log.last().map(|r| r.iteration as f64 + 1.0).unwrap_or(1.0);
    let (ymin, ymax) = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.1))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let (ymin, ymax) = if ymin < ymax { (ymin, ymax) } else { (-1.0, 1.0) };
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("losses (log10, smoothed)", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xs, ymin..ymax)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("iteration").draw().map_err(|e| plot_err(path, e))?;
    for (i, (name, pts)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(|e| plot_err(path, e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Writes `metrics.json`, `metrics.csv`, per-metric histograms and, when a
/// loss log is given, `loss_curves.svg`. Returns the written paths.
pub fn emit_report(rec: &MetricsRecord, log: Option<&[LogRow]>, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let json = out.join("metrics.json");
    write(&json, &serde_json::to_string_pretty(rec)?)?;
    written.push(json);
    let csv = out.join("metrics.csv");
    write(&csv, &metrics_csv(rec))?;
    written.push(csv);
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let vals: Vec<f64> = rec.rows.iter().filter_map(|r| r.columns()[k]).collect();
        if vals.is_empty() {
            continue;
        }
        let p = out.join(format!("hist_{name}.svg"));
        histogram_svg(&p, name, &vals)?;
        written.push(p);
    }
    if let Some(log) = log.filter(|l| !l.is_empty()) {
        let p = out.join("loss_curves.svg");
        loss_curves_svg(&p, log)?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_record(path: &Path) -> Result<MetricsRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: MetricsRecord = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    rec.validate()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u32, f1: f64, cd: f64) -> ShapeMetrics {
        ShapeMetrics {
            f1: Some(f1),
            cd: Some(cd),
            fidelity: Some(cd / 2.0),
            ..ShapeMetrics::empty(id, 0)
        }
    }

    #[test]
    fn perfect_prediction() {
        let gt: Vec<Point3> = (0..20).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        assert_eq!(f1_score(&gt, &gt, F1_TAU).unwrap(), 100.0);
        assert_eq!(chamfer_bi(&gt, &gt).unwrap(), 0.0);
        assert_eq!(eval_fidelity(&gt[..5], &gt).unwrap(), 0.0);
        assert_eq!(eval_mmd(&gt, &[gt[..3].to_vec(), gt.clone()]).unwrap(), 0.0);
    }

    #[test]
    fn fidelity_hand_case_and_monotonicity() {
        let partial = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let mut done = vec![[0.0, 0.0, 0.5]];
        // (0.25 + 1.25) / 2
        assert_eq!(eval_fidelity(&partial, &done).unwrap(), 0.75);
        let mut prev = 0.75;
        for p in [[5.0, 5.0, 5.0], [1.0, 0.0, 0.25], [0.0, 0.0, 0.0]] {
            done.push(p);
            let f = eval_fidelity(&partial, &done).unwrap();
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn corr_of_identity_is_zero() {
        let p: Vec<Point3> = (0..10).map(|i| [i as f64, 1.0, 2.0]).collect();
        assert_eq!(corr_l2(&p, &p).unwrap(), 0.0);
        assert!(corr_l2(&p, &p[..3]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let rows = vec![row(0, 80.0, 3.0), row(1, 60.0, 5.0), row(2, 90.0, 1.5)];
        let rec = MetricsRecord::new("full".into(), 7, "final.ivck".into(), Split::Test, rows, vec![(0, 1, 0.25)]);
        assert_eq!(rec.aggregates.f1, Some(230.0 / 3.0));
        assert_eq!(rec.aggregates.corr_l2, Some(0.25));
        rec.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log: Vec<LogRow> = (0..120)
            .map(|i| LogRow::parse_csv(&format!("{i},INR,{},0.1,0.2,,,,,0.0005", 1.0 / (i + 1) as f64)).unwrap())
            .collect();
        let files = emit_report(&rec, Some(&log), dir.path()).unwrap();
        assert!(files.iter().any(|f| f.ends_with("loss_curves.svg")));
        let back = read_record(&dir.path().join("metrics.json")).unwrap();
        assert_eq!(back, rec);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + rec.rows.len());
        let cd_mean: f64 = lines[1..].iter().map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap()).sum::<f64>() / 3.0;
        assert!((cd_mean - back.aggregates.cd.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn tampered_aggregate_is_rejected() {
        let mut rec = MetricsRecord::new("full".into(), 0, String::new(), Split::Test, vec![row(0, 1.0, 2.0)], vec![]);
        rec.aggregates.cd = Some(9.0);
        assert!(rec.validate().is_err());
    }
}
