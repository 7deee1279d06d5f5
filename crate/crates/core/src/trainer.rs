//! Batch construction, the alternating freeze/optimize schedule, learning-rate
//! decay, checkpointing and the ablation modes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, AdamConfig, ParamSet, Tape, Tensor, Var};
use crate::completion::{completion_losses, loss_part, loss_template, CompletionConfig, CompletionNet};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{diff_chamfer_bi, Point3, Provenance};
use crate::scansynth::{Dataset, PartialObservation};
use crate::seeds;
use crate::templateinr::{extract_template, inr_loss, inr_terms, sample_pairs, NetworkField, TemplateCloud, TemplateConfig, TemplateNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    InrOnly,
    CompletionOnly,
    NoInvo,
    Supervised,
    SupervisedNoInvo,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Full,
        Mode::InrOnly,
        Mode::CompletionOnly,
        Mode::NoInvo,
        Mode::Supervised,
        Mode::SupervisedNoInvo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::InrOnly => "inr_only",
            Mode::CompletionOnly => "completion_only",
            Mode::NoInvo => "no_invo",
            Mode::Supervised => "supervised",
            Mode::SupervisedNoInvo => "supervised_no_invo",
        }
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Mode::Supervised | Mode::SupervisedNoInvo)
    }

    pub fn uses_invo(self) -> bool {
        !matches!(self, Mode::NoInvo | Mode::SupervisedNoInvo)
    }

    /// Whether evaluation reads points off the implicit field.
    pub fn has_field(self) -> bool {
        self != Mode::CompletionOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown mode '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inr,
    Completion,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Inr => "INR",
            Phase::Completion => "COMPLETION",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: u64,
    pub epochs: u64,
    /// Takes precedence over `epochs` when set.
    pub max_iterations: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    /// Completion phases skip the template losses before this iteration.
    pub warmup_iterations: u64,
    pub template_refresh: u64,
    pub checkpoint_every: u64,
    /// Partial-input points per observation and step.
    pub n_input: usize,
    /// UDF samples per observation and step.
    pub n_udf: usize,
    /// Upsampled points used as zero-distance anchors in `L_T`.
    pub n_anchor: usize,
    /// Ground-truth points per observation in supervised modes.
    pub n_gt: usize,
    pub completion: CompletionConfig,
    pub template: TemplateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            mode: Mode::Full,
            seed: 0,
            batch_size: 24,
            lr: 5e-4,
            lr_decay: 0.5,
            lr_decay_epochs: 500,
            epochs: 2500,
            max_iterations: Some(50_000),
            beta1: 0.9,
            beta2: 0.999,
            warmup_iterations: 500,
            template_refresh: 250,
            checkpoint_every: 1000,
            n_input: 2048,
            n_udf: 4096,
            n_anchor: 512,
            n_gt: 2048,
            completion: CompletionConfig::default(),
            template: TemplateConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small networks and point counts for CPU runs on the primitive corpus.
    pub fn desk() -> Self {
        let mut t = TemplateConfig {
            code_dim: 64,
            warp_hidden: vec![64; 4],
            decoder_hidden: vec![64; 3],
            template_points: 256,
            ..TemplateConfig::default()
        };
        t.template_projection.candidates = 2048;
        Self {
            batch_size: 8,
            max_iterations: Some(5000),
            n_input: 256,
            n_udf: 512,
            n_anchor: 128,
            n_gt: 512,
            completion: CompletionConfig {
                code_dim: 64,
                point_hidden: vec![64, 128],
                gen_hidden: vec![128],
                n_seeds: 32,
                n_coarse: 128,
                up_ratio: 4,
                up_hidden: vec![64],
                ..CompletionConfig::default()
            },
            template: t,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.completion.validate()?;
        self.template.validate()?;
        self.adam().validate()?;
        if self.completion.code_dim != self.template.code_dim {
            return Err(Error::Config(format!(
                "completion code_dim {} != template code_dim {}",
                self.completion.code_dim, self.template.code_dim
            )));
        }
        if self.batch_size == 0 || (self.mode == Mode::Full && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch_size {} too small for mode {}",
                self.batch_size, self.mode
            )));
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_epochs == 0 {
            return Err(Error::Config("lr_decay and lr_decay_epochs must be positive".into()));
        }
        if self.n_input == 0 || self.n_udf == 0 || self.template_refresh == 0 {
            return Err(Error::Config("n_input, n_udf and template_refresh must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Iteration budget for a training split of `n_train` observations.
    pub fn total_iterations(&self, n_train: usize) -> u64 {
        self.max_iterations.unwrap_or_else(|| {
            let per_epoch = (n_train as u64).div_ceil(self.batch_size as u64).max(1);
            self.epochs * per_epoch
        })
    }

    /// Effective weight of `L_invo`.
    pub fn invo_weight(&self) -> f64 {
        if self.mode.uses_invo() {
            self.completion.l1
        } else {
            0.0
        }
    }
}

/// `lr · decay^floor(epochs / every)`.
pub fn lr_schedule(epochs_elapsed: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epochs_elapsed / cfg.lr_decay_epochs) as i32)
}

pub fn epochs_elapsed(iteration: u64, batch_size: usize, n_train: usize) -> u64 {
    iteration * batch_size as u64 / n_train.max(1) as u64
}

/// Phase of a given iteration: even iterations train the template field,
/// odd ones the completion module.
pub fn phase_of(mode: Mode, iteration: u64) -> Phase {
    match mode {
        Mode::InrOnly => Phase::Inr,
        Mode::CompletionOnly => Phase::Completion,
        _ if iteration % 2 == 0 => Phase::Inr,
        _ => Phase::Completion,
    }
}

/// Indices of `batch_size` observations from pairwise-distinct instances.
pub fn build_batch(obs: &[PartialObservation], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_instance: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        by_instance.entry(o.instance_id).or_default().push(i);
    }
    if by_instance.len() < batch_size {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds the {} distinct instances in the split",
            by_instance.len()
        )));
    }
    let groups: Vec<&Vec<usize>> = by_instance.values().collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    Ok(order[..batch_size]
        .iter()
        .map(|&g| groups[g][rng.random_range(0..groups[g].len())])
        .collect())
}

fn subsample<T: Copy>(items: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    let mut idx = sample_indices(rng, items.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// One row of the loss log. Components not computed in a phase are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub phase: Phase,
    pub l_t: Option<f64>,
    pub l_pw: Option<f64>,
    pub l_pp: Option<f64>,
    pub l_g: Option<f64>,
    pub l_u: Option<f64>,
    pub l_invo: Option<f64>,
    pub l_part: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iteration,phase,L_T,L_pw,L_pp,L_G,L_U,L_invo,L_part,lr";

impl LogRow {
    fn new(iteration: u64, phase: Phase, lr: f64) -> Self {
        Self {
            iteration,
            phase,
            l_t: None,
            l_pw: None,
            l_pp: None,
            l_g: None,
            l_u: None,
            l_invo: None,
            l_part: None,
            lr,
        }
    }

    pub fn components(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("L_T", self.l_t),
            ("L_pw", self.l_pw),
            ("L_pp", self.l_pp),
            ("L_G", self.l_g),
            ("L_U", self.l_u),
            ("L_invo", self.l_invo),
            ("L_part", self.l_part),
        ]
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let cols: Vec<String> = self.components().iter().map(|(_, v)| cell(*v)).collect();
        format!("{},{},{},{}", self.iteration, self.phase.as_str(), cols.join(","), self.lr)
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Validation(format!("malformed loss log row '{line}'"));
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        let phase = match f[1] {
            "INR" => Phase::Inr,
            "COMPLETION" => Phase::Completion,
            _ => return Err(bad()),
        };
        Ok(Self {
            iteration: f[0].parse().map_err(|_| bad())?,
            phase,
            l_t: num(f[2])?,
            l_pw: num(f[3])?,
            l_pp: num(f[4])?,
            l_g: num(f[5])?,
            l_u: num(f[6])?,
            l_invo: num(f[7])?,
            l_part: num(f[8])?,
            lr: f[9].parse().map_err(|_| bad())?,
        })
    }

    fn check_finite(&self) -> Result<()> {
        if self.components().iter().all(|(_, v)| v.is_none_or(f64::is_finite)) {
            return Ok(());
        }
        let parts: Vec<String> = self
            .components()
            .iter()
            .filter_map(|(n, v)| v.map(|x| format!("{n}={x}")))
            .collect();
        Err(Error::Numeric(format!(
            "non-finite loss at iteration {} ({}): {}",
            self.iteration,
            self.phase.as_str(),
            parts.join(" ")
        )))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format(path, "missing loss log header"));
    }
    lines.filter(|l| !l.is_empty()).map(LogRow::parse_csv).collect()
}

/// Result of running the completion module on one partial input.
#[derive(Clone, Debug)]
pub struct Inference {
    pub y: Vec<Point3>,
    pub xc: Vec<Point3>,
    pub x: Vec<Point3>,
    pub provenance: Vec<Provenance>,
    /// `c_X`, the code conditioning the implicit field.
    pub code: Vec<f64>,
}

/// Networks plus their parameters: everything needed for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub completion: CompletionNet,
    pub template: TemplateNet,
    pub theta_g: ParamSet,
    pub theta_u: ParamSet,
    pub theta_t: ParamSet,
    pub template_cloud: Option<TemplateCloud>,
}

impl Model {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (completion, theta_g, theta_u) =
            CompletionNet::new(cfg.completion.clone(), &mut seeds::rng(cfg.seed, &[0xc0]))?;
        let (template, theta_t) = TemplateNet::new(cfg.template.clone(), &mut seeds::rng(cfg.seed, &[0x7e]))?;
        Ok(Self {
            cfg,
            completion,
            template,
            theta_g,
            theta_u,
            theta_t,
            template_cloud: None,
        })
    }

    /// Completion forward pass on a read-only snapshot.
    pub fn infer(&self, partial: &[Point3]) -> Result<Inference> {
        let mut tape = Tape::new();
        let g = self.theta_g.bind_const(&mut tape);
        let u = self.theta_u.bind_const(&mut tape);
        let xp = tape.constant(Tensor::from_points(partial));
        let f = self.completion.forward(&mut tape, &g, &u, xp)?;
        Ok(Inference {
            y: tape.value(f.y).to_points()?,
            xc: tape.value(f.xc).to_points()?,
            x: tape.value(f.x).to_points()?,
            provenance: f.provenance,
            code: tape.value(f.c_x).data().to_vec(),
        })
    }

    /// `T∘D(·; code)` as a distance field.
    pub fn field(&self, code: Vec<f64>) -> NetworkField<'_> {
        NetworkField {
            net: &self.template,
            params: &self.theta_t,
            code: Some(code),
        }
    }

    /// The decoder alone, in canonical space.
    pub fn template_field(&self) -> NetworkField<'_> {
        NetworkField {
            net: &self.template,
            params: &self.theta_t,
            code: None,
        }
    }

    /// Warps `pts` into canonical space under `code`.
    pub fn warp(&self, pts: &[Point3], code: &[f64]) -> Result<Vec<Point3>> {
        let mut tape = Tape::new();
        let p = self.theta_t.bind_const(&mut tape);
        let x = tape.constant(Tensor::from_points(pts));
        let c = tape.constant(Tensor::row(code.to_vec()));
        let w = self.template.warp(&mut tape, &p, x, c)?;
        tape.value(w).to_points()
    }

    fn sets(&self) -> Vec<ParamSet> {
        let mut v = vec![self.theta_g.clone(), self.theta_u.clone(), self.theta_t.clone()];
        if let Some(t) = &self.template_cloud {
            let mut ps = ParamSet::new(TEMPLATE_SET);
            ps.add("points", Tensor::from_points(&t.points));
            ps.restore_state(t.iteration);
            v.push(ps);
        }
        v
    }
}

const TEMPLATE_SET: &str = "template_P";

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub config: TrainConfig,
    pub template_short: bool,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn replace_set(dst: &mut ParamSet, src: ParamSet, path: &Path) -> Result<()> {
    let same = dst.len() == src.len()
        && dst
            .params()
            .iter()
            .zip(src.params())
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !same || dst.name() != src.name() {
        return Err(Error::format(
            path,
            format!("parameter set '{}' does not match the configured network", src.name()),
        ));
    }
    *dst = src;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model, iteration: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sets = model.sets();
    let refs: Vec<&ParamSet> = sets.iter().collect();
    write_checkpoint(path, &refs)?;
    let meta = CheckpointMeta {
        iteration,
        config: model.cfg.clone(),
        template_short: model.template_cloud.as_ref().is_some_and(|t| t.short),
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mp, e))
}

/// Loads a checkpoint and its sidecar; returns the model and iteration.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    let mut model = Model::new(meta.config)?;
    let mut sets = read_checkpoint(path)?.into_iter();
    let (Some(g), Some(u), Some(t)) = (sets.next(), sets.next(), sets.next()) else {
        return Err(Error::format(path, "checkpoint needs theta_G, theta_U and theta_T"));
    };
    replace_set(&mut model.theta_g, g, path)?;
    replace_set(&mut model.theta_u, u, path)?;
    replace_set(&mut model.theta_t, t, path)?;
    if let Some(p) = sets.next() {
        if p.name() != TEMPLATE_SET || p.len() != 1 {
            return Err(Error::format(path, format!("unexpected parameter set '{}'", p.name())));
        }
        model.template_cloud = Some(TemplateCloud {
            points: p.params()[0].value.to_points()?,
            iteration: p.step_count(),
            short: meta.template_short,
        });
    }
    Ok((model, meta.iteration))
}

/// Training data handed to [`Trainer::step`].
pub struct TrainData<'a> {
    pub observations: &'a [PartialObservation],
    pub gt: &'a BTreeMap<u32, Vec<Point3>>,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        Self {
            observations: &ds.train,
            gt: &ds.gt,
        }
    }
}

/// Mutable training state around a [`Model`].
pub struct Trainer {
    pub model: Model,
    pub iteration: u64,
    pub history: Vec<LogRow>,
    /// Failed template extractions (the previous template is kept).
    pub template_failures: u64,
    exec: Execution,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, exec: Execution) -> Result<Self> {
        Ok(Self::from_model(Model::new(cfg)?, 0, exec))
    }

    pub fn from_model(model: Model, iteration: u64, exec: Execution) -> Self {
        Self {
            model,
            iteration,
            history: Vec::new(),
            template_failures: 0,
            exec,
        }
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }

    fn set_phase(&mut self, phase: Phase) {
        let m = &mut self.model;
        match phase {
            Phase::Inr => {
                m.theta_t.unfreeze();
                m.theta_g.freeze();
                m.theta_u.freeze();
            }
            Phase::Completion => {
                m.theta_t.freeze();
                m.theta_g.unfreeze();
                m.theta_u.unfreeze();
            }
        }
    }

    /// One alternate step on a freshly drawn batch.
    pub fn step(&mut self, data: &TrainData) -> Result<LogRow> {
        let cfg = self.model.cfg.clone();
        let it = self.iteration;
        let phase = phase_of(cfg.mode, it);
        let lr = lr_schedule(epochs_elapsed(it, cfg.batch_size, data.observations.len()), &cfg);
        let mut rng = seeds::rng(cfg.seed, &[0x57e9, it]);
        let batch = build_batch(data.observations, cfg.batch_size, &mut rng)?;
        let batch: Vec<&PartialObservation> = batch.iter().map(|&i| &data.observations[i]).collect();
        self.set_phase(phase);
        let mut row = LogRow::new(it, phase, lr);
        match phase {
            Phase::Inr => self.inr_step(&batch, &mut rng, &mut row)?,
            Phase::Completion => self.completion_step(&batch, data, &mut rng, &mut row)?,
        }
        row.check_finite()?;
        let adam = AdamConfig { lr, ..cfg.adam() };
        match phase {
            Phase::Inr => self.model.theta_t.adam_step(&adam),
            Phase::Completion => {
                self.model.theta_g.adam_step(&adam);
                self.model.theta_u.adam_step(&adam);
            }
        }
        self.iteration += 1;
        self.history.push(row.clone());
        Ok(row)
    }

    fn inr_step(&mut self, batch: &[&PartialObservation], rng: &mut impl Rng, row: &mut LogRow) -> Result<()> {
        let cfg = &self.model.cfg;
        let m = &self.model;
        let mut tape = Tape::new();
        let g = m.theta_g.bind(&mut tape);
        let u = m.theta_u.bind(&mut tape);
        let p = m.theta_t.bind(&mut tape);
        let inputs: Vec<Vec<Point3>> = batch.iter().map(|o| subsample(&o.surface, cfg.n_input, rng)).collect();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(Tensor::from_points(x))).collect();
        let fwd = m.completion.forward_many(&mut tape, &g, &u, &vars)?;
        let (mut sums, mut total) = ([0.0; 3], None);
        for ((o, xp), f) in batch.iter().zip(&inputs).zip(&fwd) {
            let udf = subsample(&o.udf, cfg.n_udf, rng);
            let x = tape.value(f.x).to_points()?;
            let anchors = subsample(&x, cfg.n_anchor, rng);
            let mut pts: Vec<Point3> = udf.iter().map(|s| [s[0], s[1], s[2]]).collect();
            let mut d: Vec<f64> = udf.iter().map(|s| s[3]).collect();
            pts.extend_from_slice(&anchors);
            d.extend(std::iter::repeat_n(0.0, anchors.len()));
            let pairs = sample_pairs(xp, cfg.template.pp_pairs, rng);
            let terms = inr_terms(&m.template, &mut tape, &p, f.c_x, &pts, &d, xp, &pairs)?;
            for (s, v) in sums.iter_mut().zip([terms.l_t, terms.l_pw, terms.l_pp]) {
                *s += tape.scalar_value(v)?;
            }
            let l = inr_loss(&mut tape, terms.l_t, terms.l_pw, terms.l_pp, cfg.template.l3, cfg.template.l4)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let b = batch.len() as f64;
        row.l_t = Some(sums[0] / b);
        row.l_pw = Some(sums[1] / b);
        row.l_pp = Some(sums[2] / b);
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / b);
        if !tape.scalar_value(loss)?.is_finite() {
            return Ok(());
        }
        tape.backward(loss)?;
        self.model.theta_t.accumulate_grads(&tape, &p)
    }

    /// Extracts a new template when none exists or the cached one is stale.
    fn refresh_template(&mut self) {
        let cfg = &self.model.cfg;
        let it = self.iteration;
        let stale = match &self.model.template_cloud {
            None => true,
            Some(t) => it >= t.iteration + cfg.template_refresh,
        };
        if !stale {
            return;
        }
        let tc = &cfg.template;
        let res = extract_template(
            &self.model.template_field(),
            tc.template_points,
            &tc.template_projection,
            seeds::derive(cfg.seed, &[0x7e3, it]),
            it,
            self.exec,
        );
        match res {
            Ok(t) => {
                if t.short {
                    log::info!("template at iteration {it} has only {} points", t.points.len());
                }
                self.model.template_cloud = Some(t);
            }
            Err(e) => {
                self.template_failures += 1;
                log::warn!("template extraction at iteration {it} failed: {e}");
            }
        }
    }

    fn completion_step(
        &mut self,
        batch: &[&PartialObservation],
        data: &TrainData,
        rng: &mut impl Rng,
        row: &mut LogRow,
    ) -> Result<()> {
        let mode = self.model.cfg.mode;
        let use_template = mode.has_field() && !mode.is_supervised() && self.iteration >= self.model.cfg.warmup_iterations;
        if use_template {
            self.refresh_template();
        }
        let cfg = &self.model.cfg;
        let m = &self.model;
        let mut tape = Tape::new();
        let g = m.theta_g.bind(&mut tape);
        let u = m.theta_u.bind(&mut tape);
        let p = m.theta_t.bind(&mut tape);
        let inputs: Vec<Var> = batch
            .iter()
            .map(|o| tape.constant(Tensor::from_points(&subsample(&o.surface, cfg.n_input, rng))))
            .collect();
        let fwd = m.completion.forward_many(&mut tape, &g, &u, &inputs)?;
        let ys: Vec<Var> = fwd.iter().map(|f| f.y).collect();
        let back = m.completion.complete_many(&mut tape, &g, &ys)?;
        let template = m.template_cloud.as_ref().filter(|_| use_template);
        let mut sums = [0.0; 4];
        let mut total = None;
        for (k, f) in fwd.iter().enumerate() {
            let l_invo = diff_chamfer_bi(&mut tape, back[k], inputs[k])?;
            let l_part = loss_part(&mut tape, f.xc, f.x)?;
            let (l_g, l_u) = if mode.is_supervised() {
                let gt = data.gt.get(&batch[k].instance_id).ok_or_else(|| {
                    Error::Config(format!("supervised mode needs GT for instance {}", batch[k].instance_id))
                })?;
                let gt = tape.constant(Tensor::from_points(&subsample(gt, cfg.n_gt, rng)));
                (diff_chamfer_bi(&mut tape, f.xc, gt)?, diff_chamfer_bi(&mut tape, f.x, gt)?)
            } else if let Some(t) = template {
                let wc = m.template.warp(&mut tape, &p, f.xc, f.c)?;
                let wx = m.template.warp(&mut tape, &p, f.x, f.c_x)?;
                (loss_template(&mut tape, wc, &t.points)?, loss_template(&mut tape, wx, &t.points)?)
            } else {
                let z = tape.constant(Tensor::scalar(0.0));
                (z, z)
            };
            for (s, v) in sums.iter_mut().zip([l_g, l_u, l_invo, l_part]) {
                *s += tape.scalar_value(v)?;
            }
            let (a, b) = completion_losses(&mut tape, l_g, l_u, l_invo, l_part, cfg.invo_weight(), cfg.completion.l2)?;
            let l = tape.add(a, b)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let b = batch.len() as f64;
        let has_targets = mode.is_supervised() || template.is_some();
        row.l_g = has_targets.then_some(sums[0] / b);
        row.l_u = has_targets.then_some(sums[1] / b);
        row.l_invo = Some(sums[2] / b);
        row.l_part = Some(sums[3] / b);
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / b);
        if !tape.scalar_value(loss)?.is_finite() {
            return Ok(());
        }
        tape.backward(loss)?;
        self.model.theta_g.accumulate_grads(&tape, &g)?;
        self.model.theta_u.accumulate_grads(&tape, &u)?;
        // θ_T is bound as a constant here; nothing to accumulate.
        debug_assert!(p.vars().iter().all(|&v| tape.grad(v).is_none()));
        Ok(())
    }

    /// Runs to the iteration budget, writing `loss_log.csv`, periodic
    /// checkpoints and `final.ivck` under `out`.
    pub fn run(&mut self, data: &TrainData, out: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join(LOG_FILE);
        let mut kept = Vec::new();
        if self.iteration > 0 && log_path.exists() {
            kept = read_log(&log_path)?;
            kept.retain(|r| r.iteration < self.iteration);
        }
        let mut text = format!("{LOG_HEADER}\n");
        for r in &kept {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
        let mut log = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let total = self.cfg().total_iterations(data.observations.len());
        let every = self.cfg().checkpoint_every;
        while self.iteration < total {
            let row = match self.step(data) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    let dump = out.join("diagnostic.txt");
                    let _ = fs::write(&dump, format!("{e}\n"));
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
            if every > 0 && self.iteration % every == 0 && self.iteration < total {
                save_checkpoint(&out.join(format!("checkpoints/iter_{:07}.ivck", self.iteration)), &self.model, self.iteration)?;
            }
            if self.iteration % 100 == 0 {
                log::info!("iteration {}/{total}: {}", self.iteration, row.to_csv());
            }
        }
        let ckpt = out.join(FINAL_CHECKPOINT);
        save_checkpoint(&ckpt, &self.model, self.iteration)?;
        Ok(TrainSummary {
            iterations: self.iteration,
            checkpoint: ckpt,
            log: log_path,
            template_failures: self.template_failures,
        })
    }
}

pub const LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ivck";

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub template_failures: u64,
}

/// Loads the dataset named in the config and trains from scratch, or resumes
/// from `resume` when given.
pub fn train(cfg: TrainConfig, out: &Path, resume: Option<&Path>, exec: Execution) -> Result<TrainSummary> {
    let mut trainer = match resume {
        Some(p) => {
            let (mut model, it) = load_checkpoint(p)?;
            model.cfg.max_iterations = cfg.max_iterations;
            model.cfg.epochs = cfg.epochs;
            Trainer::from_model(model, it, exec)
        }
        None => Trainer::new(cfg, exec)?,
    };
    let ds = Dataset::load(&trainer.cfg().dataset, exec)?;
    trainer.run(&TrainData::from_dataset(&ds), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(instance_id: u32, view_id: u32, seed: u64) -> PartialObservation {
        let mut rng = seeds::rng(seed, &[instance_id as u64, view_id as u64]);
        let surface: Vec<Point3> = (0..40)
            .map(|_| {
                let v: Point3 = [0; 3].map(|_| rng.random_range(-1.0f64..1.0));
                let n = crate::geometry::vec3::norm(v).max(1e-9);
                v.map(|c| 0.5 * c / n)
            })
            .collect();
        let udf = (0..60)
            .map(|_| {
                let v: Point3 = [0; 3].map(|_| rng.random_range(-1.0f64..1.0));
                let r = crate::geometry::vec3::norm(v);
                [v[0], v[1], v[2], (r - 0.5).abs()]
            })
            .collect();
        PartialObservation {
            instance_id,
            view_id,
            camera: [0.0, 0.0, 2.0],
            surface,
            udf,
        }
    }

    pub(crate) fn toy_data() -> (Vec<PartialObservation>, BTreeMap<u32, Vec<Point3>>) {
        let o: Vec<_> = (0..6).flat_map(|i| (0..2).map(move |v| obs(i, v, 3))).collect();
        let gt = (0..6).map(|i| (i, obs(i, 99, 4).surface)).collect();
        (o, gt)
    }

    pub(crate) fn toy_config(mode: Mode) -> TrainConfig {
        let mut t = TemplateConfig {
            code_dim: 8,
            warp_hidden: vec![16, 16],
            decoder_hidden: vec![16, 16],
            template_points: 32,
            ..TemplateConfig::default()
        };
        t.template_projection.candidates = 256;
        TrainConfig {
            mode,
            seed: 5,
            batch_size: 3,
            max_iterations: Some(10),
            warmup_iterations: 2,
            template_refresh: 4,
            n_input: 24,
            n_udf: 32,
            n_anchor: 16,
            n_gt: 32,
            completion: CompletionConfig {
                code_dim: 8,
                point_hidden: vec![16, 16],
                gen_hidden: vec![16],
                n_seeds: 8,
                n_coarse: 16,
                up_ratio: 2,
                up_hidden: vec![16],
                ..CompletionConfig::default()
            },
            template: t,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 5e-4);
        assert_eq!(lr_schedule(500, &cfg), 2.5e-4);
        assert_eq!(lr_schedule(2499, &cfg), 5e-4 * 0.5f64.powi(4));
        assert_eq!(epochs_elapsed(100, 24, 1200), 2);
    }

    #[test]
    fn batches_have_distinct_instances() {
        let (o, _) = toy_data();
        let mut rng = seeds::rng(1, &[]);
        let b = build_batch(&o, 6, &mut rng).unwrap();
        let mut ids: Vec<u32> = b.iter().map(|&i| o[i].instance_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(build_batch(&o, 7, &mut rng).is_err());
        let again = build_batch(&o, 6, &mut seeds::rng(1, &[])).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn phases_alternate_and_touch_disjoint_sets() {
        let (o, gt) = toy_data();
        let data = TrainData { observations: &o, gt: &gt };
        let mut tr = Trainer::new(toy_config(Mode::Full), Execution::Sequential).unwrap();
        for _ in 0..6 {
            let before = [tr.model.theta_t.fingerprint(), tr.model.theta_g.fingerprint(), tr.model.theta_u.fingerprint()];
            let row = tr.step(&data).unwrap();
            let after = [tr.model.theta_t.fingerprint(), tr.model.theta_g.fingerprint(), tr.model.theta_u.fingerprint()];
            match row.phase {
                Phase::Inr => {
                    assert_ne!(before[0], after[0]);
                    assert_eq!(before[1..], after[1..]);
                }
                Phase::Completion => {
                    assert_eq!(before[0], after[0]);
                    assert_ne!(before[1], after[1]);
                    assert_ne!(before[2], after[2]);
                }
            }
        }
        let inr = tr.history.iter().filter(|r| r.phase == Phase::Inr).count();
        assert_eq!(inr, 3);
        // Template losses appear once warm-up is over.
        assert!(tr.history[1].l_g.is_none());
        assert!(tr.history[3].l_g.is_some() || tr.template_failures > 0);
    }

    #[test]
    fn ablation_modes() {
        let (o, gt) = toy_data();
        let data = TrainData { observations: &o, gt: &gt };
        let mut tr = Trainer::new(toy_config(Mode::InrOnly), Execution::Sequential).unwrap();
        for _ in 0..3 {
            assert_eq!(tr.step(&data).unwrap().phase, Phase::Inr);
        }
        let mut tr = Trainer::new(toy_config(Mode::Supervised), Execution::Sequential).unwrap();
        tr.step(&data).unwrap();
        assert!(tr.step(&data).unwrap().l_g.is_some());
        let mut cfg = toy_config(Mode::NoInvo);
        assert_eq!(cfg.invo_weight(), 0.0);
        cfg.mode = Mode::Full;
        assert_eq!(cfg.invo_weight(), 1.0);
        let empty = BTreeMap::new();
        let data = TrainData { observations: &o, gt: &empty };
        let mut tr = Trainer::new(toy_config(Mode::Supervised), Execution::Sequential).unwrap();
        tr.step(&data).unwrap();
        assert!(matches!(tr.step(&data), Err(Error::Config(_))));
    }

    #[test]
    fn log_rows_round_trip() {
        let mut r = LogRow::new(3, Phase::Completion, 2.5e-4);
        r.l_invo = Some(0.125);
        r.l_part = Some(1e-7);
        let line = r.to_csv();
        assert_eq!(line, "3,COMPLETION,,,,,,0.125,0.0000001,0.00025");
        assert_eq!(LogRow::parse_csv(&line).unwrap(), r);
        r.l_g = Some(f64::NAN);
        assert!(r.check_finite().unwrap_err().to_string().contains("iteration 3"));
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("no-invo".parse::<Mode>().unwrap(), Mode::NoInvo);
        assert!("both".parse::<Mode>().is_err());
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let (o, gt) = toy_data();
        let data = TrainData { observations: &o, gt: &gt };
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(toy_config(Mode::Full), Execution::Sequential).unwrap();
        for _ in 0..5 {
            a.step(&data).unwrap();
        }
        let path = dir.path().join("k.ivck");
        save_checkpoint(&path, &a.model, a.iteration).unwrap();
        let ra = a.step(&data).unwrap();
        let (model, it) = load_checkpoint(&path).unwrap();
        assert_eq!(it, 5);
        let mut b = Trainer::from_model(model, it, Execution::Sequential);
        let rb = b.step(&data).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model.theta_g.fingerprint(), b.model.theta_g.fingerprint());
        assert_eq!(a.model.theta_t.fingerprint(), b.model.theta_t.fingerprint());
    }
}
