//! End-to-end smoke run used by `selftest --full`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use involute::evalharness::{evaluate, EvalConfig};
use involute::scansynth::{build_dataset, primitive_sources, read_observation, Dataset, DatasetConfig, Split};
use involute::trainer::{save_checkpoint, Phase, TrainConfig, TrainData, Trainer, LOG_HEADER};
use involute::{Error, Execution, Result};

use crate::checks::{dataset_soundness, Check, UDF_TOL};

pub const SMOKE_INSTANCES: usize = 10;
pub const SMOKE_ITERATIONS: u64 = 200;

pub fn smoke_dataset_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        instances: SMOKE_INSTANCES,
        views: 8,
        seed,
        ..DatasetConfig::desk()
    }
}

pub fn smoke_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        max_iterations: Some(SMOKE_ITERATIONS),
        warmup_iterations: 50,
        template_refresh: 50,
        ..TrainConfig::desk()
    }
}

pub struct SmokeReport {
    pub checks: Vec<Check>,
    /// SHA-256 of the loss log.
    pub log_hash: String,
}

/// Generates a small corpus, trains, evaluates and checks invariants.
pub fn pipeline_smoke(out: &Path, seed: u64, exec: Execution) -> Result<SmokeReport> {
    let mut checks = Vec::new();
    let data_dir = out.join("data");
    let dcfg = smoke_dataset_config(seed);
    build_dataset(&primitive_sources(&dcfg), &dcfg, &data_dir, exec)?;
    let ds = Dataset::load(&data_dir, exec)?;
    checks.push(Check::new(
        "dataset split",
        ds.manifest.instances.iter().all(|i| i.train_views.iter().all(|v| !i.test_views.contains(v))),
        format!("{} train / {} test observations", ds.train.len(), ds.test.len()),
    ));

    match dataset_soundness(&data_dir, exec) {
        Ok(a) => {
            checks.push(Check::new(
                "dataset udf exact",
                a.max_udf_err <= UDF_TOL,
                format!("max error {:.3e} over {} samples (< {UDF_TOL:e})", a.max_udf_err, a.udf_samples),
            ));
            checks.push(Check::new(
                "dataset visibility recheck",
                a.occluded == 0,
                format!("{} of {} surface points fail", a.occluded, a.surface_points),
            ));
        }
        Err(e) => checks.push(Check::new("dataset audit", false, e.to_string())),
    }

    let mut cfg = smoke_train_config(seed);
    cfg.dataset = data_dir.clone();
    let mut trainer = Trainer::new(cfg, exec)?;
    let data = TrainData::from_dataset(&ds);
    let mut frozen_ok = true;
    let mut log = format!("{LOG_HEADER}\n");
    for _ in 0..SMOKE_ITERATIONS {
        let m = &trainer.model;
        let before = [m.theta_t.fingerprint(), m.theta_g.fingerprint(), m.theta_u.fingerprint()];
        let row = trainer.step(&data)?;
        let m = &trainer.model;
        let after = [m.theta_t.fingerprint(), m.theta_g.fingerprint(), m.theta_u.fingerprint()];
        frozen_ok &= match row.phase {
            Phase::Inr => before[1] == after[1] && before[2] == after[2],
            Phase::Completion => before[0] == after[0],
        };
        log.push_str(&row.to_csv());
        log.push('\n');
    }
    let train_dir = out.join("train");
    fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    let log_path = train_dir.join("loss_log.csv");
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let ckpt = train_dir.join("final.ivck");
    save_checkpoint(&ckpt, &trainer.model, trainer.iteration)?;
    let inr = trainer.history.iter().filter(|r| r.phase == Phase::Inr).count();
    checks.push(Check::new(
        "alternation",
        inr as u64 * 2 == SMOKE_ITERATIONS,
        format!("{inr} INR / {} COMPLETION", trainer.history.len() - inr),
    ));
    checks.push(Check::new("frozen sets unchanged", frozen_ok, ""));
    checks.push(Check::new(
        "finite losses",
        trainer.history.iter().all(|r| r.components().iter().all(|(_, v)| v.is_none_or(f64::is_finite))),
        "",
    ));

    let ecfg = EvalConfig {
        corr_pairs: 5,
        corr_points: 128,
        ..EvalConfig::for_model(&trainer.model)
    };
    let rec = evaluate(&trainer.model, "final.ivck", &ds, Split::Test, &ecfg, exec)?;
    let valid = rec.validate();
    checks.push(Check::new(
        "metrics record",
        valid.is_ok() && rec.rows.len() == ds.test.len(),
        format!(
            "{} rows, CD {:?}, F1 {:?}{}",
            rec.rows.len(),
            rec.aggregates.cd,
            rec.aggregates.f1,
            valid.err().map(|e| format!(" ({e})")).unwrap_or_default()
        ),
    ));
    involute::evalharness::emit_report(&rec, Some(&trainer.history), &out.join("report"))?;

    // A corrupted observation must be rejected with its path in the message.
    let bad = out.join("corrupt.pudf");
    let src = data_dir.join(&ds.manifest.instances[0].views[0].path);
    let mut bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
    bytes[0] = b'X';
    fs::write(&bad, &bytes).map_err(|e| Error::io(&bad, e))?;
    let msg = match read_observation(&bad) {
        Ok(_) => String::new(),
        Err(e) => e.to_string(),
    };
    checks.push(Check::new("corrupt file rejected", msg.contains("corrupt.pudf"), msg));

    let log_hash = hex(&Sha256::digest(log.as_bytes()));
    Ok(SmokeReport { checks, log_hash })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
