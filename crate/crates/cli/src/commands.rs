//! Subcommand pipelines. Each writes its artifacts under one output
//! directory and returns the paths it wrote.

use std::path::{Path, PathBuf};

use ibis_core::audit::{run_audit, AuditResult};
use ibis_core::bilevel::{ibis_run, CanarySet, TraceRecord};
use ibis_core::data::{sample_indices, synth_dataset};
use ibis_core::influence::{select_canaries, Selection};
use ibis_core::leastsq::{Canary, LeastSquaresInstance};
use ibis_core::{Dataset, SynthKind};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{CanarySource, DatasetSource, DesignKind, ExperimentConfig};
use crate::error::CliError;
use crate::io::{self, fmt_num, Provenance};
use crate::report::{Report, RunRecord};

pub fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance::new(cfg.hash(), cfg.seed)
}

fn config_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serialises")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serialises");
    text.push('\n');
    io::write_text(path, &text)
}

fn write_provenance(out: &Path, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<PathBuf, CliError> {
    let path = out.join("provenance.json");
    write_json(
        &path,
        &json!({
            "provenance": provenance(cfg),
            "config": config_value(cfg),
            "details": extra,
        }),
    )?;
    Ok(path)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    match cfg.dataset.source {
        DatasetSource::Synth => Ok(synth_dataset(&cfg.dataset.synth_kind(), cfg.seed)?),
        DatasetSource::Csv => {
            let path = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| CliError::Config("dataset.path is required for csv sources".into()))?;
            io::ingest_csv(path, cfg.dataset.task())
        }
    }
}

fn write_selection(out: &Path, sel: &Selection, prov: &Provenance) -> Result<Vec<PathBuf>, CliError> {
    let rows: Vec<Vec<String>> = sel
        .greedy
        .positions
        .iter()
        .zip(&sel.greedy.indices)
        .zip(&sel.greedy.ratios)
        .enumerate()
        .map(|(rank, ((&pos, &idx), &ratio))| {
            vec![
                rank.to_string(),
                pos.to_string(),
                idx.to_string(),
                fmt_num(ratio),
                fmt_num(sel.matrix.self_influence(pos)),
            ]
        })
        .collect();
    let selection = out.join("selection.csv");
    io::write_rows(
        &selection,
        prov,
        &["rank", "pool_position", "origin_index", "ratio", "self_influence"],
        &rows,
    )?;
    let matrix = out.join("influence_matrix.csv");
    io::write_matrix(&sel.matrix, &matrix, prov)?;
    Ok(vec![selection, matrix])
}

/// Greedy influence-based selection.
pub fn select(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let data = load_dataset(cfg)?;
    let prov = provenance(cfg);
    let sel = select_canaries(&data, &cfg.arch(), &cfg.influence_config(), &cfg.fit_config())?;
    let mut written = write_selection(out, &sel, &prov)?;
    let canaries = CanarySet::from_dataset(&data, &sel.greedy.indices, cfg.bilevel.box_projection)?;
    let path = out.join("canaries.csv");
    io::write_canaries(&canaries, &path, &prov)?;
    written.push(path);
    written.push(write_provenance(
        out,
        cfg,
        json!({ "optimality_gap": sel.optimality_gap, "dataset_len": data.len() }),
    )?);
    Ok(written)
}

fn write_trace(path: &Path, prov: &Provenance, trace: &[TraceRecord]) -> Result<(), CliError> {
    let mut text = serde_json::to_string(&json!({ "record": "provenance", "provenance": prov })).expect("json");
    text.push('\n');
    for t in trace {
        let mut v = serde_json::to_value(t).expect("json");
        v["record"] = json!("trace");
        text.push_str(&serde_json::to_string(&v).expect("json"));
        text.push('\n');
    }
    io::write_text(path, &text)
}

/// Selection followed by bilevel refinement.
pub fn craft(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let data = load_dataset(cfg)?;
    let prov = provenance(cfg);
    let res = ibis_run(&data, &cfg.arch(), &cfg.influence_config(), &cfg.bilevel_config())?;
    let mut written = write_selection(out, &res.selection, &prov)?;
    let canaries = out.join("canaries.csv");
    io::write_canaries(&res.canaries, &canaries, &prov)?;
    let trace = out.join("trace.jsonl");
    write_trace(&trace, &prov, &res.trace)?;
    written.extend([canaries, trace]);
    written.push(write_provenance(
        out,
        cfg,
        json!({
            "optimality_gap": res.selection.optimality_gap,
            "dataset_len": data.len(),
            "iterations": cfg.bilevel.epochs,
        }),
    )?);
    Ok(written)
}

fn audit_canaries(cfg: &ExperimentConfig, data: &Dataset) -> Result<CanarySet, CliError> {
    let boxed = cfg.bilevel.box_projection;
    Ok(match cfg.audit.canaries {
        CanarySource::Random => {
            let idx = sample_indices(data.len(), cfg.influence.m, cfg.seed)?;
            CanarySet::from_dataset(data, &idx, boxed)?
        }
        CanarySource::Influence => {
            let sel = select_canaries(data, &cfg.arch(), &cfg.influence_config(), &cfg.fit_config())?;
            CanarySet::from_dataset(data, &sel.greedy.indices, boxed)?
        }
        CanarySource::Ibis => ibis_run(data, &cfg.arch(), &cfg.influence_config(), &cfg.bilevel_config())?.canaries,
        CanarySource::File => {
            let path = cfg
                .audit
                .canary_file
                .as_ref()
                .ok_or_else(|| CliError::Config("audit.canary_file is required".into()))?;
            let set = io::read_canaries(path)?;
            if set.origin_indices.iter().any(|&i| i >= data.len()) {
                return Err(CliError::Input(format!(
                    "{}: origin index outside the dataset of {} rows",
                    path.display(),
                    data.len()
                )));
            }
            if set.canaries.iter().any(|c| c.x.len() != data.dim()) {
                return Err(CliError::Input(format!(
                    "{}: canary width differs from the dataset dimension {}",
                    path.display(),
                    data.dim()
                )));
            }
            set
        }
    })
}

/// One-run audits over every configured seed, run concurrently.
pub fn audit(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let data = load_dataset(cfg)?;
    let prov = provenance(cfg);
    let canaries = audit_canaries(cfg, &data)?;
    let mut written = Vec::new();
    let cpath = out.join("canaries.csv");
    io::write_canaries(&canaries, &cpath, &prov)?;
    written.push(cpath);

    let arch = cfg.arch();
    let train = cfg.train_config();
    let dp = cfg.dp.enabled.then(|| cfg.dp_config());
    let acfg = cfg.audit_config();
    let seeds = cfg.audit_seeds();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.audit.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(usize, PathBuf, AuditResult)> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(run, &seed)| {
                let r = run_audit(&data, &canaries, &arch, &train, dp.as_ref(), &acfg, seed)?;
                let path = out.join("runs").join(format!("run-{run:02}")).join("result.json");
                write_json(&path, &json!({ "provenance": prov, "run": run, "result": r }))?;
                Ok((run, path, r))
            })
            .collect::<Result<_, CliError>>()
    })?;
    let runs: Vec<RunRecord> = results
        .iter()
        .map(|(run, _, r)| RunRecord::new(*run, &prov.config_hash, r))
        .collect();
    written.extend(results.into_iter().map(|(_, p, _)| p));
    written.extend(write_report(out, &Report::new(prov, config_value(cfg), runs))?);
    Ok(written)
}

fn write_report(out: &Path, report: &Report) -> Result<Vec<PathBuf>, CliError> {
    let jsonl = out.join("report.jsonl");
    io::write_text(&jsonl, &report.to_jsonl())?;
    let summary = out.join("summary.txt");
    io::write_text(&summary, &report.summary_table())?;
    Ok(vec![jsonl, summary])
}

/// Exact `(cos, sin)` at multiples of 90 degrees.
fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let (s, c) = deg.to_radians().sin_cos();
        (c, s)
    }
}

fn interfere_instance(cfg: &ExperimentConfig) -> Result<LeastSquaresInstance, CliError> {
    let s = &cfg.interfere;
    Ok(match s.design {
        DesignKind::Identity => {
            let rows: Vec<Vec<f64>> = (0..s.d)
                .map(|i| (0..s.d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
            LeastSquaresInstance::new(&rows, &vec![0.0; s.d])?
        }
        DesignKind::Random => {
            let data = synth_dataset(
                &SynthKind::LinearGaussian {
                    d: s.d,
                    n: s.n,
                    noise_std: cfg.dataset.noise_std,
                },
                cfg.seed,
            )?;
            let rows: Vec<Vec<f64>> = data.samples().iter().map(|z| z.x.clone()).collect();
            let y: Vec<f64> = data.samples().iter().map(|z| z.y).collect();
            LeastSquaresInstance::new(&rows, &y)?
        }
    })
}

/// Closed-form interference between two canaries as the angle between
/// them sweeps from 0 to 180 degrees.
pub fn interfere(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let s = &cfg.interfere;
    let inst = interfere_instance(cfg)?;
    let prov = provenance(cfg);
    let mut e1 = vec![0.0; s.d];
    e1[0] = s.radius;
    let c1 = Canary::new(e1, s.y1);
    let rows = (0..s.angles)
        .map(|i| {
            let deg = 180.0 * i as f64 / (s.angles - 1) as f64;
            let (c, sn) = cos_sin_deg(deg);
            let mut x = vec![0.0; s.d];
            x[0] = s.radius * c;
            x[1] = s.radius * sn;
            let c2 = Canary::new(x, s.y2);
            Ok(vec![
                fmt_num(deg),
                fmt_num(inst.interference_gap(&c1, &c2)?),
                fmt_num(inst.interference_gap(&c2, &c1)?),
            ])
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let path = out.join("interference.csv");
    io::write_rows(&path, &prov, &["angle_deg", "gap_12", "gap_21"], &rows)?;
    Ok(vec![path, write_provenance(out, cfg, json!({}))?])
}

/// Merges the reports of several audit directories into `out`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let reports = dirs
        .iter()
        .map(|d| Report::load(&d.join("report.jsonl")))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &reports[0];
    let mut configs: Vec<serde_json::Value> = Vec::new();
    for r in &reports {
        if !configs.contains(&r.config) {
            configs.push(r.config.clone());
        }
    }
    let (prov, config) = if configs.len() == 1 {
        (first.provenance.clone(), first.config.clone())
    } else {
        let hashes: Vec<&str> = reports.iter().map(|r| r.provenance.config_hash.as_str()).collect();
        let merged = Provenance::new(format!("merged:{}", hashes.join("+")), first.provenance.seed);
        (merged, serde_json::Value::Array(configs))
    };
    let runs: Vec<RunRecord> = reports
        .iter()
        .flat_map(|r| r.runs.iter().cloned())
        .enumerate()
        .map(|(i, mut r)| {
            r.run = i;
            r
        })
        .collect();
    write_report(out, &Report::new(prov, config, runs))
}
