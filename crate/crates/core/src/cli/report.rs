//! Side-by-side comparison of finished run directories.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::unlearn::TrainState;

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub command: String,
    pub method: Option<String>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub status: Option<String>,
    pub forget_em: f64,
    pub forget_rouge_l: f64,
    pub forget_tr_at_k: f64,
    pub forget_tr_at_robust_k: f64,
    pub forget_el_forgotten: f64,
    pub forget_reproduction: f64,
    pub rephrased_em: Option<f64>,
    pub rephrased_rouge_l: Option<f64>,
    pub neighbour_em: Option<f64>,
    pub general_em: Option<f64>,
    pub retain_em: f64,
    pub base_forget_rouge_l: Option<f64>,
    /// `1 - rouge / base_rouge` on the forget split.
    pub rouge_reduction: Option<f64>,
    pub base_retain_em: Option<f64>,
    pub fact_mass_base: Option<f64>,
    pub fact_mass_unlearned: Option<f64>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    serde_json::from_str(&read(path)?).map(Some).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn row_for(name: String, dir: &Path) -> Result<(ReportRow, Option<TrainState>)> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let report = EvalReport::from_json(&read(&dir.join("eval.json"))?)
        .map_err(|e| Error::invalid(format!("{}: {e}", dir.display())))?;
    let base: Option<EvalReport> = read_json(&dir.join("eval_base.json"))?;
    let state: Option<TrainState> = read_json(&dir.join("state.json"))?;
    let summary: Option<serde_json::Value> = read_json(&dir.join("summary.json"))?;
    let forget = report
        .split("forget")
        .ok_or_else(|| Error::invalid(format!("{}: report has no forget split", dir.display())))?;
    let unlearn = cfg.command == "unlearn";
    let base_rouge = base.as_ref().and_then(|b| b.split("forget")).map(|m| m.rouge_l);
    let mass = |key: &str| summary.as_ref().and_then(|s| s.get(key)).and_then(|v| v.as_f64());
    let row = ReportRow {
        run: name,
        command: cfg.command.clone(),
        method: unlearn.then(|| cfg.unlearn.method.as_str().to_string()),
        lambda: unlearn.then_some(cfg.unlearn.lambda),
        seed: unlearn.then_some(cfg.unlearn.seed),
        epochs: state.as_ref().map(|s| s.epoch),
        status: state.as_ref().map(|s| format!("{:?}", s.status).to_lowercase()),
        forget_em: forget.exact_match,
        forget_rouge_l: forget.rouge_l,
        forget_tr_at_k: forget.tr_at_k,
        forget_tr_at_robust_k: forget.tr_at_robust_k,
        forget_el_forgotten: forget.el_forgotten,
        forget_reproduction: forget.reproduction_rate,
        rephrased_em: report.split("forget_rephrased").map(|m| m.exact_match),
        rephrased_rouge_l: report.split("forget_rephrased").map(|m| m.rouge_l),
        neighbour_em: report.split("neighbour").map(|m| m.exact_match),
        general_em: report.split("general").map(|m| m.exact_match),
        retain_em: report.retain_exact_match(),
        base_forget_rouge_l: base_rouge,
        rouge_reduction: base_rouge.filter(|&b| b > 0.0).map(|b| 1.0 - forget.rouge_l / b),
        base_retain_em: base.as_ref().map(EvalReport::retain_exact_match),
        fact_mass_base: mass("fact_mass_base"),
        fact_mass_unlearned: mass("fact_mass_unlearned"),
    };
    Ok((row, state))
}

type Matrix = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let bad = |why: String| Error::invalid(format!("{}: {why}", path.display()));
    let cols: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().skip(1).map(String::from).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(rec.get(0).unwrap_or_default().to_string());
        let v = rec
            .iter()
            .skip(1)
            .map(|x| x.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        values.push(v);
    }
    Ok((cols, rows, values))
}

/// `unlearned - base` for every heatmap pair of a run.
fn diff_heatmaps(run_dir: &Path, out: &Path) -> Result<usize> {
    let src = run_dir.join("heatmaps");
    if !src.is_dir() {
        return Ok(0);
    }
    let mut stems = BTreeSet::new();
    for entry in std::fs::read_dir(&src).map_err(|e| Error::io(&src, e))? {
        let name = entry.map_err(|e| Error::io(&src, e))?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_base.csv") {
            stems.insert(stem.to_string());
        }
    }
    let mut written = 0;
    for stem in stems {
        let after = src.join(format!("{stem}_unlearned.csv"));
        if !after.exists() {
            continue;
        }
        let (cols, rows, b) = read_matrix(&src.join(format!("{stem}_base.csv")))?;
        let (_, _, a) = read_matrix(&after)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(format!("{stem}_diff.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        let io = |e: csv::Error| Error::io(&path, e.into());
        let mut header = vec![String::new()];
        header.extend(cols);
        w.write_record(&header).map_err(io)?;
        for ((label, rb), ra) in rows.iter().zip(&b).zip(&a) {
            let mut rec = vec![label.clone()];
            rec.extend(ra.iter().zip(rb).map(|(x, y)| format!("{:.9e}", x - y)));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written += 1;
    }
    Ok(written)
}

/// Write `comparison.csv`, `comparison.json`, `trajectories.csv` and
/// `heatmaps/<run>/*_diff.csv` under `out`.
pub fn write_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::invalid("report needs at least one run directory"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut names = BTreeSet::new();
    let mut rows = Vec::new();
    let mut traj = csv::Writer::from_writer(Vec::new());
    let traj_err = |e: csv::Error| Error::invalid(e.to_string());
    traj.write_record([
        "run",
        "method",
        "epoch",
        "forget_loss",
        "retain_loss",
        "alpha",
        "grad_cosine",
        "forget_em",
        "retain_em",
    ])
    .map_err(traj_err)?;
    for (i, dir) in runs.iter().enumerate() {
        let base = dir.file_name().map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned());
        let name = if names.insert(base.clone()) { base } else { format!("{base}_{i}") };
        names.insert(name.clone());
        let (row, state) = row_for(name.clone(), dir)?;
        if let Some(s) = state {
            for r in &s.history {
                traj.write_record([
                    name.clone(),
                    s.method.as_str().to_string(),
                    r.epoch.to_string(),
                    r.forget_loss.to_string(),
                    r.retain_loss.to_string(),
                    r.alpha.to_string(),
                    r.grad_cosine.to_string(),
                    r.forget_em.to_string(),
                    r.retain_em.to_string(),
                ])
                .map_err(traj_err)?;
            }
        }
        diff_heatmaps(dir, &out.join("heatmaps").join(&name))?;
        rows.push(row);
    }

    let csv_path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::io(&csv_path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = out.join("comparison.json");
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let traj_path = out.join("trajectories.csv");
    let bytes = traj.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(&traj_path, bytes).map_err(|e| Error::io(&traj_path, e))?;
    eprintln!("compared {} run(s) into {}", rows.len(), out.display());
    Ok(())
}
