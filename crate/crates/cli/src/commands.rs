//! Implementation of every subcommand. `main` only parses arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use distgate_core::edt::{edt_bruteforce, edt_exact, DistanceMap};
use distgate_core::gating::{GatingParams, GatingWeights};
use distgate_core::inference::sliding_window_predict;
use distgate_core::instances::{extract_instances, instance_records, match_hits, ExtractionConfig, InstanceRecord};
use distgate_core::io::{load_labels, load_mask, load_scalar, save_scalar};
use distgate_core::metrics::{evaluate, CaseDetections, EvalReport};
use distgate_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use distgate_core::phantom::generate_dataset;
use distgate_core::pipeline::{DatasetManifest, Split};
use distgate_core::volume::{LabelVolume, Volume};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::train::{load_case, load_split, train, LoadedCase, Mode, TrainOutcome, ALL_MODES};

pub fn cmd_phantom_gen(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let t = Instant::now();
    let manifest = generate_dataset(out, cfg.seed, cfg.n_cases, cfg.split, &cfg.phantom)
        .with_context(|| format!("generating phantom set in {}", out.display()))?;
    info!("wrote {} cases to {} in {:.1?}", manifest.cases.len(), out.display(), t.elapsed());
    Ok(manifest)
}

pub fn cmd_edt(tumor: &Path, out: &Path, oracle: bool) -> Result<DistanceMap> {
    let mask = load_mask(tumor)?;
    let d = if oracle { edt_bruteforce(&mask)? } else { edt_exact(&mask)? };
    save_scalar(d.volume(), out)?;
    Ok(d)
}

/// Append `suffix` to the file stem of `path`, dropping any extension.
fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Write `<out>_prox` and `<out>_dist` weight volumes.
pub fn cmd_gate(distance: &Path, gating: GatingParams, out: &Path) -> Result<GatingWeights<f32>> {
    let d = DistanceMap::from_volume(load_scalar(distance)?)?;
    let w = GatingWeights::<f32>::from_distance(&d, gating)?;
    save_scalar(w.proximal(), suffixed(out, "_prox"))?;
    save_scalar(w.distal(), suffixed(out, "_dist"))?;
    Ok(w)
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn train_mode(cfg: &RunConfig, cases: &[LoadedCase], mode: Mode, seed: u64) -> Result<TrainOutcome> {
    let gating = mode.gating(&cfg.gating)?;
    let t = Instant::now();
    let every = (cfg.train.steps / 10).max(1);
    let out = train(cases, gating, &cfg.train, seed, |step, loss| {
        if step == 1 || step % every == 0 {
            info!("[{}] step {step}/{} loss {loss:.5}", mode.name(), cfg.train.steps);
        }
    })?;
    info!("[{}] trained {} steps in {:.1?}", mode.name(), cfg.train.steps, t.elapsed());
    Ok(out)
}

fn checkpoint_meta(cfg: &RunConfig, mode: Mode, seed: u64) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "mode": mode,
        "gating": mode.gating(&cfg.gating)?,
        "seed": seed,
        "config": cfg,
    }))
}

/// Train on the manifest's training split and write the checkpoint plus a
/// per-step loss CSV (`<out>.loss.csv` unless given).
pub fn cmd_train(cfg: &RunConfig, data: &Path, mode: Mode, out: &Path, loss_csv: Option<&Path>) -> Result<TrainOutcome> {
    let manifest = DatasetManifest::load(data)?;
    let cases = load_split(data, &manifest, Split::Train)?;
    let outcome = train_mode(cfg, &cases, mode, cfg.seed)?;
    ensure_parent(out)?;
    save_checkpoint(&outcome.params, cfg.train.steps as u64, checkpoint_meta(cfg, mode, cfg.seed)?, out)?;
    let csv_path = loss_csv.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("loss.csv"));
    write_loss_csv(&csv_path, &outcome.losses)?;
    Ok(outcome)
}

/// Fused probability volume for one case directory. The mode defaults to
/// the one recorded in the checkpoint.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, case_dir: &Path, mode: Option<Mode>, out: &Path) -> Result<Volume<f32>> {
    let (params, manifest) = load_checkpoint(checkpoint)?;
    let mode = match mode {
        Some(m) => m,
        None => serde_json::from_value(manifest.meta["mode"].clone())
            .context("checkpoint does not record a mode; pass --mode")?,
    };
    let c = load_case(case_dir)?;
    let prob = sliding_window_predict(&params, &c.case, &c.norm, &cfg.window, mode.gating(&cfg.gating)?)?;
    ensure_parent(out)?;
    save_scalar(&prob, out)?;
    Ok(prob)
}

fn detect(case_id: &str, prob: &Volume<f32>, gt: &LabelVolume, ex: &ExtractionConfig) -> Result<(CaseDetections, Vec<InstanceRecord>)> {
    let preds = extract_instances(prob, case_id, ex)?;
    let m = match_hits(&preds, gt, prob.grid())?;
    Ok((CaseDetections::from_match(case_id, &preds, &m), instance_records(&preds, &m)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: EvalReport,
    pub extraction: ExtractionConfig,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_curve_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["threshold", "precision", "recall", "fps_per_patient"])?;
    for p in &report.points {
        w.write_record([p.threshold, p.precision, p.recall, p.fps_per_patient].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth labels on the prepared grid. Voxels shared with the
/// tumour are dropped the same way training does.
fn prepared_labels(case_dir: &Path) -> Result<LabelVolume> {
    let labels = load_labels(case_dir.join("gtvln"))?;
    let tumor = load_mask(case_dir.join("tumor"))?;
    if labels.grid().spacing() != distgate_core::pipeline::TARGET_SPACING_MM {
        return Ok(load_case(case_dir)?.case.gtvln);
    }
    if !labels.data().iter().zip(tumor.data()).any(|(&l, &t)| l > 0 && t) {
        return Ok(labels);
    }
    let cleared = labels.data().iter().zip(tumor.data()).map(|(&l, &t)| if t { 0 } else { l }).collect();
    Ok(LabelVolume::compacting(Volume::new(*labels.grid(), cleared)?))
}

/// Evaluate every `<case_id>.json` probability volume in `pred_dir`
/// against `<gt_dir>/<case_id>/gtvln`.
pub fn cmd_eval(
    cfg: &RunConfig,
    pred_dir: &Path,
    gt_dir: &Path,
    out: &Path,
    curve_csv: Option<&Path>,
    instances_out: Option<&Path>,
) -> Result<EvalReport> {
    let mut ids: Vec<String> = fs::read_dir(pred_dir)
        .with_context(|| format!("listing {}", pred_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("no prediction volumes in {}", pred_dir.display());
    }
    let per_case: Vec<(CaseDetections, Vec<InstanceRecord>)> = ids
        .par_iter()
        .map(|id| {
            let prob = load_scalar(pred_dir.join(format!("{id}.json")))?;
            let gt = prepared_labels(&gt_dir.join(id))?;
            detect(id, &prob, &gt, &cfg.extraction)
        })
        .collect::<Result<_>>()?;
    let dets: Vec<CaseDetections> = per_case.iter().map(|(d, _)| d.clone()).collect();
    let report = evaluate(&dets)?;
    write_json(out, &ReportFile { report: report.clone(), extraction: cfg.extraction })?;
    if let Some(p) = curve_csv {
        write_curve_csv(p, &report)?;
    }
    if let Some(p) = instances_out {
        let all: Vec<InstanceRecord> = per_case.into_iter().flat_map(|(_, r)| r).collect();
        write_json(p, &all)?;
    }
    Ok(report)
}

/// One row of the mode comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: Mode,
    #[serde(rename = "mRecall")]
    pub m_recall: f64,
    #[serde(rename = "Recall_max")]
    pub recall_max: f64,
    #[serde(rename = "mFROC")]
    pub m_froc: f64,
    #[serde(rename = "FROC@4")]
    pub froc_4: f64,
    #[serde(rename = "FROC@6")]
    pub froc_6: f64,
}

impl ComparisonRow {
    fn from_report(mode: Mode, r: &EvalReport) -> Self {
        Self {
            mode,
            m_recall: r.m_recall,
            recall_max: r.recall_max,
            m_froc: r.m_froc,
            froc_4: r.froc(4.0).unwrap_or(0.0),
            froc_6: r.froc(6.0).unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub seed: u64,
    #[serde(flatten)]
    pub row: ComparisonRow,
    /// Mean batch loss at the first and last step; absent for the oracle.
    pub loss_initial: Option<f64>,
    pub loss_final: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub oracle: bool,
    pub test_cases: Vec<String>,
    /// Metrics averaged over seeds, one row per mode.
    pub table: Vec<ComparisonRow>,
    pub runs: Vec<ModeRun>,
    pub config: RunConfig,
}

pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

fn mean_rows(runs: &[ModeRun]) -> Vec<ComparisonRow> {
    ALL_MODES
        .iter()
        .map(|&mode| {
            let rs: Vec<&ComparisonRow> = runs.iter().filter(|r| r.row.mode == mode).map(|r| &r.row).collect();
            let n = rs.len() as f64;
            let avg = |f: fn(&ComparisonRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            ComparisonRow {
                mode,
                m_recall: avg(|r| r.m_recall),
                recall_max: avg(|r| r.recall_max),
                m_froc: avg(|r| r.m_froc),
                froc_4: avg(|r| r.froc_4),
                froc_6: avg(|r| r.froc_6),
            }
        })
        .collect()
}

fn write_table_csv(path: &Path, table: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["mode", "mRecall", "Recall_max", "mFROC", "FROC@4", "FROC@6"])?;
    for r in table {
        w.write_record(
            std::iter::once(r.mode.name().to_string())
                .chain([r.m_recall, r.recall_max, r.m_froc, r.froc_4, r.froc_6].map(|v| v.to_string())),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Train every mode with each seed on the training split, predict the test
/// split and tabulate the metrics. With `oracle` the ground truth is fed
/// back as the prediction and no training happens.
pub fn cmd_end_to_end(cfg: &RunConfig, data: &Path, out: &Path, seeds: &[u64], oracle: bool) -> Result<Comparison> {
    let manifest = DatasetManifest::load(data)?;
    let test = load_split(data, &manifest, Split::Test)?;
    if test.is_empty() {
        bail!("test split is empty");
    }
    let train_cases = if oracle { Vec::new() } else { load_split(data, &manifest, Split::Train)? };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let mut runs = Vec::new();
    for &seed in &seeds {
        let dir = out.join(format!("seed_{seed}"));
        for mode in ALL_MODES {
            let (probs, losses): (Vec<Volume<f32>>, Option<Vec<f64>>) = if oracle {
                (test.iter().map(|c| c.case.gtvln.foreground().to_scalar()).collect(), None)
            } else {
                let trained = train_mode(cfg, &train_cases, mode, seed)?;
                let ckpt = dir.join(format!("{}.json", mode.name()));
                ensure_parent(&ckpt)?;
                save_checkpoint(&trained.params, cfg.train.steps as u64, checkpoint_meta(cfg, mode, seed)?, &ckpt)?;
                write_loss_csv(&dir.join(format!("{}.loss.csv", mode.name())), &trained.losses)?;
                let gating = mode.gating(&cfg.gating)?;
                let t = Instant::now();
                let probs = test
                    .iter()
                    .map(|c| Ok(sliding_window_predict(&trained.params, &c.case, &c.norm, &cfg.window, gating)?))
                    .collect::<Result<_>>()?;
                info!("[{}] predicted {} test cases in {:.1?}", mode.name(), test.len(), t.elapsed());
                (probs, Some(trained.losses))
            };
            let dets: Vec<CaseDetections> = test
                .par_iter()
                .zip(&probs)
                .map(|(c, p)| Ok(detect(&c.case.case_id, p, &c.case.gtvln, &cfg.extraction)?.0))
                .collect::<Result<_>>()?;
            let report = evaluate(&dets)?;
            write_json(&dir.join(format!("{}.report.json", mode.name())), &ReportFile { report: report.clone(), extraction: cfg.extraction })?;
            let row = ComparisonRow::from_report(mode, &report);
            info!("[{}] seed {seed}: mRecall {:.4} mFROC {:.4}", mode.name(), row.m_recall, row.m_froc);
            runs.push(ModeRun {
                seed,
                row,
                loss_initial: losses.as_ref().and_then(|l| l.first().copied()),
                loss_final: losses.as_ref().and_then(|l| l.last().copied()),
            });
        }
    }
    let comparison = Comparison {
        seeds,
        oracle,
        test_cases: test.iter().map(|c| c.case.case_id.clone()).collect(),
        table: mean_rows(&runs),
        runs,
        config: cfg.clone(),
    };
    write_json(&out.join(COMPARISON_JSON), &comparison)?;
    write_table_csv(&out.join(COMPARISON_CSV), &comparison.table)?;
    Ok(comparison)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_replaces_extension() {
        assert_eq!(suffixed(Path::new("out/w.json"), "_prox"), PathBuf::from("out/w_prox"));
        assert_eq!(suffixed(Path::new("w"), "_dist"), PathBuf::from("w_dist"));
    }

    #[test]
    fn mean_rows_average_per_mode() {
        let run = |seed, mode, v| ModeRun {
            seed,
            row: ComparisonRow { mode, m_recall: v, recall_max: v, m_froc: v, froc_4: v, froc_6: v },
            loss_initial: None,
            loss_final: None,
        };
        let runs: Vec<ModeRun> =
            [1, 2].iter().flat_map(|&s| ALL_MODES.map(|m| run(s, m, s as f64 * 0.25))).collect();
        let t = mean_rows(&runs);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|r| r.m_recall == 0.375 && r.froc_6 == 0.375));
    }

    #[test]
    fn row_columns() {
        let row = ComparisonRow { mode: Mode::Sg, m_recall: 1.0, recall_max: 1.0, m_froc: 1.0, froc_4: 1.0, froc_6: 1.0 };
        let v = serde_json::to_value(&row).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["FROC@4", "FROC@6", "Recall_max", "mFROC", "mRecall", "mode"]);
    }
}
