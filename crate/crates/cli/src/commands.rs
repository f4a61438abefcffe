use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use bvqa_core::eval::{coral_distance, ensemble as mix, evaluate_scores, sweep_kappa};
use bvqa_core::fusion::{fuse_streams, gap_gsp_pool, temporal_mean};
use bvqa_core::gradcheck::run_seeds;
use bvqa_core::io::{load_manifest, read_tensor, save_manifest, split_records, write_tensor};
use bvqa_core::pretrain::load_pairs;
use bvqa_core::train::{evaluate_model, finetune, load_videos, predict as predict_scores, pretrain as run_pretrain, scored};
use bvqa_core::{EvalReport, FeatureSequence, LabeledVideo, Manifest, ModelParams, Scored, Stream};
use serde::Serialize;

use crate::config::{Effective, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{config_beside, create_dir, read_scores, stem, tensor_files, write_json, write_json_lines, ScoreLine};
use crate::{Parallel, Seeded};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn threads(flag: Option<usize>, cfg: &RunConfig) -> CliResult<usize> {
    match flag.unwrap_or(cfg.threads) {
        0 => Err(CliError::Config("--threads must be at least 1".into())),
        n => Ok(n),
    }
}

pub fn pool(activations: &Path, out: &Path, stream: Stream) -> CliResult<()> {
    let files = tensor_files(activations)?;
    if files.is_empty() {
        return Err(CliError::Config(format!("no tensor files found in {}", activations.display())));
    }
    create_dir(out)?;
    let mut malformed = Vec::new();
    for file in &files {
        let result = read_tensor(file).and_then(|act| {
            let pooled = gap_gsp_pool(&act)?;
            FeatureSequence::new(stem(file), pooled.clone(), stream, 1)?;
            Ok((act, pooled))
        });
        match result {
            Ok((act, pooled)) => {
                write_tensor(&out.join(file.file_name().unwrap_or_default()), &pooled)?;
                println!("{}: {:?} -> {:?}", stem(file), act.shape(), pooled.shape());
            }
            Err(e) => malformed.push(format!("{}: {e}", file.display())),
        }
    }
    #[derive(Serialize)]
    struct Settings<'a> {
        activations: &'a Path,
        stream: Stream,
    }
    Effective {
        command: "pool",
        config_file: None,
        seed: 0,
        threads: 1,
        out,
        settings: Settings { activations, stream },
    }
    .write(&out.join("config.json"))?;
    if malformed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("malformed inputs:\n  {}", malformed.join("\n  "))))
    }
}

pub fn fuse(spatial: &Path, motion: &Path, out: &Path) -> CliResult<()> {
    let files = tensor_files(spatial)?;
    if files.is_empty() {
        return Err(CliError::Config(format!("no tensor files found in {}", spatial.display())));
    }
    let missing: Vec<String> = files
        .iter()
        .map(|f| motion.join(f.file_name().unwrap_or_default()))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!("missing motion sequences: {}", missing.join(", "))));
    }
    create_dir(out)?;
    for file in &files {
        let id = stem(file);
        let name = file.file_name().unwrap_or_default();
        let s = FeatureSequence::new(id.clone(), read_tensor(file)?, Stream::Spatial, 1)?;
        let m = FeatureSequence::new(id.clone(), read_tensor(&motion.join(name))?, Stream::Motion, 2)?;
        let fused = fuse_streams(&s, &m)?;
        write_tensor(&out.join(name), &fused.data)?;
        println!("{id}: {:?} + {:?} -> {:?}", s.data.shape(), m.data.shape(), fused.data.shape());
    }
    #[derive(Serialize)]
    struct Settings<'a> {
        spatial: &'a Path,
        motion: &'a Path,
    }
    Effective {
        command: "fuse",
        config_file: None,
        seed: 0,
        threads: 1,
        out,
        settings: Settings { spatial, motion },
    }
    .write(&out.join("config.json"))
}

pub fn split(manifest_path: &Path, out: &Path, common: &Seeded) -> CliResult<()> {
    let (cfg, config_file) = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(0);
    let manifest = load_manifest(manifest_path)?;
    let base = if manifest.base_dir.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        manifest.base_dir.clone()
    };
    let base = base
        .canonicalize()
        .map_err(|e| CliError::Data(format!("{}: {e}", base.display())))?;
    let mut records = manifest.records.clone();
    for r in &mut records {
        r.fused_feature_path = base.join(&r.fused_feature_path);
    }
    create_dir(out)?;
    for part in split_records(&records, seed) {
        let name = serde_json::to_value(part.split)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        save_manifest(&out.join(format!("{name}.json")), &part)?;
        println!("{name}: {} videos", part.records.len());
    }
    Effective {
        command: "split",
        config_file: config_file.as_deref(),
        seed,
        threads: threads(common.threads, &cfg)?,
        out,
        settings: serde_json::json!({ "manifest": manifest_path }),
    }
    .write(&out.join("config.json"))
}

pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub stop_srcc: Option<f64>,
    pub repetitions: Option<usize>,
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<LabeledVideo>> {
    let mut videos = Vec::new();
    let mut ids = BTreeSet::new();
    for path in paths {
        for v in load_videos(&load_manifest(path)?)? {
            if !ids.insert(v.video_id.clone()) {
                return Err(CliError::Data(format!(
                    "video_id `{}` appears in more than one manifest",
                    v.video_id
                )));
            }
            videos.push(v);
        }
    }
    Ok(videos)
}

fn check_input_dim(videos: &[LabeledVideo], dim: usize) -> CliResult<()> {
    match videos.iter().find(|v| v.features.shape().get(1) != Some(&dim)) {
        Some(v) => Err(CliError::Config(format!(
            "video `{}` has feature shape {:?} but train.head.input_dim is {dim}",
            v.video_id,
            v.features.shape()
        ))),
        None => Ok(()),
    }
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    best_epoch: usize,
    val_srcc: Option<f64>,
    val_plcc: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    repetitions: usize,
    median_val_srcc: Option<f64>,
    median_val_plcc: Option<f64>,
    runs: Vec<RunSummary>,
}

pub fn train(train: &[PathBuf], val: &Path, out: &Path, o: TrainOverrides, common: &Seeded) -> CliResult<()> {
    let (mut cfg, config_file) = RunConfig::load(common.config.as_deref())?;
    let t = &mut cfg.train;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.lr = o.lr.unwrap_or(t.lr);
    t.lambda = o.lambda.unwrap_or(t.lambda);
    t.stop_srcc = o.stop_srcc.or(t.stop_srcc);
    t.seed = common.seed.unwrap_or(t.seed);
    cfg.repetitions = o.repetitions.unwrap_or(cfg.repetitions);
    let threads = threads(common.threads, &cfg)?;
    cfg.threads = threads;
    if cfg.repetitions == 0 {
        return Err(CliError::Config("repetitions must be at least 1".into()));
    }
    cfg.train.validate()?;

    let train_videos = load_all(train)?;
    let val_videos = load_all(std::slice::from_ref(&val.to_path_buf()))?;
    check_input_dim(&train_videos, cfg.train.head.input_dim)?;
    check_input_dim(&val_videos, cfg.train.head.input_dim)?;

    create_dir(out)?;
    #[derive(Serialize)]
    struct Settings<'a> {
        train_manifests: &'a [PathBuf],
        val_manifest: &'a Path,
        repetitions: usize,
        train: &'a bvqa_core::TrainConfig,
    }
    Effective {
        command: "train",
        config_file: config_file.as_deref(),
        seed: cfg.train.seed,
        threads,
        out,
        settings: Settings {
            train_manifests: train,
            val_manifest: val,
            repetitions: cfg.repetitions,
            train: &cfg.train,
        },
    }
    .write(&out.join("config.json"))?;

    let mut runs = Vec::new();
    for rep in 0..cfg.repetitions {
        let mut run_cfg = cfg.train.clone();
        run_cfg.seed = cfg.train.seed.wrapping_add(rep as u64);
        let dir = if cfg.repetitions == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("rep-{rep:03}"))
        };
        create_dir(&dir)?;
        let outcome = finetune(&train_videos, &val_videos, &run_cfg, threads)?;
        outcome.params.save(&dir.join("model.json"))?;
        write_json_lines(&dir.join("history.jsonl"), &outcome.history)?;
        let report = evaluate_model(&outcome.params, &val_videos, threads)?;
        write_json(&dir.join("report.json"), &report)?;
        println!(
            "seed {}: best epoch {} of {}, validation SRCC {} PLCC {}",
            run_cfg.seed,
            outcome.best_epoch,
            outcome.history.len(),
            fmt_metric(report.weighted_srcc),
            fmt_metric(report.weighted_plcc)
        );
        runs.push(RunSummary {
            seed: run_cfg.seed,
            best_epoch: outcome.best_epoch,
            val_srcc: report.weighted_srcc,
            val_plcc: report.weighted_plcc,
        });
    }
    let summary = Summary {
        repetitions: runs.len(),
        median_val_srcc: median(runs.iter().filter_map(|r| r.val_srcc).collect()),
        median_val_plcc: median(runs.iter().filter_map(|r| r.val_plcc).collect()),
        runs,
    };
    if summary.repetitions > 1 {
        println!(
            "median over {} runs: SRCC {} PLCC {}",
            summary.repetitions,
            fmt_metric(summary.median_val_srcc),
            fmt_metric(summary.median_val_plcc)
        );
    }
    write_json(&out.join("summary.json"), &summary)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

fn print_report(report: &EvalReport) {
    for db in &report.databases {
        let note = if db.degenerate { " (constant predictions)" } else { "" };
        println!(
            "{}: N={} SRCC={} PLCC={}{note}",
            db.database_id,
            db.n,
            fmt_metric(db.srcc),
            fmt_metric(db.plcc)
        );
    }
    println!(
        "weighted: SRCC={} PLCC={}",
        fmt_metric(report.weighted_srcc),
        fmt_metric(report.weighted_plcc)
    );
}

fn scores_for(manifest: &Manifest, scores: &[ScoreLine], path: &Path) -> CliResult<Vec<Scored>> {
    let by_id: BTreeMap<&str, f64> = scores.iter().map(|s| (s.video_id.as_str(), s.q_p)).collect();
    let missing: Vec<&str> = manifest
        .records
        .iter()
        .map(|r| r.video_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no score for {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(manifest
        .records
        .iter()
        .map(|r| Scored {
            database_id: r.database_id.clone(),
            prediction: by_id[r.video_id.as_str()],
            mos: r.mos,
        })
        .collect())
}

fn check_finite(values: &[f64], what: &str) -> CliResult<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(CliError::Numeric(format!("non-finite {what} at position {i}"))),
        None => Ok(()),
    }
}

pub fn eval(
    manifest_path: &Path,
    model: Option<&Path>,
    scores: Option<&Path>,
    report_path: Option<&Path>,
    common: &Parallel,
) -> CliResult<()> {
    let (cfg, _) = RunConfig::load(common.config.as_deref())?;
    let threads = threads(common.threads, &cfg)?;
    let manifest = load_manifest(manifest_path)?;
    let items = match (model, scores) {
        (Some(model), _) => {
            let params = ModelParams::load(model)?;
            let videos = load_videos(&manifest)?;
            let predictions = predict_scores(&params, &videos, threads)?;
            check_finite(&predictions, "prediction")?;
            scored(&videos, &predictions)
        }
        (None, Some(path)) => scores_for(&manifest, &read_scores(path)?, path)?,
        (None, None) => return Err(CliError::Config("either --model or --scores is required".into())),
    };
    check_finite(&items.iter().map(|s| s.prediction).collect::<Vec<_>>(), "score")?;
    let report = evaluate_scores(&items)?;
    print_report(&report);
    if let Some(path) = report_path {
        write_json(path, &report)?;
    }
    Ok(())
}

pub fn predict(manifest_path: &Path, model: &Path, out: &Path, common: &Parallel) -> CliResult<()> {
    let (cfg, config_file) = RunConfig::load(common.config.as_deref())?;
    let threads = threads(common.threads, &cfg)?;
    let params = ModelParams::load(model)?;
    let videos = load_videos(&load_manifest(manifest_path)?)?;
    let predictions = predict_scores(&params, &videos, threads)?;
    check_finite(&predictions, "prediction")?;
    let rows: Vec<ScoreLine> = videos
        .iter()
        .zip(&predictions)
        .map(|(v, &q_p)| ScoreLine {
            video_id: v.video_id.clone(),
            q_p,
        })
        .collect();
    write_json_lines(out, &rows)?;
    println!("scored {} videos", rows.len());
    Effective {
        command: "predict",
        config_file: config_file.as_deref(),
        seed: 0,
        threads,
        out,
        settings: serde_json::json!({ "manifest": manifest_path, "model": model }),
    }
    .write(&config_beside(out))
}

fn mean_features(path: &Path) -> CliResult<(Vec<f64>, usize, usize)> {
    let videos = load_videos(&load_manifest(path)?)?;
    let mut rows = Vec::new();
    let mut dim = None;
    for v in &videos {
        let m = temporal_mean(&v.features)?;
        if *dim.get_or_insert(m.len()) != m.len() {
            return Err(CliError::Data(format!(
                "{}: video `{}` has {} channels, expected {}",
                path.display(),
                v.video_id,
                m.len(),
                dim.unwrap_or_default()
            )));
        }
        rows.extend(m);
    }
    Ok((rows, videos.len(), dim.unwrap_or(0)))
}

pub fn coral(source: &Path, target: &Path) -> CliResult<()> {
    let (a, na, da) = mean_features(source)?;
    let (b, nb, db) = mean_features(target)?;
    if da != db {
        return Err(CliError::Data(format!("feature dimensions differ: {da} vs {db}")));
    }
    let d = coral_distance(&a, na, &b, nb, da)?;
    println!("coral {d}");
    Ok(())
}

pub fn ensemble(a_path: &Path, b_path: &Path, kappa: Option<f64>, manifest: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let a = read_scores(a_path)?;
    let b = read_scores(b_path)?;
    let b_by_id: BTreeMap<&str, f64> = b.iter().map(|s| (s.video_id.as_str(), s.q_p)).collect();
    if a.len() != b.len() || a.iter().any(|s| !b_by_id.contains_key(s.video_id.as_str())) {
        return Err(CliError::Data(format!(
            "{} and {} score different videos",
            a_path.display(),
            b_path.display()
        )));
    }
    let qa: Vec<f64> = a.iter().map(|s| s.q_p).collect();
    let qb: Vec<f64> = a.iter().map(|s| b_by_id[s.video_id.as_str()]).collect();
    match (kappa, manifest) {
        (Some(kappa), _) => {
            let out = out.ok_or_else(|| CliError::Config("--out is required with --kappa".into()))?;
            let mixed = mix(&qa, &qb, kappa)?;
            let rows: Vec<ScoreLine> = a
                .iter()
                .zip(mixed)
                .map(|(s, q_p)| ScoreLine {
                    video_id: s.video_id.clone(),
                    q_p,
                })
                .collect();
            write_json_lines(out, &rows)?;
            println!("wrote {} scores with kappa {kappa}", rows.len());
            Ok(())
        }
        (None, Some(manifest_path)) => {
            let manifest = load_manifest(manifest_path)?;
            let a_items = scores_for(&manifest, &a, a_path)?;
            let b_items = scores_for(&manifest, &b, b_path)?;
            let mos: Vec<f64> = a_items.iter().map(|s| s.mos).collect();
            let ids: Vec<String> = a_items.iter().map(|s| s.database_id.clone()).collect();
            let sa: Vec<f64> = a_items.iter().map(|s| s.prediction).collect();
            let sb: Vec<f64> = b_items.iter().map(|s| s.prediction).collect();
            let result = sweep_kappa(&sa, &sb, &mos, &ids)?;
            println!("best kappa {} with (SRCC+PLCC)/2 = {:.6}", result.best_kappa, result.best_score);
            if let Some(out) = out {
                write_json(out, &result)?;
            }
            Ok(())
        }
        (None, None) => Err(CliError::Config("--sweep needs --manifest".into())),
    }
}

pub fn gradcheck(cases: Option<u64>, out: Option<&Path>, common: &Seeded) -> CliResult<()> {
    let (cfg, _) = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(0);
    let cases = cases.unwrap_or(cfg.gradcheck_cases);
    if cases == 0 {
        return Err(CliError::Config("--cases must be at least 1".into()));
    }
    let results = run_seeds(seed..seed.saturating_add(cases))?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!("{:width$}  {:.3e}", r.name, r.max_rel_error);
    }
    if let Some(out) = out {
        write_json(out, &results)?;
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} ops, {cases} seeds, worst relative error {worst:.3e}", results.len());
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| r.max_rel_error.is_nan() || r.max_rel_error >= GRADCHECK_TOLERANCE)
        .map(|r| r.name.as_str())
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check above {GRADCHECK_TOLERANCE:e} for: {}",
            failing.join(", ")
        )))
    }
}

pub struct PretrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub hidden: Option<usize>,
}

pub fn pretrain(pairs_path: &Path, out: &Path, o: PretrainOverrides, common: &Seeded) -> CliResult<()> {
    let (mut cfg, config_file) = RunConfig::load(common.config.as_deref())?;
    let p = &mut cfg.pretrain;
    p.epochs = o.epochs.unwrap_or(p.epochs);
    p.batch_size = o.batch_size.unwrap_or(p.batch_size);
    p.lr = o.lr.unwrap_or(p.lr);
    p.hidden = o.hidden.unwrap_or(p.hidden);
    p.seed = common.seed.unwrap_or(p.seed);
    p.validate()?;
    let threads = threads(common.threads, &cfg)?;
    let pairs = load_pairs(pairs_path)?;
    create_dir(out)?;
    Effective {
        command: "pretrain",
        config_file: config_file.as_deref(),
        seed: cfg.pretrain.seed,
        threads,
        out,
        settings: serde_json::json!({ "pairs": pairs_path, "pretrain": &cfg.pretrain }),
    }
    .write(&out.join("config.json"))?;
    let (model, history) = run_pretrain(&pairs, &cfg.pretrain)?;
    write_json(&out.join("model.json"), &model)?;
    write_json_lines(&out.join("history.jsonl"), &history)?;
    for h in &history {
        println!(
            "epoch {:>3}  lr {:.1e}  loss {:.6}  fidelity {:.6}  hinge {:.6}",
            h.epoch, h.lr, h.loss, h.fidelity, h.hinge
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn numeric_failures_exit_with_four() {
        let err = check_finite(&[1.0, f64::NAN], "score").unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("position 1"));
    }
}
