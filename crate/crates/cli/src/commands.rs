use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use tabmeta_core::data::{Dataset, TaskKind};
use tabmeta_core::eval::{
    analyze_prior as run_analysis, mse, permutation_ensemble, predict as predict_rows, rank_and_wins,
    roc_auc_ovo, split_summary, Histogram2d, KlMode, MetricReport, PredictOptions, SplitSummary,
    SMOOTHING,
};
use tabmeta_core::io::{ingest_csv, read_csv_table, IngestOptions};
use tabmeta_core::model::{load_checkpoint, ModelConfig, Prediction};
use tabmeta_core::rng::{derive_rng, derive_seed};
use tabmeta_core::tensor::ParamSet;
use tabmeta_core::train::{pretrain as run_pretrain, PretrainOptions, RunConfig};
use tabmeta_core::{Error, Result};

pub fn pretrain(config: &Path, out: &Path, resume: bool, stop_after: Option<u64>) -> Result<()> {
    let run = RunConfig::load(config)?;
    let result = run_pretrain(
        &run,
        &PretrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            stop_after,
            eval_set: None,
        },
    )?;
    let last_nll = result.log.nll_stream().last().map(|s| s.1);
    println!(
        "{}",
        serde_json::json!({
            "steps": result.state.step,
            "total_steps": run.train.total_steps(),
            "completed": result.completed,
            "last_nll": last_nll,
            "out": out,
        })
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let (header, params) = load_checkpoint(path)?;
    header.model.check_params(&params)?;
    Ok((header.model, params))
}

fn unchanged(params: &ParamSet, before: u64) -> Result<()> {
    if params.checksum() != before {
        return Err(Error::Model("parameters changed during inference".into()));
    }
    Ok(())
}

pub fn predict(
    checkpoint: &Path,
    train: &Path,
    test: &Path,
    target: &str,
    ensemble: usize,
    seed: u64,
    output: Option<&Path>,
) -> Result<()> {
    let (cfg, params) = load_model(checkpoint)?;
    let before = params.checksum();
    let (train_ds, schema) = ingest_csv(train, target, &IngestOptions::default())?;
    let (test_ds, _) = schema.apply(test)?;
    let opts = PredictOptions {
        seed,
        ..PredictOptions::default()
    };
    let pred = if ensemble <= 1 {
        predict_rows(&cfg, &params, &train_ds, &test_ds, &opts)?
    } else {
        permutation_ensemble(&cfg, &params, &train_ds, &test_ds, ensemble, &opts)?.prediction
    };
    unchanged(&params, before)?;

    let sink: Box<dyn Write> = match output {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    match &pred {
        Prediction::Classification { rows, .. } => {
            let mut header = vec!["row".to_string()];
            header.extend(schema.class_names().iter().map(|c| format!("p_{c}")));
            w.write_record(&header)?;
            for i in 0..*rows {
                let mut rec = vec![i.to_string()];
                rec.extend(pred.row(i).iter().map(|p| p.to_string()));
                w.write_record(&rec)?;
            }
        }
        Prediction::Regression { mu, sigma } => {
            w.write_record(["row", "mean", "std"])?;
            for (i, (m, s)) in mu.iter().zip(sigma).enumerate() {
                w.write_record([i.to_string(), m.to_string(), s.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// 80-20 split of a shuffled row order; at least one row on each side.
fn split_rows(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[]));
    let l = ((n as f64 * 0.8).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = order.split_off(l);
    (order, test)
}

fn score(pred: &Prediction, test: &Dataset) -> f64 {
    match pred {
        Prediction::Classification { probs, classes, .. } => roc_auc_ovo(probs, *classes, &test.labels()).unwrap_or_else(|e| {
            log::warn!("AUC undefined on this split: {e}");
            f64::NAN
        }),
        Prediction::Regression { mu, .. } => mse(mu, &test.y),
    }
}

#[derive(Serialize)]
struct TaskReport {
    metric: &'static str,
    datasets: Vec<String>,
    report: MetricReport,
    /// Per algorithm, over splits.
    summaries: Vec<SplitSummary>,
}

pub fn evaluate(
    checkpoints: &[PathBuf],
    suite: &Path,
    splits: usize,
    target: Option<&str>,
    seed: u64,
    json: Option<&Path>,
) -> Result<()> {
    if splits == 0 {
        return Err(Error::Config("at least one split is required".into()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(suite)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no CSV files in {}", suite.display())));
    }
    let mut datasets = Vec::with_capacity(files.len());
    for f in &files {
        let name = match target {
            Some(t) => t.to_string(),
            None => read_csv_table(f)?
                .0
                .last()
                .cloned()
                .ok_or_else(|| Error::Data(format!("{} has no columns", f.display())))?,
        };
        let (ds, _) = ingest_csv(f, &name, &IngestOptions::default())?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        datasets.push((stem, ds));
    }
    let names: Vec<String> = checkpoints.iter().map(|c| c.display().to_string()).collect();

    // scores[algorithm][dataset][split]
    let mut scores = Vec::with_capacity(checkpoints.len());
    let mut timing = Vec::with_capacity(checkpoints.len());
    for ck in checkpoints {
        let (cfg, params) = load_model(ck)?;
        let before = params.checksum();
        let start = Instant::now();
        let mut per_dataset = Vec::with_capacity(datasets.len());
        for (di, (_, ds)) in datasets.iter().enumerate() {
            let mut per_split = Vec::with_capacity(splits);
            for s in 0..splits {
                let split_seed = derive_seed(seed, &[di as u64, s as u64]);
                let (tr, te) = split_rows(ds.n, split_seed);
                let (train, test) = (ds.select_rows(&tr), ds.select_rows(&te));
                let opts = PredictOptions {
                    seed: split_seed,
                    ..PredictOptions::default()
                };
                per_split.push(score(&predict_rows(&cfg, &params, &train, &test, &opts)?, &test));
            }
            per_dataset.push(per_split);
        }
        unchanged(&params, before)?;
        timing.push(start.elapsed().as_secs_f64());
        scores.push(per_dataset);
    }

    let mut out = serde_json::Map::new();
    let mut stdout = std::io::stdout().lock();
    for (task, metric, higher) in [
        (TaskKind::Classification, "roc_auc_ovo", true),
        (TaskKind::Regression, "mse", false),
    ] {
        let idx: Vec<usize> = (0..datasets.len()).filter(|&i| datasets[i].1.task == task).collect();
        if idx.is_empty() {
            continue;
        }
        let matrix: Vec<Vec<f64>> = idx
            .iter()
            .map(|&d| {
                scores
                    .iter()
                    .map(|alg| tabmeta_core::stats::mean(&alg[d]))
                    .collect()
            })
            .collect();
        let mut report = rank_and_wins(&names, &matrix, higher)?;
        report.timing_secs = timing.clone();
        let summaries = scores
            .iter()
            .map(|alg| split_summary(&idx.iter().map(|&d| alg[d].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        writeln!(stdout, "{} ({metric}, {} datasets, {splits} splits)", task.as_str(), idx.len())?;
        writeln!(
            stdout,
            "{:<40} {:>10} {:>12} {:>12} {:>10} {:>6} {:>10}",
            "checkpoint", "mean", "std_of_mean", "mean_of_std", "mean_rank", "wins", "time_s"
        )?;
        for (a, name) in names.iter().enumerate() {
            writeln!(
                stdout,
                "{:<40} {:>10.4} {:>12.4} {:>12.4} {:>10.2} {:>6} {:>10.2}",
                name,
                summaries[a].mean,
                summaries[a].std_of_mean,
                summaries[a].mean_of_std,
                report.mean_rank[a],
                report.wins[a],
                timing[a]
            )?;
        }
        let tr = TaskReport {
            metric,
            datasets: idx.iter().map(|&d| datasets[d].0.clone()).collect(),
            report,
            summaries,
        };
        out.insert(task.as_str().to_string(), serde_json::to_value(tr)?);
    }
    if let Some(p) = json {
        std::fs::write(p, serde_json::to_string_pretty(&out)?)?;
    }
    Ok(())
}

fn write_grid(path: &Path, h: &Histogram2d) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "x", "y", "density"])?;
    let width = (h.hi - h.lo) / h.bins as f64;
    let density = h.density(SMOOTHING);
    for i in 0..h.bins {
        for j in 0..h.bins {
            let x = h.lo + (i as f64 + 0.5) * width;
            let y = h.lo + (j as f64 + 0.5) * width;
            w.write_record([
                i.to_string(),
                j.to_string(),
                x.to_string(),
                y.to_string(),
                density[i * h.bins + j].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn analyze_prior(
    config: &Path,
    datasets: usize,
    checkpoint: Option<&Path>,
    agents: usize,
    agent_steps: usize,
    per_dataset: bool,
    out: &Path,
) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    let params = match checkpoint {
        Some(p) => {
            let (cfg, params) = load_model(p)?;
            run.model = cfg;
            params
        }
        None => run.model.init(run.train.seed)?,
    };
    let before = params.checksum();
    let mode = if per_dataset { KlMode::PerDataset } else { KlMode::Pooled };
    let analysis = run_analysis(&run, &params, datasets, agents, agent_steps, mode)?;
    unchanged(&params, before)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&analysis)?)?;
    write_grid(&out.join("density_ordinary.csv"), &analysis.ordinary_vs_ordinary.density_a)?;
    write_grid(&out.join("density_ordinary_prime.csv"), &analysis.ordinary_vs_ordinary.density_b)?;
    write_grid(&out.join("density_adversarial.csv"), &analysis.ordinary_vs_adversarial.density_b)?;
    let oo = &analysis.ordinary_vs_ordinary;
    let oa = &analysis.ordinary_vs_adversarial;
    println!(
        "{}",
        serde_json::json!({
            "datasets": datasets,
            "kl_ordinary_ordinary": oo.kl,
            "kl_ordinary_adversarial": oa.kl,
            "pearson_ordinary": oo.pearson_a,
            "pearson_adversarial": oa.pearson_b,
        })
    );
    Ok(())
}
