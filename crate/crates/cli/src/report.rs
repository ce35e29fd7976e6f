//! Tables and plot-ready series from a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use autoassign::metrics::frequency_bucketed_accuracy;
use autoassign::trainer::{read_predictions, AgentPhase, Summary, TrainingLog};

/// `field  lo  hi  accuracy  count`, one row per non-empty bucket.
pub fn bucket_table(predictions_csv: &Path, width: u64) -> Result<String> {
    let rows = read_predictions(predictions_csv)?;
    let records: Vec<_> = rows.iter().map(|r| r.frequency_record()).collect();
    let table = frequency_bucketed_accuracy(&records, width)?;
    let mut out = String::from("field\tlo\thi\taccuracy\tcount\n");
    for (field, buckets) in &table {
        for b in buckets {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", field.name(), b.lo, b.lo + width, b.accuracy, b.count)?;
        }
    }
    Ok(out)
}

/// Per-iteration series: losses, evaluation accuracy, smoothed |δ| and unique counts.
pub fn series_table(log: &TrainingLog) -> Result<String> {
    let mut out = String::from(
        "iteration\tphase\tagent_phase\ttrain_loss\teval_accuracy\tsmoothed_delta\tlive_unique_user\tlive_unique_item\n",
    );
    let opt = |x: Option<f64>| x.map_or_else(|| "NA".to_owned(), |v| v.to_string());
    for r in &log.records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.iteration,
            serde_json::to_value(r.phase)?.as_str().unwrap_or("?"),
            serde_json::to_value(r.agent_phase)?.as_str().unwrap_or("?"),
            r.train_loss,
            opt(r.eval.map(|e| e.accuracy)),
            opt(r.smoothed_delta),
            r.live_unique_user,
            r.live_unique_item
        )?;
    }
    Ok(out)
}

pub fn run(run_dir: &Path, out: Option<&Path>, width: u64) -> Result<()> {
    let out = out.unwrap_or(run_dir);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let summary_path = run_dir.join("summary.json");
    let summary: Summary = serde_json::from_slice(
        &fs::read(&summary_path).with_context(|| format!("reading {}", summary_path.display()))?,
    )?;
    let log_path = run_dir.join("log.jsonl");
    let log = TrainingLog::from_jsonl(
        &fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?,
    )?;

    let buckets = bucket_table(&run_dir.join("predictions.csv"), width)?;
    fs::write(out.join("accuracy_by_frequency.tsv"), &buckets)?;
    fs::write(out.join("series.tsv"), series_table(&log)?)?;

    let m = &summary.metrics;
    let p = &summary.param_report;
    println!("mode\t{}\nseed\t{}", summary.mode, summary.seed);
    println!("test_interactions\t{}\naccuracy\t{}\nmse\t{}", m.count, m.accuracy, m.mse);
    println!("auc\t{}", m.auc.map_or_else(|| "NA".to_owned(), |a| a.to_string()));
    println!("origin_params\t{}\nactual_params\t{}\ndeduction_ratio\t{}", p.origin_params, p.actual_params, p.deduction_ratio);
    println!(
        "critic_guided_iterations\t{}\nreinforce_iterations\t{}",
        log.count_phase(AgentPhase::CriticGuided),
        log.count_phase(AgentPhase::Reinforce)
    );
    if let Some(i) = log.first_switch_to_reinforce() {
        println!("first_switch_to_reinforce\t{i}");
    }
    println!();
    print!("{buckets}");
    Ok(())
}
