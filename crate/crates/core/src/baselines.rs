//! Threshold-filter baselines and the searches over their thresholds.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::embedding::{Field, IdKey};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::trainer::{run_experiment, Mode, TrainerConfig};

/// Per-field frequency thresholds: an id is shared while `F ≤ τ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LffPolicy {
    pub tau_user: u64,
    pub tau_item: u64,
}

impl Default for LffPolicy {
    fn default() -> Self {
        Self {
            tau_user: 20,
            tau_item: 20,
        }
    }
}

impl LffPolicy {
    pub fn uniform(tau: u64) -> Self {
        Self {
            tau_user: tau,
            tau_item: tau,
        }
    }

    pub fn tau(&self, field: Field) -> u64 {
        match field {
            Field::User => self.tau_user,
            Field::Item => self.tau_item,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    Shared,
    Unique,
}

/// `Shared` iff `frequency ≤ τ` for the id's field.
pub fn lff_assign(policy: &LffPolicy, id: IdKey, frequency: u64) -> Assignment {
    if frequency <= policy.tau(id.field) {
        Assignment::Shared
    } else {
        Assignment::Unique
    }
}

/// One search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub policy: LffPolicy,
    pub metrics: Metrics,
    pub deduction_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTable {
    /// Sorted by accuracy, best first; ties keep run order.
    pub rows: Vec<SearchRow>,
}

impl SearchTable {
    fn from_rows(mut rows: Vec<SearchRow>) -> Self {
        rows.sort_by(|a, b| b.metrics.accuracy.total_cmp(&a.metrics.accuracy));
        Self { rows }
    }

    pub fn best(&self) -> &SearchRow {
        &self.rows[0]
    }

    /// Tab-separated table with a header; the best row is marked.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tau_user\ttau_item\tmse\taccuracy\tauc\tdeduction_ratio\tbest\n");
        for (i, r) in self.rows.iter().enumerate() {
            let auc = r.metrics.auc.map_or_else(|| "NA".to_owned(), |a| a.to_string());
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.policy.tau_user,
                r.policy.tau_item,
                r.metrics.mse,
                r.metrics.accuracy,
                auc,
                r.deduction_ratio,
                u8::from(i == 0)
            )
            .expect("string write");
        }
        out
    }
}

/// Thresholds `lo, lo + step, …` up to and including `hi`.
pub fn threshold_range(lo: u64, hi: u64, step: u64) -> Result<Vec<u64>> {
    if step == 0 || lo > hi {
        return Err(Error::invalid("threshold range", format!("lo {lo}, hi {hi}, step {step}")));
    }
    Ok((lo..=hi).step_by(step as usize).collect())
}

fn run_lff(base: &TrainerConfig, stream: &[Interaction], policy: LffPolicy) -> Result<SearchRow> {
    let config = TrainerConfig {
        mode: Mode::Lff,
        lff: policy,
        ..base.clone()
    };
    let result = run_experiment(&config, stream)?;
    Ok(SearchRow {
        policy,
        metrics: result.summary.metrics,
        deduction_ratio: result.summary.param_report.deduction_ratio,
    })
}

/// One LFF run per threshold, with the same threshold on both fields.
pub fn grid_search(base: &TrainerConfig, stream: &[Interaction], thresholds: &[u64]) -> Result<SearchTable> {
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    let rows = thresholds
        .iter()
        .map(|&t| run_lff(base, stream, LffPolicy::uniform(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SearchTable::from_rows(rows))
}

/// Independent `(τ_user, τ_item)` pairs drawn uniformly from `[lo, hi]²`.
pub fn sample_threshold_pairs(lo: u64, hi: u64, trials: usize, seed: u64) -> Result<Vec<LffPolicy>> {
    if lo > hi {
        return Err(Error::invalid("interval", format!("lo {lo} > hi {hi}")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..trials)
        .map(|_| LffPolicy {
            tau_user: rng.gen_range(lo..=hi),
            tau_item: rng.gen_range(lo..=hi),
        })
        .collect())
}

pub fn random_search(
    base: &TrainerConfig,
    stream: &[Interaction],
    lo: u64,
    hi: u64,
    trials: usize,
    seed: u64,
) -> Result<SearchTable> {
    let rows = sample_threshold_pairs(lo, hi, trials, seed)?
        .into_iter()
        .map(|p| run_lff(base, stream, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SearchTable::from_rows(rows))
}
