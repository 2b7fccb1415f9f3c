//! Multi-run experiments: adapter comparisons and ablation sweeps over a
//! shared frozen base.

use std::fmt;
use std::str::FromStr;

use gatera_core::adapters::AdapterKind;
use gatera_core::checkpoint::Checkpoint;
use gatera_core::model::{format_targets, Projection};
use gatera_core::trainer::{finetune, EpochMetrics, FinetuneOutcome, RunConfig};

use crate::error::{LabError, Result};

/// One fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub adapter: AdapterKind,
    pub seed: u64,
    pub params: usize,
    pub params_pct: f64,
    pub accuracy: f64,
    pub id_gate: Option<f64>,
    pub ood_gate: Option<f64>,
    pub frac_binary: Option<f64>,
    pub log: Vec<EpochMetrics>,
}

/// One table line: an arm aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub adapter: AdapterKind,
    pub rank: usize,
    pub targets: String,
    pub lambda_ent: f64,
    pub params: usize,
    pub params_pct: f64,
    pub acc_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub acc_sd: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub rows: Vec<TableRow>,
    pub runs: Vec<RunSummary>,
}

impl Table {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// A labelled configuration to fine-tune.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: RunConfig,
}

pub fn run_arm(arm: &Arm, base: &Checkpoint) -> Result<(RunSummary, FinetuneOutcome)> {
    let out = finetune(&arm.config, base)?;
    let base_params = out.model.base_param_count();
    let summary = RunSummary {
        label: arm.label.clone(),
        adapter: arm.config.model.adapter_kind,
        seed: arm.config.seed,
        params: out.trainable_params,
        params_pct: 100.0 * out.trainable_params as f64 / base_params as f64,
        accuracy: out.eval.accuracy,
        id_gate: out.eval.id_gate,
        ood_gate: out.eval.ood_gate,
        frac_binary: out.eval.frac_binary,
        log: out.log.clone(),
    };
    Ok((summary, out))
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fine-tunes every arm once per seed, sequentially, and aggregates.
pub fn run_arms(arms: &[Arm], seeds: &[u64], base: &Checkpoint) -> Result<Table> {
    if seeds.is_empty() {
        return Err(LabError::Usage("at least one seed is required".into()));
    }
    let mut table = Table::default();
    for arm in arms {
        let mut accs = Vec::with_capacity(seeds.len());
        let mut first: Option<RunSummary> = None;
        for &seed in seeds {
            let seeded = Arm {
                label: arm.label.clone(),
                config: RunConfig {
                    seed,
                    ..arm.config.clone()
                },
            };
            let (summary, _) = run_arm(&seeded, base)?;
            accs.push(summary.accuracy);
            first.get_or_insert_with(|| summary.clone());
            table.runs.push(summary);
        }
        let first = first.expect("seeds non-empty");
        let (acc_mean, acc_sd) = mean_sd(&accs);
        let m = &arm.config.model;
        table.rows.push(TableRow {
            label: arm.label.clone(),
            adapter: m.adapter_kind,
            rank: m.rank,
            targets: format_targets(&m.injection_targets),
            lambda_ent: arm.config.train.lambda_ent,
            params: first.params,
            params_pct: first.params_pct,
            acc_mean,
            acc_sd,
            seeds: seeds.len(),
        });
    }
    Ok(table)
}

pub fn compare_arms(config: &RunConfig, adapters: &[AdapterKind]) -> Vec<Arm> {
    adapters
        .iter()
        .map(|&kind| {
            let mut c = config.clone();
            c.model.adapter_kind = kind;
            Arm {
                label: kind.name().to_string(),
                config: c,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Targets,
    Rank,
    Gating,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Targets => "targets",
            Axis::Rank => "rank",
            Axis::Gating => "gating",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "targets" => Ok(Axis::Targets),
            "rank" => Ok(Axis::Rank),
            "gating" => Ok(Axis::Gating),
            _ => Err(LabError::Usage(format!(
                "unknown axis '{s}', expected targets, rank or gating"
            ))),
        }
    }
}

pub const TARGET_ARMS: [&str; 8] = ["fc,qkv", "fc", "qv", "qkv", "qk", "v", "q", "k"];
pub const WIDE_RANKS: [usize; 2] = [16, 32];
pub const DESK_RANKS: [usize; 3] = [2, 4, 8];

fn targets_of(label: &str) -> Vec<Projection> {
    let mut out: Vec<Projection> = label
        .split(',')
        .flat_map(|part| {
            if part == "fc" {
                vec![Projection::Fc]
            } else {
                part.chars()
                    .map(|c| c.to_string().parse().expect("q, k or v"))
                    .collect()
            }
        })
        .collect();
    out.sort();
    out
}

/// The arms of one ablation axis, all derived from `config`.
pub fn ablation_arms(config: &RunConfig, axis: Axis, desk_ranks: bool) -> Vec<Arm> {
    let arm = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = config.clone();
        f(&mut c);
        Arm { label, config: c }
    };
    match axis {
        Axis::Targets => TARGET_ARMS
            .iter()
            .map(|&t| {
                arm(t.to_string(), &|c| {
                    c.model.injection_targets = targets_of(t)
                })
            })
            .collect(),
        Axis::Rank => {
            let ranks: &[usize] = if desk_ranks { &DESK_RANKS } else { &WIDE_RANKS };
            ranks
                .iter()
                .map(|&r| arm(format!("rank={r}"), &|c| c.model.rank = r))
                .collect()
        }
        Axis::Gating => vec![
            arm("gatera".into(), &|c| {
                c.model.adapter_kind = AdapterKind::GateRa
            }),
            arm("static-gatera".into(), &|c| {
                c.model.adapter_kind = AdapterKind::StaticGateRa
            }),
            arm("gatera lambda=0".into(), &|c| {
                c.model.adapter_kind = AdapterKind::GateRa;
                c.train.lambda_ent = 0.0;
            }),
            arm("hira".into(), &|c| c.model.adapter_kind = AdapterKind::Hira),
        ],
    }
}

/// Prints `table` with aligned columns.
pub fn render(table: &Table) -> String {
    let mut s = format!(
        "{:<18} {:<14} {:>4} {:<10} {:>7} {:>9} {:>9}  {}\n",
        "arm", "adapter", "rank", "targets", "lambda", "params", "params%", "accuracy"
    );
    for r in &table.rows {
        s += &format!(
            "{:<18} {:<14} {:>4} {:<10} {:>7} {:>9} {:>9.4}  {:.4} ± {:.4} (n={})\n",
            r.label,
            r.adapter.name(),
            r.rank,
            r.targets,
            r.lambda_ent,
            r.params,
            r.params_pct,
            r.acc_mean,
            r.acc_sd,
            r.seeds
        );
    }
    s
}
