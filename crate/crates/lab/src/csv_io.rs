//! CSV exports. Floats use Rust's shortest round-trip formatting, so
//! identical values always produce identical bytes; absent values are `nan`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use gatera_core::analysis::{BoundAudit, GateDumpRow, GateStats, HISTOGRAM_BINS};
use gatera_core::trainer::EpochMetrics;
use gatera_core::verify::SuiteReport;

use crate::error::{LabError, Result};
use crate::experiments::{RunSummary, Table};

pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "task_loss",
    "ent_loss",
    "eval_acc",
    "mean_gate",
    "frac_binary",
];
pub const GATE_DUMP_HEADER: [&str; 6] = [
    "example_id",
    "position",
    "layer",
    "projection",
    "gate",
    "ood_flag",
];
pub const AUDIT_HEADER: [&str; 6] = ["token_id", "g", "lhs", "rhs", "slack", "satisfied"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "nan" {
        return Ok(None);
    }
    parse(s).map(Some)
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| LabError::Format(format!("unparseable CSV field '{s}'")))
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn to_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn write_metrics(w: impl Write, log: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(METRICS_HEADER)?;
    for m in log {
        w.write_record([
            m.epoch.to_string(),
            m.task_loss.to_string(),
            opt(m.ent_loss),
            m.eval_acc.to_string(),
            opt(m.mean_gate),
            opt(m.frac_binary),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_metrics(r: impl Read) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_reader(r);
    check_header(r.headers()?, &METRICS_HEADER)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(EpochMetrics {
                epoch: parse(&rec[0])?,
                task_loss: parse(&rec[1])?,
                ent_loss: parse_opt(&rec[2])?,
                eval_acc: parse(&rec[3])?,
                mean_gate: parse_opt(&rec[4])?,
                frac_binary: parse_opt(&rec[5])?,
            })
        })
        .collect()
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(LabError::Format(format!(
            "CSV header {:?}, expected {expected:?}",
            found.iter().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

pub fn write_gate_dump(w: impl Write, rows: &[GateDumpRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(GATE_DUMP_HEADER)?;
    for r in rows {
        w.write_record([
            r.example_id.to_string(),
            r.position.to_string(),
            r.layer.to_string(),
            r.projection.to_string(),
            r.gate.to_string(),
            r.ood_flag.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_gate_dump(r: impl Read) -> Result<Vec<GateDumpRow>> {
    let mut r = csv::Reader::from_reader(r);
    check_header(r.headers()?, &GATE_DUMP_HEADER)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(GateDumpRow {
                example_id: parse(&rec[0])?,
                position: parse(&rec[1])?,
                layer: parse(&rec[2])?,
                projection: rec[3].parse()?,
                gate: parse(&rec[4])?,
                ood_flag: parse(&rec[5])?,
            })
        })
        .collect()
}

pub fn write_audit(w: impl Write, audit: &BoundAudit) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(AUDIT_HEADER)?;
    for r in &audit.records {
        w.write_record([
            r.token_id.to_string(),
            r.g.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.slack.to_string(),
            r.satisfied.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_histograms(w: impl Write, stats: &GateStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["layer", "projection", "bin_lo", "bin_hi", "count"])?;
    for h in &stats.histograms {
        for (i, c) in h.counts.iter().enumerate() {
            let lo = i as f64 / HISTOGRAM_BINS as f64;
            let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
            w.write_record([
                h.layer.to_string(),
                h.projection.to_string(),
                lo.to_string(),
                hi.to_string(),
                c.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_verify(w: impl Write, report: &SuiteReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["suite", "check", "value", "threshold", "passed"])?;
    for r in &report.rows {
        w.write_record([
            r.suite.to_string(),
            r.check.clone(),
            r.value.to_string(),
            r.threshold.to_string(),
            r.passed.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_table(w: impl Write, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "arm",
        "adapter",
        "rank",
        "targets",
        "lambda_ent",
        "params",
        "params_pct",
        "acc_mean",
        "acc_sd",
        "seeds",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.label.clone(),
            r.adapter.name().to_string(),
            r.rank.to_string(),
            r.targets.clone(),
            r.lambda_ent.to_string(),
            r.params.to_string(),
            r.params_pct.to_string(),
            r.acc_mean.to_string(),
            r.acc_sd.to_string(),
            r.seeds.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_runs(w: impl Write, runs: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "arm",
        "adapter",
        "seed",
        "params",
        "accuracy",
        "id_gate",
        "ood_gate",
        "frac_binary",
    ])?;
    for r in runs {
        w.write_record([
            r.label.clone(),
            r.adapter.name().to_string(),
            r.seed.to_string(),
            r.params.to_string(),
            r.accuracy.to_string(),
            opt(r.id_gate),
            opt(r.ood_gate),
            opt(r.frac_binary),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
