use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gatera_core::adapters::AdapterKind;
use gatera_core::analysis::{audit_model_bound, audit_random, gate_dump, gate_stats};
use gatera_core::model::{parse_targets, Projection, TinyTransformer};
use gatera_core::tasks::gen_finetune;
use gatera_core::trainer::{derive_seed, frozen_baseline, pretrain, streams, RunConfig};
use gatera_core::verify::{run_suite, Suite, BOUND_INSTANCES};

use crate::checkpoint_io::{self, sidecar_path};
use crate::config;
use crate::csv_io;
use crate::error::{LabError, Result};
use crate::experiments::{self, Arm, Axis};

pub const SEED_ENV: &str = "GATERA_SEED";

/// Token-gated low-rank adaptation experiments on a tiny transformer.
#[derive(Parser, Debug)]
#[command(name = "gatera", version)]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Shared {
    /// TOML run configuration with [model], [task] and [train] tables
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed. Without it the config file's seed is used, then $GATERA_SEED, then 0
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory receiving checkpoints and CSV files
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the backbone on the base task and save it as OUT/base.grk
    Pretrain,
    /// Fine-tune one adapter over a frozen base on the shifted task
    Finetune(FinetuneArgs),
    /// Run verification suites; exits 1 when any check fails
    Verify(VerifyArgs),
    /// Export per-token gates, gate histograms and a bound audit of a fine-tuned GateRA checkpoint
    Gates(GatesArgs),
    /// Fine-tune several adapters over several seeds and tabulate accuracy and parameter cost
    Compare(CompareArgs),
    /// Sweep one ablation axis
    Ablate(AblateArgs),
}

#[derive(Clone, Debug)]
pub struct Targets(pub Vec<Projection>);

fn parse_adapter(s: &str) -> std::result::Result<AdapterKind, String> {
    s.parse().map_err(|e: gatera_core::Error| e.to_string())
}

fn parse_target_list(s: &str) -> std::result::Result<Targets, String> {
    parse_targets(s).map(Targets).map_err(|e| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: gatera_core::Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: LabError| e.to_string())
}

#[derive(Args, Debug, Clone)]
pub struct TuneFlags {
    /// Low-rank dimension r
    #[arg(long, value_name = "R")]
    pub rank: Option<usize>,
    /// Comma-separated injection targets among q, k, v, fc
    #[arg(long, value_name = "LIST", value_parser = parse_target_list)]
    pub targets: Option<Targets>,
    /// Weight of the gate-entropy regularizer; 0 disables it
    #[arg(long, value_name = "F")]
    pub lambda_ent: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Adapter: none, lora, hira, gatera or static-gatera
    #[arg(long, value_parser = parse_adapter)]
    pub adapter: Option<AdapterKind>,
    #[command(flatten)]
    pub tune: TuneFlags,
    /// Base checkpoint [default: OUT/base.grk]
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Suite: grad, theorem, suppression, equivalence or all
    #[arg(long, default_value = "all", value_parser = parse_suite)]
    pub suite: Suite,
}

#[derive(Args, Debug)]
pub struct GatesArgs {
    /// Fine-tuned adapter checkpoint; its .toml sidecar supplies the run configuration unless --config is given
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Base checkpoint [default: OUT/base.grk]
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
    /// Number of fine-tune eval examples to export [default: train.eval_examples]
    #[arg(long, value_name = "N")]
    pub examples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Comma-separated adapters to compare
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_adapter,
        default_value = "none,lora,hira,gatera,static-gatera"
    )]
    pub adapters: Vec<AdapterKind>,
    /// Comma-separated seeds [default: the run seed]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub tune: TuneFlags,
    /// Base checkpoint [default: OUT/base.grk]
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Axis: targets (8 projection subsets), rank or gating (4 variants)
    #[arg(long, value_parser = parse_axis)]
    pub axis: Axis,
    /// Sweep ranks 2, 4 and 8 instead of 16 and 32
    #[arg(long)]
    pub desk_ranks: bool,
    /// Adapter for the targets and rank axes [default: from config]
    #[arg(long, value_parser = parse_adapter)]
    pub adapter: Option<AdapterKind>,
    /// Comma-separated seeds [default: the run seed]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub tune: TuneFlags,
    /// Base checkpoint [default: OUT/base.grk]
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let out = &cli.shared.out;
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&cli.shared),
        Command::Finetune(a) => cmd_finetune(&cli.shared, a),
        Command::Verify(a) => cmd_verify(&cli.shared, a),
        Command::Gates(a) => cmd_gates(&cli.shared, a),
        Command::Compare(a) => cmd_compare(&cli.shared, a),
        Command::Ablate(a) => cmd_ablate(&cli.shared, a),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| LabError::Usage(format!("{SEED_ENV}='{v}' is not a seed"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then the config file (or `fallback_file` if no --config),
/// then the seed chain.
pub fn resolve_config(shared: &Shared, fallback_file: Option<&Path>) -> Result<RunConfig> {
    let file = match (&shared.config, fallback_file) {
        (Some(p), _) => Some(config::load(p)?),
        (None, Some(p)) if p.exists() => Some(config::load(p)?),
        _ => None,
    };
    let (mut cfg, file_seed) = match file {
        Some(f) => (f.config, f.sets_seed),
        None => (RunConfig::default(), false),
    };
    if let Some(s) = shared.seed {
        cfg.seed = s;
    } else if !file_seed {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    Ok(cfg)
}

fn apply_tune(cfg: &mut RunConfig, tune: &TuneFlags) {
    if let Some(r) = tune.rank {
        cfg.model.rank = r;
    }
    if let Some(t) = &tune.targets {
        cfg.model.injection_targets = t.0.clone();
    }
    if let Some(l) = tune.lambda_ent {
        cfg.train.lambda_ent = l;
    }
}

fn base_path(shared: &Shared, base: &Option<PathBuf>) -> PathBuf {
    base.clone().unwrap_or_else(|| shared.out.join("base.grk"))
}

pub fn run_tag(cfg: &RunConfig) -> String {
    format!("{}_s{}", cfg.model.adapter_kind.name(), cfg.seed)
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn cmd_pretrain(shared: &Shared) -> Result<()> {
    let cfg = resolve_config(shared, None)?;
    let outcome = pretrain(&cfg)?;
    println!(
        "pretrain seed {}: {} epoch(s), eval accuracy {:.4}, {} base parameters",
        cfg.seed,
        outcome.log.len(),
        outcome.eval_accuracy,
        outcome.model.base_param_count()
    );
    let ck = shared.out.join("base.grk");
    checkpoint_io::save(&outcome.checkpoint, &ck)?;
    config::save(&cfg, &sidecar_path(&ck))?;
    let metrics = shared.out.join("pretrain_metrics.csv");
    csv_io::to_file(&metrics, |w| csv_io::write_metrics(w, &outcome.log))?;
    wrote(&ck);
    wrote(&metrics);
    Ok(())
}

fn cmd_finetune(shared: &Shared, args: &FinetuneArgs) -> Result<()> {
    let mut cfg = resolve_config(shared, None)?;
    if let Some(k) = args.adapter {
        cfg.model.adapter_kind = k;
    }
    apply_tune(&mut cfg, &args.tune);
    cfg.validate()?;
    let base = checkpoint_io::load(&base_path(shared, &args.base))?;
    let frozen = frozen_baseline(&cfg, &base)?;
    let arm = Arm {
        label: cfg.model.adapter_kind.name().into(),
        config: cfg.clone(),
    };
    let (summary, outcome) = experiments::run_arm(&arm, &base)?;
    println!(
        "finetune {} seed {}: eval accuracy {:.4} (frozen {:.4})",
        summary.adapter, cfg.seed, summary.accuracy, frozen.accuracy
    );
    println!(
        "trainable parameters: {} ({:.4}% of {} base)",
        summary.params,
        summary.params_pct,
        outcome.model.base_param_count()
    );
    if let (Some(id), Some(ood)) = (summary.id_gate, summary.ood_gate) {
        println!(
            "mean gate: ID {id:.4}, OOD {ood:.4}, binary fraction {:.4}",
            summary.frac_binary.unwrap_or(f64::NAN)
        );
    }
    let tag = run_tag(&cfg);
    let ck = shared.out.join(format!("adapter_{tag}.grk"));
    checkpoint_io::save(&outcome.adapter_checkpoint, &ck)?;
    config::save(&cfg, &sidecar_path(&ck))?;
    let metrics = shared.out.join(format!("metrics_{tag}.csv"));
    csv_io::to_file(&metrics, |w| csv_io::write_metrics(w, &outcome.log))?;
    wrote(&ck);
    wrote(&metrics);
    Ok(())
}

fn cmd_verify(shared: &Shared, args: &VerifyArgs) -> Result<()> {
    let cfg = resolve_config(shared, None)?;
    let report = run_suite(args.suite, cfg.seed)?;
    for r in &report.rows {
        println!(
            "{} [{}] {}: {:e} (threshold {:e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.check,
            r.value,
            r.threshold
        );
    }
    let path = shared.out.join(format!("verify_{}.csv", args.suite));
    csv_io::to_file(&path, |w| csv_io::write_verify(w, &report))?;
    wrote(&path);
    if matches!(args.suite, Suite::Theorem | Suite::All) {
        let audit = audit_random(BOUND_INSTANCES, cfg.seed)?;
        let path = shared.out.join("audit_random.csv");
        csv_io::to_file(&path, |w| csv_io::write_audit(w, &audit))?;
        wrote(&path);
    }
    let failed = report.failures().count();
    if failed > 0 {
        return Err(LabError::Verification(format!(
            "{failed} of {} checks failed",
            report.rows.len()
        )));
    }
    println!("all {} checks passed", report.rows.len());
    Ok(())
}

/// Rebuilds the fine-tuned model stored as `base` plus `adapter`.
pub fn restore_model(
    cfg: &RunConfig,
    base: &gatera_core::checkpoint::Checkpoint,
    adapter: &gatera_core::checkpoint::Checkpoint,
) -> Result<TinyTransformer> {
    let mut model = TinyTransformer::from_base(cfg.model.clone(), base, 0)?;
    let expected = model.adapter_param_ids().len();
    if adapter.len() != expected {
        return Err(LabError::Usage(format!(
            "adapter checkpoint holds {} tensors but the configuration expects {expected}",
            adapter.len()
        )));
    }
    model.load(adapter)?;
    Ok(model)
}

fn cmd_gates(shared: &Shared, args: &GatesArgs) -> Result<()> {
    let cfg = resolve_config(shared, Some(&sidecar_path(&args.checkpoint)))?;
    if cfg.model.adapter_kind != AdapterKind::GateRa {
        return Err(LabError::Usage(format!(
            "gates needs a gatera checkpoint, the configuration says {}",
            cfg.model.adapter_kind
        )));
    }
    let base = checkpoint_io::load(&base_path(shared, &args.base))?;
    let adapter = checkpoint_io::load(&args.checkpoint)?;
    let model = restore_model(&cfg, &base, &adapter)?;
    let n = args.examples.unwrap_or(cfg.train.eval_examples);
    let examples = gen_finetune(&cfg.task, n, derive_seed(cfg.seed, streams::FINETUNE_EVAL))?;
    let rows = gate_dump(&model, &examples)?;
    let stats = gate_stats(&rows, cfg.train.binary_threshold);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} gate values: ID mean {}, OOD mean {}, OOD - ID {}, binary fraction {:.4}",
        stats.count,
        fmt(stats.id_mean),
        fmt(stats.ood_mean),
        fmt(stats.selectivity()),
        stats.binariness
    );
    let audit = audit_model_bound(&model, &examples[..examples.len().min(8)])?;
    println!(
        "bound audit: {} of {} token slices satisfied",
        audit.len() - audit.violations().count(),
        audit.len()
    );
    let stem = args
        .checkpoint
        .file_stem()
        .map_or_else(|| "adapter".into(), |s| s.to_string_lossy().into_owned());
    let dump = shared.out.join(format!("gates_{stem}.csv"));
    csv_io::to_file(&dump, |w| csv_io::write_gate_dump(w, &rows))?;
    let hist = shared.out.join(format!("gate_hist_{stem}.csv"));
    csv_io::to_file(&hist, |w| csv_io::write_histograms(w, &stats))?;
    let audit_path = shared.out.join(format!("audit_{stem}.csv"));
    csv_io::to_file(&audit_path, |w| csv_io::write_audit(w, &audit))?;
    for p in [&dump, &hist, &audit_path] {
        wrote(p);
    }
    Ok(())
}

fn seeds_or_default(seeds: &[u64], cfg: &RunConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

fn write_table(shared: &Shared, name: &str, table: &experiments::Table) -> Result<()> {
    print!("{}", experiments::render(table));
    let path = shared.out.join(format!("{name}.csv"));
    csv_io::to_file(&path, |w| csv_io::write_table(w, table))?;
    let runs = shared.out.join(format!("{name}_runs.csv"));
    csv_io::to_file(&runs, |w| csv_io::write_runs(w, &table.runs))?;
    wrote(&path);
    wrote(&runs);
    Ok(())
}

fn cmd_compare(shared: &Shared, args: &CompareArgs) -> Result<()> {
    let mut cfg = resolve_config(shared, None)?;
    apply_tune(&mut cfg, &args.tune);
    let base = checkpoint_io::load(&base_path(shared, &args.base))?;
    let arms = experiments::compare_arms(&cfg, &args.adapters);
    let table = experiments::run_arms(&arms, &seeds_or_default(&args.seeds, &cfg), &base)?;
    write_table(shared, "compare", &table)
}

fn cmd_ablate(shared: &Shared, args: &AblateArgs) -> Result<()> {
    let mut cfg = resolve_config(shared, None)?;
    if let Some(k) = args.adapter {
        cfg.model.adapter_kind = k;
    }
    apply_tune(&mut cfg, &args.tune);
    let base = checkpoint_io::load(&base_path(shared, &args.base))?;
    let arms = experiments::ablation_arms(&cfg, args.axis, args.desk_ranks);
    let table = experiments::run_arms(&arms, &seeds_or_default(&args.seeds, &cfg), &base)?;
    write_table(shared, &format!("ablate_{}", args.axis), &table)
}
