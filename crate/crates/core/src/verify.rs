//! Self-contained property suites: gradient checks, bound audits, gate
//! suppression and degenerate-case equivalences. Every suite builds its own
//! fixtures from a seed and reports one row per check.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdaptedLinear, AdapterKind, GateMode};
use crate::analysis::{self, SUPPRESSION_OFFSETS};
use crate::autodiff::{finite_difference_grad, relative_error, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Projection, TinyTransformer};
use crate::tasks::{gen_pretrain, SeqExample, TaskName, TaskSpec};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// The audit loss is exactly quadratic in `A·B`, so central differences
/// carry no truncation error and a wider step only cuts roundoff.
pub const BOUND_FD_EPS: f64 = 1e-2;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;
pub const LINEARITY_TOLERANCE: f64 = 1e-8;
pub const SUPPRESSION_RATIO: f64 = 1e-6;
pub const SATURATION_TOLERANCE: f64 = 0.05;
pub const LAYER_FIXTURES_PER_KIND: usize = 25;
pub const BOUND_INSTANCES: usize = 1000;
pub const BOUND_FD_INSTANCES: usize = 10;
pub const LINEARITY_GATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Theorem,
    Suppression,
    Equivalence,
    All,
}

impl Suite {
    pub const EACH: [Suite; 4] = [
        Suite::Grad,
        Suite::Theorem,
        Suite::Suppression,
        Suite::Equivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Theorem => "theorem",
            Suite::Suppression => "suppression",
            Suite::Equivalence => "equivalence",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Suite::Grad,
            Suite::Theorem,
            Suite::Suppression,
            Suite::Equivalence,
            Suite::All,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown suite '{s}', expected grad, theorem, suppression, equivalence or all"
            ))
        })
    }
}

/// One measured quantity compared against its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: Suite,
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    fn below(&mut self, suite: Suite, check: String, value: f64, threshold: f64) {
        self.rows.push(CheckRow {
            suite,
            check,
            value,
            threshold,
            passed: value < threshold,
        });
    }

    fn at_most(&mut self, suite: Suite, check: String, value: f64, threshold: f64) {
        self.rows.push(CheckRow {
            suite,
            check,
            value,
            threshold,
            passed: value <= threshold,
        });
    }

    fn flag(&mut self, suite: Suite, check: String, ok: bool) {
        self.rows.push(CheckRow {
            suite,
            check,
            value: ok as u8 as f64,
            threshold: 1.0,
            passed: ok,
        });
    }
}

/// Runs `suite` (every suite for [`Suite::All`]) with fixtures drawn from
/// `seed`.
pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let suites: &[Suite] = if suite == Suite::All {
        &Suite::EACH
    } else {
        core::slice::from_ref(&suite)
    };
    for &s in suites {
        match s {
            Suite::Grad => grad_suite(&mut report, seed)?,
            Suite::Theorem => theorem_suite(&mut report, seed)?,
            Suite::Suppression => suppression_suite(&mut report, seed)?,
            Suite::Equivalence => equivalence_suite(&mut report, seed)?,
            Suite::All => unreachable!(),
        }
    }
    Ok(report)
}

fn fill(rng: &mut ChaCha8Rng, t: &mut Tensor, bound: f64) {
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

/// A `kind` layer whose every parameter, adapter included, is random.
pub fn random_layer(
    rng: &mut ChaCha8Rng,
    kind: AdapterKind,
    d_in: usize,
    d_out: usize,
    rank: usize,
) -> Result<(AdaptedLinear, ParamStore)> {
    let mut store = ParamStore::new();
    let mut layer = AdaptedLinear::base_layer(&mut store, "fixture", d_in, d_out, true, rng);
    layer.install(&mut store, "fixture", kind, rank, rng.random())?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let static_gate = Some(id) == layer.static_gate();
        let t = store.get_mut(id).value_mut();
        if static_gate {
            for v in t.data_mut() {
                *v = rng.random_range(0.0..1.0);
            }
        } else {
            fill(rng, t, 1.0);
        }
    }
    Ok((layer, store))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    fill(rng, &mut t, bound);
    t
}

/// `Σ (y ⊙ r)² / 2`, a smooth non-linear read-out of the layer output.
fn layer_loss(
    layer: &AdaptedLinear,
    store: &ParamStore,
    x: &Tensor,
    r: &Tensor,
    mode: GateMode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (loss, _) = layer_loss_on(&mut tape, layer, store, xv, r, mode)?;
    Ok(tape.value(loss).item())
}

fn layer_loss_on(
    tape: &mut Tape,
    layer: &AdaptedLinear,
    store: &ParamStore,
    x: crate::autodiff::Var,
    r: &Tensor,
    mode: GateMode,
) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
    let out = layer.forward(tape, store, x, mode)?;
    let r = tape.constant(r.clone());
    let p = tape.hadamard(out.y, r)?;
    let sq = tape.hadamard(p, p)?;
    let s = tape.sum(sq);
    Ok((tape.scalar_mul(s, 0.5), out.y))
}

/// Max relative FD error over the input and every parameter of the layer.
fn layer_grad_error(
    layer: &AdaptedLinear,
    store: &ParamStore,
    x: &Tensor,
    r: &Tensor,
) -> Result<f64> {
    let mode = GateMode::Learned;
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (loss, _) = layer_loss_on(&mut tape, layer, &analytic, xv, r, mode)?;
    let grads = tape.backward(loss, &mut analytic)?;
    let gx = grads.tensor(&tape, xv);
    let nx = finite_difference_grad(|x| layer_loss(layer, store, x, r, mode), x, FD_EPS)?;
    let mut worst = relative_error(gx.data(), nx.data());
    for (id, p) in analytic.iter() {
        let zero = vec![0.0; p.value().numel()];
        let g = p.grad().unwrap_or(&zero);
        let mut probe = store.clone();
        let n = finite_difference_grad(
            |v| {
                *probe.get_mut(id).value_mut() = v.clone();
                layer_loss(layer, &probe, x, r, mode)
            },
            p.value(),
            FD_EPS,
        )?;
        worst = worst.max(relative_error(g, n.data()));
    }
    Ok(worst)
}

pub fn fixture_model_config(kind: AdapterKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_seq_len: 8,
        injection_targets: Projection::ALL.to_vec(),
        adapter_kind: kind,
        rank: 2,
    }
}

fn fixture_task() -> TaskSpec {
    TaskSpec {
        name: TaskName::Copy,
        vocab_size: 8,
        prompt_len: 3,
        answer_len: 3,
        shift_fraction: 0.5,
        ..TaskSpec::default()
    }
}

fn fixture_batch(n: usize, seed: u64) -> Result<Vec<SeqExample>> {
    gen_pretrain(&fixture_task(), n, seed)
}

/// Fixture transformer with every trainable tensor randomized, so that
/// adapter paths carry non-trivial gradients.
pub fn random_model(kind: AdapterKind, seed: u64) -> Result<TinyTransformer> {
    let mut model = TinyTransformer::new(fixture_model_config(kind), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids = model.adapter_param_ids();
    for id in ids {
        fill(&mut rng, model.params_mut().get_mut(id).value_mut(), 0.5);
    }
    Ok(model)
}

fn model_loss(model: &TinyTransformer, batch: &[SeqExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let inputs: Vec<&[usize]> = batch.iter().map(SeqExample::input).collect();
    let (logits, _) = model.forward(&mut tape, &inputs, GateMode::Learned)?;
    let targets: Vec<usize> = batch
        .iter()
        .flat_map(|e| e.targets().iter().copied())
        .collect();
    let mask: Vec<bool> = batch
        .iter()
        .flat_map(|e| e.target_mask().iter().copied())
        .collect();
    let l = tape.cross_entropy(logits, &targets, &mask)?;
    Ok(tape.value(l).item())
}

/// Max relative FD error over every trainable tensor of `model`.
fn model_grad_error(model: &TinyTransformer, batch: &[SeqExample]) -> Result<f64> {
    let mut analytic = model.clone();
    analytic.params_mut().zero_grad();
    let mut tape = Tape::new();
    let inputs: Vec<&[usize]> = batch.iter().map(SeqExample::input).collect();
    let (logits, _) = analytic.forward(&mut tape, &inputs, GateMode::Learned)?;
    let targets: Vec<usize> = batch
        .iter()
        .flat_map(|e| e.targets().iter().copied())
        .collect();
    let mask: Vec<bool> = batch
        .iter()
        .flat_map(|e| e.target_mask().iter().copied())
        .collect();
    let l = tape.cross_entropy(logits, &targets, &mask)?;
    tape.backward(l, analytic.params_mut())?;
    let mut worst: f64 = 0.0;
    for (id, p) in analytic.params().iter() {
        if !p.requires_grad() {
            continue;
        }
        let zero = vec![0.0; p.value().numel()];
        let g = p.grad().unwrap_or(&zero);
        let mut probe = model.clone();
        let n = finite_difference_grad(
            |v| {
                *probe.params_mut().get_mut(id).value_mut() = v.clone();
                model_loss(&probe, batch)
            },
            p.value(),
            FD_EPS,
        )?;
        worst = worst.max(relative_error(g, n.data()));
    }
    Ok(worst)
}

const GRAD_KINDS: [AdapterKind; 4] = [
    AdapterKind::Lora,
    AdapterKind::Hira,
    AdapterKind::GateRa,
    AdapterKind::StaticGateRa,
];

fn grad_suite(report: &mut SuiteReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in GRAD_KINDS {
        let mut worst: f64 = 0.0;
        for _ in 0..LAYER_FIXTURES_PER_KIND {
            let d_in = rng.random_range(1..=8);
            let d_out = rng.random_range(1..=8);
            let rank = rng.random_range(1..=d_in.min(d_out).min(3));
            let tokens = rng.random_range(1..=4);
            let (layer, store) = random_layer(&mut rng, kind, d_in, d_out, rank)?;
            let x = random_tensor(&mut rng, &[tokens, d_in], 1.0);
            let r = random_tensor(&mut rng, &[tokens, d_out], 1.0);
            worst = worst.max(layer_grad_error(&layer, &store, &x, &r)?);
        }
        report.below(
            Suite::Grad,
            format!("{kind} layer: max relative FD error over {LAYER_FIXTURES_PER_KIND} fixtures"),
            worst,
            GRAD_TOLERANCE,
        );
    }
    for kind in [
        AdapterKind::None,
        AdapterKind::Lora,
        AdapterKind::Hira,
        AdapterKind::GateRa,
    ] {
        let model = random_model(kind, rng.random())?;
        let batch = fixture_batch(2, rng.random())?;
        let err = model_grad_error(&model, &batch)?;
        report.below(
            Suite::Grad,
            format!("transformer ({kind}): max relative FD error"),
            err,
            GRAD_TOLERANCE,
        );
    }
    Ok(())
}

fn theorem_suite(report: &mut SuiteReport, seed: u64) -> Result<()> {
    let audit = analysis::audit_random(BOUND_INSTANCES, seed)?;
    let violations = audit.violations().count();
    report.at_most(
        Suite::Theorem,
        format!("bound violations over {} random instances", audit.len()),
        violations as f64,
        0.0,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut instances = Vec::new();
    for _ in 0..BOUND_FD_INSTANCES {
        let inst = analysis::random_instance(&mut rng)?;
        worst = worst.max(inst.fd_check(BOUND_FD_EPS)?);
        instances.push(inst);
    }
    report.below(
        Suite::Theorem,
        format!("AB gradient vs FD on {BOUND_FD_INSTANCES} instances"),
        worst,
        GRAD_TOLERANCE,
    );

    let inst = &instances[0];
    let d_out = inst.target.numel();
    let delta = random_tensor(&mut rng, &[1, d_out], 1.0);
    let zero = analysis::audit_token(
        &inst.layer,
        &inst.store,
        &inst.x,
        analysis::SliceLoss::Linear(&delta),
        GateMode::Forced(0.0),
        0,
    )?;
    report.flag(
        Suite::Theorem,
        "gate forced to 0: lhs = rhs = 0".into(),
        zero.lhs == 0.0 && zero.rhs == 0.0 && zero.satisfied,
    );

    // With the gate and the output gradient held fixed, both sides are
    // linear in x.
    let mut worst_rhs: f64 = 0.0;
    let mut worst_lhs: f64 = 0.0;
    let mut all_hold = true;
    for inst in &instances {
        let g = inst
            .layer
            .gate()
            .expect("gatera")
            .values(&inst.store, &inst.x)?[0];
        let delta = random_tensor(&mut rng, &[1, inst.target.numel()], 1.0);
        let loss = analysis::SliceLoss::Linear(&delta);
        let mode = GateMode::Forced(g);
        let base = analysis::audit_token(&inst.layer, &inst.store, &inst.x, loss, mode, 0)?;
        let doubled = inst.x.map(|v| 2.0 * v);
        let scaled = analysis::audit_token(&inst.layer, &inst.store, &doubled, loss, mode, 0)?;
        worst_rhs = worst_rhs.max((scaled.rhs - 2.0 * base.rhs).abs() / base.rhs.max(1e-300));
        worst_lhs = worst_lhs.max(scaled.lhs / base.lhs.max(1e-300) - 2.0);
        all_hold &= base.satisfied && scaled.satisfied;
    }
    report.below(
        Suite::Theorem,
        "doubling |x| doubles rhs (relative deviation)".into(),
        worst_rhs,
        1e-12,
    );
    report.at_most(
        Suite::Theorem,
        "doubling |x| grows lhs by at most 2x (excess)".into(),
        worst_lhs,
        1e-12,
    );
    report.flag(
        Suite::Theorem,
        "re-audit after doubling |x| holds".into(),
        all_hold,
    );

    let model = random_model(AdapterKind::GateRa, seed)?;
    let batch = fixture_batch(4, seed)?;
    let model_audit = analysis::audit_model_bound(&model, &batch)?;
    report.at_most(
        Suite::Theorem,
        format!(
            "bound violations over {} transformer token slices",
            model_audit.len()
        ),
        model_audit.violations().count() as f64,
        0.0,
    );
    Ok(())
}

fn suppression_suite(report: &mut SuiteReport, seed: u64) -> Result<()> {
    // Freshly installed adapters have A·B = 0, so the output gradient does
    // not depend on the gate and the AB-path norm is exactly linear in it.
    let model = TinyTransformer::new(fixture_model_config(AdapterKind::GateRa), seed)?;
    let batch = fixture_batch(4, seed)?;
    let lin = analysis::gate_linearity(&model, &batch, &LINEARITY_GATES)?;
    let at_one = lin
        .iter()
        .find(|(c, _)| *c == 1.0)
        .map(|&(_, n)| n)
        .unwrap_or(0.0);
    report.flag(
        Suite::Suppression,
        "AB gradient norm at gate 1 is non-zero".into(),
        at_one > 0.0,
    );
    for &(c, n) in &lin {
        report.at_most(
            Suite::Suppression,
            format!("transformer: |norm(g={c}) - {c} * norm(g=1)|"),
            (n - c * at_one).abs(),
            LINEARITY_TOLERANCE,
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layer, store) = random_layer(&mut rng, AdapterKind::GateRa, 8, 6, 3)?;
    let x = random_tensor(&mut rng, &[1, 8], 1.0);
    let delta = random_tensor(&mut rng, &[1, 6], 1.0);
    let lin = analysis::layer_gate_linearity(&layer, &store, &x, &delta, &LINEARITY_GATES)?;
    let at_one = lin
        .iter()
        .find(|(c, _)| *c == 1.0)
        .map(|&(_, n)| n)
        .unwrap_or(0.0);
    for &(c, n) in &lin {
        report.at_most(
            Suite::Suppression,
            format!("layer, linear loss: |norm(g={c}) - {c} * norm(g=1)|"),
            (n - c * at_one).abs(),
            LINEARITY_TOLERANCE,
        );
    }

    let scrambled = random_model(AdapterKind::GateRa, seed)?;
    report.at_most(
        Suite::Suppression,
        "random adapters, per-token slices: max |norm(g=c) - c * norm(g=1)|".into(),
        analysis::slice_gate_linearity(&scrambled, &batch[..2], &LINEARITY_GATES)?,
        LINEARITY_TOLERANCE,
    );

    let sweep = analysis::audit_suppression(&model, &batch, &SUPPRESSION_OFFSETS)?;
    let norm_at = |o: f64| {
        sweep
            .iter()
            .find(|r| r.offset == o)
            .map(|r| r.grad_norm)
            .unwrap_or(f64::NAN)
    };
    let base = norm_at(0.0);
    report.below(
        Suite::Suppression,
        "bias offset -20: norm / norm at offset 0".into(),
        norm_at(-20.0) / base,
        SUPPRESSION_RATIO,
    );
    let (_, clamped) = analysis::ab_gradient_norm(&model, &batch, GateMode::Forced(1.0))?;
    report.below(
        Suite::Suppression,
        "bias offset +20: relative gap to gate forced to 1".into(),
        (norm_at(20.0) - clamped).abs() / clamped,
        SATURATION_TOLERANCE,
    );
    let mut by_gate = sweep.clone();
    by_gate.sort_by(|a, b| a.mean_gate.total_cmp(&b.mean_gate));
    let monotone = by_gate.windows(2).all(|w| w[1].grad_norm >= w[0].grad_norm);
    report.flag(
        Suite::Suppression,
        "norm nondecreasing in mean gate over offsets".into(),
        monotone,
    );
    Ok(())
}

fn equivalence_suite(report: &mut SuiteReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gate_zero_bitwise = true;
    let mut gate_one: f64 = 0.0;
    let mut a_zero: f64 = 0.0;
    let mut direct: f64 = 0.0;
    for _ in 0..20 {
        let d_in = rng.random_range(1..=8);
        let d_out = rng.random_range(1..=8);
        let rank = rng.random_range(1..=d_in.min(d_out));
        let tokens = rng.random_range(1..=4);
        let x = random_tensor(&mut rng, &[tokens, d_in], 1.0);
        let (gated, store) = random_layer(&mut rng, AdapterKind::GateRa, d_in, d_out, rank)?;
        let frozen = AdaptedLinear::new(gated.base().clone(), AdapterKind::None, None, None, None)?;
        let hira = AdaptedLinear::new(
            gated.base().clone(),
            AdapterKind::Hira,
            gated.pair().cloned(),
            None,
            None,
        )?;
        let eval = |layer: &AdaptedLinear, store: &ParamStore, mode| -> Result<Tensor> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, store, xv, mode)?.y;
            Ok(tape.value(y).clone())
        };
        let y_frozen = eval(&frozen, &store, GateMode::Learned)?;
        gate_zero_bitwise &= eval(&gated, &store, GateMode::Forced(0.0))?.bit_eq(&y_frozen);
        let y_hira = eval(&hira, &store, GateMode::Learned)?;
        gate_one = gate_one.max(eval(&gated, &store, GateMode::Forced(1.0))?.max_abs_diff(&y_hira));
        let tape_y = eval(&gated, &store, GateMode::Learned)?;
        direct = direct.max(tape_y.max_abs_diff(&gated.forward_direct(
            &store,
            &x,
            GateMode::Learned,
        )?));

        for kind in GRAD_KINDS {
            let (layer, mut store) = random_layer(&mut rng, kind, d_in, d_out, rank)?;
            let a = layer.pair().expect("adapter kinds have a pair").a;
            *store.get_mut(a).value_mut() = Tensor::zeros(&[d_out, rank]);
            let frozen =
                AdaptedLinear::new(layer.base().clone(), AdapterKind::None, None, None, None)?;
            let y = eval(&layer, &store, GateMode::Learned)?;
            a_zero = a_zero.max(y.max_abs_diff(&eval(&frozen, &store, GateMode::Learned)?));
        }
    }
    report.flag(
        Suite::Equivalence,
        "layer: gate 0 equals frozen bitwise".into(),
        gate_zero_bitwise,
    );
    report.below(
        Suite::Equivalence,
        "layer: gate 1 vs hira max |dy|".into(),
        gate_one,
        EQUIVALENCE_TOLERANCE,
    );
    report.below(
        Suite::Equivalence,
        "layer: A = 0 vs frozen max |dy| (all kinds)".into(),
        a_zero,
        EQUIVALENCE_TOLERANCE,
    );
    report.below(
        Suite::Equivalence,
        "layer: residual vs per-token effective-weight form max |dy|".into(),
        direct,
        EQUIVALENCE_TOLERANCE,
    );

    let batch = fixture_batch(3, seed)?;
    let inputs: Vec<&[usize]> = batch.iter().map(SeqExample::input).collect();
    let logits = |m: &TinyTransformer, mode| -> Result<Tensor> {
        let mut tape = Tape::new();
        let (l, _) = m.forward(&mut tape, &inputs, mode)?;
        Ok(tape.value(l).clone())
    };
    let gated = random_model(AdapterKind::GateRa, seed)?;
    let base = gated.base_checkpoint();
    let frozen = TinyTransformer::from_base(fixture_model_config(AdapterKind::None), &base, 0)?;
    let mut hira = TinyTransformer::from_base(fixture_model_config(AdapterKind::Hira), &base, 0)?;
    hira.load(
        &gated
            .adapter_checkpoint()
            .tensors
            .iter()
            .filter(|(n, _)| !n.contains(".gate."))
            .fold(crate::checkpoint::Checkpoint::new(), |mut ck, (n, t)| {
                ck.insert(n.clone(), t.clone());
                ck
            }),
    )?;
    let y_frozen = logits(&frozen, GateMode::Learned)?;
    report.flag(
        Suite::Equivalence,
        "transformer: gate 0 equals frozen bitwise".into(),
        logits(&gated, GateMode::Forced(0.0))?.bit_eq(&y_frozen),
    );
    report.below(
        Suite::Equivalence,
        "transformer: gate 1 vs hira max |dlogits|".into(),
        logits(&gated, GateMode::Forced(1.0))?.max_abs_diff(&logits(&hira, GateMode::Learned)?),
        EQUIVALENCE_TOLERANCE,
    );
    let mut worst: f64 = 0.0;
    for kind in GRAD_KINDS {
        let fresh = TinyTransformer::from_base(fixture_model_config(kind), &base, seed)?;
        worst = worst.max(logits(&fresh, GateMode::Learned)?.max_abs_diff(&y_frozen));
    }
    report.below(
        Suite::Equivalence,
        "transformer: fresh adapters (A = 0) vs frozen max |dlogits|".into(),
        worst,
        EQUIVALENCE_TOLERANCE,
    );
    Ok(())
}
