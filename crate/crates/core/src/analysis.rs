//! Gradient-bound audits for the gated update and statistics over gate
//! values.
//!
//! For one token `x` with gate `g` and output gradient `δ = ∂L/∂y`, the
//! gated branch gives `∂L/∂(AB) = g · (δ xᵀ) ⊙ W0`, so
//! `‖∂L/∂(AB)‖_F ≤ g · ‖W0‖_F · ‖δ‖ · ‖x‖`. The audits below measure both
//! sides with the gate detached, which removes the path through `Wg`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdaptedLinear, AdapterKind, GateMode};
use crate::autodiff::{finite_difference_grad, relative_error, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{Projection, TinyTransformer};
use crate::tasks::SeqExample;
use crate::tensor::Tensor;

/// A record is satisfied when `lhs <= rhs + AUDIT_TOLERANCE`.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

pub const HISTOGRAM_BINS: usize = 10;

pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.1;

/// Bias shifts swept by the suppression audit.
pub const SUPPRESSION_OFFSETS: [f64; 5] = [-20.0, -5.0, 0.0, 5.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRecord {
    pub token_id: usize,
    pub g: f64,
    /// `‖∂L/∂(AB)‖_F`
    pub lhs: f64,
    /// `g · ‖W0‖_F · ‖∂L/∂y‖ · ‖x‖`
    pub rhs: f64,
    pub slack: f64,
    pub satisfied: bool,
}

impl AuditRecord {
    pub fn new(token_id: usize, g: f64, lhs: f64, rhs: f64) -> Self {
        Self {
            token_id,
            g,
            lhs,
            rhs,
            slack: rhs - lhs,
            satisfied: lhs <= rhs + AUDIT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundAudit {
    pub records: Vec<AuditRecord>,
}

impl BoundAudit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn all_satisfied(&self) -> bool {
        self.records.iter().all(|r| r.satisfied)
    }

    pub fn violations(&self) -> impl Iterator<Item = &AuditRecord> {
        self.records.iter().filter(|r| !r.satisfied)
    }

    pub fn min_slack(&self) -> Option<f64> {
        self.records.iter().map(|r| r.slack).reduce(f64::min)
    }
}

/// Scalar loss placed on a single-token layer output.
#[derive(Debug, Clone, Copy)]
pub enum SliceLoss<'a> {
    /// `‖y - t‖²`
    SquaredError(&'a Tensor),
    /// `⟨δ, y⟩`, whose output gradient is exactly `δ`.
    Linear(&'a Tensor),
}

fn norm(xs: &[f64]) -> f64 {
    libm::sqrt(xs.iter().map(|v| v * v).sum())
}

/// Gate value, `∂L/∂(AB)` and `∂L/∂y` for a GateRA layer applied to a
/// single token row `x: [1, d_in]`.
pub fn slice_gradients(
    layer: &AdaptedLinear,
    store: &ParamStore,
    x: &Tensor,
    loss: SliceLoss<'_>,
    mode: GateMode,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if layer.kind() != AdapterKind::GateRa {
        return Err(Error::Config(format!(
            "bound audit needs a gatera layer, got {}",
            layer.kind()
        )));
    }
    if x.dims2()?.0 != 1 {
        return Err(Error::Input(
            "bound audit runs on one token at a time".into(),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = layer.forward(&mut tape, store, xv, mode)?;
    let l = match loss {
        SliceLoss::SquaredError(t) => {
            let t = tape.constant(t.clone());
            let d = tape.sub(out.y, t)?;
            let sq = tape.hadamard(d, d)?;
            tape.sum(sq)
        }
        SliceLoss::Linear(delta) => {
            let delta = tape.constant(delta.clone());
            let p = tape.hadamard(out.y, delta)?;
            tape.sum(p)
        }
    };
    let grads = tape.gradients(l)?;
    let ab = out.low_rank.expect("gatera forms A·B");
    let g = tape.value(out.gate.expect("gatera has a gate")).item();
    let zeros = |v| vec![0.0; tape.value(v).numel()];
    let grad_ab = grads.wrt(ab).map_or_else(|| zeros(ab), <[f64]>::to_vec);
    let grad_y = grads
        .wrt(out.y)
        .map_or_else(|| zeros(out.y), <[f64]>::to_vec);
    Ok((g, grad_ab, grad_y))
}

/// Audits one token of one GateRA layer.
pub fn audit_token(
    layer: &AdaptedLinear,
    store: &ParamStore,
    x: &Tensor,
    loss: SliceLoss<'_>,
    mode: GateMode,
    token_id: usize,
) -> Result<AuditRecord> {
    let (g, grad_ab, grad_y) = slice_gradients(layer, store, x, loss, mode)?;
    // ‖(δxᵀ) ⊙ W0‖_F ≤ max|W0| · ‖δ‖‖x‖ ≤ ‖W0‖_F · ‖δ‖‖x‖; the Frobenius
    // norm also dominates the operator norm.
    let w0 = store.value(layer.base().weight).frobenius_norm();
    let rhs = g * w0 * norm(&grad_y) * norm(x.data());
    Ok(AuditRecord::new(token_id, g, norm(&grad_ab), rhs))
}

/// A standalone GateRA layer with random weights, input and target.
#[derive(Debug, Clone)]
pub struct AuditInstance {
    pub layer: AdaptedLinear,
    pub store: ParamStore,
    pub x: Tensor,
    pub target: Tensor,
}

fn fill(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape matches data")
}

/// Draws a layer with `d_in, d_out ≤ 16`, rank `≤ 4`, and weights, gate
/// parameters and inputs at random scales.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Result<AuditInstance> {
    let d_in = rng.random_range(1..=16);
    let d_out = rng.random_range(1..=16);
    let r = rng.random_range(1..=4usize.min(d_in).min(d_out));
    let mut store = ParamStore::new();
    let mut layer = AdaptedLinear::base_layer(&mut store, "audit", d_in, d_out, true, rng);
    layer.install(&mut store, "audit", AdapterKind::GateRa, r, rng.random())?;
    let scale = libm::exp(rng.random_range(-2.0..2.0));
    *store.get_mut(layer.base().weight).value_mut() = fill(rng, &[d_out, d_in], scale);
    if let Some(b) = layer.base().bias {
        *store.get_mut(b).value_mut() = fill(rng, &[d_out], 1.0);
    }
    let pair = layer.pair().expect("gatera").clone();
    *store.get_mut(pair.a).value_mut() = fill(rng, &[d_out, r], 1.0);
    *store.get_mut(pair.b).value_mut() = fill(rng, &[r, d_in], 1.0);
    let gate = layer.gate().expect("gatera").clone();
    *store.get_mut(gate.weight).value_mut() = fill(rng, &[1, d_in], 1.0);
    *store.get_mut(gate.bias).value_mut() = fill(rng, &[1], 3.0);
    let x_scale = libm::exp(rng.random_range(-2.0..2.0));
    let x = fill(rng, &[1, d_in], x_scale);
    let target = fill(rng, &[1, d_out], 1.0);
    Ok(AuditInstance {
        layer,
        store,
        x,
        target,
    })
}

impl AuditInstance {
    pub fn audit(&self, token_id: usize) -> Result<AuditRecord> {
        audit_token(
            &self.layer,
            &self.store,
            &self.x,
            SliceLoss::SquaredError(&self.target),
            GateMode::Detached,
            token_id,
        )
    }

    /// Relative error between the tape's `∂L/∂(AB)` and central differences
    /// of an explicitly looped `‖x·((g·AB + 1) ⊙ W0)ᵀ + b - t‖²`.
    pub fn fd_check(&self, eps: f64) -> Result<f64> {
        let (g, grad_ab, _) = slice_gradients(
            &self.layer,
            &self.store,
            &self.x,
            SliceLoss::SquaredError(&self.target),
            GateMode::Detached,
        )?;
        let pair = self.layer.pair().expect("gatera");
        let ab = self.store.value(pair.a).matmul(self.store.value(pair.b))?;
        let w0 = self.store.value(self.layer.base().weight);
        let (d_out, d_in) = w0.dims2()?;
        let bias = self
            .layer
            .base()
            .bias
            .map(|b| self.store.value(b).data().to_vec());
        let numeric = finite_difference_grad(
            |ab: &Tensor| {
                let mut loss = 0.0;
                for o in 0..d_out {
                    let mut y = bias.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..d_in {
                        let w = (g * ab.at(o, i) + 1.0) * w0.at(o, i);
                        y += w * self.x.data()[i];
                    }
                    let d = y - self.target.data()[o];
                    loss += d * d;
                }
                Ok(loss)
            },
            &ab,
            eps,
        )?;
        Ok(relative_error(&grad_ab, numeric.data()))
    }
}

/// Audits `n` random instances drawn from `seed`.
pub fn audit_random(n: usize, seed: u64) -> Result<BoundAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for id in 0..n {
        records.push(random_instance(&mut rng)?.audit(id)?);
    }
    Ok(BoundAudit { records })
}

fn require_gatera(model: &TinyTransformer) -> Result<()> {
    if model.config().adapter_kind != AdapterKind::GateRa {
        return Err(Error::Config(format!(
            "gate analysis needs a gatera model, got {}",
            model.config().adapter_kind
        )));
    }
    Ok(())
}

fn batch_loss(
    model: &TinyTransformer,
    tape: &mut Tape,
    batch: &[SeqExample],
    mode: GateMode,
) -> Result<(crate::autodiff::Var, crate::model::ForwardTrace)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let inputs: Vec<&[usize]> = batch.iter().map(SeqExample::input).collect();
    let (logits, trace) = model.forward(tape, &inputs, mode)?;
    let targets: Vec<usize> = batch
        .iter()
        .flat_map(|e| e.targets().iter().copied())
        .collect();
    let mask: Vec<bool> = batch
        .iter()
        .flat_map(|e| e.target_mask().iter().copied())
        .collect();
    Ok((tape.cross_entropy(logits, &targets, &mask)?, trace))
}

/// Audits every token at every gated projection of `model` on `batch`.
///
/// The task loss is backpropagated once with gates detached. Each
/// `(projection, token)` pair is then re-run in isolation under the linear
/// loss `⟨δ, y⟩`, with `δ` set to that token's row of `∂L/∂y`. This gives
/// the single-token slice gradient the bound speaks about.
pub fn audit_model_bound(model: &TinyTransformer, batch: &[SeqExample]) -> Result<BoundAudit> {
    let mut records = Vec::new();
    for s in token_slices(model, batch)? {
        let id = records.len();
        records.push(audit_token(
            model.layer(s.layer, s.projection),
            model.params(),
            &s.x,
            SliceLoss::Linear(&s.delta),
            GateMode::Detached,
            id,
        )?);
    }
    Ok(BoundAudit { records })
}

/// One token's view of one gated projection: its input row and the task
/// loss gradient at its output row.
struct TokenSlice {
    layer: usize,
    projection: Projection,
    x: Tensor,
    delta: Tensor,
}

fn token_slices(model: &TinyTransformer, batch: &[SeqExample]) -> Result<Vec<TokenSlice>> {
    require_gatera(model)?;
    let mut tape = Tape::new();
    let (loss, trace) = batch_loss(model, &mut tape, batch, GateMode::Detached)?;
    let grads = tape.gradients(loss)?;
    let mut slices = Vec::new();
    for site in &trace.gates {
        let xs = tape.value(site.input);
        let (rows, d_in) = xs.dims2()?;
        let d_out = tape.value(site.output).dims2()?.1;
        let zeros = vec![0.0; rows * d_out];
        let delta = grads.wrt(site.output).unwrap_or(&zeros);
        for t in 0..rows {
            slices.push(TokenSlice {
                layer: site.layer,
                projection: site.projection,
                x: Tensor::new(vec![1, d_in], xs.row(t).to_vec())?,
                delta: Tensor::new(vec![1, d_out], delta[t * d_out..(t + 1) * d_out].to_vec())?,
            });
        }
    }
    Ok(slices)
}

/// Largest `|norm(c) - c * norm(1)|` of the AB-path gradient over every
/// token slice of `batch`, each slice holding its input and upstream
/// gradient fixed while the gate is forced to each `c`.
pub fn slice_gate_linearity(
    model: &TinyTransformer,
    batch: &[SeqExample],
    cs: &[f64],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in token_slices(model, batch)? {
        let layer = model.layer(s.layer, s.projection);
        let lin = layer_gate_linearity(layer, model.params(), &s.x, &s.delta, cs)?;
        let (_, at_one) = layer_gate_linearity(layer, model.params(), &s.x, &s.delta, &[1.0])?[0];
        for (c, n) in lin {
            worst = worst.max((n - c * at_one).abs());
        }
    }
    Ok(worst)
}

/// Mean gate and `‖∂L/∂(AB)‖_F` summed over every adapted projection, for
/// the task loss on `batch`.
pub fn ab_gradient_norm(
    model: &TinyTransformer,
    batch: &[SeqExample],
    mode: GateMode,
) -> Result<(f64, f64)> {
    require_gatera(model)?;
    let mut tape = Tape::new();
    let (loss, trace) = batch_loss(model, &mut tape, batch, mode)?;
    let grads = tape.gradients(loss)?;
    let sq: f64 = trace
        .low_rank
        .iter()
        .filter_map(|&(_, _, ab)| grads.wrt(ab))
        .flat_map(|g| g.iter().map(|v| v * v))
        .sum();
    let (mut sum, mut n) = (0.0, 0usize);
    for site in &trace.gates {
        let v = tape.value(site.gate).data();
        sum += v.iter().sum::<f64>();
        n += v.len();
    }
    Ok((sum / n.max(1) as f64, libm::sqrt(sq)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuppressionRow {
    pub offset: f64,
    pub mean_gate: f64,
    pub grad_norm: f64,
}

/// Adds `offset` to every gate bias of `model`.
pub fn shift_gate_biases(model: &mut TinyTransformer, offset: f64) {
    let layers = model.config().n_layers;
    let mut biases = Vec::new();
    for l in 0..layers {
        for p in Projection::ALL {
            if let Some(g) = model.layer(l, p).gate() {
                biases.push(g.bias);
            }
        }
    }
    for b in biases {
        for v in model.params_mut().get_mut(b).value_mut().data_mut() {
            *v += offset;
        }
    }
}

/// For each bias offset, the mean gate and AB-path gradient norm with the
/// gate detached.
pub fn audit_suppression(
    model: &TinyTransformer,
    batch: &[SeqExample],
    offsets: &[f64],
) -> Result<Vec<SuppressionRow>> {
    require_gatera(model)?;
    offsets
        .iter()
        .map(|&offset| {
            let mut m = model.clone();
            shift_gate_biases(&mut m, offset);
            let (mean_gate, grad_norm) = ab_gradient_norm(&m, batch, GateMode::Detached)?;
            Ok(SuppressionRow {
                offset,
                mean_gate,
                grad_norm,
            })
        })
        .collect()
}

/// `(c, ‖∂L/∂(AB)‖_F)` with every gate forced to `c`.
///
/// The norm is exactly linear in `c` when `∂L/∂y` does not depend on `c`.
/// That holds when every `A·B` is zero (a freshly initialized adapter), or
/// for a single layer under a linear loss (see [`layer_gate_linearity`]).
pub fn gate_linearity(
    model: &TinyTransformer,
    batch: &[SeqExample],
    cs: &[f64],
) -> Result<Vec<(f64, f64)>> {
    cs.iter()
        .map(|&c| Ok((c, ab_gradient_norm(model, batch, GateMode::Forced(c))?.1)))
        .collect()
}

/// Single-layer counterpart of [`gate_linearity`] under `⟨δ, y⟩`.
pub fn layer_gate_linearity(
    layer: &AdaptedLinear,
    store: &ParamStore,
    x: &Tensor,
    delta: &Tensor,
    cs: &[f64],
) -> Result<Vec<(f64, f64)>> {
    cs.iter()
        .map(|&c| {
            let (_, grad_ab, _) = slice_gradients(
                layer,
                store,
                x,
                SliceLoss::Linear(delta),
                GateMode::Forced(c),
            )?;
            Ok((c, norm(&grad_ab)))
        })
        .collect()
}

/// One gated activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDumpRow {
    pub example_id: usize,
    pub position: usize,
    pub layer: usize,
    pub projection: Projection,
    pub gate: f64,
    /// Whether the token predicted at `position` is remapped by the shift.
    pub ood_flag: bool,
}

/// Every gate value over `examples`, ordered by example, layer, projection
/// and position.
pub fn gate_dump(model: &TinyTransformer, examples: &[SeqExample]) -> Result<Vec<GateDumpRow>> {
    require_gatera(model)?;
    let mut rows = Vec::new();
    for (example_id, ex) in examples.iter().enumerate() {
        let ood = ex.target_ood();
        for r in model.collect_gates(ex.input())? {
            rows.push(GateDumpRow {
                example_id,
                position: r.position,
                layer: r.layer,
                projection: r.projection,
                gate: r.gate,
                ood_flag: ood[r.position],
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateHistogram {
    pub layer: usize,
    pub projection: Projection,
    /// Counts over equal-width bins of `[0, 1]`.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub count: usize,
    pub id_mean: Option<f64>,
    pub ood_mean: Option<f64>,
    /// Fraction of gates with `min(g, 1-g) < threshold`.
    pub binariness: f64,
    pub histograms: Vec<GateHistogram>,
}

impl GateStats {
    /// `ood_mean - id_mean`, when both position classes are present.
    pub fn selectivity(&self) -> Option<f64> {
        Some(self.ood_mean? - self.id_mean?)
    }
}

pub fn gate_stats(rows: &[GateDumpRow], binary_threshold: f64) -> GateStats {
    let (mut id_sum, mut id_n, mut ood_sum, mut ood_n, mut binary) =
        (0.0, 0usize, 0.0, 0usize, 0usize);
    let mut histograms: Vec<GateHistogram> = Vec::new();
    for r in rows {
        if r.ood_flag {
            ood_sum += r.gate;
            ood_n += 1;
        } else {
            id_sum += r.gate;
            id_n += 1;
        }
        binary += (r.gate.min(1.0 - r.gate) < binary_threshold) as usize;
        let pos = match histograms
            .binary_search_by_key(&(r.layer, r.projection), |h| (h.layer, h.projection))
        {
            Ok(i) => i,
            Err(i) => {
                histograms.insert(
                    i,
                    GateHistogram {
                        layer: r.layer,
                        projection: r.projection,
                        counts: vec![0; HISTOGRAM_BINS],
                    },
                );
                i
            }
        };
        let bin = ((r.gate * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histograms[pos].counts[bin] += 1;
    }
    GateStats {
        count: rows.len(),
        id_mean: (id_n > 0).then(|| id_sum / id_n as f64),
        ood_mean: (ood_n > 0).then(|| ood_sum / ood_n as f64),
        binariness: if rows.is_empty() {
            0.0
        } else {
            binary as f64 / rows.len() as f64
        },
        histograms,
    }
}
