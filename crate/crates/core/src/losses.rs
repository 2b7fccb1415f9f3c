//! Task loss and the binary-entropy penalty on gate values.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Gates are clamped into `[GATE_CLAMP, 1 - GATE_CLAMP]` before the log,
/// inside the regularizer only.
pub const GATE_CLAMP: f64 = 1e-7;

pub const DEFAULT_LAMBDA_ENT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub task_loss: f64,
    pub entropy_loss: f64,
    pub total: f64,
    pub gate_count: usize,
}

/// Mean negative log-softmax probability of `targets` over the positions
/// selected by `mask`.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var> {
    tape.cross_entropy(logits, targets, mask)
}

/// `H(g) = -[g ln g + (1-g) ln(1-g)]` after clamping.
pub fn binary_entropy(g: f64) -> f64 {
    let g = g.clamp(GATE_CLAMP, 1.0 - GATE_CLAMP);
    -(g * libm::log(g) + (1.0 - g) * libm::log(1.0 - g))
}

/// Mean binary entropy over every element of every tensor in `gates`.
/// Returns the loss and the gate count `N`.
pub fn entropy_regularizer(tape: &mut Tape, gates: &[Var]) -> Result<(Var, usize)> {
    let count: usize = gates.iter().map(|&g| tape.value(g).numel()).sum();
    if count == 0 {
        return Err(Error::Contract(
            "entropy regularizer over an empty gate set".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for &g in gates {
        let c = tape.clamp(g, GATE_CLAMP, 1.0 - GATE_CLAMP);
        let log_c = tape.log(c)?;
        let neg = tape.scalar_mul(c, -1.0);
        let comp = tape.add_scalar(neg, 1.0);
        let log_comp = tape.log(comp)?;
        let a = tape.hadamard(c, log_c)?;
        let b = tape.hadamard(comp, log_comp)?;
        let s = tape.add(a, b)?;
        let s = tape.sum(s);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("non-empty");
    Ok((tape.scalar_mul(total, -1.0 / count as f64), count))
}

/// `task + lambda_ent · ent`.
pub fn total_loss(tape: &mut Tape, task: Var, ent: Var, lambda_ent: f64) -> Result<Var> {
    check_lambda(lambda_ent)?;
    let weighted = tape.scalar_mul(ent, lambda_ent);
    tape.add(task, weighted)
}

pub fn check_lambda(lambda_ent: f64) -> Result<()> {
    if lambda_ent.is_nan() || lambda_ent < 0.0 {
        return Err(Error::Config(format!(
            "lambda_ent must be >= 0, got {lambda_ent}"
        )));
    }
    Ok(())
}
