//! Two-stage pipeline: pretrain the full backbone on the base task, then
//! freeze it and train only adapter parameters on the shifted task.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, GateMode};
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{self, check_lambda, LossReport};
use crate::model::{ModelConfig, TinyTransformer};
use crate::optim::{adamw_step, lr_schedule, AdamWConfig, OptimState};
use crate::tasks::{gen_finetune, gen_pretrain, SeqExample, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fine-tuning epochs.
    pub epochs: usize,
    pub batch_size: usize,
    /// Fine-tuning peak learning rate.
    pub lr: f64,
    pub warmup_steps: u64,
    pub lambda_ent: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub finetune_examples: usize,
    pub eval_examples: usize,
    pub pretrain_examples: usize,
    pub pretrain_max_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_target_acc: f64,
    pub pretrain_min_acc: f64,
    /// A gate within this distance of 0 or 1 counts as binary.
    pub binary_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr: 1e-2,
            warmup_steps: 100,
            lambda_ent: losses::DEFAULT_LAMBDA_ENT,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            finetune_examples: 1024,
            eval_examples: 256,
            pretrain_examples: 4096,
            pretrain_max_epochs: 30,
            pretrain_lr: 3e-3,
            pretrain_target_acc: 0.99,
            pretrain_min_acc: 0.90,
            binary_threshold: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                adapter_kind: AdapterKind::GateRa,
                ..ModelConfig::default()
            },
            task: TaskSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.model.max_seq_len)?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} differs from model vocabulary {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        check_lambda(self.train.lambda_ent)?;
        let t = &self.train;
        if t.batch_size == 0
            || t.finetune_examples == 0
            || t.eval_examples == 0
            || t.pretrain_examples == 0
        {
            return Err(Error::Config(
                "batch size and corpus sizes must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Independent sub-seed for one random stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub mod streams {
    pub const BASE_INIT: u64 = 1;
    pub const PRETRAIN_DATA: u64 = 2;
    pub const PRETRAIN_EVAL: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const FINETUNE_DATA: u64 = 5;
    pub const FINETUNE_EVAL: u64 = 6;
    pub const ADAPTER_INIT: u64 = 7;
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub ent_loss: Option<f64>,
    pub eval_acc: f64,
    pub mean_gate: Option<f64>,
    pub frac_binary: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Token accuracy over supervised positions.
    pub accuracy: f64,
    pub id_accuracy: Option<f64>,
    pub ood_accuracy: Option<f64>,
    pub loss: f64,
    /// Mean over every gate value at every position.
    pub mean_gate: Option<f64>,
    pub frac_binary: Option<f64>,
    /// Mean gate at positions whose next token is unchanged by the shift.
    pub id_gate: Option<f64>,
    /// Mean gate at positions whose next token is remapped.
    pub ood_gate: Option<f64>,
}

fn ratio(num: f64, den: usize) -> Option<f64> {
    (den > 0).then(|| num / den as f64)
}

/// Greedy next-token accuracy and gate statistics over `examples`.
pub fn evaluate(
    model: &TinyTransformer,
    examples: &[SeqExample],
    batch_size: usize,
    binary_threshold: f64,
) -> Result<EvalReport> {
    let vocab = model.config().vocab_size;
    let (mut hits, mut total) = (0usize, 0usize);
    let (mut id_hits, mut id_total, mut ood_hits, mut ood_total) = (0usize, 0usize, 0usize, 0usize);
    let (mut gate_sum, mut gate_n, mut binary) = (0.0, 0usize, 0usize);
    let (mut id_gate, mut id_n, mut ood_gate, mut ood_n) = (0.0, 0usize, 0.0, 0usize);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let inputs: Vec<&[usize]> = chunk.iter().map(SeqExample::input).collect();
        let (logits, trace) = model.forward(&mut tape, &inputs, GateMode::Learned)?;
        let (targets, mask) = batch_targets(chunk);
        let loss = tape.cross_entropy(logits, &targets, &mask)?;
        loss_sum += tape.value(loss).item();
        batches += 1;
        let lv = tape.value(logits);
        let mut row = 0;
        for ex in chunk {
            for ((&t, &m), &ood) in ex
                .targets()
                .iter()
                .zip(ex.target_mask())
                .zip(ex.target_ood())
            {
                if m {
                    let r = &lv.data()[row * vocab..(row + 1) * vocab];
                    let hit = argmax(r) == t;
                    hits += hit as usize;
                    total += 1;
                    if ood {
                        ood_hits += hit as usize;
                        ood_total += 1;
                    } else {
                        id_hits += hit as usize;
                        id_total += 1;
                    }
                }
                row += 1;
            }
        }
        let ood: Vec<bool> = chunk
            .iter()
            .flat_map(|e| e.target_ood().iter().copied())
            .collect();
        for site in &trace.gates {
            for (&g, &o) in tape.value(site.gate).data().iter().zip(&ood) {
                gate_sum += g;
                gate_n += 1;
                binary += (g.min(1.0 - g) < binary_threshold) as usize;
                if o {
                    ood_gate += g;
                    ood_n += 1;
                } else {
                    id_gate += g;
                    id_n += 1;
                }
            }
        }
    }
    Ok(EvalReport {
        accuracy: ratio(hits as f64, total).unwrap_or(0.0),
        id_accuracy: ratio(id_hits as f64, id_total),
        ood_accuracy: ratio(ood_hits as f64, ood_total),
        loss: loss_sum / batches.max(1) as f64,
        mean_gate: ratio(gate_sum, gate_n),
        frac_binary: ratio(binary as f64, gate_n),
        id_gate: ratio(id_gate, id_n),
        ood_gate: ratio(ood_gate, ood_n),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_targets(chunk: &[SeqExample]) -> (Vec<usize>, Vec<bool>) {
    let targets = chunk
        .iter()
        .flat_map(|e| e.targets().iter().copied())
        .collect();
    let mask = chunk
        .iter()
        .flat_map(|e| e.target_mask().iter().copied())
        .collect();
    (targets, mask)
}

/// One optimization step on a batch. Returns the loss breakdown.
pub fn train_step(
    model: &mut TinyTransformer,
    batch: &[SeqExample],
    state: &mut OptimState,
    lr: f64,
    lambda_ent: f64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let inputs: Vec<&[usize]> = batch.iter().map(SeqExample::input).collect();
    let (logits, trace) = model.forward(&mut tape, &inputs, GateMode::Learned)?;
    let (targets, mask) = batch_targets(batch);
    let task = losses::cross_entropy(&mut tape, logits, &targets, &mask)?;
    let (loss, entropy_loss, gate_count) = if trace.gates.is_empty() {
        (task, 0.0, 0)
    } else {
        let gates: Vec<_> = trace.gates.iter().map(|s| s.gate).collect();
        let (ent, n) = losses::entropy_regularizer(&mut tape, &gates)?;
        let total = losses::total_loss(&mut tape, task, ent, lambda_ent)?;
        (total, tape.value(ent).item(), n)
    };
    let report = LossReport {
        task_loss: tape.value(task).item(),
        entropy_loss,
        total: tape.value(loss).item(),
        gate_count,
    };
    let store = model.params_mut();
    store.zero_grad();
    tape.backward(loss, store)?;
    adamw_step(store, state, lr)?;
    store.zero_grad();
    Ok(report)
}

/// Runs one shuffled epoch; returns mean task loss and mean entropy loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut TinyTransformer,
    data: &[SeqExample],
    epoch: usize,
    shuffle_seed: u64,
    batch_size: usize,
    state: &mut OptimState,
    base_lr: f64,
    warmup: u64,
    lambda_ent: f64,
) -> Result<(f64, Option<f64>)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        shuffle_seed,
        epoch as u64,
    )));
    let (mut task_sum, mut ent_sum, mut steps, mut gated) = (0.0, 0.0, 0usize, false);
    for idx in order.chunks(batch_size) {
        let batch: Vec<SeqExample> = idx.iter().map(|&i| data[i].clone()).collect();
        let lr = lr_schedule(state.step + 1, warmup, base_lr);
        let r = train_step(model, &batch, state, lr, lambda_ent)?;
        task_sum += r.task_loss;
        ent_sum += r.entropy_loss;
        gated |= r.gate_count > 0;
        steps += 1;
    }
    let n = steps.max(1) as f64;
    Ok((task_sum / n, gated.then(|| ent_sum / n)))
}

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: TinyTransformer,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    pub eval_accuracy: f64,
}

/// Trains every base weight on the base task until eval token accuracy
/// reaches `pretrain_target_acc` or the epoch budget runs out.
pub fn pretrain(config: &RunConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let t = &config.train;
    let mut model = TinyTransformer::new(
        config.model.frozen(),
        derive_seed(config.seed, streams::BASE_INIT),
    )?;
    let data = gen_pretrain(
        &config.task,
        t.pretrain_examples,
        derive_seed(config.seed, streams::PRETRAIN_DATA),
    )?;
    let eval = gen_pretrain(
        &config.task,
        t.eval_examples,
        derive_seed(config.seed, streams::PRETRAIN_EVAL),
    )?;
    let mut state = OptimState::new(AdamWConfig {
        weight_decay: t.weight_decay,
        ..t.optimizer()
    });
    let shuffle = derive_seed(config.seed, streams::SHUFFLE);
    let mut log = Vec::new();
    let mut acc = 0.0;
    for epoch in 1..=t.pretrain_max_epochs {
        let (task_loss, _) = run_epoch(
            &mut model,
            &data,
            epoch,
            shuffle,
            t.batch_size,
            &mut state,
            t.pretrain_lr,
            t.warmup_steps,
            0.0,
        )?;
        acc = evaluate(&model, &eval, EVAL_BATCH, t.binary_threshold)?.accuracy;
        log.push(EpochMetrics {
            epoch,
            task_loss,
            ent_loss: None,
            eval_acc: acc,
            mean_gate: None,
            frac_binary: None,
        });
        if acc >= t.pretrain_target_acc {
            break;
        }
    }
    if acc < t.pretrain_min_acc {
        return Err(Error::Training(format!(
            "pretraining reached only {acc:.4} eval accuracy after {} epochs (need {}); the task or model is mis-sized",
            log.len(),
            t.pretrain_min_acc
        )));
    }
    let checkpoint = model.base_checkpoint();
    Ok(PretrainOutcome {
        model,
        checkpoint,
        log,
        eval_accuracy: acc,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: TinyTransformer,
    pub adapter_checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    pub eval: EvalReport,
    pub trainable_params: usize,
}

/// Loads and freezes `base`, installs the configured adapter and trains it
/// on the shifted task with the task loss plus the gate-entropy penalty.
pub fn finetune(config: &RunConfig, base: &Checkpoint) -> Result<FinetuneOutcome> {
    config.validate()?;
    let t = &config.train;
    let mut model = TinyTransformer::from_base(
        config.model.clone(),
        base,
        derive_seed(config.seed, streams::ADAPTER_INIT),
    )?;
    let digest_before = model.base_checkpoint().digest();
    let data = gen_finetune(
        &config.task,
        t.finetune_examples,
        derive_seed(config.seed, streams::FINETUNE_DATA),
    )?;
    let eval = gen_finetune(
        &config.task,
        t.eval_examples,
        derive_seed(config.seed, streams::FINETUNE_EVAL),
    )?;
    let mut state = OptimState::new(t.optimizer());
    let shuffle = derive_seed(config.seed, streams::SHUFFLE);
    let mut log = Vec::with_capacity(t.epochs);
    let mut report = evaluate(&model, &eval, EVAL_BATCH, t.binary_threshold)?;
    for epoch in 1..=t.epochs {
        let (task_loss, ent_loss) = run_epoch(
            &mut model,
            &data,
            epoch,
            shuffle,
            t.batch_size,
            &mut state,
            t.lr,
            t.warmup_steps,
            t.lambda_ent,
        )?;
        report = evaluate(&model, &eval, EVAL_BATCH, t.binary_threshold)?;
        log.push(EpochMetrics {
            epoch,
            task_loss,
            ent_loss,
            eval_acc: report.accuracy,
            mean_gate: report.mean_gate,
            frac_binary: report.frac_binary,
        });
    }
    if model.base_checkpoint().digest() != digest_before {
        return Err(Error::FrozenViolation(format!(
            "base weights digest changed while fine-tuning {}",
            config.model.adapter_kind
        )));
    }
    let trainable_params = model.params().trainable_count();
    Ok(FinetuneOutcome {
        adapter_checkpoint: model.adapter_checkpoint(),
        model,
        log,
        eval: report,
        trainable_params,
    })
}

/// Frozen model built from `base` with no adapter, evaluated on the
/// fine-tune eval split of `config`.
pub fn frozen_baseline(config: &RunConfig, base: &Checkpoint) -> Result<EvalReport> {
    let model = TinyTransformer::from_base(config.model.frozen(), base, 0)?;
    let eval = gen_finetune(
        &config.task,
        config.train.eval_examples,
        derive_seed(config.seed, streams::FINETUNE_EVAL),
    )?;
    evaluate(&model, &eval, EVAL_BATCH, config.train.binary_threshold)
}
