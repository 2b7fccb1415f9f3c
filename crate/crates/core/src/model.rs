//! Tiny pre-norm decoder-only transformer whose Q, K, V and MLP
//! up-projection (FC) can carry adapters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{uniform, AdaptedLinear, AdapterKind, GateMode};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Projections that may receive an adapter. The attention output and MLP
/// down-projection never do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    Fc,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::Fc];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "Q",
            Projection::K => "K",
            Projection::V => "V",
            Projection::Fc => "FC",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "fc" => Ok(Projection::Fc),
            other => Err(Error::Config(format!(
                "unknown injection target '{other}', expected q, k, v or fc"
            ))),
        }
    }
}

/// Parses a comma-separated target list such as `q,k,v,fc`, returning the
/// targets sorted and deduplicated.
pub fn parse_targets(s: &str) -> Result<Vec<Projection>> {
    let mut out = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Projection>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn format_targets(targets: &[Projection]) -> String {
    let names: Vec<String> = targets
        .iter()
        .map(|p| p.name().to_ascii_lowercase())
        .collect();
    names.join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub injection_targets: Vec<Projection>,
    pub adapter_kind: AdapterKind,
    pub rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_seq_len: 32,
            injection_targets: Projection::ALL.to_vec(),
            adapter_kind: AdapterKind::None,
            rank: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.adapter_kind != AdapterKind::None {
            if self.injection_targets.is_empty() {
                return Err(Error::Config(
                    "adapter requested with no injection targets".into(),
                ));
            }
            let smallest = self.d_model.min(self.d_ff);
            if self.rank == 0 || self.rank > smallest {
                return Err(Error::Config(format!(
                    "rank {} must be in 1..={smallest}",
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// The same architecture with no adapter.
    pub fn frozen(&self) -> Self {
        self.with_kind(AdapterKind::None)
    }

    pub fn with_kind(&self, adapter_kind: AdapterKind) -> Self {
        Self {
            adapter_kind,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d]), true, false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true, false),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    o: AdaptedLinear,
    ln2: Norm,
    fc: AdaptedLinear,
    down: AdaptedLinear,
}

impl Block {
    fn projection(&self, p: Projection) -> &AdaptedLinear {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::Fc => &self.fc,
        }
    }

    fn projection_mut(&mut self, p: Projection) -> &mut AdaptedLinear {
        match p {
            Projection::Q => &mut self.q,
            Projection::K => &mut self.k,
            Projection::V => &mut self.v,
            Projection::Fc => &mut self.fc,
        }
    }

    fn linears(&self) -> [&AdaptedLinear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.fc, &self.down]
    }
}

/// One gated projection evaluated during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GateSite {
    pub layer: usize,
    pub projection: Projection,
    /// Input rows `[B*T, d_in]` that fed the projection (and its gate).
    pub input: Var,
    /// Gate values `[B*T, 1]`.
    pub gate: Var,
    /// Projection output `[B*T, d_out]`.
    pub output: Var,
}

/// Handles recorded during [`TinyTransformer::forward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub gates: Vec<GateSite>,
    /// `(layer, projection, A·B)` for every adapted projection forming it.
    pub low_rank: Vec<(usize, Projection, Var)>,
}

/// One gate value from [`TinyTransformer::collect_gates`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub layer: usize,
    pub projection: Projection,
    pub position: usize,
    pub gate: f64,
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    config: ModelConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
}

const EMBED_INIT: f64 = 0.1;

impl TinyTransformer {
    /// Randomly initialized model. Base weights are trainable when
    /// `config.adapter_kind` is `None`; otherwise adapters are installed on
    /// every injection target and the base is frozen.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, v) = (config.d_model, config.vocab_size);
        let tok_emb = params.add(
            "tok_emb",
            uniform(&mut rng, &[v, d], EMBED_INIT),
            true,
            false,
        );
        let pos_emb = params.add(
            "pos_emb",
            uniform(&mut rng, &[config.max_seq_len, d], EMBED_INIT),
            true,
            false,
        );
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("blocks.{l}");
            let mut lin = |name: &str, d_in, d_out| {
                AdaptedLinear::base_layer(
                    &mut params,
                    &format!("{p}.{name}"),
                    d_in,
                    d_out,
                    true,
                    &mut rng,
                )
            };
            let (q, k, vv, o) = (
                lin("q", d, d),
                lin("k", d, d),
                lin("v", d, d),
                lin("o", d, d),
            );
            let (fc, down) = (lin("fc", d, config.d_ff), lin("down", config.d_ff, d));
            blocks.push(Block {
                ln1: Norm::new(&mut params, &format!("{p}.ln1"), d),
                q,
                k,
                v: vv,
                o,
                ln2: Norm::new(&mut params, &format!("{p}.ln2"), d),
                fc,
                down,
            });
        }
        let ln_f = Norm::new(&mut params, "ln_f", d);
        let mut model = Self {
            config: config.frozen(),
            params,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        };
        if config.adapter_kind != AdapterKind::None {
            model.install_adapters(
                config.adapter_kind,
                &config.injection_targets,
                config.rank,
                seed,
            )?;
        }
        Ok(model)
    }

    /// Freezes the base and installs `kind` adapters on `targets`, seeding
    /// each adapter from `seed` and its position.
    pub fn install_adapters(
        &mut self,
        kind: AdapterKind,
        targets: &[Projection],
        rank: usize,
        seed: u64,
    ) -> Result<()> {
        let mut config = self.config.clone();
        config.adapter_kind = kind;
        config.injection_targets = targets.to_vec();
        config.rank = rank;
        config.validate()?;
        if self.config.adapter_kind != AdapterKind::None {
            return Err(Error::Config("adapters are already installed".into()));
        }
        self.freeze_base();
        if kind != AdapterKind::None {
            for l in 0..self.blocks.len() {
                for &p in targets {
                    let name = format!("blocks.{l}.{}", p.name().to_ascii_lowercase());
                    let layer_seed = seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((l * 4 + p as usize) as u64 + 1);
                    let layer = self.blocks[l].projection_mut(p);
                    layer.install(&mut self.params, &name, kind, rank, layer_seed)?;
                }
            }
        }
        self.config = config;
        Ok(())
    }

    pub fn freeze_base(&mut self) {
        for id in self.base_param_ids() {
            self.params.set_requires_grad(id, false);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Adapted projection `p` of block `layer`.
    pub fn layer(&self, layer: usize, p: Projection) -> &AdaptedLinear {
        self.blocks[layer].projection(p)
    }

    pub fn base_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend(b.ln1.ids());
            ids.extend(b.ln2.ids());
            for lin in b.linears() {
                ids.extend(lin.base_params());
            }
        }
        ids.extend(self.ln_f.ids());
        ids
    }

    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.linears().into_iter().flat_map(|l| l.adapter_params()))
            .collect()
    }

    pub fn base_param_count(&self) -> usize {
        self.base_param_ids()
            .iter()
            .map(|&id| self.params.value(id).numel())
            .sum()
    }

    /// Sum of the closed-form adapter counts over every adapted projection.
    pub fn adapter_param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.linears())
            .map(AdaptedLinear::count_params)
            .sum()
    }

    /// Number of projections carrying a gate network.
    pub fn gated_layer_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.linears())
            .filter(|l| l.gate().is_some())
            .count()
    }

    /// Runs `sequences` (all of equal length `T <= max_seq_len`) as one
    /// packed batch, returning logits `[B*T, vocab]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        sequences: &[&[usize]],
        mode: GateMode,
    ) -> Result<(Var, ForwardTrace)> {
        let batch = sequences.len();
        let seq = sequences.first().map_or(0, |s| s.len());
        if batch == 0 || seq == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut ids = Vec::with_capacity(batch * seq);
        for s in sequences {
            if s.len() != seq {
                return Err(Error::Input(
                    "sequences in a batch must share one length".into(),
                ));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} out of range for vocabulary {}",
                    self.config.vocab_size
                )));
            }
            ids.extend_from_slice(s);
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let store = &self.params;
        let tok = tape.param(store, self.tok_emb);
        let pos = tape.param(store, self.pos_emb);
        let te = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut h = tape.add(te, pe)?;
        let mut trace = ForwardTrace::default();
        for (l, block) in self.blocks.iter().enumerate() {
            let x = block.ln1.forward(tape, store, h)?;
            let q = self.project(tape, block, l, Projection::Q, x, mode, &mut trace)?;
            let k = self.project(tape, block, l, Projection::K, x, mode, &mut trace)?;
            let v = self.project(tape, block, l, Projection::V, x, mode, &mut trace)?;
            let att = tape.causal_attention(q, k, v, batch, seq, self.config.n_heads)?;
            let o = block.o.forward(tape, store, att, mode)?.y;
            h = tape.add(h, o)?;
            let x = block.ln2.forward(tape, store, h)?;
            let up = self.project(tape, block, l, Projection::Fc, x, mode, &mut trace)?;
            let act = tape.gelu(up);
            let down = block.down.forward(tape, store, act, mode)?.y;
            h = tape.add(h, down)?;
        }
        let x = self.ln_f.forward(tape, store, h)?;
        let logits = tape.matmul_nt(x, tok)?;
        Ok((logits, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        tape: &mut Tape,
        block: &Block,
        layer: usize,
        p: Projection,
        x: Var,
        mode: GateMode,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let out = block.projection(p).forward(tape, &self.params, x, mode)?;
        if let Some(gate) = out.gate {
            trace.gates.push(GateSite {
                layer,
                projection: p,
                input: x,
                gate,
                output: out.y,
            });
        }
        if let Some(ab) = out.low_rank {
            trace.low_rank.push((layer, p, ab));
        }
        Ok(out.y)
    }

    /// Next-token logits `[T, vocab]` for a single sequence.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, &[tokens], GateMode::Learned)?;
        Ok(tape.value(logits).clone())
    }

    /// Every gate value of a single forward pass over `tokens`, ordered by
    /// layer, then projection, then position.
    pub fn collect_gates(&self, tokens: &[usize]) -> Result<Vec<GateRecord>> {
        if self.config.adapter_kind != AdapterKind::GateRa {
            return Err(Error::Config(format!(
                "gates exist only on gatera models, this one uses {}",
                self.config.adapter_kind
            )));
        }
        let mut tape = Tape::new();
        let (_, trace) = self.forward(&mut tape, &[tokens], GateMode::Learned)?;
        let mut out = Vec::with_capacity(trace.gates.len() * tokens.len());
        for site in &trace.gates {
            for (position, &gate) in tape.value(site.gate).data().iter().enumerate() {
                out.push(GateRecord {
                    layer: site.layer,
                    projection: site.projection,
                    position,
                    gate,
                });
            }
        }
        Ok(out)
    }

    /// Copies out the tensors selected by `ids`.
    fn export(&self, ids: &[ParamId]) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for &id in ids {
            let p = self.params.get(id);
            ck.insert(p.name(), p.value().clone());
        }
        ck
    }

    pub fn base_checkpoint(&self) -> Checkpoint {
        self.export(&self.base_param_ids())
    }

    pub fn adapter_checkpoint(&self) -> Checkpoint {
        self.export(&self.adapter_param_ids())
    }

    /// Overwrites parameters with the same-named tensors of `ck`. Every
    /// tensor in `ck` must name an existing parameter of equal shape.
    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, t) in &ck.tensors {
            let id = self.params.find(name).ok_or_else(|| {
                Error::Input(format!("checkpoint tensor '{name}' has no parameter"))
            })?;
            let p = self.params.get_mut(id);
            if p.value().shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load",
                    lhs: p.value().shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *p.value_mut() = t.clone();
        }
        Ok(())
    }

    /// Builds `config` on top of a base checkpoint: base weights loaded and
    /// frozen, adapters freshly initialized from `adapter_seed`.
    pub fn from_base(config: ModelConfig, base: &Checkpoint, adapter_seed: u64) -> Result<Self> {
        let mut model = Self::new(config.frozen(), 0)?;
        let base_names: Vec<String> = model
            .base_param_ids()
            .iter()
            .map(|&id| String::from(model.params.get(id).name()))
            .collect();
        for n in &base_names {
            if base.get(n).is_none() {
                return Err(Error::Input(format!("base checkpoint lacks '{n}'")));
            }
        }
        model.load(base)?;
        model.install_adapters(
            config.adapter_kind,
            &config.injection_targets,
            config.rank,
            adapter_seed,
        )?;
        Ok(model)
    }
}
