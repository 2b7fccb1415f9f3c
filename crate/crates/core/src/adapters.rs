//! Frozen linear projections with pluggable adaptation branches.
//!
//! For a frozen weight `W0: [d_out, d_in]` and low-rank factors
//! `A: [d_out, r]`, `B: [r, d_in]`, the per-token effective weight is
//!
//! | kind           | effective weight                    |
//! |----------------|-------------------------------------|
//! | `None`         | `W0`                                |
//! | `Lora`         | `W0 + s·(A·B)`                      |
//! | `Hira`         | `(A·B + 1) ⊙ W0`                    |
//! | `GateRa`       | `(g(x)·(A·B) + 1) ⊙ W0`             |
//! | `StaticGateRa` | `(G ⊙ (A·B) + 1) ⊙ W0`              |
//!
//! where `⊙` is the elementwise product, `1` the all-ones matrix and
//! `g(x) = σ(Wg·x + bg)` a per-token scalar gate. On the tape, the gated
//! kind is evaluated in residual form `W0·x + g(x)·((A·B) ⊙ W0)·x` so a
//! whole batch of tokens shares one weight matrix;
//! [`AdaptedLinear::forward_direct`] evaluates the per-token effective
//! weight instead, and the two orders are cross-checked in tests.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale on the additive LoRA branch (`alpha = 2r`).
pub const LORA_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    None,
    Lora,
    Hira,
    #[serde(rename = "gatera")]
    GateRa,
    #[serde(rename = "static-gatera")]
    StaticGateRa,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::None,
        AdapterKind::Lora,
        AdapterKind::Hira,
        AdapterKind::GateRa,
        AdapterKind::StaticGateRa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::None => "none",
            AdapterKind::Lora => "lora",
            AdapterKind::Hira => "hira",
            AdapterKind::GateRa => "gatera",
            AdapterKind::StaticGateRa => "static-gatera",
        }
    }

    pub fn has_pair(self) -> bool {
        self != AdapterKind::None
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown adapter '{s}', expected one of none, lora, hira, gatera, static-gatera"
                ))
            })
    }
}

/// How the gate value is produced during a forward pass.
///
/// Everything but `Learned` is a debugging switch for equivalence and
/// theory audits; training always runs with `Learned`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Computes `g(x)` but treats it as a constant: no gradient reaches
    /// `Wg`, `bg` or the input through the gate.
    Detached,
    /// Replaces `g(x)` by a constant.
    Forced(f64),
}

#[derive(Debug, Clone)]
pub struct FrozenLinear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone)]
pub struct LowRankPair {
    /// `[d_out, r]`
    pub a: ParamId,
    /// `[r, d_in]`
    pub b: ParamId,
    pub rank: usize,
}

/// Per-token scalar gate `σ(Wg·x + bg)` with `Wg: [1, d_in]`, `bg: [1]`.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GateNet {
    /// Gate values `[T, 1]` for token rows `x: [T, d_in]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul_nt(x, w)?;
        let z = tape.add(z, b)?;
        Ok(tape.sigmoid(z))
    }

    /// Gate values computed token by token, outside any tape.
    pub fn values(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        let w = store.value(self.weight).data();
        let b = store.value(self.bias).item();
        let (t, d) = x.dims2()?;
        if d != w.len() {
            return Err(Error::Shape {
                op: "gate",
                lhs: x.shape().to_vec(),
                rhs: vec![1, w.len()],
            });
        }
        Ok((0..t)
            .map(|i| {
                let z: f64 = x.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
                crate::autodiff::sigmoid(z)
            })
            .collect())
    }
}

/// Tape handles produced by one [`AdaptedLinear::forward`].
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub y: Var,
    /// Gate values `[T, 1]` for the gated kind.
    pub gate: Option<Var>,
    /// The `A·B` product, for kinds that form it.
    pub low_rank: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    base: FrozenLinear,
    kind: AdapterKind,
    pair: Option<LowRankPair>,
    gate: Option<GateNet>,
    static_gate: Option<ParamId>,
    lora_scale: f64,
}

impl AdaptedLinear {
    /// Assembles a layer from existing parameters, rejecting any combination
    /// of parts that does not fit `kind`.
    pub fn new(
        base: FrozenLinear,
        kind: AdapterKind,
        pair: Option<LowRankPair>,
        gate: Option<GateNet>,
        static_gate: Option<ParamId>,
    ) -> Result<Self> {
        let expect_gate = kind == AdapterKind::GateRa;
        let expect_static = kind == AdapterKind::StaticGateRa;
        if kind.has_pair() != pair.is_some()
            || expect_gate != gate.is_some()
            || expect_static != static_gate.is_some()
        {
            return Err(Error::Config(format!(
                "{kind} layer needs pair={}, gate={}, static gate={}",
                kind.has_pair(),
                expect_gate,
                expect_static
            )));
        }
        if let Some(p) = &pair {
            if p.rank == 0 || p.rank > base.d_in.min(base.d_out) {
                return Err(Error::Config(format!(
                    "rank {} must be in 1..={}",
                    p.rank,
                    base.d_in.min(base.d_out)
                )));
            }
        }
        Ok(Self {
            base,
            kind,
            pair,
            gate,
            static_gate,
            lora_scale: LORA_SCALE,
        })
    }

    /// Registers a plain projection `name.weight` (and `name.bias`) in the
    /// store, initialized uniformly in `±1/sqrt(d_in)`, and no adapter.
    pub fn base_layer(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(d_in as f64);
        let w = uniform(rng, &[d_out, d_in], bound);
        let weight = store.add(format!("{name}.weight"), w, true, true);
        let bias =
            bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true, false));
        let base = FrozenLinear {
            weight,
            bias,
            d_in,
            d_out,
        };
        Self::new(base, AdapterKind::None, None, None, None).expect("plain layer is valid")
    }

    /// Adds adapter parameters of `kind` under `name.*` and re-initializes
    /// them via [`AdaptedLinear::init_adapter`]. Any previous adapter is
    /// replaced.
    pub fn install(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        kind: AdapterKind,
        rank: usize,
        seed: u64,
    ) -> Result<()> {
        let (d_in, d_out) = (self.base.d_in, self.base.d_out);
        let pair = kind.has_pair().then(|| LowRankPair {
            a: store.add(
                format!("{name}.adapter.a"),
                Tensor::zeros(&[d_out, rank]),
                true,
                true,
            ),
            b: store.add(
                format!("{name}.adapter.b"),
                Tensor::zeros(&[rank, d_in]),
                true,
                true,
            ),
            rank,
        });
        let gate = (kind == AdapterKind::GateRa).then(|| GateNet {
            weight: store.add(
                format!("{name}.adapter.gate.weight"),
                Tensor::zeros(&[1, d_in]),
                true,
                true,
            ),
            bias: store.add(
                format!("{name}.adapter.gate.bias"),
                Tensor::zeros(&[1]),
                true,
                false,
            ),
        });
        let static_gate = (kind == AdapterKind::StaticGateRa).then(|| {
            store.add(
                format!("{name}.adapter.static_gate"),
                Tensor::zeros(&[d_out, d_in]),
                true,
                true,
            )
        });
        *self = Self::new(self.base.clone(), kind, pair, gate, static_gate)?;
        self.init_adapter(store, seed);
        Ok(())
    }

    /// `B` uniform in `±1/sqrt(d_in)`, `A = 0` so that `A·B = 0` and every
    /// kind starts out equal to the frozen projection; `Wg = 0`, `bg = 0`
    /// so every gate starts at exactly 0.5; a static gate starts at 0.5.
    pub fn init_adapter(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(p) = &self.pair {
            let bound = 1.0 / libm::sqrt(self.base.d_in as f64);
            *store.get_mut(p.b).value_mut() = uniform(&mut rng, &[p.rank, self.base.d_in], bound);
            *store.get_mut(p.a).value_mut() = Tensor::zeros(&[self.base.d_out, p.rank]);
        }
        if let Some(g) = &self.gate {
            *store.get_mut(g.weight).value_mut() = Tensor::zeros(&[1, self.base.d_in]);
            *store.get_mut(g.bias).value_mut() = Tensor::zeros(&[1]);
        }
        if let Some(s) = self.static_gate {
            *store.get_mut(s).value_mut() = Tensor::full(&[self.base.d_out, self.base.d_in], 0.5);
        }
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn base(&self) -> &FrozenLinear {
        &self.base
    }

    pub fn pair(&self) -> Option<&LowRankPair> {
        self.pair.as_ref()
    }

    pub fn gate(&self) -> Option<&GateNet> {
        self.gate.as_ref()
    }

    pub fn static_gate(&self) -> Option<ParamId> {
        self.static_gate
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    pub fn base_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        core::iter::once(self.base.weight).chain(self.base.bias)
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(p) = &self.pair {
            out.extend([p.a, p.b]);
        }
        if let Some(g) = &self.gate {
            out.extend([g.weight, g.bias]);
        }
        out.extend(self.static_gate);
        out
    }

    /// Trainable parameter count from the closed form for each kind.
    pub fn count_params(&self) -> usize {
        let (d_in, d_out) = (self.base.d_in, self.base.d_out);
        let r = self.pair.as_ref().map_or(0, |p| p.rank);
        count_params(self.kind, d_in, d_out, r)
    }

    /// Applies the layer to token rows `x: [T, d_in]`, giving `[T, d_out]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: GateMode,
    ) -> Result<LayerOutput> {
        let d_in = tape.value(x).dims2()?.1;
        if d_in != self.base.d_in {
            return Err(Error::Shape {
                op: "adapted_linear",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![self.base.d_out, self.base.d_in],
            });
        }
        let w0 = tape.param(store, self.base.weight);
        let mut gate = None;
        let mut low_rank = None;
        let y = match (&self.kind, &self.pair) {
            (AdapterKind::None, _) => tape.matmul_nt(x, w0)?,
            (AdapterKind::Lora, Some(p)) => {
                let (a, b) = (tape.param(store, p.a), tape.param(store, p.b));
                let frozen = tape.matmul_nt(x, w0)?;
                let bx = tape.matmul_nt(x, b)?;
                let abx = tape.matmul_nt(bx, a)?;
                let scaled = tape.scalar_mul(abx, self.lora_scale);
                tape.add(frozen, scaled)?
            }
            (AdapterKind::Hira, Some(p)) => {
                let ab = self.low_rank(tape, store, p)?;
                low_rank = Some(ab);
                let shifted = tape.add_scalar(ab, 1.0);
                let w = tape.hadamard(shifted, w0)?;
                tape.matmul_nt(x, w)?
            }
            (AdapterKind::StaticGateRa, Some(p)) => {
                let ab = self.low_rank(tape, store, p)?;
                low_rank = Some(ab);
                let g = tape.param(store, self.static_gate.expect("validated"));
                let gab = tape.hadamard(g, ab)?;
                let shifted = tape.add_scalar(gab, 1.0);
                let w = tape.hadamard(shifted, w0)?;
                tape.matmul_nt(x, w)?
            }
            (AdapterKind::GateRa, Some(p)) => {
                let ab = self.low_rank(tape, store, p)?;
                low_rank = Some(ab);
                let g = self.gate_values(tape, store, x, mode)?;
                gate = Some(g);
                let frozen = tape.matmul_nt(x, w0)?;
                let delta_w = tape.hadamard(ab, w0)?;
                let delta = tape.matmul_nt(x, delta_w)?;
                let gated = tape.hadamard(delta, g)?;
                tape.add(frozen, gated)?
            }
            _ => unreachable!("pair presence validated at construction"),
        };
        let y = match self.base.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)?
            }
            None => y,
        };
        Ok(LayerOutput { y, gate, low_rank })
    }

    fn low_rank(&self, tape: &mut Tape, store: &ParamStore, p: &LowRankPair) -> Result<Var> {
        let (a, b) = (tape.param(store, p.a), tape.param(store, p.b));
        tape.matmul(a, b)
    }

    fn gate_values(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: GateMode,
    ) -> Result<Var> {
        let gate = self.gate.as_ref().expect("validated");
        Ok(match mode {
            GateMode::Learned => gate.forward(tape, store, x)?,
            GateMode::Detached => {
                let g = gate.forward(tape, store, x)?;
                tape.detach(g)
            }
            GateMode::Forced(c) => {
                let t = tape.value(x).shape()[0];
                tape.constant(Tensor::full(&[t, 1], c))
            }
        })
    }

    /// Per-token evaluation `y_t = W'_t·x_t (+ b0)` with the effective
    /// weight formed explicitly for every token. Used as an independent
    /// computation order for the tape forward.
    pub fn forward_direct(&self, store: &ParamStore, x: &Tensor, mode: GateMode) -> Result<Tensor> {
        let (t, d_in) = x.dims2()?;
        let (d_out, w0) = (self.base.d_out, store.value(self.base.weight));
        if d_in != self.base.d_in {
            return Err(Error::Shape {
                op: "adapted_linear",
                lhs: x.shape().to_vec(),
                rhs: w0.shape().to_vec(),
            });
        }
        let ab = match &self.pair {
            Some(p) => Some(store.value(p.a).matmul(store.value(p.b))?),
            None => None,
        };
        let gates = match (&self.gate, mode) {
            (Some(_), GateMode::Forced(c)) => vec![c; t],
            (Some(g), _) => g.values(store, x)?,
            (None, _) => vec![1.0; t],
        };
        let bias = self.base.bias.map(|b| store.value(b).data().to_vec());
        let mut out = vec![0.0; t * d_out];
        let mut w = vec![0.0; d_out * d_in];
        for tok in 0..t {
            for (idx, wv) in w.iter_mut().enumerate() {
                let base = w0.data()[idx];
                *wv = match (self.kind, &ab) {
                    (AdapterKind::None, _) => base,
                    (AdapterKind::Lora, Some(ab)) => base + self.lora_scale * ab.data()[idx],
                    (AdapterKind::Hira, Some(ab)) => (ab.data()[idx] + 1.0) * base,
                    (AdapterKind::GateRa, Some(ab)) => (gates[tok] * ab.data()[idx] + 1.0) * base,
                    (AdapterKind::StaticGateRa, Some(ab)) => {
                        let g = store.value(self.static_gate.expect("validated")).data()[idx];
                        (g * ab.data()[idx] + 1.0) * base
                    }
                    _ => unreachable!("pair presence validated at construction"),
                };
            }
            let xt = x.row(tok);
            for o in 0..d_out {
                let mut s: f64 = w[o * d_in..(o + 1) * d_in]
                    .iter()
                    .zip(xt)
                    .map(|(a, b)| a * b)
                    .sum();
                if let Some(b) = &bias {
                    s += b[o];
                }
                out[tok * d_out + o] = s;
            }
        }
        Tensor::new(vec![t, d_out], out)
    }
}

/// Trainable parameters added by an adapter of `kind` on a `d_in → d_out`
/// projection at rank `r`.
pub fn count_params(kind: AdapterKind, d_in: usize, d_out: usize, r: usize) -> usize {
    let pair = r * (d_in + d_out);
    match kind {
        AdapterKind::None => 0,
        AdapterKind::Lora | AdapterKind::Hira => pair,
        AdapterKind::GateRa => pair + d_in + 1,
        AdapterKind::StaticGateRa => pair + d_in * d_out,
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(
        kind: AdapterKind,
        d_in: usize,
        d_out: usize,
        rank: usize,
    ) -> (ParamStore, AdaptedLinear) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = AdaptedLinear::base_layer(&mut store, "l", d_in, d_out, true, &mut rng);
        if kind != AdapterKind::None {
            l.install(&mut store, "l", kind, rank, 1).unwrap();
        }
        (store, l)
    }

    #[test]
    fn count_params_closed_forms() {
        assert_eq!(count_params(AdapterKind::Hira, 64, 64, 16), 2048);
        assert_eq!(count_params(AdapterKind::GateRa, 64, 64, 16), 2113);
        assert_eq!(count_params(AdapterKind::None, 64, 64, 16), 0);
        assert_eq!(count_params(AdapterKind::StaticGateRa, 4, 3, 2), 14 + 12);
        for kind in AdapterKind::ALL {
            let (store, l) = layer(kind, 6, 5, 2);
            assert_eq!(
                l.count_params(),
                store.trainable_count() - 6 * 5 - 5,
                "{kind}"
            );
        }
    }

    #[test]
    fn construction_rejects_missing_parts() {
        let (_, l) = layer(AdapterKind::GateRa, 4, 4, 2);
        let base = l.base().clone();
        let pair = l.pair().cloned();
        assert!(
            AdaptedLinear::new(base.clone(), AdapterKind::GateRa, pair.clone(), None, None)
                .is_err()
        );
        assert!(AdaptedLinear::new(
            base.clone(),
            AdapterKind::Hira,
            pair.clone(),
            l.gate().cloned(),
            None
        )
        .is_err());
        assert!(AdaptedLinear::new(base.clone(), AdapterKind::Lora, None, None, None).is_err());
        assert!(
            AdaptedLinear::new(base.clone(), AdapterKind::StaticGateRa, pair, None, None).is_err()
        );
        let mut store = ParamStore::new();
        let mut l2 = AdaptedLinear::base_layer(
            &mut store,
            "x",
            3,
            2,
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(l2
            .install(&mut store, "x", AdapterKind::Hira, 3, 0)
            .is_err());
    }

    #[test]
    fn adapter_names_round_trip() {
        for k in AdapterKind::ALL {
            assert_eq!(k.name().parse::<AdapterKind>().unwrap(), k);
        }
        assert!("dora".parse::<AdapterKind>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_neutral() {
        let (mut s1, l1) = layer(AdapterKind::GateRa, 5, 4, 2);
        let (mut s2, l2) = layer(AdapterKind::GateRa, 5, 4, 2);
        l1.init_adapter(&mut s1, 42);
        l2.init_adapter(&mut s2, 42);
        for ((_, p1), (_, p2)) in s1.iter().zip(s2.iter()) {
            assert!(p1.value().bit_eq(p2.value()));
        }
        let pair = l1.pair().unwrap();
        assert!(s1.value(pair.a).data().iter().all(|&v| v == 0.0));
        assert!(s1.value(pair.b).data().iter().any(|&v| v != 0.0));
    }
}
