use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::gelu_grad;
use super::{Gradients, Op, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_map, gemm};

/// Gradient buffers indexed by node, filled lazily.
struct Acc<'a> {
    slots: &'a mut [Option<Vec<f64>>],
    tape: &'a Tape,
}

impl Acc<'_> {
    /// Buffer for `v` if it takes part in differentiation.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.tape.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.tape.nodes[v.0].value.numel();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

impl Tape {
    /// Reverse pass from a scalar `loss`, without touching any store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            {
                let (lower, _) = grads.split_at_mut(i);
                let mut acc = Acc {
                    slots: lower,
                    tape: self,
                };
                self.backward_node(i, &g, &mut acc);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass from a scalar `loss`, accumulating into every
    /// parameter bound on this tape that requires gradients. Repeated calls
    /// accumulate until [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.get_mut(id).accumulate(g);
            }
        }
        Ok(grads)
    }

    fn backward_node(&self, i: usize, g: &[f64], acc: &mut Acc<'_>) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matmul lhs");
                let n = self.value(b).dims2().expect("matmul rhs").1;
                if let Some(ga) = acc.slot(a) {
                    // ga += g · bᵀ
                    let bd = self.value(b).data();
                    gemm(m, n, k, (g, n as isize, 1), (bd, 1, n as isize), ga, true);
                }
                if let Some(gb) = acc.slot(b) {
                    // gb += aᵀ · g
                    let ad = self.value(a).data();
                    gemm(k, m, n, (ad, 1, k as isize), (g, n as isize, 1), gb, true);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matmul_nt lhs");
                let n = self.value(b).dims2().expect("matmul_nt rhs").0;
                if let Some(ga) = acc.slot(a) {
                    // ga += g · b
                    let bd = self.value(b).data();
                    gemm(m, n, k, (g, n as isize, 1), (bd, k as isize, 1), ga, true);
                }
                if let Some(gb) = acc.slot(b) {
                    // gb += gᵀ · a
                    let ad = self.value(a).data();
                    gemm(n, m, k, (g, 1, n as isize), (ad, k as isize, 1), gb, true);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = acc.slot(a) {
                    add_into(ga, g);
                }
                if acc.tape.nodes[b.0].requires_grad {
                    let map = self.bmap(a, b);
                    let gb = acc.slot(b).expect("requires grad");
                    for (&gi, &j) in g.iter().zip(&map) {
                        gb[j] += sign * gi;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let map = self.bmap(a, b);
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = acc.slot(a) {
                    for ((x, &gi), &j) in ga.iter_mut().zip(g).zip(&map) {
                        *x += gi * bd[j];
                    }
                }
                if let Some(gb) = acc.slot(b) {
                    for ((&gi, &j), &av) in g.iter().zip(&map).zip(ad) {
                        gb[j] += gi * av;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = acc.slot(a) {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += c * gi;
                    }
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = acc.slot(a) {
                    add_into(ga, g);
                }
            }
            &Op::Sigmoid(a) => self.pointwise(acc, a, g, |_, y| y * (1.0 - y), out),
            &Op::Log(a) => self.pointwise(acc, a, g, |x, _| 1.0 / x, out),
            &Op::Exp(a) => self.pointwise(acc, a, g, |_, y| y, out),
            &Op::Relu(a) => self.pointwise(acc, a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, out),
            &Op::Gelu(a) => self.pointwise(acc, a, g, |x, _| gelu_grad(x), out),
            &Op::Clamp(a, lo, hi) => self.pointwise(
                acc,
                a,
                g,
                |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
                out,
            ),
            &Op::Softmax(a) => {
                if let Some(ga) = acc.slot(a) {
                    let width = node.value.shape().last().copied().unwrap_or(1).max(1);
                    for ((gr, yr), xr) in g
                        .chunks(width)
                        .zip(out.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - dot);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = acc.slot(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = acc.slot(a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = acc.slot(a) {
                    let (r, c) = self.value(a).dims2().expect("transpose input");
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                if let Some(gg) = acc.slot(*gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = acc.slot(*bias) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = acc.slot(*x) {
                    let gain_v = self.value(*gain).data();
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dh[c] = gr[c] * gain_v[c];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = rstd[r] / d as f64;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            gxr[c] += k * (d as f64 * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = acc.slot(*table) {
                    let d = node.value.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(acc, g, (*q, *k, *v), (*batch, *seq, *heads), probs),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if let Some(gl) = acc.slot(*logits) {
                    let vocab = self.value(*logits).shape()[1];
                    let s = g[0] / *count as f64;
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (c, x) in row.iter_mut().enumerate() {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            *x += s * (probs[r * vocab + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn bmap(&self, a: Var, b: Var) -> Vec<usize> {
        broadcast_map(self.value(a).shape(), self.value(b).shape()).expect("checked in forward")
    }

    /// `ga += g * f'(x, y)` for a pointwise op with input `x` and output `y`.
    fn pointwise(
        &self,
        acc: &mut Acc<'_>,
        a: Var,
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let xd = self.value(a).data();
        if let Some(ga) = acc.slot(a) {
            for (((x, &gi), &xi), &yi) in ga.iter_mut().zip(g).zip(xd).zip(out) {
                *x += gi * deriv(xi, yi);
            }
        }
    }

    fn attention_backward(
        &self,
        acc: &mut Acc<'_>,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
    ) {
        let d = self.value(q).shape()[1];
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let rows = batch * seq;
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let prow = &probs[pbase + i * seq..][..seq];
                    let gi = &g[(b * seq + i) * d + col..][..dh];
                    for j in 0..=i {
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let dvj = &mut dv[(b * seq + j) * d + col..][..dh];
                        for (o, x) in dvj.iter_mut().zip(gi) {
                            *o += prow[j] * x;
                        }
                    }
                    let dot: f64 = (0..=i).map(|j| prow[j] * dp[j]).sum();
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        let dqi = &mut dq[(b * seq + i) * d + col..][..dh];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let dkj = &mut dk[(b * seq + j) * d + col..][..dh];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = acc.slot(var) {
                add_into(slot, &buf);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
