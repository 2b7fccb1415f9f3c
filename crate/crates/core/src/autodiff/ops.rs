use alloc::vec;
use alloc::vec::Vec;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_map, gemm, Tensor};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.derived(value, op, &[a])
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let map = broadcast_map(av.shape(), bv.shape()).ok_or_else(|| shape_err(name, av, bv))?;
        let data = av
            .data()
            .iter()
            .zip(&map)
            .map(|(&x, &j)| f(x, bv.data()[j]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.derived(value, op, &[a, b]))
    }

    /// Matrix product `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (av.dims2()?, bv.dims2()?);
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (av.data(), k as isize, 1),
            (bv.data(), n as isize, 1),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (av.dims2()?, bv.dims2()?);
        if k != k2 {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (av.data(), k as isize, 1),
            (bv.data(), 1, k as isize),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `a + b`, with `b` broadcast onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// `a - b`, with `b` broadcast onto the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product, with `b` broadcast onto the shape of `a`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("hadamard", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Natural log. Fails on any non-positive input rather than producing NaN.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| x <= 0.0 || x.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                value: bad,
            });
        }
        Ok(self.unary(a, Op::Log(a), libm::log))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input was
    /// inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let width = av.shape().last().copied().unwrap_or(1).max(1);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("softmax shape");
        self.derived(value, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.derived(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    /// Layer normalization over the last axis of `x: [n, d]` with affine
    /// `gain` and `bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (n, d) = xv.dims2()?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mu) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.derived(value, op, &[x, gain, bias]))
    }

    /// Gathers rows of `table: [v, d]` by id into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(alloc::format!(
                    "id {id} out of range for table with {v} rows"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.derived(value, op, &[table]))
    }

    /// Multi-head causal self-attention over `batch` packed sequences of
    /// length `seq`. `q`, `k`, `v` are `[batch*seq, d]` with heads laid out
    /// as contiguous column blocks; position `i` attends to positions `j <= i`
    /// with scores scaled by `1/sqrt(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dims2()?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err("causal_attention", qv, kv));
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Contract(alloc::format!(
                "attention layout: {rows} rows for batch {batch} x seq {seq}, width {d} for {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        prow[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = &mut out[(b * seq + i) * d + col..][..dh];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let op = Op::CausalAttention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        };
        Ok(self.derived(value, op, &[q, k, v]))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// averaged over the rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Contract(alloc::format!(
                "cross_entropy: {n} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract(
                "cross_entropy: mask selects no positions".into(),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            let logit_row = lv.row(r);
            let lse = log_sum_exp(logit_row);
            softmax_in_place(row);
            if mask[r] {
                let t = targets[r];
                if t >= vocab {
                    return Err(Error::Input(alloc::format!(
                        "target {t} out of range for vocabulary {vocab}"
                    )));
                }
                total += lse - logit_row[t];
            }
        }
        let value = Tensor::scalar(total / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.derived(value, op, &[logits]))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}
