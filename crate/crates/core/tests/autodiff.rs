use gatera_core::autodiff::{finite_difference_grad, relative_error, ParamStore, Tape, Var};
use gatera_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// FD check of `build` with respect to every input tensor.
fn check_grads(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.gradients(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                let l = build(&mut t, &vs);
                Ok(t.value(l).item())
            },
            input,
            1e-5,
        )
        .unwrap();
        let analytic = grads.tensor(&tape, vars[i]);
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}

/// Contracts an arbitrary output against fixed random weights so every
/// output element influences the scalar loss.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.hadamard(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
    let p = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let c = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let p = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(p).data(), &[11.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let y = rand_tensor(&mut rng, &[4, 2]);
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let p = tape.matmul(xv, yv).unwrap();
    assert!(tape.value(p).max_abs_diff(&triple_loop(&x, &y)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_nt_matches_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[5, 3]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let p = tape.matmul_nt(av, bv).unwrap();
    let expect = triple_loop(&a, &b.transpose().unwrap());
    assert!(tape.value(p).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn matmul_associativity_on_8x8_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (a, b, c) = (
            rand_tensor(&mut rng, &[8, 8]),
            rand_tensor(&mut rng, &[8, 8]),
            rand_tensor(&mut rng, &[8, 8]),
        );
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-10);
    }
}

#[test]
fn hadamard_examples_and_broadcast() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2], vec![4.0, 5.0]).unwrap());
    let p = tape.hadamard(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[8.0, 15.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = rand_tensor(&mut rng, &[3, 4]);
    let mv = tape.constant(m.clone());
    let ones = tape.constant(Tensor::ones(&[3, 4]));
    let same = tape.hadamard(mv, ones).unwrap();
    assert_eq!(tape.value(same), &m);

    // scalar-per-row against matrix equals explicit expansion
    let s = rand_tensor(&mut rng, &[3, 1]);
    let sv = tape.constant(s.clone());
    let p = tape.hadamard(mv, sv).unwrap();
    let mut expanded = Vec::new();
    for i in 0..3 {
        expanded.extend(std::iter::repeat_n(s.data()[i], 4));
    }
    let e = tape.constant(Tensor::new(vec![3, 4], expanded).unwrap());
    let q = tape.hadamard(mv, e).unwrap();
    assert!(tape.value(p).bit_eq(tape.value(q)));

    let bad = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(tape.hadamard(mv, bad), Err(Error::Shape { .. })));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);
    let zeros = tape.constant(Tensor::zeros(&[1, 3]));
    let sm = tape.softmax(zeros);
    for &p in tape.value(sm).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let bad = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(
        tape.log(bad),
        Err(Error::Domain { op: "log", .. })
    ));
}

#[test]
fn sigmoid_derivative_matches_fd() {
    for z in [-2.0, 0.0, 3.0] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(z));
        let y = tape.sigmoid(x);
        let g = tape.gradients(y).unwrap();
        let s = 1.0 / (1.0 + (-z).exp());
        let analytic = g.wrt(x).unwrap()[0];
        assert!((analytic - s * (1.0 - s)).abs() < 1e-15);
        let fd = finite_difference_grad(
            |p| Ok(1.0 / (1.0 + (-p.item()).exp())),
            &Tensor::scalar(z),
            1e-5,
        )
        .unwrap();
        assert!((fd.item() - analytic).abs() < 1e-10);
    }
}

#[test]
fn backward_basic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_tensor(&mut rng, &[2, 3]);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let l = tape.sum(x);
    assert_eq!(tape.gradients(l).unwrap().wrt(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.hadamard(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.gradients(l).unwrap();
    for (gi, xi) in g.wrt(x).unwrap().iter().zip(x0.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-15);
    }
    assert!(matches!(tape.gradients(sq), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_into_store() {
    let mut store = ParamStore::new();
    let id = store.add(
        "w",
        Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(),
        true,
        false,
    );
    let frozen = store.add(
        "f",
        Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(),
        false,
        false,
    );
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let f = tape.param(&store, frozen);
    let p = tape.hadamard(w, f).unwrap();
    let l = tape.sum(p);
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[3.0, 4.0]);
    assert!(store.get(frozen).grad().is_none());
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[6.0, 8.0]);
    store.zero_grad();
    assert!(store.get(id).grad().is_none());
}

#[test]
fn fd_oracle_examples() {
    let g =
        finite_difference_grad(|t| Ok(t.data().iter().sum()), &Tensor::zeros(&[3]), 1e-5).unwrap();
    for v in g.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let at = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let g =
        finite_difference_grad(|t| Ok(t.data().iter().map(|x| x * x).sum()), &at, 1e-5).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-8);
    assert!((g.data()[1] - 4.0).abs() < 1e-8);
}

#[test]
fn every_op_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let c = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let col = rand_tensor(&mut rng, &[3, 1]);
    let pos = a.map(|x| x.abs() + 0.5);

    let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
        (
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "matmul_nt",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub_col",
            vec![a.clone(), col.clone()],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul_col",
            vec![a.clone(), col.clone()],
            Box::new(|t, v| t.hadamard(v[0], v[1]).unwrap()),
        ),
        (
            "mul_same",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| t.hadamard(v[0], v[1]).unwrap()),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(|t, v| t.scalar_mul(v[0], -1.7)),
        ),
        (
            "add_scalar",
            vec![a.clone()],
            Box::new(|t, v| t.add_scalar(v[0], 1.0)),
        ),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        (
            "log",
            vec![pos.clone()],
            Box::new(|t, v| t.log(v[0]).unwrap()),
        ),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
        ("softmax", vec![a.clone()], Box::new(|t, v| t.softmax(v[0]))),
        (
            "transpose",
            vec![a.clone()],
            Box::new(|t, v| t.transpose(v[0]).unwrap()),
        ),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        (
            "clamp",
            vec![a.clone()],
            Box::new(|t, v| t.clamp(v[0], -1.0, 1.0)),
        ),
        (
            "layer_norm",
            vec![a.clone(), row.clone(), row.map(|x| x * 0.3)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        ),
        (
            "embedding",
            vec![rand_tensor(&mut rng, &[5, 3])],
            Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap()),
        ),
    ];
    for (name, inputs, build) in cases {
        let err = check_grads(&inputs, |t, v| {
            let y = build(t, v);
            weighted_sum(t, y, 99)
        });
        assert!(err < 1e-6, "{name}: relative error {err}");
    }
}

#[test]
fn relu_matches_fd_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[4, 4]).map(|x| if x.abs() < 1e-3 { 0.5 } else { x });
    let err = check_grads(&[a], |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 3)
    });
    assert!(err < 1e-6);
}

#[test]
fn attention_and_cross_entropy_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, seq, d) = (2, 4, 6);
    let q = rand_tensor(&mut rng, &[batch * seq, d]);
    let k = rand_tensor(&mut rng, &[batch * seq, d]);
    let v = rand_tensor(&mut rng, &[batch * seq, d]);
    let err = check_grads(&[q, k, v], |t, vs| {
        let y = t
            .causal_attention(vs[0], vs[1], vs[2], batch, seq, 3)
            .unwrap();
        weighted_sum(t, y, 11)
    });
    assert!(err < 1e-6, "attention {err}");

    let logits = rand_tensor(&mut rng, &[5, 7]);
    let err = check_grads(&[logits], |t, vs| {
        t.cross_entropy(vs[0], &[1, 6, 0, 3, 3], &[true, false, true, true, false])
            .unwrap()
    });
    assert!(err < 1e-6, "cross entropy {err}");
}

#[test]
fn shared_input_accumulates_both_consumers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let err = check_grads(&[x], |t, v| {
        let s = t.sigmoid(v[0]);
        let m = t.matmul(v[0], s).unwrap();
        let e = t.exp(v[0]);
        let y = t.add(m, e).unwrap();
        weighted_sum(t, y, 5)
    });
    assert!(err < 1e-6);
}

#[test]
fn causal_attention_ignores_future_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (seq, d) = (5, 4);
    let q = rand_tensor(&mut rng, &[seq, d]);
    let k = rand_tensor(&mut rng, &[seq, d]);
    let v = rand_tensor(&mut rng, &[seq, d]);
    let run = |k: &Tensor, v: &Tensor| {
        let mut t = Tape::new();
        let (qv, kv, vv) = (
            t.constant(q.clone()),
            t.constant(k.clone()),
            t.constant(v.clone()),
        );
        let o = t.causal_attention(qv, kv, vv, 1, seq, 2).unwrap();
        t.value(o).clone()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for c in 0..d {
        k2.data_mut()[3 * d + c] += 1.0;
        v2.data_mut()[3 * d + c] -= 2.0;
    }
    let pert = run(&k2, &v2);
    assert_eq!(&base.data()[..3 * d], &pert.data()[..3 * d]);
    assert_ne!(&base.data()[3 * d..], &pert.data()[3 * d..]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = tape.softmax(x);
        for r in tape.value(s).data().chunks(4) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_graphs_match_fd(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let err = check_grads(&[x, w], |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let s = t.sigmoid(h);
            let g = t.hadamard(s, v[0]).unwrap();
            let e = t.softmax(g);
            weighted_sum(t, e, seed)
        });
        prop_assert!(err < 1e-6, "relative error {}", err);
    }
}
