use gatera_core::adapters::{count_params, AdaptedLinear, AdapterKind, GateMode};
use gatera_core::autodiff::{ParamStore, Tape};
use gatera_core::verify::random_layer;
use gatera_core::{Error, Tensor};
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

fn forward(layer: &AdaptedLinear, store: &ParamStore, x: &Tensor, mode: GateMode) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, store, xv, mode).unwrap().y;
    tape.value(y).clone()
}

fn frozen_view(layer: &AdaptedLinear) -> AdaptedLinear {
    AdaptedLinear::new(layer.base().clone(), AdapterKind::None, None, None, None).unwrap()
}

/// Gradients of `⟨r, y⟩` accumulated into a copy of `store`.
fn linear_loss_grads(
    layer: &AdaptedLinear,
    store: &ParamStore,
    x: &Tensor,
    r: &Tensor,
    mode: GateMode,
) -> ParamStore {
    let mut out = store.clone();
    out.zero_grad();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, &out, xv, mode).unwrap().y;
    let rv = tape.constant(r.clone());
    let p = tape.hadamard(y, rv).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss, &mut out).unwrap();
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn gate_values_at_zero_and_saturation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (layer, mut store) = random_layer(&mut rng, AdapterKind::GateRa, 5, 3, 2).unwrap();
    let gate = layer.gate().unwrap().clone();
    let x = rand_tensor(&mut rng, &[4, 5]);
    *store.get_mut(gate.weight).value_mut() = Tensor::zeros(&[1, 5]);
    *store.get_mut(gate.bias).value_mut() = Tensor::zeros(&[1]);
    assert!(gate.values(&store, &x).unwrap().iter().all(|&g| g == 0.5));
    *store.get_mut(gate.bias).value_mut() = Tensor::full(&[1], 20.0);
    assert!(gate
        .values(&store, &x)
        .unwrap()
        .iter()
        .all(|&g| (1.0 - g) < 1e-8));
    *store.get_mut(gate.bias).value_mut() = Tensor::full(&[1], -20.0);
    assert!(gate
        .values(&store, &x)
        .unwrap()
        .iter()
        .all(|&g| g < 1e-8 && g > 0.0));
}

#[test]
fn gate_forward_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (layer, store) = random_layer(&mut rng, AdapterKind::GateRa, 6, 4, 2).unwrap();
    let gate = layer.gate().unwrap();
    let x = rand_tensor(&mut rng, &[5, 6]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = gate.forward(&mut tape, &store, xv).unwrap();
    let w = store.value(gate.weight).data();
    let b = store.value(gate.bias).item();
    for t in 0..5 {
        let mut z = b;
        for i in 0..6 {
            z += w[i] * x.at(t, i);
        }
        let got = tape.value(g).data()[t];
        assert!((got - sigmoid(z)).abs() < 1e-12);
        assert!(got > 0.0 && got < 1.0);
    }
}

#[test]
fn hand_computed_two_by_two() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layer = AdaptedLinear::base_layer(&mut store, "l", 2, 2, true, &mut rng);
    layer
        .install(&mut store, "l", AdapterKind::GateRa, 1, 0)
        .unwrap();
    let pair = layer.pair().unwrap().clone();
    *store.get_mut(layer.base().weight).value_mut() =
        Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    *store.get_mut(pair.a).value_mut() = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
    *store.get_mut(pair.b).value_mut() = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
    let x = Tensor::from_rows(&[&[1.0, 1.0]]).unwrap();
    let y = forward(&layer, &store, &x, GateMode::Forced(1.0));
    // (AB + 1) ⊙ W0 = [[2, 2], [6, 4]]; times [1, 1] gives [4, 10].
    assert_eq!(y.data(), &[4.0, 10.0]);
    let direct = layer
        .forward_direct(&store, &x, GateMode::Forced(1.0))
        .unwrap();
    assert_eq!(direct.data(), &[4.0, 10.0]);
}

#[test]
fn degenerate_gates_and_zero_a() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (d_in, d_out) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let rank = rng.random_range(1..=d_in.min(d_out));
        let x = rand_tensor(&mut rng, &[3, d_in]);
        let (gated, store) =
            random_layer(&mut rng, AdapterKind::GateRa, d_in, d_out, rank).unwrap();
        let frozen = forward(&frozen_view(&gated), &store, &x, GateMode::Learned);
        assert!(forward(&gated, &store, &x, GateMode::Forced(0.0)).bit_eq(&frozen));
        let hira = AdaptedLinear::new(
            gated.base().clone(),
            AdapterKind::Hira,
            gated.pair().cloned(),
            None,
            None,
        )
        .unwrap();
        let diff = forward(&gated, &store, &x, GateMode::Forced(1.0)).max_abs_diff(&forward(
            &hira,
            &store,
            &x,
            GateMode::Learned,
        ));
        assert!(diff < 1e-12);

        for kind in [
            AdapterKind::Lora,
            AdapterKind::Hira,
            AdapterKind::GateRa,
            AdapterKind::StaticGateRa,
        ] {
            let (layer, mut store) = random_layer(&mut rng, kind, d_in, d_out, rank).unwrap();
            *store.get_mut(layer.pair().unwrap().a).value_mut() = Tensor::zeros(&[d_out, rank]);
            let frozen = forward(&frozen_view(&layer), &store, &x, GateMode::Learned);
            assert!(forward(&layer, &store, &x, GateMode::Learned).max_abs_diff(&frozen) < 1e-12);
        }
    }
}

#[test]
fn tape_form_matches_per_token_effective_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in AdapterKind::ALL {
        for _ in 0..5 {
            let (d_in, d_out) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let rank = rng.random_range(1..=d_in.min(d_out));
            let (layer, store) = random_layer(&mut rng, kind, d_in, d_out, rank).unwrap();
            let x = rand_tensor(&mut rng, &[4, d_in]);
            for mode in [GateMode::Learned, GateMode::Forced(0.3)] {
                let tape_y = forward(&layer, &store, &x, mode);
                let direct = layer.forward_direct(&store, &x, mode).unwrap();
                assert!(tape_y.max_abs_diff(&direct) < 1e-12, "{kind}");
            }
        }
    }
}

#[test]
fn forced_zero_gate_blocks_pair_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (layer, store) = random_layer(&mut rng, AdapterKind::GateRa, 6, 5, 3).unwrap();
    let x = rand_tensor(&mut rng, &[3, 6]);
    let r = rand_tensor(&mut rng, &[3, 5]);
    let grads = linear_loss_grads(&layer, &store, &x, &r, GateMode::Forced(0.0));
    let pair = layer.pair().unwrap();
    for id in [pair.a, pair.b] {
        assert!(grads
            .get(id)
            .grad()
            .map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    }
    let gate = layer.gate().unwrap();
    assert!(grads
        .get(gate.weight)
        .grad()
        .map_or(true, |g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn pair_gradient_is_linear_in_forced_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (layer, store) = random_layer(&mut rng, AdapterKind::GateRa, 7, 4, 2).unwrap();
    let x = rand_tensor(&mut rng, &[5, 7]);
    let r = rand_tensor(&mut rng, &[5, 4]);
    let a = layer.pair().unwrap().a;
    let at_one = linear_loss_grads(&layer, &store, &x, &r, GateMode::Forced(1.0));
    let at_one = at_one.get(a).grad().unwrap().to_vec();
    assert!(at_one.iter().any(|&v| v != 0.0));
    for c in [0.0, 0.25, 0.5, 0.75] {
        let g = linear_loss_grads(&layer, &store, &x, &r, GateMode::Forced(c));
        let g = g
            .get(a)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; at_one.len()]);
        for (u, v) in g.iter().zip(&at_one) {
            assert!((u - c * v).abs() < 1e-10);
        }
    }
}

#[test]
fn frozen_base_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in [
        AdapterKind::Lora,
        AdapterKind::Hira,
        AdapterKind::GateRa,
        AdapterKind::StaticGateRa,
    ] {
        let (layer, mut store) = random_layer(&mut rng, kind, 4, 4, 2).unwrap();
        let base_ids: Vec<_> = layer.base_params().collect();
        for &id in &base_ids {
            store.set_requires_grad(id, false);
        }
        let before: Vec<Tensor> = base_ids.iter().map(|&id| store.value(id).clone()).collect();
        let x = rand_tensor(&mut rng, &[2, 4]);
        let r = rand_tensor(&mut rng, &[2, 4]);
        let grads = linear_loss_grads(&layer, &store, &x, &r, GateMode::Learned);
        for (&id, b) in base_ids.iter().zip(&before) {
            assert!(grads.get(id).grad().is_none());
            assert!(grads.value(id).bit_eq(b));
        }
        for id in layer.adapter_params() {
            assert!(grads.get(id).grad().is_some(), "{kind}");
        }
    }
}

#[test]
fn parameter_counts() {
    assert_eq!(count_params(AdapterKind::Hira, 64, 64, 16), 2048);
    assert_eq!(count_params(AdapterKind::GateRa, 64, 64, 16), 2113);
    assert_eq!(count_params(AdapterKind::Lora, 64, 64, 16), 2048);
    assert_eq!(
        count_params(AdapterKind::StaticGateRa, 64, 64, 16),
        2048 + 4096
    );
    assert_eq!(count_params(AdapterKind::None, 64, 64, 16), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in AdapterKind::ALL {
        let (layer, store) = random_layer(&mut rng, kind, 6, 9, 3).unwrap();
        let walked: usize = layer
            .adapter_params()
            .iter()
            .map(|&id| store.value(id).numel())
            .sum();
        assert_eq!(walked, layer.count_params());
        assert_eq!(walked, count_params(kind, 6, 9, 3));
    }
}

#[test]
fn fresh_adapters_match_frozen_and_init_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in AdapterKind::ALL {
        let mut store = ParamStore::new();
        let mut layer = AdaptedLinear::base_layer(&mut store, "l", 8, 6, true, &mut rng);
        let x = rand_tensor(&mut rng, &[4, 8]);
        let frozen = forward(&layer, &store, &x, GateMode::Learned);
        layer.install(&mut store, "l", kind, 3, 42).unwrap();
        assert!(forward(&layer, &store, &x, GateMode::Learned).max_abs_diff(&frozen) < 1e-12);
        if let Some(g) = layer.gate() {
            assert!(g.values(&store, &x).unwrap().iter().all(|&v| v == 0.5));
        }
        if let Some(s) = layer.static_gate() {
            assert!(store.value(s).data().iter().all(|&v| v == 0.5));
        }
        let mut again = store.clone();
        layer.init_adapter(&mut again, 42);
        for id in layer.adapter_params() {
            assert!(again.value(id).bit_eq(store.value(id)));
        }
        if let Some(p) = layer.pair() {
            layer.init_adapter(&mut again, 43);
            assert!(!again.value(p.b).bit_eq(store.value(p.b)));
        }
    }
}

#[test]
fn construction_rejects_mismatched_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (hira, _) = random_layer(&mut rng, AdapterKind::Hira, 4, 4, 2).unwrap();
    let err = AdaptedLinear::new(
        hira.base().clone(),
        AdapterKind::GateRa,
        hira.pair().cloned(),
        None,
        None,
    );
    assert!(matches!(err, Err(Error::Config(_))));
    let err = AdaptedLinear::new(hira.base().clone(), AdapterKind::Lora, None, None, None);
    assert!(matches!(err, Err(Error::Config(_))));
    let mut store = ParamStore::new();
    let mut layer = AdaptedLinear::base_layer(&mut store, "l", 4, 3, true, &mut rng);
    assert!(layer
        .install(&mut store, "l", AdapterKind::Hira, 4, 0)
        .is_err());
}

#[test]
fn adapter_names_round_trip() {
    for kind in AdapterKind::ALL {
        assert_eq!(kind.name().parse::<AdapterKind>().unwrap(), kind);
    }
    let msg = "dora".parse::<AdapterKind>().unwrap_err().to_string();
    for name in ["none", "lora", "hira", "gatera", "static-gatera"] {
        assert!(msg.contains(name), "{msg}");
    }
}
