use std::path::Path;

use gatera_core::adapters::AdapterKind;
use gatera_core::model::Projection::{self, Fc, K, Q, V};
use gatera_core::trainer::{frozen_baseline, pretrain, RunConfig};
use gatera_lab::experiments::{ablation_arms, compare_arms, run_arms, Axis};

fn tiny() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    gatera_lab::config::load(&path).unwrap().config
}

#[test]
fn ablation_axes_have_the_expected_arms() {
    let cfg = RunConfig::default();
    let targets = ablation_arms(&cfg, Axis::Targets, false);
    let expected: [(&str, &[Projection]); 8] = [
        ("fc,qkv", &[Q, K, V, Fc]),
        ("fc", &[Fc]),
        ("qv", &[Q, V]),
        ("qkv", &[Q, K, V]),
        ("qk", &[Q, K]),
        ("v", &[V]),
        ("q", &[Q]),
        ("k", &[K]),
    ];
    assert_eq!(targets.len(), 8);
    for (arm, (label, t)) in targets.iter().zip(expected) {
        assert_eq!(arm.label, label);
        assert_eq!(arm.config.model.injection_targets, t);
        assert_eq!(arm.config.model.adapter_kind, AdapterKind::GateRa);
    }
    let gating = ablation_arms(&cfg, Axis::Gating, false);
    let arms: Vec<(AdapterKind, f64)> = gating
        .iter()
        .map(|a| (a.config.model.adapter_kind, a.config.train.lambda_ent))
        .collect();
    assert_eq!(
        arms,
        [
            (AdapterKind::GateRa, 0.01),
            (AdapterKind::StaticGateRa, 0.01),
            (AdapterKind::GateRa, 0.0),
            (AdapterKind::Hira, 0.01)
        ]
    );
    let ranks = |desk| -> Vec<usize> {
        ablation_arms(&cfg, Axis::Rank, desk)
            .iter()
            .map(|a| a.config.model.rank)
            .collect()
    };
    assert_eq!(ranks(false), [16, 32]);
    assert_eq!(ranks(true), [2, 4, 8]);
    for a in ablation_arms(&cfg, Axis::Rank, false) {
        a.config.validate().unwrap();
    }
    assert!("depth".parse::<Axis>().is_err());
}

#[test]
fn compare_table_on_a_tiny_model() {
    let cfg = tiny();
    let base = pretrain(&cfg).unwrap().checkpoint;
    let kinds = AdapterKind::ALL;
    let arms = compare_arms(&cfg, &kinds);
    let seeds = [0, 1];
    let table = run_arms(&arms, &seeds, &base).unwrap();
    assert_eq!(table.rows.len(), 5);
    assert_eq!(table.runs.len(), 10);

    // d_model 16, d_ff 32, rank 2, one block adapting q, k, v (16 -> 16) and fc (16 -> 32).
    let pairs = 3 * 2 * (16 + 16) + 2 * (16 + 32);
    let expected = [
        ("none", 0),
        ("lora", pairs),
        ("hira", pairs),
        ("gatera", pairs + 4 * (16 + 1)),
        ("static-gatera", pairs + 3 * 16 * 16 + 16 * 32),
    ];
    let base_params: usize = base.tensors.values().map(|t| t.numel()).sum();
    for (label, params) in expected {
        let row = table.row(label).unwrap();
        assert_eq!(row.params, params, "{label}");
        assert!((row.params_pct - 100.0 * params as f64 / base_params as f64).abs() < 1e-12);
        let accs: Vec<f64> = table
            .runs
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.accuracy)
            .collect();
        let mean = (accs[0] + accs[1]) / 2.0;
        assert!((row.acc_mean - mean).abs() < 1e-15);
        assert!((row.acc_sd - (accs[0] - accs[1]).abs() / 2f64.sqrt()).abs() < 1e-12);
    }

    for (run, seed) in table.runs.iter().filter(|r| r.label == "none").zip(seeds) {
        let frozen = frozen_baseline(
            &RunConfig {
                seed,
                ..cfg.clone()
            },
            &base,
        )
        .unwrap();
        assert_eq!(run.accuracy, frozen.accuracy);
    }
    for r in &table.runs {
        assert_eq!(r.log.len(), cfg.train.epochs);
        assert_eq!(r.id_gate.is_some(), r.adapter == AdapterKind::GateRa);
    }
    assert_eq!(run_arms(&arms, &seeds, &base).unwrap(), table);
    assert!(run_arms(&arms, &[], &base).is_err());
}
