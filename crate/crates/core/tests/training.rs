use std::collections::BTreeSet;

use cmlp_tensor::{Mode, Rng, Tensor};
use crowdmlp::data::{export_synthetic, SynthConfig};
use crowdmlp::gradcheck::{check_split_counting, GradcheckOptions};
use crowdmlp::regressor::RegressorConfig;
use crowdmlp::tokenizer::RawDropTiming;
use crowdmlp::train::{ablation_configs, train, DataSource, TrainConfig};
use crowdmlp::{CrowdMlp, ModelConfig};

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        max_steps: Some(3),
        ..TrainConfig::tiny()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = TrainConfig {
            log_path: Some(dir.path().join(name)),
            ..tiny(5)
        };
        let out = train(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        (out, text)
    };
    let (a, log_a) = run("a.jsonl");
    let (b, log_b) = run("b.jsonl");
    assert_eq!(log_a, log_b);
    assert_eq!(a.best, b.best);
    assert_eq!(a.steps, 3);
    for ((_, x), (_, y)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(x, y);
    }
    let c = train(&tiny(6)).unwrap();
    assert_ne!(a.first_step, c.first_step);
}

#[test]
fn log_lines_have_exactly_the_expected_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let cfg = TrainConfig {
        log_path: Some(path.clone()),
        ..tiny(0)
    };
    let out = train(&cfg).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let expected: BTreeSet<&str> = ["epoch", "step", "L_C", "L_SS", "L_I", "L", "lr"].into();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), out.log.len());
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, expected);
        let total = v["L"].as_f64().unwrap();
        let parts = v["L_C"].as_f64().unwrap()
            + 0.5 * (v["L_SS"].as_f64().unwrap() + v["L_I"].as_f64().unwrap());
        assert!((total - parts).abs() < 1e-9 * (1.0 + total));
    }
}

#[test]
fn checkpoint_is_written_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let cfg = TrainConfig {
        checkpoint_path: Some(path.clone()),
        ..tiny(1)
    };
    let out = train(&cfg).unwrap();
    let loaded = crowdmlp::checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.best);
    assert!(loaded.adam.is_some());
}

#[test]
fn trains_from_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        width: 160,
        height: 140,
        seed: 8,
        ..SynthConfig::default()
    };
    let manifest = export_synthetic(dir.path(), &cfg, 4).unwrap();
    let out = train(&TrainConfig {
        data: DataSource::Manifest { path: manifest },
        val_fraction: 0.25,
        ..tiny(0)
    })
    .unwrap();
    assert!(out.steps > 0);
    assert_eq!(out.val_indices.len(), 1);
    assert!(out.best_val.is_some_and(|(mae, _)| mae.is_finite()));
}

#[test]
fn every_ablation_trains_one_step() {
    for (name, model) in ablation_configs(&ModelConfig::tiny()) {
        let out = train(&TrainConfig {
            model,
            epochs: 1,
            max_steps: Some(1),
            val_fraction: 0.0,
            recalibrate_bn: false,
            ..TrainConfig::tiny()
        })
        .unwrap();
        assert_eq!(out.steps, 1, "{name}");
        assert!(out.first_step.l_c.is_finite(), "{name}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::tiny() },
        TrainConfig { val_fraction: 1.0, ..TrainConfig::tiny() },
        TrainConfig { grad_clip: Some(0.0), ..TrainConfig::tiny() },
        TrainConfig { lr: -1.0, ..TrainConfig::tiny() },
    ] {
        assert!(train(&cfg).is_err());
    }
}

#[test]
fn quick_gradient_check_on_the_full_objective() {
    let opts = GradcheckOptions {
        coords_per_tensor: 2,
        ..GradcheckOptions::default()
    };
    let report = check_split_counting(&ModelConfig::tiny(), 1, &opts).unwrap();
    assert!(report.nonzero > 0);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn train_mode_counts(model: &CrowdMlp, x: &Tensor, seed: u64) -> Vec<f64> {
    let mut s = model.session(Mode::Train, Rng::new(seed));
    let v = s.tape.constant(x.clone());
    let out = model.forward(&mut s, v).unwrap();
    s.value(out.counts).data().to_vec()
}

#[test]
fn per_epoch_raw_drop_is_fixed_within_an_epoch() {
    let mut rng = Rng::new(2);
    let x = Tensor::from_fn(&[2, 3, 128, 128], |_| rng.uniform());
    // Regressor dropout off, so the raw-token mask is the only randomness.
    let base = ModelConfig::tiny();
    let base = ModelConfig {
        regressor: RegressorConfig {
            dropout: 0.0,
            ..base.regressor.clone()
        },
        raw_drop_rate: 0.5,
        ..base
    };
    let cfg = ModelConfig {
        raw_drop_timing: RawDropTiming::PerEpoch,
        ..base.clone()
    };
    let mut model = CrowdMlp::new(&cfg).unwrap();
    let mut epoch_rng = Rng::new(0);
    model.begin_epoch(&mut epoch_rng);
    let a = train_mode_counts(&model, &x, 1);
    assert_eq!(a, train_mode_counts(&model, &x, 2));
    model.begin_epoch(&mut epoch_rng);
    assert_ne!(a, train_mode_counts(&model, &x, 1));

    let per_pass = CrowdMlp::new(&base).unwrap();
    assert_ne!(train_mode_counts(&per_pass, &x, 1), train_mode_counts(&per_pass, &x, 2));
}
