use cmlp_tensor::{Mode, Rng, Tensor};
use crowdmlp::frontend::{Frontend, FrontendConfig};
use crowdmlp::params::{BnStore, ParamStore, Session};
use crowdmlp::regressor::{MixingBlock, NormAxis};
use crowdmlp::tokenizer::{RawDropTiming, StreamKind, StreamSet, Tokenizer};
use crowdmlp::train::ablation_configs;
use crowdmlp::{CrowdMlp, ModelConfig};
use proptest::prelude::*;

fn random_images(batch: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[batch, 3, side, side], |_| rng.uniform())
}

fn counts_of(cfg: &ModelConfig) -> Vec<(StreamKind, usize)> {
    cfg.stream_counts()
}

#[test]
fn stream_counts_at_256_and_128() {
    let full = ModelConfig::full();
    assert_eq!(
        counts_of(&full),
        vec![
            (StreamKind::Feat16, 4),
            (StreamKind::Feat8, 16),
            (StreamKind::Feat4, 64),
            (StreamKind::Raw, 256)
        ]
    );
    assert_eq!(full.total_tokens(), 340);
    let tiny = ModelConfig::tiny();
    let counts: Vec<usize> = counts_of(&tiny).into_iter().map(|(_, c)| c).collect();
    assert_eq!(counts, vec![1, 4, 16, 64]);
    assert_eq!(tiny.total_tokens(), 85);
}

#[test]
fn full_model_joins_340_tokens_into_one_scalar() {
    let model = CrowdMlp::new(&ModelConfig::full()).unwrap();
    let mut s = model.session(Mode::Eval, Rng::new(0));
    let x = s.tape.constant(random_images(1, 256, 1));
    let out = model.forward(&mut s, x).unwrap();
    assert_eq!(s.tape.shape(out.holistic), &[1, 340, 256]);
    assert_eq!(s.tape.shape(out.counts), &[1]);
}

#[test]
fn tiny_model_shapes_in_both_modes() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    for mode in [Mode::Eval, Mode::Train] {
        let mut s = model.session(mode, Rng::new(3));
        let x = s.tape.constant(random_images(2, 128, 2));
        let out = model.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(out.holistic), &[2, 85, 16]);
        assert_eq!(s.tape.shape(out.counts), &[2]);
        assert!(s.value(out.counts).data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    assert!(model.predict(&random_images(1, 256, 0)).is_err());
    assert!(model.predict(&Tensor::zeros(&[1, 1, 128, 128])).is_err());
}

#[test]
fn inputs_below_128_are_a_config_error() {
    let cfg = ModelConfig {
        input_size: 64,
        ..ModelConfig::tiny()
    };
    assert!(CrowdMlp::new(&cfg).is_err());
}

#[test]
fn eval_prediction_is_bitwise_repeatable() {
    let model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let x = random_images(3, 128, 9);
    let (a, ea) = model.predict(&x).unwrap();
    let (b, eb) = model.predict(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(ea.data(), eb.data());
}

fn tiny_frontend(seed: u64) -> (Frontend, ParamStore, BnStore) {
    let mut params = ParamStore::default();
    let mut bn = BnStore::default();
    let cfg = FrontendConfig {
        block_channels: vec![4, 8, 8],
        convs_per_block: 2,
        reduced_channels: 8,
        weights_path: None,
    };
    let f = Frontend::new(&cfg, &mut params, &mut bn, &mut Rng::new(seed)).unwrap();
    (f, params, bn)
}

#[test]
fn frontend_downsamples_by_eight() {
    let (f, params, bn) = tiny_frontend(0);
    for side in [64, 128, 256] {
        let mut s = Session::new(&params, &bn, Mode::Eval, Rng::new(0));
        let x = s.tape.constant(random_images(1, side, side as u64));
        let y = f.extract_features(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 8, side / 8, side / 8]);
    }
}

#[test]
fn frontend_on_blank_image_is_repeatable() {
    let (f, params, bn) = tiny_frontend(1);
    let run = || {
        let mut s = Session::new(&params, &bn, Mode::Eval, Rng::new(0));
        let x = s.tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let y = f.extract_features(&mut s, x).unwrap();
        s.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn every_frontend_parameter_receives_gradient() {
    for seed in 0..5 {
        let (f, params, bn) = tiny_frontend(seed);
        let mut s = Session::new(&params, &bn, Mode::Eval, Rng::new(seed));
        let x = s.tape.constant(random_images(2, 64, 100 + seed));
        let y = f.extract_features(&mut s, x).unwrap();
        let mut rng = Rng::new(200 + seed);
        let weights = Tensor::from_fn(s.tape.shape(y), |_| rng.normal());
        let w = s.tape.constant(weights);
        let prod = s.tape.mul(y, w).unwrap();
        let loss = s.tape.sum(prod);
        let grads = s.gradients(loss).unwrap();
        for id in params.ids() {
            let g = grads.get(id).expect("gradient present");
            assert!(
                g.data().iter().any(|v| *v != 0.0),
                "seed {seed}: {} has an all-zero gradient",
                params.name(id)
            );
        }
    }
}

#[test]
fn zero_projection_weights_give_bias_tokens() {
    let mut params = ParamStore::default();
    let tokenizer = Tokenizer::new(
        &StreamSet::all(),
        8,
        16,
        0.2,
        RawDropTiming::PerPass,
        &mut params,
        &mut Rng::new(0),
    );
    let mut rng = Rng::new(5);
    for kind in StreamKind::ALL {
        let w = params.id(&format!("tokens.{}.weight", kind.tag())).unwrap();
        params.get_mut(w).data_mut().fill(0.0);
        let b = params.id(&format!("tokens.{}.bias", kind.tag())).unwrap();
        for v in params.get_mut(b).data_mut() {
            *v = rng.normal();
        }
    }
    let bn = BnStore::default();
    let mut s = Session::new(&params, &bn, Mode::Eval, Rng::new(0));
    let images = s.tape.constant(random_images(2, 128, 6));
    let mut r = Rng::new(8);
    let features = s.tape.constant(Tensor::from_fn(&[2, 8, 16, 16], |_| r.normal()));
    let streams = tokenizer.build_streams(&mut s, images, Some(features)).unwrap();
    assert_eq!(streams.len(), 4);
    for stream in &streams {
        let bias = params
            .get(params.id(&format!("tokens.{}.bias", stream.kind.tag())).unwrap())
            .data()
            .to_vec();
        let tokens = s.value(stream.tokens);
        assert_eq!(tokens.shape(), &[2, stream.count, 16]);
        for row in tokens.data().chunks(16) {
            assert_eq!(row, bias.as_slice());
        }
    }
}

#[test]
fn zero_weight_mixing_block_reduces_to_normalization() {
    let mut params = ParamStore::default();
    let mut bn = BnStore::default();
    let block = MixingBlock::new(
        "m",
        256,
        512,
        NormAxis::Rows,
        16,
        0.1,
        &mut params,
        &mut bn,
        &mut Rng::new(0),
    );
    for name in ["m.fc0.weight", "m.fc0.bias", "m.fc1.weight", "m.fc1.bias"] {
        let id = params.id(name).unwrap();
        params.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = Rng::new(1);
    let x = Tensor::from_fn(&[16, 256], |_| rng.normal());
    let mut s = Session::new(&params, &bn, Mode::Eval, Rng::new(0));
    let xv = s.tape.constant(x.clone());
    let y = block.forward(&mut s, xv).unwrap();
    // Fresh running statistics are mean 0, variance 1.
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    let expected = x.map(|v| v * scale);
    assert_eq!(s.value(y).shape(), &[16, 256]);
    assert!(s.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn bias_only_count_head_predicts_the_bias() {
    let mut model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let count_bias = model.regressor().count_bias();
    for t in model.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    model.params.get_mut(count_bias).data_mut()[0] = 17.25;
    for seed in 0..3 {
        let (counts, _) = model.predict(&random_images(2, 128, seed)).unwrap();
        assert_eq!(counts, vec![17.25, 17.25]);
    }
}

#[test]
fn predictions_may_be_negative() {
    let mut model = CrowdMlp::new(&ModelConfig::tiny()).unwrap();
    let count_bias = model.regressor().count_bias();
    for t in model.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    model.params.get_mut(count_bias).data_mut()[0] = -3.0;
    let (counts, _) = model.predict(&random_images(1, 128, 0)).unwrap();
    assert_eq!(counts, vec![-3.0]);
}

#[test]
fn every_stream_removal_shrinks_the_model() {
    let base = ModelConfig::tiny();
    let configs = ablation_configs(&base);
    assert_eq!(configs.len(), 5);
    let full = CrowdMlp::new(&configs[0].1).unwrap().num_parameters();
    for (name, cfg) in &configs[1..] {
        let model = CrowdMlp::new(cfg).unwrap();
        assert!(model.num_parameters() < full, "{name}");
        let (counts, _) = model.predict(&random_images(1, 128, 0)).unwrap();
        assert_eq!(counts.len(), 1);
    }
}

#[test]
fn raw_only_model_skips_the_frontend() {
    let cfg = ModelConfig {
        streams: StreamSet {
            feat16: false,
            feat8: false,
            feat4: false,
            raw: true,
        },
        ..ModelConfig::tiny()
    };
    let model = CrowdMlp::new(&cfg).unwrap();
    assert!(model.params.iter().all(|(name, _)| !name.starts_with("frontend.")));
    assert_eq!(model.predict(&random_images(1, 128, 0)).unwrap().0.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn token_counts_follow_the_grid(k in 1usize..8) {
        let h = 128 * k;
        for kind in StreamKind::ALL {
            let expected = if kind.is_feature() {
                (h / (8 * kind.patch_size())).pow(2)
            } else {
                (h / 16).pow(2)
            };
            prop_assert_eq!(kind.token_count(h), expected);
        }
    }
}
