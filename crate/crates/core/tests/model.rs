mod common;

use common::{conv_loops, linear_loops, mean_pool_loops, random, rel_diff, rng, tiny_model_config};
use strip_mlp::cost::enumerate_trainable;
use strip_mlp::layers::{Ctx, Layer};
use strip_mlp::model::{ModelConfig, StripMlp, Variant};
use strip_mlp::ops::softmax_axis;
use strip_mlp::params::ParamStore;
use strip_mlp::{Error, Tensor};

fn stores_equal(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((_, sa, ta), (_, sb, tb))| {
            sa == sb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn same_seed_builds_identical_stores() {
    let cfg = tiny_model_config();
    let (_, a) = StripMlp::build(&cfg, 7).unwrap();
    let (_, b) = StripMlp::build(&cfg, 7).unwrap();
    let (_, c) = StripMlp::build(&cfg, 8).unwrap();
    assert!(stores_equal(&a, &b));
    assert!(!stores_equal(&a, &c));
}

#[test]
fn tstar_logits_shape_and_softmax() {
    let cfg = ModelConfig::variant(Variant::TStar);
    let (model, store) = StripMlp::build(&cfg, 1).unwrap();
    let x = random(&model.input_shape(2), &mut rng(2));
    let logits = model.logits(&store, &x).unwrap();
    assert_eq!(logits.shape(), &[2, 1000]);
    assert!(logits.is_finite());
    let p = softmax_axis(&logits, 1).unwrap();
    for row in p.data().chunks(1000) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn zeroed_residual_branches_leave_the_skeleton() {
    let cfg = tiny_model_config();
    let (model, mut store) = StripMlp::build(&cfg, 3).unwrap();
    common::randomize(&mut store, 4);
    for stage in &model.stages {
        for (mix, chan) in &stage.blocks {
            for id in mix.fc_out.param_ids().into_iter().chain(chan.project.param_ids()) {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }
    let x = random(&model.input_shape(2), &mut rng(5));
    let got = model.logits(&store, &x).unwrap();

    let conv = |c: &strip_mlp::layers::Conv, t: &Tensor| {
        conv_loops(t, &c.spec, store.get(c.weight), c.bias.map(|b| store.get(b)))
    };
    let s1 = conv(&model.embed.conv, &x);
    let s2 = conv(&model.merges[0].conv, &s1);
    let s3 = conv(&model.merges[1].conv, &s2).add(&conv(&model.skips[0], &s1)).unwrap();
    let s4 = conv(&model.merges[2].conv, &s3).add(&conv(&model.skips[1], &s2)).unwrap();
    let head = &model.head;
    let want = linear_loops(&mean_pool_loops(&s4), store.get(head.weight), store.get(head.bias));
    assert!(rel_diff(&got, &want) <= 1e-12);
}

#[test]
fn parameter_totals_grow_across_variants() {
    let totals: Vec<u64> = Variant::ALL
        .iter()
        .map(|&v| {
            let (_, specs) = StripMlp::describe(&ModelConfig::variant(v)).unwrap();
            enumerate_trainable(&specs)
        })
        .collect();
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
}

#[test]
fn stage_schedule_ends_at_seven_by_seven() {
    for v in Variant::ALL {
        let cfg = ModelConfig::variant(v);
        let (model, _) = StripMlp::describe(&cfg).unwrap();
        for (s, stage) in model.stages.iter().enumerate() {
            assert_eq!(stage.channels, cfg.channels << s);
            assert_eq!(stage.size, 56 >> s);
            assert_eq!(stage.blocks.len(), v.depths()[s]);
        }
        let last = &model.stages[3];
        assert_eq!((last.size, last.channels), (7, 8 * cfg.channels));
    }
}

#[test]
fn every_trainable_tensor_gets_a_gradient() {
    let cfg = tiny_model_config();
    let (model, store) = StripMlp::build(&cfg, 6).unwrap();
    let x = random(&model.input_shape(2), &mut rng(7));
    let mut cx = Ctx::training(&store);
    let input = cx.input(x);
    let logits = model.forward(&mut cx, input).unwrap();
    let loss = cx.graph.cross_entropy(logits, &[1, 3], 0.0).unwrap();
    let mut g = cx.graph.backward(loss).unwrap();
    let grads = cx.param_grads(&mut g);
    let trainable: Vec<_> = store.ids().filter(|&id| store.role(id).trainable()).collect();
    assert_eq!(grads.len(), trainable.len());
    for (id, grad) in &grads {
        assert_eq!(grad.shape(), store.get(*id).shape());
        assert!(grad.max_abs() > 0.0, "{} has a zero gradient", store.name(*id));
    }
}

#[test]
fn non_finite_activation_names_the_layer() {
    let cfg = tiny_model_config();
    let (model, mut store) = StripMlp::build(&cfg, 8).unwrap();
    let id = store.find("stages.1.blocks.0.chan.expand.weight").unwrap();
    store.get_mut(id).data_mut()[0] = f64::INFINITY;
    let x = random(&model.input_shape(1), &mut rng(9));
    match model.logits(&store, &x) {
        Err(Error::NonFinite { op }) => assert!(op.starts_with("stages.1.blocks.0.chan"), "{op}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn input_and_config_errors() {
    let cfg = tiny_model_config();
    let (model, store) = StripMlp::build(&cfg, 10).unwrap();
    let wrong = Tensor::zeros(&[1, 3, 32, 32]);
    assert!(matches!(model.logits(&store, &wrong), Err(Error::Config(_))));

    let bad = ModelConfig { image_size: 20, ..tiny_model_config() };
    assert!(matches!(StripMlp::build(&bad, 0), Err(Error::Config(_))));
    let zero_depth = ModelConfig { depths: [1, 0, 1, 1], ..tiny_model_config() };
    assert!(matches!(StripMlp::describe(&zero_depth), Err(Error::Config(_))));
    assert!(matches!(ModelConfig::from_toml("channel = 8"), Err(Error::Parse(_))));
}

#[test]
fn toml_round_trip() {
    let cfg = ModelConfig { channels: 16, patch_policy: strip_mlp::layers::PatchPolicy::C2, ..tiny_model_config() };
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
}
