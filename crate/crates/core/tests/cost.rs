mod common;

use common::{im2col_macs, tiny_model_config};
use strip_mlp::cost::{
    cgsmm_cost, count_flops, count_params, enumerate_trainable, model_report, sparse_mlp_baseline, strip_mlp_formula,
    table1, typeset_flops, typeset_params, Table1Config, FUSION4, SPARSE, STAGE1, STAGE4, STRIP,
};
use strip_mlp::layers::{BlockConfig, Cgsmm, Conv, Layer, Linear, StripMixingBlock, Topology};
use strip_mlp::model::{ModelConfig, StripMlp, Variant};
use strip_mlp::params::ParamBuilder;
use strip_mlp::ConvSpec;

#[test]
fn strip_interaction_weight_counts() {
    let (stage1, _) = cgsmm_cost(112, 56, 28, 3).unwrap();
    assert_eq!(stage1.weights, 526_848);
    let (stage4, fusion) = cgsmm_cost(896, 7, 224, 3).unwrap();
    assert_eq!(stage4.weights, 65_856);
    assert_eq!(fusion.weights, 4 * 896 * 896);
    assert_eq!(fusion.weights, 3_211_264);
}

#[test]
fn strip_interaction_flops() {
    let (stage1, _) = cgsmm_cost(112, 56, 28, 3).unwrap();
    // 3 * C * H * W * (H + W)
    assert_eq!(stage1.macs, 3 * 112 * 56 * 56 * (56 + 56));
    assert_eq!(stage1.macs, 118_013_952);
    let (stage4, fusion) = cgsmm_cost(896, 7, 224, 3).unwrap();
    assert_eq!(stage4.macs, 1_843_968);
    assert_eq!(fusion.macs, 157_351_936);
}

#[test]
fn sparse_baseline_values() {
    let s1 = sparse_mlp_baseline(56, 56, 112).unwrap();
    assert_eq!(s1.interaction_params, 6_272);
    assert_eq!(s1.interaction_flops, 112 * 56 * 56 * 112);
    let s4 = sparse_mlp_baseline(7, 7, 896).unwrap();
    assert_eq!(s4.interaction_params, 98);
    assert_eq!(s4.fusion_params, 2_408_448);
    assert_eq!(s4.fusion_flops, 3 * 49 * 896 * 896);
    assert!(sparse_mlp_baseline(0, 7, 8).is_err());
}

#[test]
fn closed_form_matches_traversal() {
    for (c, size, p, k) in [(112, 56, 28, 3), (896, 7, 224, 3), (12, 5, 3, 5), (8, 4, 8, 1)] {
        let f = strip_mlp_formula(size, size, c, p, k).unwrap();
        let (inter, fuse) = cgsmm_cost(c, size, p, k).unwrap();
        assert_eq!(f.interaction_params, inter.weights);
        assert_eq!(f.interaction_flops, inter.macs);
        assert_eq!(f.fusion_params, fuse.weights);
        assert_eq!(f.fusion_flops, fuse.macs);
    }
}

#[test]
fn typesetting() {
    assert_eq!(typeset_params(526_848), "526.85k");
    assert_eq!(typeset_params(98), "0.10k");
    assert_eq!(typeset_params(3_211_264), "3.21M");
    assert_eq!(typeset_flops(1_843_968), "1.84M");
    assert_eq!(typeset_flops(2_619_794_400), "2.62G");
}

#[test]
fn table1_report_rows() {
    let r = table1(&Table1Config::default()).unwrap();
    let cell = |d, s| {
        let (p, f) = r.count(d, s).unwrap();
        (p.text.clone(), f.text.clone())
    };
    assert_eq!(cell(STRIP, STAGE1), ("526.85k".into(), "118.01M".into()));
    assert_eq!(cell(STRIP, STAGE4), ("65.86k".into(), "1.84M".into()));
    assert_eq!(cell(STRIP, FUSION4), ("3.21M".into(), "157.35M".into()));
    assert_eq!(cell(SPARSE, STAGE1), ("6.27k".into(), "39.34M".into()));
    assert_eq!(cell(SPARSE, STAGE4).0, "0.10k");
    assert_eq!(cell(SPARSE, FUSION4), ("2.41M".into(), "118.01M".into()));

    let (p, _, p_exact, _) = r.changes(STRIP).unwrap();
    assert!((p - 8.0).abs() < 0.005);
    assert_eq!(p_exact, 526_848.0 / 65_856.0);
    let (pp, fp) = r.proportion(STRIP).unwrap();
    let want_p = 100.0 * 65_856.0 / (65_856.0 + 3_211_264.0);
    let want_f = 100.0 * 1_843_968.0 / (1_843_968.0 + 157_351_936.0);
    assert!((pp - want_p).abs() < 1e-9 && (fp - want_f).abs() < 1e-9);

    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert!(json["flops_definition"].as_str().unwrap().contains("multiply-accumulate"));
    assert_eq!(json["records"].as_array().unwrap().len(), 10);
    let text = r.to_text();
    assert!(text.contains("526.85k") && text.contains("157.35M"));
}

#[test]
fn traversal_matches_enumeration_for_layers() {
    let mut b = ParamBuilder::materialized(0);
    let blk = StripMixingBlock::new(&mut b, "blk", BlockConfig::new(16), (6, 6)).unwrap();
    let g = Cgsmm::new(&mut b, "g", 8, (4, 5), 2, 3, Topology::Parallel, true).unwrap();
    let store = b.into_store().unwrap();
    for layer in [&blk as &dyn Layer, &g] {
        let direct: u64 = layer
            .param_ids()
            .into_iter()
            .filter(|&id| store.role(id).trainable())
            .map(|id| store.get(id).numel() as u64)
            .sum();
        assert_eq!(layer.params().params(), direct);
        let (w, bias) = count_params(layer);
        assert!(w + bias <= direct);
    }
}

#[test]
fn traversal_matches_enumeration_for_models() {
    let mut cfgs: Vec<ModelConfig> = Variant::ALL.iter().map(|&v| ModelConfig::variant(v)).collect();
    cfgs.push(tiny_model_config());
    cfgs.push(ModelConfig { topology: Topology::Parallel, ..tiny_model_config() });
    for cfg in cfgs {
        let (model, specs) = StripMlp::describe(&cfg).unwrap();
        assert_eq!(model.total_cost().unwrap().params(), enumerate_trainable(&specs));
        let report = model_report(&cfg).unwrap();
        assert_eq!(report.total.params(), report.enumerated_params);
        assert_eq!(report.total, model.total_cost().unwrap());
    }
}

#[test]
fn conv_macs_equal_im2col_product() {
    let specs = [
        (ConvSpec::pointwise(6, 10), 5, 7),
        (ConvSpec::depthwise(8, (3, 7)), 9, 9),
        (ConvSpec::patchify(3, 16, 4), 32, 32),
        (ConvSpec::new(6, 9, (1, 3)).with_padding((0, 1)).with_groups(3), 4, 5),
    ];
    for (spec, h, w) in specs {
        let mut b = ParamBuilder::shapes_only();
        let conv = Conv::new(&mut b, "c", spec).unwrap();
        assert_eq!(count_flops(&conv, h, w).unwrap(), im2col_macs(&spec, h, w), "{spec:?}");
    }
    let mut b = ParamBuilder::shapes_only();
    let lin = Linear::new(&mut b, "l", 7, 3).unwrap();
    assert_eq!(count_flops(&lin, 1, 1).unwrap(), 21);
    assert_eq!(count_params(&lin), (21, 3));
}

#[test]
fn strip_macs_reject_wrong_map() {
    let (inter, _) = cgsmm_cost(8, 4, 2, 3).unwrap();
    assert!(inter.macs > 0);
    let mut b = ParamBuilder::shapes_only();
    let g = Cgsmm::new(&mut b, "g", 8, (4, 4), 2, 3, Topology::Cascade, true).unwrap();
    assert!(g.interaction_cost(5, 4).is_err());
}
