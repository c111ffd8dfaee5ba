mod common;

use common::toy_pairs;
use dreamif_core::model::{describe, Model, ModelConfig};
use dreamif_core::relative::Modality;
use dreamif_core::Error;

fn with_flags(use_ce: bool, use_se: bool) -> Model {
    Model::new(ModelConfig {
        use_ce,
        use_se,
        ..ModelConfig::toy()
    })
    .unwrap()
}

#[test]
fn enhancement_is_identity_at_init() {
    let pair = &toy_pairs(1, 64, 0)[0];
    let full = with_flags(true, true).forward(&pair.vis, &pair.ir).unwrap();
    for (ce, se) in [(false, false), (true, false), (false, true)] {
        let other = with_flags(ce, se).forward(&pair.vis, &pair.ir).unwrap();
        let diff = full
            .fused
            .data()
            .iter()
            .zip(other.fused.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "ce={ce} se={se}: {diff}");
    }
}

#[test]
fn forward_shapes_and_dominance_maps() {
    let pair = &toy_pairs(1, 32, 1)[0];
    let model = Model::new(ModelConfig::toy()).unwrap();
    let out = model.forward(&pair.vis, &pair.ir).unwrap();
    assert_eq!(out.fused.dims(), (3, 32, 32));
    assert!(out.fused.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.rd_maps.len(), 8);
    let order: Vec<_> = out.rd_maps.iter().map(|m| (m.level, m.modality)).collect();
    let expect: Vec<_> = (1..=4).flat_map(|l| [(l, Modality::Vis), (l, Modality::Ir)]).collect();
    assert_eq!(order, expect);
    for m in &out.rd_maps {
        let side = 32 >> (m.level - 1);
        assert_eq!((m.height, m.width), (side, side));
        assert_eq!(m.weights.len(), side * side);
        assert!(m.weights.iter().all(|&w| w > 0.0 && w < 1.0));
    }
    assert_eq!(out.rd(Modality::Ir, 3).unwrap().level, 3);
    assert!(out.rd(Modality::Vis, 5).is_none());
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let pair = &toy_pairs(1, 16, 2)[0];
    let a = Model::new(ModelConfig::toy()).unwrap().forward(&pair.vis, &pair.ir).unwrap();
    let b = Model::new(ModelConfig::toy()).unwrap().forward(&pair.vis, &pair.ir).unwrap();
    assert_eq!(a.fused, b.fused);
    let reseeded = Model::new(ModelConfig {
        seed: 1,
        ..ModelConfig::toy()
    })
    .unwrap();
    assert_ne!(reseeded.forward(&pair.vis, &pair.ir).unwrap().fused, a.fused);
}

#[test]
fn grayscale_inputs_match_promoted_rgb() {
    let pair = &toy_pairs(1, 16, 4)[0];
    let gray = pair.ir.luma_image();
    let model = Model::new(ModelConfig::toy()).unwrap();
    let a = model.forward(&pair.vis, &gray).unwrap();
    let b = model.forward(&pair.vis, &gray.to_rgb()).unwrap();
    assert_eq!(a.fused, b.fused);
}

#[test]
fn forward_rejects_bad_inputs() {
    let model = Model::new(ModelConfig::toy()).unwrap();
    let pairs = toy_pairs(1, 16, 5);
    let small = toy_pairs(1, 8, 5);
    assert!(matches!(
        model.forward(&pairs[0].vis, &small[0].ir),
        Err(Error::InvalidArgument(_))
    ));
    let odd = pairs[0].vis.crop(0, 0, 12, 16).unwrap();
    assert!(matches!(model.forward(&odd, &odd), Err(Error::InvalidArgument(_))));
}

#[test]
fn describe_counts_parameters() {
    let toy = describe(&ModelConfig::toy()).unwrap();
    let model = Model::new(ModelConfig::toy()).unwrap();
    assert_eq!(toy, model.summary());
    assert_eq!(toy.num_params, model.num_params());
    let mut no_ce = ModelConfig::toy();
    no_ce.use_ce = false;
    assert!(describe(&no_ce).unwrap().num_params < toy.num_params);
    let big = describe(&ModelConfig::full()).unwrap();
    assert!(big.num_params > 10 * toy.num_params);
    let v = serde_json::to_value(&toy).unwrap();
    assert!(v["config"]["backbone"]["base_dim"].is_number());
    let mut bad = ModelConfig::toy();
    bad.prompt.n = 0;
    assert!(matches!(describe(&bad), Err(Error::InvalidArgument(_))));
}
