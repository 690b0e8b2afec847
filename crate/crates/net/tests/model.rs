use proptest::prelude::*;
use satmap_core::bevgeom::CameraRig;
use satmap_net::blocks::Backbone;
use satmap_net::gradcheck::{grad_check, GradCheckConfig};
use satmap_net::model::{model_forward, model_loss, predict, Fusion, Model, ModelConfig, Sample};
use satmap_net::tape::Graph;

mod common;
use common::*;

fn check_prediction(model: &Model, sample: &Sample) {
    let cfg = &model.cfg;
    let p = predict(model, sample).unwrap();
    assert_eq!(p.probs.len(), cfg.n_queries);
    assert_eq!(p.points.len(), cfg.n_queries);
    for row in &p.probs {
        assert_eq!(row.len(), 4);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    for pts in &p.points {
        assert_eq!(pts.len(), cfg.n_points);
        assert!(pts.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn toy_model_decodes_fifteen_polylines_of_ten_points() {
    let sample = scene_sample(1);
    let model = Model::new(ModelConfig::toy(), &sample.rig, 2).unwrap();
    check_prediction(&model, &sample);
    let p = predict(&model, &sample).unwrap();
    assert_eq!((p.probs.len(), p.points[0].len()), (15, 10));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn decoder_outputs_are_distributions_and_normalized_points(model_seed in 0u64..1000, scene_seed in 0u64..1000, fusion in 0usize..3) {
        let sample = scene_sample(scene_seed);
        let mut cfg = tiny_config();
        cfg.fusion = [Fusion::ConvFuser, Fusion::CrossAttention, Fusion::CameraOnly][fusion];
        let model = Model::new(cfg, &sample.rig, model_seed).unwrap();
        check_prediction(&model, &sample);
    }
}

#[test]
fn toy_stage_shapes() {
    let sample = scene_sample(3);
    let model = Model::new(ModelConfig::toy(), &sample.rig, 4).unwrap();
    let mut g = Graph::new(&model.params);
    let f = model_forward(&mut g, &model, &sample).unwrap();
    let shape = |k: &str| g.shape(f.stages[k]).to_vec();
    assert_eq!(shape("cam_features_0"), vec![8, 16, 32]);
    assert_eq!(shape("cam_features_1"), vec![8, 16, 32]);
    assert_eq!(shape("cam_bev"), vec![20, 10, 32]);
    assert_eq!(shape("sat_level_0"), vec![16, 32, 32]);
    assert_eq!(shape("sat_level_1"), vec![8, 16, 32]);
    assert_eq!(shape("sat_level_2"), vec![4, 8, 32]);
    assert_eq!(shape("sat_bev"), vec![20, 10, 32]);
    assert_eq!(shape("fused_bev"), vec![20, 10, 32]);
    assert_eq!(shape("queries"), vec![150, 32]);
    assert_eq!(shape("dec1_probs"), vec![15, 4]);
    assert_eq!(shape("dec1_points"), vec![150, 2]);
}

#[test]
fn same_seed_gives_identical_models_and_predictions() {
    let sample = scene_sample(5);
    for fusion in [Fusion::ConvFuser, Fusion::CrossAttention] {
        let mut cfg = tiny_config();
        cfg.fusion = fusion;
        let a = Model::new(cfg.clone(), &sample.rig, 9).unwrap();
        let b = Model::new(cfg.clone(), &sample.rig, 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(predict(&a, &sample).unwrap(), predict(&b, &sample).unwrap());
        let c = Model::new(cfg, &sample.rig, 10).unwrap();
        assert_ne!(a.params, c.params);
    }
}

#[test]
fn camera_only_model_ignores_the_satellite_raster() {
    let sample = scene_sample(6);
    let mut cfg = ModelConfig::toy();
    cfg.fusion = Fusion::CameraOnly;
    let model = Model::new(cfg, &sample.rig, 11).unwrap();
    assert!(model.params.blocks().iter().all(|b| !b.name.starts_with("sat.") && !b.name.starts_with("pyr.")));
    let mut other = sample.clone();
    let mut r = rng(12);
    other.sat = rand_vec(&mut r, other.sat.len(), 0.5);
    let a = predict(&model, &sample).unwrap();
    let b = predict(&model, &other).unwrap();
    assert_eq!(a, b);
    // the fused model does see the change
    let fused = Model::new(ModelConfig::toy(), &sample.rig, 11).unwrap();
    assert_ne!(predict(&fused, &sample).unwrap(), predict(&fused, &other).unwrap());
}

#[test]
fn wrong_satellite_size_names_the_stage() {
    let mut sample = scene_sample(7);
    let model = Model::new(tiny_config(), &sample.rig, 13).unwrap();
    sample.sat_size = (32, 64);
    sample.sat.truncate(32 * 64 * 3);
    let e = predict(&model, &sample).unwrap_err().to_string();
    assert!(e.starts_with("stage satellite_encoder"), "{e}");
}

#[test]
fn another_rig_is_planned_on_the_fly() {
    let sample = scene_sample(8);
    let model = Model::new(tiny_config(), &sample.rig, 14).unwrap();
    let mut three = sample.clone();
    three.rig = CameraRig::surround(3, (32, 64), 100f64.to_radians()).unwrap();
    three.cams.push(sample.cams[0].clone());
    let mut g = Graph::new(&model.params);
    let f = model_forward(&mut g, &model, &three).unwrap();
    assert!(f.stages.contains_key("cam_features_2"));
    assert_ne!(predict(&model, &three).unwrap(), predict(&model, &sample).unwrap());
}

#[test]
fn vector_map_output_is_score_sorted_and_capped() {
    let sample = scene_sample(9);
    let model = Model::new(ModelConfig::toy(), &sample.rig, 15).unwrap();
    let p = predict(&model, &sample).unwrap();
    let map = p.to_vector_map(&model.cfg.range, 50);
    assert!(!map.instances.is_empty() && map.instances.len() <= 50);
    let scores: Vec<f64> = map.instances.iter().map(|i| i.score.unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let (x, y) = (model.cfg.range.x, model.cfg.range.y);
    for inst in &map.instances {
        for p in &inst.points {
            assert!(p[0] >= x.0 - 1e-9 && p[0] <= x.1 + 1e-9 && p[1] >= y.0 - 1e-9 && p[1] <= y.1 + 1e-9);
        }
    }
}

#[test]
fn loss_has_one_term_per_decoder_layer() {
    let sample = scene_sample(10);
    let model = Model::new(tiny_config(), &sample.rig, 16).unwrap();
    let mut g = Graph::new(&model.params);
    let out = model_loss(&mut g, &model, &sample).unwrap();
    assert_eq!(out.per_layer.len(), 2);
    let sum: f64 = out.per_layer.iter().map(|l| l.total).sum();
    assert!((g.scalar(out.loss) - sum).abs() < 1e-12);
    assert!(sum.is_finite() && sum > 0.0);
}

#[test]
fn full_model_loss_passes_grad_check() {
    let sample = scene_sample(11);
    for (fusion, backbone) in [
        (Fusion::ConvFuser, Backbone::Attention),
        (Fusion::CrossAttention, Backbone::Conv),
        (Fusion::CameraOnly, Backbone::Attention),
    ] {
        let mut cfg = tiny_config();
        cfg.fusion = fusion;
        cfg.backbone = backbone;
        let model = Model::new(cfg, &sample.rig, 17).unwrap();
        let rep = grad_check(
            &model.params,
            |g: &mut Graph| Ok(model_loss(g, &model, &sample)?.loss),
            &GradCheckConfig {
                entries_per_block: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            rep.pass,
            "{} / {}: max relative error {:.3e} in {:?}",
            fusion.name(),
            backbone.name(),
            rep.max_rel_err,
            rep.failed_blocks
        );
    }
}
