use satmap_core::synth::{synthesize, DatasetSpec, SceneParams, SynthConfig};
use satmap_net::model::{predict, Model, ModelConfig, Sample};
use satmap_net::params::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
use satmap_net::train::{dataset_loss, train_model, train_toy, TrainConfig};
use satmap_net::Error;

mod common;
use common::*;

fn toy_set(base_seed: u64, n: usize) -> Vec<Sample> {
    let spec = DatasetSpec {
        base_seed,
        n_scenes: n,
        template: SceneParams::default(),
        weather_tags: vec!["sunny".into()],
        synth: SynthConfig::toy(),
    };
    (0..n)
        .map(|i| Sample::from_scene(&synthesize(&spec.scene_params(i), &spec.synth).unwrap()))
        .collect()
}

fn steps(n: usize) -> TrainConfig {
    TrainConfig {
        steps: n,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_and_loss_unchanged() {
    let data = vec![scene_sample(1)];
    let cfg = tiny_config();
    let init = Model::new(cfg.clone(), &data[0].rig, 2).unwrap();
    let tc = TrainConfig { lr: 0.0, ..steps(5) };
    let (model, trace) = train_toy(&data, &cfg, &tc, 2).unwrap();
    assert_eq!(model.params, init.params);
    assert_eq!(trace.steps.len(), 5);
    assert!(trace.steps.iter().all(|s| s.loss == trace.steps[0].loss && s.scene == 0));
}

#[test]
fn same_seed_gives_identical_traces_and_weights() {
    let data = toy_set(3, 4);
    let cfg = tiny_config();
    let (a, ta) = train_toy(&data, &cfg, &steps(6), 4).unwrap();
    let (b, tb) = train_toy(&data, &cfg, &steps(6), 4).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.params, b.params);
    let (_, tc) = train_toy(&data, &cfg, &steps(6), 5).unwrap();
    assert_ne!(ta, tc);
}

#[test]
fn every_scene_is_visited_once_per_epoch() {
    let data = toy_set(6, 3);
    let (_, trace) = train_toy(&data, &tiny_config(), &TrainConfig { lr: 0.0, ..steps(9) }, 7).unwrap();
    for epoch in trace.steps.chunks(3) {
        let mut seen: Vec<usize> = epoch.iter().map(|s| s.scene).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }
}

#[test]
fn nan_input_aborts_at_the_first_step() {
    let mut sample = scene_sample(8);
    sample.cams[0][5] = f64::NAN;
    let e = train_toy(&[sample], &tiny_config(), &steps(3), 9).unwrap_err();
    assert!(matches!(e, Error::Divergence { step: 0, .. }), "{e}");
}

#[test]
fn gradient_clipping_bounds_each_update() {
    let data = vec![scene_sample(10)];
    let cfg = tiny_config();
    let mut model = Model::new(cfg, &data[0].rig, 11).unwrap();
    let before = model.params.clone();
    let tc = TrainConfig {
        lr: 0.5,
        clip_norm: 0.01,
        ..steps(1)
    };
    train_model(&mut model, &data, &tc, 11).unwrap();
    let moved: f64 = before
        .blocks()
        .iter()
        .zip(model.params.blocks())
        .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)))
        .sum::<f64>()
        .sqrt();
    assert!(moved <= 0.5 * 0.01 * (1.0 + 1e-9), "step length {moved}");
    assert!(moved > 0.0);
}

#[test]
fn three_hundred_steps_halve_the_toy_set_loss() {
    let data = toy_set(12, 50);
    let cfg = ModelConfig::toy();
    let mut ratios = Vec::new();
    for seed in [1, 2, 3] {
        let mut model = Model::new(cfg.clone(), &data[0].rig, seed).unwrap();
        let start = dataset_loss(&model, &data).unwrap();
        train_model(&mut model, &data, &steps(300), seed).unwrap();
        let end = dataset_loss(&model, &data).unwrap();
        println!("seed {seed}: loss {start:.4} -> {end:.4}");
        ratios.push(end / start);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.5, "median loss ratio {:.3}", ratios[1]);
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let sample = scene_sample(13);
    let cfg = tiny_config();
    let (model, _) = train_toy(std::slice::from_ref(&sample), &cfg, &steps(2), 14).unwrap();
    save_checkpoint(&path, &model.params, serde_json::to_value(&cfg).unwrap()).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(manifest["format"], CHECKPOINT_FORMAT);
    let (params, cfg_json) = load_checkpoint(&path).unwrap();
    assert_eq!(params, model.params);
    let cfg2: ModelConfig = serde_json::from_value(cfg_json).unwrap();
    assert_eq!(cfg2, cfg);
    let restored = Model::with_params(cfg2, &sample.rig, params).unwrap();
    assert_eq!(predict(&restored, &sample).unwrap(), predict(&model, &sample).unwrap());
}

#[test]
fn truncated_checkpoint_data_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let sample = scene_sample(15);
    let model = Model::new(tiny_config(), &sample.rig, 16).unwrap();
    save_checkpoint(&path, &model.params, serde_json::Value::Null).unwrap();
    let bin = path.with_extension("bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    let e = load_checkpoint(&path).unwrap_err();
    assert!(matches!(e, Error::Checkpoint { .. }), "{e}");
}

#[test]
fn model_config_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    let cfg = ModelConfig::toy();
    cfg.save(&path).unwrap();
    assert_eq!(ModelConfig::load(&path).unwrap(), cfg);
    let mut bad = cfg.clone();
    bad.heads = 5;
    bad.save(&path).unwrap();
    assert!(ModelConfig::load(&path).is_err());
}
