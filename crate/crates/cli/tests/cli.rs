use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use satmap_core::geomath::{wgs84_to_world_px, TileStore};
use satmap_net::model::ModelConfig;
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", self.stdout))
    }
}

fn satmap(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_satmap"));
    cmd.current_dir(dir).args(args).env_remove("SATMAP_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let r = satmap(dir, args, &[]);
    assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
    r.json()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn assert_valid(value: &Value, schema: &str) {
    let path = schema_dir().join(format!("{schema}.schema.json"));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let v = jsonschema::validator_for(&s).unwrap();
    let errors: Vec<String> = v.iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema}: {errors:#?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn dataset(dir: &Path, name: &str, n: usize) -> PathBuf {
    let n = n.to_string();
    ok(dir, &["synth", "--n", &n, "--seed", "4", "--out", name]);
    dir.join(name)
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ModelConfig::toy();
    cfg.channels = 8;
    cfg.ffn_hidden = 8;
    cfg.n_queries = 3;
    cfg.n_points = 4;
    cfg.cam_hidden = 4;
    cfg.stages = 2;
    let p = dir.join("tiny.json");
    cfg.save(&p).unwrap();
    p
}

#[test]
fn eval_identical_maps_scores_one() {
    let t = TempDir::new().unwrap();
    dataset(t.path(), "ds", 1);
    let gt = "ds/scene_0000/map.json";
    let rep = ok(t.path(), &["eval", "--pred", gt, "--gt", gt]);
    assert_eq!(rep["map"], 1.0);
    assert_valid(&rep, "eval_report");
    assert_valid(&read_json(&t.path().join(gt)), "vector_map");
}

#[test]
fn eval_pairs_arrays_by_position_and_splits_by_tag() {
    let t = TempDir::new().unwrap();
    dataset(t.path(), "ds", 2);
    let maps: Vec<Value> = (0..2)
        .map(|i| read_json(&t.path().join(format!("ds/scene_{i:04}/map.json"))))
        .collect();
    std::fs::write(t.path().join("gt.json"), serde_json::to_string(&maps).unwrap()).unwrap();
    let swapped = vec![maps[1].clone(), maps[0].clone()];
    std::fs::write(t.path().join("pred.json"), serde_json::to_string(&swapped).unwrap()).unwrap();

    let same = ok(t.path(), &["eval", "--pred", "gt.json", "--gt", "gt.json", "--per-tag"]);
    assert_valid(&same, "split_report");
    assert_eq!(same["splits"]["all"]["map"], 1.0);
    assert_eq!(same["splits"]["all"]["samples"], 2);

    let cross = ok(t.path(), &["eval", "--pred", "pred.json", "--gt", "gt.json"]);
    assert!(cross["map"].as_f64().unwrap() < 1.0);

    std::fs::write(t.path().join("one.json"), serde_json::to_string(&maps[..1]).unwrap()).unwrap();
    let r = satmap(t.path(), &["eval", "--pred", "one.json", "--gt", "gt.json"], &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn exit_codes_for_usage_and_data_errors() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    assert_eq!(satmap(p, &["eval", "--pred", "x.json"], &[]).code, 1);
    assert_eq!(satmap(p, &["frobnicate"], &[]).code, 1);
    assert_eq!(satmap(p, &[], &[]).code, 1);
    assert_eq!(satmap(p, &["--help"], &[]).code, 0);
    assert_eq!(satmap(p, &["synth", "--n", "1", "--out", "d"], &[("SATMAP_SEED", "abc")]).code, 1);
    assert_eq!(satmap(p, &["synth", "--n", "1", "--out", "d", "--occlusion", "2"], &[]).code, 1);

    let r = satmap(p, &["eval", "--pred", "missing.json", "--gt", "missing.json"], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("missing.json"), "{}", r.stderr);
    std::fs::write(p.join("bad.json"), "{\"instances\": 3}").unwrap();
    assert_eq!(satmap(p, &["eval", "--pred", "bad.json", "--gt", "bad.json"], &[]).code, 2);
    assert_eq!(satmap(p, &["train", "--data", "nowhere", "--steps", "1", "--out", "c.json"], &[]).code, 2);
}

#[test]
fn synth_seed_falls_back_to_env_and_is_reproducible() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    let flag = satmap(p, &["synth", "--n", "2", "--seed", "9", "--out", "a"], &[]);
    let env = satmap(p, &["synth", "--n", "2", "--out", "b"], &[("SATMAP_SEED", "9")]);
    let flag_wins = satmap(p, &["synth", "--n", "2", "--seed", "9", "--out", "c"], &[("SATMAP_SEED", "1")]);
    assert_eq!(flag.code, 0, "{}", flag.stderr);
    assert_eq!(flag.json()["spec"]["base_seed"], 9);
    assert_eq!(flag.stdout, env.stdout);
    assert_eq!(flag.stdout, flag_wins.stdout);
    assert_valid(&flag.json(), "synth_manifest");
    assert_valid(&read_json(&p.join("a/manifest.json")), "synth_manifest");
    assert_valid(&read_json(&p.join("a/scene_0000/sat.json")), "sat_meta");
    for f in ["sat.png", "cam_0.png", "cam_1.png", "map.json"] {
        assert_eq!(
            std::fs::read(p.join("a/scene_0001").join(f)).unwrap(),
            std::fs::read(p.join("b/scene_0001").join(f)).unwrap(),
            "{f}"
        );
    }
    let unset = ok(p, &["synth", "--n", "1", "--out", "d"]);
    assert_eq!(unset["spec"]["base_seed"], 0);

    let occ = ok(p, &["synth", "--n", "1", "--out", "e", "--occlusion", "0.3", "--misalign", "4", "--occluders", "2"]);
    assert_eq!(occ["spec"]["template"]["occlusion_frac"], 0.3);
    assert_eq!(occ["scenes"][0]["tags"][1], "occluded");
}

#[test]
fn train_writes_checkpoint_and_trace() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    dataset(p, "ds", 2);
    let cfg = tiny_config(p);
    let cfg = cfg.to_str().unwrap();
    let args = ["train", "--data", "ds", "--config", cfg, "--steps", "3", "--seed", "2", "--out", "ck/run.json"];
    let first = satmap(p, &args, &[]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    let sum = first.json();
    assert_valid(&sum, "train_summary");
    assert_eq!(sum["steps"], 3);
    assert_valid(&read_json(&p.join("ck/run.json")), "checkpoint");
    let trace = read_json(&p.join("ck/run.trace.json"));
    assert_valid(&trace, "train_trace");
    assert_eq!(trace["steps"].as_array().unwrap().len(), 3);
    let bin = std::fs::read(p.join("ck/run.bin")).unwrap();

    let again = satmap(p, &args, &[]);
    assert_eq!(first.stdout, again.stdout);
    assert_eq!(bin, std::fs::read(p.join("ck/run.bin")).unwrap());

    let wrong = satmap(p, &["train", "--data", "ds", "--config", cfg, "--steps", "0", "--out", "x.json"], &[]);
    assert_eq!(wrong.code, 1);
}

#[test]
fn gradcheck_passes_and_a_corrupted_rule_exits_three() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    let cfg = tiny_config(p);
    let cfg = cfg.to_str().unwrap();

    let good = ok(p, &["gradcheck", "--config", cfg, "--seed", "1"]);
    assert_valid(&good, "gradcheck_report");
    assert_eq!(good["pass"], true);
    assert!(good["corrupt"].is_null());

    let bad = satmap(p, &["gradcheck", "--config", cfg, "--seed", "1", "--corrupt", "linear"], &[]);
    assert_eq!(bad.code, 3, "{}", bad.stderr);
    let rep = bad.json();
    assert_valid(&rep, "gradcheck_report");
    assert_eq!(rep["pass"], false);
    assert!(!rep["failed_blocks"].as_array().unwrap().is_empty());
    assert_eq!(rep["corrupt"]["op"], "linear");

    assert_eq!(satmap(p, &["gradcheck", "--config", cfg, "--corrupt", "nonsense"], &[]).code, 1);
}

#[test]
fn ablate_reports_every_cell() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    dataset(p, "ds", 2);
    let cfg = tiny_config(p);
    let rep = ok(
        p,
        &[
            "ablate", "--data", "ds", "--test", "ds", "--config", cfg.to_str().unwrap(), "--steps", "2", "--seeds", "1,2",
            "--grid", "conv×conv_fuser,cross_attention,camera_only", "--out", "ab/report.json", "--jobs", "2",
        ],
    );
    assert_valid(&rep, "ablate_report");
    assert_eq!(rep, read_json(&p.join("ab/report.json")));
    assert_eq!(rep["runs"].as_array().unwrap().len(), 6);
    let labels: Vec<&str> = rep["cells"].as_array().unwrap().iter().map(|c| c["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["camera_only", "conv/conv_fuser", "conv/cross_attention"]);
    assert!(rep["conv_minus_cross_attention"]["conv"].is_number());
    assert_eq!(rep["margin_over_camera_only"].as_object().unwrap().len(), 2);
    assert_eq!(rep["eval_on"], "held_out");

    assert_eq!(satmap(p, &["ablate", "--data", "ds", "--grid", "conv", "--out", "x.json"], &[]).code, 1);
    assert_eq!(satmap(p, &["ablate", "--data", "ds", "--grid", "conv×bogus", "--out", "x.json"], &[]).code, 1);
}

/// Tiles around a point, each a flat color keyed by its index.
fn write_tiles(root: &Path, lat: f64, lon: f64, zoom: u32, skip_center: bool) {
    let (wx, wy) = wgs84_to_world_px(lat, lon, zoom, 256).unwrap();
    let (tx, ty) = ((wx / 256.0) as u32, (wy / 256.0) as u32);
    let mut store = TileStore::new(zoom, 256);
    for dx in 0..7u32 {
        for dy in 0..7u32 {
            if skip_center && dx == 3 && dy == 3 {
                continue;
            }
            let c = Rgb([(dx * 36) as u8, (dy * 36) as u8, 128]);
            store.insert(tx + dx - 3, ty + dy - 3, RgbImage::from_pixel(256, 256, c)).unwrap();
        }
    }
    store.save_dir(root).unwrap();
}

#[test]
fn crop_sat_writes_png_and_sidecar() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    write_tiles(&p.join("tiles"), 48.137, 11.575, 20, false);
    let args = [
        "crop-sat", "--tiles", "tiles", "--lat", "48.137", "--lon", "11.575", "--heading", "-30", "--range", "60,30",
        "--out", "crop/sat.png",
    ];
    let first = satmap(p, &args, &[]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    let meta = first.json();
    assert_valid(&meta, "sat_meta");
    assert_eq!(meta, read_json(&p.join("crop/sat.json")));
    assert_eq!(meta["valid_frac"], 1.0);
    let img = image::open(p.join("crop/sat.png")).unwrap();
    let size = &meta["crop"]["out_size"];
    assert_eq!(img.height() as u64, size[0].as_u64().unwrap());
    assert_eq!(img.width() as u64, size[1].as_u64().unwrap());
    assert!(img.width() > img.height());
    assert_eq!(satmap(p, &args, &[]).stdout, first.stdout);

    write_tiles(&p.join("holes"), 48.137, 11.575, 20, true);
    let strict = satmap(p, &["crop-sat", "--tiles", "holes", "--lat", "48.137", "--lon", "11.575", "--out", "h.png"], &[]);
    assert_eq!(strict.code, 2, "{}", strict.stderr);
    let filled = ok(p, &["crop-sat", "--tiles", "holes", "--lat", "48.137", "--lon", "11.575", "--out", "h.png", "--fill", "0,0,0"]);
    assert!(filled["valid_frac"].as_f64().unwrap() < 1.0);
    assert_eq!(satmap(p, &["crop-sat", "--tiles", "tiles", "--lat", "95", "--lon", "0", "--out", "x.png"], &[]).code, 1);
}

#[test]
fn rasterize_joins_panels() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    dataset(p, "ds", 2);
    let only = ok(p, &["rasterize", "--map", "ds/scene_0000/map.json", "--out", "a.png"]);
    assert_valid(&only, "figure");
    assert_eq!((only["width"].as_u64(), only["height"].as_u64()), (Some(240), Some(120)));

    let all = ok(
        p,
        &[
            "rasterize", "--map", "ds/scene_0000/map.json", "--pred", "ds/scene_0001/map.json", "--sat",
            "ds/scene_0000/sat.png", "--out", "figs/b.png",
        ],
    );
    assert_valid(&all, "figure");
    assert_eq!(all["panels"].as_array().unwrap().len(), 3);
    let img = image::open(p.join("figs/b.png")).unwrap();
    assert_eq!(img.width(), 3 * 240 + 2 * 4);
    assert_eq!(satmap(p, &["rasterize", "--map", "ds/scene_0000/map.json", "--range", "1,2", "--out", "c.png"], &[]).code, 1);
}
