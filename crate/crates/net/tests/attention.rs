use satmap_net::layers::{attention_block, swin_block, window_attention, AttnBias, WindowPlan};
use satmap_net::params::ParamStore;
use satmap_net::tape::Graph;
use satmap_net::Error;

mod common;
use common::*;

fn attn_store(seed: u64, prefix: &str, c: usize) -> ParamStore {
    let names: Vec<(String, Vec<usize>)> = ["q", "k", "v", "o"]
        .iter()
        .flat_map(|p| [(format!("{prefix}.{p}.w"), vec![c, c]), (format!("{prefix}.{p}.b"), vec![c])])
        .collect();
    let shapes: Vec<(&str, &[usize])> = names.iter().map(|(n, s)| (n.as_str(), &s[..])).collect();
    store(&mut rng(seed), &shapes)
}

fn swin_store(seed: u64, prefixes: &[&str], c: usize, hidden: usize) -> ParamStore {
    let mut names: Vec<(String, Vec<usize>)> = Vec::new();
    for p in prefixes {
        for ln in ["ln1", "ln2"] {
            names.push((format!("{p}.{ln}.g"), vec![c]));
            names.push((format!("{p}.{ln}.b"), vec![c]));
        }
        for a in ["q", "k", "v", "o"] {
            names.push((format!("{p}.attn.{a}.w"), vec![c, c]));
            names.push((format!("{p}.attn.{a}.b"), vec![c]));
        }
        names.push((format!("{p}.ffn.fc1.w"), vec![c, hidden]));
        names.push((format!("{p}.ffn.fc1.b"), vec![hidden]));
        names.push((format!("{p}.ffn.fc2.w"), vec![hidden, c]));
        names.push((format!("{p}.ffn.fc2.b"), vec![c]));
    }
    let shapes: Vec<(&str, &[usize])> = names.iter().map(|(n, s)| (n.as_str(), &s[..])).collect();
    store(&mut rng(seed), &shapes)
}

/// `x [n, ci] @ w [ci, co] + b` with plain loops.
fn affine(x: &[f64], n: usize, w: &[f64], b: &[f64], ci: usize, co: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * co];
    for i in 0..n {
        for o in 0..co {
            let mut s = b[o];
            for k in 0..ci {
                s += x[i * ci + k] * w[k * co + o];
            }
            y[i * co + o] = s;
        }
    }
    y
}

fn oracle_attention(s: &ParamStore, q_in: &[f64], kv_in: &[f64], n: usize, m: usize, c: usize, heads: usize) -> Vec<f64> {
    let blk = |n: &str| s.get(n).unwrap().data.clone();
    let q = affine(q_in, n, &blk("a.q.w"), &blk("a.q.b"), c, c);
    let k = affine(kv_in, m, &blk("a.k.w"), &blk("a.k.b"), c, c);
    let v = affine(kv_in, m, &blk("a.v.w"), &blk("a.v.b"), c, c);
    let d = c / heads;
    let mut cat = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|t| q[i * c + h * d + t] * k[j * c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                cat[i * c + h * d + t] = (0..m).map(|j| e[j] / z * v[j * c + h * d + t]).sum();
            }
        }
    }
    affine(&cat, n, &blk("a.o.w"), &blk("a.o.b"), c, c)
}

#[test]
fn single_key_gets_all_the_weight() {
    let s = attn_store(1, "a", 4);
    let mut g = Graph::new(&s);
    let mut r = rng(2);
    let q = g.input(&[5, 4], rand_vec(&mut r, 20, 1.0)).unwrap();
    let kv = g.input(&[1, 4], rand_vec(&mut r, 4, 1.0)).unwrap();
    let a = attention_block(&mut g, "a", q, kv, kv, 2, AttnBias::None).unwrap();
    for p in &a.probs {
        assert!(g.value(*p).iter().all(|&v| v == 1.0));
    }
    // every query returns the projected single value
    let out = g.value(a.out);
    for i in 1..5 {
        for t in 0..4 {
            assert!((out[i * 4 + t] - out[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_get_uniform_weights() {
    let s = attn_store(3, "a", 6);
    let mut g = Graph::new(&s);
    let mut r = rng(4);
    let row = rand_vec(&mut r, 6, 1.0);
    let kv: Vec<f64> = row.iter().cycle().take(6 * 7).cloned().collect();
    let q = g.input(&[3, 6], rand_vec(&mut r, 18, 1.0)).unwrap();
    let kv = g.input(&[7, 6], kv).unwrap();
    let a = attention_block(&mut g, "a", q, kv, kv, 3, AttnBias::None).unwrap();
    for p in &a.probs {
        for &v in g.value(*p) {
            assert!((v - 1.0 / 7.0).abs() < 1e-14);
        }
    }
}

#[test]
fn two_head_attention_matches_loop_oracle() {
    let (n, m, c) = (5, 7, 8);
    let s = attn_store(5, "a", c);
    let mut r = rng(6);
    let qd = rand_vec(&mut r, n * c, 1.0);
    let kd = rand_vec(&mut r, m * c, 1.0);
    let mut g = Graph::new(&s);
    let q = g.input(&[n, c], qd.clone()).unwrap();
    let kv = g.input(&[m, c], kd.clone()).unwrap();
    let a = attention_block(&mut g, "a", q, kv, kv, 2, AttnBias::None).unwrap();
    let want = oracle_attention(&s, &qd, &kd, n, m, c, 2);
    for (x, y) in g.value(a.out).iter().zip(&want) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn heads_must_divide_embedding_dim() {
    let s = attn_store(7, "a", 6);
    let mut g = Graph::new(&s);
    let x = g.input(&[2, 6], vec![0.1; 12]).unwrap();
    let e = attention_block(&mut g, "a", x, x, x, 4, AttnBias::None).unwrap_err();
    assert!(matches!(e, Error::Shape { op: "attention_block", .. }), "{e}");
    assert!(e.to_string().contains("divisible"));
}

#[test]
fn window_covering_the_map_equals_global_attention() {
    let (h, w, c) = (4, 4, 8);
    let s = attn_store(8, "a", c);
    let x = rand_vec(&mut rng(9), h * w * c, 1.0);
    let mut g = Graph::new(&s);
    let xi = g.input(&[h * w, c], x.clone()).unwrap();
    let plan = WindowPlan::new(h, w, 4, true).unwrap();
    assert_eq!(plan.shift, 0, "a single window cannot be shifted");
    let win = window_attention(&mut g, "a", xi, &plan, 2).unwrap();
    let glob = attention_block(&mut g, "a", xi, xi, xi, 2, AttnBias::None).unwrap();
    for (a, b) in g.value(win.out).iter().zip(g.value(glob.out)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn tokens_never_attend_across_windows() {
    let (h, w, c) = (4, 4, 4);
    let s = attn_store(10, "a", c);
    let mut g = Graph::new(&s);
    let xi = g.input(&[h * w, c], rand_vec(&mut rng(11), h * w * c, 1.0)).unwrap();
    let plan = WindowPlan::new(h, w, 2, false).unwrap();
    let a = window_attention(&mut g, "a", xi, &plan, 1).unwrap();
    let dense = plan.dense_attention(g.value(a.probs[0]));
    for i in 0..16 {
        for j in 0..16 {
            let same = (i / 4 / 2, i % 4 / 2) == (j / 4 / 2, j % 4 / 2);
            let p = dense[i * 16 + j];
            if same {
                assert!(p > 0.0);
            } else {
                assert_eq!(p, 0.0, "token {i} attends to {j}");
            }
        }
        let row: f64 = dense[i * 16..(i + 1) * 16].iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shifted_windows_only_join_spatial_neighbours() {
    let (h, w, win, c) = (8, 8, 4, 4);
    let s = attn_store(12, "a", c);
    let mut g = Graph::new(&s);
    let xi = g.input(&[h * w, c], rand_vec(&mut rng(13), h * w * c, 1.0)).unwrap();
    let plan = WindowPlan::new(h, w, win, true).unwrap();
    assert_eq!(plan.shift, 2);
    let a = window_attention(&mut g, "a", xi, &plan, 1).unwrap();
    let dense = plan.dense_attention(g.value(a.probs[0]));
    let n = h * w;
    for i in 0..n {
        for j in 0..n {
            let (ri, ci, rj, cj) = (i / w, i % w, j / w, j % w);
            let roll = |r: usize, e: usize| (r + e - plan.shift) % e / win;
            let same_window = roll(ri, h) == roll(rj, h) && roll(ci, w) == roll(cj, w);
            let close = ri.abs_diff(rj) < win && ci.abs_diff(cj) < win;
            assert_eq!(dense[i * n + j] > 0.0, same_window && close, "pair {i} {j}");
        }
    }
}

#[test]
fn shifted_second_block_changes_the_output() {
    let (h, w, c) = (8, 8, 8);
    let s = swin_store(14, &["b0", "b1"], c, 16);
    let x = rand_vec(&mut rng(15), h * w * c, 1.0);
    let run = |shifted: bool| {
        let mut g = Graph::new(&s);
        let xi = g.input(&[h, w, c], x.clone()).unwrap();
        let y = swin_block(&mut g, "b0", xi, 4, false, 2).unwrap();
        let y = swin_block(&mut g, "b1", y, 4, shifted, 2).unwrap();
        g.value(y).to_vec()
    };
    let (a, b) = (run(true), run(false));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-3, "max difference {diff}");
}

#[test]
fn window_must_divide_the_map() {
    let e = WindowPlan::new(6, 8, 4, false).unwrap_err();
    assert!(e.to_string().contains("windowed_attention"), "{e}");
}

#[test]
fn attention_block_passes_grad_check() {
    let (n, m, c) = (3, 4, 4);
    let mut s = attn_store(16, "a", c);
    let mut r = rng(17);
    s.add("q_in", &[n, c], rand_vec(&mut r, n * c, 1.0)).unwrap();
    s.add("kv_in", &[m, c], rand_vec(&mut r, m * c, 1.0)).unwrap();
    let rep = check(
        &s,
        |g: &mut Graph| {
            let q = g.param_named("q_in")?;
            let kv = g.param_named("kv_in")?;
            let a = attention_block(g, "a", q, kv, kv, 2, AttnBias::None)?;
            weighted_sum(g, a.out)
        },
        1e-4,
    );
    assert_pass("attention", &rep);
}

#[test]
fn shifted_swin_block_passes_grad_check() {
    let (h, w, c) = (4, 4, 4);
    let mut s = swin_store(18, &["b"], c, 8);
    s.add("x", &[h, w, c], rand_vec(&mut rng(19), h * w * c, 1.0)).unwrap();
    let rep = check(
        &s,
        |g: &mut Graph| {
            let x = g.param_named("x")?;
            let y = swin_block(g, "b", x, 2, true, 2)?;
            weighted_sum(g, y)
        },
        1e-4,
    );
    assert_pass("swin", &rep);
}
