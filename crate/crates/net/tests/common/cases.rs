use std::sync::Arc;

use satmap_core::bevgeom::SparseGather;
use satmap_net::tape::{Graph, Var};
use satmap_net::Result;

use super::{rand_vec, rng, weighted_sum};

pub type Case = (&'static str, Vec<(&'static str, Vec<usize>)>, Box<dyn Fn(&mut Graph) -> Result<Var>>);

fn p(g: &mut Graph, n: &str) -> Var {
    g.param_named(n).unwrap()
}

pub fn cases() -> Vec<Case> {
    let mut r = rng(7);
    let gather = Arc::new(SparseGather {
        out_rows: 4,
        in_rows: 5,
        entries: vec![(0, 1, 0.5), (0, 4, -1.5), (1, 0, 2.0), (3, 1, 0.25), (3, 3, 1.0), (3, 1, 0.75)],
    });
    let centers = Arc::new((0..7).map(|i| [i as f64 * 0.13, 1.0 - i as f64 * 0.11]).collect::<Vec<_>>());
    let cst = Arc::new(rand_vec(&mut r, 12, 2.0));
    let mut mask = vec![0.0; 15];
    mask[2] = f64::NEG_INFINITY;
    mask[8] = f64::NEG_INFINITY;
    let v = |v: &[usize]| v.to_vec();
    vec![
        ("conv2d", vec![("x", v(&[5, 6, 3])), ("w", v(&[3, 3, 3, 4])), ("b", v(&[4]))], Box::new(|g| {
            let (x, w, b) = (p(g, "x"), p(g, "w"), p(g, "b"));
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            let z = g.conv2d(x, w, None, 1, 0)?;
            let a = weighted_sum(g, y)?;
            let c = weighted_sum(g, z)?;
            g.add(a, c)
        })),
        ("linear", vec![("x", v(&[2, 4, 5])), ("w", v(&[5, 3])), ("b", v(&[3]))], Box::new(|g| {
            let (x, w, b) = (p(g, "x"), p(g, "w"), p(g, "b"));
            let y = g.linear(x, w, Some(b))?;
            weighted_sum(g, y)
        })),
        ("matmul", vec![("a", v(&[2, 3, 4])), ("b", v(&[2, 4, 5])), ("bt", v(&[2, 5, 4]))], Box::new(|g| {
            let (a, b, bt) = (p(g, "a"), p(g, "b"), p(g, "bt"));
            let y = g.matmul(a, b, false)?;
            let z = g.matmul(a, bt, true)?;
            let y = g.concat_last(&[y, z])?;
            weighted_sum(g, y)
        })),
        ("add", vec![("a", v(&[3, 4])), ("b", v(&[3, 4]))], Box::new(|g| {
            let (a, b) = (p(g, "a"), p(g, "b"));
            let y = g.add(a, b)?;
            weighted_sum(g, y)
        })),
        ("sub", vec![("a", v(&[3, 4])), ("b", v(&[3, 4]))], Box::new(|g| {
            let (a, b) = (p(g, "a"), p(g, "b"));
            let y = g.sub(a, b)?;
            weighted_sum(g, y)
        })),
        ("mul", vec![("a", v(&[3, 4])), ("b", v(&[3, 4]))], Box::new(|g| {
            let (a, b) = (p(g, "a"), p(g, "b"));
            let y = g.mul(a, b)?;
            weighted_sum(g, y)
        })),
        ("add_bias", vec![("x", v(&[2, 3, 4])), ("b", v(&[4]))], Box::new(|g| {
            let (x, b) = (p(g, "x"), p(g, "b"));
            let y = g.add_bias(x, b)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y)
        })),
        ("add_const", vec![("x", v(&[3, 5]))], Box::new(move |g| {
            let x = p(g, "x");
            let y = g.add_const(x, &mask)?;
            let y = g.softmax(y);
            weighted_sum(g, y)
        })),
        ("mul_const", vec![("x", v(&[3, 4]))], Box::new(move |g| {
            let x = p(g, "x");
            let y = g.mul_const(x, cst.clone())?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y)
        })),
        ("scale", vec![("x", v(&[6]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.scale(x, -2.5);
            let y = g.sigmoid(y);
            weighted_sum(g, y)
        })),
        ("layer_norm", vec![("x", v(&[4, 6])), ("g", v(&[6])), ("b", v(&[6]))], Box::new(|g| {
            let (x, gg, b) = (p(g, "x"), p(g, "g"), p(g, "b"));
            let y = g.layer_norm(x, gg, b)?;
            weighted_sum(g, y)
        })),
        ("softmax", vec![("x", v(&[3, 5]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.softmax(x);
            weighted_sum(g, y)
        })),
        ("silu", vec![("x", v(&[8]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.silu(x);
            weighted_sum(g, y)
        })),
        ("sigmoid", vec![("x", v(&[8]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.sigmoid(x);
            weighted_sum(g, y)
        })),
        ("upsample", vec![("x", v(&[2, 3, 4]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.upsample(x, 2, 3)?;
            weighted_sum(g, y)
        })),
        ("concat_last", vec![("a", v(&[3, 2])), ("b", v(&[3, 4]))], Box::new(|g| {
            let (a, b) = (p(g, "a"), p(g, "b"));
            let y = g.concat_last(&[a, b, a])?;
            weighted_sum(g, y)
        })),
        ("concat_rows", vec![("a", v(&[2, 3])), ("b", v(&[4, 3]))], Box::new(|g| {
            let (a, b) = (p(g, "a"), p(g, "b"));
            let y = g.concat_rows(&[b, a])?;
            weighted_sum(g, y)
        })),
        ("slice_last", vec![("x", v(&[3, 6]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.slice_last(x, 2, 3)?;
            weighted_sum(g, y)
        })),
        ("slice_rows", vec![("x", v(&[5, 2]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.slice_rows(x, 1, 3)?;
            weighted_sum(g, y)
        })),
        ("reshape", vec![("x", v(&[2, 6]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.reshape(x, &[3, 4])?;
            let y = g.softmax(y);
            weighted_sum(g, y)
        })),
        ("sparse", vec![("x", v(&[5, 3]))], Box::new(move |g| {
            let x = p(g, "x");
            let y = g.sparse(x, gather.clone())?;
            weighted_sum(g, y)
        })),
        ("gauss_prior", vec![("p", v(&[5, 2]))], Box::new(move |g| {
            let x = p(g, "p");
            let y = g.gauss_prior(x, centers.clone(), 3.0, 0.7)?;
            weighted_sum(g, y)
        })),
        ("sum", vec![("x", v(&[7]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        })),
        ("mean", vec![("x", v(&[7]))], Box::new(|g| {
            let x = p(g, "x");
            let y = g.silu(x);
            Ok(g.mean(y))
        })),
        ("external", vec![("x", v(&[6]))], Box::new(|g| {
            let x = p(g, "x");
            let vals = g.value(x).to_vec();
            let f: f64 = vals.iter().map(|v| v.sin()).sum();
            let d: Vec<f64> = vals.iter().map(|v| v.cos()).collect();
            let y = g.external(&[x], f, vec![d])?;
            let y = g.scale(y, 3.0);
            Ok(g.sum(y))
        })),
    ]
}
