//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use egovos::archive::ParamStore;
use egovos::autograd::{Graph, Var};
use egovos::nn::{Session, Trainable};
use egovos::{MaskMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Scalar `sum(R * x)` with a fixed random `R`, so every output element
/// contributes to the checked gradient.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> egovos::Result<Var> {
    let n = g.value(x).len();
    let flat = g.reshape(x, &[1, n])?;
    let r = g.constant(random_tensor(&[n, 1], seed));
    g.matmul(flat, r, false, false)
}

/// Elementwise relative error with a floor on the denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Largest relative error between backprop and central differences
/// (`eps`) over up to `per_param` entries of each named parameter.
pub fn max_param_grad_error(
    params: &ParamStore,
    names: &[String],
    eps: f64,
    per_param: usize,
    build: impl Fn(&mut Session) -> egovos::Result<Var>,
) -> f64 {
    let mut sess = Session::new(params, Trainable::AllExcept(vec![]));
    let root = build(&mut sess).unwrap();
    let mut grads = sess.graph.backward(root).unwrap();
    let bound: Vec<(String, Var)> = sess.trainable_vars().map(|(n, v)| (n.to_string(), v)).collect();
    let eval = |store: &ParamStore| {
        let mut s = Session::inference(store);
        let r = build(&mut s).unwrap();
        s.graph.value(r).data()[0]
    };
    let mut worst = 0.0f64;
    for name in names {
        let var = bound.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name} unused")).1;
        let analytic = grads.take(var).unwrap_or_else(|| panic!("no gradient for {name}"));
        let base = params.get(name).unwrap().as_ref().clone();
        let stride = (base.len() / per_param).max(1);
        for idx in (0..base.len()).step_by(stride).take(per_param) {
            let mut store = params.clone();
            let mut plus = base.clone();
            plus.data_mut()[idx] += eps;
            store.set(name, plus).unwrap();
            let fp = eval(&store);
            let mut minus = base.clone();
            minus.data_mut()[idx] -= eps;
            store.set(name, minus).unwrap();
            let fm = eval(&store);
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[idx], numeric));
        }
    }
    worst
}

/// Gradient of a scalar function of one free tensor.
pub fn max_input_grad_error(x: &Tensor, eps: f64, build: impl Fn(&mut Graph, Var) -> egovos::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = g.param(Arc::new(x.clone()));
    let root = build(&mut g, v).unwrap();
    let grads = g.backward(root).unwrap();
    let analytic = grads.get(v).unwrap().clone();
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let r = build(&mut g, v).unwrap();
        g.value(r).data()[0]
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += eps;
        let mut m = x.clone();
        m.data_mut()[i] -= eps;
        let numeric = (eval(p) - eval(m)) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Random label map with `n` objects drawn as rectangles.
pub fn random_mask(h: usize, w: usize, n: usize, seed: u64) -> MaskMap {
    let mut r = rng(seed);
    let mut labels = vec![0u8; h * w];
    for obj in 1..=n {
        for _ in 0..r.random_range(1..=3) {
            let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
            let (y1, x1) = (r.random_range(y0..h) + 1, r.random_range(x0..w) + 1);
            for y in y0..y1 {
                for x in x0..x1 {
                    labels[y * w + x] = obj as u8;
                }
            }
        }
    }
    MaskMap::new(h, w, labels, n).unwrap()
}

/// Jaccard by explicit counting.
pub fn jaccard_oracle(p: &MaskMap, g: &MaskMap, obj: u8) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for y in 0..g.height() {
        for x in 0..g.width() {
            let a = p.get(y, x) == obj;
            let b = g.get(y, x) == obj;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn boundary_points(m: &MaskMap, obj: u8) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize) == obj;
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if at(y, x) && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|&(a, b)| !at(a, b)) {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// Boundary F from exact Euclidean distances between boundary pixels.
pub fn boundary_f_oracle(p: &MaskMap, g: &MaskMap, obj: u8, tol: usize) -> f64 {
    let bp = boundary_points(p, obj);
    let bg = boundary_points(g, obj);
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let t2 = (tol * tol) as i64;
    let within = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        a.iter()
            .filter(|&&(y, x)| b.iter().any(|&(v, u)| (y - v).pow(2) + (x - u).pow(2) <= t2))
            .count() as f64
            / a.len() as f64
    };
    let precision = within(&bp, &bg);
    let recall = within(&bg, &bp);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Dense memory read: softmax over all memory locations of the scaled
/// dot product, then a weighted sum of values. Returns (readout, affinity)
/// as nested vectors: readout[c][q], affinity[q][m].
pub fn dense_read_oracle(query: &Tensor, keys: &[Tensor], values: &[Tensor]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ck = query.shape()[0];
    let hw = query.shape()[1];
    let mut mem_k: Vec<Vec<f64>> = Vec::new(); // per memory location, Ck vector
    let mut mem_v: Vec<Vec<f64>> = Vec::new(); // per memory location, value vector
    for (k, v) in keys.iter().zip(values) {
        let m = k.shape()[1];
        let cv = v.shape()[0];
        for j in 0..m {
            mem_k.push((0..ck).map(|c| k.data()[c * m + j]).collect());
            mem_v.push((0..cv).map(|c| v.data()[c * m + j]).collect());
        }
    }
    let cv = mem_v[0].len();
    let scale = 1.0 / (ck as f64).sqrt();
    let mut readout = vec![vec![0.0; hw]; cv];
    let mut affinity = Vec::with_capacity(hw);
    for q in 0..hw {
        let s: Vec<f64> = mem_k
            .iter()
            .map(|k| (0..ck).map(|c| query.data()[c * hw + q] * k[c]).sum::<f64>() * scale)
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / z).collect();
        for c in 0..cv {
            readout[c][q] = a.iter().zip(&mem_v).map(|(w, v)| w * v[c]).sum();
        }
        affinity.push(a);
    }
    (readout, affinity)
}
