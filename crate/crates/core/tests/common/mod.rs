//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stpc::nn::{Activation, Linear, Mlp, ParamStore, LEAKY_SLOPE};
use stpc::stpc::{SlotConv, StpcLayerParams};
use stpc::tape::COSINE_EPS;
use stpc::{NeighborIndex, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

/// Cloud with repeated points and points on a coarse lattice, so equal
/// distances are common.
pub fn cloud_with_ties(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(n);
    for _ in 0..n {
        let p = if !pts.is_empty() && rng.gen_bool(0.2) {
            pts[rng.gen_range(0..pts.len())]
        } else {
            [
                rng.gen_range(-3..=3) as f64,
                rng.gen_range(-3..=3) as f64,
                rng.gen_range(-1..=1) as f64,
            ]
        };
        pts.push(p);
    }
    pts
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Overwrites every parameter (biases included) with uniform noise.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in store.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-scale..scale));
    }
}

/// Full sort of every other point by (squared distance, index), self first.
pub fn naive_knn(coords: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut others: Vec<(f64, usize)> = coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), j))
                .collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            std::iter::once(i).chain(others.into_iter().map(|(_, j)| j)).take(k).collect()
        })
        .collect()
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight).tensor.data();
    let b = store.get(l.bias).tensor.data();
    (0..l.outputs)
        .map(|o| b[o] + (0..l.inputs).map(|i| x[i] * w[i * l.outputs + o]).sum::<f64>())
        .collect()
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = linear(store, &m.hidden, x);
    if m.activation == Activation::LeakyRelu {
        h.iter_mut().for_each(|v| *v = leaky(*v));
    }
    linear(store, &m.output, &h)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(COSINE_EPS)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `x̃[i][m][c] = Σ_k α[i][k][m] · f[i][k][c]`, three nested loops.
pub fn transform(alpha: &[Vec<Vec<f64>>], feats: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    alpha
        .iter()
        .zip(feats)
        .map(|(a_i, f_i)| {
            let m = a_i[0].len();
            let c = f_i[0].len();
            let mut out = vec![vec![0.0; c]; m];
            for (a_k, f_k) in a_i.iter().zip(f_i) {
                for mm in 0..m {
                    for cc in 0..c {
                        out[mm][cc] += a_k[mm] * f_k[cc];
                    }
                }
            }
            out
        })
        .collect()
}

/// `out_i = Σ_m W_m x̃_{i,m} + b`, with `W_m` read from the stacked weight.
pub fn conv(store: &ParamStore, conv: &SlotConv, slots: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let w = store.get(conv.weight).tensor.data();
    let b = store.get(conv.bias).tensor.data();
    let (cf, co) = (conv.channels, conv.outputs);
    slots
        .iter()
        .map(|x| {
            let mut out = b.to_vec();
            for (m, xm) in x.iter().enumerate() {
                for (c, v) in xm.iter().enumerate() {
                    for (o, acc) in out.iter_mut().enumerate() {
                        *acc += w[(m * cf + c) * co + o] * v;
                    }
                }
            }
            out
        })
        .collect()
}

/// Everything one layer computes, by hand.
pub struct LayerTrace {
    pub atoms: Vec<Vec<f64>>,
    /// `[N][K][M]`
    pub pre: Vec<Vec<Vec<f64>>>,
    pub alpha: Vec<Vec<Vec<f64>>>,
    /// `F_f` output per neighbor, `[N][K][C_f]`
    pub feats: Vec<Vec<Vec<f64>>>,
    pub slots: Vec<Vec<Vec<f64>>>,
    pub out: Vec<Vec<f64>>,
}

pub fn layer(
    store: &ParamStore,
    l: &StpcLayerParams,
    coords: &[[f64; 3]],
    features: Option<&[Vec<f64>]>,
    nbr: &NeighborIndex,
    previous_atoms: &[Vec<f64>],
) -> LayerTrace {
    let atoms: Vec<Vec<f64>> = previous_atoms.iter().map(|a| mlp(store, &l.update_map, a)).collect();
    let mut pre = vec![];
    let mut alpha = vec![];
    let mut feats = vec![];
    for i in 0..coords.len() {
        let mut pre_i = vec![];
        let mut alpha_i = vec![];
        let mut feats_i = vec![];
        for &j in nbr.row(i) {
            let off: Vec<f64> = (0..3).map(|d| coords[i][d] - coords[j][d]).collect();
            let d = mlp(store, &l.spatial_map, &off);
            let sims: Vec<f64> = atoms.iter().map(|a| cosine(&d, a)).collect();
            let p = softmax(&sims);
            alpha_i.push(p.iter().map(|&v| if v >= l.tau { v } else { 0.0 }).collect());
            pre_i.push(p);
            let mut input = if l.relative_coords { off } else { coords[j].to_vec() };
            if let Some(f) = features {
                input.extend_from_slice(&f[j]);
            }
            feats_i.push(mlp(store, &l.feature_map, &input));
        }
        pre.push(pre_i);
        alpha.push(alpha_i);
        feats.push(feats_i);
    }
    let slots = transform(&alpha, &feats);
    let out = conv(store, &l.conv, &slots);
    LayerTrace {
        atoms,
        pre,
        alpha,
        feats,
        slots,
        out,
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[f64]) -> f64 {
    a.iter().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_diff3(a: &[Vec<Vec<f64>>], b: &[f64]) -> f64 {
    a.iter().flatten().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
