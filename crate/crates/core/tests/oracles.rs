//! Library results checked against small independent reimplementations.

use orthodiff_core::autograd::{Activation, Graph};
use orthodiff_core::diffusion::cross_attention;
use orthodiff_core::disentangle::{decouple, mean_feature_set, DecoupleConfig, DecoupleMode, Factor, NuisanceFeatureSet, Origin};
use orthodiff_core::feature::{LayerFeatureSet, TAPS};
use orthodiff_core::nn::{Mlp, MlpConfig, ParamStore, Tag};
use orthodiff_core::rng;
use orthodiff_core::Tensor;

fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn attention_oracle(h: &Tensor, c: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Vec<Vec<f64>> {
    let q = matmul(&rows(h), &rows(wq));
    let k = matmul(&rows(c), &rows(wk));
    let v = matmul(&rows(c), &rows(wv));
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|col| e.iter().zip(&v).map(|(w, vr)| w / z * vr[col]).sum()).collect()
        })
        .collect()
}

#[test]
fn cross_attention_matches_hand_computation() {
    // N = 2 queries, M = 3 tokens, d = 4
    let h = mat(2, 4, &[1.0, 0.0, -1.0, 0.5, 0.2, 0.3, 0.1, -0.4]);
    let c = mat(3, 4, &[0.5, -0.5, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, -1.0, 0.2, 0.3, 0.4]);
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let w = mat(4, 4, &eye);

    // with identity projections the first query's scores are h₀·c_j / 2 = [-0.25, 0.25, -0.55]
    let out = cross_attention(&h, &c, &w, &w, &w).unwrap();
    let s = [-0.25f64, 0.25, -0.55];
    let z: f64 = s.iter().map(|x| x.exp()).sum();
    let p: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
    let c_rows = rows(&c);
    for col in 0..4 {
        let want: f64 = (0..3).map(|j| p[j] * c_rows[j][col]).sum();
        assert!((out.data()[col] - want).abs() < 1e-14);
    }

    let mut r = rng::seeded(11);
    let mut rnd = |n: usize, m: usize| mat(n, m, &(0..n * m).map(|_| rng::normal(&mut r)).collect::<Vec<_>>());
    let (wq, wk, wv) = (rnd(4, 4), rnd(4, 4), rnd(4, 4));
    let got = rows(&cross_attention(&h, &c, &wq, &wk, &wv).unwrap());
    let want = attention_oracle(&h, &c, &wq, &wk, &wv);
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn attention_rows_are_convex_combinations_of_values() {
    // a single token makes every row equal to that token's value
    let h = mat(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.5, 0.2]);
    let c = mat(1, 4, &[0.3, -0.7, 0.1, 0.9]);
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let w = mat(4, 4, &eye);
    let out = cross_attention(&h, &c, &w, &w, &w).unwrap();
    for row in rows(&out) {
        for (a, b) in row.iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn mlp_forward_matches_naive_loops() {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(3);
    let cfg = MlpConfig { dims: vec![6, 9, 5, 4], activation: Activation::Silu, dropout: 0.3, bias: true };
    let mlp = Mlp::new(&mut store, "m", &cfg, Tag::Backbone, &mut r).unwrap();
    for l in &mlp.layers {
        let b = l.bias.unwrap();
        let t = store.get(b).map(|_| 0.1 * rng::normal(&mut r));
        store.set(b, t).unwrap();
    }
    let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();

    let mut g = Graph::inference();
    let xv = g.constant(Tensor::vector(&x));
    let y = mlp.forward(&mut g, &store, xv).unwrap();
    let got = g.value(y).data().to_vec();

    let silu = |v: f64| v / (1.0 + (-v).exp());
    let mut h = x;
    for (i, l) in mlp.layers.iter().enumerate() {
        let w = store.get(l.weight);
        let b = store.get(l.bias.unwrap());
        let mut out = b.data().to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            *o += (0..l.in_dim).map(|k| h[k] * w.data()[k * l.out_dim + j]).sum::<f64>();
        }
        if i + 1 < mlp.layers.len() {
            out.iter_mut().for_each(|v| *v = silu(*v));
        }
        h = out;
    }
    assert_eq!(got.len(), 4);
    for (a, b) in got.iter().zip(&h) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn feature_set(r: &mut rng::Rng, d: usize) -> LayerFeatureSet {
    let rows: Vec<Vec<f64>> = (0..TAPS).map(|_| (0..d).map(|_| rng::normal(r)).collect()).collect();
    LayerFeatureSet::from_rows(&rows).unwrap()
}

#[test]
fn ground_truth_mean_matches_naive_average() {
    let mut r = rng::seeded(5);
    let sets: Vec<LayerFeatureSet> = (0..3).map(|_| feature_set(&mut r, 7)).collect();
    let mean = mean_feature_set(&sets).unwrap();
    for l in 0..TAPS {
        for i in 0..7 {
            let want = (sets[0].layer(l)[i] + sets[1].layer(l)[i] + sets[2].layer(l)[i]) / 3.0;
            assert!((mean.layer(l)[i] - want).abs() < 1e-15);
        }
    }
    assert!(mean_feature_set(&[]).is_err());
}

/// Residual of `f` after least-squares regression on `p` and `b` (2×2 normal equations).
fn residual_oracle(f: &[f64], p: &[f64], b: &[f64]) -> Vec<f64> {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, c)| a * c).sum::<f64>();
    let (pp, pb, bb) = (dot(p, p), dot(p, b), dot(b, b));
    let (fp, fb) = (dot(f, p), dot(f, b));
    let det = pp * bb - pb * pb;
    let alpha = (fp * bb - fb * pb) / det;
    let beta = (fb * pp - fp * pb) / det;
    f.iter().zip(p).zip(b).map(|((x, u), v)| x - alpha * u - beta * v).collect()
}

#[test]
fn joint_decoupling_equals_least_squares_residual() {
    let mut r = rng::seeded(8);
    let cfg = DecoupleConfig { mode: DecoupleMode::Joint, ..Default::default() };
    for _ in 0..50 {
        let (f, p, b) = (feature_set(&mut r, 12), feature_set(&mut r, 12), feature_set(&mut r, 12));
        let pn = NuisanceFeatureSet { factor: Factor::Pose, origin: Origin::Predicted, features: p.clone() };
        let bn = NuisanceFeatureSet { factor: Factor::Background, origin: Origin::Predicted, features: b.clone() };
        let out = decouple(&f, Some(&pn), Some(&bn), &cfg).unwrap();
        for l in 0..TAPS {
            let want = residual_oracle(f.layer(l), p.layer(l), b.layer(l));
            for (a, w) in out.layer(l).iter().zip(&want) {
                assert!((a - w).abs() < 1e-10, "{a} vs {w}");
            }
        }
    }
}
