use orthodiff_core::disentangle::{decouple, project_out, DecoupleConfig, DecoupleMode, Factor, NuisanceFeatureSet, Origin};
use orthodiff_core::feature::{LayerFeatureSet, TAPS};
use proptest::prelude::*;

const EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn pair(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-10.0..10.0f64, dim), prop::collection::vec(-10.0..10.0f64, dim))
        .prop_filter("non-degenerate u", |(_, u)| dot(u, u) > 1e-6)
}

fn triple(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-10.0..10.0f64, dim),
        prop::collection::vec(-10.0..10.0f64, dim),
        prop::collection::vec(-10.0..10.0f64, dim),
    )
}

fn nuisance(factor: Factor, v: &[f64]) -> NuisanceFeatureSet {
    let rows: Vec<Vec<f64>> = (0..TAPS).map(|_| v.to_vec()).collect();
    NuisanceFeatureSet { factor, origin: Origin::Predicted, features: LayerFeatureSet::from_rows(&rows).unwrap() }
}

fn main_set(v: &[f64]) -> LayerFeatureSet {
    let rows: Vec<Vec<f64>> = (0..TAPS).map(|_| v.to_vec()).collect();
    LayerFeatureSet::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn result_is_orthogonal_to_direction((v, u) in pair(16)) {
        let w = project_out(&v, &u, EPS).unwrap();
        prop_assert!(dot(&w, &u).abs() <= 1e-9 * norm(&v).max(1.0) * norm(&u));
    }

    #[test]
    fn idempotent((v, u) in pair(16)) {
        let once = project_out(&v, &u, EPS).unwrap();
        let twice = project_out(&once, &u, EPS).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-9 * norm(&v).max(1.0));
        }
    }

    #[test]
    fn pythagoras_and_norm_bound((v, u) in pair(12)) {
        let w = project_out(&v, &u, EPS).unwrap();
        let c = dot(&v, &u) / dot(&u, &u);
        let along: f64 = u.iter().map(|x| (c * x).powi(2)).sum();
        prop_assert!((dot(&w, &w) + along - dot(&v, &v)).abs() <= 1e-9 * dot(&v, &v).max(1.0));
        prop_assert!(norm(&w) <= norm(&v) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn invariant_to_direction_scale((v, u) in pair(10), s in prop_oneof![-1e3..-1e-3f64, 1e-3..1e3f64]) {
        let us: Vec<f64> = u.iter().map(|x| x * s).collect();
        let a = project_out(&v, &u, EPS).unwrap();
        let b = project_out(&v, &us, EPS).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-8 * norm(&v).max(1.0));
        }
    }

    #[test]
    fn linear_in_v((v, u) in pair(10), w in prop::collection::vec(-10.0..10.0f64, 10), a in -5.0..5.0f64, b in -5.0..5.0f64) {
        let combo: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let lhs = project_out(&combo, &u, EPS).unwrap();
        let pv = project_out(&v, &u, EPS).unwrap();
        let pw = project_out(&w, &u, EPS).unwrap();
        for i in 0..10 {
            prop_assert!((lhs[i] - (a * pv[i] + b * pw[i])).abs() <= 1e-8 * (1.0 + norm(&combo)));
        }
    }

    #[test]
    fn joint_orthogonal_to_both_small((f, p, b) in triple(8)) {
        check_joint(&f, &p, &b)?;
    }

    #[test]
    fn joint_orthogonal_to_both_mid((f, p, b) in triple(64)) {
        check_joint(&f, &p, &b)?;
    }

    #[test]
    fn sequential_matches_definition((f, p, b) in triple(16)) {
        let cfg = DecoupleConfig { mode: DecoupleMode::Sequential, eps: 1e-12 };
        let out = decouple(&main_set(&f), Some(&nuisance(Factor::Pose, &p)), Some(&nuisance(Factor::Background, &b)), &cfg).unwrap();
        let thr = 1e-12 * 16.0;
        let expect = project_out(&project_out(&f, &p, thr).unwrap(), &b, thr).unwrap();
        prop_assert!(dot(out.layer(0), &b).abs() <= 1e-8 * norm(&f).max(1.0) * norm(&b).max(1.0));
        for (x, y) in out.layer(0).iter().zip(&expect) {
            prop_assert!((x - y).abs() <= 1e-12 * norm(&f).max(1.0));
        }
    }
}

fn check_joint(f: &[f64], p: &[f64], b: &[f64]) -> Result<(), TestCaseError> {
    let cfg = DecoupleConfig { mode: DecoupleMode::Joint, eps: 1e-12 };
    let out = decouple(&main_set(f), Some(&nuisance(Factor::Pose, p)), Some(&nuisance(Factor::Background, b)), &cfg).unwrap();
    for l in 0..TAPS {
        let d = out.layer(l);
        let tol = 1e-9 * norm(f).max(1.0);
        prop_assert!(dot(d, p).abs() <= tol * norm(p).max(1.0));
        prop_assert!(dot(d, b).abs() <= tol * norm(b).max(1.0));
    }
    Ok(())
}

#[test]
fn joint_orthogonal_at_wide_dimension() {
    use orthodiff_core::rng;
    let mut r = rng::seeded(768);
    for _ in 0..20 {
        let mut v = || (0..768).map(|_| rng::normal(&mut r)).collect::<Vec<f64>>();
        let (f, p, b) = (v(), v(), v());
        check_joint(&f, &p, &b).unwrap();
    }
}

#[test]
fn nearly_collinear_factors_still_orthogonal() {
    let p = vec![1.0, 0.0, 0.0, 0.0];
    let b = vec![1.0, 1e-5, 0.0, 0.0];
    let f = vec![0.3, 0.7, -1.1, 2.0];
    check_joint(&f, &p, &b).unwrap();
}
