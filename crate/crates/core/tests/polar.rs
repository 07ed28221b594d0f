use ossfield::linops::Operator;
use ossfield::polar::{apply_pow, decompose, radial_norm, tau, tau_sandwich_check, triangle_constant, Polar, TauCache};
use ossfield::Error;
use proptest::prelude::*;

fn test_operators() -> Vec<Operator> {
    vec![
        Operator::identity(2),
        Operator::diagonal(&[2.0, 10.0 / 3.0]).unwrap(),
        Operator::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap(),
        Operator::from_rows(&[vec![2.0, 1.0], vec![-1.0, 2.0]]).unwrap(),
    ]
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn closed_forms() {
    let e = Operator::diagonal(&[2.0, 2.0]).unwrap();
    for x in [[2.0, 0.0], [0.3, -4.0], [1e-3, 2e-3], [500.0, 20.0]] {
        let want = (norm(&x) / 2.0).sqrt();
        assert!(rel(tau(&e, &x).unwrap(), want) < 1e-10, "x = {x:?}");
    }
    assert!(rel(radial_norm(&e, &[2.0, 0.0]).unwrap(), 1.0) < 1e-12);
    assert!(rel(tau(&Operator::identity(3), &[1.0, 2.0, 2.0]).unwrap(), 3.0) < 1e-12);
}

#[test]
fn direction_lies_on_unit_sphere() {
    for e in test_operators() {
        let p = decompose(&e, &[0.7, -1.9]).unwrap();
        assert!((radial_norm(&e, &p.direction).unwrap() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn triangle_constant_values() {
    let c = triangle_constant(&Operator::identity(2), 400, 3).unwrap();
    assert!(c <= 1.0 + 1e-9 && c > 0.99);
    // x = y = (2, 0) under diag(2, 2): √2 / 2
    let e = Operator::diagonal(&[2.0, 2.0]).unwrap();
    let ratio = tau(&e, &[4.0, 0.0]).unwrap() / (2.0 * tau(&e, &[2.0, 0.0]).unwrap());
    assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
    assert!(triangle_constant(&e, 400, 3).unwrap() >= ratio - 1e-12);
}

#[test]
fn sandwich_is_bounded() {
    let (lo, hi) = tau_sandwich_check(&[0.5, 0.5], 2000, 9).unwrap();
    assert!(lo > 0.0 && hi.is_finite() && lo <= std::f64::consts::FRAC_1_SQRT_2 && hi >= lo);
    let e = Operator::diagonal(&[2.0, 2.0]).unwrap();
    let ratio = tau(&e, &[2.0, 0.0]).unwrap() / 2f64.sqrt();
    assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
    // exact homogeneity along an eigendirection
    let e = Operator::diagonal(&[2.0, 4.0]).unwrap();
    let base = tau(&e, &[1.0, 0.0]).unwrap();
    for x1 in [1e-3, 0.2, 5.0, 1e3] {
        assert!(rel(tau(&e, &[x1, 0.0]).unwrap() / x1.powf(0.5), base) < 1e-9);
    }
}

#[test]
fn limits_along_rays() {
    let e = Operator::from_rows(&[vec![2.0, 1.0], vec![-1.0, 2.0]]).unwrap();
    let polar = Polar::new(&e).unwrap();
    for k in 0..16 {
        let t = k as f64 * 0.39;
        let dir = [t.cos(), t.sin()];
        let taus: Vec<f64> = (-6..=6)
            .map(|p| {
                let s = 10f64.powi(p);
                polar.tau(&[dir[0] * s, dir[1] * s]).unwrap()
            })
            .collect();
        assert!(taus.windows(2).all(|w| w[1] > w[0]));
        assert!(taus[0] < 1e-2 && taus[12] > 1e2);
    }
}

#[test]
fn errors() {
    let e = Operator::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    assert!(matches!(Polar::new(&e), Err(Error::NotInQ(_))));
    assert_eq!(decompose(&Operator::identity(2), &[0.0, 0.0]), Err(Error::ZeroPoint));
    assert!(matches!(tau(&Operator::identity(2), &[1.0]), Err(Error::Dimension { .. })));
}

#[test]
fn cache_is_transparent() {
    let e = Operator::diagonal(&[2.0, 10.0 / 3.0]).unwrap();
    let polar = Polar::new(&e).unwrap();
    let cache = TauCache::new();
    for x in [[0.1, 0.2], [3.0, -1.0], [0.1, 0.2]] {
        assert_eq!(cache.tau(&polar, &x).unwrap().to_bits(), polar.tau(&x).unwrap().to_bits());
    }
    assert_eq!(cache.len(), 2);
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    (0.0f64..std::f64::consts::TAU, -3.0f64..3.0).prop_map(|(t, p)| {
        let s = 10f64.powf(p);
        vec![s * t.cos(), s * t.sin()]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reconstruction_and_scaling(x in point(), which in 0usize..4, r in prop::sample::select(vec![1e-3, 0.5, 1.0, 2.0, 1e3])) {
        let e = &test_operators()[which];
        let polar = Polar::new(e).unwrap();
        let p = polar.decompose(&x).unwrap();
        let back = apply_pow(p.tau, e, &p.direction).unwrap();
        let err: f64 = back.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8 * norm(&x));
        let scaled = polar.tau(&apply_pow(r, e, &x).unwrap()).unwrap();
        prop_assert!(rel(scaled, r * p.tau) < 1e-8);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!(rel(polar.tau(&neg).unwrap(), p.tau) < 1e-10);
    }

    #[test]
    fn direction_norm_is_bounded(x in point(), which in 0usize..4) {
        let e = &test_operators()[which];
        let l = decompose(e, &x).unwrap().direction;
        let n = norm(&l);
        prop_assert!(n > 0.05 && n < 20.0);
    }
}
