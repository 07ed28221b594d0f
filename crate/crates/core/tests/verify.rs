use ossfield::fields::{default_quadrature, FieldSpec, Variant};
use ossfield::stable::{Ecf, StableSpec, StreamKey, sample_isotropic_vector};
use ossfield::verify::*;
use ossfield::{KernelSpec, Operator, QuadratureSpec};
use statrs::function::erf::erfc;

fn ma(quad: QuadratureSpec) -> FieldSpec {
    FieldSpec::new(
        Operator::diagonal(&[2.0, 2.0]).unwrap(),
        Operator::diagonal(&[0.4, 0.6]).unwrap(),
        1.5,
        KernelSpec::sum_powers(&[0.5, 0.5], 1.0).unwrap(),
        Variant::MovingAverage,
        quad,
    )
    .unwrap()
}

fn ecf(re: f64, im: f64, se: f64) -> Ecf {
    Ecf { re, im, se_re: se, se_im: se }
}

#[test]
fn z_score_uses_pooled_error_per_part() {
    let z = z_score(&ecf(0.5, 0.02, 0.03), &ecf(0.45, -0.02, 0.04));
    // pooled SE 0.05: real part 1.0, imaginary part 0.8
    assert!((z - 1.0).abs() < 1e-12);
    let row = EcfRow::against_exponent(vec![vec![1.0]], ecf(0.30, 0.0, 0.01), 1.0);
    assert!((row.z - ((-1f64).exp() - 0.30).abs() / 0.01).abs() < 1e-12);
}

#[test]
fn family_false_alarm_matches_normal_tail() {
    let single = erfc(4.0 / 2f64.sqrt());
    assert!((family_false_alarm(4.0, 1) - single).abs() < 1e-15);
    let forty = 1.0 - (1.0 - single).powi(40);
    assert!((family_false_alarm(4.0, 40) - forty).abs() < 1e-15);
    let t = adjusted_threshold(0.01, 40);
    assert!((family_false_alarm(t, 40) - 0.01).abs() < 1e-10);
}

#[test]
fn report_passes_only_under_threshold() {
    let ok = EcfRow::new(vec![vec![1.0]], ecf(0.5, 0.0, 0.01), ecf(0.5 + 0.039 * 2f64.sqrt(), 0.0, 0.01), None);
    let bad = EcfRow::new(vec![vec![1.0]], ecf(0.5, 0.0, 0.01), ecf(0.5 + 0.041 * 2f64.sqrt(), 0.0, 0.01), None);
    assert!(EcfReport::new("ok", vec![ok.clone()]).pass);
    let rep = EcfReport::new("bad", vec![ok, bad]);
    assert!(!rep.pass);
    assert_eq!(rep.recomputed_z(), rep.rows.iter().map(|r| r.z).collect::<Vec<_>>());
    assert_eq!(rep.threshold, Z_THRESHOLD);
}

#[test]
fn panels_are_seeded_and_normalizable() {
    let a = theta_panel(2, 3, PANEL_SIZE, 5);
    assert_eq!(a, theta_panel(2, 3, PANEL_SIZE, 5));
    assert_ne!(a, theta_panel(2, 3, PANEL_SIZE, 6));
    assert_eq!((a.len(), a[0].len(), a[0][0].len()), (PANEL_SIZE, 3, 2));
    let mut p = a.clone();
    let mut g = vec![8.0; PANEL_SIZE];
    g[1] = 0.0;
    normalize_panel(&mut p, &mut g, 1.5);
    assert!((p[0][0][0] - a[0][0][0] / 4.0).abs() < 1e-15);
    assert_eq!(p[1], a[1]);
    assert_eq!((g[0], g[1]), (1.0, 0.0));
}

#[test]
fn field_panel_has_unit_exponent() {
    let spec = ma(default_quadrature());
    let points = vec![vec![0.3, 0.7], vec![-0.5, 0.2]];
    let panel = field_panel(&spec, &points, 3, 4).unwrap();
    let (grid, _) = ossfield::fields::build_grid(&spec, &points).unwrap();
    for t in &panel {
        let terms: Vec<_> = points.iter().cloned().zip(t.iter().cloned()).collect();
        let g = ossfield::fields::functional_cf_exponent(&spec, &terms, &grid).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
    }
}

#[test]
fn oss_test_accepts_true_scaling_and_rejects_wrong_one() {
    let spec = ma(default_quadrature());
    let points = vec![vec![0.3, 0.7], vec![-0.5, 0.2]];
    let thetas = field_panel(&spec, &points, 6, 1).unwrap();
    let good = oss_mc_test(&spec, 2.0, &points, &thetas, 4000, 11, &OssOptions::default()).unwrap();
    assert!(good.pass, "max |z| = {}", good.max_abs_z);
    assert!(good.rows.iter().all(|r| r.theoretical_exponent.unwrap() > 0.0));
    let control = OssOptions {
        d_override: Some(Operator::diagonal(&[0.6, 0.9]).unwrap()),
    };
    let bad = oss_mc_test(&spec, 2.0, &points, &thetas, 4000, 11, &control).unwrap();
    assert!(!bad.pass, "max |z| = {}", bad.max_abs_z);
    assert!(bad.label.contains("substituted"));
}

#[test]
fn increments_test_accepts_increments_and_rejects_raw_values() {
    let spec = ma(QuadratureSpec::lattice(8.0, 32));
    let points = vec![vec![0.5, 1.0], vec![-1.0, 0.5]];
    let h = [1.0, -0.5];
    let thetas = field_panel(&spec, &points, 6, 2).unwrap();
    let good = stationary_increments_mc_test(&spec, &h, &points, &thetas, 4000, 3, &IncrementOptions::default()).unwrap();
    assert!(good.pass, "max |z| = {}", good.max_abs_z);
    let opts = IncrementOptions { drop_base_point: true };
    let bad = stationary_increments_mc_test(&spec, &h, &points, &thetas, 4000, 3, &opts).unwrap();
    assert!(!bad.pass, "max |z| = {}", bad.max_abs_z);
}

#[test]
fn fullness_verdicts() {
    let spec = StableSpec::new(1.5, 2).unwrap();
    let mut rng = StreamKey::new(4).replicate(0);
    let full: Vec<Vec<f64>> = (0..2000).map(|_| sample_isotropic_vector(&spec, 1.0, &mut rng).unwrap()).collect();
    let dirs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
    let grid = log_grid(0.1, 10.0, 7);
    assert_eq!(properness_test(&full, &dirs, &grid).unwrap().verdict, Fullness::Full);
    let flat: Vec<Vec<f64>> = full.iter().map(|v| vec![v[0], 0.0]).collect();
    match properness_test(&flat, &dirs, &grid).unwrap().verdict {
        Fullness::Suspect { direction } => assert_eq!(direction, vec![0.0, 1.0]),
        other => panic!("{other:?}"),
    }
    assert!(properness_test(&full[..999], &dirs, &grid).is_err());
}

#[test]
fn slopes_with_jordan_block_need_log_correction() {
    let d = Operator::from_rows(&[vec![0.5, 1.0], vec![0.0, 0.5]]).unwrap();
    let rep = norm_bound_slopes(&d, &log_grid(1e-6, 1e-2, 12), &log_grid(1e2, 1e6, 12)).unwrap();
    assert_eq!((rep.log_power_small, rep.log_power_large), (1, 1));
    assert!((rep.slope_small - 0.5).abs() > SLOPE_SLACK);
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn slopes_of_diagonal_operator() {
    let d = Operator::diagonal(&[0.3, 0.8]).unwrap();
    let rep = norm_bound_slopes(&d, &log_grid(1e-6, 1e-2, 9), &log_grid(1e2, 1e6, 9)).unwrap();
    assert!((rep.slope_small - 0.3).abs() < 1e-9 && (rep.slope_large - 0.8).abs() < 1e-9);
    assert!(rep.pass);
    assert!(norm_bound_slopes(&d, &log_grid(1e-3, 1e-2, 9), &log_grid(1e2, 1e6, 9)).is_err());
    assert!(norm_bound_slopes(&d, &log_grid(1e-2, 1e2, 9), &log_grid(1e2, 1e6, 9)).is_err());
}

#[test]
fn log_grid_endpoints() {
    let g = log_grid(1e-3, 1e1, 5);
    assert_eq!(g.len(), 5);
    assert!((g[0] - 1e-3).abs() < 1e-18 && (g[4] - 10.0).abs() < 1e-12 && (g[2] - 0.1).abs() < 1e-15);
}

#[test]
fn lebesgue_scaling_of_sheared_operator() {
    let e = Operator::from_rows(&[vec![1.0, 0.7], vec![-0.3, 1.5]]).unwrap();
    for r in [0.3, 2.5] {
        let rep = lebesgue_scaling_check(&e, r, 40_000, 8).unwrap();
        assert!((rep.exact - r.powf(2.5)).abs() < 1e-12 * rep.exact);
        assert!(rep.det_residual < 1e-12);
        assert!(rep.pass, "{rep:?}");
    }
    let e3 = Operator::diagonal(&[0.5, 1.0, 2.0]).unwrap();
    assert!(lebesgue_scaling_check(&e3, 1.7, 27_000, 1).unwrap().pass);
    assert!(lebesgue_scaling_check(&e, 0.0, 100, 1).is_err());
}
