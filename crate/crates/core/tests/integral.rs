use nalgebra::DMatrix;
use ossfield::integral::*;
use ossfield::linops::Operator;
use ossfield::stable::StreamKey;
use proptest::prelude::*;

fn unit_square(d: usize) -> MatrixField {
    MatrixField::real(d, 2, move |u| {
        let inside = u.iter().all(|v| (0.0..=1.0).contains(v));
        Ok(DMatrix::identity(2, 2) * if inside { 1.0 } else { 0.0 })
    })
}

#[test]
fn shell_volume_scales_with_trace() {
    let e = Operator::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.5]]).unwrap();
    let a = Grid::shells(&e, 1.0, 6, 2, 16).unwrap();
    let b = Grid::shells(&e, 2.0, 6, 2, 16).unwrap();
    let ratio = b.total_volume() / a.total_volume();
    assert!((ratio - 2f64.powf(e.trace())).abs() < 1e-10 * ratio);
}

#[test]
fn shell_volume_of_identity_ball_in_three_dims() {
    let g = Grid::shells(&Operator::identity(3), 2.0, 4, 2, 6).unwrap();
    let want = 4.0 / 3.0 * std::f64::consts::PI * (8.0 - (2.0f64 / 16.0).powi(3));
    assert!((g.total_volume() - want).abs() < 1e-10 * want);
}

#[test]
fn lattice_volume() {
    let g = Grid::lattice(3, 1.5, 6).unwrap();
    assert_eq!(g.len(), 216);
    assert!((g.total_volume() - 27.0).abs() < 1e-12);
}

#[test]
fn piecewise_constant_integrands_are_exact() {
    let g = Grid::lattice(2, 2.0, 16).unwrap();
    let theta = [0.6, -0.8];
    for alpha in [0.8, 1.5, 2.0] {
        let v = cf_exponent_real(&unit_square(2), &theta, alpha, &g).unwrap();
        assert!((v - 1.0).abs() < 1e-13, "alpha {alpha}: {v}");
    }
    let q = MatrixField::complex(2, 2, |u| {
        let inside = u.iter().all(|v| (0.0..=1.0).contains(v));
        let s = if inside { 1.0 } else { 0.0 };
        Ok((DMatrix::identity(2, 2) * (3.0 * s), DMatrix::identity(2, 2) * (4.0 * s)))
    });
    let v = cf_exponent_complex(&q, &[1.0, 0.0], 1.5, &g).unwrap();
    assert!((v - 5f64.powf(1.5)).abs() < 1e-12);
    let r = cf_exponent_real(&q, &[1.0, 0.0], 1.5, &g).unwrap();
    assert!((r - 3f64.powf(1.5)).abs() < 1e-12);
}

#[test]
fn combined_functional_is_linear_in_theta() {
    let g = Grid::lattice(2, 1.0, 8).unwrap();
    let q = MatrixField::real(2, 2, |u| Ok(DMatrix::from_row_slice(2, 2, &[u[0], 1.0, 0.0, u[1]])));
    let s = discretize(&q, &g).unwrap();
    let sum = Projected::combine(&[(&s, &[1.0, 0.0][..]), (&s, &[0.0, 2.0][..])]).unwrap();
    let direct = s.project(&[1.0, 2.0]).unwrap();
    for (a, b) in sum.re.iter().zip(&direct.re) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn gaussian_case_variance() {
    // α = 2: each component is Gaussian with variance 2∫|Qᵀe_i|²
    let g = Grid::lattice(1, 1.0, 10).unwrap();
    let q = MatrixField::real(1, 2, |u| Ok(DMatrix::from_row_slice(2, 2, &[1.0 + u[0], 0.5, 0.0, 2.0])));
    let s = discretize(&q, &g).unwrap();
    let n = 40_000u64;
    let out = integrate_many(&[s], 2.0, &StreamKey::new(12), 0..n).unwrap();
    // row 0 of Q: (1+u, 0.5); ∫_{-1}^{1} (1+u)² + 0.25 du on the midpoint grid
    let want0: f64 = (0..10).map(|k| 0.2 * ((1.0 + g.center(k)[0]).powi(2) + 0.25)).sum::<f64>() * 2.0;
    let want1 = 2.0 * 4.0 * 2.0;
    for (comp, want) in [(0usize, want0), (1, want1)] {
        let var = (0..n as usize).map(|r| out[r * 2 + comp].powi(2)).sum::<f64>() / n as f64;
        let se = want * (2.0 / n as f64).sqrt();
        assert!((var - want).abs() < 4.0 * se, "component {comp}: {var} vs {want}");
    }
}

#[test]
fn ladder_classification() {
    assert!(!classify_ladder(vec![1.0, 1.5, 2.25]).is_finite());
    assert!(!classify_ladder(vec![1.0, f64::INFINITY]).is_finite());
    assert!(!classify_ladder(vec![]).is_finite());
    match classify_ladder(vec![1.0, 1.01, 1.0101]) {
        Integrability::Finite { value, proxy, .. } => {
            assert!((value - (1.0101 + 0.0001 * 0.01 / 0.99)).abs() < 1e-12);
            assert!((proxy - 0.0001 / 1.0101).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn shell_ladder_extends_without_moving_cells() {
    let base = QuadratureSpec::shells(4.0, 2, 1, 8);
    let e = Operator::diagonal(&[1.0, 2.0]).unwrap();
    let rungs = build_ladder(&base, 3, &e).unwrap();
    for pair in rungs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for k in 0..a.len() {
            let c = a.center(k);
            let hit = (0..b.len()).any(|j| {
                b.center(j).iter().zip(c).all(|(x, y)| (x - y).abs() < 1e-12 * (1.0 + y.abs()))
                    && (b.volumes()[j] - a.volumes()[k]).abs() < 1e-12 * a.volumes()[k]
            });
            assert!(hit, "cell {k} moved");
        }
    }
}

#[test]
fn lattice_ladder_keeps_cell_size() {
    let specs = QuadratureSpec::lattice(1.0, 4).ladder(3).unwrap();
    assert_eq!(specs[2], QuadratureSpec::lattice(4.0, 16));
}

#[test]
fn integrability_diagnostic_on_known_integrals() {
    // |u|^{-1/2} on ℝ: tails grow, diverges
    let grow = MatrixField::real(1, 1, |u| Ok(DMatrix::from_element(1, 1, u[0].abs().powf(-0.5))))
        .with_singular_points(vec![vec![0.0]]);
    let ladder = build_ladder(&QuadratureSpec::shells(2.0, 6, 2, 1), 3, &Operator::identity(1)).unwrap();
    assert!(!integrability_diagnostic(&grow, 1.0, &ladder).unwrap().is_finite());
    // e^{-|u|}: ∫ = 2
    let decay = MatrixField::real(1, 1, |u| Ok(DMatrix::from_element(1, 1, (-u[0].abs()).exp())));
    let ladder = build_ladder(&QuadratureSpec::lattice(8.0, 1600), 3, &Operator::identity(1)).unwrap();
    match integrability_diagnostic(&decay, 1.0, &ladder).unwrap() {
        Integrability::Finite { value, .. } => assert!((value - 2.0).abs() < 1e-4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn singular_point_inside_lattice_cell_moves_to_corner() {
    let g = Grid::lattice(2, 1.0, 4).unwrap();
    let p = vec![0.25, 0.25];
    let q = MatrixField::real(2, 1, {
        let p = p.clone();
        move |u| Ok(DMatrix::from_element(1, 1, 1.0 / ((u[0] - p[0]).powi(2) + (u[1] - p[1]).powi(2)).sqrt()))
    });
    assert!(matches!(discretize(&q, &g), Err(ossfield::Error::IntegrandSingularity(_))));
    let s = discretize(&q.with_singular_points(vec![p]), &g).unwrap();
    let k = 2 + 2 * 4;
    assert!((s.re[k] - 1.0 / (0.25 * 2f64.sqrt())).abs() < 1e-12);
}

#[test]
fn singular_point_on_lattice_face_changes_nothing() {
    let g = Grid::lattice(2, 1.0, 4).unwrap();
    assert!(g.singular_cells(&[0.0, 0.0]).is_empty());
    assert!(g.singular_cells(&[0.5, 0.3]).is_empty());
    assert_eq!(g.singular_cells(&[0.3, 0.3]), vec![10]);
    assert_eq!(g.touching(&[0.0, 0.0]).len(), 4);
}

#[test]
fn singular_point_on_shell_grid() {
    let e = Operator::identity(2);
    let g = Grid::shells(&e, 4.0, 4, 2, 8).unwrap();
    let p = vec![1.0, 0.0];
    let cells = g.singular_cells(&p);
    assert!(cells.len() >= 2);
    let q = MatrixField::real(2, 1, |u| Ok(DMatrix::from_element(1, 1, ((u[0] - 1.0).powi(2) + u[1] * u[1]).powf(-0.25))))
        .with_singular_points(vec![p]);
    let s = discretize(&q, &g).unwrap();
    assert!(s.re.iter().all(|v| v.is_finite()));
}

#[test]
fn reductions_do_not_depend_on_thread_count() {
    let values: Vec<f64> = (0..10_000).map(|k| ((k as f64) * 0.37).sin() * 10f64.powi((k % 7) as i32)).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| chunked_sum(&values))
    };
    let seq: f64 = values.chunks(REDUCTION_CHUNK).map(|c| c.iter().sum::<f64>()).sum();
    assert_eq!(run(1).to_bits(), seq.to_bits());
    assert_eq!(run(3).to_bits(), seq.to_bits());

    let g = Grid::lattice(2, 1.0, 12).unwrap();
    let s = discretize(&unit_square(2), &g).unwrap();
    let draw = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| integrate_many(std::slice::from_ref(&s), 1.3, &StreamKey::new(99), 0..64).unwrap())
    };
    assert_eq!(draw(1), draw(4));
}

proptest! {
    #[test]
    fn margin_meets_tolerance(rate in 0.05f64..6.0, exp in 2i32..10) {
        let tol = 10f64.powi(-exp);
        let n = margin_shells(rate, tol);
        if n < MAX_MARGIN_SHELLS {
            prop_assert!(tail_fraction(rate, n) <= tol * (1.0 + 1e-9));
            if n > 1 {
                prop_assert!(tail_fraction(rate, n - 1) > tol);
            }
        }
    }

    #[test]
    fn shell_volumes_match_lattice_volume_of_annulus(r_out in 0.5f64..4.0, shells in 1usize..5) {
        let g = Grid::shells(&Operator::identity(2), r_out, shells, 2, 16).unwrap();
        let r_in = r_out / 2f64.powi(shells as i32);
        let want = std::f64::consts::PI * (r_out * r_out - r_in * r_in);
        prop_assert!((g.total_volume() - want).abs() < 1e-10 * want);
    }
}

#[test]
fn nondecaying_tail_gets_fixed_margin() {
    assert_eq!(margin_shells(0.0, 1e-4), NONDECAYING_MARGIN_SHELLS);
    assert_eq!(margin_shells(-1.0, 1e-4), NONDECAYING_MARGIN_SHELLS);
    assert!(tail_fraction(0.0, 3).is_infinite());
}
