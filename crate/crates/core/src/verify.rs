//! Statistical checks: empirical-CF comparisons for operator-self-similarity
//! and stationary increments, fullness of marginals, norm-bound slopes and
//! Lebesgue scaling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fields::{build_grid, functional_cf_exponent, simulate_with, FieldSample, FieldSpec, SimulateOptions};
use crate::linops::{det, mat_pow, op_norm, Operator};
use crate::stable::{ecf_projected, Ecf};

/// Per-comparison pass threshold on `|z|`.
pub const Z_THRESHOLD: f64 = 4.0;

/// Number of θ tuples in a standard panel.
pub const PANEL_SIZE: usize = 20;

/// One θ tuple and its comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcfRow {
    /// `θ_j` for each evaluation point.
    pub theta: Vec<Vec<f64>>,
    pub empirical: Ecf,
    /// Second sample, or `exp(−Γ)` with zero standard errors.
    pub reference: Ecf,
    pub theoretical_exponent: Option<f64>,
    pub z: f64,
}

/// `max(|Δre| / SE_re, |Δim| / SE_im)` with pooled standard errors.
pub fn z_score(a: &Ecf, b: &Ecf) -> f64 {
    let part = |d: f64, s1: f64, s2: f64| {
        let se = (s1 * s1 + s2 * s2).sqrt();
        if d == 0.0 {
            0.0
        } else if se == 0.0 {
            f64::INFINITY
        } else {
            d.abs() / se
        }
    };
    part(a.re - b.re, a.se_re, b.se_re).max(part(a.im - b.im, a.se_im, b.se_im))
}

impl EcfRow {
    pub fn new(theta: Vec<Vec<f64>>, empirical: Ecf, reference: Ecf, theoretical_exponent: Option<f64>) -> Self {
        let z = z_score(&empirical, &reference);
        Self {
            theta,
            empirical,
            reference,
            theoretical_exponent,
            z,
        }
    }

    /// Compares against the exact CF `exp(−exponent)`.
    pub fn against_exponent(theta: Vec<Vec<f64>>, empirical: Ecf, exponent: f64) -> Self {
        let reference = Ecf {
            re: (-exponent).exp(),
            im: 0.0,
            se_re: 0.0,
            se_im: 0.0,
        };
        Self::new(theta, empirical, reference, Some(exponent))
    }
}

/// A panel of ECF comparisons with a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcfReport {
    pub label: String,
    pub rows: Vec<EcfRow>,
    pub threshold: f64,
    /// Probability that at least one of the `2·rows` independent standard
    /// normal components exceeds the threshold.
    pub family_false_alarm: f64,
    pub max_abs_z: f64,
    pub pass: bool,
}

/// `P(max |Z_i| > t)` over `family` independent standard normals.
pub fn family_false_alarm(threshold: f64, family: usize) -> f64 {
    let normal = Normal::standard();
    let single = 2.0 * normal.cdf(-threshold);
    1.0 - (1.0 - single).powi(family as i32)
}

/// Smallest threshold keeping the family false-alarm probability at `level`.
pub fn adjusted_threshold(level: f64, family: usize) -> f64 {
    let normal = Normal::standard();
    let single = 1.0 - (1.0 - level).powf(1.0 / family.max(1) as f64);
    normal.inverse_cdf(1.0 - single / 2.0)
}

impl EcfReport {
    pub fn new(label: impl Into<String>, rows: Vec<EcfRow>) -> Self {
        let max_abs_z = rows.iter().map(|r| r.z).fold(0.0, f64::max);
        Self {
            label: label.into(),
            family_false_alarm: family_false_alarm(Z_THRESHOLD, 2 * rows.len()),
            threshold: Z_THRESHOLD,
            pass: max_abs_z <= Z_THRESHOLD,
            max_abs_z,
            rows,
        }
    }

    /// Recomputes every z-score from the stored fields.
    pub fn recomputed_z(&self) -> Vec<f64> {
        self.rows.iter().map(|r| z_score(&r.empirical, &r.reference)).collect()
    }
}

/// `n` tuples of `k` standard normal vectors in `R^m`.
pub fn theta_panel(m: usize, k: usize, n: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| (0..m).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect()
}

/// Rescales each tuple so its CF exponent becomes one, using homogeneity
/// `Γ(cθ) = c^α Γ(θ)`. Tuples with zero exponent are left alone.
pub fn normalize_panel(panel: &mut [Vec<Vec<f64>>], exponents: &mut [f64], alpha: f64) {
    for (t, g) in panel.iter_mut().zip(exponents.iter_mut()) {
        if *g > 0.0 {
            let c = g.powf(-1.0 / alpha);
            t.iter_mut().flatten().for_each(|v| *v *= c);
            *g = 1.0;
        }
    }
}

/// Standard panel for a field at `points`: [`theta_panel`] rescaled so that
/// `Σ_j ⟨θ_j, X(x_j)⟩` has CF exponent one.
pub fn field_panel(spec: &FieldSpec, points: &[Vec<f64>], n: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut panel = theta_panel(spec.dim_m(), points.len(), n, seed);
    let (grid, _) = build_grid(spec, points)?;
    let mut exponents = panel
        .par_iter()
        .map(|t| functional_cf_exponent(spec, &pairs(points, t), &grid))
        .collect::<Result<Vec<_>>>()?;
    normalize_panel(&mut panel, &mut exponents, spec.alpha);
    Ok(panel)
}

fn ecf_of(sample: &FieldSample, theta: &[Vec<f64>]) -> Result<Ecf> {
    ecf_projected(&sample.linear_functional(theta))
}

fn pairs(points: &[Vec<f64>], theta: &[Vec<f64>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    points.iter().cloned().zip(theta.iter().cloned()).collect()
}

fn apply(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(x)).iter().copied().collect()
}

/// Second independent master seed derived from `seed`.
fn sibling_seed(seed: u64) -> u64 {
    seed ^ 0xA5A5_5A5A_C3C3_3C3C
}

/// Options for [`oss_mc_test`].
#[derive(Debug, Clone, Default)]
pub struct OssOptions {
    /// Scaling used on the right-hand side in place of `D` (negative
    /// control).
    pub d_override: Option<Operator>,
}

/// Compares `{X(r^E x_j)}` with `{r^D X(x_j)}` through joint ECFs of
/// `Σ_j ⟨θ_j, ·⟩`, from two independent simulations.
pub fn oss_mc_test(
    spec: &FieldSpec,
    r: f64,
    points: &[Vec<f64>],
    thetas: &[Vec<Vec<f64>>],
    n_rep: usize,
    seed: u64,
    opts: &OssOptions,
) -> Result<EcfReport> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("scale factor must be positive, got {r}")));
    }
    let re = mat_pow(r, spec.e.entries())?;
    let d_right = opts.d_override.as_ref().unwrap_or(&spec.d);
    let rd = mat_pow(r, d_right.entries())?;
    let scaled: Vec<Vec<f64>> = points.iter().map(|x| apply(&re, x)).collect();
    let left = simulate_with(spec, &scaled, n_rep, seed, &SimulateOptions::default())?;
    let right = simulate_with(
        spec,
        points,
        n_rep,
        sibling_seed(seed),
        &SimulateOptions {
            post_multiply: Some(rd.clone()),
            ..Default::default()
        },
    )?;
    let (grid, _) = build_grid(spec, points)?;
    let rows = thetas
        .par_iter()
        .map(|theta| {
            let rotated: Vec<Vec<f64>> = theta.iter().map(|t| apply(&rd.transpose(), t)).collect();
            let theo = functional_cf_exponent(spec, &pairs(points, &rotated), &grid)?;
            Ok(EcfRow::new(theta.clone(), ecf_of(&left, theta)?, ecf_of(&right, theta)?, Some(theo)))
        })
        .collect::<Result<Vec<_>>>()?;
    let tag = if opts.d_override.is_some() { " (substituted D)" } else { "" };
    Ok(EcfReport::new(format!("operator self-similarity, r = {r}{tag}"), rows))
}

/// Options for [`stationary_increments_mc_test`].
#[derive(Debug, Clone, Copy, Default)]
pub struct IncrementOptions {
    /// Compare `X(x_j + h)` instead of `X(x_j + h) − X(h)` (negative
    /// control).
    pub drop_base_point: bool,
}

/// Compares `{X(x_j + h) − X(h)}` with `{X(x_j)}` from two independent
/// simulations.
pub fn stationary_increments_mc_test(
    spec: &FieldSpec,
    h: &[f64],
    points: &[Vec<f64>],
    thetas: &[Vec<Vec<f64>>],
    n_rep: usize,
    seed: u64,
    opts: &IncrementOptions,
) -> Result<EcfReport> {
    let mut shifted: Vec<Vec<f64>> = points
        .iter()
        .map(|x| x.iter().zip(h).map(|(a, b)| a + b).collect())
        .collect();
    shifted.push(h.to_vec());
    let left = simulate_with(spec, &shifted, n_rep, seed, &SimulateOptions::default())?;
    let right = simulate_with(spec, points, n_rep, sibling_seed(seed), &SimulateOptions::default())?;
    let k = points.len();
    let (grid, _) = build_grid(spec, points)?;
    let rows = thetas
        .par_iter()
        .map(|theta| {
            let proj: Vec<f64> = (0..n_rep)
                .map(|rep| {
                    let base = left.value(rep, k);
                    theta
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            left.value(rep, j)
                                .iter()
                                .zip(base)
                                .zip(t)
                                .map(|((v, b), w)| if opts.drop_base_point { v * w } else { (v - b) * w })
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect();
            let theo = functional_cf_exponent(spec, &pairs(points, theta), &grid)?;
            Ok(EcfRow::new(theta.clone(), ecf_projected(&proj)?, ecf_of(&right, theta)?, Some(theo)))
        })
        .collect::<Result<Vec<_>>>()?;
    let tag = if opts.drop_base_point { " (base point not subtracted)" } else { "" };
    Ok(EcfReport::new(format!("stationary increments, h = {h:?}{tag}"), rows))
}

/// Fullness evidence for one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub direction: Vec<f64>,
    /// `1 − |ecf(c·y)|` for each `c` of the grid.
    pub deficiency: Vec<f64>,
    /// Standard error of `|ecf(c·y)|` for each `c`.
    pub se: Vec<f64>,
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Fullness {
    Full,
    Suspect { direction: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProperReport {
    pub c_grid: Vec<f64>,
    pub directions: Vec<DirectionCheck>,
    pub verdict: Fullness,
}

/// Minimum replicate count accepted by [`properness_test`].
pub const PROPER_MIN_REPLICATES: usize = 1000;

/// A law is not full exactly when `|CF(c·y)| = 1` for all `c` along some
/// direction `y`. A direction counts as full once `1 − |ecf(c·y)|` exceeds
/// `4·SE` for some `c` of the grid.
pub fn properness_test(samples: &[Vec<f64>], directions: &[Vec<f64>], c_grid: &[f64]) -> Result<ProperReport> {
    if samples.len() < PROPER_MIN_REPLICATES {
        return Err(Error::Domain(format!(
            "fullness check needs at least {PROPER_MIN_REPLICATES} replicates, got {}",
            samples.len()
        )));
    }
    let checks = directions
        .iter()
        .map(|y| {
            let mut deficiency = Vec::with_capacity(c_grid.len());
            let mut se = Vec::with_capacity(c_grid.len());
            for c in c_grid {
                let theta: Vec<f64> = y.iter().map(|v| v * c).collect();
                let proj: Vec<f64> = samples
                    .iter()
                    .map(|s| s.iter().zip(&theta).map(|(a, b)| a * b).sum())
                    .collect();
                let e = ecf_projected(&proj)?;
                let modulus = e.re.hypot(e.im);
                let s = if modulus > 0.0 {
                    ((e.re * e.se_re).powi(2) + (e.im * e.se_im).powi(2)).sqrt() / modulus
                } else {
                    e.se_re.hypot(e.se_im)
                };
                deficiency.push(1.0 - modulus);
                se.push(s);
            }
            let full = deficiency.iter().zip(&se).any(|(d, s)| *d > Z_THRESHOLD * s && *d > 0.0);
            Ok(DirectionCheck {
                direction: y.clone(),
                deficiency,
                se,
                full,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let verdict = match checks.iter().find(|c| !c.full) {
        Some(c) => Fullness::Suspect {
            direction: c.direction.clone(),
        },
        None => Fullness::Full,
    };
    Ok(ProperReport {
        c_grid: c_grid.to_vec(),
        directions: checks,
        verdict,
    })
}

/// `n` log-spaced values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

/// Slopes of `log‖r^D‖` against `log r` near zero and near infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormBoundReport {
    pub h: f64,
    pub big_h: f64,
    /// Plain least-squares slopes.
    pub slope_small: f64,
    pub slope_large: f64,
    /// Power `k` of the `|log r|^k` factor produced by Jordan blocks: the
    /// largest block size among eigenvalues with real part `h` (small `r`)
    /// or `H` (large `r`), minus one.
    pub log_power_small: usize,
    pub log_power_large: usize,
    /// Slopes after removing `k·log|log r|`.
    pub corrected_small: f64,
    pub corrected_large: f64,
    pub slack: f64,
    pub pass: bool,
}

/// Allowed slack `δ` on each slope.
pub const SLOPE_SLACK: f64 = 0.05;

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Size of the largest Jordan block among eigenvalues with real part
/// within `1e-6` of `target`, from ranks of powers of `D − λI`.
fn jordan_index(d: &Operator, target: f64) -> usize {
    let n = d.dim();
    let mut best = 0;
    let mut seen: Vec<nalgebra::Complex<f64>> = Vec::new();
    for lambda in d.eigenvalues() {
        if (lambda.re - target).abs() > 1e-6 || seen.iter().any(|s| (s - lambda).norm() < 1e-6) {
            continue;
        }
        seen.push(*lambda);
        let shifted = d.entries().map(nalgebra::Complex::from) - DMatrix::identity(n, n) * *lambda;
        let rank = |m: &DMatrix<nalgebra::Complex<f64>>| m.clone().svd(false, false).rank(1e-7);
        let mut power = shifted.clone();
        let mut prev = rank(&power);
        let mut k = 1;
        while k < n {
            power = &power * &shifted;
            let r = rank(&power);
            if r == prev {
                break;
            }
            prev = r;
            k += 1;
        }
        best = best.max(k);
    }
    best.max(1)
}

pub fn norm_bound_slopes(d: &Operator, r_small: &[f64], r_large: &[f64]) -> Result<NormBoundReport> {
    let span = |g: &[f64]| {
        let (lo, hi) = g.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        (hi / lo).log10()
    };
    if r_small.len() < 2 || r_large.len() < 2 || span(r_small) < 4.0 - 1e-9 || span(r_large) < 4.0 - 1e-9 {
        return Err(Error::Domain("slope grids need two points spanning four decades".into()));
    }
    if r_small.iter().any(|r| !(*r > 0.0 && *r < 1.0)) || r_large.iter().any(|r| !(*r > 1.0)) {
        return Err(Error::Domain("small grid must lie in (0, 1), large grid above 1".into()));
    }
    let fit = |grid: &[f64], k: usize| -> Result<(f64, f64)> {
        let xs: Vec<f64> = grid.iter().map(|r| r.ln()).collect();
        let ys = grid
            .iter()
            .map(|r| Ok(op_norm(&mat_pow(*r, d.entries())?).ln()))
            .collect::<Result<Vec<f64>>>()?;
        let corrected: Vec<f64> = ys
            .iter()
            .zip(&xs)
            .map(|(y, x)| y - k as f64 * x.abs().ln())
            .collect();
        Ok((ls_slope(&xs, &ys), ls_slope(&xs, &corrected)))
    };
    let (h, big_h) = (d.eig_real_min(), d.eig_real_max());
    let k_small = jordan_index(d, h) - 1;
    let k_large = jordan_index(d, big_h) - 1;
    let (slope_small, corrected_small) = fit(r_small, k_small)?;
    let (slope_large, corrected_large) = fit(r_large, k_large)?;
    let pass = (corrected_small - h).abs() <= SLOPE_SLACK && (corrected_large - big_h).abs() <= SLOPE_SLACK;
    Ok(NormBoundReport {
        h,
        big_h,
        slope_small,
        slope_large,
        log_power_small: k_small,
        log_power_large: k_large,
        corrected_small,
        corrected_large,
        slack: SLOPE_SLACK,
        pass,
    })
}

/// Monte Carlo volume of `r^E [0, 1]^d` against `r^q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LebesgueReport {
    pub r: f64,
    pub exact: f64,
    pub estimate: f64,
    pub samples: usize,
    pub rel_error: f64,
    /// `3/√n`.
    pub tolerance: f64,
    /// `|det r^E − r^q| / r^q`.
    pub det_residual: f64,
    pub pass: bool,
}

/// Jittered stratified sampling of the bounding box of `r^E [0, 1]^d`, with
/// membership decided by mapping back through `r^{−E}`.
pub fn lebesgue_scaling_check(e: &Operator, r: f64, n_mc: usize, seed: u64) -> Result<LebesgueReport> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("scale factor must be positive, got {r}")));
    }
    let d = e.dim();
    let fwd = mat_pow(r, e.entries())?;
    let inv = mat_pow(1.0 / r, e.entries())?;
    let exact = r.powf(e.trace());
    let det_residual = (det(&fwd) - exact).abs() / exact;
    let (mut lo, mut hi) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
    for mask in 0..1usize << d {
        let corner: Vec<f64> = (0..d).map(|a| ((mask >> a) & 1) as f64).collect();
        for (a, v) in apply(&fwd, &corner).iter().enumerate() {
            lo[a] = lo[a].min(*v);
            hi[a] = hi[a].max(*v);
        }
    }
    let box_volume: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
    let per_axis = ((n_mc as f64).powf(1.0 / d as f64) + 1e-9).floor().max(1.0) as usize;
    let strata = per_axis.pow(d as u32);
    let hits: usize = (0..per_axis)
        .into_par_iter()
        .map(|slab| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(slab as u64);
            let inner = strata / per_axis;
            let mut z = vec![0.0; d];
            let mut count = 0;
            for idx in 0..inner {
                let mut rem = idx;
                for a in 0..d {
                    let cell = if a == 0 {
                        slab
                    } else {
                        let c = rem % per_axis;
                        rem /= per_axis;
                        c
                    };
                    let u: f64 = rng.random();
                    z[a] = lo[a] + (hi[a] - lo[a]) * (cell as f64 + u) / per_axis as f64;
                }
                let back = apply(&inv, &z);
                if back.iter().all(|v| (0.0..=1.0).contains(v)) {
                    count += 1;
                }
            }
            count
        })
        .sum();
    let estimate = box_volume * hits as f64 / strata as f64;
    let rel_error = (estimate - exact).abs() / exact;
    let tolerance = 3.0 / (strata as f64).sqrt();
    Ok(LebesgueReport {
        r,
        exact,
        estimate,
        samples: strata,
        rel_error,
        tolerance,
        det_residual,
        pass: rel_error <= tolerance && det_residual <= 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_scores_recompute() {
        let a = Ecf {
            re: 0.4,
            im: 0.01,
            se_re: 0.01,
            se_im: 0.01,
        };
        let row = EcfRow::against_exponent(vec![vec![1.0]], a, 1.0);
        let rep = EcfReport::new("t", vec![row]);
        assert_eq!(rep.recomputed_z(), vec![rep.rows[0].z]);
        assert!((rep.rows[0].z - (0.4 - (-1f64).exp()) / 0.01).abs() < 1e-12);
    }

    #[test]
    fn threshold_bookkeeping() {
        assert!((family_false_alarm(4.0, 1) - 6.334e-5).abs() < 1e-7);
        let t = adjusted_threshold(family_false_alarm(4.0, 40), 40);
        assert!((t - 4.0).abs() < 1e-8);
    }

    #[test]
    fn scalar_operator_slopes_are_exact() {
        let d = Operator::diagonal(&[0.7, 0.7]).unwrap();
        let rep = norm_bound_slopes(&d, &log_grid(1e-6, 1e-2, 9), &log_grid(1e2, 1e6, 9)).unwrap();
        assert!((rep.slope_small - 0.7).abs() < 1e-12 && (rep.slope_large - 0.7).abs() < 1e-12);
        assert_eq!(rep.log_power_small, 0);
    }

    #[test]
    fn jordan_index_detects_blocks() {
        let j = Operator::from_rows(&[vec![0.5, 1.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(jordan_index(&j, 0.5), 2);
        assert_eq!(jordan_index(&Operator::diagonal(&[0.5, 0.5]).unwrap(), 0.5), 1);
    }

    #[test]
    fn lebesgue_identity_scale() {
        let rep = lebesgue_scaling_check(&Operator::diagonal(&[2.0, 2.0]).unwrap(), 1.0, 10_000, 1).unwrap();
        assert_eq!(rep.exact, 1.0);
        assert!(rep.rel_error < 1e-12);
    }
}
