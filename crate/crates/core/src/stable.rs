//! Symmetric α-stable sampling.
//!
//! Scale convention: a variable with scale `s` has characteristic function
//! `exp(-s^α |θ|^α)`. At `α = 2` this is a Gaussian with variance `2 s²`, not
//! `s²` as in the usual Gaussian parametrization; several textbooks use yet
//! another factor for `α < 2`.
//!
//! Isotropic vectors use the sub-Gaussian construction `s·κ·√A·Z` where `A` is
//! positive `(α/2)`-stable with Laplace transform `exp(-u^{α/2})` and `Z` is
//! standard normal. Under that standardization `κ = √2` for every `α`.
//!
//! Random measures draw each replicate from its own counter-based stream
//! keyed by (master seed, replicate) and consume it cell by cell in grid
//! order, so the result is independent of execution order and thread count.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{domain, Result};

/// Sub-Gaussian mixing constant; see [`calibrate_kappa`].
pub const SUB_GAUSSIAN_KAPPA: f64 = std::f64::consts::SQRT_2;

const ANGLE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StableSpec {
    pub alpha: f64,
    pub m: usize,
}

impl StableSpec {
    pub fn new(alpha: f64, m: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return domain(format!("alpha must lie in (0, 2], got {alpha}"));
        }
        if m == 0 {
            return domain("state dimension m must be at least 1");
        }
        Ok(Self { alpha, m })
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return domain(format!("scale must be finite and nonnegative, got {scale}"));
    }
    Ok(())
}

#[inline]
fn uniform_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let v: f64 = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
    v.clamp(-FRAC_PI_2 + ANGLE_GUARD, FRAC_PI_2 - ANGLE_GUARD)
}

#[inline]
fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let w: f64 = rng.sample(Exp1);
    w.max(f64::MIN_POSITIVE)
}

/// Chambers–Mallows–Stuck draw with CF `exp(-scale^α |θ|^α)`.
pub fn sample_sym_stable_1d<R: Rng + ?Sized>(alpha: f64, scale: f64, rng: &mut R) -> Result<f64> {
    StableSpec::new(alpha, 1)?;
    check_scale(scale)?;
    if scale == 0.0 {
        return Ok(0.0);
    }
    if alpha == 2.0 {
        let z: f64 = rng.sample(StandardNormal);
        return Ok(scale * std::f64::consts::SQRT_2 * z);
    }
    let v = uniform_angle(rng);
    if alpha == 1.0 {
        return Ok(scale * v.tan());
    }
    let w = exp1(rng);
    let x = (alpha * v).sin() / v.cos().powf(1.0 / alpha)
        * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha);
    Ok(scale * x)
}

#[inline]
fn kanter_factor(a: f64, u: f64) -> f64 {
    (a * u).sin().powf(a / (1.0 - a)) * ((1.0 - a) * u).sin() / u.sin().powf(1.0 / (1.0 - a))
}

#[inline]
fn positive_stable_unchecked<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(0.0..PI).clamp(ANGLE_GUARD, PI - ANGLE_GUARD);
    let w = exp1(rng);
    (kanter_factor(a, u) / w).powf((1.0 - a) / a)
}

/// Positive stable draw with Laplace transform `exp(-s^a)` (Kanter's method).
/// At `a = 1/2` this is the Lévy law with CDF `erfc(1 / (2√x))`.
pub fn sample_positive_stable<R: Rng + ?Sized>(alpha_half: f64, rng: &mut R) -> Result<f64> {
    if !(alpha_half > 0.0 && alpha_half < 1.0) {
        return domain(format!("alpha/2 must lie in (0, 1), got {alpha_half}"));
    }
    Ok(positive_stable_unchecked(alpha_half, rng))
}

/// Writes an isotropic SαS vector with joint CF `exp(-scale^α |θ|^α)` into
/// `out` (length `spec.m`).
#[inline]
pub fn fill_isotropic<R: Rng + ?Sized>(spec: &StableSpec, scale: f64, rng: &mut R, out: &mut [f64]) {
    let mix = if spec.alpha == 2.0 {
        std::f64::consts::SQRT_2
    } else {
        SUB_GAUSSIAN_KAPPA * positive_stable_unchecked(spec.alpha / 2.0, rng).sqrt()
    };
    let f = scale * mix;
    for o in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *o = f * z;
    }
}

pub fn sample_isotropic_vector<R: Rng + ?Sized>(spec: &StableSpec, scale: f64, rng: &mut R) -> Result<Vec<f64>> {
    StableSpec::new(spec.alpha, spec.m)?;
    check_scale(scale)?;
    let mut out = vec![0.0; spec.m];
    if scale > 0.0 {
        fill_isotropic(spec, scale, rng, &mut out);
    }
    Ok(out)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based stream family derived from one master seed.
#[derive(Debug, Clone)]
pub struct StreamKey {
    master_seed: u64,
    base: ChaCha8Rng,
}

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        let mut state = master_seed;
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            master_seed,
            base: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Generator for the measure draws of one replicate, consumed cell by
    /// cell in grid order.
    pub fn replicate(&self, replicate: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(replicate);
        rng
    }

    /// Generator for auxiliary draws of a replicate, starting `2^64` words
    /// into its stream.
    pub fn auxiliary(&self, replicate: u64) -> ChaCha8Rng {
        let mut rng = self.replicate(replicate);
        rng.set_word_pos(1u128 << 64);
        rng
    }
}

/// Values of the random measure on a list of disjoint cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMeasureSample {
    pub cell_volumes: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub seed_path: String,
}

/// Independent isotropic draws, cell `j` with scale `volume_j^{1/α}`.
pub fn sample_measure(
    spec: &StableSpec,
    cell_volumes: &[f64],
    key: &StreamKey,
    replicate: u64,
) -> Result<CellMeasureSample> {
    StableSpec::new(spec.alpha, spec.m)?;
    if let Some(v) = cell_volumes.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return domain(format!("cell volumes must be positive, got {v}"));
    }
    let mut rng = key.replicate(replicate);
    let values = cell_volumes
        .iter()
        .map(|vol| {
            let mut out = vec![0.0; spec.m];
            fill_isotropic(spec, vol.powf(1.0 / spec.alpha), &mut rng, &mut out);
            out
        })
        .collect();
    Ok(CellMeasureSample {
        cell_volumes: cell_volumes.to_vec(),
        values,
        seed_path: format!("seed={}/replicate={replicate}", key.master_seed()),
    })
}

/// Empirical characteristic function with per-component standard errors.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ecf {
    pub re: f64,
    pub im: f64,
    pub se_re: f64,
    pub se_im: f64,
}

/// ECF of scalar projections `⟨θ, X_k⟩`.
pub fn ecf_projected(proj: &[f64]) -> Result<Ecf> {
    let n = proj.len();
    if n < 2 {
        return domain("empirical characteristic function needs at least two samples");
    }
    let (mut sc, mut ss) = (0.0, 0.0);
    for p in proj {
        sc += p.cos();
        ss += p.sin();
    }
    let nf = n as f64;
    let (re, im) = (sc / nf, ss / nf);
    let (mut vc, mut vs) = (0.0, 0.0);
    for p in proj {
        vc += (p.cos() - re).powi(2);
        vs += (p.sin() - im).powi(2);
    }
    Ok(Ecf {
        re,
        im,
        se_re: (vc / (nf - 1.0)).sqrt() / nf.sqrt(),
        se_im: (vs / (nf - 1.0)).sqrt() / nf.sqrt(),
    })
}

/// `(1/N) Σ exp(i⟨θ, X_k⟩)` with standard errors.
pub fn ecf(samples: &[Vec<f64>], theta: &[f64]) -> Result<Ecf> {
    let proj: Vec<f64> = samples
        .iter()
        .map(|x| x.iter().zip(theta).map(|(a, b)| a * b).sum())
        .collect();
    ecf_projected(&proj)
}

fn gl_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on Legendre polynomials; nodes/weights on [0, 1].
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - z);
        weights[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (nodes, weights)
}

fn composite(lo: f64, hi: f64, panels: usize, rule: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    let w = (hi - lo) / panels as f64;
    let mut out = Vec::with_capacity(panels * rule.0.len());
    for p in 0..panels {
        let a = lo + p as f64 * w;
        for (x, wt) in rule.0.iter().zip(&rule.1) {
            out.push((a + x * w, wt * w));
        }
    }
    out
}

/// Law of the Kanter variable `S` as weighted nodes `(s, mass)` on a
/// log-`s` grid, from its mixing representation: given `U`,
/// `P(S ≤ s) = exp(-A(U) s^{-p})` with `p = a/(1-a)`.
fn kanter_masses(a: f64, u_nodes: &[(f64, f64, f64)], t_nodes: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let p = a / (1.0 - a);
    t_nodes
        .iter()
        .map(|&(v, wv)| {
            // s = e^v: dF(s) = A p s^{-p} e^{-A s^{-p}} dv
            let s = v.exp();
            let sp = s.powf(-p);
            let dens: f64 = u_nodes.iter().map(|&(_, wu, au)| wu * au * p * sp * (-au * sp).exp()).sum();
            (s, wv * dens / PI)
        })
        .collect()
}

/// `E[e^{-cS}]` and `E[S e^{-cS}]`.
fn kanter_laplace(c: f64, masses: &[(f64, f64)]) -> (f64, f64) {
    masses.iter().fold((0.0, 0.0), |(l0, l1), &(s, w)| {
        let e = w * (-c * s).exp();
        (l0 + e, l1 + e * s)
    })
}

/// Fits the sub-Gaussian constant for one `α ∈ (0, 2)` by least squares on a
/// θ-grid: the one-dimensional CF `E exp(-κ² A θ² / 2)` is evaluated by
/// deterministic quadrature over the law of `A` and matched against
/// `exp(-|θ|^α)`.
pub fn calibrate_kappa(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return domain(format!("calibration needs alpha in (0, 2), got {alpha}"));
    }
    let a = alpha / 2.0;
    let rule = gl_rule(16);
    let u_nodes: Vec<(f64, f64, f64)> = composite(0.0, PI, 64, &rule)
        .into_iter()
        .map(|(u, w)| (u, w, kanter_factor(a, u)))
        .collect();
    let p = a / (1.0 - a);
    // log-s range wide enough that the density is negligible outside
    let lo = -(60.0 / p).min(700.0);
    let hi = (2.0 + 80.0 / p).min(700.0);
    let t_nodes = composite(lo, hi, 256, &rule);
    let masses = kanter_masses(a, &u_nodes, &t_nodes);
    let thetas: Vec<f64> = (1..=10).map(|k| 0.25 * k as f64).collect();
    let mut kappa: f64 = 1.0;
    for _ in 0..30 {
        // Gauss-Newton on residuals r_i = -ln L(κ²θ²/2) - θ^α.
        let (mut jtj, mut jtr) = (0.0, 0.0);
        for &th in &thetas {
            let c = kappa * kappa * th * th / 2.0;
            let (l0, l1) = kanter_laplace(c, &masses);
            let r = -l0.ln() - th.powf(alpha);
            let dr = (l1 / l0) * kappa * th * th;
            jtj += dr * dr;
            jtr += dr * r;
        }
        let step = jtr / jtj;
        kappa -= step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    Ok(kappa)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_sym_stable_1d(1.3, 0.0, &mut rng).unwrap(), 0.0);
        let spec = StableSpec::new(1.5, 3).unwrap();
        assert_eq!(sample_isotropic_vector(&spec, 0.0, &mut rng).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn domain_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_sym_stable_1d(1.0, -1.0, &mut rng).is_err());
        assert!(sample_sym_stable_1d(2.5, 1.0, &mut rng).is_err());
        assert!(sample_positive_stable(1.0, &mut rng).is_err());
        assert!(sample_positive_stable(0.0, &mut rng).is_err());
        let spec = StableSpec::new(1.0, 1).unwrap();
        assert!(sample_measure(&spec, &[1.0, 0.0], &StreamKey::new(0), 0).is_err());
        assert!(ecf_projected(&[]).is_err());
    }

    #[test]
    fn ecf_trivial_cases() {
        let zeros = vec![vec![0.0, 0.0]; 10];
        let e = ecf(&zeros, &[1.0, 2.0]).unwrap();
        assert_eq!((e.re, e.im, e.se_re, e.se_im), (1.0, 0.0, 0.0, 0.0));
        let some = vec![vec![1.0, -3.0], vec![0.5, 2.0]];
        assert_eq!(ecf(&some, &[0.0, 0.0]).unwrap().re, 1.0);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let key = StreamKey::new(42);
        let a: u64 = key.replicate(3).random();
        let b: u64 = key.replicate(3).random();
        let c: u64 = key.auxiliary(3).random();
        let d: u64 = key.replicate(4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(a, StreamKey::new(43).replicate(3).random::<u64>());
    }

    #[test]
    fn single_unit_cell_matches_vector_sampler() {
        let spec = StableSpec::new(1.5, 2).unwrap();
        let key = StreamKey::new(9);
        let m = sample_measure(&spec, &[1.0], &key, 5).unwrap();
        let v = sample_isotropic_vector(&spec, 1.0, &mut key.replicate(5)).unwrap();
        assert_eq!(m.values[0], v);
    }
}
