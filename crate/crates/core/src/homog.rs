//! Homogeneous kernels `φ(r^E x) = r φ(x)` and sampling diagnostics for
//! homogeneity, admissibility and extrema on the unit sphere `{τ = 1}`.
//!
//! Admissibility is a global analytic property. The routines here only
//! collect numerical evidence from samples; they cannot prove it.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linops::Operator;
use crate::polar::{apply_pow, Polar};

pub type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum KernelKind {
    /// `Σ_j |x_j|^{γ_j}`.
    SumPowers { gammas: Vec<f64> },
    Custom { name: String, evaluator: Evaluator },
}

/// A nonnegative kernel with a declared admissibility order `beta`.
#[derive(Clone)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub beta: f64,
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            KernelKind::SumPowers { gammas } => f
                .debug_struct("KernelSpec")
                .field("sum_powers", gammas)
                .field("beta", &self.beta)
                .finish(),
            KernelKind::Custom { name, .. } => f
                .debug_struct("KernelSpec")
                .field("custom", name)
                .field("beta", &self.beta)
                .finish(),
        }
    }
}

impl KernelSpec {
    pub fn sum_powers(gammas: &[f64], beta: f64) -> Result<Self> {
        if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::GammaOutOfRange(*g));
        }
        if !(beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            kind: KernelKind::SumPowers {
                gammas: gammas.to_vec(),
            },
            beta,
        })
    }

    pub fn custom(
        name: impl Into<String>,
        beta: f64,
        evaluator: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: KernelKind::Custom {
                name: name.into(),
                evaluator: Arc::new(evaluator),
            },
            beta,
        }
    }

    /// `|x|^{1/c}`, homogeneous under `E = c·I`.
    pub fn euclidean_power(c: f64, beta: f64) -> Self {
        Self::custom(format!("euclidean^(1/{c})"), beta, move |x: &[f64]| {
            x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(1.0 / c)
        })
    }

    pub fn name(&self) -> String {
        match &self.kind {
            KernelKind::SumPowers { gammas } => format!("sum_powers{gammas:?}"),
            KernelKind::Custom { name, .. } => name.clone(),
        }
    }

    /// The operator `diag(1/γ_j)` under which a sum-of-powers kernel is
    /// homogeneous.
    pub fn matching_operator(&self) -> Option<Operator> {
        match &self.kind {
            KernelKind::SumPowers { gammas } => {
                let inv: Vec<f64> = gammas.iter().map(|g| 1.0 / g).collect();
                Operator::diagonal(&inv).ok()
            }
            KernelKind::Custom { .. } => None,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            KernelKind::SumPowers { gammas } => {
                x.iter().zip(gammas).map(|(v, g)| v.abs().powf(*g)).sum()
            }
            KernelKind::Custom { evaluator, .. } => evaluator(x),
        }
    }
}

impl KernelSpec {
    /// `φ(x + y) − φ(y)`, free of cancellation for sum-of-powers kernels.
    pub fn increment(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.kind {
            KernelKind::SumPowers { gammas } => x
                .iter()
                .zip(y)
                .zip(gammas)
                .map(|((xi, yi), g)| power_increment(*xi, *yi, *g))
                .sum(),
            KernelKind::Custom { evaluator, .. } => {
                let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
                evaluator(&xy) - evaluator(y)
            }
        }
    }
}

/// `|x + y|^g − |y|^g`.
fn power_increment(x: f64, y: f64, g: f64) -> f64 {
    let (a, b) = ((x + y).abs(), y.abs());
    if a == 0.0 || b == 0.0 {
        return a.powf(g) - b.powf(g);
    }
    // |x+y| − |y| = x(x + 2y) / (|x+y| + |y|)
    let diff = x * (x + 2.0 * y) / (a + b);
    b.powf(g) * (g * (diff / b).ln_1p()).exp_m1()
}

pub fn eval(k: &KernelSpec, x: &[f64]) -> f64 {
    k.eval(x)
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Max of `|φ(r^E x) − rφ(x)| / (rφ(x))` over random `x` with
/// `|x| ∈ [1e-3, 1e3]` and `r ∈ [1e-3, 1e3]`, both log-uniform.
pub fn check_homogeneity(k: &KernelSpec, e: &Operator, n_samples: usize, rng_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let d = e.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let scale = log_uniform(&mut rng, 1e-3, 1e3);
        let x: Vec<f64> = random_direction(&mut rng, d).iter().map(|v| v * scale).collect();
        let r = log_uniform(&mut rng, 1e-3, 1e3);
        let base = r * k.eval(&x);
        let scaled = k.eval(&apply_pow(r, e, &x)?);
        worst = worst.max((scaled - base).abs() / base);
    }
    Ok(worst)
}

/// Evidence for `|ψ(x+y) − ψ(y)| ≤ C₁ τ(x)^β`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    /// Largest observed ratio.
    pub c1: f64,
    pub argmax_x: Vec<f64>,
    pub argmax_y: Vec<f64>,
    /// Running maximum after each refinement level; level `l` samples
    /// `τ(x) ∈ [4^{-l-1}, 4^{-l}]`.
    pub running_max: Vec<f64>,
    /// Set when the running max at the last level is at least twice the one
    /// at the middle level.
    pub unbounded: bool,
}

pub const ADMISSIBILITY_LEVELS: usize = 8;

/// Samples `x = t^E θ` with `θ` on `{τ = 1}`, `t ≤ 1`, and `y` uniform in the
/// Euclidean annulus `A ≤ |y| ≤ B`, refining toward `x = 0` level by level.
pub fn check_admissibility(
    k: &KernelSpec,
    e: &Operator,
    beta: f64,
    annulus: (f64, f64),
    n_samples: usize,
    rng_seed: u64,
) -> Result<AdmissibilityReport> {
    let (a, b) = annulus;
    if !(a > 0.0 && a < b) {
        return Err(Error::Domain(format!("annulus needs 0 < A < B, got ({a}, {b})")));
    }
    let polar = Polar::new(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let d = e.dim();
    let per_level = (n_samples / ADMISSIBILITY_LEVELS).max(1);
    let mut best = 0.0;
    let mut argmax_x = vec![0.0; d];
    let mut argmax_y = vec![0.0; d];
    let mut running_max = Vec::with_capacity(ADMISSIBILITY_LEVELS);
    for level in 0..ADMISSIBILITY_LEVELS {
        let hi = 4f64.powi(-(level as i32));
        for _ in 0..per_level {
            let theta = polar.decompose(&random_direction(&mut rng, d))?.direction;
            let t = log_uniform(&mut rng, hi / 4.0, hi);
            let x = apply_pow(t, e, &theta)?;
            let ry = rng.random_range(a..=b);
            let y: Vec<f64> = random_direction(&mut rng, d).iter().map(|v| v * ry).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u + v).collect();
            let ratio = (k.eval(&xy) - k.eval(&y)).abs() / t.powf(beta);
            if ratio > best {
                best = ratio;
                argmax_x = x;
                argmax_y = y;
            }
        }
        running_max.push(best);
    }
    let mid = running_max[ADMISSIBILITY_LEVELS / 2 - 1];
    let unbounded = running_max[ADMISSIBILITY_LEVELS - 1] >= 2.0 * mid;
    Ok(AdmissibilityReport {
        c1: best,
        argmax_x,
        argmax_y,
        running_max,
        unbounded,
    })
}

/// Euclidean unit directions covering the sphere: `±1` in one dimension,
/// uniform angles in two, a Fibonacci lattice in three, seeded random
/// directions beyond.
pub fn sphere_directions(d: usize, n_grid: usize) -> Vec<Vec<f64>> {
    let n = n_grid.max(2);
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..n)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / n as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
                    let rho = (1.0 - z * z).sqrt();
                    let phi = golden * k as f64;
                    vec![rho * phi.cos(), rho * phi.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_d1ec);
            (0..n).map(|_| random_direction(&mut rng, d)).collect()
        }
    }
}

/// `(min, max)` of the kernel over `{τ = 1}`.
pub fn extrema_on_sphere(k: &KernelSpec, e: &Operator, n_grid: usize) -> Result<(f64, f64)> {
    let polar = Polar::new(e)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for dir in sphere_directions(e.dim(), n_grid) {
        let theta = polar.decompose(&dir)?.direction;
        let v = k.eval(&theta);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::KernelNotPositive {
                point: theta,
                value: v,
            });
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}
