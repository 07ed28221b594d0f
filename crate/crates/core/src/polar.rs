//! Polar coordinates `x = τ(x)^E l(x)` under a scaling operator `E ∈ Q`.
//!
//! The radial functional is the integral norm
//! `‖x‖_E = ∫₀¹ |t^E x| dt/t = ∫₀^∞ |e^{-uE} x| du`, and `τ(x)` is the unique
//! `t > 0` with `‖t^{-E} x‖_E = 1`. Writing `g(u) = |e^{-uE} x|` and
//! `G(v) = ∫_v^∞ g`, this means `τ(x) = e^{v*}` with `G(v*) = 1`.
//!
//! Integration walks fixed-width panels in `u`, each handled by a 16-point
//! Gauss–Legendre rule. Propagators `e^{∓hE}` and the node matrices are
//! computed once per [`Polar`] frame, so a panel costs only mat-vec products.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linops::{mat_exp, op_norm, Operator};

const GL_POINTS: usize = 16;
const TAIL_REL: f64 = 1e-17;
const TAIL_PANELS: usize = 3;
const MAX_PANELS: usize = 2_000_000;

/// Radial part and direction of a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarCoords {
    pub tau: f64,
    pub direction: Vec<f64>,
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre() -> &'static ([f64; GL_POINTS], [f64; GL_POINTS]) {
    static RULE: OnceLock<([f64; GL_POINTS], [f64; GL_POINTS])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_POINTS;
        let mut nodes = [0.0; GL_POINTS];
        let mut weights = [0.0; GL_POINTS];
        for i in 0..n {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
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
    })
}

fn to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[inline]
fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

#[inline]
fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Precomputed frame for polar computations under one operator.
#[derive(Debug, Clone)]
pub struct Polar {
    op: Operator,
    dim: usize,
    flat: Vec<f64>,
    h: f64,
    step_fwd: Vec<f64>,
    step_back: Vec<f64>,
    nodes: Vec<Vec<f64>>,
    weights: [f64; GL_POINTS],
    unit_nodes: [f64; GL_POINTS],
}

impl Polar {
    pub fn new(e: &Operator) -> Result<Self> {
        if !e.is_in_q() {
            return Err(Error::NotInQ(e.eig_real_min()));
        }
        let a = e.entries();
        let h = (0.5 / op_norm(a)).min(1.0);
        let (unit_nodes, unit_weights) = *gauss_legendre();
        let nodes = unit_nodes
            .iter()
            .map(|c| mat_exp(&(a * (-c * h))).map(|m| to_flat(&m)))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = unit_weights;
        weights.iter_mut().for_each(|w| *w *= h);
        Ok(Self {
            op: e.clone(),
            dim: e.dim(),
            flat: to_flat(a),
            h,
            step_fwd: to_flat(&mat_exp(&(a * -h))?),
            step_back: to_flat(&mat_exp(&(a * h))?),
            nodes,
            weights,
            unit_nodes,
        })
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `∫₀^h |e^{-uE} y| du` for the panel starting at vector `y`.
    fn panel(&self, y: &[f64], buf: &mut [f64]) -> f64 {
        let mut s = 0.0;
        for (node, w) in self.nodes.iter().zip(&self.weights) {
            matvec(node, y, buf);
            s += w * norm(buf);
        }
        s
    }

    /// `e^{-sE} y` by Taylor series, valid for `s ≤ h` (so `‖sE‖ ≤ 1/2`).
    fn propagate_partial(&self, s: f64, y: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut term = y.to_vec();
        let mut sum = y.to_vec();
        let mut next = vec![0.0; n];
        for k in 1..=30 {
            matvec(&self.flat, &term, &mut next);
            let c = -s / k as f64;
            let mut small = true;
            for i in 0..n {
                term[i] = next[i] * c;
                sum[i] += term[i];
                if term[i].abs() > 1e-18 * sum[i].abs().max(f64::MIN_POSITIVE) {
                    small = false;
                }
            }
            if small {
                break;
            }
        }
        sum
    }

    /// `∫₀^s |e^{-wE} y| dw` for `0 ≤ s ≤ h`.
    fn partial_integral(&self, s: f64, y: &[f64]) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let (_, unit_weights) = gauss_legendre();
        self.unit_nodes
            .iter()
            .zip(unit_weights)
            .map(|(c, w)| w * s * norm(&self.propagate_partial(c * s, y)))
            .sum()
    }

    /// Forward panel walk from `y` until the tail is negligible. Returns the
    /// per-panel integrals and the starting vector of each panel.
    fn forward_panels(&self, y0: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut buf = vec![0.0; self.dim];
        let mut y = y0.to_vec();
        let mut ints = Vec::new();
        let mut starts = Vec::new();
        let mut total = 0.0;
        let mut quiet = 0;
        for _ in 0..MAX_PANELS {
            let p = self.panel(&y, &mut buf);
            if !p.is_finite() {
                return Err(Error::Domain("radial integral is not finite".into()));
            }
            total += p;
            ints.push(p);
            starts.push(y.clone());
            // relative to the level 1 searched by `decompose` as well as to
            // the total
            if p <= TAIL_REL * total.min(1.0) {
                quiet += 1;
                if quiet >= TAIL_PANELS {
                    return Ok((ints, starts));
                }
            } else {
                quiet = 0;
            }
            matvec(&self.step_fwd, &starts[starts.len() - 1], &mut y);
        }
        Err(Error::Domain("radial integral did not converge".into()))
    }

    /// `‖x‖_E`.
    pub fn radial_norm(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        if x.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        let (ints, _) = self.forward_panels(x)?;
        Ok(ints.iter().rev().sum())
    }

    /// Radial part and direction of a nonzero `x`.
    pub fn decompose(&self, x: &[f64]) -> Result<PolarCoords> {
        self.check_dim(x)?;
        let r = norm(x);
        if r == 0.0 {
            return Err(Error::ZeroPoint);
        }
        if !r.is_finite() {
            return Err(Error::Domain("point has non-finite entries".into()));
        }
        let a0 = r.ln();
        let start = mat_exp(&(self.op.entries() * -a0))?;
        let mut y0 = vec![0.0; self.dim];
        matvec(&to_flat(&start), x, &mut y0);

        let (ints, starts) = self.forward_panels(&y0)?;
        // suffix[j] = G(a0 + j h), summed from the tail for accuracy
        let mut suffix = vec![0.0; ints.len() + 1];
        for j in (0..ints.len()).rev() {
            suffix[j] = suffix[j + 1] + ints[j];
        }
        let (left, y_left, excess, panel_int) = if suffix[0] >= 1.0 {
            let j = (0..ints.len())
                .rev()
                .find(|&j| suffix[j] >= 1.0)
                .expect("suffix[0] >= 1");
            (a0 + j as f64 * self.h, starts[j].clone(), suffix[j] - 1.0, ints[j])
        } else {
            let mut buf = vec![0.0; self.dim];
            let mut y = y0.clone();
            let mut g = suffix[0];
            let mut k = 0usize;
            loop {
                k += 1;
                if k > MAX_PANELS {
                    return Err(Error::Domain("radial search did not bracket".into()));
                }
                let mut prev = vec![0.0; self.dim];
                matvec(&self.step_back, &y, &mut prev);
                y = prev;
                let p = self.panel(&y, &mut buf);
                if !p.is_finite() {
                    return Err(Error::Domain("radial integral is not finite".into()));
                }
                g += p;
                if g >= 1.0 {
                    break (a0 - k as f64 * self.h, y, g - 1.0, p);
                }
            }
        };

        // Solve ∫₀^s g(left + w) dw = excess for s in [0, h].
        let (mut lo, mut hi) = (0.0, self.h);
        let mut s = (excess / panel_int).clamp(0.0, 1.0) * self.h;
        for _ in 0..100 {
            let f = self.partial_integral(s, &y_left) - excess;
            if f > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let slope = norm(&self.propagate_partial(s, &y_left));
            let mut next = s - f / slope;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let step = (next - s).abs();
            s = next;
            if step <= 1e-15 * (1.0 + left.abs()) || hi - lo <= 1e-15 {
                break;
            }
        }
        let v = left + s;
        Ok(PolarCoords {
            tau: v.exp(),
            direction: self.propagate_partial(s, &y_left),
        })
    }

    pub fn tau(&self, x: &[f64]) -> Result<f64> {
        self.decompose(x).map(|p| p.tau)
    }
}

/// `‖x‖_E`; zero at the origin.
pub fn radial_norm(e: &Operator, x: &[f64]) -> Result<f64> {
    Polar::new(e)?.radial_norm(x)
}

pub fn tau(e: &Operator, x: &[f64]) -> Result<f64> {
    Polar::new(e)?.tau(x)
}

pub fn decompose(e: &Operator, x: &[f64]) -> Result<PolarCoords> {
    Polar::new(e)?.decompose(x)
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, log_lo: f64, log_hi: f64) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&g);
        if n > 1e-12 {
            let r = 10f64.powf(rng.random_range(log_lo..log_hi));
            return g.into_iter().map(|v| v * r / n).collect();
        }
    }
}

/// Lower estimate of the quasi-triangle constant `sup τ(x+y)/(τ(x)+τ(y))`.
///
/// Half the pairs are collinear (`y = c·x`, `c > 0`), where the supremum is
/// attained for `E = I`.
pub fn triangle_constant(e: &Operator, n_samples: usize, rng_seed: u64) -> Result<f64> {
    let polar = Polar::new(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let d = e.dim();
    let mut best: f64 = 0.0;
    for k in 0..n_samples.max(1) {
        let x = random_point(&mut rng, d, -2.0, 2.0);
        let y = if k % 2 == 0 {
            let c = 10f64.powf(rng.random_range(-2.0..2.0));
            x.iter().map(|v| v * c).collect()
        } else {
            random_point(&mut rng, d, -2.0, 2.0)
        };
        let s: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        if norm(&s) == 0.0 {
            continue;
        }
        let ratio = polar.tau(&s)? / (polar.tau(&x)? + polar.tau(&y)?);
        best = best.max(ratio);
    }
    Ok(best)
}

/// Extremes of `τ(x) / Σ|x_j|^{γ_j}` under `E = diag(1/γ_j)` for points with
/// `|x|` spread log-uniformly over `[1e-3, 1e3]`.
pub fn tau_sandwich_check(gammas: &[f64], n_samples: usize, rng_seed: u64) -> Result<(f64, f64)> {
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(Error::GammaOutOfRange(*g));
    }
    let e = Operator::diagonal(&gammas.iter().map(|g| 1.0 / g).collect::<Vec<_>>())?;
    let polar = Polar::new(&e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..n_samples.max(1) {
        let x = random_point(&mut rng, gammas.len(), -3.0, 3.0);
        let s: f64 = x.iter().zip(gammas).map(|(v, g)| v.abs().powf(*g)).sum();
        let ratio = polar.tau(&x)? / s;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    Ok((lo, hi))
}

fn operator_key(e: &Operator) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    e.dim().hash(&mut h);
    for v in e.entries().iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Memoized `τ` keyed by (operator hash, exact point bits). Results are
/// identical to uncached calls; the cache is shared behind a lock.
#[derive(Debug, Default)]
pub struct TauCache {
    map: Mutex<HashMap<(u64, Vec<u64>), f64>>,
}

impl TauCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tau(&self, polar: &Polar, x: &[f64]) -> Result<f64> {
        let key = (
            operator_key(polar.operator()),
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        );
        if let Some(v) = self.map.lock().expect("tau cache poisoned").get(&key) {
            return Ok(*v);
        }
        let v = polar.tau(x)?;
        self.map.lock().expect("tau cache poisoned").insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("tau cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `r^E x` as a plain vector.
pub fn apply_pow(r: f64, e: &Operator, x: &[f64]) -> Result<Vec<f64>> {
    let p = crate::linops::mat_pow(r, e.entries())?;
    Ok((p * DVector::from_column_slice(x)).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre();
        for k in 0..31 {
            let s: f64 = x.iter().zip(w).map(|(x, w)| w * x.powi(k)).sum();
            assert!((s - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "degree {k}");
        }
    }

    #[test]
    fn identity_operator_gives_euclidean_norm() {
        let e = Operator::identity(2);
        assert!((radial_norm(&e, &[0.0, 3.0]).unwrap() - 3.0).abs() < 1e-12);
        assert!((tau(&e, &[0.0, 5.0]).unwrap() - 5.0).abs() < 1e-12);
        let p = decompose(&e, &[3.0, 4.0]).unwrap();
        assert!((p.tau - 5.0).abs() < 1e-12);
        assert!((p.direction[0] - 0.6).abs() < 1e-12 && (p.direction[1] - 0.8).abs() < 1e-12);
        assert_eq!(radial_norm(&e, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_two_closed_form() {
        let e = Operator::diagonal(&[2.0, 2.0]).unwrap();
        assert!((radial_norm(&e, &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        let p = decompose(&e, &[2.0, 0.0]).unwrap();
        assert!((p.tau - 1.0).abs() < 1e-10);
        assert!((p.direction[0] - 2.0).abs() < 1e-9 && p.direction[1].abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let e = Operator::diagonal(&[1.0, -1.0]).unwrap();
        assert!(matches!(radial_norm(&e, &[1.0, 0.0]), Err(Error::NotInQ(_))));
        let e = Operator::identity(2);
        assert_eq!(tau(&e, &[0.0, 0.0]), Err(Error::ZeroPoint));
        assert!(matches!(
            tau_sandwich_check(&[0.5, 1.2], 10, 0),
            Err(Error::GammaOutOfRange(_))
        ));
    }

    #[test]
    fn cache_matches_direct() {
        let e = Operator::from_rows(&[vec![2.0, 1.0], vec![-1.0, 2.0]]).unwrap();
        let polar = Polar::new(&e).unwrap();
        let cache = TauCache::new();
        for x in [[1.0, 2.0], [-0.3, 0.1], [1.0, 2.0]] {
            assert_eq!(cache.tau(&polar, &x).unwrap(), polar.tau(&x).unwrap());
        }
        assert_eq!(cache.len(), 2);
    }
}
