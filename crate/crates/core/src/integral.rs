//! Quadrature grids and discretized stochastic integrals
//! `I(Q) = ∫ Q(u) M(du)` and `Ĩ(Q̃) = Re ∫ Q̃(u) M̃(du)`.
//!
//! Two cell layouts are available:
//!
//! * Shells: images of `(r, θ) ↦ r^{E'} θ`, `θ` on the Euclidean unit sphere,
//!   where `E'` is the scaling operator written in a frame in which its
//!   symmetric part is positive definite (a Lyapunov frame if needed). Radii
//!   are geometric, `r_i = r_out·2^{-i/radial_steps}`, so the grid maps onto
//!   itself under `2^{E}` up to its first and last shells. Volumes are exact:
//!   `dx = r^{q-1} ⟨E'θ, θ⟩ dr dS(θ)`.
//! * Lattice: a midpoint rule on `[-L, L]^d`, invariant under lattice
//!   translations up to its boundary.
//!
//! A cell whose closure contains a declared singular point is evaluated at
//! its corner farthest from that point. Any other non-finite value is an
//! error.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{mat_exp, mat_pow, Operator};
use crate::stable::{fill_isotropic, StableSpec, StreamKey};

/// Cells per block in deterministic parallel reductions.
pub const REDUCTION_CHUNK: usize = 256;

/// Where the shells start and stop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ShellRange {
    /// Chosen from the evaluation points and the integrand's decay rates so
    /// that each truncated tail carries at most about `tail_tol` of the
    /// integral.
    Auto { tail_tol: f64 },
    Fixed { r_out: f64, shells: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum QuadratureSpec {
    ShellProduct {
        range: ShellRange,
        /// Geometric radial cells per dyadic shell.
        radial_steps: usize,
        /// Angular cells: `angular_steps` arcs in two dimensions,
        /// `angular_steps` height bands times `2·angular_steps` sectors in
        /// three.
        angular_steps: usize,
    },
    MidpointLattice {
        half_width: f64,
        cells_per_axis: usize,
    },
}

impl QuadratureSpec {
    pub fn shells(r_out: f64, shells: usize, radial_steps: usize, angular_steps: usize) -> Self {
        Self::ShellProduct {
            range: ShellRange::Fixed { r_out, shells },
            radial_steps,
            angular_steps,
        }
    }

    pub fn lattice(half_width: f64, cells_per_axis: usize) -> Self {
        Self::MidpointLattice {
            half_width,
            cells_per_axis,
        }
    }

    /// Extension ladder at fixed local resolution. Rung `k` of a fixed shell
    /// grid has `2^k` times the shells, the added ones split between the
    /// outer and inner ends on whole dyadic shells so that every cell of a
    /// rung reappears unchanged in the next; a lattice doubles its
    /// half-width and its cells per axis (cells keep their size and, for an
    /// even count, their positions).
    pub fn ladder(&self, rungs: usize) -> Result<Vec<QuadratureSpec>> {
        (0..rungs)
            .map(|k| {
                let f = 1usize << k;
                match *self {
                    QuadratureSpec::ShellProduct {
                        range: ShellRange::Fixed { r_out, shells },
                        radial_steps,
                        angular_steps,
                    } => {
                        let added = shells * (f - 1);
                        Ok(QuadratureSpec::ShellProduct {
                            range: ShellRange::Fixed {
                                r_out: r_out * 2f64.powi(added.div_ceil(2) as i32),
                                shells: shells * f,
                            },
                            radial_steps,
                            angular_steps,
                        })
                    }
                    QuadratureSpec::ShellProduct { .. } => Err(Error::Domain(
                        "ladders need a fixed shell range".into(),
                    )),
                    QuadratureSpec::MidpointLattice {
                        half_width,
                        cells_per_axis,
                    } => Ok(QuadratureSpec::MidpointLattice {
                        half_width: half_width * f as f64,
                        cells_per_axis: cells_per_axis * f,
                    }),
                }
            })
            .collect()
    }
}

/// Coordinates in which the scaling operator has positive definite
/// symmetric part: `x' = Lᵀ x`, `E' = Lᵀ E L^{-ᵀ}`.
#[derive(Debug, Clone)]
pub struct ShellFrame {
    op: Operator,
    frame_op: DMatrix<f64>,
    to_frame: DMatrix<f64>,
    from_frame: DMatrix<f64>,
    inv_det: f64,
}

impl ShellFrame {
    pub fn new(e: &Operator) -> Result<Self> {
        if !e.is_in_q() {
            return Err(Error::NotInQ(e.eig_real_min()));
        }
        let d = e.dim();
        let a = e.entries();
        let sym = (a + a.transpose()) * 0.5;
        let min_sym = sym.clone().symmetric_eigenvalues().min();
        let ident = DMatrix::<f64>::identity(d, d);
        if min_sym > 1e-10 * crate::linops::op_norm(a).max(1.0) {
            return Ok(Self {
                op: e.clone(),
                frame_op: a.clone(),
                to_frame: ident.clone(),
                from_frame: ident,
                inv_det: 1.0,
            });
        }
        // Eᵀ S + S E = I, in column-major vec form.
        let at = a.transpose();
        let n2 = d * d;
        let kron = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            DMatrix::from_fn(n2, n2, |i, j| x[(i / d, j / d)] * y[(i % d, j % d)])
        };
        let sys = kron(&ident, &at) + kron(&at, &ident);
        let rhs = DVector::from_iterator(n2, ident.iter().copied());
        let vs = sys
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Domain("Lyapunov system is singular".into()))?;
        let s = DMatrix::from_column_slice(d, d, vs.as_slice());
        let s = (&s + s.transpose()) * 0.5;
        let l = Cholesky::new(s)
            .ok_or_else(|| Error::Domain("Lyapunov solution is not positive definite".into()))?
            .l();
        let lt = l.transpose();
        let lt_inv = lt
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Domain("Lyapunov factor is singular".into()))?;
        Ok(Self {
            op: e.clone(),
            frame_op: &lt * a * &lt_inv,
            to_frame: lt,
            inv_det: 1.0 / l.determinant().abs(),
            from_frame: lt_inv,
        })
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    /// `(r, θ)` with `Lᵀx = r^{E'} θ` and `|θ| = 1`.
    pub fn radius_direction(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let xf = &self.to_frame * DVector::from_column_slice(x);
        let n0 = xf.norm();
        if n0 == 0.0 {
            return Err(Error::ZeroPoint);
        }
        // s = ln r; ln|e^{-sE'}x'| is decreasing with slope in
        // [-λmax(sym E'), -λmin(sym E')].
        let sym = (&self.frame_op + self.frame_op.transpose()) * 0.5;
        let ev = sym.symmetric_eigenvalues();
        let (lmin, lmax) = (ev.min(), ev.max());
        let l0 = n0.ln();
        let (mut lo, mut hi) = if l0 >= 0.0 {
            (l0 / lmax, l0 / lmin)
        } else {
            (l0 / lmin, l0 / lmax)
        };
        let mut s = 0.5 * (lo + hi);
        let mut y = xf.clone();
        for _ in 0..200 {
            y = mat_exp(&(&self.frame_op * -s))? * &xf;
            let f = y.norm().ln();
            if f > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let slope = -(y.dot(&(&self.frame_op * &y))) / y.norm_squared();
            let mut next = s - f / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - s).abs();
            s = next;
            if step < 1e-15 * (1.0 + s.abs()) || hi - lo < 1e-15 * (1.0 + s.abs()) {
                y = mat_exp(&(&self.frame_op * -s))? * &xf;
                break;
            }
        }
        let ny = y.norm();
        Ok((s.exp(), y.iter().map(|v| v / ny).collect()))
    }

    pub fn shell_radius(&self, x: &[f64]) -> Result<f64> {
        self.radius_direction(x).map(|p| p.0)
    }

    fn weight(&self, patch: &Patch) -> f64 {
        let s = (&self.frame_op + self.frame_op.transpose()) * 0.5;
        match *patch {
            Patch::Sign(_) => s[(0, 0)],
            Patch::Arc(t0, t1) => {
                let f = |t: f64| {
                    s[(0, 0)] * (t / 2.0 + (2.0 * t).sin() / 4.0)
                        + s[(1, 1)] * (t / 2.0 - (2.0 * t).sin() / 4.0)
                        + s[(0, 1)] * t.sin().powi(2)
                };
                f(t1) - f(t0)
            }
            Patch::Band { z0, z1, p0, p1 } => {
                let dz = |f: &dyn Fn(f64) -> f64| f(z1) - f(z0);
                let dp = |f: &dyn Fn(f64) -> f64| f(p1) - f(p0);
                let z_side = dz(&|z| z - z * z * z / 3.0);
                let z_top = dz(&|z| z * z * z / 3.0);
                let z_mix = dz(&|z| -(1.0 - z * z).max(0.0).powf(1.5) / 3.0);
                s[(0, 0)] * z_side * dp(&|p| p / 2.0 + (2.0 * p).sin() / 4.0)
                    + s[(1, 1)] * z_side * dp(&|p| p / 2.0 - (2.0 * p).sin() / 4.0)
                    + s[(2, 2)] * z_top * (p1 - p0)
                    + 2.0 * s[(0, 1)] * z_side * dp(&|p| p.sin().powi(2) / 2.0)
                    + 2.0 * s[(0, 2)] * z_mix * dp(&|p| p.sin())
                    + 2.0 * s[(1, 2)] * z_mix * dp(&|p| -p.cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Patch {
    Sign(f64),
    Arc(f64, f64),
    Band { z0: f64, z1: f64, p0: f64, p1: f64 },
}

impl Patch {
    fn point(&self, a: f64, b: f64) -> Vec<f64> {
        match *self {
            Patch::Sign(s) => vec![s],
            Patch::Arc(t0, t1) => {
                let t = t0 + a * (t1 - t0);
                vec![t.cos(), t.sin()]
            }
            Patch::Band { z0, z1, p0, p1 } => {
                let z = z0 + a * (z1 - z0);
                let p = p0 + b * (p1 - p0);
                let rho = (1.0 - z * z).max(0.0).sqrt();
                vec![rho * p.cos(), rho * p.sin(), z]
            }
        }
    }

    fn center(&self) -> Vec<f64> {
        let mut c = self.point(0.5, 0.5);
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    fn corners(&self) -> Vec<Vec<f64>> {
        match self {
            Patch::Sign(_) => vec![self.point(0.0, 0.0)],
            Patch::Arc(..) => vec![self.point(0.0, 0.0), self.point(1.0, 0.0)],
            Patch::Band { .. } => vec![
                self.point(0.0, 0.0),
                self.point(1.0, 0.0),
                self.point(0.0, 1.0),
                self.point(1.0, 1.0),
            ],
        }
    }
}

#[derive(Debug, Clone)]
enum Geometry {
    Shells {
        frame: ShellFrame,
        radii: Vec<f64>,
        powers: Vec<DMatrix<f64>>,
        patches: Vec<Patch>,
        layout: (usize, usize),
    },
    Lattice {
        half_width: f64,
        n: usize,
    },
}

/// A realized quadrature: cell centers and volumes plus enough geometry to
/// recover corners and locate points.
#[derive(Debug, Clone)]
pub struct Grid {
    dim: usize,
    centers: Vec<f64>,
    volumes: Vec<f64>,
    geometry: Geometry,
}

impl Grid {
    /// Builds a grid. Shell rules need a fixed range here and use `scaling`
    /// as the shell operator; the lattice ignores it.
    pub fn new(quad: &QuadratureSpec, scaling: &Operator) -> Result<Self> {
        match *quad {
            QuadratureSpec::ShellProduct {
                range: ShellRange::Fixed { r_out, shells },
                radial_steps,
                angular_steps,
            } => Self::shells(scaling, r_out, shells, radial_steps, angular_steps),
            QuadratureSpec::ShellProduct { .. } => Err(Error::Domain(
                "automatic shell range must be resolved before building a grid".into(),
            )),
            QuadratureSpec::MidpointLattice {
                half_width,
                cells_per_axis,
            } => Self::lattice(scaling.dim(), half_width, cells_per_axis),
        }
    }

    pub fn shells(
        scaling: &Operator,
        r_out: f64,
        shells: usize,
        radial_steps: usize,
        angular_steps: usize,
    ) -> Result<Self> {
        if !(r_out > 0.0) || !r_out.is_finite() || shells == 0 || radial_steps == 0 || angular_steps == 0 {
            return Err(Error::Domain(
                "shell grid needs r_out > 0 and positive shell, radial and angular counts".into(),
            ));
        }
        let d = scaling.dim();
        let frame = ShellFrame::new(scaling)?;
        let patches: Vec<Patch> = match d {
            1 => vec![Patch::Sign(1.0), Patch::Sign(-1.0)],
            2 => (0..angular_steps)
                .map(|k| Patch::Arc(TAU * k as f64 / angular_steps as f64, TAU * (k + 1) as f64 / angular_steps as f64))
                .collect(),
            3 => {
                let (nz, np) = (angular_steps, 2 * angular_steps);
                let mut out = Vec::with_capacity(nz * np);
                for iz in 0..nz {
                    for ip in 0..np {
                        out.push(Patch::Band {
                            z0: -1.0 + 2.0 * iz as f64 / nz as f64,
                            z1: -1.0 + 2.0 * (iz + 1) as f64 / nz as f64,
                            p0: TAU * ip as f64 / np as f64,
                            p1: TAU * (ip + 1) as f64 / np as f64,
                        });
                    }
                }
                out
            }
            _ => {
                return Err(Error::Unsupported(format!(
                    "shell quadrature in dimension {d}; use the lattice rule"
                )))
            }
        };
        let layout = match d {
            3 => (angular_steps, 2 * angular_steps),
            _ => (patches.len(), 1),
        };
        let n_rad = shells * radial_steps;
        let radii: Vec<f64> = (0..=n_rad)
            .map(|i| r_out * 2f64.powf(-(i as f64) / radial_steps as f64))
            .collect();
        let powers = radii
            .iter()
            .map(|r| mat_pow(*r, &frame.frame_op))
            .collect::<Result<Vec<_>>>()?;
        let q = scaling.trace();
        let weights: Vec<f64> = patches.iter().map(|p| frame.weight(p)).collect();
        let dirs: Vec<DVector<f64>> = patches
            .iter()
            .map(|p| DVector::from_vec(p.center()))
            .collect();
        let mut centers = Vec::with_capacity(n_rad * patches.len() * d);
        let mut volumes = Vec::with_capacity(n_rad * patches.len());
        for i in 0..n_rad {
            let (rb, ra) = (radii[i], radii[i + 1]);
            let rc = (ra * rb).sqrt();
            let pc = &frame.from_frame * mat_pow(rc, &frame.frame_op)?;
            let radial = rb.powf(q) * (1.0 - (ra / rb).powf(q)) / q;
            for (dir, w) in dirs.iter().zip(&weights) {
                centers.extend((&pc * dir).iter());
                volumes.push(radial * w * frame.inv_det);
            }
        }
        Ok(Self {
            dim: d,
            centers,
            volumes,
            geometry: Geometry::Shells {
                frame,
                radii,
                powers,
                patches,
                layout,
            },
        })
    }

    pub fn lattice(dim: usize, half_width: f64, n: usize) -> Result<Self> {
        if !(half_width > 0.0) || n == 0 || dim == 0 {
            return Err(Error::Domain("lattice needs positive half-width and cell count".into()));
        }
        let h = 2.0 * half_width / n as f64;
        let total = n.checked_pow(dim as u32).ok_or_else(|| Error::Domain("lattice too large".into()))?;
        let mut centers = Vec::with_capacity(total * dim);
        for k in 0..total {
            let mut rem = k;
            for _ in 0..dim {
                centers.push(-half_width + (rem % n) as f64 * h + 0.5 * h);
                rem /= n;
            }
        }
        Ok(Self {
            dim,
            centers,
            volumes: vec![h.powi(dim as i32); total],
            geometry: Geometry::Lattice { half_width, n },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn total_volume(&self) -> f64 {
        chunked_sum(&self.volumes)
    }

    /// Inner and outer shell radii, or `(0, L)` for a lattice.
    pub fn radial_extent(&self) -> (f64, f64) {
        match &self.geometry {
            Geometry::Shells { radii, .. } => (radii[radii.len() - 1], radii[0]),
            Geometry::Lattice { half_width, .. } => (0.0, *half_width),
        }
    }

    pub fn corners(&self, k: usize) -> Vec<Vec<f64>> {
        match &self.geometry {
            Geometry::Shells {
                frame,
                powers,
                patches,
                ..
            } => {
                let (i, a) = (k / patches.len(), k % patches.len());
                let mut out = Vec::new();
                for p in [&powers[i], &powers[i + 1]] {
                    let m = &frame.from_frame * p;
                    for c in patches[a].corners() {
                        out.push((&m * DVector::from_vec(c)).iter().copied().collect());
                    }
                }
                out
            }
            Geometry::Lattice { half_width, n } => {
                let h = 2.0 * half_width / *n as f64;
                let mut idx = Vec::with_capacity(self.dim);
                let mut rem = k;
                for _ in 0..self.dim {
                    idx.push(rem % n);
                    rem /= n;
                }
                (0..1usize << self.dim)
                    .map(|mask| {
                        (0..self.dim)
                            .map(|a| -half_width + (idx[a] + ((mask >> a) & 1)) as f64 * h)
                            .collect()
                    })
                    .collect()
            }
        }
    }

    /// Indices of cells whose closure contains `p`.
    pub fn touching(&self, p: &[f64]) -> Vec<usize> {
        let near = |t: f64, n: usize| -> Vec<usize> {
            let r = t.round();
            let mut out = Vec::new();
            if (t - r).abs() < 1e-9 {
                if r >= 1.0 && r - 1.0 < n as f64 {
                    out.push(r as usize - 1);
                }
                if r >= 0.0 && r < n as f64 {
                    out.push(r as usize);
                }
            } else if t >= 0.0 && t < n as f64 {
                out.push(t.floor() as usize);
            }
            out
        };
        let product = |axes: Vec<Vec<usize>>, sizes: Vec<usize>| -> Vec<usize> {
            let mut out = vec![0usize];
            let mut stride = 1;
            for (ax, size) in axes.iter().zip(&sizes) {
                out = out
                    .iter()
                    .flat_map(|base| ax.iter().map(move |i| base + i * stride))
                    .collect();
                stride *= size;
            }
            out
        };
        match &self.geometry {
            Geometry::Lattice { half_width, n } => {
                let h = 2.0 * half_width / *n as f64;
                let axes = p.iter().map(|v| near((v + half_width) / h, *n)).collect();
                product(axes, vec![*n; self.dim])
            }
            Geometry::Shells {
                frame,
                radii,
                patches,
                layout,
                ..
            } => {
                let Ok((r, theta)) = frame.radius_direction(p) else {
                    return Vec::new();
                };
                let n_rad = radii.len() - 1;
                let steps = n_rad as f64 / (radii[0] / radii[n_rad]).log2();
                let radial = near((radii[0] / r).log2() * steps, n_rad);
                let angular: Vec<usize> = match self.dim {
                    1 => vec![if theta[0] > 0.0 { 0 } else { 1 }],
                    2 => {
                        let t = theta[1].atan2(theta[0]).rem_euclid(TAU);
                        let n = patches.len();
                        let mut a = near(t / TAU * n as f64, n);
                        if (t / TAU * n as f64 - n as f64).abs() < 1e-9 || t < 1e-12 {
                            a.push(0);
                            a.push(n - 1);
                        }
                        a.sort_unstable();
                        a.dedup();
                        a
                    }
                    _ => {
                        let (nz, np) = *layout;
                        let zi = near((theta[2] + 1.0) / 2.0 * nz as f64, nz);
                        let pole = theta[2].abs() > 1.0 - 1e-9;
                        let t = theta[1].atan2(theta[0]).rem_euclid(TAU);
                        let mut pi: Vec<usize> = if pole {
                            (0..np).collect()
                        } else {
                            near(t / TAU * np as f64, np)
                        };
                        if t < 1e-12 {
                            pi.push(np - 1);
                        }
                        pi.sort_unstable();
                        pi.dedup();
                        zi.iter()
                            .flat_map(|z| pi.iter().map(move |p| z * np + p))
                            .collect()
                    }
                };
                radial
                    .iter()
                    .flat_map(|i| angular.iter().map(move |a| i * patches.len() + a))
                    .collect()
            }
        }
    }
}

impl Grid {
    /// Cells whose sample point needs moving away from a singular point `p`:
    /// every cell touching `p` on a shell grid, only the cell containing `p`
    /// in its interior on a lattice (midpoints stay clear of cell faces).
    pub fn singular_cells(&self, p: &[f64]) -> Vec<usize> {
        match &self.geometry {
            Geometry::Lattice { half_width, n } => {
                let h = 2.0 * half_width / *n as f64;
                let on_face = p.iter().any(|v| {
                    let t = (v + half_width) / h;
                    (t - t.round()).abs() < 1e-9
                });
                if on_face {
                    Vec::new()
                } else {
                    self.touching(p)
                }
            }
            Geometry::Shells { .. } => self.touching(p),
        }
    }
}

/// Deterministic parallel sum: fixed chunks, each summed in order, then the
/// chunk sums in order.
pub fn chunked_sum(values: &[f64]) -> f64 {
    let partial: Vec<f64> = values
        .par_chunks(REDUCTION_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// Value of a matrix integrand at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixValue {
    pub re: DMatrix<f64>,
    pub im: Option<DMatrix<f64>>,
}

impl MatrixValue {
    fn is_finite(&self) -> bool {
        self.re.iter().all(|v| v.is_finite())
            && self.im.as_ref().is_none_or(|m| m.iter().all(|v| v.is_finite()))
    }
}

pub type IntegrandFn = Arc<dyn Fn(&[f64]) -> Result<MatrixValue> + Send + Sync>;

/// Matrix-valued integrand `u ↦ Q(u)` (optionally complex `Q̃₁ + iQ̃₂`).
#[derive(Clone)]
pub struct MatrixField {
    pub d: usize,
    pub m: usize,
    pub complex: bool,
    pub eval: IntegrandFn,
    pub singular_points: Vec<Vec<f64>>,
}

impl std::fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MatrixField")
            .field("d", &self.d)
            .field("m", &self.m)
            .field("complex", &self.complex)
            .field("singular_points", &self.singular_points)
            .finish()
    }
}

impl MatrixField {
    pub fn real(d: usize, m: usize, f: impl Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync + 'static) -> Self {
        Self {
            d,
            m,
            complex: false,
            eval: Arc::new(move |u| Ok(MatrixValue { re: f(u)?, im: None })),
            singular_points: Vec::new(),
        }
    }

    pub fn complex(
        d: usize,
        m: usize,
        f: impl Fn(&[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> + Send + Sync + 'static,
    ) -> Self {
        Self {
            d,
            m,
            complex: true,
            eval: Arc::new(move |u| {
                let (re, im) = f(u)?;
                Ok(MatrixValue { re, im: Some(im) })
            }),
            singular_points: Vec::new(),
        }
    }

    pub fn with_singular_points(mut self, points: Vec<Vec<f64>>) -> Self {
        self.singular_points = points;
        self
    }

    pub fn zero(d: usize, m: usize) -> Self {
        Self::real(d, m, move |_| Ok(DMatrix::zeros(m, m)))
    }
}

/// Integrand values on every cell of a grid (row-major `m×m` per cell).
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub m: usize,
    pub volumes: Vec<f64>,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

/// Evaluates `q` on `grid`, applying the singular-cell policy.
pub fn discretize(q: &MatrixField, grid: &Grid) -> Result<Sampled> {
    if grid.dim() != q.d {
        return Err(Error::Dimension {
            expected: q.d,
            got: grid.dim(),
        });
    }
    let mut special: Vec<Vec<usize>> = vec![Vec::new(); grid.len()];
    for (s_idx, s) in q.singular_points.iter().enumerate() {
        for k in grid.singular_cells(s) {
            special[k].push(s_idx);
        }
    }
    let values: Vec<MatrixValue> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let at = if special[k].is_empty() {
                grid.center(k).to_vec()
            } else {
                // corner farthest from every singular point the cell touches
                let clearance = |c: &Vec<f64>| {
                    special[k]
                        .iter()
                        .map(|&i| c.iter().zip(&q.singular_points[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                };
                grid.corners(k)
                    .into_iter()
                    .max_by(|a, b| clearance(a).total_cmp(&clearance(b)))
                    .expect("cells have corners")
            };
            let v = (q.eval)(&at)?;
            if v.re.shape() != (q.m, q.m) {
                return Err(Error::Dimension {
                    expected: q.m,
                    got: v.re.nrows(),
                });
            }
            if !v.is_finite() {
                return Err(Error::IntegrandSingularity(grid.center(k).to_vec()));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let mm = q.m * q.m;
    let mut re = Vec::with_capacity(grid.len() * mm);
    let mut im = q.complex.then(|| Vec::with_capacity(grid.len() * mm));
    for v in &values {
        push_row_major(&mut re, &v.re);
        if let Some(im) = im.as_mut() {
            match &v.im {
                Some(x) => push_row_major(im, x),
                None => im.extend(std::iter::repeat_n(0.0, mm)),
            }
        }
    }
    Ok(Sampled {
        m: q.m,
        volumes: grid.volumes().to_vec(),
        re,
        im,
    })
}

/// Per-cell vectors `v_k = Σ_j Q_j(u_k)ᵀ θ_j` (and the imaginary analogue):
/// the integrand of the linear functional `Σ_j ⟨θ_j, I(Q_j)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub m: usize,
    pub volumes: Vec<f64>,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
}

impl Projected {
    pub fn combine(terms: &[(&Sampled, &[f64])]) -> Result<Self> {
        let (first, _) = terms.first().ok_or_else(|| Error::Domain("no terms to combine".into()))?;
        let (m, n) = (first.m, first.volumes.len());
        let complex = terms.iter().any(|(s, _)| s.im.is_some());
        let mut re = vec![0.0; n * m];
        let mut im = complex.then(|| vec![0.0; n * m]);
        for (s, theta) in terms {
            if s.m != m || s.volumes.len() != n || theta.len() != m {
                return Err(Error::Dimension {
                    expected: m,
                    got: theta.len(),
                });
            }
            let tr = |src: &[f64], dst: &mut [f64]| {
                for k in 0..n {
                    let q = &src[k * m * m..(k + 1) * m * m];
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += q[i * m + j] * theta[i];
                        }
                        dst[k * m + j] += acc;
                    }
                }
            };
            tr(&s.re, &mut re);
            if let (Some(src), Some(dst)) = (&s.im, im.as_mut()) {
                tr(src, dst);
            }
        }
        Ok(Self {
            m,
            volumes: first.volumes.clone(),
            re,
            im,
        })
    }

    /// `Σ_k vol_k (|v_k^R|² + |v_k^I|²)^{α/2}`.
    pub fn cf_exponent(&self, alpha: f64) -> f64 {
        let m = self.m;
        let terms: Vec<f64> = (0..self.volumes.len())
            .map(|k| {
                let mut s2: f64 = self.re[k * m..(k + 1) * m].iter().map(|v| v * v).sum();
                if let Some(im) = &self.im {
                    s2 += im[k * m..(k + 1) * m].iter().map(|v| v * v).sum::<f64>();
                }
                if s2 == 0.0 {
                    0.0
                } else {
                    self.volumes[k] * s2.powf(alpha / 2.0)
                }
            })
            .collect();
        chunked_sum(&terms)
    }
}

impl Sampled {
    pub fn project(&self, theta: &[f64]) -> Result<Projected> {
        Projected::combine(&[(self, theta)])
    }

    /// `Σ_k vol_k ‖Q_k‖^α` (plus `‖Q̃₂‖^α` when complex), operator norms.
    pub fn norm_integral(&self, alpha: f64) -> f64 {
        let m = self.m;
        let opn = |src: &[f64]| {
            let mat = DMatrix::from_row_slice(m, m, src);
            crate::linops::op_norm(&mat)
        };
        let terms: Vec<f64> = (0..self.volumes.len())
            .into_par_iter()
            .map(|k| {
                let mut s = opn(&self.re[k * m * m..(k + 1) * m * m]).powf(alpha);
                if let Some(im) = &self.im {
                    s += opn(&im[k * m * m..(k + 1) * m * m]).powf(alpha);
                }
                self.volumes[k] * s
            })
            .collect();
        chunked_sum(&terms)
    }
}

/// `∫ |Q(u)ᵀθ|^α du` on the grid.
pub fn cf_exponent_real(q: &MatrixField, theta: &[f64], alpha: f64, grid: &Grid) -> Result<f64> {
    let s = discretize(q, grid)?;
    let s = Sampled { im: None, ..s };
    Ok(s.project(theta)?.cf_exponent(alpha))
}

/// `∫ (|Q̃₁ᵀθ|² + |Q̃₂ᵀθ|²)^{α/2} du` on the grid; a missing imaginary part
/// counts as zero.
pub fn cf_exponent_complex(q: &MatrixField, theta: &[f64], alpha: f64, grid: &Grid) -> Result<f64> {
    Ok(discretize(q, grid)?.project(theta)?.cf_exponent(alpha))
}

/// Realizations of `Σ_k Q_j(u_k) M_k` for several integrands `Q_j` sharing
/// one measure draw per replicate. Complex integrands use a `2m`-dimensional
/// draw per cell, `Q̃₁ M_R − Q̃₂ M_I`. Output layout: replicate-major, then
/// integrand, then component.
pub fn integrate_many(
    integrands: &[Sampled],
    alpha: f64,
    key: &StreamKey,
    replicates: std::ops::Range<u64>,
) -> Result<Vec<f64>> {
    let Some(first) = integrands.first() else {
        return Ok(Vec::new());
    };
    let (m, n) = (first.m, first.volumes.len());
    if integrands.iter().any(|s| s.m != m || s.volumes.len() != n) {
        return Err(Error::Domain("integrands must share one grid".into()));
    }
    let complex = integrands.iter().any(|s| s.im.is_some());
    let spec = StableSpec::new(alpha, if complex { 2 * m } else { m })?;
    let scales: Vec<f64> = first.volumes.iter().map(|v| v.powf(1.0 / alpha)).collect();
    let np = integrands.len();
    let per_rep = np * m;
    let out: Vec<Vec<f64>> = replicates
        .into_par_iter()
        .map(|rep| {
            let mut acc = vec![0.0; per_rep];
            let mut draw = vec![0.0; spec.m];
            let mut rng = key.replicate(rep);
            for k in 0..n {
                fill_isotropic(&spec, scales[k], &mut rng, &mut draw);
                let (mr, mi) = draw.split_at(m);
                for (j, s) in integrands.iter().enumerate() {
                    let q = &s.re[k * m * m..(k + 1) * m * m];
                    let dst = &mut acc[j * m..(j + 1) * m];
                    for a in 0..m {
                        let row = &q[a * m..(a + 1) * m];
                        dst[a] += row.iter().zip(mr).map(|(x, y)| x * y).sum::<f64>();
                    }
                    if let Some(im) = &s.im {
                        let q2 = &im[k * m * m..(k + 1) * m * m];
                        for a in 0..m {
                            let row = &q2[a * m..(a + 1) * m];
                            dst[a] -= row.iter().zip(mi).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            acc
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// One realization of `∫ Q(u) M(du)`.
pub fn integrate_real(q: &MatrixField, alpha: f64, grid: &Grid, key: &StreamKey, replicate: u64) -> Result<Vec<f64>> {
    let s = discretize(q, grid)?;
    integrate_many(&[Sampled { im: None, ..s }], alpha, key, replicate..replicate + 1)
}

/// One realization of `Re ∫ Q̃(u) M̃(du)`.
pub fn integrate_complex(q: &MatrixField, alpha: f64, grid: &Grid, key: &StreamKey, replicate: u64) -> Result<Vec<f64>> {
    let mut s = discretize(q, grid)?;
    if s.im.is_none() {
        s.im = Some(vec![0.0; s.re.len()]);
    }
    integrate_many(&[s], alpha, key, replicate..replicate + 1)
}

/// Outcome of a refinement/extension ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Integrability {
    Finite {
        value: f64,
        /// Relative change between the last two rungs.
        proxy: f64,
        rungs: Vec<f64>,
    },
    Diverging {
        rungs: Vec<f64>,
    },
}

impl Integrability {
    pub fn is_finite(&self) -> bool {
        matches!(self, Integrability::Finite { .. })
    }

    pub fn rungs(&self) -> &[f64] {
        match self {
            Integrability::Finite { rungs, .. } | Integrability::Diverging { rungs } => rungs,
        }
    }
}

/// Relative change threshold between the last two rungs.
pub const DIVERGENCE_THRESHOLD: f64 = 0.10;

/// Classifies a sequence of ladder estimates. Aitken extrapolation is used
/// when the last three rungs converge geometrically.
pub fn classify_ladder(rungs: Vec<f64>) -> Integrability {
    let n = rungs.len();
    if n == 0 || rungs.iter().any(|v| !v.is_finite()) {
        return Integrability::Diverging { rungs };
    }
    if n == 1 {
        return Integrability::Finite {
            value: rungs[0],
            proxy: f64::NAN,
            rungs,
        };
    }
    let (a, b) = (rungs[n - 2], rungs[n - 1]);
    let proxy = if b == 0.0 && a == 0.0 { 0.0 } else { (b - a).abs() / b.abs().max(a.abs()) };
    if proxy > DIVERGENCE_THRESHOLD {
        return Integrability::Diverging { rungs };
    }
    let mut value = b;
    if n >= 3 {
        let (x0, x1, x2) = (rungs[n - 3], a, b);
        let (d1, d2) = (x1 - x0, x2 - x1);
        let ratio = d2 / d1;
        if d1 != 0.0 && ratio.is_finite() && ratio.abs() < 0.9 {
            value = x2 + d2 * ratio / (1.0 - ratio);
        }
    }
    Integrability::Finite { value, proxy, rungs }
}

/// `∫ ‖Q(u)‖^α du` (with `‖Q̃₂‖^α` added when complex) along a ladder.
pub fn integrability_diagnostic(q: &MatrixField, alpha: f64, ladder: &[Grid]) -> Result<Integrability> {
    let rungs = ladder
        .iter()
        .map(|g| discretize(q, g).map(|s| s.norm_integral(alpha)))
        .collect::<Result<Vec<_>>>()?;
    Ok(classify_ladder(rungs))
}

/// Builds every grid of a ladder.
pub fn build_ladder(base: &QuadratureSpec, rungs: usize, scaling: &Operator) -> Result<Vec<Grid>> {
    base.ladder(rungs)?.iter().map(|q| Grid::new(q, scaling)).collect()
}

/// Number of extra dyadic shells after which a tail decaying by `2^{-rate}`
/// per shell drops below `tol` of the total, capped at [`MAX_MARGIN_SHELLS`].
/// A tail that does not decay gets [`NONDECAYING_MARGIN_SHELLS`], enough for
/// a ladder to expose the growth.
pub fn margin_shells(rate: f64, tol: f64) -> usize {
    if !(rate > 0.0) {
        return NONDECAYING_MARGIN_SHELLS;
    }
    let per = 2f64.powf(-rate);
    let need = (tol * (1.0 - per)).ln() / per.ln();
    (need.ceil().max(1.0) as usize).min(MAX_MARGIN_SHELLS)
}

pub const MAX_MARGIN_SHELLS: usize = 96;
pub const NONDECAYING_MARGIN_SHELLS: usize = 8;

/// Predicted fraction carried by a tail beyond `shells` extra dyadic shells.
pub fn tail_fraction(rate: f64, shells: usize) -> f64 {
    if !(rate > 0.0) {
        return f64::INFINITY;
    }
    let per = 2f64.powf(-rate);
    per.powi(shells as i32) / (1.0 - per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn identity_shell_volumes_sum_to_annulus() {
        let e = Operator::identity(2);
        let g = Grid::shells(&e, 4.0, 5, 2, 24).unwrap();
        let want = PI * (16.0 - (4.0 / 32.0f64).powi(2));
        assert!((g.total_volume() - want).abs() < 1e-12 * want);
        let e3 = Operator::identity(3);
        let g = Grid::shells(&e3, 1.0, 3, 1, 6).unwrap();
        let want = 4.0 / 3.0 * PI * (1.0 - 0.125f64.powi(3));
        assert!((g.total_volume() - want).abs() < 1e-12);
    }

    #[test]
    fn lattice_geometry() {
        let g = Grid::lattice(2, 1.0, 4).unwrap();
        assert_eq!(g.len(), 16);
        assert!((g.total_volume() - 4.0).abs() < 1e-14);
        assert_eq!(g.touching(&[0.0, 0.0]).len(), 4);
        assert_eq!(g.touching(&[0.1, 0.2]).len(), 1);
        assert_eq!(g.touching(&[-1.0, -1.0]), vec![0]);
        assert!(g.touching(&[5.0, 0.0]).is_empty());
        let k = g.touching(&[0.1, 0.2])[0];
        let c = g.center(k);
        assert!((c[0] - 0.25).abs() < 1e-15 && (c[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shell_touching_finds_own_cell() {
        let e = Operator::from_rows(&[vec![1.0, 0.8], vec![0.0, 1.0]]).unwrap();
        let g = Grid::shells(&e, 8.0, 6, 2, 12).unwrap();
        for k in [0, 17, 55, 100] {
            let hits = g.touching(g.center(k));
            assert_eq!(hits, vec![k], "cell {k}");
        }
    }

    #[test]
    fn ladder_rules() {
        assert!(!classify_ladder(vec![1.0, 2.0]).is_finite());
        match classify_ladder(vec![1.0, 1.05, 1.075]) {
            Integrability::Diverging { .. } => panic!("expected finite"),
            Integrability::Finite { value, .. } => assert!((value - 1.1).abs() < 1e-12),
        }
        assert!(!classify_ladder(vec![1.0, f64::INFINITY]).is_finite());
        assert_eq!(margin_shells(0.0, 1e-4), NONDECAYING_MARGIN_SHELLS);
    }
}
