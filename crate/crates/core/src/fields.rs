//! Moving-average and harmonizable operator-self-similar stable fields.
//!
//! Moving average: `X(x) = ∫ [φ(x−y)^{D−qI/α} − φ(−y)^{D−qI/α}] M(dy)`.
//! Harmonizable: `X(x) = Re ∫ (e^{i⟨x,y⟩} − 1) ψ(y)^{−D−qI/α} M̃(dy)`.
//!
//! Both are `(E, D)`-operator-self-similar with `q = tr E`. The first needs
//! `H < β` and a kernel homogeneous under `E`; the second needs `H < a₁` and
//! a kernel homogeneous under `Eᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homog::KernelSpec;
use crate::integral::{
    discretize, integrability_diagnostic, integrate_many, margin_shells, tail_fraction, Grid, Integrability,
    MatrixField, Projected, QuadratureSpec, Sampled, ShellFrame, ShellRange,
};
use crate::linops::{mat_exp, mat_expm1, mat_pow, Operator, TOL_EIG};
use crate::stable::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MovingAverage,
    Harmonizable,
}

/// Complete recipe for one field.
#[derive(Debug, Clone)]
pub struct FieldSpec {
    pub e: Operator,
    pub d: Operator,
    pub alpha: f64,
    pub kernel: KernelSpec,
    pub variant: Variant,
    pub quad: QuadratureSpec,
}

impl FieldSpec {
    /// Builds a spec and checks the existence hypotheses.
    pub fn new(
        e: Operator,
        d: Operator,
        alpha: f64,
        kernel: KernelSpec,
        variant: Variant,
        quad: QuadratureSpec,
    ) -> Result<Self> {
        let spec = Self::unchecked(e, d, alpha, kernel, variant, quad)?;
        spec.check_hypotheses()?;
        Ok(spec)
    }

    /// Builds a spec checking only shapes and ranges; used for negative
    /// controls that deliberately violate the existence hypotheses.
    pub fn unchecked(
        e: Operator,
        d: Operator,
        alpha: f64,
        kernel: KernelSpec,
        variant: Variant,
        quad: QuadratureSpec,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 2], got {alpha}")));
        }
        if !e.is_in_q() {
            return Err(Error::NotInQ(e.eig_real_min()));
        }
        if !d.is_in_q() {
            return Err(Error::NotInQ(d.eig_real_min()));
        }
        if let crate::homog::KernelKind::SumPowers { gammas } = &kernel.kind {
            if gammas.len() != e.dim() {
                return Err(Error::Dimension {
                    expected: e.dim(),
                    got: gammas.len(),
                });
            }
        }
        Ok(Self {
            e,
            d,
            alpha,
            kernel,
            variant,
            quad,
        })
    }

    pub fn check_hypotheses(&self) -> Result<()> {
        match self.variant {
            Variant::MovingAverage if self.big_h() >= self.kernel.beta => Err(Error::Hypothesis(format!(
                "H ≥ β: largest real part of D's eigenvalues ({}) must be below the kernel's admissibility order ({})",
                self.big_h(),
                self.kernel.beta
            ))),
            Variant::Harmonizable if self.big_h() >= self.a1() => Err(Error::Hypothesis(format!(
                "H ≥ a₁: largest real part of D's eigenvalues ({}) must be below the smallest real part of E's ({})",
                self.big_h(),
                self.a1()
            ))),
            _ => Ok(()),
        }
    }

    pub fn dim_d(&self) -> usize {
        self.e.dim()
    }

    pub fn dim_m(&self) -> usize {
        self.d.dim()
    }

    pub fn q(&self) -> f64 {
        self.e.trace()
    }

    pub fn h(&self) -> f64 {
        self.d.eig_real_min()
    }

    pub fn big_h(&self) -> f64 {
        self.d.eig_real_max()
    }

    pub fn a1(&self) -> f64 {
        self.e.eig_real_min()
    }

    /// `D − qI/α` (moving average) or `−D − qI/α` (harmonizable).
    pub fn exponent(&self) -> DMatrix<f64> {
        let m = self.dim_m();
        let shift = DMatrix::<f64>::identity(m, m) * (self.q() / self.alpha);
        match self.variant {
            Variant::MovingAverage => self.d.entries() - shift,
            Variant::Harmonizable => -self.d.entries() - shift,
        }
    }

    /// False for a moving average when `q/α` is an eigenvalue of `D`.
    pub fn is_proper(&self) -> bool {
        match self.variant {
            Variant::Harmonizable => true,
            Variant::MovingAverage => {
                let target = self.q() / self.alpha;
                self.d
                    .eigenvalues()
                    .iter()
                    .all(|z| (z.re - target).abs() > TOL_EIG || z.im.abs() > TOL_EIG)
            }
        }
    }

    /// Operator generating the integration-domain scaling: `E` for the
    /// moving average, `Eᵀ` (frequency space) for the harmonizable field.
    pub fn domain_operator(&self) -> Operator {
        match self.variant {
            Variant::MovingAverage => self.e.clone(),
            Variant::Harmonizable => self.e.adjoint(),
        }
    }

    /// Decay rates per dyadic shell of `‖integrand‖^α` toward infinity and
    /// toward the origin of the integration domain.
    pub fn tail_rates(&self) -> (f64, f64) {
        match self.variant {
            Variant::MovingAverage => (self.alpha * (self.kernel.beta - self.big_h()), self.alpha * self.h()),
            Variant::Harmonizable => (self.alpha * self.h(), self.alpha * (self.a1() - self.big_h())),
        }
    }

    pub fn integrand(&self, x: &[f64]) -> Result<MatrixField> {
        match self.variant {
            Variant::MovingAverage => ma_integrand(self, x),
            Variant::Harmonizable => harm_integrand(self, x),
        }
    }
}

fn nan_matrix(m: usize) -> DMatrix<f64> {
    DMatrix::from_element(m, m, f64::NAN)
}

/// `c ↦ c^A` with a fast path for diagonal `A`.
#[derive(Debug, Clone)]
enum PowerMap {
    Diagonal(Vec<f64>),
    General(DMatrix<f64>),
}

impl PowerMap {
    fn new(a: DMatrix<f64>) -> Self {
        let off_diagonal = (0..a.nrows()).any(|i| (0..a.ncols()).any(|j| i != j && a[(i, j)] != 0.0));
        if off_diagonal {
            PowerMap::General(a)
        } else {
            PowerMap::Diagonal(a.diagonal().iter().copied().collect())
        }
    }

    fn dim(&self) -> usize {
        match self {
            PowerMap::Diagonal(d) => d.len(),
            PowerMap::General(a) => a.nrows(),
        }
    }

    /// `c^A`; NaN at `c = 0`, where the integrand is declared singular.
    fn pow(&self, c: f64) -> Result<DMatrix<f64>> {
        if !(c > 0.0) || !c.is_finite() {
            return Ok(nan_matrix(self.dim()));
        }
        match self {
            PowerMap::Diagonal(d) => Ok(DMatrix::from_diagonal(&DVector::from_iterator(
                d.len(),
                d.iter().map(|e| c.powf(*e)),
            ))),
            PowerMap::General(a) if c == 1.0 => Ok(DMatrix::identity(a.nrows(), a.ncols())),
            PowerMap::General(a) => mat_exp(&(a * c.ln())),
        }
    }

    /// `exp(tA) − I`.
    fn expm1(&self, t: f64) -> Result<DMatrix<f64>> {
        match self {
            PowerMap::Diagonal(d) => Ok(DMatrix::from_diagonal(&DVector::from_iterator(
                d.len(),
                d.iter().map(|e| (t * e).exp_m1()),
            ))),
            PowerMap::General(a) => mat_expm1(&(a * t)),
        }
    }
}

fn check_point(spec: &FieldSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.dim_d() {
        return Err(Error::Dimension {
            expected: spec.dim_d(),
            got: x.len(),
        });
    }
    Ok(())
}

/// `y ↦ φ(x−y)^{D−qI/α} − φ(−y)^{D−qI/α}`, singular at `y ∈ {0, x}`.
pub fn ma_integrand(spec: &FieldSpec, x: &[f64]) -> Result<MatrixField> {
    check_point(spec, x)?;
    let (d, m) = (spec.dim_d(), spec.dim_m());
    if x.iter().all(|v| *v == 0.0) {
        return Ok(MatrixField::zero(d, m).with_singular_points(vec![vec![0.0; d]]));
    }
    let a = PowerMap::new(spec.exponent());
    let k = spec.kernel.clone();
    let xv = x.to_vec();
    let singular = vec![vec![0.0; d], x.to_vec()];
    Ok(MatrixField::real(d, m, move |y| {
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let base = k.eval(&neg);
        let delta = k.increment(&xv, &neg);
        if !(base > 0.0) || !(base + delta > 0.0) {
            return Ok(nan_matrix(m));
        }
        // c₁^A − c₂^A = c₂^A (exp(ln(c₁/c₂) A) − I)
        let log_ratio = (delta / base).ln_1p();
        Ok(a.pow(base)? * a.expm1(log_ratio)?)
    })
    .with_singular_points(singular))
}

/// Real and imaginary parts `(cos⟨x,y⟩ − 1)P`, `sin⟨x,y⟩ P` with
/// `P = ψ(y)^{−D−qI/α}`; singular at `y = 0`.
pub fn harm_integrand(spec: &FieldSpec, x: &[f64]) -> Result<MatrixField> {
    check_point(spec, x)?;
    let (d, m) = (spec.dim_d(), spec.dim_m());
    let a = PowerMap::new(spec.exponent());
    let k = spec.kernel.clone();
    let xv = x.to_vec();
    let zero = x.iter().all(|v| *v == 0.0);
    Ok(MatrixField::complex(d, m, move |y| {
        if zero {
            return Ok((DMatrix::zeros(m, m), DMatrix::zeros(m, m)));
        }
        let p = a.pow(k.eval(y))?;
        let phase: f64 = xv.iter().zip(y).map(|(a, b)| a * b).sum();
        let half = (0.5 * phase).sin();
        Ok((&p * (-2.0 * half * half), &p * phase.sin()))
    })
    .with_singular_points(vec![vec![0.0; d]]))
}

/// How an automatic shell range was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMargins {
    pub r_in: f64,
    pub r_out: f64,
    pub shells: usize,
    pub outer_rate: f64,
    pub inner_rate: f64,
    pub outer_extra_shells: usize,
    pub inner_extra_shells: usize,
    /// Predicted relative size of the truncated tails.
    pub outer_tail: f64,
    pub inner_tail: f64,
}

/// A quadrature with a concrete (non-automatic) range, plus the margins
/// used to choose it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPlan {
    pub quad: QuadratureSpec,
    pub margins: Option<GridMargins>,
}

/// Characteristic scale of each nonzero evaluation point in the integration
/// domain: the shell radius under `E` for the moving average, its inverse
/// (a frequency scale) for the harmonizable field.
fn point_scales(spec: &FieldSpec, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let frame = ShellFrame::new(&spec.e)?;
    points
        .iter()
        .filter(|x| x.iter().any(|v| *v != 0.0))
        .map(|x| {
            let r = frame.shell_radius(x)?;
            Ok(match spec.variant {
                Variant::MovingAverage => r,
                Variant::Harmonizable => 1.0 / r,
            })
        })
        .collect()
}

/// Resolves an automatic shell range for the given evaluation points. The
/// result scales covariantly: points `r^E x_j` give the image grid.
pub fn plan_grid(spec: &FieldSpec, points: &[Vec<f64>]) -> Result<GridPlan> {
    match spec.quad {
        QuadratureSpec::ShellProduct {
            range: ShellRange::Auto { tail_tol },
            radial_steps,
            angular_steps,
        } => {
            let scales = point_scales(spec, points)?;
            let (lo, hi) = if scales.is_empty() {
                (1.0, 1.0)
            } else {
                scales
                    .iter()
                    .fold((f64::INFINITY, 0.0f64), |(lo, hi), s| (lo.min(*s), hi.max(*s)))
            };
            let (outer_rate, inner_rate) = spec.tail_rates();
            let n_out = margin_shells(outer_rate, tail_tol);
            let n_in = margin_shells(inner_rate, tail_tol);
            let spread = (hi / lo).log2();
            let shells = (n_out as f64 + n_in as f64 + 6.0 + spread - 1e-9).ceil() as usize;
            let r_out = 8.0 * hi * 2f64.powi(n_out as i32);
            let margins = GridMargins {
                r_in: r_out * 2f64.powi(-(shells as i32)),
                r_out,
                shells,
                outer_rate,
                inner_rate,
                outer_extra_shells: n_out,
                inner_extra_shells: n_in,
                outer_tail: tail_fraction(outer_rate, n_out + 3),
                inner_tail: tail_fraction(inner_rate, n_in + 3),
            };
            Ok(GridPlan {
                quad: QuadratureSpec::ShellProduct {
                    range: ShellRange::Fixed { r_out, shells },
                    radial_steps,
                    angular_steps,
                },
                margins: Some(margins),
            })
        }
        quad => Ok(GridPlan { quad, margins: None }),
    }
}

pub fn build_grid(spec: &FieldSpec, points: &[Vec<f64>]) -> Result<(Grid, GridPlan)> {
    let plan = plan_grid(spec, points)?;
    let grid = Grid::new(&plan.quad, &spec.domain_operator())?;
    Ok((grid, plan))
}

/// Ladder of grids used by the finiteness functionals: the resolved range
/// for `points`, doubled twice symmetrically.
pub fn upsilon_ladder(spec: &FieldSpec, points: &[Vec<f64>], rungs: usize) -> Result<Vec<Grid>> {
    let mut s = spec.clone();
    if !matches!(s.quad, QuadratureSpec::ShellProduct { range: ShellRange::Auto { .. }, .. }) {
        s.quad = default_quadrature();
    }
    if let QuadratureSpec::ShellProduct { radial_steps, angular_steps, .. } = &mut s.quad {
        *radial_steps = 1;
        *angular_steps = (*angular_steps).clamp(4, 16);
    }
    let plan = plan_grid(&s, points)?;
    let op = s.domain_operator();
    plan.quad.ladder(rungs)?.iter().map(|q| Grid::new(q, &op)).collect()
}

pub fn default_quadrature() -> QuadratureSpec {
    QuadratureSpec::ShellProduct {
        range: ShellRange::Auto { tail_tol: 1e-4 },
        radial_steps: 1,
        angular_steps: 16,
    }
}

fn upsilon(spec: &FieldSpec, x: &[f64], ladder: &[Grid]) -> Result<Integrability> {
    let f = spec.integrand(x)?;
    integrability_diagnostic(&f, spec.alpha, ladder).map(|r| match r {
        Integrability::Finite { value, proxy, rungs } => Integrability::Finite {
            value: value.powf(1.0 / spec.alpha),
            proxy,
            rungs: rungs.iter().map(|v| v.powf(1.0 / spec.alpha)).collect(),
        },
        other => other,
    })
}

/// `Υ_φ(x) = (∫ ‖φ(x−y)^{D−qI/α} − φ(−y)^{D−qI/α}‖^α dy)^{1/α}`.
pub fn upsilon_ma(spec: &FieldSpec, x: &[f64], ladder: &[Grid]) -> Result<Integrability> {
    if spec.variant != Variant::MovingAverage {
        return Err(Error::Domain("upsilon_ma needs a moving-average spec".into()));
    }
    upsilon(spec, x, ladder)
}

/// `Υ_ψ(x)`: the harmonizable analogue with `|1−cos|^α + |sin|^α` weights.
pub fn upsilon_harm(spec: &FieldSpec, x: &[f64], ladder: &[Grid]) -> Result<Integrability> {
    if spec.variant != Variant::Harmonizable {
        return Err(Error::Domain("upsilon_harm needs a harmonizable spec".into()));
    }
    upsilon(spec, x, ladder)
}

/// Replicated field values at a list of points.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub spec_digest: String,
    pub points: Vec<Vec<f64>>,
    pub m: usize,
    pub n_rep: usize,
    pub master_seed: u64,
    /// Replicate-major, then point, then component.
    pub values: Vec<f64>,
    pub margins: Option<GridMargins>,
    pub cells: usize,
    pub upsilon: Vec<Integrability>,
}

impl FieldSample {
    pub fn value(&self, rep: usize, point: usize) -> &[f64] {
        let off = (rep * self.points.len() + point) * self.m;
        &self.values[off..off + self.m]
    }

    /// All replicates at one point.
    pub fn at_point(&self, point: usize) -> Vec<Vec<f64>> {
        (0..self.n_rep).map(|r| self.value(r, point).to_vec()).collect()
    }

    /// `Σ_j ⟨θ_j, X(x_j)⟩` per replicate.
    pub fn linear_functional(&self, thetas: &[Vec<f64>]) -> Vec<f64> {
        (0..self.n_rep)
            .map(|r| {
                thetas
                    .iter()
                    .enumerate()
                    .map(|(j, t)| self.value(r, j).iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            })
            .collect()
    }
}

/// Options for [`simulate_with`].
#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    /// Skip the finiteness ladder (used when the caller already checked).
    pub skip_upsilon: bool,
    /// Right-multiplier applied to every value (`r^D` style post-processing).
    pub post_multiply: Option<DMatrix<f64>>,
}

/// Simulates the field at `points`, one shared measure draw per replicate.
pub fn simulate(spec: &FieldSpec, points: &[Vec<f64>], n_rep: usize, master_seed: u64) -> Result<FieldSample> {
    simulate_with(spec, points, n_rep, master_seed, &SimulateOptions::default())
}

pub fn simulate_with(
    spec: &FieldSpec,
    points: &[Vec<f64>],
    n_rep: usize,
    master_seed: u64,
    opts: &SimulateOptions,
) -> Result<FieldSample> {
    spec.check_hypotheses()?;
    for x in points {
        check_point(spec, x)?;
    }
    let mut ups = Vec::new();
    if !opts.skip_upsilon {
        let ladder = upsilon_ladder(spec, points, 3)?;
        for x in points {
            let u = upsilon(spec, x, &ladder)?;
            if !u.is_finite() {
                return Err(Error::FieldUndefined(x.clone()));
            }
            ups.push(u);
        }
    }
    let (grid, plan) = build_grid(spec, points)?;
    let sampled = points
        .iter()
        .map(|x| discretize(&spec.integrand(x)?, &grid))
        .collect::<Result<Vec<Sampled>>>()?;
    let key = StreamKey::new(master_seed);
    let mut values = integrate_many(&sampled, spec.alpha, &key, 0..n_rep as u64)?;
    let m = spec.dim_m();
    if let Some(p) = &opts.post_multiply {
        for chunk in values.chunks_mut(m) {
            let v = p * DVector::from_column_slice(chunk);
            chunk.copy_from_slice(v.as_slice());
        }
    }
    Ok(FieldSample {
        spec_digest: String::new(),
        points: points.to_vec(),
        m,
        n_rep,
        master_seed,
        values,
        margins: plan.margins,
        cells: grid.len(),
        upsilon: ups,
    })
}

/// Two CF exponents that the theory says coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfIdentity {
    pub left: f64,
    pub right: f64,
    pub rel_gap: f64,
}

impl CfIdentity {
    fn new(left: f64, right: f64) -> Self {
        let scale = left.abs().max(right.abs());
        let rel_gap = if scale == 0.0 { 0.0 } else { (left - right).abs() / scale };
        Self { left, right, rel_gap }
    }
}

/// CF exponent of `Σ_j ⟨θ_j, X(x_j)⟩` for `terms = [(x_j, θ_j)]` on `grid`.
pub fn functional_cf_exponent(spec: &FieldSpec, terms: &[(Vec<f64>, Vec<f64>)], grid: &Grid) -> Result<f64> {
    let sampled = terms
        .iter()
        .map(|(x, _)| discretize(&spec.integrand(x)?, grid))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&Sampled, &[f64])> = sampled.iter().zip(terms).map(|(s, (_, t))| (s, t.as_slice())).collect();
    Ok(Projected::combine(&refs)?.cf_exponent(spec.alpha))
}

fn transpose_apply(m: &DMatrix<f64>, theta: &[f64]) -> Vec<f64> {
    (m.transpose() * DVector::from_column_slice(theta)).iter().copied().collect()
}

/// CF exponents of `Σ⟨θ_j, X(r^E x_j)⟩` and `Σ⟨θ_j, r^D X(x_j)⟩` on one grid.
pub fn oss_cf_identity(spec: &FieldSpec, r: f64, pairs: &[(Vec<f64>, Vec<f64>)], grid: &Grid) -> Result<CfIdentity> {
    let re = mat_pow(r, spec.e.entries())?;
    let rd = mat_pow(r, spec.d.entries())?;
    let left_terms: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|(x, t)| ((&re * DVector::from_column_slice(x)).iter().copied().collect(), t.clone()))
        .collect();
    let right_terms: Vec<(Vec<f64>, Vec<f64>)> =
        pairs.iter().map(|(x, t)| (x.clone(), transpose_apply(&rd, t))).collect();
    Ok(CfIdentity::new(
        functional_cf_exponent(spec, &left_terms, grid)?,
        functional_cf_exponent(spec, &right_terms, grid)?,
    ))
}

/// CF exponents of `Σ⟨θ_j, X(x_j+h) − X(h)⟩` and `Σ⟨θ_j, X(x_j)⟩`.
pub fn stationary_increments_cf_identity(
    spec: &FieldSpec,
    h: &[f64],
    pairs: &[(Vec<f64>, Vec<f64>)],
    grid: &Grid,
) -> Result<CfIdentity> {
    let mut left_terms = Vec::new();
    for (x, t) in pairs {
        left_terms.push((x.iter().zip(h).map(|(a, b)| a + b).collect(), t.clone()));
        left_terms.push((h.to_vec(), t.iter().map(|v| -v).collect()));
    }
    Ok(CfIdentity::new(
        functional_cf_exponent(spec, &left_terms, grid)?,
        functional_cf_exponent(spec, pairs, grid)?,
    ))
}

/// An identity evaluated along a quadrature ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderIdentity {
    pub rungs: Vec<CfIdentity>,
    /// Relative change of the left exponent between the last two rungs.
    pub proxy: f64,
}

impl LadderIdentity {
    pub fn last(&self) -> &CfIdentity {
        self.rungs.last().expect("ladder has rungs")
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.rel_gap).collect()
    }

    pub fn monotone(&self) -> bool {
        self.rungs.windows(2).all(|w| w[1].rel_gap <= w[0].rel_gap)
    }
}

fn ladder_of(rungs: Vec<CfIdentity>) -> LadderIdentity {
    let n = rungs.len();
    let proxy = if n >= 2 {
        let (a, b) = (rungs[n - 2].left, rungs[n - 1].left);
        (b - a).abs() / b.abs().max(a.abs()).max(f64::MIN_POSITIVE)
    } else {
        f64::NAN
    };
    LadderIdentity { rungs, proxy }
}

pub fn oss_cf_identity_ladder(
    spec: &FieldSpec,
    r: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
    base: &QuadratureSpec,
    rungs: usize,
) -> Result<LadderIdentity> {
    let op = spec.domain_operator();
    let out = base
        .ladder(rungs)?
        .iter()
        .map(|q| oss_cf_identity(spec, r, pairs, &Grid::new(q, &op)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ladder_of(out))
}

pub fn stationary_increments_cf_identity_ladder(
    spec: &FieldSpec,
    h: &[f64],
    pairs: &[(Vec<f64>, Vec<f64>)],
    base: &QuadratureSpec,
    rungs: usize,
) -> Result<LadderIdentity> {
    let op = spec.domain_operator();
    let out = base
        .ladder(rungs)?
        .iter()
        .map(|q| stationary_increments_cf_identity(spec, h, pairs, &Grid::new(q, &op)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ladder_of(out))
}

/// Residuals of the integrand transformation law under `x ↦ r^E x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceReport {
    /// Asserted form: moving average `r^{−q/α} r^D f_x(r^{−E}y)`,
    /// harmonizable `r^{q/α} r^D f_x(r^{Eᵀ}y)`.
    pub residual: f64,
    /// Harmonizable only: the form `r^{−q/α} r^D f_x(r^{−Eᵀ}y)`, reported
    /// but not expected to vanish.
    pub literal_residual: Option<f64>,
    pub probes_used: usize,
    pub probes_skipped: usize,
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

fn value_at(f: &MatrixField, y: &[f64]) -> Result<Option<(DMatrix<f64>, DMatrix<f64>)>> {
    let v = (f.eval)(y)?;
    let m = v.re.nrows();
    let im = v.im.unwrap_or_else(|| DMatrix::zeros(m, m));
    if v.re.iter().chain(im.iter()).all(|x| x.is_finite()) {
        Ok(Some((v.re, im)))
    } else {
        Ok(None)
    }
}

pub fn recurrence_residual(spec: &FieldSpec, r: f64, x: &[f64], probes: &[Vec<f64>]) -> Result<RecurrenceReport> {
    check_point(spec, x)?;
    let q_alpha = spec.q() / spec.alpha;
    let re = mat_pow(r, spec.e.entries())?;
    let rd = mat_pow(r, spec.d.entries())?;
    let rx: Vec<f64> = (&re * DVector::from_column_slice(x)).iter().copied().collect();
    let f_x = spec.integrand(x)?;
    let f_rx = spec.integrand(&rx)?;
    let apply = |m: &DMatrix<f64>, y: &[f64]| -> Vec<f64> { (m * DVector::from_column_slice(y)).iter().copied().collect() };
    let (inner, factor, literal) = match spec.variant {
        Variant::MovingAverage => (mat_pow(1.0 / r, spec.e.entries())?, r.powf(-q_alpha), None),
        Variant::Harmonizable => (
            re.transpose(),
            r.powf(q_alpha),
            Some((mat_pow(1.0 / r, spec.e.entries())?.transpose(), r.powf(-q_alpha))),
        ),
    };
    let (mut worst, mut worst_lit) = (0.0f64, 0.0f64);
    let (mut used, mut skipped) = (0, 0);
    for y in probes {
        let Some(lhs) = value_at(&f_rx, y)? else {
            skipped += 1;
            continue;
        };
        let Some(base) = value_at(&f_x, &apply(&inner, y))? else {
            skipped += 1;
            continue;
        };
        let rhs = (&rd * &base.0 * factor, &rd * &base.1 * factor);
        worst = worst.max(rel_diff(&lhs.0, &rhs.0)).max(rel_diff(&lhs.1, &rhs.1));
        if let Some((lit_inner, lit_factor)) = &literal {
            if let Some(b) = value_at(&f_x, &apply(lit_inner, y))? {
                let rl = (&rd * &b.0 * *lit_factor, &rd * &b.1 * *lit_factor);
                worst_lit = worst_lit.max(rel_diff(&lhs.0, &rl.0)).max(rel_diff(&lhs.1, &rl.1));
            }
        }
        used += 1;
    }
    Ok(RecurrenceReport {
        residual: worst,
        literal_residual: literal.map(|_| worst_lit),
        probes_used: used,
        probes_skipped: skipped,
    })
}

/// Largest condition number of `ψ(y)^{−D−qI/α}` over nonzero probes.
pub fn harm_condition_number(spec: &FieldSpec, probes: &[Vec<f64>]) -> Result<f64> {
    let a = PowerMap::new(spec.exponent());
    let mut worst: f64 = 1.0;
    for y in probes.iter().filter(|y| y.iter().any(|v| *v != 0.0)) {
        let p = a.pow(spec.kernel.eval(y))?;
        let sv = p.singular_values();
        worst = worst.max(sv.max() / sv.min());
    }
    Ok(worst)
}
