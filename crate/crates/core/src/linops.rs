//! Dense small-matrix machinery: matrix exponential, matrix powers `r^A`,
//! operator norm and the Q / M operator classes.
//!
//! `r^A` is always `exp((ln r) A)`. The exponential uses scaling and squaring
//! with diagonal Padé approximants of degree 3, 5, 7, 9 or 13, chosen from the
//! 1-norm of the argument.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{domain, Error, Result};

/// Tolerance on eigenvalue real parts used by [`classify`].
pub const TOL_EIG: f64 = 1e-9;

/// A square real matrix together with its spectral metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    entries: DMatrix<f64>,
    eigenvalues: Vec<Complex<f64>>,
    trace: f64,
    eig_real_min: f64,
    eig_real_max: f64,
}

impl Operator {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return domain(format!(
                "operator must be a non-empty square matrix, got {}x{}",
                entries.nrows(),
                entries.ncols()
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return domain("operator entries must be finite");
        }
        let eigenvalues: Vec<Complex<f64>> =
            entries.clone().complex_eigenvalues().iter().copied().collect();
        let trace = entries.trace();
        let (lo, hi) = eigenvalues
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
                (lo.min(z.re), hi.max(z.re))
            });
        Ok(Self {
            entries,
            eigenvalues,
            trace,
            eig_real_min: lo,
            eig_real_max: hi,
        })
    }

    /// Builds an operator from row-major nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return domain("operator rows must form a square matrix");
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is a valid operator")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn eigenvalues(&self) -> &[Complex<f64>] {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn eig_real_min(&self) -> f64 {
        self.eig_real_min
    }

    pub fn eig_real_max(&self) -> f64 {
        self.eig_real_max
    }

    /// The adjoint `A*` (transpose, since operators are real).
    pub fn adjoint(&self) -> Operator {
        Operator::new(self.entries.transpose()).expect("transpose of a valid operator")
    }

    pub fn scaled(&self, c: f64) -> Result<Operator> {
        Operator::new(&self.entries * c)
    }

    pub fn is_in_q(&self) -> bool {
        self.eig_real_min > TOL_EIG
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.entries.row(i).iter().copied().collect())
            .collect()
    }
}

/// Membership in Q(R^n) (all eigenvalue real parts positive) and M(R^n)
/// (non-negative real parts, imaginary-axis eigenvalues semisimple).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OperatorClass {
    pub in_q: bool,
    pub in_m: bool,
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
// Largest 1-norms for which each degree is accurate to unit roundoff.
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut u = &ident * b[1];
    let mut v = &ident * b[0];
    let mut pow = ident;
    for k in 1..b.len() / 2 {
        pow = &pow * &a2;
        u += &pow * b[2 * k + 1];
        v += &pow * b[2 * k];
    }
    (a * u, v)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    (u, v)
}

/// Matrix exponential by scaling and squaring.
pub fn mat_exp(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return domain("matrix exponential needs a square matrix");
    }
    if a.iter().any(|v| !v.is_finite()) {
        return domain("matrix exponential of non-finite entries");
    }
    let n = a.nrows();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::identity(n, n));
    }
    let nrm = norm1(a);
    let (u, v, squarings) = match THETA.iter().find(|(_, t)| nrm <= *t) {
        Some(&(3, _)) => {
            let (u, v) = pade_low(a, &PADE3);
            (u, v, 0)
        }
        Some(&(5, _)) => {
            let (u, v) = pade_low(a, &PADE5);
            (u, v, 0)
        }
        Some(&(7, _)) => {
            let (u, v) = pade_low(a, &PADE7);
            (u, v, 0)
        }
        Some(_) => {
            let (u, v) = pade_low(a, &PADE9);
            (u, v, 0)
        }
        None => {
            let s = ((nrm / THETA13).log2().ceil()).max(0.0) as i32;
            let scaled = a * 2f64.powi(-s);
            let (u, v) = pade13(&scaled);
            (u, v, s)
        }
    };
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).ok_or(Error::ExpOverflow)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::ExpOverflow);
    }
    Ok(r)
}

/// `exp(A) − I`, accurate when `A` is small.
pub fn mat_expm1(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if norm1(a) >= 0.5 {
        let n = a.nrows();
        return Ok(mat_exp(a)? - DMatrix::identity(n, n));
    }
    let mut term = a.clone();
    let mut sum = a.clone();
    for k in 2..=30 {
        term = &term * a / k as f64;
        sum += &term;
        if norm1(&term) <= f64::EPSILON * norm1(&sum) {
            break;
        }
    }
    Ok(sum)
}

/// `r^A = exp((ln r) A)`; exactly the identity at `r = 1`.
pub fn mat_pow(r: f64, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(r > 0.0) || !r.is_finite() {
        return domain(format!("matrix power needs r > 0, got {r}"));
    }
    if r == 1.0 {
        return Ok(DMatrix::identity(a.nrows(), a.ncols()));
    }
    mat_exp(&(a * r.ln()))
}

/// `c^A` for a positive scalar `c`; `c = 0` is a singular point of the map.
pub fn scalar_pow(c: f64, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c == 0.0 {
        return domain("scalar power at zero is singular");
    }
    mat_pow(c, a)
}

/// Largest singular value.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

fn complex_rank(m: &DMatrix<Complex<f64>>, tol: f64) -> usize {
    m.clone().singular_values().iter().filter(|s| **s > tol).count()
}

/// Classifies `a` into Q / M using eigenvalue real parts with tolerance
/// [`TOL_EIG`]. Semisimplicity of imaginary-axis eigenvalues is decided by
/// comparing algebraic multiplicity (clustered eigenvalues) with geometric
/// multiplicity (`n - rank(A - λI)`).
pub fn classify(a: &Operator) -> OperatorClass {
    let n = a.dim();
    let scale = op_norm(a.entries()).max(1.0);
    let eig = a.eigenvalues();
    let in_q = eig.iter().all(|z| z.re > TOL_EIG);
    if in_q {
        return OperatorClass { in_q, in_m: true };
    }
    if eig.iter().any(|z| z.re < -TOL_EIG) {
        return OperatorClass { in_q, in_m: false };
    }
    let cluster_tol = 1e-6 * scale;
    let rank_tol = 1e-7 * scale;
    let cm = a.entries().map(|v| Complex::new(v, 0.0));
    let mut in_m = true;
    for z in eig.iter().filter(|z| z.re.abs() <= TOL_EIG) {
        let cluster: Vec<&Complex<f64>> =
            eig.iter().filter(|w| (*w - z).norm() <= cluster_tol).collect();
        let algebraic = cluster.len();
        let mean = cluster.iter().fold(Complex::new(0.0, 0.0), |acc, w| acc + **w)
            / algebraic as f64;
        let shifted = &cm - DMatrix::<Complex<f64>>::identity(n, n) * mean;
        let geometric = n - complex_rank(&shifted, rank_tol);
        if geometric < algebraic {
            in_m = false;
            break;
        }
    }
    OperatorClass { in_q, in_m }
}

/// Determinant helper used by the Lebesgue-scaling checks.
pub fn det(a: &DMatrix<f64>) -> f64 {
    a.clone().determinant()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Truncated Taylor series with many terms, evaluated after scaling.
    fn taylor_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let s = 8;
        let scaled = a / 2f64.powi(s);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..40 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(mat_exp(&z).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn exp_of_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let e = mat_exp(&a).unwrap();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((e[(1, 1)] - 2f64.exp()).abs() < 1e-13);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn exp_of_nilpotent() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = mat_exp(&a).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(max_abs_diff(&e, &want) < 1e-15);
    }

    #[test]
    fn exp_matches_series_for_large_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(1..=4);
            let scale = rng.random_range(0.01..12.0);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * scale);
            let got = mat_exp(&a).unwrap();
            let want = taylor_exp(&a);
            let err = op_norm(&(&got - &want)) / op_norm(&want);
            assert!(err < 1e-12, "relative error {err} for norm {}", op_norm(&a));
        }
    }

    #[test]
    fn exp_overflow_is_reported() {
        let a = DMatrix::from_row_slice(1, 1, &[1000.0]);
        assert_eq!(mat_exp(&a), Err(Error::ExpOverflow));
    }

    #[test]
    fn pow_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let p = mat_pow(2.0, &a).unwrap();
        assert!((p[(0, 0)] - 4.0).abs() < 1e-13 && (p[(1, 1)] - 8.0).abs() < 1e-13);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let p = mat_pow(2.0, &nil).unwrap();
        assert!((p[(0, 1)] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(mat_pow(1.0, &a).unwrap(), DMatrix::identity(2, 2));
        assert!(matches!(mat_pow(0.0, &a), Err(Error::Domain(_))));
        assert!(matches!(mat_pow(-1.0, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn classification_examples() {
        let rot = Operator::from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(classify(&rot), OperatorClass { in_q: true, in_m: true });
        let jordan0 = Operator::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(classify(&jordan0), OperatorClass { in_q: false, in_m: false });
        let zero = Operator::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(classify(&zero), OperatorClass { in_q: false, in_m: true });
        let skew = Operator::from_rows(&[vec![0.0, -2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(classify(&skew), OperatorClass { in_q: false, in_m: true });
        let neg = Operator::diagonal(&[1.0, -0.5]).unwrap();
        assert_eq!(classify(&neg), OperatorClass { in_q: false, in_m: false });
        // 0 is semisimple here even though the block [[1,1],[0,1]] is not.
        let mixed = Operator::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(classify(&mixed), OperatorClass { in_q: false, in_m: true });
    }

    #[test]
    fn op_norm_examples() {
        assert!((op_norm(&DMatrix::identity(3, 3)) - 1.0).abs() < 1e-14);
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -5.0]);
        assert!((op_norm(&d) - 5.0).abs() < 1e-13);
        // dense angular scan oracle
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let scan = (0..100_000)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 100_000.0;
                let v = &a * DVector::from_column_slice(&[t.cos(), t.sin()]);
                v.norm()
            })
            .fold(0.0, f64::max);
        assert!((scan - 2.0).abs() < 1e-9);
        assert!((op_norm(&a) - scan).abs() < 1e-9);
    }

    #[test]
    fn trace_and_eigen_metadata() {
        let a = Operator::from_rows(&[vec![2.0, 1.0], vec![-1.0, 2.0]]).unwrap();
        assert!((a.trace() - 4.0).abs() < 1e-15);
        assert!((a.eig_real_min() - 2.0).abs() < 1e-12);
        assert!((a.eig_real_max() - 2.0).abs() < 1e-12);
        assert!(a.is_in_q());
    }
}
