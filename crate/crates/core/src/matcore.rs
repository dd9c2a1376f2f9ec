//! Small dense complex matrices.
//!
//! Everything in the toolkit acts on the initial system (dimension 2 for the
//! qubit models) or on system ⊗ ancilla (dimension 4), so storage is a flat
//! row-major buffer that stays inline for 2×2 matrices. Operators (`+`, `-`,
//! `*`) panic on dimension mismatch; the named methods return `Result`.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex64;
use smallvec::SmallVec;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Default tolerances for the density-matrix invariants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateTolerances {
    pub hermitian: f64,
    pub trace: f64,
    /// Smallest admissible eigenvalue (negative slack).
    pub min_eigenvalue: f64,
}

impl Default for StateTolerances {
    fn default() -> Self {
        Self {
            hermitian: 1e-10,
            trace: 1e-10,
            min_eigenvalue: -1e-9,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    dim: usize,
    data: SmallVec<[C64; 4]>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix({}x{}) [", self.dim, self.dim)?;
        for i in 0..self.dim {
            write!(f, "  ")?;
            for j in 0..self.dim {
                let z = self[(i, j)];
                write!(f, "{:+.6e}{:+.6e}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.dim + j]
    }
}

impl ComplexMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "matrix dimension must be positive");
        Self {
            dim,
            data: SmallVec::from_elem(ZERO, dim * dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from row-major entries; `entries.len()` must be a square.
    pub fn from_entries(entries: &[C64]) -> Result<Self> {
        let dim = (entries.len() as f64).sqrt().round() as usize;
        if dim == 0 || dim * dim != entries.len() {
            return Err(Error::DimensionMismatch {
                left: entries.len(),
                right: dim * dim,
            });
        }
        Ok(Self {
            dim,
            data: SmallVec::from_slice(entries),
        })
    }

    pub fn from_rows<R: AsRef<[C64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::DimensionMismatch { left: 0, right: 1 });
        }
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: row.len(),
                    right: dim,
                });
            }
            for (j, z) in row.iter().enumerate() {
                m[(i, j)] = *z;
            }
        }
        Ok(m)
    }

    pub fn from_real_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cx: Vec<Vec<C64>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&x| C64::new(x, 0.0)).collect())
            .collect();
        Self::from_rows(&cx)
    }

    pub fn diag(values: &[C64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn entries(&self) -> &[C64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(j, i)] = self[(i, j)].conj();
            }
        }
        m
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self.mul_unchecked(other))
    }

    fn mul_unchecked(&self, other: &Self) -> Self {
        let n = self.dim;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == ZERO {
                    continue;
                }
                for j in 0..n {
                    m.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        m
    }

    /// `self · x · self†`.
    pub fn sandwich(&self, x: &Self) -> Self {
        &(self * x) * &self.adjoint()
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(&self.mul_unchecked(other) - &other.mul_unchecked(self))
    }

    pub fn anticommutator(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(&self.mul_unchecked(other) + &other.mul_unchecked(self))
    }

    pub fn scale(&self, c: C64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    pub fn scale_re(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, c: C64, other: &Self) {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Induced ∞-norm (maximum absolute row sum).
    pub fn inf_norm(&self) -> f64 {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn hermitian_deviation(&self) -> f64 {
        let n = self.dim;
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                dev = dev.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        dev
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_deviation() <= tol
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        let p = &self.adjoint() * self;
        (&p - &Self::identity(self.dim)).max_abs() <= tol
    }

    pub fn is_positive_semidefinite(&self, tol: f64) -> bool {
        match self.eig_hermitian(tol.max(1e-8)) {
            Ok(e) => e.values.first().is_none_or(|&v| v >= -tol),
            Err(_) => false,
        }
    }

    /// `(A + A†)/2`.
    pub fn hermitian_part(&self) -> Self {
        let n = self.dim;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = 0.5 * (self[(i, j)] + self[(j, i)].conj());
            }
        }
        m
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        let (n, m) = (self.dim, other.dim);
        let mut out = Self::zeros(n * m);
        for i in 0..n {
            for j in 0..n {
                let a = self[(i, j)];
                if a == ZERO {
                    continue;
                }
                for k in 0..m {
                    for l in 0..m {
                        out[(i * m + k, j * m + l)] = a * other[(k, l)];
                    }
                }
            }
        }
        out
    }

    /// Matrix exponential by scaling and squaring of a truncated Taylor series.
    ///
    /// The series is cut once the next term is below `tol / (2^s e^{‖A‖})`,
    /// which bounds the max-entry error of the squared result by `tol`.
    pub fn expm(&self, tol: f64) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::NonFinite("expm input"));
        }
        let n = self.dim;
        let norm = self.inf_norm();
        let squarings = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let scaled = self.scale_re(0.5f64.powi(squarings as i32));
        let threshold =
            tol.max(f64::MIN_POSITIVE) / (2f64.powi(squarings as i32) * norm.exp().max(1.0));

        let mut result = Self::identity(n);
        let mut term = Self::identity(n);
        for k in 1..=60 {
            term = (&term * &scaled).scale_re(1.0 / k as f64);
            result += &term;
            if term.max_abs() <= threshold * 1e-3 || term.max_abs() == 0.0 {
                break;
            }
        }
        for _ in 0..squarings {
            result = &result * &result;
        }
        if !result.is_finite() {
            return Err(Error::NonFinite("expm result"));
        }
        Ok(result)
    }

    /// Eigen-decomposition of a hermitian matrix by cyclic complex Jacobi
    /// rotations. Eigenvalues ascend; eigenvectors are the columns.
    pub fn eig_hermitian(&self, herm_tol: f64) -> Result<HermitianEigen> {
        let dev = self.hermitian_deviation();
        if dev > herm_tol {
            return Err(Error::NotHermitian(dev));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("eig_hermitian input"));
        }
        let n = self.dim;
        let mut a = self.hermitian_part();
        let mut v = Self::identity(n);
        let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

        for _sweep in 0..64 {
            let off: f64 = (0..n)
                .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
                .map(|(p, q)| a[(p, q)].norm_sqr())
                .sum();
            if off.sqrt() <= 1e-16 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    let mag = apq.norm();
                    if mag <= 1e-300 {
                        continue;
                    }
                    let phase = apq / mag;
                    let theta = (a[(q, q)].re - a[(p, p)].re) / (2.0 * mag);
                    let t = if theta == 0.0 {
                        1.0
                    } else {
                        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // Rotation J = diag(1, conj(phase)) on (p, q) composed with the real rotation.
                    let jpp = C64::new(c, 0.0);
                    let jpq = C64::new(s, 0.0);
                    let jqp = phase.conj() * (-s);
                    let jqq = phase.conj() * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = akp * jpp + akq * jqp;
                        a[(k, q)] = akp * jpq + akq * jqq;
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = vkp * jpp + vkq * jqp;
                        v[(k, q)] = vkp * jpq + vkq * jqq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = jpp.conj() * apk + jqp.conj() * aqk;
                        a[(q, k)] = jpq.conj() * apk + jqq.conj() * aqk;
                    }
                    a[(p, q)] = ZERO;
                    a[(q, p)] = ZERO;
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
        let values = order.iter().map(|&i| a[(i, i)].re).collect();
        let vectors = Self::from_fn(n, |r, c| v[(r, order[c])]);
        Ok(HermitianEigen { values, vectors })
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

impl HermitianEigen {
    /// `V · diag(λ) · V†`.
    pub fn reconstruct(&self) -> ComplexMatrix {
        let d = ComplexMatrix::diag(
            &self
                .values
                .iter()
                .map(|&x| C64::new(x, 0.0))
                .collect::<Vec<_>>(),
        );
        self.vectors.sandwich(&d)
    }
}

pub fn commutator(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    a.commutator(b)
}

pub fn matmul(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    a.matmul(b)
}

pub fn adjoint(a: &ComplexMatrix) -> ComplexMatrix {
    a.adjoint()
}

pub fn trace(a: &ComplexMatrix) -> C64 {
    a.trace()
}

pub fn expm(a: &ComplexMatrix, tol: f64) -> Result<ComplexMatrix> {
    a.expm(tol)
}

pub fn eig_hermitian(a: &ComplexMatrix) -> Result<HermitianEigen> {
    a.eig_hermitian(1e-8)
}

impl<'a> Add<&'a ComplexMatrix> for &'a ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        ComplexMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

impl<'a> Sub<&'a ComplexMatrix> for &'a ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        ComplexMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl<'a> Mul<&'a ComplexMatrix> for &'a ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        self.mul_unchecked(rhs)
    }
}

impl Add for ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: ComplexMatrix) -> ComplexMatrix {
        &self + &rhs
    }
}

impl Sub for ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: ComplexMatrix) -> ComplexMatrix {
        &self - &rhs
    }
}

impl Mul for ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: ComplexMatrix) -> ComplexMatrix {
        &self * &rhs
    }
}

impl Neg for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn neg(self) -> ComplexMatrix {
        self.scale_re(-1.0)
    }
}

impl AddAssign<&ComplexMatrix> for ComplexMatrix {
    fn add_assign(&mut self, rhs: &ComplexMatrix) {
        self.add_scaled(ONE, rhs);
    }
}

/// Pauli operators and qubit projectors in the basis (|e⟩, |g⟩).
pub mod pauli {
    use super::{ComplexMatrix, C64, I, ONE, ZERO};

    pub fn x() -> ComplexMatrix {
        ComplexMatrix::from_entries(&[ZERO, ONE, ONE, ZERO]).unwrap()
    }

    pub fn y() -> ComplexMatrix {
        ComplexMatrix::from_entries(&[ZERO, -I, I, ZERO]).unwrap()
    }

    pub fn z() -> ComplexMatrix {
        ComplexMatrix::from_entries(&[ONE, ZERO, ZERO, -ONE]).unwrap()
    }

    /// Lowering operator |g⟩⟨e|.
    pub fn sigma_minus() -> ComplexMatrix {
        ComplexMatrix::from_entries(&[ZERO, ZERO, ONE, ZERO]).unwrap()
    }

    pub fn sigma_plus() -> ComplexMatrix {
        sigma_minus().adjoint()
    }

    pub fn excited_projector() -> ComplexMatrix {
        ComplexMatrix::diag(&[ONE, ZERO])
    }

    pub fn ground_projector() -> ComplexMatrix {
        ComplexMatrix::diag(&[ZERO, ONE])
    }

    pub fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }
}

/// A positive unit-trace matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: ComplexMatrix,
}

impl DensityMatrix {
    pub fn new(mat: ComplexMatrix) -> Result<Self> {
        Self::with_tolerances(mat, StateTolerances::default())
    }

    pub fn with_tolerances(mat: ComplexMatrix, tol: StateTolerances) -> Result<Self> {
        if !mat.is_finite() {
            return Err(Error::NonFinite("density matrix"));
        }
        let dev = mat.hermitian_deviation();
        if dev > tol.hermitian {
            return Err(Error::InvalidState(format!("hermitian deviation {dev:e}")));
        }
        let tr = mat.trace();
        if (tr - ONE).norm() > tol.trace {
            return Err(Error::InvalidState(format!(
                "trace {}{:+}i differs from 1",
                tr.re, tr.im
            )));
        }
        let min = mat.eig_hermitian(tol.hermitian)?.values[0];
        if min < tol.min_eigenvalue {
            return Err(Error::InvalidState(format!(
                "smallest eigenvalue {min:e} is negative"
            )));
        }
        Ok(Self { mat })
    }

    /// Hermitizes and rescales to unit trace without a positivity check.
    ///
    /// Used by the integrators, whose outputs are checked by the tests.
    pub fn normalized(mat: &ComplexMatrix) -> Self {
        let h = mat.hermitian_part();
        let tr = h.trace().re;
        Self {
            mat: h.scale_re(1.0 / tr),
        }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            mat: ComplexMatrix::identity(dim).scale_re(1.0 / dim as f64),
        }
    }

    /// Projector onto a (not necessarily normalized) pure state.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::InvalidState("zero state vector".into()));
        }
        let n = psi.len();
        let mat = ComplexMatrix::from_fn(n, |i, j| psi[i] * psi[j].conj() / norm);
        Ok(Self { mat })
    }

    /// ρ = (I + xσx + yσy + zσz)/2.
    pub fn from_bloch(b: [f64; 3]) -> Result<Self> {
        let r2 = b.iter().map(|v| v * v).sum::<f64>();
        if !r2.is_finite() || r2 > 1.0 + 1e-12 {
            return Err(Error::InvalidState(format!(
                "Bloch vector length {} exceeds 1",
                r2.sqrt()
            )));
        }
        Ok(Self {
            mat: bloch_to_matrix(b),
        })
    }

    #[inline]
    pub fn matrix(&self) -> &ComplexMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.mat
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mat.dim()
    }

    /// Tr[X ρ].
    pub fn expectation(&self, x: &ComplexMatrix) -> C64 {
        let n = self.dim();
        let mut acc = ZERO;
        for i in 0..n {
            for j in 0..n {
                acc += x[(i, j)] * self.mat[(j, i)];
            }
        }
        acc
    }

    /// Bloch vector; defined for qubits only.
    pub fn bloch(&self) -> Result<[f64; 3]> {
        matrix_to_bloch(&self.mat)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.mat
            .eig_hermitian(1e-6)
            .map(|e| e.values[0])
            .unwrap_or(f64::NAN)
    }

    pub fn trace_distance(&self, other: &Self) -> f64 {
        let diff = &self.mat - &other.mat;
        diff.eig_hermitian(1e-6)
            .map(|e| 0.5 * e.values.iter().map(|v| v.abs()).sum::<f64>())
            .unwrap_or(f64::NAN)
    }
}

pub fn bloch_to_matrix(b: [f64; 3]) -> ComplexMatrix {
    let [x, y, z] = b;
    ComplexMatrix::from_entries(&[
        C64::new(0.5 * (1.0 + z), 0.0),
        C64::new(0.5 * x, -0.5 * y),
        C64::new(0.5 * x, 0.5 * y),
        C64::new(0.5 * (1.0 - z), 0.0),
    ])
    .unwrap()
}

/// (Tr[σx ρ], Tr[σy ρ], Tr[σz ρ]) for any 2×2 matrix (real parts).
pub fn matrix_to_bloch(m: &ComplexMatrix) -> Result<[f64; 3]> {
    if m.dim() != 2 {
        return Err(Error::DimensionMismatch {
            left: m.dim(),
            right: 2,
        });
    }
    let x = (m[(0, 1)] + m[(1, 0)]).re;
    let y = (I * (m[(0, 1)] - m[(1, 0)])).re;
    let z = (m[(0, 0)] - m[(1, 1)]).re;
    Ok([x, y, z])
}

#[cfg(test)]
mod tests {
    use super::pauli::*;
    use super::*;

    fn close(a: &ComplexMatrix, b: &ComplexMatrix, tol: f64) -> bool {
        (a - b).max_abs() <= tol
    }

    #[test]
    fn commutator_examples() {
        let r = commutator(&x(), &y()).unwrap();
        assert!(close(&r, &z().scale(C64::new(0.0, 2.0)), 1e-15));

        let a = ComplexMatrix::from_fn(2, |i, j| C64::new(i as f64 + 0.3, j as f64 - 1.7));
        let r = commutator(&ComplexMatrix::identity(2), &a).unwrap();
        assert_eq!(r.max_abs(), 0.0);

        let up = ComplexMatrix::from_real_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
        let down = ComplexMatrix::from_real_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let r = commutator(&up, &down).unwrap();
        assert!(close(&r, &z(), 0.0));
    }

    #[test]
    fn commutator_dimension_mismatch() {
        let err = commutator(&ComplexMatrix::identity(2), &ComplexMatrix::identity(3));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn plumbing_examples() {
        let i2 = ComplexMatrix::identity(2);
        assert!(close(&adjoint(&i2.scale(I)), &i2.scale(-I), 0.0));
        assert_eq!(trace(&i2), C64::new(2.0, 0.0));
        assert!(close(&matmul(&x(), &x()).unwrap(), &i2, 0.0));
        assert!(matmul(&i2, &ComplexMatrix::identity(4)).is_err());
    }

    #[test]
    fn expm_examples() {
        let z0 = ComplexMatrix::zeros(3);
        assert!(close(
            &expm(&z0, 1e-14).unwrap(),
            &ComplexMatrix::identity(3),
            0.0
        ));

        let d = ComplexMatrix::diag(&[C64::new(0.7, 0.0), C64::new(-2.5, 0.0)]);
        let e = expm(&d, 1e-14).unwrap();
        let want =
            ComplexMatrix::diag(&[C64::new(0.7f64.exp(), 0.0), C64::new((-2.5f64).exp(), 0.0)]);
        assert!(close(&e, &want, 1e-14));

        for &theta in &[0.1, 1.0, 2.7, 9.0] {
            let a = x().scale(C64::new(0.0, theta));
            let e = expm(&a, 1e-13).unwrap();
            let want = &ComplexMatrix::identity(2).scale_re(theta.cos())
                + &x().scale(C64::new(0.0, theta.sin()));
            assert!(close(&e, &want, 1e-13), "theta = {theta}");
        }
    }

    #[test]
    fn expm_rejects_non_finite() {
        let mut a = ComplexMatrix::zeros(2);
        a[(0, 1)] = C64::new(f64::NAN, 0.0);
        assert!(matches!(expm(&a, 1e-12), Err(Error::NonFinite(_))));
    }

    #[test]
    fn eig_examples() {
        let e = eig_hermitian(&z()).unwrap();
        assert_eq!(e.values, vec![-1.0, 1.0]);

        let e = eig_hermitian(&ComplexMatrix::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        assert!(close(
            &(&e.vectors.adjoint() * &e.vectors),
            &ComplexMatrix::identity(2),
            1e-12
        ));

        let ones = ComplexMatrix::from_real_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let e = eig_hermitian(&ones).unwrap();
        assert!((e.values[0] - 0.0).abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        assert!(matches!(
            eig_hermitian(&sigma_minus()),
            Err(Error::NotHermitian(_))
        ));
    }

    #[test]
    fn bloch_roundtrip_and_excited_state() {
        let rho = DensityMatrix::from_bloch([0.0, 0.0, 1.0]).unwrap();
        assert!(close(rho.matrix(), &excited_projector(), 0.0));
        let b = [0.3, -0.4, 0.5];
        let back = matrix_to_bloch(&bloch_to_matrix(b)).unwrap();
        for k in 0..3 {
            assert!((back[k] - b[k]).abs() < 1e-15);
        }
        assert!(DensityMatrix::from_bloch([1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn density_matrix_invariants() {
        assert!(DensityMatrix::new(excited_projector()).is_ok());
        assert!(DensityMatrix::new(ComplexMatrix::identity(2)).is_err());
        assert!(DensityMatrix::new(z().scale_re(0.5)).is_err());
        let neg = ComplexMatrix::from_real_rows(&[[1.2, 0.0], [0.0, -0.2]]).unwrap();
        assert!(DensityMatrix::new(neg).is_err());
    }

    #[test]
    fn trace_distance_of_orthogonal_states_is_one() {
        let e = DensityMatrix::new(excited_projector()).unwrap();
        let g = DensityMatrix::new(ground_projector()).unwrap();
        assert!((e.trace_distance(&g) - 1.0).abs() < 1e-14);
    }
}
