//! Small dense complex-matrix kernel: operators, density matrices and the
//! superoperator building blocks used by diffusive measurement models.
//!
//! Everything is sized for few-level systems (n of order 2..16); matrices are
//! stored row-major and stay on the stack for n = 2. The quantum-specific
//! maps provided here are the commutator, the dissipator
//! D[L](ρ) = LρL† − ½(L†Lρ + ρL†L) and the measurement back-action
//! H[L](ρ) = Lρ + ρL† − Tr((L+L†)ρ)·ρ.

use num_complex::Complex64;
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Maximum admissible deviation from Hermiticity (max entry of A − A†).
pub const HERMITICITY_TOL: f64 = 1e-10;
/// Maximum admissible deviation of a density matrix trace from one, and of a
/// tangent-operator trace from zero.
pub const TRACE_TOL: f64 = 1e-9;
/// Most negative admissible eigenvalue of a density matrix.
pub const POSITIVITY_TOL: f64 = 1e-10;
/// Traces at or below this threshold make renormalization degenerate.
pub const DEGENERATE_TRACE_THRESHOLD: f64 = 1e-12;
/// Eigenvalues below minus this threshold are an error in strict mode.
pub const STRICT_POSITIVITY_TOL: f64 = 1e-8;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

type Storage = SmallVec<[Complex64; 4]>;

/// Dense square complex matrix, row-major, fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    dim: usize,
    data: Storage,
}

impl Operator {
    /// All-zero operator of dimension `dim`.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "operator dimension must be positive");
        Operator {
            dim,
            data: smallvec::smallvec![ZERO; dim * dim],
        }
    }

    /// Identity operator of dimension `dim`.
    pub fn identity(dim: usize) -> Self {
        let mut op = Self::zeros(dim);
        for i in 0..dim {
            op.data[i * dim + i] = ONE;
        }
        op
    }

    /// Builds an operator entry-by-entry from `f(row, col)`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut op = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                op.data[i * dim + j] = f(i, j);
            }
        }
        op
    }

    /// Builds an operator from a row-major slice of length `dim * dim`.
    pub fn from_row_major(dim: usize, entries: &[Complex64]) -> Result<Self> {
        if dim == 0 || entries.len() != dim * dim {
            return Err(Error::InvalidOperator(format!(
                "expected {}x{} = {} row-major entries, got {}",
                dim,
                dim,
                dim * dim,
                entries.len()
            )));
        }
        Ok(Operator {
            dim,
            data: Storage::from_slice(entries),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.dim + j] = v;
    }

    /// Row-major view of the entries.
    pub fn entries(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn trace(&self) -> Complex64 {
        let mut t = ZERO;
        for i in 0..self.dim {
            t += self.data[i * self.dim + i];
        }
        t
    }

    /// Conjugate transpose A†.
    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        if n == 2 {
            let a = &self.data[..4];
            let mut out = Self::zeros(2);
            let o = &mut out.data[..4];
            o[0] = a[0].conj();
            o[1] = a[2].conj();
            o[2] = a[1].conj();
            o[3] = a[3].conj();
            return out;
        }
        Self::from_fn(n, |i, j| self.data[j * n + i].conj())
    }

    /// Hermitian part (A + A†)/2.
    pub fn hermitize(&self) -> Self {
        let n = self.dim;
        if n == 2 {
            let a = &self.data[..4];
            let mut out = Self::zeros(2);
            let o = &mut out.data[..4];
            o[0] = 0.5 * (a[0] + a[0].conj());
            o[1] = 0.5 * (a[1] + a[2].conj());
            o[2] = 0.5 * (a[2] + a[1].conj());
            o[3] = 0.5 * (a[3] + a[3].conj());
            return out;
        }
        Self::from_fn(n, |i, j| {
            0.5 * (self.data[i * n + j] + self.data[j * n + i].conj())
        })
    }

    /// Matrix product A·B. Panics on dimension mismatch.
    pub fn matmul(&self, rhs: &Self) -> Self {
        let n = self.dim;
        assert_eq!(n, rhs.dim, "dimension mismatch in matmul");
        let mut out = Self::zeros(n);
        if n == 2 {
            // Unrolled 2×2 product: this is the innermost kernel of the
            // filter/sensitivity recursions.
            let a = &self.data[..4];
            let b = &rhs.data[..4];
            let o = &mut out.data[..4];
            o[0] = a[0] * b[0] + a[1] * b[2];
            o[1] = a[0] * b[1] + a[1] * b[3];
            o[2] = a[2] * b[0] + a[3] * b[2];
            o[3] = a[2] * b[1] + a[3] * b[3];
            return out;
        }
        for i in 0..n {
            let row = i * n;
            for k in 0..n {
                let a = self.data[row + k];
                if a == ZERO {
                    continue;
                }
                let rrow = k * n;
                for j in 0..n {
                    out.data[row + j] += a * rhs.data[rrow + j];
                }
            }
        }
        out
    }

    /// Tr(A·B) in O(n²), without forming the product.
    #[inline]
    pub fn trace_prod(&self, rhs: &Self) -> Complex64 {
        let n = self.dim;
        debug_assert_eq!(n, rhs.dim);
        if n == 2 {
            let a = &self.data[..4];
            let b = &rhs.data[..4];
            return a[0] * b[0] + a[1] * b[2] + a[2] * b[1] + a[3] * b[3];
        }
        let mut t = ZERO;
        for i in 0..n {
            for j in 0..n {
                t += self.data[i * n + j] * rhs.data[j * n + i];
            }
        }
        t
    }

    /// Tr(A·B†) in O(n²), without forming the product.
    #[inline]
    pub fn trace_prod_adj(&self, rhs: &Self) -> Complex64 {
        let n = self.dim;
        debug_assert_eq!(n, rhs.dim);
        let mut t = ZERO;
        for i in 0..n * n {
            t += self.data[i] * rhs.data[i].conj();
        }
        t
    }

    /// Scales by a complex factor.
    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        out
    }

    /// Scales by a real factor.
    pub fn scale_re(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        out
    }

    /// In-place self += c·other.
    #[inline]
    pub fn add_scaled_assign(&mut self, other: &Self, c: Complex64) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    /// In-place self += c·other with a real factor.
    #[inline]
    pub fn add_scaled_re_assign(&mut self, other: &Self, c: f64) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    /// In-place self += other† (conjugate transpose of `other`).
    pub fn add_adjoint_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dim, other.dim);
        let n = self.dim;
        for i in 0..n {
            for j in 0..n {
                self.data[i * n + j] += other.data[j * n + i].conj();
            }
        }
    }

    /// Largest entry magnitude.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise difference |A_ij − B_ij|.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Largest entry magnitude of A − A†.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                let d = (self.data[i * n + j] - self.data[j * n + i].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() <= tol
    }

    /// Eigenvalues of a Hermitian operator, ascending. Closed form for n = 2,
    /// cyclic Jacobi rotations otherwise (diagnostic-grade accuracy).
    pub fn eigenvalues_hermitian(&self) -> Vec<f64> {
        let n = self.dim;
        if n == 1 {
            return vec![self.data[0].re];
        }
        if n == 2 {
            let a = self.data[0].re;
            let d = self.data[3].re;
            let b = self.data[1];
            let m = 0.5 * (a + d);
            let r = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
            return vec![m - r, m + r];
        }
        let mut a = self.clone();
        let scale = self.max_abs().max(1e-300);
        // Cyclic Jacobi sweeps with complex plane rotations.
        for _sweep in 0..60 {
            let mut off: f64 = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off = off.max(a.data[p * n + q].norm());
                }
            }
            if off <= 1e-14 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.data[p * n + q];
                    let mag = apq.norm();
                    if mag <= 1e-300 {
                        continue;
                    }
                    let app = a.data[p * n + p].re;
                    let aqq = a.data[q * n + q].re;
                    let phase = apq / mag;
                    let tau = (aqq - app) / (2.0 * mag);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // Columns: B = A·J with J[p,p]=c, J[q,p]=-s·conj(phase)...
                    // apply the rotation that zeroes the (p,q) entry.
                    let zs = Complex64::new(s, 0.0) * phase;
                    for k in 0..n {
                        let akp = a.data[k * n + p];
                        let akq = a.data[k * n + q];
                        a.data[k * n + p] = akp * c - akq * zs.conj();
                        a.data[k * n + q] = akq * c + akp * zs;
                    }
                    for k in 0..n {
                        let apk = a.data[p * n + k];
                        let aqk = a.data[q * n + k];
                        a.data[p * n + k] = apk * c - aqk * zs;
                        a.data[q * n + k] = aqk * c + apk * zs.conj();
                    }
                }
            }
        }
        let mut eigs: Vec<f64> = (0..n).map(|i| a.data[i * n + i].re).collect();
        eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        eigs
    }

    /// Smallest eigenvalue of a Hermitian operator (positivity diagnostic).
    pub fn smallest_eigenvalue(&self) -> f64 {
        self.eigenvalues_hermitian()[0]
    }

    fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            Err(Error::DimensionMismatch(self.dim, other.dim))
        } else {
            Ok(())
        }
    }
}

impl std::ops::Add for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch in add");
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(rhs.data.iter()) {
            *a += b;
        }
        out
    }
}

impl std::ops::Sub for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch in sub");
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(rhs.data.iter()) {
            *a -= b;
        }
        out
    }
}

impl std::ops::Mul for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        self.matmul(rhs)
    }
}

impl std::ops::Neg for &Operator {
    type Output = Operator;
    fn neg(self) -> Operator {
        self.scale_re(-1.0)
    }
}

/// Pauli σx.
pub fn pauli_x() -> Operator {
    Operator::from_fn(2, |i, j| if i != j { ONE } else { ZERO })
}

/// Pauli σy.
pub fn pauli_y() -> Operator {
    let mut op = Operator::zeros(2);
    op.set(0, 1, Complex64::new(0.0, -1.0));
    op.set(1, 0, Complex64::new(0.0, 1.0));
    op
}

/// Pauli σz.
pub fn pauli_z() -> Operator {
    let mut op = Operator::zeros(2);
    op.set(0, 0, ONE);
    op.set(1, 1, -ONE);
    op
}

/// Commutator [A, B] = AB − BA.
pub fn commutator(a: &Operator, b: &Operator) -> Result<Operator> {
    a.check_same_dim(b)?;
    Ok(&a.matmul(b) - &b.matmul(a))
}

/// Dissipator D[L](X) = LXL† − ½(L†LX + XL†L).
pub fn dissipator(l: &Operator, x: &Operator) -> Result<Operator> {
    l.check_same_dim(x)?;
    let lx = l.matmul(x);
    let mut out = lx.matmul(&l.adjoint());
    let ldl = l.adjoint().matmul(l);
    out.add_scaled_re_assign(&ldl.matmul(x), -0.5);
    out.add_scaled_re_assign(&x.matmul(&ldl), -0.5);
    Ok(out)
}

/// Measurement back-action H[L](ρ) = Lρ + ρL† − Tr((L+L†)ρ)·ρ.
/// Traceless for unit-trace ρ.
pub fn backaction(l: &Operator, rho: &DensityOperator) -> Result<Operator> {
    let r = rho.op();
    l.check_same_dim(r)?;
    let lr = l.matmul(r);
    let s = 2.0 * r.trace_prod(l).re; // Tr((L+L†)ρ) for Hermitian ρ
    let mut out = lr.clone();
    out.add_adjoint_assign(&lr);
    out.add_scaled_re_assign(r, -s);
    Ok(out)
}

/// Hilbert–Schmidt inner product ⟨A, B⟩ = Tr(A†B).
pub fn hs_inner(a: &Operator, b: &Operator) -> Result<Complex64> {
    a.check_same_dim(b)?;
    Ok(b.trace_prod_adj(a))
}

/// Symmetrizes and rescales an (approximately Hermitian, positive) operator
/// to unit trace. Fails with a degenerate-trace error when the trace is at or
/// below [`DEGENERATE_TRACE_THRESHOLD`]. Positivity is *not* checked here;
/// callers monitor it separately.
pub fn renormalize(op: &Operator) -> Result<DensityOperator> {
    let herm = op.hermitize();
    let tr = herm.trace().re;
    if !tr.is_finite() {
        return Err(Error::NonFinite("renormalization trace".into()));
    }
    if tr <= DEGENERATE_TRACE_THRESHOLD {
        return Err(Error::DegenerateTrace {
            trace: tr,
            threshold: DEGENERATE_TRACE_THRESHOLD,
        });
    }
    Ok(DensityOperator {
        op: herm.scale_re(1.0 / tr),
    })
}

/// Density matrix: Hermitian, unit-trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityOperator {
    op: Operator,
}

impl DensityOperator {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(op: Operator) -> Result<Self> {
        let defect = op.hermiticity_defect();
        if defect > HERMITICITY_TOL {
            return Err(Error::InvalidOperator(format!(
                "density matrix not Hermitian: defect {defect:.3e}"
            )));
        }
        let tr = op.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidOperator(format!(
                "density matrix trace {tr} not 1"
            )));
        }
        let herm = op.hermitize();
        let min_eig = herm.smallest_eigenvalue();
        if min_eig < -POSITIVITY_TOL {
            return Err(Error::InvalidOperator(format!(
                "density matrix not positive: smallest eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(DensityOperator { op: herm })
    }

    /// Wraps an operator already known to be Hermitian with unit trace
    /// (used by the filter after explicit renormalization).
    pub(crate) fn from_renormalized_unchecked(op: Operator) -> Self {
        DensityOperator { op }
    }

    #[inline]
    pub fn op(&self) -> &Operator {
        &self.op
    }

    pub fn into_op(self) -> Operator {
        self.op
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.op.dim
    }

    /// Bloch vector (⟨σx⟩, ⟨σy⟩, ⟨σz⟩); two-level states only.
    pub fn bloch(&self) -> [f64; 3] {
        assert_eq!(self.op.dim, 2, "Bloch vector is defined for n = 2");
        [
            self.op.trace_prod(&pauli_x()).re,
            self.op.trace_prod(&pauli_y()).re,
            self.op.trace_prod(&pauli_z()).re,
        ]
    }

    /// Smallest eigenvalue (positivity diagnostic).
    pub fn smallest_eigenvalue(&self) -> f64 {
        self.op.smallest_eigenvalue()
    }
}

/// Projector |i⟩⟨i| onto a computational basis state, as a density matrix.
pub fn ket_projector(dim: usize, index: usize) -> Result<DensityOperator> {
    if index >= dim {
        return Err(Error::InvalidArgument(format!(
            "basis index {index} out of range for dimension {dim}"
        )));
    }
    let mut op = Operator::zeros(dim);
    op.set(index, index, ONE);
    Ok(DensityOperator { op })
}

/// Maximally mixed state I/n.
pub fn maximally_mixed(dim: usize) -> DensityOperator {
    DensityOperator {
        op: Operator::identity(dim).scale_re(1.0 / dim as f64),
    }
}

/// Tangent-space element: Hermitian and traceless (a parameter derivative of
/// a density matrix).
#[derive(Clone, Debug, PartialEq)]
pub struct TangentOperator {
    op: Operator,
}

impl TangentOperator {
    /// Validates Hermiticity and tracelessness.
    pub fn new(op: Operator) -> Result<Self> {
        let defect = op.hermiticity_defect();
        if defect > HERMITICITY_TOL {
            return Err(Error::InvalidOperator(format!(
                "tangent operator not Hermitian: defect {defect:.3e}"
            )));
        }
        let tr = op.trace();
        if tr.norm() > TRACE_TOL {
            return Err(Error::InvalidOperator(format!(
                "tangent operator trace {tr} not 0"
            )));
        }
        Ok(TangentOperator { op })
    }

    pub(crate) fn from_parts_unchecked(op: Operator) -> Self {
        TangentOperator { op }
    }

    /// Zero tangent vector.
    pub fn zero(dim: usize) -> Self {
        TangentOperator {
            op: Operator::zeros(dim),
        }
    }

    #[inline]
    pub fn op(&self) -> &Operator {
        &self.op
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.op.dim
    }
}
