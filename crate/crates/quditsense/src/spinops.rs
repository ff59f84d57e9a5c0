//! Dense complex linear-algebra kernel.
//!
//! Spin matrices for arbitrary (half-)integer spin, Hermitian
//! eigendecomposition with a deterministic phase convention, matrix
//! exponentials, Kronecker products and partial traces. Everything is a pure
//! function of immutable inputs and safe to call concurrently.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::{Error, Result};

/// Dense column-major complex matrix; the only matrix type used in the
/// pipeline.
pub type ComplexMatrix = DMatrix<Complex64>;

pub const C_ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const C_ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const C_I: Complex64 = Complex64::new(0.0, 1.0);

/// Real scalar promoted to a complex entry.
#[inline]
pub fn cr(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// Largest entry magnitude of a matrix (max norm).
pub fn max_abs(m: &ComplexMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Largest entry-wise deviation between two equally sized matrices.
pub fn max_abs_diff(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_abs_diff");
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).norm()))
}

/// Commutator `[a, b] = ab - ba`.
pub fn commutator(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a * b - b * a
}

/// Anticommutator `{a, b} = ab + ba`.
pub fn anticommutator(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a * b + b * a
}

/// Complex identity matrix of dimension `d`.
pub fn identity(d: usize) -> ComplexMatrix {
    ComplexMatrix::identity(d, d)
}

/// The spin operators `s_x, s_y, s_z` of a single spin.
///
/// The basis is ordered by decreasing magnetic quantum number
/// `m = S, S-1, ..., -S`, so `sz` is `diag(S, S-1, ..., -S)`.
#[derive(Debug, Clone)]
pub struct SpinOperatorSet {
    /// Spin quantum number; `2S` is a non-negative integer.
    pub s: f64,
    pub sx: ComplexMatrix,
    pub sy: ComplexMatrix,
    pub sz: ComplexMatrix,
}

impl SpinOperatorSet {
    /// Hilbert-space dimension `d = 2S + 1`.
    pub fn dim(&self) -> usize {
        self.sx.nrows()
    }
}

/// Validate a spin quantum number and return the doubled integer `2S`.
fn doubled_spin(s: f64) -> Result<u32> {
    let two_s = 2.0 * s;
    let rounded = two_s.round();
    if !(s.is_finite() && s >= 0.0 && (two_s - rounded).abs() < 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "spin quantum number must be a non-negative half-integer, got {s}"
        )));
    }
    Ok(rounded as u32)
}

/// Build the spin matrices for spin `s` from the ladder-operator formula
/// `s_+ |m> = sqrt(S(S+1) - m(m+1)) |m+1>`, with `s_x = (s_+ + s_-)/2` and
/// `s_y = (s_+ - s_-)/(2i)`.
pub fn spin_matrices(s: f64) -> Result<SpinOperatorSet> {
    let two_s = doubled_spin(s)?;
    let d = two_s as usize + 1;
    let mut sp = ComplexMatrix::zeros(d, d); // s_+
    let mut sz = ComplexMatrix::zeros(d, d);
    for i in 0..d {
        let m = s - i as f64; // basis index i holds |m = S - i>
        sz[(i, i)] = cr(m);
        if i > 0 {
            // raising: |m> -> |m+1> lives one row up in this ordering
            sp[(i - 1, i)] = cr((s * (s + 1.0) - m * (m + 1.0)).sqrt());
        }
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm).map(|z| z * cr(0.5));
    let sy = (&sp - &sm).map(|z| z * Complex64::new(0.0, -0.5));
    Ok(SpinOperatorSet { s, sx, sy, sz })
}

/// Eigendecomposition of a Hermitian operator.
///
/// `energies` are ascending; `vectors` holds the matching orthonormal
/// eigenvectors as columns, each rephased so that its largest-magnitude
/// component (first index attaining the maximum within 1e-12) is real and
/// positive. The convention makes every decomposition, and everything built
/// on top of one, reproducible bit-for-bit.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    /// Eigenvalues in ascending order (angular frequency, rad/s, when the
    /// input is a Hamiltonian).
    pub energies: DVector<f64>,
    /// Column `mu` is the eigenvector of `energies[mu]`.
    pub vectors: ComplexMatrix,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// Transform an operator into this eigenbasis: `V^† M V`.
    pub fn to_eigenbasis(&self, m: &ComplexMatrix) -> ComplexMatrix {
        self.vectors.adjoint() * m * &self.vectors
    }

    /// Transform an operator from this eigenbasis back: `V M V^†`.
    pub fn from_eigenbasis(&self, m: &ComplexMatrix) -> ComplexMatrix {
        &self.vectors * m * self.vectors.adjoint()
    }
}

/// Apply the deterministic phase convention to each column of `v` in place.
fn fix_column_phases(v: &mut ComplexMatrix) {
    let (rows, cols) = v.shape();
    for j in 0..cols {
        let mut max_mag = 0.0_f64;
        for i in 0..rows {
            max_mag = max_mag.max(v[(i, j)].norm());
        }
        let mut pivot = 0;
        for i in 0..rows {
            if v[(i, j)].norm() >= max_mag - 1e-12 {
                pivot = i;
                break;
            }
        }
        let z = v[(pivot, j)];
        if z.norm() > 0.0 {
            let phase = z / z.norm();
            for i in 0..rows {
                v[(i, j)] /= phase;
            }
        }
    }
}

/// Diagonalize a Hermitian matrix.
///
/// Fails with `InvalidArgument` if `h` is not square or not Hermitian within
/// `1e-10 * max(1, |h|_max)`, and with `NumericalFailure` if the residual
/// `|H v - E v|` of any eigenpair exceeds `1e-9 * |h|_max`-scale.
pub fn hermitian_eigensystem(h: &ComplexMatrix) -> Result<EigenSystem> {
    if h.nrows() != h.ncols() {
        return Err(Error::InvalidArgument(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    let scale = max_abs(h).max(1.0);
    let herm_err = max_abs_diff(h, &h.adjoint());
    if herm_err > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!(
            "matrix is not Hermitian: |H - H^†|_max = {herm_err:.3e}"
        )));
    }
    let d = h.nrows();
    let se = h.clone().symmetric_eigen();

    // Sort ascending; nalgebra returns eigenpairs in no particular order.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let energies = DVector::from_iterator(d, order.iter().map(|&k| se.eigenvalues[k]));
    let mut vectors = ComplexMatrix::zeros(d, d);
    for (j, &k) in order.iter().enumerate() {
        vectors.set_column(j, &se.eigenvectors.column(k));
    }
    fix_column_phases(&mut vectors);

    // Residual check on every eigenpair.
    let recon = h * &vectors;
    for j in 0..d {
        let mut resid = 0.0_f64;
        for i in 0..d {
            resid = resid.max((recon[(i, j)] - vectors[(i, j)] * cr(energies[j])).norm());
        }
        if resid > 1e-9 * scale {
            return Err(Error::NumericalFailure(format!(
                "eigenpair {j} residual {resid:.3e} exceeds tolerance"
            )));
        }
    }
    Ok(EigenSystem { energies, vectors })
}

/// Matrix exponential `exp(M)` by scaling-and-squaring with Padé
/// approximants.
///
/// Accurate to ~1e-12 relative for `|M| <~ 50`; fails with
/// `NumericalFailure` if the result overflows to non-finite entries.
pub fn matrix_exponential(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidArgument(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let e = m.exp();
    if e.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NumericalFailure(format!(
            "matrix exponential overflowed at |M|_max = {:.3e}",
            max_abs(m)
        )));
    }
    Ok(e)
}

/// Kronecker product with the fixed composition convention
/// `(system ⊗ ancilla)`: `tensor(a, b)[(i*p + k, j*q + l)] = a[(i,j)] b[(k,l)]`.
pub fn tensor(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a.kronecker(b)
}

/// Partial trace of an operator on a bipartite space.
///
/// `dims = (d0, d1)` are the factor dimensions in the [`tensor`] convention;
/// `keep` selects which factor survives (0 or 1).
pub fn partial_trace(
    m: &ComplexMatrix,
    dims: (usize, usize),
    keep: usize,
) -> Result<ComplexMatrix> {
    let (d0, d1) = dims;
    let d = d0 * d1;
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::InvalidArgument(format!(
            "partial trace dims ({d0}, {d1}) inconsistent with a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    match keep {
        0 => {
            let mut out = ComplexMatrix::zeros(d0, d0);
            for i in 0..d0 {
                for j in 0..d0 {
                    let mut acc = C_ZERO;
                    for k in 0..d1 {
                        acc += m[(i * d1 + k, j * d1 + k)];
                    }
                    out[(i, j)] = acc;
                }
            }
            Ok(out)
        }
        1 => {
            let mut out = ComplexMatrix::zeros(d1, d1);
            for k in 0..d1 {
                for l in 0..d1 {
                    let mut acc = C_ZERO;
                    for i in 0..d0 {
                        acc += m[(i * d1 + k, i * d1 + l)];
                    }
                    out[(k, l)] = acc;
                }
            }
            Ok(out)
        }
        _ => Err(Error::InvalidArgument(format!(
            "partial trace keep index must be 0 or 1, got {keep}"
        ))),
    }
}
