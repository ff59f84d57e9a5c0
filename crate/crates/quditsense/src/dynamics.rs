//! Open-system propagation: Liouvillian superoperators for coherent
//! evolution, pure dephasing, and zero-temperature relaxation, plus
//! piecewise-constant exponential propagation and explicit time-dependent
//! integration for lab-frame validation runs.
//!
//! Conventions
//! -----------
//! Density matrices are vectorized column-by-column, so a superoperator `L`
//! acts as `vec(A rho B) = (B^T kron A) vec(rho)`. All generators preserve
//! Hermiticity and trace; constructors verify the trace-preservation
//! left-null vector explicitly.
//!
//! The dephasing channel is generated by a single jump operator diagonal in
//! the eigenbasis, `J = S_z^(diag) / Dc_max`, applied at rate `1/T_2` in the
//! `(2 J rho J - J^2 rho - rho J^2) / T_2` normalization. Every coherence
//! `rho_ab` then decays at `(c_a - c_b)^2 / (Dc_max^2 T_2)`, the worst pair
//! at exactly `1/T_2`, and the qubit limit reduces to
//! `rho_01(t) = rho_01(0) e^{-t/T_2}`. A caller-supplied dimensionless
//! weight matrix may override the quadratic profile; it is accepted only if
//! it generates a completely positive semigroup (checked via conditional
//! negative-definiteness of the weight matrix, which is necessary and
//! sufficient for an entrywise-exponential decay profile to stay positive
//! semidefinite at all times).
//!
//! The relaxation channel uses downward jumps `|b><a|` (`E_b < E_a`) with
//! rates `W_{b<-a} = alpha^2 |<b|O|a>|^2` for `O = {S_z, S_x}`, and
//! `alpha^2` normalized so the fastest one-step-like transition (those with
//! `|<S_z>_a - <S_z>_b| < 1.5`) relaxes at exactly `1/T_1`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::model::{QubitModel, QuditModel};
use crate::spinops::{
    anticommutator, cr, hermitian_eigensystem, identity, matrix_exponential, max_abs,
    max_abs_diff, tensor, ComplexMatrix, C_ZERO,
};
use crate::{Error, Result};

/// Runtime guard: propagation aborts when the trace drifts further than this.
const TRACE_DRIFT_MAX: f64 = 1e-6;
/// Runtime guard: propagation aborts when an eigenvalue of rho drops below this.
const MIN_EIG_FLOOR: f64 = -1e-6;
/// Runtime guard: Hermiticity deviation allowed during propagation.
const HERMITICITY_MAX: f64 = 1e-8;
/// Reported projector populations must stay within `[-POP_EPS, 1 + POP_EPS]`.
const POP_EPS: f64 = 1e-9;
/// One-step-like relaxation window on `|<S_z>_a - <S_z>_b|`.
const DELTA_M_WINDOW: f64 = 1.5;

/// Extended Stevens operator driving the spin-phonon relaxation channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StevensOperator {
    /// `O_2^1 = {S_z, S_x}` (the default modulation).
    #[default]
    O21,
}

/// Noise parameters for dephasing and optional relaxation.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// Pure-dephasing time T_2 (seconds).
    pub t2: f64,
    /// Optional dimensionless dephasing weights Gamma_{a,b}; `None` selects
    /// the quadratic profile of the diagonal jump operator.
    pub gamma: Option<DMatrix<f64>>,
    /// Optional relaxation time T_1 (seconds).
    pub t1: Option<f64>,
    /// Optional explicit spin-phonon weight alpha^2; derived from T_1 when
    /// absent.
    pub alpha2: Option<f64>,
    /// Stevens operator generating the relaxation jumps.
    pub stevens: StevensOperator,
}

impl NoiseModel {
    /// Dephasing-only noise with the default quadratic weight profile.
    pub fn pure_dephasing(t2: f64) -> Result<Self> {
        if !(t2.is_finite() && t2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "T_2 must be positive and finite, got {t2:e}"
            )));
        }
        Ok(NoiseModel {
            t2,
            gamma: None,
            t1: None,
            alpha2: None,
            stevens: StevensOperator::default(),
        })
    }

    /// Enable relaxation on timescale `t1` (seconds).
    pub fn with_t1(mut self, t1: f64) -> Result<Self> {
        if !(t1.is_finite() && t1 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "T_1 must be positive and finite, got {t1:e}"
            )));
        }
        self.t1 = Some(t1);
        Ok(self)
    }

    /// Override the dephasing weight matrix (dimensionless, symmetric, zero
    /// diagonal, conditionally negative definite).
    pub fn with_gamma(mut self, gamma: DMatrix<f64>) -> Result<Self> {
        validate_decay_weights(&gamma)?;
        self.gamma = Some(gamma);
        Ok(self)
    }

    /// Override the spin-phonon weight alpha^2 instead of deriving it from
    /// T_1.
    pub fn with_alpha2(mut self, alpha2: f64) -> Result<Self> {
        if !(alpha2.is_finite() && alpha2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha^2 must be non-negative and finite, got {alpha2:e}"
            )));
        }
        self.alpha2 = Some(alpha2);
        Ok(self)
    }
}

/// A time-independent generator of the master equation, stored as a dense
/// `D^2 x D^2` superoperator in the column-stacked convention.
#[derive(Debug, Clone)]
pub struct Liouvillian {
    /// Superoperator matrix acting on `vec(rho)`.
    pub mat: ComplexMatrix,
    /// Hilbert-space dimension D.
    pub dim: usize,
    /// Whether any dissipative part has been added.
    pub has_dissipation: bool,
}

impl Liouvillian {
    /// The zero generator (evolution freezes).
    pub fn zero(dim: usize) -> Self {
        Liouvillian {
            mat: ComplexMatrix::zeros(dim * dim, dim * dim),
            dim,
            has_dissipation: false,
        }
    }

    /// Coherent generator `-i [H, .]` for a Hermitian `H` (rad/s).
    pub fn coherent(h: &ComplexMatrix) -> Result<Self> {
        let d = h.nrows();
        if h.ncols() != d {
            return Err(Error::InvalidArgument(
                "Hamiltonian must be square".into(),
            ));
        }
        let herm = max_abs_diff(h, &h.adjoint());
        if herm > 1e-10 * max_abs(h).max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "Hamiltonian not Hermitian (deviation {herm:.3e})"
            )));
        }
        let id = identity(d);
        let minus_i = Complex64::new(0.0, -1.0);
        let mat = (id.kronecker(h) - h.transpose().kronecker(&id)).map(|z| z * minus_i);
        let l = Liouvillian {
            mat,
            dim: d,
            has_dissipation: false,
        };
        l.check_trace_preserving()?;
        Ok(l)
    }

    /// Add another generator part (e.g. a dissipator) in place.
    pub fn add_part(&mut self, part: &Liouvillian) -> Result<()> {
        if part.dim != self.dim {
            return Err(Error::InvalidArgument(format!(
                "generator dimension mismatch: {} vs {}",
                self.dim, part.dim
            )));
        }
        self.mat += &part.mat;
        self.has_dissipation |= part.has_dissipation;
        Ok(())
    }

    /// Exact propagator `exp(L dt)` for a constant segment.
    pub fn propagator(&self, dt: f64) -> Result<ComplexMatrix> {
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "segment duration must be non-negative and finite, got {dt:e}"
            )));
        }
        matrix_exponential(&self.mat.map(|z| z * cr(dt)))
    }

    /// Verify that the vectorized identity is a left-null vector (trace
    /// preservation) within `1e-10` of the generator scale.
    pub fn check_trace_preserving(&self) -> Result<()> {
        let d = self.dim;
        let scale = max_abs(&self.mat).max(1.0);
        for col in 0..d * d {
            let mut acc = C_ZERO;
            for a in 0..d {
                acc += self.mat[(a * d + a, col)];
            }
            if acc.norm() > 1e-10 * scale {
                return Err(Error::NumericalFailure(format!(
                    "generator is not trace preserving (column {col}, residual {:.3e})",
                    acc.norm()
                )));
            }
        }
        Ok(())
    }
}

/// A constant-generator stretch of evolution.
#[derive(Debug, Clone)]
pub struct Segment {
    pub generator: Liouvillian,
    /// Duration (seconds).
    pub duration: f64,
}

/// Sampled output of a propagation run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    /// Sample times (seconds).
    pub times: Vec<f64>,
    /// `populations[k][i]` = expectation of projector `k` at `times[i]`.
    pub populations: Vec<Vec<f64>>,
    /// Trace of rho at each sample.
    pub trace: Vec<f64>,
    /// Purity `tr(rho^2)` at each sample.
    pub purity: Vec<f64>,
    /// Full density-matrix snapshots, if requested.
    pub snapshots: Option<Vec<ComplexMatrix>>,
    /// State at the end of the run.
    pub final_rho: ComplexMatrix,
}

impl RunTrace {
    /// Number of samples.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// True when no samples were recorded.
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Stack the columns of `m` into a vector.
pub fn vectorize(m: &ComplexMatrix) -> DVector<Complex64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vectorize`] for a `d x d` matrix.
pub fn unvectorize(v: &DVector<Complex64>, d: usize) -> ComplexMatrix {
    ComplexMatrix::from_column_slice(d, d, v.as_slice())
}

/// Apply a superoperator to a density matrix.
pub fn apply_superoperator(superop: &ComplexMatrix, rho: &ComplexMatrix) -> ComplexMatrix {
    let d = rho.nrows();
    unvectorize(&(superop * vectorize(rho)), d)
}

/// Coherence decay rates (1/s) of the dephasing channel: entry `(a, b)` is
/// the decay rate of `rho_ab`. Symmetric, zero diagonal, maximum `1/T_2`
/// for the default quadratic profile.
pub fn dephasing_rate_matrix(model: &QuditModel, noise: &NoiseModel) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if let Some(gamma) = &noise.gamma {
        if gamma.nrows() != d {
            return Err(Error::InvalidArgument(format!(
                "dephasing weight matrix is {}x{}, model dimension is {d}",
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        return Ok(gamma.map(|g| g / noise.t2));
    }
    let c: Vec<f64> = (0..d).map(|a| model.sz_diag[(a, a)].re).collect();
    let dc_max = c
        .iter()
        .flat_map(|ca| c.iter().map(move |cb| (ca - cb).abs()))
        .fold(0.0_f64, f64::max);
    if dc_max <= 1e-12 {
        return Err(Error::InvalidModel(
            "all eigenstates share the same <S_z>: dephasing jump operator degenerate".into(),
        ));
    }
    let mut rates = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let w = (c[a] - c[b]) / dc_max;
            rates[(a, b)] = w * w / noise.t2;
        }
    }
    Ok(rates)
}

/// Dissipator generating pure dephasing on the qudit eigenbasis.
pub fn dephasing_dissipator(model: &QuditModel, noise: &NoiseModel) -> Result<Liouvillian> {
    dephasing_from_rates(&dephasing_rate_matrix(model, noise)?)
}

/// Dissipator for the two-level baseline: jump operator `s_z`, both
/// coherences decaying at exactly `1/T_2`.
pub fn qubit_dephasing_dissipator(t2: f64) -> Result<Liouvillian> {
    if !(t2.is_finite() && t2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "T_2 must be positive and finite, got {t2:e}"
        )));
    }
    let mut rates = DMatrix::zeros(2, 2);
    rates[(0, 1)] = 1.0 / t2;
    rates[(1, 0)] = 1.0 / t2;
    dephasing_from_rates(&rates)
}

/// Build the diagonal dephasing dissipator from a coherence decay-rate
/// matrix (1/s). The rates must form a valid decay profile: symmetric, zero
/// diagonal, non-negative, and conditionally negative definite so the
/// generated semigroup is completely positive at all times.
pub fn dephasing_from_rates(rates: &DMatrix<f64>) -> Result<Liouvillian> {
    validate_decay_weights(rates)?;
    let d = rates.nrows();
    let mut mat = ComplexMatrix::zeros(d * d, d * d);
    for col in 0..d {
        for row in 0..d {
            let v = col * d + row;
            mat[(v, v)] = cr(-rates[(row, col)]);
        }
    }
    let l = Liouvillian {
        mat,
        dim: d,
        has_dissipation: true,
    };
    l.check_trace_preserving()?;
    Ok(l)
}

/// Reject decay-weight matrices that are not symmetric, have a nonzero
/// diagonal, carry negative entries, or fail the complete-positivity
/// criterion (conditional negative definiteness).
fn validate_decay_weights(w: &DMatrix<f64>) -> Result<()> {
    let d = w.nrows();
    if w.ncols() != d || d == 0 {
        return Err(Error::InvalidArgument(
            "decay weight matrix must be square and non-empty".into(),
        ));
    }
    let scale = w.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-300);
    for a in 0..d {
        if w[(a, a)].abs() > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "decay weights must vanish on the diagonal (entry ({a},{a}) = {:.3e})",
                w[(a, a)]
            )));
        }
        for b in 0..d {
            if !w[(a, b)].is_finite() || w[(a, b)] < -1e-12 * scale {
                return Err(Error::InvalidArgument(format!(
                    "decay weight ({a},{b}) = {:.3e} must be finite and non-negative",
                    w[(a, b)]
                )));
            }
            if (w[(a, b)] - w[(b, a)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidArgument(format!(
                    "decay weights must be symmetric (({a},{b}) vs ({b},{a}))"
                )));
            }
        }
    }
    // Conditional negative definiteness: x^T W x <= 0 on the zero-sum
    // subspace, i.e. the centered matrix P W P has no positive eigenvalue.
    let centered = {
        let p = DMatrix::from_fn(d, d, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - 1.0 / d as f64
        });
        &p * w * &p
    };
    let eig = hermitian_eigensystem(&centered.map(cr))?;
    let max_eig = eig.energies[d - 1];
    if max_eig > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!(
            "decay weights do not generate a completely positive channel \
             (conditional positivity violation {max_eig:.3e})"
        )));
    }
    Ok(())
}

/// Zero-temperature relaxation rates: entry `(b, a)` with `b < a` is the
/// downward rate `W_{b<-a}` (1/s). Returns the rate matrix together with
/// the normalization weight alpha^2 actually used.
pub fn relaxation_rates(model: &QuditModel, noise: &NoiseModel) -> Result<(DMatrix<f64>, f64)> {
    let t1 = noise.t1.ok_or_else(|| {
        Error::InvalidArgument("relaxation requested but no T_1 provided".into())
    })?;
    let op = match noise.stevens {
        StevensOperator::O21 => anticommutator(&model.sz_eig, &model.sx_eig),
    };
    let d = model.dim();
    let op_scale = max_abs(&op);
    if op_scale <= 1e-12 {
        return Err(Error::InvalidModel(
            "relaxation operator {S_z, S_x} vanishes identically for this model; \
             supply an explicit alpha^2 and a different operator or omit T_1"
                .into(),
        ));
    }
    let alpha2 = match noise.alpha2 {
        Some(a2) => a2,
        None => {
            // Normalize so the fastest one-step-like transition runs at 1/T_1.
            let mut best = 0.0_f64;
            for a in 0..d {
                for b in 0..a {
                    let dm = (model.sz_diag[(a, a)].re - model.sz_diag[(b, b)].re).abs();
                    if dm < DELTA_M_WINDOW {
                        best = best.max(op[(b, a)].norm_sqr());
                    }
                }
            }
            if best <= 1e-24 {
                return Err(Error::InvalidModel(
                    "no one-step-like transition available to normalize alpha^2; \
                     supply alpha^2 explicitly"
                        .into(),
                ));
            }
            1.0 / (t1 * best)
        }
    };
    let mut w = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..a {
            w[(b, a)] = alpha2 * op[(b, a)].norm_sqr();
        }
    }
    Ok((w, alpha2))
}

/// Dissipator for zero-temperature spin-phonon relaxation: downward jumps
/// `|b><a|` at the rates of [`relaxation_rates`], assembled in Lindblad
/// form (`L rho L^+ - (L^+ L rho + rho L^+ L) / 2` per jump).
pub fn relaxation_dissipator(model: &QuditModel, noise: &NoiseModel) -> Result<Liouvillian> {
    let (w, _) = relaxation_rates(model, noise)?;
    let d = model.dim();
    let mut mat = ComplexMatrix::zeros(d * d, d * d);
    for a in 0..d {
        for b in 0..a {
            let rate = w[(b, a)];
            if rate == 0.0 {
                continue;
            }
            // population transfer a -> b
            mat[(b * d + b, a * d + a)] += cr(rate);
            // anticommutator part: every coherence touching |a> decays at rate/2
            for x in 0..d {
                mat[(x * d + a, x * d + a)] += cr(-0.5 * rate);
                mat[(a * d + x, a * d + x)] += cr(-0.5 * rate);
            }
        }
    }
    let l = Liouvillian {
        mat,
        dim: d,
        has_dissipation: true,
    };
    l.check_trace_preserving()?;
    Ok(l)
}

/// Shared per-sample bookkeeping and physicality guards.
struct Recorder<'a> {
    projectors: &'a [ComplexMatrix],
    record_snapshots: bool,
    trace: RunTrace,
}

impl<'a> Recorder<'a> {
    fn new(dim: usize, projectors: &'a [ComplexMatrix], record_snapshots: bool) -> Result<Self> {
        for (k, p) in projectors.iter().enumerate() {
            if p.nrows() != dim || p.ncols() != dim {
                return Err(Error::InvalidArgument(format!(
                    "projector {k} has shape {}x{}, expected {dim}x{dim}",
                    p.nrows(),
                    p.ncols()
                )));
            }
        }
        Ok(Recorder {
            projectors,
            record_snapshots,
            trace: RunTrace {
                times: Vec::new(),
                populations: vec![Vec::new(); projectors.len()],
                trace: Vec::new(),
                purity: Vec::new(),
                snapshots: if record_snapshots { Some(Vec::new()) } else { None },
                final_rho: ComplexMatrix::zeros(dim, dim),
            },
        })
    }

    fn record(&mut self, t: f64, rho: &ComplexMatrix) -> Result<()> {
        let tr: Complex64 = rho.diagonal().iter().sum();
        if (tr.re - 1.0).abs() > TRACE_DRIFT_MAX || tr.im.abs() > TRACE_DRIFT_MAX {
            return Err(Error::NumericalFailure(format!(
                "trace drifted to {:.12} + {:.3e}i at t = {t:.6e} s",
                tr.re, tr.im
            )));
        }
        let herm = max_abs_diff(rho, &rho.adjoint());
        if herm > HERMITICITY_MAX {
            return Err(Error::NumericalFailure(format!(
                "state lost Hermiticity (deviation {herm:.3e}) at t = {t:.6e} s"
            )));
        }
        let sym = (rho + rho.adjoint()).map(|z| z * cr(0.5));
        let eig = hermitian_eigensystem(&sym)?;
        if eig.energies[0] < MIN_EIG_FLOOR {
            return Err(Error::NumericalFailure(format!(
                "state eigenvalue {:.3e} below floor at t = {t:.6e} s",
                eig.energies[0]
            )));
        }
        for (k, p) in self.projectors.iter().enumerate() {
            let val = (p * rho).diagonal().iter().sum::<Complex64>().re;
            if !(-POP_EPS..=1.0 + POP_EPS).contains(&val) {
                return Err(Error::NumericalFailure(format!(
                    "population {k} = {val:.12} out of range at t = {t:.6e} s"
                )));
            }
            self.trace.populations[k].push(val);
        }
        self.trace.times.push(t);
        self.trace.trace.push(tr.re);
        self.trace.purity.push(rho.norm_squared());
        if self.record_snapshots {
            self.trace.snapshots.as_mut().expect("enabled").push(rho.clone());
        }
        Ok(())
    }

    fn finish(mut self, rho: ComplexMatrix) -> RunTrace {
        self.trace.final_rho = rho;
        self.trace
    }
}

fn validate_initial_state(rho0: &ComplexMatrix) -> Result<()> {
    let d = rho0.nrows();
    if rho0.ncols() != d || d == 0 {
        return Err(Error::InvalidArgument(
            "initial state must be a square non-empty matrix".into(),
        ));
    }
    let herm = max_abs_diff(rho0, &rho0.adjoint());
    let tr: Complex64 = rho0.diagonal().iter().sum();
    if herm > 1e-10 || (tr - cr(1.0)).norm() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "initial state must be Hermitian with unit trace \
             (Hermiticity {herm:.3e}, trace deviation {:.3e})",
            (tr - cr(1.0)).norm()
        )));
    }
    let eig = hermitian_eigensystem(&((rho0 + rho0.adjoint()).map(|z| z * cr(0.5))))?;
    if eig.energies[0] < -1e-10 {
        return Err(Error::InvalidArgument(format!(
            "initial state has negative eigenvalue {:.3e}",
            eig.energies[0]
        )));
    }
    Ok(())
}

/// Propagate through piecewise-constant segments by exact superoperator
/// exponentials, sampling every `sample_dt` (plus the initial and final
/// instants). `projectors` are tracked as populations.
pub fn propagate_piecewise(
    rho0: &ComplexMatrix,
    segments: &[Segment],
    sample_dt: f64,
    projectors: &[ComplexMatrix],
    record_snapshots: bool,
) -> Result<RunTrace> {
    validate_initial_state(rho0)?;
    if !(sample_dt.is_finite() && sample_dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sample interval must be positive and finite, got {sample_dt:e}"
        )));
    }
    let d = rho0.nrows();
    for (i, seg) in segments.iter().enumerate() {
        if seg.generator.dim != d {
            return Err(Error::InvalidArgument(format!(
                "segment {i} generator dimension {} does not match state dimension {d}",
                seg.generator.dim
            )));
        }
        if !(seg.duration.is_finite() && seg.duration >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "segment {i} duration must be non-negative and finite, got {:e}",
                seg.duration
            )));
        }
    }
    let t_total: f64 = segments.iter().map(|s| s.duration).sum();
    let tol_t = 1e-9 * sample_dt;

    let mut rec = Recorder::new(d, projectors, record_snapshots)?;
    let mut rho = rho0.clone();
    rec.record(0.0, &rho)?;
    let mut sample_idx: u64 = 1;
    let mut t_seg_start = 0.0_f64;
    for seg in segments {
        let t_seg_end = t_seg_start + seg.duration;
        let mut t_cur = t_seg_start;
        let mut full_step: Option<ComplexMatrix> = None;
        loop {
            let t_next = sample_idx as f64 * sample_dt;
            if t_next > t_seg_end + tol_t {
                break;
            }
            let dt = (t_next - t_cur).max(0.0);
            let step = if (dt - sample_dt).abs() <= tol_t {
                if full_step.is_none() {
                    full_step = Some(seg.generator.propagator(sample_dt)?);
                }
                full_step.as_ref().expect("cached").clone()
            } else {
                seg.generator.propagator(dt)?
            };
            rho = apply_superoperator(&step, &rho);
            rec.record(t_next, &rho)?;
            t_cur = t_next;
            sample_idx += 1;
        }
        let rem = (t_seg_end - t_cur).max(0.0);
        if rem > tol_t {
            let step = seg.generator.propagator(rem)?;
            rho = apply_superoperator(&step, &rho);
        }
        t_seg_start = t_seg_end;
    }
    if rec
        .trace
        .times
        .last()
        .map(|&t| t_total - t > tol_t)
        .unwrap_or(true)
    {
        rec.record(t_total, &rho)?;
    }
    Ok(rec.finish(rho))
}

/// Uniform integration grid over `[0, t_span]`: internal steps bounded by
/// `dt`, samples every `sample_dt` (each sampling interval is subdivided
/// evenly).
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    /// Total span (seconds).
    pub t_span: f64,
    /// Upper bound on the internal integration step (seconds).
    pub dt: f64,
    /// Sampling interval (seconds).
    pub sample_dt: f64,
}

impl TimeGrid {
    fn validate(&self) -> Result<()> {
        if !(self.t_span.is_finite()
            && self.t_span > 0.0
            && self.dt.is_finite()
            && self.dt > 0.0
            && self.sample_dt.is_finite()
            && self.sample_dt > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "time span, step, and sample interval must be positive and finite \
                 (got {:e}, {:e}, {:e})",
                self.t_span, self.dt, self.sample_dt
            )));
        }
        Ok(())
    }

    fn halved(&self) -> TimeGrid {
        TimeGrid {
            dt: self.dt / 2.0,
            ..*self
        }
    }
}

/// Integrate the master equation with an explicitly time-dependent
/// Hamiltonian by fixed-step fourth-order Runge-Kutta on `grid`. Static
/// `dissipators` are applied through their superoperators.
pub fn integrate_time_dependent<F>(
    rho0: &ComplexMatrix,
    hamiltonian: F,
    dissipators: &[&Liouvillian],
    grid: TimeGrid,
    projectors: &[ComplexMatrix],
) -> Result<RunTrace>
where
    F: Fn(f64) -> ComplexMatrix,
{
    validate_initial_state(rho0)?;
    grid.validate()?;
    let (t_span, dt, sample_dt) = (grid.t_span, grid.dt, grid.sample_dt);
    let d = rho0.nrows();
    for l in dissipators {
        if l.dim != d {
            return Err(Error::InvalidArgument(
                "dissipator dimension does not match state".into(),
            ));
        }
    }
    let dissipator_sum = {
        let mut acc = Liouvillian::zero(d);
        for l in dissipators {
            acc.add_part(l)?;
        }
        acc
    };
    let rhs = |t: f64, rho: &ComplexMatrix| -> ComplexMatrix {
        let h = hamiltonian(t);
        let mut out = (&h * rho - rho * &h).map(|z| z * Complex64::new(0.0, -1.0));
        if dissipator_sum.has_dissipation {
            out += apply_superoperator(&dissipator_sum.mat, rho);
        }
        out
    };

    let mut rec = Recorder::new(d, projectors, false)?;
    let mut rho = rho0.clone();
    rec.record(0.0, &rho)?;
    let n_samples = (t_span / sample_dt).ceil().max(1.0) as u64;
    for k in 0..n_samples {
        let t_a = k as f64 * sample_dt;
        let t_b = ((k + 1) as f64 * sample_dt).min(t_span);
        if t_b <= t_a {
            break;
        }
        let m = ((t_b - t_a) / dt).ceil().max(1.0) as u64;
        let h = (t_b - t_a) / m as f64;
        for i in 0..m {
            let t = t_a + i as f64 * h;
            let k1 = rhs(t, &rho);
            let k2 = rhs(t + 0.5 * h, &(&rho + &k1.map(|z| z * cr(0.5 * h))));
            let k3 = rhs(t + 0.5 * h, &(&rho + &k2.map(|z| z * cr(0.5 * h))));
            let k4 = rhs(t + h, &(&rho + &k3.map(|z| z * cr(h))));
            rho += (k1 + k2.map(|z| z * cr(2.0)) + k3.map(|z| z * cr(2.0)) + k4)
                .map(|z| z * cr(h / 6.0));
        }
        rec.record(t_b, &rho)?;
    }
    Ok(rec.finish(rho))
}

/// Run [`integrate_time_dependent`] at `grid.dt` and `grid.dt / 2` and fail
/// with a numerical-failure error if any final population differs by more
/// than `tol`; returns the finer trace.
pub fn integrate_with_convergence<F>(
    rho0: &ComplexMatrix,
    hamiltonian: F,
    dissipators: &[&Liouvillian],
    grid: TimeGrid,
    projectors: &[ComplexMatrix],
    tol: f64,
) -> Result<RunTrace>
where
    F: Fn(f64) -> ComplexMatrix + Copy,
{
    let coarse = integrate_time_dependent(rho0, hamiltonian, dissipators, grid, projectors)?;
    let fine =
        integrate_time_dependent(rho0, hamiltonian, dissipators, grid.halved(), projectors)?;
    check_final_population_agreement(&coarse, &fine, tol, grid.dt)?;
    Ok(fine)
}

fn check_final_population_agreement(
    coarse: &RunTrace,
    fine: &RunTrace,
    tol: f64,
    dt: f64,
) -> Result<()> {
    for (k, (pc, pf)) in coarse
        .populations
        .iter()
        .zip(fine.populations.iter())
        .enumerate()
    {
        let (a, b) = match (pc.last(), pf.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => continue,
        };
        if (a - b).abs() > tol {
            return Err(Error::NumericalFailure(format!(
                "integration not converged at dt = {dt:.3e} s: \
                 final population {k} changes by {:.3e} under step halving (tol {tol:.1e})",
                (a - b).abs()
            )));
        }
    }
    Ok(())
}

/// Suggested integration step for a carrier at angular frequency `omega`:
/// 1/64 of the carrier period.
pub fn default_carrier_step(omega: f64) -> f64 {
    2.0 * std::f64::consts::PI / omega.abs() / 64.0
}

/// Lab-frame integration of the two-level baseline, specialized for speed.
///
/// Each internal step conjugates the state with the exact exponential of the
/// midpoint Hamiltonian and applies the (diagonal) dephasing factors in a
/// symmetric split, giving second-order accuracy without heap traffic in
/// the inner loop. Populations of the two basis states are tracked.
/// `verify_convergence`, when set, repeats the run at half the step and
/// requires the final populations to agree within the given tolerance.
pub fn integrate_qubit_lab(
    model: &QubitModel,
    t2: Option<f64>,
    grid: TimeGrid,
    verify_convergence: Option<f64>,
) -> Result<RunTrace> {
    if let Some(t2v) = t2 {
        if !(t2v.is_finite() && t2v > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "T_2 must be positive and finite, got {t2v:e}"
            )));
        }
    }
    grid.validate()?;
    let trace = qubit_lab_pass(model, t2, grid)?;
    if let Some(tol) = verify_convergence {
        let fine = qubit_lab_pass(model, t2, grid.halved())?;
        check_final_population_agreement(&trace, &fine, tol, grid.dt)?;
        return Ok(fine);
    }
    Ok(trace)
}

fn qubit_lab_pass(model: &QubitModel, t2: Option<f64>, grid: TimeGrid) -> Result<RunTrace> {
    let (t_span, dt, sample_dt) = (grid.t_span, grid.dt, grid.sample_dt);
    let p = model.params;
    let gamma = crate::model::units::gyromagnetic_ratio(p.g);
    // rho stored as [r00, r10, r01, r11]
    let mut r = [cr(1.0), C_ZERO, C_ZERO, C_ZERO];
    let proj_p0 = {
        let mut m = ComplexMatrix::zeros(2, 2);
        m[(0, 0)] = cr(1.0);
        m
    };
    let proj_p1 = {
        let mut m = ComplexMatrix::zeros(2, 2);
        m[(1, 1)] = cr(1.0);
        m
    };
    let projectors = [proj_p0, proj_p1];
    let mut rec = Recorder::new(2, &projectors, false)?;
    let to_matrix = |r: &[Complex64; 4]| {
        ComplexMatrix::from_column_slice(2, 2, r)
    };
    rec.record(0.0, &to_matrix(&r))?;

    let n_samples = (t_span / sample_dt).ceil().max(1.0) as u64;
    for k in 0..n_samples {
        let t_a = k as f64 * sample_dt;
        let t_b = ((k + 1) as f64 * sample_dt).min(t_span);
        if t_b <= t_a {
            break;
        }
        let m = ((t_b - t_a) / dt).ceil().max(1.0) as u64;
        let h = (t_b - t_a) / m as f64;
        let deph_half = t2.map(|t2v| (-0.5 * h / t2v).exp()).unwrap_or(1.0);
        for i in 0..m {
            let t_mid = t_a + (i as f64 + 0.5) * h;
            // H = a sigma_z + b sigma_x at the midpoint
            let a = 0.5 * p.delta + gamma * p.b1z_t * (p.omega_z * t_mid + p.phi_z).cos();
            let mut bx = p.bx_t;
            if let Some(tt) = p.transverse {
                bx += tt.b1x_t * (tt.omega_x * t_mid + tt.phi_x).cos();
            }
            let b = 0.5 * gamma * bx;
            let w = (a * a + b * b).sqrt();
            let theta = w * h;
            let (sin_t, cos_t) = theta.sin_cos();
            let (na, nb) = if w > 0.0 { (a / w, b / w) } else { (0.0, 0.0) };
            // U = cos(theta) I - i sin(theta) (na sigma_z + nb sigma_x)
            let u00 = Complex64::new(cos_t, -sin_t * na);
            let u01 = Complex64::new(0.0, -sin_t * nb);
            let u11 = Complex64::new(cos_t, sin_t * na);
            // symmetric dephasing split around the unitary
            r[1] *= deph_half;
            r[2] *= deph_half;
            // rho' = U rho U^+ with rho = [[r0, r2], [r1, r3]]
            let m00 = u00 * r[0] + u01 * r[1];
            let m01 = u00 * r[2] + u01 * r[3];
            let m10 = u01 * r[0] + u11 * r[1];
            let m11 = u01 * r[2] + u11 * r[3];
            let n00 = m00 * u00.conj() + m01 * u01.conj();
            let n01 = m00 * u01.conj() + m01 * u11.conj();
            let n10 = m10 * u00.conj() + m11 * u01.conj();
            let n11 = m10 * u01.conj() + m11 * u11.conj();
            r = [n00, n10, n01, n11];
            r[1] *= deph_half;
            r[2] *= deph_half;
        }
        rec.record(t_b, &to_matrix(&r))?;
    }
    let rho = to_matrix(&r);
    Ok(rec.finish(rho))
}

/// Superoperator of unitary conjugation `rho -> U rho U^+` in the
/// column-stacked convention (`conj(U) ⊗ U`).
pub fn unitary_superoperator(u: &ComplexMatrix) -> Result<ComplexMatrix> {
    if u.nrows() != u.ncols() {
        return Err(Error::InvalidArgument(format!(
            "unitary must be square, got {}x{}",
            u.nrows(),
            u.ncols()
        )));
    }
    let dev = max_abs_diff(&(u.adjoint() * u), &identity(u.nrows()));
    if dev > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "matrix is not unitary: |U^+U - I| = {dev:.3e}"
        )));
    }
    Ok(tensor(&u.conjugate(), u))
}

/// Choi matrix of a superoperator (column-stacked convention): block `(i, j)`
/// holds the channel applied to `|i><j|`.
pub fn choi_matrix(superop: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = superop.nrows();
    let d = (n as f64).sqrt().round() as usize;
    if d * d != n || superop.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "superoperator must be d^2 x d^2, got {}x{}",
            superop.nrows(),
            superop.ncols()
        )));
    }
    let mut choi = ComplexMatrix::zeros(n, n);
    for i in 0..d {
        for j in 0..d {
            let col = superop.column(j * d + i);
            // block (i, j) of the Choi matrix = channel applied to |i><j|
            for c in 0..d {
                for rr in 0..d {
                    choi[(i * d + rr, j * d + c)] = col[c * d + rr];
                }
            }
        }
    }
    Ok(choi)
}

/// Complete-positivity and trace-preservation diagnostics for a channel
/// given as a superoperator.
#[derive(Debug, Clone, Copy)]
pub struct CptpCheck {
    /// Smallest eigenvalue of the (Hermitized) Choi matrix; `>= -tol` means
    /// completely positive.
    pub min_choi_eigenvalue: f64,
    /// Largest deviation of `tr(channel(|i><j|))` from `delta_ij`.
    pub trace_preservation_error: f64,
    /// Hermiticity deviation of the Choi matrix.
    pub choi_hermiticity_error: f64,
}

/// Evaluate [`CptpCheck`] for a channel superoperator.
pub fn cptp_check(superop: &ComplexMatrix) -> Result<CptpCheck> {
    let choi = choi_matrix(superop)?;
    let n = choi.nrows();
    let d = (n as f64).sqrt().round() as usize;
    let herm = max_abs_diff(&choi, &choi.adjoint());
    let sym = (&choi + choi.adjoint()).map(|z| z * cr(0.5));
    let eig = hermitian_eigensystem(&sym)?;
    let mut tp_err = 0.0_f64;
    for i in 0..d {
        for j in 0..d {
            let mut tr = C_ZERO;
            for a in 0..d {
                tr += choi[(i * d + a, j * d + a)];
            }
            let target = if i == j { cr(1.0) } else { C_ZERO };
            tp_err = tp_err.max((tr - target).norm());
        }
    }
    Ok(CptpCheck {
        min_choi_eigenvalue: eig.energies[0],
        trace_preservation_error: tp_err,
        choi_hermiticity_error: herm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_qubit_model, build_qudit_model, rotating_frame_qubit, QubitParams, QuditParams,
    };
    use proptest::prelude::*;

    fn reference_qudit(s: f64) -> QuditModel {
        build_qudit_model(QuditParams::reference(s).expect("reference")).expect("model")
    }

    fn basis_projector(d: usize, k: usize) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(d, d);
        m[(k, k)] = cr(1.0);
        m
    }

    fn pure_state(v: &DVector<Complex64>) -> ComplexMatrix {
        let d = v.len();
        ComplexMatrix::from_fn(d, d, |i, j| v[i] * v[j].conj())
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::pure_dephasing(0.0).is_err());
        assert!(NoiseModel::pure_dephasing(-1.0).is_err());
        assert!(NoiseModel::pure_dephasing(f64::NAN).is_err());
        let nm = NoiseModel::pure_dephasing(50e-6).unwrap();
        assert!(nm.t1.is_none() && nm.gamma.is_none());
        assert!(nm.clone().with_t1(0.0).is_err());
        assert!(nm.clone().with_alpha2(-1.0).is_err());
        assert!(nm.with_t1(0.1).unwrap().t1.is_some());
    }

    #[test]
    fn gamma_override_requires_conditional_negativity() {
        let nm = NoiseModel::pure_dephasing(50e-6).unwrap();
        // asymmetric
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(nm.clone().with_gamma(bad).is_err());
        // nonzero diagonal
        let bad = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, 1.0, 0.0]);
        assert!(nm.clone().with_gamma(bad).is_err());
        // violates conditional negative definiteness (no metric embedding)
        let bad = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 10.0, 1.0, 0.0, 1.0, 10.0, 1.0, 0.0],
        );
        assert!(nm.clone().with_gamma(bad).is_err());
        // a squared-distance profile is accepted
        let c = [0.3_f64, -0.9, 1.4];
        let good = DMatrix::from_fn(3, 3, |i, j| (c[i] - c[j]).powi(2));
        let nm2 = nm.with_gamma(good).unwrap();
        let model = reference_qudit(1.5);
        // rate matrix must then be Gamma / T_2 — but dimensions mismatch (3 vs 4)
        assert!(dephasing_rate_matrix(&model, &nm2).is_err());
    }

    #[test]
    fn qubit_dephasing_matches_exponential_decay() {
        let t2 = 50e-6;
        let l = qubit_dephasing_dissipator(t2).unwrap();
        assert!(l.has_dissipation);
        let plus = DVector::from_vec(vec![cr(1.0 / 2.0_f64.sqrt()); 2]);
        let rho0 = pure_state(&plus);
        let seg = [Segment {
            generator: l,
            duration: 2.0 * t2,
        }];
        let out = propagate_piecewise(&rho0, &seg, 0.25 * t2, &[], true).unwrap();
        let snaps = out.snapshots.as_ref().unwrap();
        for (t, rho) in out.times.iter().zip(snaps.iter()) {
            let expected = 0.5 * (-t / t2).exp();
            assert!((rho[(0, 1)].re - expected).abs() < 1e-12);
            assert!((rho[(0, 0)].re - 0.5).abs() < 1e-12);
            assert!((rho[(1, 1)].re - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dephasing_rates_structure_spin_three_halves() {
        let model = reference_qudit(1.5);
        let t2 = 50e-6;
        let noise = NoiseModel::pure_dephasing(t2).unwrap();
        let rates = dephasing_rate_matrix(&model, &noise).unwrap();
        let d = model.dim();
        let mut max_rate = 0.0_f64;
        for a in 0..d {
            assert_eq!(rates[(a, a)], 0.0);
            for b in 0..d {
                assert!(rates[(a, b)] >= 0.0);
                assert!((rates[(a, b)] - rates[(b, a)]).abs() < 1e-18);
                max_rate = max_rate.max(rates[(a, b)]);
            }
        }
        assert!((max_rate - 1.0 / t2).abs() < 1e-9 / t2);
    }

    #[test]
    fn dephasing_fixes_diagonal_states() {
        let model = reference_qudit(1.5);
        let noise = NoiseModel::pure_dephasing(50e-6).unwrap();
        let l = dephasing_dissipator(&model, &noise).unwrap();
        let d = model.dim();
        let probs = [0.4, 0.3, 0.2, 0.1];
        let rho = ComplexMatrix::from_fn(d, d, |i, j| if i == j { cr(probs[i]) } else { C_ZERO });
        let drho = apply_superoperator(&l.mat, &rho);
        assert!(max_abs(&drho) < 1e-12);
    }

    #[test]
    fn relaxation_rates_pin_fastest_transition() {
        let model = reference_qudit(2.5);
        let t1 = 0.1;
        let noise = NoiseModel::pure_dephasing(50e-6)
            .unwrap()
            .with_t1(t1)
            .unwrap();
        let (w, alpha2) = relaxation_rates(&model, &noise).unwrap();
        assert!(alpha2 > 0.0);
        let d = model.dim();
        let mut max_rate = 0.0_f64;
        for a in 0..d {
            for b in 0..d {
                assert!(w[(b, a)] >= 0.0);
                if b >= a {
                    assert_eq!(w[(b, a)], 0.0, "only downward rates allowed");
                }
                max_rate = max_rate.max(w[(b, a)]);
            }
        }
        assert!(
            (max_rate - 1.0 / t1).abs() < 1e-9 / t1,
            "fastest one-step-like rate must equal 1/T_1, got {max_rate}"
        );
    }

    #[test]
    fn relaxation_vanishes_for_long_t1() {
        let model = reference_qudit(1.5);
        let noise = NoiseModel::pure_dephasing(50e-6)
            .unwrap()
            .with_t1(1e12)
            .unwrap();
        let l = relaxation_dissipator(&model, &noise).unwrap();
        assert!(max_abs(&l.mat) < 1e-11);
    }

    #[test]
    fn relaxation_rejected_for_spin_half() {
        // {s_z, s_x} = 0 identically for spin 1/2: no valid jump operator.
        let params = QuditParams {
            s: 0.5,
            b_t: 0.35,
            d: 0.0,
            e: 0.0,
            g: 2.0,
        };
        let model = build_qudit_model(params).unwrap();
        let noise = NoiseModel::pure_dephasing(50e-6)
            .unwrap()
            .with_t1(0.1)
            .unwrap();
        match relaxation_dissipator(&model, &noise) {
            Err(Error::InvalidModel(_)) => {}
            other => panic!("expected invalid-model, got {other:?}"),
        }
        // and requesting relaxation without T_1 is an argument error
        let no_t1 = NoiseModel::pure_dephasing(50e-6).unwrap();
        let qudit = reference_qudit(1.5);
        assert!(matches!(
            relaxation_dissipator(&qudit, &no_t1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn relaxation_keeps_code_span_population() {
        // Spin 5/2, T_1 = 0.1 s: after 10 ms of relaxation-only evolution a
        // mixed state of two parity-block-uniform vectors keeps > 90% of its
        // population in the span of those vectors (frozen value 0.9702).
        let model = reference_qudit(2.5);
        let d = model.dim();
        let noise = NoiseModel::pure_dephasing(50e-6)
            .unwrap()
            .with_t1(0.1)
            .unwrap();
        let l = relaxation_dissipator(&model, &noise).unwrap();
        // classify eigenstates by the parity of their |m>-basis support
        let mut class_a = Vec::new();
        let mut class_b = Vec::new();
        for j in 0..d {
            let even: f64 = (0..d)
                .step_by(2)
                .map(|k| model.eig.vectors[(k, j)].norm_sqr())
                .sum();
            if even > 0.5 {
                class_a.push(j);
            } else {
                class_b.push(j);
            }
        }
        assert_eq!(class_a.len(), 3);
        assert_eq!(class_b.len(), 3);
        let uniform = |idx: &[usize]| {
            let amp = cr(1.0 / (idx.len() as f64).sqrt());
            let mut v = DVector::from_element(d, C_ZERO);
            for &k in idx {
                v[k] = amp;
            }
            v
        };
        let wa = uniform(&class_a);
        let wb = uniform(&class_b);
        let rho0 = (pure_state(&wa) + pure_state(&wb)).map(|z| z * cr(0.5));
        let span_proj = pure_state(&wa) + pure_state(&wb);
        let seg = [Segment {
            generator: l,
            duration: 10e-3,
        }];
        let out = propagate_piecewise(&rho0, &seg, 10e-3, &[span_proj], false).unwrap();
        let retained = *out.populations[0].last().unwrap();
        assert!(retained > 0.90, "retained {retained}");
        assert!((retained - 0.9702414436763598).abs() < 5e-3);
    }

    #[test]
    fn zero_liouvillian_keeps_state() {
        let d = 3;
        let l = Liouvillian::zero(d);
        let v = DVector::from_vec(vec![cr(0.6), cr(0.48), cr(0.64)]);
        let rho0 = pure_state(&v);
        let seg = [Segment {
            generator: l,
            duration: 1.0,
        }];
        let out = propagate_piecewise(&rho0, &seg, 0.25, &[basis_projector(d, 0)], true).unwrap();
        for rho in out.snapshots.as_ref().unwrap() {
            assert!(max_abs_diff(rho, &rho0) < 1e-14);
        }
    }

    #[test]
    fn unitary_segment_conserves_purity() {
        let model = reference_qudit(1.5);
        let h = model.sx_eig.map(|z| z * cr(1e4));
        let l = Liouvillian::coherent(&h).unwrap();
        assert!(!l.has_dissipation);
        let v = DVector::from_vec(vec![cr(0.5), cr(0.5), cr(0.5), cr(0.5)]);
        let rho0 = pure_state(&v);
        let dt_total = 3e-4;
        let seg = [Segment {
            generator: l,
            duration: dt_total,
        }];
        let out = propagate_piecewise(&rho0, &seg, dt_total / 8.0, &[], true).unwrap();
        for p in &out.purity {
            assert!((p - 1.0).abs() < 1e-10);
        }
        // final snapshot matches direct unitary conjugation
        let u = matrix_exponential(&h.map(|z| z * Complex64::new(0.0, -dt_total))).unwrap();
        let expected = &u * &rho0 * u.adjoint();
        assert!(max_abs_diff(&out.final_rho, &expected) < 1e-10);
    }

    #[test]
    fn resonant_rabi_cosine_law() {
        let model = build_qubit_model(QubitParams::baseline(1e-6)).unwrap();
        let rf = rotating_frame_qubit(&model).unwrap();
        let l = Liouvillian::coherent(&rf.h_rf).unwrap();
        let tau = 2.0 * std::f64::consts::PI / rf.omega_r;
        let rho0 = basis_projector(2, 0);
        let seg = [Segment {
            generator: l,
            duration: tau,
        }];
        let out =
            propagate_piecewise(&rho0, &seg, tau / 200.0, &[basis_projector(2, 0)], false).unwrap();
        for (t, p0) in out.times.iter().zip(out.populations[0].iter()) {
            let expected = (0.5 * rf.omega_r * t).cos().powi(2);
            assert!(
                (p0 - expected).abs() < 1e-6,
                "t = {t:.3e}: {p0} vs {expected}"
            );
        }
    }

    #[test]
    fn rk4_matches_piecewise_for_constant_generator() {
        let model = reference_qudit(1.5);
        let h = (model.sx_eig.map(|z| z * cr(8e3)) + model.sz_diag.map(|z| z * cr(5e3)))
            .map(|z| z);
        let noise = NoiseModel::pure_dephasing(2e-4).unwrap();
        let deph = dephasing_dissipator(&model, &noise).unwrap();
        let d = model.dim();
        let v = DVector::from_vec(vec![cr(0.5); 4]);
        let rho0 = pure_state(&v);
        let mut gen = Liouvillian::coherent(&h).unwrap();
        gen.add_part(&deph).unwrap();
        let t_span = 2e-4;
        let seg = [Segment {
            generator: gen,
            duration: t_span,
        }];
        let projs: Vec<_> = (0..d).map(|k| basis_projector(d, k)).collect();
        let exact = propagate_piecewise(&rho0, &seg, t_span / 4.0, &projs, false).unwrap();
        let rk4 = integrate_time_dependent(
            &rho0,
            |_t| h.clone(),
            &[&deph],
            TimeGrid {
                t_span,
                dt: t_span / 4000.0,
                sample_dt: t_span / 4.0,
            },
            &projs,
        )
        .unwrap();
        for k in 0..d {
            for (a, b) in exact.populations[k].iter().zip(rk4.populations[k].iter()) {
                assert!((a - b).abs() < 1e-8, "projector {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn qubit_stepper_matches_rk4() {
        let model = build_qubit_model(QubitParams::baseline(50e-6)).unwrap();
        let t2 = 50e-6;
        let period = 2.0 * std::f64::consts::PI / model.params.omega_z;
        let t_span = 40.0 * period;
        let dt = period / 128.0;
        let deph = qubit_dephasing_dissipator(t2).unwrap();
        let rho0 = basis_projector(2, 0);
        let projs = [basis_projector(2, 0), basis_projector(2, 1)];
        let hm = model.clone();
        let grid = TimeGrid {
            t_span,
            dt,
            sample_dt: t_span / 8.0,
        };
        let rk4 =
            integrate_time_dependent(&rho0, move |t| hm.hamiltonian(t), &[&deph], grid, &projs)
                .unwrap();
        let fast = integrate_qubit_lab(&model, Some(t2), grid, None).unwrap();
        for k in 0..2 {
            for (a, b) in rk4.populations[k].iter().zip(fast.populations[k].iter()) {
                assert!((a - b).abs() < 1e-6, "pop {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn qubit_stepper_halving_convergence() {
        let model = build_qubit_model(QubitParams::baseline(50e-6)).unwrap();
        let period = 2.0 * std::f64::consts::PI / model.params.omega_z;
        let t_span = 50.0 * period;
        // adequate step: converged within 1e-6 under halving
        let ok = integrate_qubit_lab(
            &model,
            Some(50e-6),
            TimeGrid {
                t_span,
                dt: period / 64.0,
                sample_dt: t_span,
            },
            Some(1e-6),
        );
        assert!(ok.is_ok());
        // A strongly mixing model (gap comparable to the transverse term)
        // integrated with an absurd step must be rejected by the check.
        let mixing = build_qubit_model(QubitParams {
            delta: 2.0 * std::f64::consts::PI * 1e6,
            g: 2.0,
            b1z_t: 1e-9,
            omega_z: 2.0 * std::f64::consts::PI * 1e6,
            phi_z: 0.0,
            bx_t: 7e-5,
            transverse: None,
        })
        .unwrap();
        let span = 3e-6;
        let bad = integrate_qubit_lab(
            &mixing,
            None,
            TimeGrid {
                t_span: span,
                dt: span / 3.0,
                sample_dt: span,
            },
            Some(1e-6),
        );
        assert!(matches!(bad, Err(Error::NumericalFailure(_))));
    }

    /// Linear-interpolation first crossing of a population below 1/2.
    fn first_crossing(times: &[f64], pops: &[f64]) -> Option<f64> {
        for i in 1..times.len() {
            if pops[i - 1] >= 0.5 && pops[i] < 0.5 {
                let f = (pops[i - 1] - 0.5) / (pops[i - 1] - pops[i]);
                return Some(times[i - 1] + f * (times[i] - times[i - 1]));
            }
        }
        None
    }

    #[test]
    fn qubit_lab_vs_rotating_frame() {
        // alpha = 1/35 baseline at B_x = 50 uT: lab-frame and rotating-frame
        // populations agree within 2e-2, and the ideal crossing time matches
        // tau/4 within 2%.
        let bx = 50e-6;
        let t2 = 50e-6;
        let model = build_qubit_model(QubitParams::baseline(bx)).unwrap();
        let rf = rotating_frame_qubit(&model).unwrap();
        assert!((model.alpha() - 1.0 / 35.0).abs() < 1e-12);
        let tau = 2.0 * std::f64::consts::PI / rf.omega_r;
        let t_span = 0.48 * tau; // covers the crossing near tau/4
        let sample_dt = t_span / 240.0;
        let period = 2.0 * std::f64::consts::PI / model.params.omega_z;

        // damped comparison
        let grid = TimeGrid {
            t_span,
            dt: period / 64.0,
            sample_dt,
        };
        let lab = integrate_qubit_lab(&model, Some(t2), grid, None).unwrap();
        let mut gen = Liouvillian::coherent(&rf.h_rf).unwrap();
        gen.add_part(&qubit_dephasing_dissipator(t2).unwrap()).unwrap();
        let seg = [Segment {
            generator: gen,
            duration: t_span,
        }];
        let rho0 = basis_projector(2, 0);
        let projs = [basis_projector(2, 0), basis_projector(2, 1)];
        let rot = propagate_piecewise(&rho0, &seg, sample_dt, &projs, false).unwrap();
        assert_eq!(lab.times.len(), rot.times.len());
        let mut worst = 0.0_f64;
        for k in 0..2 {
            for (a, b) in lab.populations[k].iter().zip(rot.populations[k].iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 2e-2, "frame deviation {worst}");

        // ideal crossing time vs tau/4
        let lab_ideal = integrate_qubit_lab(&model, None, grid, None).unwrap();
        let tc = first_crossing(&lab_ideal.times, &lab_ideal.populations[0])
            .expect("crossing must exist without dephasing");
        let rel = (tc - 0.25 * tau).abs() / (0.25 * tau);
        assert!(rel < 0.02, "crossing {tc:.6e} vs tau/4 {:.6e}", 0.25 * tau);
    }

    #[test]
    fn damped_single_oscillation() {
        // T_2 = 10 us, B_x = 50 uT: the crossing survives but only a single
        // visibly damped oscillation remains; the second maximum sits within
        // 1/e of the mixed-state plateau.
        let model = build_qubit_model(QubitParams::baseline(50e-6)).unwrap();
        let rf = rotating_frame_qubit(&model).unwrap();
        let t2 = 10e-6;
        let mut gen = Liouvillian::coherent(&rf.h_rf).unwrap();
        gen.add_part(&qubit_dephasing_dissipator(t2).unwrap()).unwrap();
        let t_span = 40e-6;
        let seg = [Segment {
            generator: gen,
            duration: t_span,
        }];
        let rho0 = basis_projector(2, 0);
        let out =
            propagate_piecewise(&rho0, &seg, t_span / 2000.0, &[basis_projector(2, 0)], false)
                .unwrap();
        let p0 = &out.populations[0];
        let tc = first_crossing(&out.times, p0).expect("crossing exists");
        assert!(tc > 0.0);
        // location of the first minimum, then the following local maximum
        let imin = p0
            .iter()
            .enumerate()
            .take(p0.len() / 2)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let (imax, &second_max) = p0[imin..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, v)| (imin + i, v))
            .unwrap();
        assert!(imax > imin);
        assert!(second_max > 0.5, "oscillation should still be visible");
        assert!(
            second_max - 0.5 <= 0.5 / std::f64::consts::E,
            "second maximum {second_max} not damped enough"
        );
        // frozen reference from the damped two-level solution
        assert!((second_max - 0.6395963521356526).abs() < 2e-3);
    }

    #[test]
    fn unitary_superoperator_matches_conjugation() {
        let theta = 0.7_f64;
        let u = ComplexMatrix::from_row_slice(
            2,
            2,
            &[
                cr(theta.cos()),
                Complex64::new(0.0, -theta.sin()),
                Complex64::new(0.0, -theta.sin()),
                cr(theta.cos()),
            ],
        );
        let s = unitary_superoperator(&u).unwrap();
        let rho = ComplexMatrix::from_row_slice(
            2,
            2,
            &[cr(0.7), Complex64::new(0.1, 0.2), Complex64::new(0.1, -0.2), cr(0.3)],
        );
        let direct = &u * &rho * u.adjoint();
        let via_super = unvectorize(&(&s * vectorize(&rho)), 2);
        assert!(max_abs_diff(&direct, &via_super) < 1e-14);
        assert!(matches!(
            unitary_superoperator(&ComplexMatrix::zeros(2, 2)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn generated_channels_are_cptp() {
        let model = reference_qudit(1.5);
        let noise = NoiseModel::pure_dephasing(50e-6)
            .unwrap()
            .with_t1(0.1)
            .unwrap();
        let h = model.sx_eig.map(|z| z * cr(1e5));
        let mut gen = Liouvillian::coherent(&h).unwrap();
        gen.add_part(&dephasing_dissipator(&model, &noise).unwrap())
            .unwrap();
        gen.add_part(&relaxation_dissipator(&model, &noise).unwrap())
            .unwrap();
        for t in [0.0, 15e-6, 150e-6] {
            let e = gen.propagator(t).unwrap();
            let check = cptp_check(&e).unwrap();
            assert!(
                check.min_choi_eigenvalue > -1e-9,
                "t = {t}: min Choi eigenvalue {}",
                check.min_choi_eigenvalue
            );
            assert!(check.trace_preservation_error < 1e-9);
            assert!(check.choi_hermiticity_error < 1e-9);
        }
    }

    #[test]
    fn nonphysical_generator_detected() {
        // A trace-decaying generator must be caught during propagation.
        let d = 2;
        let mut l = Liouvillian::zero(d);
        l.mat = ComplexMatrix::identity(d * d, d * d).map(|z| z * cr(-10.0));
        l.has_dissipation = true;
        assert!(l.check_trace_preserving().is_err());
        let rho0 = basis_projector(d, 0);
        let seg = [Segment {
            generator: l,
            duration: 1.0,
        }];
        match propagate_piecewise(&rho0, &seg, 0.5, &[], false) {
            Err(Error::NumericalFailure(_)) => {}
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_initial_state() {
        let l = Liouvillian::zero(2);
        let seg = [Segment {
            generator: l,
            duration: 1.0,
        }];
        // non-unit trace
        let bad = ComplexMatrix::identity(2, 2);
        assert!(matches!(
            propagate_piecewise(&bad, &seg, 0.5, &[], false),
            Err(Error::InvalidArgument(_))
        ));
        // negative eigenvalue
        let mut neg = ComplexMatrix::zeros(2, 2);
        neg[(0, 0)] = cr(1.5);
        neg[(1, 1)] = cr(-0.5);
        assert!(matches!(
            propagate_piecewise(&neg, &seg, 0.5, &[], false),
            Err(Error::InvalidArgument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_piecewise_preserves_density_invariants(
            seed in 0u64..1u64 << 48,
            dim in 2usize..5,
            log_t2 in -6.0f64..-3.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t2 = 10f64.powf(log_t2);
            // random Hermitian H with scale comparable to 1/T_2
            let scale = 1.0 / t2;
            let mut h = ComplexMatrix::zeros(dim, dim);
            for i in 0..dim {
                h[(i, i)] = cr(rng.gen_range(-1.0..1.0) * scale);
                for j in 0..i {
                    let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                        * cr(0.5 * scale);
                    h[(i, j)] = z;
                    h[(j, i)] = z.conj();
                }
            }
            // random coherence decay rates from a random level profile
            let levels: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let spread = levels
                .iter()
                .flat_map(|a| levels.iter().map(move |b| (a - b).abs()))
                .fold(0.0_f64, f64::max)
                .max(1e-3);
            let rates = DMatrix::from_fn(dim, dim, |i, j| {
                ((levels[i] - levels[j]) / spread).powi(2) / t2
            });
            let mut gen = Liouvillian::coherent(&h).unwrap();
            gen.add_part(&dephasing_from_rates(&rates).unwrap()).unwrap();
            // random pure initial state
            let mut v = DVector::from_fn(dim, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let norm = v.norm();
            v /= cr(norm);
            let rho0 = pure_state(&v);
            let seg = [Segment { generator: gen, duration: 3.0 * t2 }];
            let projs: Vec<_> = (0..dim).map(|k| basis_projector(dim, k)).collect();
            let out = propagate_piecewise(&rho0, &seg, 0.5 * t2, &projs, false).unwrap();
            for (i, tr) in out.trace.iter().enumerate() {
                prop_assert!((tr - 1.0).abs() < 1e-10, "sample {i} trace {tr}");
            }
            for p in &out.purity {
                prop_assert!(*p <= 1.0 + 1e-9);
            }
            for pops in &out.populations {
                for p in pops {
                    prop_assert!(*p >= -POP_EPS && *p <= 1.0 + POP_EPS);
                }
            }
        }
    }
}
