//! The sensing protocol itself: error-corrected logical Rabi runs, the
//! two-level baseline, calibration curves, sensitivity extraction, and the
//! correction-interval sweep.
//!
//! A logical run alternates free sensing windows of length `delta_s` (the
//! multi-tone drive plus decoherence) with instantaneous correction cycles.
//! Each cycle entangles the qudit with a fresh `d/2`-level ancilla through a
//! syndrome-extraction gate, measures the ancilla, applies the matching
//! recovery, and discards the ancilla; averaging over outcomes yields a
//! deterministic channel on the qudit, so the whole run is a product of
//! precomputed superoperator steps. Sample times count sensing time only:
//! cycle and readout overhead enter the sensitivity through the total
//! acquisition time, not through the trace clock.

use std::collections::HashMap;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::code::{
    build_error_words, default_supports, optimize_codewords, tomography_kraus, CodeSpace,
};
use crate::compiler::{enumerate_transitions, tone_synthesis, trotter_grouping, PulseSchedule};
use crate::dynamics::{
    cptp_check, dephasing_dissipator, propagate_piecewise, qubit_dephasing_dissipator,
    relaxation_dissipator, unvectorize, vectorize, CptpCheck, Liouvillian, NoiseModel, RunTrace,
    Segment,
};
use crate::model::{
    build_qubit_model, build_qudit_model, rotating_frame_qubit, QubitParams, QuditModel,
    QuditParams,
};
use crate::spinops::{cr, identity, max_abs_diff, tensor, ComplexMatrix, C_ZERO};
use crate::{Error, Result};

/// Dephasing time used to shape the code when the run itself is noiseless:
/// a code must be matched to *some* finite error channel, and an infinite
/// `T_2` leaves the channel structure undefined, so the design falls back to
/// the reference coherence time.
const CODE_DESIGN_T2_S: f64 = 50e-6;

/// Relative tolerance used when snapping time subdivisions to boundaries.
const TIME_SNAP: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Complete description of one protocol run or sweep.
///
/// `spin = None` selects the two-level baseline; `Some(s)` with `s >= 3/2`
/// selects the logical protocol on a spin-`s` qudit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Spin quantum number of the sensor, or `None` for the qubit baseline.
    pub spin: Option<f64>,
    /// Dephasing time (seconds); `f64::INFINITY` disables dephasing.
    pub t2_s: f64,
    /// Longitudinal relaxation time (seconds); `None` disables relaxation.
    pub t1_s: Option<f64>,
    /// Reference drive amplitude fed to tone synthesis (tesla).
    pub b_ref_t: f64,
    /// Longitudinal drive amplitude of the qubit baseline (tesla).
    pub b1z_t: f64,
    /// Transverse signal field to sense (tesla).
    pub bx_t: f64,
    /// Sensing-window length between correction cycles (seconds).
    pub delta_s: f64,
    /// Dissipation interval covered by one correction cycle (seconds).
    pub t_cycle_s: f64,
    /// Readout dead time appended after the run (seconds).
    pub t_m_s: f64,
    /// Total sensing time (seconds).
    pub t_max_s: f64,
    /// Population sampling interval (seconds); at most `delta_s / 4`.
    pub sample_dt_s: f64,
    /// Drive-group interleaving repetitions per sensing window.
    pub trotter_steps: usize,
    /// Whether correction cycles run between sensing windows.
    pub qec_enabled: bool,
    /// Restarts for the codeword optimizer.
    pub restarts: usize,
    /// Seed for the codeword optimizer.
    pub seed: u64,
    /// Non-reference qudit parameters; `None` uses the reference set at
    /// `spin`. When set, its spin must match `spin`.
    pub qudit_params: Option<QuditParams>,
    /// Non-baseline two-level parameters; `None` uses the standard baseline.
    /// The signal field and longitudinal drive amplitude are still taken
    /// from `bx_t` and `b1z_t`.
    pub qubit_params: Option<QubitParams>,
}

impl ProtocolConfig {
    /// Two-level baseline at the reference field point.
    pub fn qubit_baseline(bx_t: f64) -> Self {
        ProtocolConfig {
            spin: None,
            t2_s: f64::INFINITY,
            t1_s: None,
            b_ref_t: 0.01,
            b1z_t: 0.01,
            bx_t,
            delta_s: 500e-9,
            t_cycle_s: 100e-9,
            t_m_s: 1e-6,
            t_max_s: 2e-3,
            sample_dt_s: 125e-9,
            trotter_steps: 64,
            qec_enabled: false,
            restarts: 32,
            seed: 7,
            qudit_params: None,
            qubit_params: None,
        }
    }

    /// Logical protocol on a spin-`s` qudit with the default timing budget.
    pub fn logical(s: f64, bx_t: f64) -> Self {
        ProtocolConfig {
            spin: Some(s),
            t2_s: 50e-6,
            t1_s: None,
            b_ref_t: default_b_ref(s),
            b1z_t: 0.01,
            bx_t,
            delta_s: 500e-9,
            t_cycle_s: 100e-9,
            t_m_s: 1e-6,
            t_max_s: 20e-3,
            sample_dt_s: 125e-9,
            trotter_steps: 64,
            qec_enabled: true,
            restarts: 32,
            seed: 7,
            qudit_params: None,
            qubit_params: None,
        }
    }

    /// Check every invariant the protocol machinery relies on.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.spin {
            if !(s.is_finite() && s >= 1.5) {
                return Err(Error::InvalidArgument(format!(
                    "logical protocol needs spin >= 3/2, got {s}"
                )));
            }
        }
        if self.t2_s.is_nan() || self.t2_s <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "T_2 must be positive (infinity allowed), got {:e}",
                self.t2_s
            )));
        }
        if let Some(t1) = self.t1_s {
            if !(t1.is_finite() && t1 > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "T_1 must be positive and finite, got {t1:e}"
                )));
            }
        }
        for (name, value) in [("b_ref_t", self.b_ref_t), ("b1z_t", self.b1z_t)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {value:e}"
                )));
            }
        }
        if !(self.bx_t.is_finite() && self.bx_t >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "signal field must be non-negative and finite, got {:e}",
                self.bx_t
            )));
        }
        if !(self.t_max_s.is_finite() && self.t_max_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "total sensing time must be positive and finite, got {:e}",
                self.t_max_s
            )));
        }
        if !(self.delta_s.is_finite() && self.delta_s > 0.0 && self.delta_s <= self.t_max_s) {
            return Err(Error::InvalidArgument(format!(
                "sensing window must satisfy 0 < delta <= t_max, got delta {:e} with t_max {:e}",
                self.delta_s, self.t_max_s
            )));
        }
        let max_sample = self.delta_s / 4.0;
        if !(self.sample_dt_s.is_finite()
            && self.sample_dt_s > 0.0
            && self.sample_dt_s <= max_sample * (1.0 + 1e-12))
        {
            return Err(Error::InvalidArgument(format!(
                "sampling interval must satisfy 0 < sample_dt <= delta / 4, got {:e} with delta {:e}",
                self.sample_dt_s, self.delta_s
            )));
        }
        for (name, value) in [("t_cycle_s", self.t_cycle_s), ("t_m_s", self.t_m_s)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative and finite, got {value:e}"
                )));
            }
        }
        if self.trotter_steps == 0 {
            return Err(Error::InvalidArgument(
                "at least one drive-interleaving repetition per window is required".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "codeword optimization needs at least one restart".into(),
            ));
        }
        if let Some(params) = &self.qudit_params {
            match self.spin {
                Some(s) if s == params.s => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "qudit parameter override at spin {} does not match configured spin {:?}",
                        params.s, self.spin
                    )));
                }
            }
        }
        if self.qubit_params.is_some() && self.spin.is_some() {
            return Err(Error::InvalidArgument(
                "two-level parameter override conflicts with a qudit configuration".into(),
            ));
        }
        Ok(())
    }
}

/// Reference tone amplitude that keeps every synthesized tone perturbative
/// (`eta < 0.1`) for the reference zero-field splittings at the given spin.
fn default_b_ref(s: f64) -> f64 {
    if s < 2.0 {
        0.01
    } else {
        1e-3
    }
}

// ---------------------------------------------------------------------------
// Syndrome extraction and recovery
// ---------------------------------------------------------------------------

/// Syndrome-extraction gate written in the code basis.
///
/// Basis ordering is `|l, k> (x) |j>` with `q = l * n + k` indexing the code
/// and error words and `j` the ancilla level (`n = d / 2` words per label).
/// The gate copies the error index onto a fresh ancilla and rotates the
/// marked pair so that it squares to a benign phase:
/// `|l, k>|0> -> |l, k>|k>` and `|l, k>|k> -> -|l, k>|0>` for `k != 0`,
/// identity on `|l, 0>|0>` and on every unmarked ancilla level.
pub fn s_gate_logical(space: &CodeSpace) -> Result<ComplexMatrix> {
    let n = space.words_per_label();
    if n < 1 {
        return Err(Error::InvalidArgument(
            "code space carries no error words".into(),
        ));
    }
    let dim = 2 * n * n;
    let mut u = identity(dim);
    for ell in 0..2 {
        for k in 1..n {
            let q = ell * n + k;
            let from0 = q * n; // |l,k>|0>
            let fromk = q * n + k; // |l,k>|k>
            u[(from0, from0)] = C_ZERO;
            u[(fromk, fromk)] = C_ZERO;
            u[(fromk, from0)] = cr(1.0);
            u[(from0, fromk)] = cr(-1.0);
        }
    }
    Ok(u)
}

/// Syndrome-extraction gate on the physical qudit (x) ancilla composite.
///
/// Conjugates [`s_gate_logical`] by the code-word frame on the qudit factor.
/// Fails if the stored code words are not orthonormal, since the gate is
/// then no longer unitary.
pub fn build_s_gate(space: &CodeSpace) -> Result<ComplexMatrix> {
    space.validate()?;
    let n = space.words_per_label();
    let logical = s_gate_logical(space)?;
    let a_comp = tensor(&space.a, &identity(n));
    let u = &a_comp * logical * a_comp.adjoint();
    let dev = max_abs_diff(&(u.adjoint() * &u), &identity(u.nrows()));
    if dev > 1e-12 {
        return Err(Error::InvalidModel(format!(
            "syndrome gate is not unitary (deviation {dev:.3e}); the code space is corrupt"
        )));
    }
    Ok(u)
}

/// Recovery unitary for syndrome `k` in the code basis: swaps the error
/// words `|l, k> <-> |l, 0>` for both labels and leaves everything else
/// alone (`k = 0` is the identity).
fn recovery_logical(space: &CodeSpace, k: usize) -> ComplexMatrix {
    let n = space.words_per_label();
    let mut z = identity(2 * n);
    if k > 0 {
        for ell in 0..2 {
            let a = ell * n;
            let b = ell * n + k;
            z[(a, a)] = C_ZERO;
            z[(b, b)] = C_ZERO;
            z[(a, b)] = cr(1.0);
            z[(b, a)] = cr(1.0);
        }
    }
    z
}

/// Physical-frame recovery unitary for syndrome `k`.
pub fn recovery_unitary(space: &CodeSpace, k: usize) -> Result<ComplexMatrix> {
    let n = space.words_per_label();
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "syndrome index {k} out of range (code stores {n} words per label)"
        )));
    }
    Ok(&space.a * recovery_logical(space, k) * space.a.adjoint())
}

/// One measurement-averaged correction cycle, precompiled to a qudit channel.
#[derive(Debug, Clone)]
pub struct QecCycle {
    /// Composite syndrome-extraction unitary on qudit (x) ancilla.
    pub s_gate: ComplexMatrix,
    /// Physical recovery unitaries indexed by syndrome.
    pub recoveries: Vec<ComplexMatrix>,
    /// The full cycle as a `d^2 x d^2` superoperator on the qudit.
    pub superop: ComplexMatrix,
    /// Ancilla dimension (`d / 2`).
    pub ancilla_dim: usize,
    /// Dissipation interval folded into the cycle (seconds).
    pub t_cycle_s: f64,
    /// Complete-positivity and trace diagnostics of `superop`.
    pub check: CptpCheck,
}

impl QecCycle {
    /// Apply the cycle to a density matrix.
    pub fn apply(&self, rho: &ComplexMatrix) -> ComplexMatrix {
        crate::dynamics::apply_superoperator(&self.superop, rho)
    }
}

/// Build the measurement-averaged correction cycle.
///
/// The cycle is `rho -> sum_k Z_k P_k [exp(L t_cycle) rho] P_k Z_k^+` where
/// `P_k` projects onto the syndrome-`k` error space and `Z_k` is the
/// matching recovery; the dissipative prefix models decoherence accumulated
/// while the cycle hardware runs. The error projectors resolve the identity
/// exactly, so the channel is trace preserving by construction; complete
/// positivity is still verified numerically and a violation beyond 1e-9 is
/// reported as a failure.
pub fn qec_cycle(
    space: &CodeSpace,
    dissipator: Option<&Liouvillian>,
    t_cycle_s: f64,
) -> Result<QecCycle> {
    if !(t_cycle_s.is_finite() && t_cycle_s >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cycle interval must be non-negative and finite, got {t_cycle_s:e}"
        )));
    }
    let d = space.dim();
    let n = space.words_per_label();
    let s_gate = build_s_gate(space)?;
    let mut correction = ComplexMatrix::zeros(d * d, d * d);
    let mut recoveries = Vec::with_capacity(n);
    for k in 0..n {
        let z = recovery_unitary(space, k)?;
        let kraus = &z * space.error_projector(k);
        correction += tensor(&kraus.map(|x| x.conj()), &kraus);
        recoveries.push(z);
    }
    let superop = match dissipator {
        Some(l) if t_cycle_s > 0.0 => {
            if l.dim != d {
                return Err(Error::ModelConsistency(format!(
                    "dissipator dimension {} does not match code dimension {d}",
                    l.dim
                )));
            }
            correction * l.propagator(t_cycle_s)?
        }
        _ => correction,
    };
    let check = cptp_check(&superop)?;
    if check.min_choi_eigenvalue < -1e-9 || check.trace_preservation_error > 1e-9 {
        return Err(Error::NumericalFailure(format!(
            "correction cycle is not a valid channel (min Choi eigenvalue {:.3e}, trace error {:.3e})",
            check.min_choi_eigenvalue, check.trace_preservation_error
        )));
    }
    Ok(QecCycle {
        s_gate,
        recoveries,
        superop,
        ancilla_dim: n,
        t_cycle_s,
        check,
    })
}

// ---------------------------------------------------------------------------
// Run results and crossing extraction
// ---------------------------------------------------------------------------

/// Output of one protocol run.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Sampled populations, trace, and purity; times count sensing time only.
    pub trace: RunTrace,
    /// First population crossing `P_0 = P_1` (sensing time, seconds).
    pub t_cross_s: Option<f64>,
    /// Number of sensing windows executed.
    pub windows: u64,
    /// Number of correction cycles executed.
    pub qec_cycles: u64,
}

impl RunResult {
    /// Population outside the tracked subspaces at sample `i`.
    pub fn leakage(&self, i: usize) -> f64 {
        self.trace.trace[i] - self.trace.populations[0][i] - self.trace.populations[1][i]
    }

    /// Serialize the sampled trace as CSV (`t_s,p0,p1,leakage,trace`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,p0,p1,leakage,trace\n");
        for i in 0..self.trace.times.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_field(self.trace.times[i]),
                fmt_field(self.trace.populations[0][i]),
                fmt_field(self.trace.populations[1][i]),
                fmt_field(self.leakage(i)),
                fmt_field(self.trace.trace[i]),
            ));
        }
        out
    }
}

/// Format a float with 17 significant digits so the value round-trips
/// exactly through text.
pub fn fmt_field(x: f64) -> String {
    format!("{x:.16e}")
}

/// First time at which `P_0(t) - P_1(t)` changes sign, linearly
/// interpolated between the bracketing samples. Returns `None` when the
/// difference never changes sign.
pub fn crossing_time(trace: &RunTrace) -> Option<f64> {
    if trace.populations.len() < 2 {
        return None;
    }
    let p0 = &trace.populations[0];
    let p1 = &trace.populations[1];
    for i in 1..trace.times.len() {
        let a = p0[i - 1] - p1[i - 1];
        let b = p0[i] - p1[i];
        if (a > 0.0 && b <= 0.0) || (a < 0.0 && b >= 0.0) {
            let f = a / (a - b);
            return Some(trace.times[i - 1] + f * (trace.times[i] - trace.times[i - 1]));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Two-level baseline
// ---------------------------------------------------------------------------

/// Run the two-level baseline: rotating-frame Rabi evolution under
/// dephasing for `t_max`, followed by a dephasing-only readout hold of
/// `t_m`. The initial state is the bare ground state.
pub fn run_qubit(config: &ProtocolConfig) -> Result<RunResult> {
    config.validate()?;
    if config.spin.is_some() {
        return Err(Error::InvalidArgument(
            "configuration selects a qudit; use the logical runner".into(),
        ));
    }
    let mut params = config
        .qubit_params
        .unwrap_or_else(|| QubitParams::baseline(config.bx_t));
    params.bx_t = config.bx_t;
    params.b1z_t = config.b1z_t;
    let model = build_qubit_model(params)?;
    let frame = rotating_frame_qubit(&model)?;
    let dephasing = if config.t2_s.is_finite() {
        Some(qubit_dephasing_dissipator(config.t2_s)?)
    } else {
        None
    };
    let mut sensing = Liouvillian::coherent(&frame.h_rf)?;
    if let Some(part) = &dephasing {
        sensing.add_part(part)?;
    }
    let mut segments = vec![Segment {
        generator: sensing,
        duration: config.t_max_s,
    }];
    if config.t_m_s > 0.0 {
        let mut readout = Liouvillian::zero(2);
        if let Some(part) = &dephasing {
            readout.add_part(part)?;
        }
        segments.push(Segment {
            generator: readout,
            duration: config.t_m_s,
        });
    }
    let mut rho0 = ComplexMatrix::zeros(2, 2);
    rho0[(0, 0)] = cr(1.0);
    let projectors = vec![basis_projector(2, 0), basis_projector(2, 1)];
    let trace = propagate_piecewise(&rho0, &segments, config.sample_dt_s, &projectors, false)?;
    let t_cross_s = crossing_time(&trace);
    Ok(RunResult {
        trace,
        t_cross_s,
        windows: 0,
        qec_cycles: 0,
    })
}

fn basis_projector(d: usize, k: usize) -> ComplexMatrix {
    let mut p = ComplexMatrix::zeros(d, d);
    p[(k, k)] = cr(1.0);
    p
}

// ---------------------------------------------------------------------------
// Logical assets
// ---------------------------------------------------------------------------

/// Everything a logical run needs that does not depend on the signal field:
/// the qudit model, the optimized code, the synthesized drive schedule, the
/// noise generator, and the precompiled correction cycle.
#[derive(Debug, Clone)]
pub struct LogicalAssets {
    /// Static qudit model in its eigenframe.
    pub model: QuditModel,
    /// Optimized code and error words.
    pub codespace: CodeSpace,
    /// Synthesized multi-tone drive schedule.
    pub schedule: PulseSchedule,
    /// Combined dephasing/relaxation generator, if any noise is configured.
    pub dissipator: Option<Liouvillian>,
    /// Precompiled measurement-averaged correction cycle.
    pub qec: QecCycle,
}

/// Build the field-independent assets for a logical configuration.
///
/// The code is optimized against the dephasing channel accumulated over one
/// sensing window (`t_free = delta_s`), so sweeping the window length
/// re-optimizes the code. A noiseless configuration falls back to the
/// reference dephasing time for code design only.
pub fn prepare_logical_assets(config: &ProtocolConfig) -> Result<LogicalAssets> {
    config.validate()?;
    let s = config.spin.ok_or_else(|| {
        Error::InvalidArgument(
            "configuration selects the two-level baseline; no logical assets to build".into(),
        )
    })?;
    let params = match &config.qudit_params {
        Some(p) => *p,
        None => QuditParams::reference(s)?,
    };
    let model = build_qudit_model(params)?;
    let design_t2 = if config.t2_s.is_finite() {
        config.t2_s
    } else {
        CODE_DESIGN_T2_S
    };
    let design_noise = NoiseModel::pure_dephasing(design_t2)?;
    let kraus = tomography_kraus(&model, &design_noise, config.delta_s)?;
    let supports = default_supports(&model)?;
    let n = model.dim() / 2;
    let codewords = optimize_codewords(&kraus, &supports, n, config.restarts, config.seed)?;
    let codespace = build_error_words(&codewords, &kraus)?;
    let sets = enumerate_transitions(&codespace, &model)?;
    let groups = trotter_grouping(&sets.sensing, n)?;
    let schedule = tone_synthesis(&groups, &model, &codespace, config.b_ref_t)?;
    let dissipator = assemble_qudit_dissipator(&model, config)?;
    let qec = qec_cycle(&codespace, dissipator.as_ref(), config.t_cycle_s)?;
    Ok(LogicalAssets {
        model,
        codespace,
        schedule,
        dissipator,
        qec,
    })
}

/// Combine the configured dephasing and relaxation channels into one
/// generator; `None` when the configuration is noiseless.
fn assemble_qudit_dissipator(
    model: &QuditModel,
    config: &ProtocolConfig,
) -> Result<Option<Liouvillian>> {
    let mut total: Option<Liouvillian> = None;
    if config.t2_s.is_finite() {
        let noise = NoiseModel::pure_dephasing(config.t2_s)?;
        total = Some(dephasing_dissipator(model, &noise)?);
    }
    if let Some(t1) = config.t1_s {
        // the relaxation builder only reads T_1; the dephasing slot just has
        // to be finite for construction
        let base = if config.t2_s.is_finite() {
            config.t2_s
        } else {
            1.0
        };
        let noise = NoiseModel::pure_dephasing(base)?.with_t1(t1)?;
        let part = relaxation_dissipator(model, &noise)?;
        total = Some(match total {
            Some(mut acc) => {
                acc.add_part(&part)?;
                acc
            }
            None => part,
        });
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Logical run engine
// ---------------------------------------------------------------------------

/// Precomputed superoperators for one sensing window: cumulative
/// propagators at the sample offsets plus the full window-and-cycle step.
struct WindowKernel {
    /// Cumulative window propagator at offsets `j * sub_dt`, `j = 1..=n_off`.
    partials: Vec<ComplexMatrix>,
    /// Full window followed by the correction cycle (when enabled).
    step: ComplexMatrix,
    sub_dt: f64,
}

/// Binary-exponentiation matrix power (`k >= 1`).
fn matrix_power(m: &ComplexMatrix, mut k: usize) -> ComplexMatrix {
    let mut base = m.clone();
    let mut acc = identity(m.nrows());
    while k > 0 {
        if k & 1 == 1 {
            acc = &base * &acc;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    acc
}

fn cached_propagator(
    generators: &[Liouvillian],
    cache: &mut HashMap<(usize, u64), ComplexMatrix>,
    group: usize,
    dt: f64,
) -> Result<ComplexMatrix> {
    let key = (group, dt.to_bits());
    if let Some(m) = cache.get(&key) {
        return Ok(m.clone());
    }
    let m = generators[group].propagator(dt)?;
    cache.insert(key, m.clone());
    Ok(m)
}

/// Build the window kernel for a given signal field and sample count.
///
/// The window interleaves the drive groups round-robin `trotter_steps`
/// times; each slice generator is the group Hamiltonian plus the full
/// dissipator, so noise acts continuously. When the sample offsets align
/// with whole group cycles the window is assembled by matrix powers of the
/// single-cycle product; otherwise a boundary walker splices sample points
/// into the slice sequence.
fn build_window_kernel(
    assets: &LogicalAssets,
    config: &ProtocolConfig,
    bx_t: f64,
    n_off: usize,
) -> Result<WindowKernel> {
    let hams = assets.schedule.effective_hamiltonians(&assets.model, bx_t)?;
    let n_groups = hams.len();
    if n_groups == 0 {
        return Err(Error::Compile("pulse schedule has no tone groups".into()));
    }
    let mut generators = Vec::with_capacity(n_groups);
    for h in &hams {
        let mut g = Liouvillian::coherent(h)?;
        if let Some(part) = &assets.dissipator {
            g.add_part(part)?;
        }
        generators.push(g);
    }
    let delta = config.delta_s;
    let reps = config.trotter_steps;
    let seg_total = reps * n_groups;
    let seg_dt = delta / seg_total as f64;
    let sub_dt = delta / n_off as f64;
    let dsq = generators[0].dim * generators[0].dim;
    let mut cache: HashMap<(usize, u64), ComplexMatrix> = HashMap::new();

    let partials = if reps.is_multiple_of(n_off) {
        // sample offsets land on whole group cycles
        let mut cycle = identity(dsq);
        for g in 0..n_groups {
            cycle = cached_propagator(&generators, &mut cache, g, seg_dt)? * cycle;
        }
        let per_sample = matrix_power(&cycle, reps / n_off);
        let mut partials = Vec::with_capacity(n_off);
        let mut acc = per_sample.clone();
        partials.push(acc.clone());
        for _ in 1..n_off {
            acc = &per_sample * acc;
            partials.push(acc.clone());
        }
        partials
    } else {
        let tol = TIME_SNAP * delta;
        let mut partials = Vec::with_capacity(n_off);
        let mut acc = identity(dsq);
        let mut t = 0.0_f64;
        let mut seg = 0usize;
        for j in 1..=n_off {
            let t_target = if j == n_off {
                delta
            } else {
                j as f64 * sub_dt
            };
            while seg < seg_total && (seg + 1) as f64 * seg_dt < t_target - tol {
                let t_end = (seg + 1) as f64 * seg_dt;
                let dt = t_end - t;
                if dt > tol {
                    acc = cached_propagator(&generators, &mut cache, seg % n_groups, dt)? * acc;
                }
                t = t_end;
                seg += 1;
            }
            let dt = t_target - t;
            if dt > tol {
                acc = cached_propagator(&generators, &mut cache, seg % n_groups, dt)? * acc;
            }
            t = t_target;
            if seg < seg_total && ((seg + 1) as f64 * seg_dt - t).abs() <= tol {
                seg += 1;
            }
            partials.push(acc.clone());
        }
        partials
    };

    let step = if config.qec_enabled {
        &assets.qec.superop * &partials[n_off - 1]
    } else {
        partials[n_off - 1].clone()
    };
    Ok(WindowKernel {
        partials,
        step,
        sub_dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunMode {
    /// Record the full trace and append the readout hold.
    Full,
    /// Stop at the first population crossing; boundary samples only.
    UntilCrossing,
}

/// Incremental recorder for the logical run.
struct LogicalRecorder {
    d: usize,
    supports: [Vec<usize>; 2],
    times: Vec<f64>,
    p0: Vec<f64>,
    p1: Vec<f64>,
    trace: Vec<f64>,
    purity: Vec<f64>,
}

impl LogicalRecorder {
    fn new(d: usize, supports: [Vec<usize>; 2], capacity: usize) -> Self {
        LogicalRecorder {
            d,
            supports,
            times: Vec::with_capacity(capacity),
            p0: Vec::with_capacity(capacity),
            p1: Vec::with_capacity(capacity),
            trace: Vec::with_capacity(capacity),
            purity: Vec::with_capacity(capacity),
        }
    }

    /// Record a vectorized state; returns `P_0 - P_1` at this sample.
    fn push(&mut self, t: f64, v: &DVector<Complex64>) -> f64 {
        let d = self.d;
        let pop = |supp: &[usize]| -> f64 { supp.iter().map(|&m| v[m * d + m].re).sum() };
        let a = pop(&self.supports[0]);
        let b = pop(&self.supports[1]);
        let tr: f64 = (0..d).map(|m| v[m * d + m].re).sum();
        let pur: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        self.times.push(t);
        self.p0.push(a);
        self.p1.push(b);
        self.trace.push(tr);
        self.purity.push(pur);
        a - b
    }

    fn into_trace(self, final_rho: ComplexMatrix) -> RunTrace {
        RunTrace {
            times: self.times,
            populations: vec![self.p0, self.p1],
            trace: self.trace,
            purity: self.purity,
            snapshots: None,
            final_rho,
        }
    }
}

fn run_logical_engine(
    assets: &LogicalAssets,
    config: &ProtocolConfig,
    mode: RunMode,
) -> Result<RunResult> {
    config.validate()?;
    if config.spin.is_none() {
        return Err(Error::InvalidArgument(
            "configuration selects the two-level baseline; use the qubit runner".into(),
        ));
    }
    let d = assets.model.dim();
    let delta = config.delta_s;
    let n_off = match mode {
        RunMode::Full => ((delta / config.sample_dt_s) - TIME_SNAP).ceil().max(1.0) as usize,
        RunMode::UntilCrossing => 1,
    };
    let kernel = build_window_kernel(assets, config, config.bx_t, n_off)?;
    let step_check = cptp_check(&kernel.step)?;
    if step_check.min_choi_eigenvalue < -1e-9 || step_check.trace_preservation_error > 1e-9 {
        return Err(Error::NumericalFailure(format!(
            "window step is not a valid channel (min Choi eigenvalue {:.3e}, trace error {:.3e})",
            step_check.min_choi_eigenvalue, step_check.trace_preservation_error
        )));
    }
    let n_windows = ((config.t_max_s / delta) - TIME_SNAP).ceil().max(1.0) as u64;

    // Prepare the operational logical zero: the frame's code column, which is
    // the exact fixed point of both the covariant drive and the correction
    // cycle (the optimizer's raw codeword differs from it at first order in
    // the free-evolution channel and would register as a spurious syndrome).
    let rho0 = pure_density(assets.codespace.errorword(0, 0));
    let mut v = vectorize(&rho0);
    let capacity = (n_windows as usize).saturating_mul(n_off).saturating_add(2);
    let mut rec = LogicalRecorder::new(d, assets.codespace.supports.clone(), capacity.min(1 << 24));
    let mut prev = (0.0_f64, rec.push(0.0, &v));
    let mut t_cross: Option<f64> = None;
    let mut windows_done = 0u64;
    let mut qec_cycles = 0u64;

    'run: for w in 0..n_windows {
        let t0 = w as f64 * delta;
        for j in 1..=n_off {
            let sample = &kernel.partials[j - 1] * &v;
            let tj = if j == n_off {
                t0 + delta
            } else {
                t0 + j as f64 * kernel.sub_dt
            };
            let diff = rec.push(tj, &sample);
            if t_cross.is_none() {
                let (tp, dp) = prev;
                if (dp > 0.0 && diff <= 0.0) || (dp < 0.0 && diff >= 0.0) {
                    let f = dp / (dp - diff);
                    t_cross = Some(tp + f * (tj - tp));
                    if mode == RunMode::UntilCrossing {
                        windows_done = w + 1;
                        break 'run;
                    }
                }
            }
            prev = (tj, diff);
        }
        v = &kernel.step * v;
        windows_done = w + 1;
        if config.qec_enabled {
            qec_cycles += 1;
        }
        if windows_done.is_multiple_of(4096) {
            let tr: f64 = (0..d).map(|m| v[m * d + m].re).sum();
            if (tr - 1.0).abs() > 1e-6 {
                return Err(Error::NumericalFailure(format!(
                    "state trace drifted to {tr:.9} after {windows_done} windows"
                )));
            }
        }
    }

    if mode == RunMode::Full && config.t_m_s > 0.0 {
        let hold = match &assets.dissipator {
            Some(l) => l.propagator(config.t_m_s)?,
            None => identity(d * d),
        };
        v = hold * v;
        let t_end = windows_done as f64 * delta + config.t_m_s;
        rec.push(t_end, &v);
    }

    let final_rho = unvectorize(&v, d);
    Ok(RunResult {
        trace: rec.into_trace(final_rho),
        t_cross_s: t_cross,
        windows: windows_done,
        qec_cycles,
    })
}

fn pure_density(v: &DVector<Complex64>) -> ComplexMatrix {
    let d = v.len();
    ComplexMatrix::from_fn(d, d, |i, j| v[i] * v[j].conj())
}

/// Run the logical protocol: sensing windows alternating with correction
/// cycles, followed by a readout hold. Sample times count sensing time
/// only, and the boundary sample of each window is recorded before its
/// correction cycle fires.
pub fn run_logical(assets: &LogicalAssets, config: &ProtocolConfig) -> Result<RunResult> {
    run_logical_engine(assets, config, RunMode::Full)
}

/// Convenience dispatcher: build assets if needed and run whichever
/// protocol the configuration selects.
pub fn run_protocol(config: &ProtocolConfig) -> Result<RunResult> {
    match config.spin {
        None => run_qubit(config),
        Some(_) => {
            let assets = prepare_logical_assets(config)?;
            run_logical(&assets, config)
        }
    }
}

/// Exponential damping rate (1/s) of the logical Bloch vector at the
/// configured signal field, extracted by a least-squares fit of
/// `ln |r(t)|` over the run. Used as a field-independent figure of merit
/// for the correction-interval sweep.
pub fn logical_damping_rate(assets: &LogicalAssets, config: &ProtocolConfig) -> Result<f64> {
    config.validate()?;
    let d = assets.model.dim();
    let delta = config.delta_s;
    let kernel = build_window_kernel(assets, config, config.bx_t, 1)?;
    let n_windows = ((config.t_max_s / delta) - TIME_SNAP).ceil().max(1.0) as u64;
    let stride = (n_windows / 256).max(1);
    let mut v = vectorize(&pure_density(assets.codespace.errorword(0, 0)));
    let mut points: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for w in 0..n_windows {
        v = &kernel.step * v;
        if (w + 1) % stride == 0 {
            let rho = unvectorize(&v, d);
            let logical = assets.codespace.logical_density(&rho);
            let (r, tr) = bloch_norm(&logical);
            if tr <= 0.0 {
                break;
            }
            let rn = r / tr;
            if rn < 1e-3 {
                break;
            }
            points.push(((w + 1) as f64 * delta, rn.ln()));
            if rn < 0.05 {
                break;
            }
        }
    }
    if points.len() < 3 {
        return Err(Error::Calibration(
            "damping-rate fit needs at least three Bloch-vector samples above the noise floor; \
             extend t_max or shorten the window"
                .into(),
        ));
    }
    let slope = least_squares_slope(&points);
    Ok((-slope).max(0.0))
}

/// Bloch-vector length and trace of a 2x2 logical density matrix.
fn bloch_norm(l: &ComplexMatrix) -> (f64, f64) {
    let x = 2.0 * l[(0, 1)].re;
    let y = -2.0 * l[(0, 1)].im;
    let z = (l[(0, 0)] - l[(1, 1)]).re;
    let tr = (l[(0, 0)] + l[(1, 1)]).re;
    ((x * x + y * y + z * z).sqrt(), tr)
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let tm = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, y) in points {
        num += (t - tm) * (y - ym);
        den += (t - tm) * (t - tm);
    }
    num / den
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// One calibration point.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationSample {
    /// Signal field (tesla).
    pub bx_t: f64,
    /// First population crossing (sensing time, seconds).
    pub t_cross_s: f64,
    /// Derivative of the crossing time with respect to the field (s/T).
    pub dtcross_dbx: f64,
    /// Correction cycles executed before the crossing.
    pub n_cycles: u64,
}

/// Crossing-time calibration curve over a field grid.
#[derive(Debug, Clone)]
pub struct CalibrationCurve {
    /// Calibration points, in grid order.
    pub samples: Vec<CalibrationSample>,
    /// Per-cycle overhead used in the total acquisition time (seconds).
    pub t_cycle_s: f64,
    /// Readout overhead used in the total acquisition time (seconds).
    pub t_m_s: f64,
}

impl CalibrationCurve {
    /// Total acquisition time for sample `i`: sensing time plus cycle and
    /// readout overhead.
    pub fn total_time(&self, i: usize) -> f64 {
        let s = &self.samples[i];
        s.t_cross_s + s.n_cycles as f64 * self.t_cycle_s + self.t_m_s
    }

    /// Relative field sensitivity at sample `i` (arbitrary units):
    /// `sqrt(total time) / |d t_cross / d B_x|`.
    pub fn eta_rel(&self, i: usize) -> f64 {
        self.total_time(i).sqrt() / self.samples[i].dtcross_dbx.abs()
    }

    /// Serialize as CSV (`bx_T,t_cross_s,dtdbx,eta_rel`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bx_T,t_cross_s,dtdbx,eta_rel\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_field(s.bx_t),
                fmt_field(s.t_cross_s),
                fmt_field(s.dtcross_dbx),
                fmt_field(self.eta_rel(i)),
            ));
        }
        out
    }
}

fn validate_field_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "calibration grid needs at least 8 points, got {}",
            grid.len()
        )));
    }
    for (i, &b) in grid.iter().enumerate() {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "calibration grid point {i} must be positive and finite, got {b:e}"
            )));
        }
        if i > 0 && b <= grid[i - 1] {
            return Err(Error::InvalidArgument(format!(
                "calibration grid must be strictly increasing, got {:.6e} then {b:.6e}",
                grid[i - 1]
            )));
        }
    }
    Ok(())
}

fn check_strictly_decreasing(grid: &[f64], crossings: &[f64]) -> Result<()> {
    for i in 1..crossings.len() {
        if crossings[i] >= crossings[i - 1] {
            return Err(Error::Calibration(format!(
                "crossing time is not strictly decreasing in the field: t({:.6e} T) = {:.9e} s \
                 but t({:.6e} T) = {:.9e} s; the protocol is outside its monotone operating range",
                grid[i - 1],
                crossings[i - 1],
                grid[i],
                crossings[i]
            )));
        }
    }
    Ok(())
}

/// Second-order finite-difference derivative on a logarithmic field grid
/// (centered in the interior, one-sided three-point stencils at the
/// endpoints), returned as `d f / d B` (not `d f / d ln B`).
fn log_grid_derivative(grid: &[f64], f: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let x: Vec<f64> = grid.iter().map(|b| b.ln()).collect();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let dfdx = if i == 0 {
            let h1 = x[1] - x[0];
            let h2 = x[2] - x[1];
            (-(2.0 * h1 + h2) / (h1 * (h1 + h2))) * f[0] + ((h1 + h2) / (h1 * h2)) * f[1]
                - (h1 / (h2 * (h1 + h2))) * f[2]
        } else if i == n - 1 {
            let h1 = x[n - 2] - x[n - 3];
            let h2 = x[n - 1] - x[n - 2];
            (h2 / (h1 * (h1 + h2))) * f[n - 3] - ((h1 + h2) / (h1 * h2)) * f[n - 2]
                + ((h1 + 2.0 * h2) / (h2 * (h1 + h2))) * f[n - 1]
        } else {
            let h1 = x[i] - x[i - 1];
            let h2 = x[i + 1] - x[i];
            (-h2 / (h1 * (h1 + h2))) * f[i - 1]
                + ((h2 - h1) / (h1 * h2)) * f[i]
                + (h1 / (h2 * (h1 + h2))) * f[i + 1]
        };
        out[i] = dfdx / grid[i];
    }
    out
}

/// Sweep the signal field over `grid` and extract the crossing time at each
/// point. Logical assets are built once (they do not depend on the field);
/// each point then reuses the precompiled correction cycle. Fails if any
/// point never crosses before `t_max` or if the curve is not strictly
/// decreasing.
pub fn calibrate(config: &ProtocolConfig, grid: &[f64]) -> Result<CalibrationCurve> {
    config.validate()?;
    validate_field_grid(grid)?;
    let no_crossing = |bx: f64, t_max: f64| {
        Error::Calibration(format!(
            "populations never cross before t_max = {t_max:.3e} s at B_x = {bx:.6e} T; \
             extend t_max or raise the field grid"
        ))
    };
    let results: Vec<(f64, u64)> = match config.spin {
        None => grid
            .par_iter()
            .map(|&bx| {
                let mut point = config.clone();
                point.bx_t = bx;
                let run = run_qubit(&point)?;
                let t = run
                    .t_cross_s
                    .ok_or_else(|| no_crossing(bx, point.t_max_s))?;
                Ok((t, 0u64))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => {
            let assets = prepare_logical_assets(config)?;
            grid.par_iter()
                .map(|&bx| {
                    let mut point = config.clone();
                    point.bx_t = bx;
                    let run = run_logical_engine(&assets, &point, RunMode::UntilCrossing)?;
                    let t = run
                        .t_cross_s
                        .ok_or_else(|| no_crossing(bx, point.t_max_s))?;
                    let cycles = if config.qec_enabled {
                        (t / config.delta_s).floor() as u64
                    } else {
                        0
                    };
                    Ok((t, cycles))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let crossings: Vec<f64> = results.iter().map(|r| r.0).collect();
    check_strictly_decreasing(grid, &crossings)?;
    let derivs = log_grid_derivative(grid, &crossings);
    let samples = grid
        .iter()
        .zip(results.iter())
        .zip(derivs.iter())
        .map(|((&bx_t, &(t_cross_s, n_cycles)), &dtcross_dbx)| CalibrationSample {
            bx_t,
            t_cross_s,
            dtcross_dbx,
            n_cycles,
        })
        .collect();
    Ok(CalibrationCurve {
        samples,
        t_cycle_s: config.t_cycle_s,
        t_m_s: config.t_m_s,
    })
}

// ---------------------------------------------------------------------------
// Sensitivity
// ---------------------------------------------------------------------------

/// One sensitivity point.
#[derive(Debug, Clone, Copy)]
pub struct SensitivityPoint {
    /// Signal field (tesla).
    pub bx_t: f64,
    /// Relative sensitivity (arbitrary units).
    pub eta_rel: f64,
}

/// Sensitivity versus field, with the optimal operating point.
#[derive(Debug, Clone)]
pub struct SensitivityCurve {
    /// Per-field sensitivities, in grid order.
    pub points: Vec<SensitivityPoint>,
    /// Field of best sensitivity (tesla); parabolically refined in
    /// `ln B` when the minimum is interior.
    pub bx_min_t: f64,
    /// Sensitivity at the optimum (arbitrary units).
    pub eta_min: f64,
    /// True when the optimum sits on the grid edge, meaning the true
    /// minimum lies outside the sampled range.
    pub boundary: bool,
}

impl SensitivityCurve {
    /// Serialize as CSV (`bx_T,eta_rel`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bx_T,eta_rel\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{}\n",
                fmt_field(p.bx_t),
                fmt_field(p.eta_rel)
            ));
        }
        out
    }
}

/// Convert a calibration curve into a sensitivity curve and locate the
/// optimal field. The discrete minimum is refined by a parabola through
/// its neighbors in `ln B` when it is interior; an edge minimum is
/// reported as-is with the boundary flag set.
pub fn sensitivity_curve(cal: &CalibrationCurve) -> Result<SensitivityCurve> {
    if cal.samples.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "sensitivity extraction needs at least 3 calibration points, got {}",
            cal.samples.len()
        )));
    }
    let mut points = Vec::with_capacity(cal.samples.len());
    for (i, s) in cal.samples.iter().enumerate() {
        let eta = cal.eta_rel(i);
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::Calibration(format!(
                "sensitivity is undefined at B_x = {:.6e} T (flat calibration curve)",
                s.bx_t
            )));
        }
        points.push(SensitivityPoint {
            bx_t: s.bx_t,
            eta_rel: eta,
        });
    }
    let mut idx = 0usize;
    for (i, p) in points.iter().enumerate() {
        if p.eta_rel < points[idx].eta_rel {
            idx = i;
        }
    }
    let boundary = idx == 0 || idx == points.len() - 1;
    let (bx_min_t, eta_min) = if boundary {
        (points[idx].bx_t, points[idx].eta_rel)
    } else {
        let x = [
            points[idx - 1].bx_t.ln(),
            points[idx].bx_t.ln(),
            points[idx + 1].bx_t.ln(),
        ];
        let y = [
            points[idx - 1].eta_rel,
            points[idx].eta_rel,
            points[idx + 1].eta_rel,
        ];
        match parabolic_vertex(&x, &y) {
            Some((xv, yv)) if xv >= x[0] && xv <= x[2] => (xv.exp(), yv.min(y[1])),
            _ => (points[idx].bx_t, points[idx].eta_rel),
        }
    };
    Ok(SensitivityCurve {
        points,
        bx_min_t,
        eta_min,
        boundary,
    })
}

/// Vertex of the parabola through three points; `None` when the points are
/// not convex.
fn parabolic_vertex(x: &[f64; 3], y: &[f64; 3]) -> Option<(f64, f64)> {
    let d0 = y[0] / ((x[0] - x[1]) * (x[0] - x[2]));
    let d1 = y[1] / ((x[1] - x[0]) * (x[1] - x[2]));
    let d2 = y[2] / ((x[2] - x[0]) * (x[2] - x[1]));
    let a = d0 + d1 + d2;
    if !(a.is_finite() && a > 0.0) {
        return None;
    }
    let b = -(d0 * (x[1] + x[2]) + d1 * (x[0] + x[2]) + d2 * (x[0] + x[1]));
    let c = d0 * x[1] * x[2] + d1 * x[0] * x[2] + d2 * x[0] * x[1];
    let xv = -b / (2.0 * a);
    let yv = (a * xv + b) * xv + c;
    Some((xv, yv))
}

// ---------------------------------------------------------------------------
// Correction-interval sweep
// ---------------------------------------------------------------------------

/// Figure of merit evaluated at each correction interval.
#[derive(Debug, Clone)]
pub enum DeltaMetric {
    /// Optimal field from a full calibration over the given grid (tesla).
    BxMin {
        /// Field grid passed to [`calibrate`] at every interval.
        grid: Vec<f64>,
    },
    /// Logical Bloch-vector damping rate at the configured field (1/s).
    DampingRate,
}

/// One point of the correction-interval sweep.
#[derive(Debug, Clone, Copy)]
pub struct DeltaSweepPoint {
    /// Sensing-window length (seconds).
    pub delta_s: f64,
    /// Figure of merit at this interval (smaller is better).
    pub metric: f64,
}

/// Result of sweeping the sensing-window length.
#[derive(Debug, Clone)]
pub struct DeltaSweep {
    /// Sweep points, in interval order.
    pub points: Vec<DeltaSweepPoint>,
    /// Best interval (seconds); parabolically refined in `ln delta` when
    /// the minimum is interior.
    pub delta_star_s: f64,
    /// True when the optimum is interior to the swept range.
    pub interior: bool,
}

impl DeltaSweep {
    /// Serialize as CSV (`delta_s,metric`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta_s,metric\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{}\n",
                fmt_field(p.delta_s),
                fmt_field(p.metric)
            ));
        }
        out
    }
}

/// Sweep the sensing-window length and locate the optimum of the given
/// metric. Every interval re-optimizes the code (the error words are
/// matched to the dephasing accumulated over one window) and rescales the
/// sampling interval to keep it within `delta / 4`.
pub fn delta_sweep(
    config: &ProtocolConfig,
    deltas: &[f64],
    metric: &DeltaMetric,
) -> Result<DeltaSweep> {
    config.validate()?;
    if deltas.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "interval sweep needs at least 3 points, got {}",
            deltas.len()
        )));
    }
    for (i, &delta) in deltas.iter().enumerate() {
        if !(delta.is_finite() && delta > 0.0 && delta <= config.t_max_s) {
            return Err(Error::InvalidArgument(format!(
                "sweep interval {i} must satisfy 0 < delta <= t_max, got {delta:e}"
            )));
        }
        if i > 0 && delta <= deltas[i - 1] {
            return Err(Error::InvalidArgument(
                "sweep intervals must be strictly increasing".into(),
            ));
        }
    }
    let values: Vec<f64> = deltas
        .par_iter()
        .map(|&delta| -> Result<f64> {
            let mut point = config.clone();
            point.delta_s = delta;
            point.sample_dt_s = config.sample_dt_s.min(delta / 4.0);
            match metric {
                DeltaMetric::DampingRate => {
                    let assets = prepare_logical_assets(&point)?;
                    logical_damping_rate(&assets, &point)
                }
                DeltaMetric::BxMin { grid } => {
                    let cal = calibrate(&point, grid)?;
                    Ok(sensitivity_curve(&cal)?.bx_min_t)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<DeltaSweepPoint> = deltas
        .iter()
        .zip(values.iter())
        .map(|(&delta_s, &metric)| DeltaSweepPoint { delta_s, metric })
        .collect();
    let mut idx = 0usize;
    for (i, p) in points.iter().enumerate() {
        if p.metric < points[idx].metric {
            idx = i;
        }
    }
    let interior = idx > 0 && idx < points.len() - 1;
    let delta_star_s = if interior {
        let x = [
            points[idx - 1].delta_s.ln(),
            points[idx].delta_s.ln(),
            points[idx + 1].delta_s.ln(),
        ];
        let y = [
            points[idx - 1].metric,
            points[idx].metric,
            points[idx + 1].metric,
        ];
        match parabolic_vertex(&x, &y) {
            Some((xv, _)) if xv >= x[0] && xv <= x[2] => xv.exp(),
            _ => points[idx].delta_s,
        }
    } else {
        points[idx].delta_s
    };
    Ok(DeltaSweep {
        points,
        delta_star_s,
        interior,
    })
}
