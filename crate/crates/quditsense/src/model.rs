//! Physical models: unit conversions, the two-level sensing baseline, the
//! zero-field-split qudit, and rotating-frame reductions.
//!
//! Internally every energy/frequency is an angular frequency in rad/s with
//! hbar = 1. Conversions from laboratory units (GHz, cm^-1, meV, tesla)
//! live in [`units`] and are applied at the configuration boundary only.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::spinops::{
    commutator, cr, hermitian_eigensystem, max_abs, spin_matrices, ComplexMatrix, EigenSystem,
    SpinOperatorSet, C_ZERO,
};
use crate::{Error, Result};

/// Unit conversion constants and helpers.
pub mod units {
    use crate::{Error, Result};
    use std::f64::consts::TAU;

    /// Bohr magneton over Planck's constant, GHz per tesla.
    pub const BOHR_MAGNETON_OVER_H_GHZ_PER_T: f64 = 13.99624;
    /// Wavenumber to frequency, GHz per cm^-1.
    pub const CM1_TO_GHZ: f64 = 29.9792458;
    /// Energy to frequency, GHz per meV.
    pub const MEV_TO_GHZ: f64 = 241.799;

    /// Gyromagnetic ratio `g * mu_B / hbar` in rad s^-1 T^-1.
    pub fn gyromagnetic_ratio(g: f64) -> f64 {
        g * TAU * BOHR_MAGNETON_OVER_H_GHZ_PER_T * 1e9
    }

    /// Zeeman splitting `g mu_B B` as an angular frequency (rad/s).
    pub fn zeeman_gap(g: f64, b_tesla: f64) -> f64 {
        gyromagnetic_ratio(g) * b_tesla
    }

    /// A quantity unit convertible to/from angular frequency.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub enum Unit {
        RadPerSec,
        GigaHertz,
        InvCm,
        MilliEv,
        /// Magnetic field in tesla, interpreted as its Zeeman splitting at
        /// the given g-factor.
        TeslaZeeman { g: f64 },
    }

    impl Unit {
        /// Parse a unit name; `g` is only used by the tesla interpretation.
        pub fn from_name(name: &str, g: f64) -> Result<Self> {
            match name.to_ascii_lowercase().as_str() {
                "rad/s" | "radpersec" => Ok(Unit::RadPerSec),
                "ghz" => Ok(Unit::GigaHertz),
                "cm-1" | "1/cm" | "invcm" => Ok(Unit::InvCm),
                "mev" => Ok(Unit::MilliEv),
                "t" | "tesla" => Ok(Unit::TeslaZeeman { g }),
                other => Err(Error::InvalidArgument(format!("unknown unit '{other}'"))),
            }
        }

        /// Conversion factor from this unit to rad/s.
        fn to_rad_per_sec(self) -> f64 {
            match self {
                Unit::RadPerSec => 1.0,
                Unit::GigaHertz => TAU * 1e9,
                Unit::InvCm => TAU * 1e9 * CM1_TO_GHZ,
                Unit::MilliEv => TAU * 1e9 * MEV_TO_GHZ,
                Unit::TeslaZeeman { g } => gyromagnetic_ratio(g),
            }
        }
    }

    /// Convert `value` between units through the rad/s hub. Exact factors,
    /// so round trips are identities to machine precision.
    pub fn convert(value: f64, from: Unit, to: Unit) -> f64 {
        value * from.to_rad_per_sec() / to.to_rad_per_sec()
    }
}

/// Optional transverse drive tone for lab-frame validation runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransverseTone {
    /// Amplitude B_1x (tesla).
    pub b1x_t: f64,
    /// Angular frequency omega_x (rad/s).
    pub omega_x: f64,
    /// Phase phi_x (rad).
    pub phi_x: f64,
}

/// Construction parameters for the two-level baseline sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitParams {
    /// Static gap Delta (rad/s).
    pub delta: f64,
    /// g-factor.
    pub g: f64,
    /// Longitudinal drive amplitude B_1z (tesla).
    pub b1z_t: f64,
    /// Longitudinal drive angular frequency omega_z (rad/s).
    pub omega_z: f64,
    /// Longitudinal drive phase phi_z (rad).
    pub phi_z: f64,
    /// Transverse signal field B_x (tesla).
    pub bx_t: f64,
    /// Optional transverse tone for frame-validation runs.
    pub transverse: Option<TransverseTone>,
}

impl QubitParams {
    /// Standard baseline: gap from a 0.35 T longitudinal field at g = 2,
    /// resonant 10 mT longitudinal drive, no transverse tone.
    pub fn baseline(bx_t: f64) -> Self {
        let delta = units::zeeman_gap(2.0, 0.35);
        QubitParams {
            delta,
            g: 2.0,
            b1z_t: 0.01,
            omega_z: delta,
            phi_z: 0.0,
            bx_t,
            transverse: None,
        }
    }
}

/// The two-level sensing baseline with its lab-frame Hamiltonian.
///
/// Convention: the static gap and the transverse (signal) field couple
/// through the spin-1/2 operators `s_z`, `s_x`, while the longitudinal
/// *drive* couples through `sigma_z = 2 s_z`:
///
/// ```text
/// H(t) = Delta s_z + g mu_B (B_x + B_1x cos(w_x t + p_x)) s_x
///              + g mu_B B_1z cos(w_z t + p_z) sigma_z .
/// ```
///
/// With this normalization the resonant rotating-frame Rabi rate is
/// `Omega_R = g^2 mu_B^2 B_1z B_x / omega_z` (see
/// [`rotating_frame_qubit`]), which lab-frame integration reproduces to
/// first order in the perturbative ratio `alpha = g mu_B B_1z / omega_z`.
#[derive(Debug, Clone)]
pub struct QubitModel {
    pub params: QubitParams,
    ops: SpinOperatorSet,
}

impl QubitModel {
    /// Perturbative ratio `alpha = g mu_B B_1z / omega_z`.
    pub fn alpha(&self) -> f64 {
        units::gyromagnetic_ratio(self.params.g) * self.params.b1z_t / self.params.omega_z
    }

    /// Lab-frame Hamiltonian at time `t` (rad/s, 2x2).
    pub fn hamiltonian(&self, t: f64) -> ComplexMatrix {
        let p = &self.params;
        let gamma = units::gyromagnetic_ratio(p.g);
        let mut bx = p.bx_t;
        if let Some(tt) = p.transverse {
            bx += tt.b1x_t * (tt.omega_x * t + tt.phi_x).cos();
        }
        let drive = gamma * p.b1z_t * (p.omega_z * t + p.phi_z).cos();
        self.ops.sz.map(|z| z * cr(p.delta))
            + self.ops.sx.map(|z| z * cr(gamma * bx))
            + self.ops.sz.map(|z| z * cr(2.0 * drive))
    }
}

/// Validate and build the two-level baseline model.
pub fn build_qubit_model(params: QubitParams) -> Result<QubitModel> {
    let all_finite = [
        params.delta,
        params.g,
        params.b1z_t,
        params.omega_z,
        params.phi_z,
        params.bx_t,
    ]
    .iter()
    .all(|x| x.is_finite());
    if !all_finite {
        return Err(Error::InvalidArgument(
            "qubit model parameters must be finite".into(),
        ));
    }
    if params.delta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "qubit gap must be positive, got {:.3e} rad/s",
            params.delta
        )));
    }
    if params.omega_z <= 0.0 {
        return Err(Error::InvalidArgument(
            "drive frequency must be positive".into(),
        ));
    }
    let model = QubitModel {
        params,
        ops: spin_matrices(0.5).expect("spin 1/2 always valid"),
    };
    if model.alpha() >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "perturbative ratio alpha = {:.3} >= 1; the drive expansion is invalid",
            model.alpha()
        )));
    }
    Ok(model)
}

/// Rotating-frame reduction of the two-level baseline.
#[derive(Debug, Clone)]
pub struct RotatingFrameQubit {
    /// Effective Hamiltonian `(Delta - omega_z) s_z - Omega_R s_x` (rad/s).
    pub h_rf: ComplexMatrix,
    /// Resonant Rabi rate `Omega_R = g^2 mu_B^2 B_1z B_x / omega_z` (rad/s).
    pub omega_r: f64,
    /// Perturbative ratio `alpha` of the underlying model.
    pub alpha: f64,
    /// Set when `alpha` is above the comfortable perturbative range (> 0.05).
    pub perturbative_warning: bool,
}

/// Reduce the lab-frame qubit to its rotating frame.
///
/// Requires `alpha <= 0.1`; flags a warning above 0.05. Ideal populations
/// under the reduced Hamiltonian at resonance are
/// `P_0(t) = cos^2(Omega_R t / 2)`.
pub fn rotating_frame_qubit(model: &QubitModel) -> Result<RotatingFrameQubit> {
    let alpha = model.alpha();
    if alpha > 0.1 {
        return Err(Error::InvalidArgument(format!(
            "alpha = {alpha:.3} > 0.1: rotating-frame reduction untrustworthy"
        )));
    }
    let p = &model.params;
    let gamma = units::gyromagnetic_ratio(p.g);
    let omega_r = gamma * gamma * p.b1z_t * p.bx_t / p.omega_z;
    let detuning = p.delta - p.omega_z;
    let ops = spin_matrices(0.5).expect("spin 1/2 always valid");
    let h_rf = ops.sz.map(|z| z * cr(detuning)) - ops.sx.map(|z| z * cr(omega_r));
    Ok(RotatingFrameQubit {
        h_rf,
        omega_r,
        alpha,
        perturbative_warning: alpha > 0.05,
    })
}

/// Construction parameters for the qudit model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuditParams {
    /// Spin quantum number (half-integer).
    pub s: f64,
    /// Longitudinal field B (tesla).
    pub b_t: f64,
    /// Axial zero-field splitting D (rad/s).
    pub d: f64,
    /// Rhombic zero-field splitting E (rad/s).
    pub e: f64,
    /// g-factor.
    pub g: f64,
}

impl QuditParams {
    /// Default qudit at spin `s`: B = 0.35 T, g = 2, and the reference
    /// zero-field splittings D = -0.81 cm^-1, E = -0.24 cm^-1 rescaled from
    /// S = 3/2 by `3 / (S (2S - 1))`.
    pub fn reference(s: f64) -> Result<Self> {
        let d0 = units::convert(-0.81, units::Unit::InvCm, units::Unit::RadPerSec);
        let e0 = units::convert(-0.24, units::Unit::InvCm, units::Unit::RadPerSec);
        let (d, e) = rescale_parameters(d0, e0, s)?;
        Ok(QuditParams {
            s,
            b_t: 0.35,
            d,
            e,
            g: 2.0,
        })
    }
}

/// Rescale the zero-field-splitting pair `(d, e)` from the S = 3/2 reference
/// to spin `s_target` by the common factor `3 / (S (2S - 1))` (identity at
/// S = 3/2).
pub fn rescale_parameters(d: f64, e: f64, s_target: f64) -> Result<(f64, f64)> {
    let two_s = 2.0 * s_target;
    if !(s_target >= 1.5 && (two_s - two_s.round()).abs() < 1e-9 && (two_s.round() as i64) % 2 == 1)
    {
        return Err(Error::InvalidArgument(format!(
            "rescaling target must be a half-integer spin >= 3/2, got {s_target}"
        )));
    }
    let factor = 3.0 / (s_target * (2.0 * s_target - 1.0));
    Ok((d * factor, e * factor))
}

/// The qudit sensor model: spectrum and eigenbasis-split operators of
///
/// ```text
/// H_0 = g mu_B B S_z + D S_z^2 + E (S_x^2 - S_y^2) .
/// ```
///
/// `S_z` in the eigenbasis splits into a diagonal part (used by the sensing
/// drive) and an off-diagonal part (used for corrections); the rhombic term
/// mixes only `Delta m = +-2` states, so the eigenstates fall into two
/// disjoint parity classes and `S_x` only connects states across classes
/// while `S_z` only connects states within one.
#[derive(Debug, Clone)]
pub struct QuditModel {
    pub params: QuditParams,
    /// Spin operators in the |m> basis.
    pub ops: SpinOperatorSet,
    /// Eigensystem of H_0; index mu = 0.. labels ascending energy.
    pub eig: EigenSystem,
    /// S_x in the eigenbasis.
    pub sx_eig: ComplexMatrix,
    /// S_z in the eigenbasis.
    pub sz_eig: ComplexMatrix,
    /// Diagonal part of `sz_eig`.
    pub sz_diag: ComplexMatrix,
    /// Off-diagonal part of `sz_eig` (`sz_eig - sz_diag`, zero diagonal).
    pub sz_offdiag: ComplexMatrix,
}

impl QuditModel {
    /// Hilbert-space dimension `d = 2S + 1`.
    pub fn dim(&self) -> usize {
        self.eig.dim()
    }

    /// Energy gap `E_mu - E_nu` (rad/s); positive for `mu > nu`.
    pub fn gap(&self, mu: usize, nu: usize) -> f64 {
        self.eig.energies[mu] - self.eig.energies[nu]
    }

    /// Commutator `[S_z^(diag), S_x]` in the eigenbasis; its element
    /// `(mu, nu)` is `(c_mu - c_nu) <mu|S_x|nu>` with `c_mu = <mu|S_z|mu>`
    /// and controls the sensing rate of the `(mu, nu)` transition.
    pub fn commutator_szd_sx(&self) -> ComplexMatrix {
        commutator(&self.sz_diag, &self.sx_eig)
    }

    /// Index pairs `(mu, nu)`, `mu > nu`, usable for sensing drives
    /// (`|[S_z^(diag), S_x]_{mu nu}| > 1e-8`).
    pub fn sensing_pairs(&self) -> Vec<(usize, usize)> {
        let m = self.commutator_szd_sx();
        pairs_above_threshold(&m, 1e-8)
    }

    /// Index pairs `(mu, nu)`, `mu > nu`, usable for correction drives
    /// (`|S_z^(offdiag)_{mu nu}| > 1e-8`).
    pub fn correction_pairs(&self) -> Vec<(usize, usize)> {
        pairs_above_threshold(&self.sz_offdiag, 1e-8)
    }
}

fn pairs_above_threshold(m: &ComplexMatrix, thresh: f64) -> Vec<(usize, usize)> {
    let d = m.nrows();
    let mut out = Vec::new();
    for mu in 0..d {
        for nu in 0..mu {
            if m[(mu, nu)].norm() > thresh {
                out.push((mu, nu));
            }
        }
    }
    out
}

/// Build and validate the qudit model.
///
/// Fails with `InvalidArgument` for non-half-integer spin and with
/// `ModelConsistency` if the selection rule `<mu|S_x|mu> = <mu|S_y|mu> = 0`
/// is violated beyond 1e-10 (which would indicate a Hamiltonian without the
/// parity structure the protocol relies on).
pub fn build_qudit_model(params: QuditParams) -> Result<QuditModel> {
    let two_s = 2.0 * params.s;
    if !((two_s - two_s.round()).abs() < 1e-9 && (two_s.round() as i64) % 2 == 1) {
        return Err(Error::InvalidArgument(format!(
            "qudit spin must be half-integer (odd 2S), got {}",
            params.s
        )));
    }
    if ![params.b_t, params.d, params.e, params.g]
        .iter()
        .all(|x| x.is_finite())
    {
        return Err(Error::InvalidArgument(
            "qudit model parameters must be finite".into(),
        ));
    }
    let ops = spin_matrices(params.s)?;
    let zeeman = units::zeeman_gap(params.g, params.b_t);
    let sz2 = &ops.sz * &ops.sz;
    let sx2_minus_sy2 = &ops.sx * &ops.sx - &ops.sy * &ops.sy;
    let h0 = ops.sz.map(|z| z * cr(zeeman))
        + sz2.map(|z| z * cr(params.d))
        + sx2_minus_sy2.map(|z| z * cr(params.e));
    let mut eig = hermitian_eigensystem(&h0)?;
    resolve_degeneracies_with_sz(&mut eig, &ops.sz);

    let sx_eig = eig.to_eigenbasis(&ops.sx);
    let sy_eig = eig.to_eigenbasis(&ops.sy);
    let sz_eig = eig.to_eigenbasis(&ops.sz);
    let d = eig.dim();
    for mu in 0..d {
        let vx = sx_eig[(mu, mu)].norm();
        let vy = sy_eig[(mu, mu)].norm();
        if vx > 1e-10 || vy > 1e-10 {
            return Err(Error::ModelConsistency(format!(
                "selection rule violated at eigenstate {mu}: |<S_x>| = {vx:.3e}, |<S_y>| = {vy:.3e}"
            )));
        }
    }
    let mut sz_diag = ComplexMatrix::zeros(d, d);
    for i in 0..d {
        sz_diag[(i, i)] = sz_eig[(i, i)];
    }
    let mut sz_offdiag = sz_eig.clone() - &sz_diag;
    // clamp numerically-zero diagonal residue so the split is exact
    for i in 0..d {
        sz_offdiag[(i, i)] = C_ZERO;
    }
    Ok(QuditModel {
        params,
        ops,
        eig,
        sx_eig,
        sz_eig,
        sz_diag,
        sz_offdiag,
    })
}

/// Within each degenerate energy cluster, rotate the eigenvectors so that
/// `S_z` restricted to the cluster is diagonal. Degenerate clusters appear
/// only in symmetric corners of parameter space (e.g. B = 0 with E = 0);
/// picking the `S_z`-compatible basis there keeps the diagonal/off-diagonal
/// split of `S_z` meaningful and the construction deterministic.
fn resolve_degeneracies_with_sz(eig: &mut EigenSystem, sz: &ComplexMatrix) {
    let d = eig.dim();
    let scale = eig.energies.iter().fold(1.0_f64, |a, &e| a.max(e.abs()));
    let mut start = 0;
    while start < d {
        let mut end = start + 1;
        while end < d && (eig.energies[end] - eig.energies[start]).abs() <= 1e-9 * scale {
            end += 1;
        }
        if end - start > 1 {
            let cols: Vec<usize> = (start..end).collect();
            let mut block = ComplexMatrix::zeros(cols.len(), cols.len());
            for (a, &ca) in cols.iter().enumerate() {
                for (b, &cb) in cols.iter().enumerate() {
                    let va = eig.vectors.column(ca);
                    let vb = eig.vectors.column(cb);
                    let mut acc = C_ZERO;
                    for i in 0..d {
                        for j in 0..d {
                            acc += va[i].conj() * sz[(i, j)] * vb[j];
                        }
                    }
                    block[(a, b)] = acc;
                }
            }
            if let Ok(sub) = hermitian_eigensystem(&block) {
                let old: Vec<DVector<Complex64>> = cols
                    .iter()
                    .map(|&c| DVector::from_iterator(d, eig.vectors.column(c).iter().cloned()))
                    .collect();
                for (b, &cb) in cols.iter().enumerate() {
                    let mut newv = DVector::<Complex64>::zeros(d);
                    for (a, _) in cols.iter().enumerate() {
                        newv += old[a].map(|z| z * sub.vectors[(a, b)]);
                    }
                    eig.vectors.set_column(cb, &newv);
                }
            }
        }
        start = end;
    }
    // re-apply the deterministic phase convention after any rotation
    let mut v = eig.vectors.clone();
    super_fix_phases(&mut v);
    eig.vectors = v;
}

fn super_fix_phases(v: &mut ComplexMatrix) {
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

/// One resonant transition entry of a multi-tone rotating-frame reduction.
#[derive(Debug, Clone, Copy)]
pub struct TransitionEntry {
    /// Upper eigenstate index.
    pub mu: usize,
    /// Lower eigenstate index.
    pub nu: usize,
    /// Gap `E_mu - E_nu` (rad/s).
    pub gap: f64,
    /// Commutator element `[S_z^(diag), S_x]_{mu nu}`.
    pub m_element: Complex64,
    /// Index of the driving tone in the input tone list.
    pub tone_index: usize,
    /// Per-transition Rabi rate `Omega_j` (rad/s): the magnitude of the
    /// effective coupling element.
    pub rabi_rate: f64,
}

/// Multi-rotating-frame effective model for a set of resonant drive tones.
#[derive(Debug, Clone)]
pub struct EffectiveRabiModel {
    pub entries: Vec<TransitionEntry>,
    /// Effective Hamiltonian (rad/s) in the eigenbasis: for each driven
    /// transition, element `(mu, nu)` is
    /// `-(gamma^2 B_x b_j / (2 w_j)) e^{-i phi_j} [S_z^(diag), S_x]_{mu nu}`
    /// with the Hermitian conjugate at `(nu, mu)`; all other elements zero.
    pub h_eff: ComplexMatrix,
    /// Perturbativity warnings accumulated during reduction.
    pub warnings: Vec<String>,
}

/// Reduce a resonantly driven qudit to its multi-rotating frame.
///
/// Each tone must target a transition `(mu, nu)` and sit on its gap within
/// 1e-6 relative. Per-tone perturbative ratios `eta_j = g mu_B b_j / w_j`
/// above 0.1 produce warnings; above 0.3 the reduction is refused.
pub fn rotating_frame_qudit(
    model: &QuditModel,
    tones: &[crate::compiler::DriveTone],
    bx_t: f64,
) -> Result<EffectiveRabiModel> {
    let d = model.dim();
    let gamma = units::gyromagnetic_ratio(model.params.g);
    let m = model.commutator_szd_sx();
    let mut h_eff = ComplexMatrix::zeros(d, d);
    let mut entries = Vec::with_capacity(tones.len());
    let mut warnings = Vec::new();
    for (j, tone) in tones.iter().enumerate() {
        let (mu, nu) = tone.transition;
        if mu >= d || nu >= d || mu == nu {
            return Err(Error::InvalidArgument(format!(
                "tone {j} targets invalid transition ({mu}, {nu}) for dimension {d}"
            )));
        }
        let (mu, nu) = if model.gap(mu, nu) >= 0.0 {
            (mu, nu)
        } else {
            (nu, mu)
        };
        let gap = model.gap(mu, nu);
        if gap <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tone {j} targets a degenerate pair ({mu}, {nu})"
            )));
        }
        if (tone.omega - gap).abs() > 1e-6 * gap {
            return Err(Error::InvalidArgument(format!(
                "tone {j} at {:.9e} rad/s is not resonant with gap ({mu}, {nu}) = {gap:.9e} rad/s",
                tone.omega
            )));
        }
        let eta = gamma * tone.amplitude_t.abs() / tone.omega;
        if eta >= 0.3 {
            return Err(Error::InvalidArgument(format!(
                "tone {j} perturbative ratio eta = {eta:.3} >= 0.3"
            )));
        }
        if eta >= 0.1 {
            warnings.push(format!(
                "tone {j} perturbative ratio eta = {eta:.3} >= 0.1; rotating frame marginal"
            ));
        }
        let m_el = m[(mu, nu)];
        let coupling = -(gamma * gamma * bx_t * tone.amplitude_t / (2.0 * tone.omega));
        let phase = Complex64::from_polar(1.0, -tone.phi);
        let element = phase * m_el * cr(coupling);
        h_eff[(mu, nu)] += element;
        h_eff[(nu, mu)] += element.conj();
        entries.push(TransitionEntry {
            mu,
            nu,
            gap,
            m_element: m_el,
            tone_index: j,
            rabi_rate: element.norm(),
        });
    }
    let herm = max_abs(&(h_eff.clone() - h_eff.adjoint()));
    if herm > 1e-12 * max_abs(&h_eff).max(1.0) {
        return Err(Error::NumericalFailure(format!(
            "effective Hamiltonian lost Hermiticity by {herm:.3e}"
        )));
    }
    Ok(EffectiveRabiModel {
        entries,
        h_eff,
        warnings,
    })
}
