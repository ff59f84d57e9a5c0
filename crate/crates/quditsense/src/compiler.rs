//! Pulse compilation: resonant tone synthesis, Trotter grouping,
//! fault-tolerant gate synthesis and fidelity scoring.
//!
//! A logical Rabi rotation is realized by driving every sensing transition
//! (one eigenstate from each codeword support) with a resonant longitudinal
//! tone. The tones are divided into Trotter groups such that no eigenstate
//! appears twice within a group — this structurally removes the spurious
//! sum/difference-frequency resonances of simultaneous drives — and the
//! groups act in sequence, each for an equal slice of the step.
//!
//! Tone amplitudes are generator-matched: the effective coupling on the
//! cross-support block is made proportional to `W_0 W_1^+` (the outer
//! product of the two error-word families), so that in the logical basis
//! the drive acts as `(Omega_L/2) sigma_x ⊗ I` exactly — identical on every
//! error index `k`. Equalizing bare per-transition Rabi rates alone does
//! not achieve this unless that matrix happens to have equal-magnitude
//! entries; the amplitude rule therefore carries the extra factor
//! `|W_0 W_1^+|_{mu nu}`, and the "equal rates" property holds for the
//! logical-block rates (coupling divided by that factor), which agree to
//! rounding by construction. Amplitudes depend only on the model and the
//! code, never on the transverse field being sensed.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::code::CodeSpace;
use crate::model::{rotating_frame_qudit, units, QuditModel};
use crate::spinops::{
    cr, hermitian_eigensystem, identity, matrix_exponential, max_abs, max_abs_diff, tensor,
    ComplexMatrix, C_ZERO,
};
use crate::{Error, Result};

/// One resonant longitudinal drive tone `b cos(w t + phi) S_z` targeting a
/// specific eigenstate transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveTone {
    /// Amplitude b (tesla).
    pub amplitude_t: f64,
    /// Angular frequency w (rad/s); generated from the target gap, never
    /// matched to it after the fact.
    pub omega: f64,
    /// Phase phi (rad).
    pub phi: f64,
    /// Target transition `(mu, nu)` with `mu` the upper eigenstate.
    pub transition: (usize, usize),
}

/// Transitions available to the compiled protocol, split by role. Pairs are
/// reported as ascending index pairs `(lo, hi)` in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionSets {
    /// Cross-support pairs with a sensing coupling
    /// (`|[S_z^(diag), S_x]_{mu nu}| > 1e-8`).
    pub sensing: Vec<(usize, usize)>,
    /// Same-support pairs with a first-order drive coupling
    /// (`|S_z^(offdiag)_{mu nu}| > 1e-8`).
    pub correction: Vec<(usize, usize)>,
}

/// Enumerate the sensing and correction transitions of a code on a model.
///
/// Sensing pairs connect the two codeword supports through the commutator
/// `[S_z^(diag), S_x]`; correction pairs stay within one support and couple
/// through `S_z^(offdiag)`. A pair showing up in both sets contradicts the
/// support structure and fails the model-consistency check. The logical
/// drive requires every cross-support pair (all `(d/2)^2` of them): a dark
/// pair makes the generator-matched tone set unrealizable, so the
/// enumeration reports insufficient connectivity.
pub fn enumerate_transitions(
    codespace: &CodeSpace,
    model: &QuditModel,
) -> Result<TransitionSets> {
    let d = model.dim();
    if codespace.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "code space dimension {} does not match model dimension {d}",
            codespace.dim()
        )));
    }
    let comm = model.commutator_szd_sx();
    let mut sensing = Vec::new();
    let mut dark = Vec::new();
    for &mu in &codespace.supports[0] {
        for &nu in &codespace.supports[1] {
            if comm[(mu, nu)].norm() > 1e-8 {
                sensing.push((mu.min(nu), mu.max(nu)));
            } else {
                dark.push((mu.min(nu), mu.max(nu)));
            }
        }
    }
    sensing.sort_unstable();
    dark.sort_unstable();
    let mut correction = Vec::new();
    for supp in &codespace.supports {
        for (i, &mu) in supp.iter().enumerate() {
            for &nu in &supp[i + 1..] {
                if model.sz_offdiag[(mu, nu)].norm() > 1e-8 {
                    correction.push((mu.min(nu), mu.max(nu)));
                }
            }
        }
    }
    correction.sort_unstable();
    if let Some(shared) = sensing.iter().find(|p| correction.contains(p)) {
        return Err(Error::ModelConsistency(format!(
            "transition {shared:?} appears as both sensing and correction pair"
        )));
    }
    if !dark.is_empty() {
        return Err(Error::Compile(format!(
            "insufficient sensing connectivity: cross-support transitions {dark:?} carry no \
             drive coupling (selection rules leave them dark), so the logical drive cannot \
             act uniformly on the code space"
        )));
    }
    Ok(TransitionSets {
        sensing,
        correction,
    })
}

/// Two-color the vertices of a pair list; fails on odd cycles.
fn bipartition(pairs: &[(usize, usize)]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut vertices: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    vertices.sort_unstable();
    vertices.dedup();
    let mut color: std::collections::BTreeMap<usize, u8> = std::collections::BTreeMap::new();
    for &start in &vertices {
        if color.contains_key(&start) {
            continue;
        }
        color.insert(start, 0);
        let mut queue = vec![start];
        while let Some(v) = queue.pop() {
            let cv = color[&v];
            for &(a, b) in pairs {
                let other = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                match color.get(&other) {
                    None => {
                        color.insert(other, 1 - cv);
                        queue.push(other);
                    }
                    Some(&c) if c == cv => {
                        return Err(Error::InvalidArgument(format!(
                            "pairs do not form a bipartite graph (odd cycle through {v} and \
                             {other})"
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
    }
    let side_a: Vec<usize> = vertices.iter().copied().filter(|v| color[v] == 0).collect();
    let side_b: Vec<usize> = vertices.iter().copied().filter(|v| color[v] == 1).collect();
    Ok((side_a, side_b))
}

/// Partition transitions into Trotter groups such that within each group no
/// eigenstate index appears twice. For the complete bipartite set the
/// result is the round-robin Latin-square schedule with `d/2` groups; for
/// sparser sets a deterministic proper edge coloring is computed. Fails
/// listing the pairs that cannot be scheduled within `max_groups` groups.
pub fn trotter_grouping(
    pairs: &[(usize, usize)],
    max_groups: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no transitions to schedule".into()));
    }
    if max_groups == 0 {
        return Err(Error::InvalidArgument("need at least one group".into()));
    }
    for &(a, b) in pairs {
        if a == b {
            return Err(Error::InvalidArgument(format!(
                "degenerate transition ({a}, {a})"
            )));
        }
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != pairs.len() {
        return Err(Error::InvalidArgument(
            "duplicate transitions in grouping input".into(),
        ));
    }
    let (side_a, side_b) = bipartition(&sorted)?;
    // canonical orientation: the side holding the smallest index comes first
    let (side_a, side_b) = if side_b.first() < side_a.first() {
        (side_b, side_a)
    } else {
        (side_a, side_b)
    };
    let n = side_a.len().max(side_b.len());
    // complete bipartite set: the round-robin Latin square is the canonical
    // schedule (and matches the printed reference grouping)
    if side_a.len() == side_b.len() && sorted.len() == n * n && n <= max_groups {
        let mut groups = Vec::with_capacity(n);
        for r in 0..n {
            let mut group: Vec<(usize, usize)> = (0..n)
                .map(|i| {
                    let (x, y) = (side_a[i], side_b[(i + r) % n]);
                    (x.min(y), x.max(y))
                })
                .collect();
            group.sort_unstable();
            groups.push(group);
        }
        return Ok(groups);
    }
    // general case: greedy assignment with Kempe-chain repair
    let budget = n.min(max_groups);
    let mut colors: Vec<Option<usize>> = vec![None; sorted.len()];
    let free_color = |colors: &[Option<usize>], vertex: usize, budget: usize| -> Option<usize> {
        (0..budget).find(|&c| {
            !sorted
                .iter()
                .zip(colors.iter())
                .any(|(&(a, b), &col)| col == Some(c) && (a == vertex || b == vertex))
        })
    };
    let mut uncoverable = Vec::new();
    for e in 0..sorted.len() {
        let (a, b) = sorted[e];
        let ca = free_color(&colors, a, budget);
        let cb = free_color(&colors, b, budget);
        match (ca, cb) {
            (None, _) | (_, None) => uncoverable.push(sorted[e]),
            (Some(ca), Some(cb)) if ca == cb => colors[e] = Some(ca),
            (Some(ca), Some(cb)) => {
                // swap the alternating (ca, cb) chain starting at b so that
                // ca becomes free at b; in a bipartite graph the chain
                // cannot terminate at a
                let mut vertex = b;
                let mut want = ca;
                let mut prev_edge = usize::MAX;
                let mut guard = 0;
                loop {
                    let next = sorted.iter().enumerate().find(|(i, &(x, y))| {
                        *i != prev_edge
                            && colors[*i] == Some(want)
                            && (x == vertex || y == vertex)
                    });
                    match next {
                        Some((i, &(x, y))) => {
                            colors[i] = Some(if want == ca { cb } else { ca });
                            prev_edge = i;
                            vertex = if x == vertex { y } else { x };
                            want = if want == ca { cb } else { ca };
                        }
                        None => break,
                    }
                    guard += 1;
                    if guard > 2 * sorted.len() {
                        return Err(Error::NumericalFailure(
                            "edge-coloring chain did not terminate".into(),
                        ));
                    }
                }
                colors[e] = Some(ca);
            }
        }
    }
    if !uncoverable.is_empty() {
        return Err(Error::Compile(format!(
            "transitions {uncoverable:?} cannot be scheduled within {budget} Trotter groups"
        )));
    }
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); budget];
    for (e, color) in colors.iter().enumerate() {
        groups[color.expect("all edges colored")].push(sorted[e]);
    }
    groups.retain(|g| !g.is_empty());
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(groups)
}

/// A compiled multi-tone drive program for one logical Rabi rotation.
#[derive(Debug, Clone)]
pub struct PulseSchedule {
    /// Trotter groups of tones; within each group no eigenstate index
    /// repeats.
    pub groups: Vec<Vec<DriveTone>>,
    /// Trotter steps per rotation.
    pub n_steps: usize,
    /// Target logical rotation angle (rad).
    pub theta: f64,
    /// Reference transverse field (tesla) used for the nominal period.
    pub bx_ref: f64,
    /// Logical Rabi rate per tesla of transverse field (rad/s/T).
    pub omega_l_per_tesla: f64,
    /// Nominal logical period at `bx_ref` (s).
    pub tau_ref: f64,
    /// Largest perturbative ratio `eta_j` across tones.
    pub max_eta: f64,
}

impl PulseSchedule {
    /// Effective logical Rabi rate (rad/s) at a given transverse field.
    ///
    /// The tone groups are interleaved round-robin, so each group drives
    /// for an equal share of the sensing time and the realized rotation
    /// rate is the per-group generator rate divided by the group count.
    pub fn omega_logical(&self, bx_t: f64) -> f64 {
        self.omega_l_per_tesla * bx_t / self.groups.len() as f64
    }

    /// Logical Rabi period (s) at a given transverse field.
    pub fn tau(&self, bx_t: f64) -> f64 {
        2.0 * PI / self.omega_logical(bx_t)
    }

    /// Re-anchor the nominal period to a different reference field.
    pub fn with_bx_ref(mut self, bx_t: f64) -> Result<Self> {
        if !(bx_t.is_finite() && bx_t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reference field must be positive, got {bx_t:e}"
            )));
        }
        self.bx_ref = bx_t;
        self.tau_ref = self.tau(bx_t);
        Ok(self)
    }

    /// All tones in group order.
    pub fn tones(&self) -> impl Iterator<Item = &DriveTone> {
        self.groups.iter().flatten()
    }

    /// Effective rotating-frame Hamiltonian of each group (rad/s) at the
    /// given transverse field.
    pub fn effective_hamiltonians(
        &self,
        model: &QuditModel,
        bx_t: f64,
    ) -> Result<Vec<ComplexMatrix>> {
        self.groups
            .iter()
            .map(|group| Ok(rotating_frame_qudit(model, group, bx_t)?.h_eff))
            .collect()
    }

    /// Check group disjointness, single coverage across groups, and the
    /// schedule-level perturbative bound. The per-tone ratio against the
    /// model spectrum is enforced during synthesis.
    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let mut used = Vec::new();
            for tone in group {
                let (mu, nu) = tone.transition;
                if used.contains(&mu) || used.contains(&nu) {
                    return Err(Error::Compile(format!(
                        "group {g} drives eigenstate index {} twice",
                        if used.contains(&mu) { mu } else { nu }
                    )));
                }
                used.push(mu);
                used.push(nu);
                let pair = (mu.min(nu), mu.max(nu));
                if seen.contains(&pair) {
                    return Err(Error::Compile(format!(
                        "transition {pair:?} is driven by more than one tone"
                    )));
                }
                seen.push(pair);
                if !(tone.amplitude_t.is_finite()
                    && tone.omega.is_finite()
                    && tone.omega > 0.0
                    && tone.phi.is_finite())
                {
                    return Err(Error::Compile(format!(
                        "tone on {pair:?} has non-finite parameters"
                    )));
                }
            }
        }
        if !(self.max_eta.is_finite() && self.max_eta < 0.1) {
            return Err(Error::Compile(format!(
                "schedule perturbative ratio {:.3} >= 0.1",
                self.max_eta
            )));
        }
        Ok(())
    }

    /// Serialize to the structured text format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("quditsense-schedule v1\n");
        out.push_str(&format!("n_steps {}\n", self.n_steps));
        out.push_str(&format!("theta {:?}\n", self.theta));
        out.push_str(&format!("bx_ref_t {:?}\n", self.bx_ref));
        out.push_str(&format!("omega_l_per_tesla {:?}\n", self.omega_l_per_tesla));
        out.push_str(&format!("tau_ref_s {:?}\n", self.tau_ref));
        out.push_str(&format!("max_eta {:?}\n", self.max_eta));
        for (g, group) in self.groups.iter().enumerate() {
            out.push_str(&format!("group {g}\n"));
            for tone in group {
                out.push_str(&format!(
                    "tone {:?} {:?} {:?} {} {}\n",
                    tone.amplitude_t,
                    tone.omega / (2.0 * PI * 1e9),
                    tone.phi,
                    tone.transition.0,
                    tone.transition.1
                ));
            }
        }
        out.push_str("end\n");
        out
    }

    /// Parse the structured text format written by
    /// [`PulseSchedule::to_text`].
    pub fn from_text(text: &str) -> Result<PulseSchedule> {
        let mut lines = text.lines();
        if lines.next() != Some("quditsense-schedule v1") {
            return Err(Error::DataCorruption("missing schedule header".into()));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::DataCorruption(format!("bad float {s:?}")))
        };
        let mut n_steps = None;
        let mut theta = None;
        let mut bx_ref = None;
        let mut omega_l = None;
        let mut tau_ref = None;
        let mut max_eta = None;
        let mut groups: Vec<Vec<DriveTone>> = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "end" {
                break;
            }
            let (key, body) = line
                .split_once(' ')
                .ok_or_else(|| Error::DataCorruption(format!("unparseable line {line:?}")))?;
            match key {
                "n_steps" => {
                    n_steps = Some(body.parse::<usize>().map_err(|_| {
                        Error::DataCorruption(format!("bad step count {body:?}"))
                    })?)
                }
                "theta" => theta = Some(parse_f(body)?),
                "bx_ref_t" => bx_ref = Some(parse_f(body)?),
                "omega_l_per_tesla" => omega_l = Some(parse_f(body)?),
                "tau_ref_s" => tau_ref = Some(parse_f(body)?),
                "max_eta" => max_eta = Some(parse_f(body)?),
                "group" => {
                    let idx: usize = body.parse().map_err(|_| {
                        Error::DataCorruption(format!("bad group label {body:?}"))
                    })?;
                    if idx != groups.len() {
                        return Err(Error::DataCorruption(format!(
                            "group {idx} out of order (expected {})",
                            groups.len()
                        )));
                    }
                    groups.push(Vec::new());
                }
                "tone" => {
                    let toks: Vec<&str> = body.split_whitespace().collect();
                    if toks.len() != 5 {
                        return Err(Error::DataCorruption(format!("bad tone line {line:?}")));
                    }
                    let group = groups
                        .last_mut()
                        .ok_or_else(|| Error::DataCorruption("tone before first group".into()))?;
                    group.push(DriveTone {
                        amplitude_t: parse_f(toks[0])?,
                        omega: parse_f(toks[1])? * 2.0 * PI * 1e9,
                        phi: parse_f(toks[2])?,
                        transition: (
                            toks[3].parse().map_err(|_| {
                                Error::DataCorruption(format!("bad index {:?}", toks[3]))
                            })?,
                            toks[4].parse().map_err(|_| {
                                Error::DataCorruption(format!("bad index {:?}", toks[4]))
                            })?,
                        ),
                    });
                }
                other => {
                    return Err(Error::DataCorruption(format!(
                        "unknown schedule field {other:?}"
                    )))
                }
            }
        }
        let schedule = PulseSchedule {
            groups,
            n_steps: n_steps.ok_or_else(|| Error::DataCorruption("missing n_steps".into()))?,
            theta: theta.ok_or_else(|| Error::DataCorruption("missing theta".into()))?,
            bx_ref: bx_ref.ok_or_else(|| Error::DataCorruption("missing bx_ref_t".into()))?,
            omega_l_per_tesla: omega_l
                .ok_or_else(|| Error::DataCorruption("missing omega_l_per_tesla".into()))?,
            tau_ref: tau_ref.ok_or_else(|| Error::DataCorruption("missing tau_ref_s".into()))?,
            max_eta: max_eta.ok_or_else(|| Error::DataCorruption("missing max_eta".into()))?,
        };
        if schedule.groups.is_empty() {
            return Err(Error::DataCorruption("schedule has no groups".into()));
        }
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Locate an eigenstate index inside a support list.
fn support_position(supports: &[Vec<usize>; 2], idx: usize) -> Option<(usize, usize)> {
    for (ell, supp) in supports.iter().enumerate() {
        if let Some(pos) = supp.iter().position(|&i| i == idx) {
            return Some((ell, pos));
        }
    }
    None
}

/// Synthesize the drive tones for a logical Rabi rotation.
///
/// Each pair gets one resonant tone with amplitude
/// `b_j = b_ref (w_j/w_ref)(|M_ref|/|M_j|)(|u_j|/|u_ref|)` where `M_j` is
/// the commutator element and `u = W_0 W_1^+` the cross-support target
/// matrix, and phase 0 or pi so that every effective coupling is real with
/// the sign of `u_j`. The resulting logical-basis action is
/// `(Omega_L/2) sigma_x ⊗ I` with `Omega_L` proportional to the transverse
/// field; per-tone couplings divided by `|u_j|` agree to rounding. Tones
/// whose perturbative ratio would reach 0.1 abort compilation.
pub fn tone_synthesis(
    groups: &[Vec<(usize, usize)>],
    model: &QuditModel,
    codespace: &CodeSpace,
    b_ref: f64,
) -> Result<PulseSchedule> {
    if !(b_ref.is_finite() && b_ref > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference amplitude must be positive, got {b_ref:e}"
        )));
    }
    if groups.is_empty() || groups.iter().all(|g| g.is_empty()) {
        return Err(Error::InvalidArgument("no transitions to drive".into()));
    }
    let d = model.dim();
    if codespace.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "code space dimension {} does not match model dimension {d}",
            codespace.dim()
        )));
    }
    let n = d / 2;
    let comm = model.commutator_szd_sx();
    let gamma = units::gyromagnetic_ratio(model.params.g);
    // cross-support target matrix u[(r0, r1)] = sum_k <supp0[r0]|0,k><1,k|supp1[r1]>
    let mut u = ComplexMatrix::zeros(n, n);
    for k in 0..n {
        let w0 = codespace.errorword(0, k);
        let w1 = codespace.errorword(1, k);
        for (r0, &i0) in codespace.supports[0].iter().enumerate() {
            for (r1, &i1) in codespace.supports[1].iter().enumerate() {
                u[(r0, r1)] += w0[i0] * w1[i1].conj();
            }
        }
    }
    // per-pair data: oriented (upper, lower), gap, commutator element and
    // target entry
    struct PairData {
        upper: usize,
        lower: usize,
        gap: f64,
        m_abs: f64,
        m_sign: f64,
        u_val: f64,
    }
    let mut pair_data: Vec<Vec<PairData>> = Vec::with_capacity(groups.len());
    for group in groups {
        let mut entries = Vec::with_capacity(group.len());
        for &(a, b) in group {
            if a >= d || b >= d || a == b {
                return Err(Error::InvalidArgument(format!(
                    "invalid transition ({a}, {b}) for dimension {d}"
                )));
            }
            let (upper, lower) = if model.gap(a, b) > 0.0 { (a, b) } else { (b, a) };
            let gap = model.gap(upper, lower);
            if gap <= 0.0 {
                return Err(Error::Compile(format!(
                    "transition ({a}, {b}) has no spectral gap"
                )));
            }
            let (ell_a, pos_a) = support_position(&codespace.supports, a).ok_or_else(|| {
                Error::InvalidArgument(format!("eigenstate {a} is outside both supports"))
            })?;
            let (ell_b, pos_b) = support_position(&codespace.supports, b).ok_or_else(|| {
                Error::InvalidArgument(format!("eigenstate {b} is outside both supports"))
            })?;
            if ell_a == ell_b {
                return Err(Error::InvalidArgument(format!(
                    "transition ({a}, {b}) does not cross the supports"
                )));
            }
            let (r0, r1) = if ell_a == 0 { (pos_a, pos_b) } else { (pos_b, pos_a) };
            let u_entry = u[(r0, r1)];
            if u_entry.im.abs() > 1e-10 {
                return Err(Error::ModelConsistency(format!(
                    "target coupling for ({a}, {b}) is not real ({u_entry})"
                )));
            }
            let m_el = comm[(upper, lower)];
            if m_el.re.abs() <= 1e-8 || m_el.im.abs() > 1e-10 {
                return Err(Error::Compile(format!(
                    "transition ({a}, {b}) has no usable drive coupling (element {m_el})"
                )));
            }
            entries.push(PairData {
                upper,
                lower,
                gap,
                m_abs: m_el.re.abs(),
                m_sign: m_el.re.signum(),
                u_val: u_entry.re,
            });
        }
        pair_data.push(entries);
    }
    let reference = pair_data
        .iter()
        .flatten()
        .find(|p| p.u_val.abs() > 1e-12)
        .ok_or_else(|| {
            Error::Compile("no driven transition carries logical weight".into())
        })?;
    let (w_ref, m_ref, u_ref) = (reference.gap, reference.m_abs, reference.u_val.abs());
    let mut tone_groups: Vec<Vec<DriveTone>> = Vec::with_capacity(pair_data.len());
    let mut max_eta = 0.0_f64;
    for entries in &pair_data {
        let mut tones = Vec::with_capacity(entries.len());
        for p in entries {
            let amplitude = b_ref * (p.gap / w_ref) * (m_ref / p.m_abs) * (p.u_val.abs() / u_ref);
            // the rotating-frame coupling is -(gamma^2 Bx b/(2w)) e^{-i phi} M;
            // phase 0 flips the sign of M, phase pi keeps it
            let phi = if p.u_val.signum() * p.m_sign > 0.0 { PI } else { 0.0 };
            let eta = gamma * amplitude / p.gap;
            if eta > max_eta {
                max_eta = eta;
            }
            tones.push(DriveTone {
                amplitude_t: amplitude,
                omega: p.gap,
                phi,
                transition: (p.upper, p.lower),
            });
        }
        tone_groups.push(tones);
    }
    if max_eta >= 0.1 {
        return Err(Error::Compile(format!(
            "perturbative ratio eta = {max_eta:.3} >= 0.1; reduce the reference amplitude \
             (currently {b_ref:e} T)"
        )));
    }
    let bx_ref = 1e-6;
    let omega_l_per_tesla = gamma * gamma * b_ref * m_ref / (w_ref * u_ref);
    let mut schedule = PulseSchedule {
        groups: tone_groups,
        n_steps: 64,
        theta: PI,
        bx_ref,
        omega_l_per_tesla,
        tau_ref: 0.0,
        max_eta,
    };
    schedule.tau_ref = schedule.tau(bx_ref);
    schedule.validate()?;
    Ok(schedule)
}

/// One segment of a compiled logical rotation: a Trotter group acting for a
/// fixed duration.
#[derive(Debug, Clone, Copy)]
pub struct RabiSegment {
    /// Index into the group Hamiltonian list.
    pub group: usize,
    /// Wall-clock duration (s).
    pub duration: f64,
}

/// A compiled logical Rabi rotation: effective group Hamiltonians and the
/// alternating segment sequence realizing the target angle.
#[derive(Debug, Clone)]
pub struct CompiledRabi {
    /// Effective Hamiltonian of each group (rad/s) at the compile field.
    pub hamiltonians: Vec<ComplexMatrix>,
    /// Segment sequence in execution order.
    pub segments: Vec<RabiSegment>,
    /// Common segment duration (s).
    pub dt_segment: f64,
    /// Total wall-clock time (s).
    pub total_time: f64,
    /// Target logical angle (rad).
    pub theta: f64,
    /// Transverse field the channel was instantiated at (tesla).
    pub bx: f64,
}

/// Compile a logical Rabi rotation by angle `theta` into alternating
/// Trotter segments at the schedule's reference field.
pub fn compile_logical_rabi(
    schedule: &PulseSchedule,
    model: &QuditModel,
    theta: f64,
    n_steps: usize,
) -> Result<CompiledRabi> {
    compile_logical_rabi_at(schedule, model, theta, n_steps, schedule.bx_ref)
}

/// Compile a logical Rabi rotation at an explicit transverse field.
pub fn compile_logical_rabi_at(
    schedule: &PulseSchedule,
    model: &QuditModel,
    theta: f64,
    n_steps: usize,
    bx_t: f64,
) -> Result<CompiledRabi> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("need at least one Trotter step".into()));
    }
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rotation angle must be non-negative, got {theta:e}"
        )));
    }
    if !(bx_t.is_finite() && bx_t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "transverse field must be positive, got {bx_t:e}"
        )));
    }
    let hamiltonians = schedule.effective_hamiltonians(model, bx_t)?;
    let n_groups = hamiltonians.len();
    let omega_l = schedule.omega_logical(bx_t);
    // wall-clock gate time theta / omega_l, split over every interleaved slice
    let dt_segment = theta / omega_l / (n_steps * n_groups) as f64;
    let mut segments = Vec::with_capacity(n_steps * n_groups);
    if theta > 0.0 {
        for _ in 0..n_steps {
            for g in 0..n_groups {
                segments.push(RabiSegment {
                    group: g,
                    duration: dt_segment,
                });
            }
        }
    }
    Ok(CompiledRabi {
        hamiltonians,
        total_time: dt_segment * segments.len() as f64,
        segments,
        dt_segment,
        theta,
        bx: bx_t,
    })
}

impl CompiledRabi {
    /// Unitary realized by the segment sequence (no dissipation). All
    /// segments share one duration, so each group is exponentiated once.
    pub fn unitary(&self) -> Result<ComplexMatrix> {
        let d = self
            .hamiltonians
            .first()
            .map(|h| h.nrows())
            .ok_or_else(|| Error::InvalidArgument("compiled channel has no groups".into()))?;
        let mut steps: Vec<Option<ComplexMatrix>> = vec![None; self.hamiltonians.len()];
        let mut u = identity(d);
        for seg in &self.segments {
            if steps[seg.group].is_none() {
                steps[seg.group] = Some(matrix_exponential(
                    &self.hamiltonians[seg.group]
                        .map(|z| z * Complex64::new(0.0, -seg.duration)),
                )?);
            }
            u = steps[seg.group].as_ref().expect("cached") * u;
        }
        Ok(u)
    }
}

/// Average state fidelity of a channel against an ideal unitary over the
/// six cardinal logical states `|0_L>`, `|1_L>`, `(|0_L>±|1_L>)/sqrt(2)`,
/// `(|0_L>±i|1_L>)/sqrt(2)`.
pub fn gate_fidelity(
    channel: &ComplexMatrix,
    ideal: &ComplexMatrix,
    codespace: &CodeSpace,
) -> Result<f64> {
    let d = codespace.dim();
    if ideal.nrows() != d || ideal.ncols() != d {
        return Err(Error::InvalidArgument(format!(
            "ideal unitary is {}x{}, expected {d}x{d}",
            ideal.nrows(),
            ideal.ncols()
        )));
    }
    if channel.nrows() != d * d || channel.ncols() != d * d {
        return Err(Error::InvalidArgument(format!(
            "channel superoperator is {}x{}, expected {}x{}",
            channel.nrows(),
            channel.ncols(),
            d * d,
            d * d
        )));
    }
    let sqrt_half = cr(1.0 / 2.0_f64.sqrt());
    let cardinal = [
        (cr(1.0), C_ZERO),
        (C_ZERO, cr(1.0)),
        (sqrt_half, sqrt_half),
        (sqrt_half, -sqrt_half),
        (sqrt_half, sqrt_half * Complex64::new(0.0, 1.0)),
        (sqrt_half, sqrt_half * Complex64::new(0.0, -1.0)),
    ];
    let mut total = 0.0;
    for (a, b) in cardinal {
        let psi = codespace.codewords[0].map(|z| z * a) + codespace.codewords[1].map(|z| z * b);
        let mut rho = ComplexMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                rho[(i, j)] = psi[i] * psi[j].conj();
            }
        }
        let out = crate::dynamics::unvectorize(&(channel * crate::dynamics::vectorize(&rho)), d);
        let target = ideal * &psi;
        let mut fid = C_ZERO;
        for i in 0..d {
            for j in 0..d {
                fid += target[i].conj() * out[(i, j)] * target[j];
            }
        }
        if fid.im.abs() > 1e-9 {
            return Err(Error::NumericalFailure(format!(
                "state fidelity has imaginary part {:.3e}",
                fid.im
            )));
        }
        total += fid.re;
    }
    Ok(total / 6.0)
}

/// One first-order resonant pulse implied by a synthesized generator
/// element.
#[derive(Debug, Clone, Copy)]
pub struct PhysicalPulse {
    /// Composite-basis index pair `(row, col)`, row < col.
    pub pair: (usize, usize),
    /// Qudit-factor eigenstate pair behind the element.
    pub qudit_pair: (usize, usize),
    /// Resonance frequency (rad/s): the qudit gap (0 for pure-ancilla
    /// transitions, whose splitting is outside the model).
    pub omega: f64,
    /// Rotation angle contributed by the element (rad).
    pub angle: f64,
    /// Phase of the element (rad).
    pub phase: f64,
}

/// A logical unitary synthesized into a physical generator and pulse list.
#[derive(Debug, Clone)]
pub struct SynthesizedGate {
    /// The target unitary in the logical `(l, k)` basis (possibly on
    /// qudit ⊗ ancilla).
    pub logical_unitary: ComplexMatrix,
    /// Hermitian generator in the physical eigenbasis: `A G A^+` with
    /// `G = i log U` on the principal branch.
    pub generator: ComplexMatrix,
    /// Pulses implied by the off-diagonal generator elements.
    pub pulses: Vec<PhysicalPulse>,
    /// Wall-clock execution duration (s); bookkeeping only.
    pub duration: f64,
    /// Set when an eigenphase sat on the branch cut (eigenvalue -1) and was
    /// deterministically folded to +pi.
    pub branch_warning: bool,
}

/// Diagonalize a unitary deterministically by simultaneous diagonalization
/// of its Hermitian and anti-Hermitian parts. Returns (eigenvalues,
/// eigenvector columns).
fn diagonalize_unitary(u: &ComplexMatrix) -> Result<(Vec<Complex64>, ComplexMatrix)> {
    let d = u.nrows();
    let hr = (u + u.adjoint()).map(|z| z * cr(0.5));
    let hi = (u - u.adjoint()).map(|z| z * Complex64::new(0.0, -0.5));
    let eig = hermitian_eigensystem(&hr)?;
    let mut vectors = eig.vectors.clone();
    // rotate inside each degenerate cluster of Re-eigenvalues so that the
    // anti-Hermitian part is diagonal there as well
    let mut start = 0;
    while start < d {
        let mut end = start + 1;
        while end < d && (eig.energies[end] - eig.energies[start]).abs() < 1e-8 {
            end += 1;
        }
        if end - start > 1 {
            let cluster = vectors.columns(start, end - start).into_owned();
            let block = cluster.adjoint() * &hi * &cluster;
            let sub = hermitian_eigensystem(&block)?;
            let rotated = cluster * sub.vectors;
            vectors.columns_mut(start, end - start).copy_from(&rotated);
        }
        start = end;
    }
    let check = vectors.adjoint() * u * &vectors;
    let mut eigenvalues = Vec::with_capacity(d);
    for i in 0..d {
        eigenvalues.push(check[(i, i)]);
    }
    for i in 0..d {
        for j in 0..d {
            if i != j && check[(i, j)].norm() > 1e-8 {
                return Err(Error::NumericalFailure(format!(
                    "unitary diagonalization failed: residual {:.3e} at ({i}, {j})",
                    check[(i, j)].norm()
                )));
            }
        }
    }
    Ok((eigenvalues, vectors))
}

/// Synthesize the physical generator of a logical unitary.
///
/// `u_logical` acts in the `(l, k)` logical basis, optionally tensored with
/// an abstract ancilla (dimension must be a multiple of the code-space
/// dimension). The generator `G = i log U` is taken on the principal
/// branch, eigenphases in `(-pi, pi]`; eigenvalues at `-1` sit on the
/// branch cut and are folded to `+pi` deterministically with a warning
/// flag. The physical generator is `(A ⊗ I) G (A ⊗ I)^+` and the invariant
/// `exp(-i A G A^+) = A U A^+` is verified to 1e-10.
pub fn synthesize_ft_gate(
    u_logical: &ComplexMatrix,
    codespace: &CodeSpace,
    model: &QuditModel,
    duration: f64,
) -> Result<SynthesizedGate> {
    let d = codespace.dim();
    let dim = u_logical.nrows();
    if u_logical.ncols() != dim || !dim.is_multiple_of(d) || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "logical unitary must be square with dimension a multiple of {d}, got {}x{}",
            u_logical.nrows(),
            u_logical.ncols()
        )));
    }
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gate duration must be non-negative, got {duration:e}"
        )));
    }
    let unitarity = max_abs_diff(&(u_logical.adjoint() * u_logical), &identity(dim));
    if unitarity > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "input is not unitary: |U^+U - I| = {unitarity:.3e}"
        )));
    }
    let m = dim / d;
    let (eigenvalues, vectors) = diagonalize_unitary(u_logical)?;
    let mut branch_warning = false;
    let phases: Vec<f64> = eigenvalues
        .iter()
        .map(|lambda| {
            let g = -lambda.im.atan2(lambda.re);
            if g.abs() > PI - 1e-9 {
                branch_warning = true;
                PI
            } else {
                g
            }
        })
        .collect();
    let mut g_logical = ComplexMatrix::zeros(dim, dim);
    for (idx, &phase) in phases.iter().enumerate() {
        let col = vectors.column(idx);
        for i in 0..dim {
            for j in 0..dim {
                g_logical[(i, j)] += col[i] * col[j].conj() * cr(phase);
            }
        }
    }
    let a_comp = if m == 1 {
        codespace.a.clone()
    } else {
        tensor(&codespace.a, &identity(m))
    };
    let generator = &a_comp * &g_logical * a_comp.adjoint();
    let generator = (&generator + generator.adjoint()).map(|z| z * cr(0.5));
    let target = &a_comp * u_logical * a_comp.adjoint();
    let realized =
        matrix_exponential(&generator.map(|z| z * Complex64::new(0.0, -1.0)))?;
    let dev = max_abs_diff(&realized, &target);
    if dev > 1e-10 {
        return Err(Error::NumericalFailure(format!(
            "generator exponential misses the target unitary by {dev:.3e}"
        )));
    }
    let scale = max_abs(&generator).max(1.0);
    let mut pulses = Vec::new();
    for r in 0..dim {
        for c in (r + 1)..dim {
            let el = generator[(r, c)];
            if el.norm() > 1e-10 * scale {
                let (i, j) = (r / m, c / m);
                let omega = if i == j { 0.0 } else { model.gap(i.max(j), i.min(j)) };
                pulses.push(PhysicalPulse {
                    pair: (r, c),
                    qudit_pair: (i.min(j), i.max(j)),
                    omega,
                    angle: el.norm(),
                    phase: el.im.atan2(el.re),
                });
            }
        }
    }
    Ok(SynthesizedGate {
        logical_unitary: u_logical.clone(),
        generator,
        pulses,
        duration,
        branch_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::{
        build_error_words, default_supports, optimize_codewords, tomography_kraus,
    };
    use crate::dynamics::{unitary_superoperator, NoiseModel};
    use crate::model::{build_qudit_model, QuditParams};
    use crate::spinops::partial_trace;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn reference_model(s: f64) -> QuditModel {
        build_qudit_model(QuditParams::reference(s).expect("params")).expect("model")
    }

    fn reference_codespace(model: &QuditModel, seed: u64) -> CodeSpace {
        let noise = NoiseModel::pure_dephasing(50e-6).unwrap();
        let kraus = tomography_kraus(model, &noise, 400e-9).unwrap();
        let supports = default_supports(model).unwrap();
        let code =
            optimize_codewords(&kraus, &supports, model.dim() / 2, 32, seed).unwrap();
        build_error_words(&code, &kraus).unwrap()
    }

    /// A code with basis-state codewords and identity error words, for
    /// structural tests that need no optimization.
    fn trivial_codespace(supports: [Vec<usize>; 2], d: usize) -> CodeSpace {
        let basis = |i: usize| {
            let mut v = DVector::from_element(d, C_ZERO);
            v[i] = cr(1.0);
            v
        };
        let mut errorwords = Vec::new();
        for supp in &supports {
            for &i in supp {
                errorwords.push(basis(i));
            }
        }
        let mut a = ComplexMatrix::zeros(d, d);
        for (col, w) in errorwords.iter().enumerate() {
            a.set_column(col, w);
        }
        let space = CodeSpace {
            s: (d as f64 - 1.0) / 2.0,
            codewords: [basis(supports[0][0]), basis(supports[1][0])],
            supports,
            errorwords,
            a,
            kl_residual: 0.0,
            seed: 0,
        };
        space.validate().expect("trivial code space");
        space
    }

    #[test]
    fn enumerate_matches_reference_pairs() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sets = enumerate_transitions(&space, &model).unwrap();
        assert_eq!(sets.sensing, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(sets.correction, vec![(0, 3), (1, 2)]);
    }

    #[test]
    fn enumerate_s72_full_connectivity() {
        let model = reference_model(3.5);
        let space = reference_codespace(&model, 5);
        let sets = enumerate_transitions(&space, &model).unwrap();
        assert_eq!(sets.sensing.len(), 16);
        assert_eq!(sets.correction.len(), 2 * 6);
    }

    #[test]
    fn enumerate_axial_limit_reports_dark_states() {
        // without the rhombic term the eigenstates are bare |m> states and
        // the commutator only connects adjacent levels
        let d0 = QuditParams::reference(1.5).unwrap().d;
        let model = build_qudit_model(QuditParams {
            s: 1.5,
            b_t: 0.35,
            d: d0,
            e: 0.0,
            g: 2.0,
        })
        .unwrap();
        let supports = default_supports(&model).unwrap();
        let space = trivial_codespace(supports, 4);
        match enumerate_transitions(&space, &model) {
            Err(Error::Compile(msg)) => {
                assert!(msg.contains("insufficient"), "message: {msg}")
            }
            Ok(sets) => panic!("expected insufficient connectivity, got {sets:?}"),
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn grouping_complete_s32_is_latin_square() {
        let pairs = vec![(0, 1), (0, 2), (1, 3), (2, 3)];
        let groups = trotter_grouping(&pairs, 2).unwrap();
        assert_eq!(groups, vec![vec![(0, 1), (2, 3)], vec![(0, 2), (1, 3)]]);
    }

    #[test]
    fn grouping_single_pair() {
        let groups = trotter_grouping(&[(2, 5)], 4).unwrap();
        assert_eq!(groups, vec![vec![(2, 5)]]);
    }

    #[test]
    fn grouping_s72_complete() {
        let model = reference_model(3.5);
        let space = reference_codespace(&model, 5);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 4).unwrap();
        assert_eq!(groups.len(), 4);
        for g in &groups {
            assert_eq!(g.len(), 4);
            let mut seen = Vec::new();
            for &(a, b) in g {
                assert!(!seen.contains(&a) && !seen.contains(&b));
                seen.push(a);
                seen.push(b);
            }
        }
    }

    #[test]
    fn grouping_budget_overflow_lists_pairs() {
        // a 3-star needs 3 groups; a budget of 2 must fail naming the rest
        match trotter_grouping(&[(0, 1), (0, 3), (0, 5)], 2) {
            Err(Error::Compile(msg)) => assert!(msg.contains("(0, 5)"), "message: {msg}"),
            other => panic!("expected compile error, got {other:?}"),
        }
    }

    #[test]
    fn grouping_rejects_odd_cycles() {
        assert!(matches!(
            trotter_grouping(&[(0, 1), (1, 2), (0, 2)], 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn tones_reference_s32() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 2).unwrap();
        let schedule = tone_synthesis(&groups, &model, &space, 10e-3).unwrap();
        assert_eq!(schedule.tones().count(), 4);
        assert!(schedule.max_eta < 0.05, "max eta {}", schedule.max_eta);
        // reference tone keeps the requested amplitude
        assert_eq!(schedule.groups[0][0].amplitude_t, 10e-3);
        // tone frequencies are exactly the model gaps
        for tone in schedule.tones() {
            let (mu, nu) = tone.transition;
            assert_eq!(tone.omega, model.gap(mu, nu));
            assert!(tone.phi == 0.0 || tone.phi == PI);
        }
        // logical-block rates (per-tone rate / |u|) agree to rounding
        let comm = model.commutator_szd_sx();
        let gamma = units::gyromagnetic_ratio(2.0);
        let mut rates = Vec::new();
        for tone in schedule.tones() {
            let (mu, nu) = tone.transition;
            let rate =
                gamma * gamma * tone.amplitude_t * comm[(mu, nu)].norm() / tone.omega;
            rates.push(rate);
        }
        // rate_j / |u_j| = omega_l_per_tesla for every tone; recover |u_j|
        // from the rate ratios and verify consistency
        for rate in &rates {
            let u_mag = rate / schedule.omega_l_per_tesla;
            assert!(u_mag > 0.0 && u_mag <= 1.0 + 1e-12);
        }
        let max = rates.iter().cloned().fold(f64::MIN, f64::max);
        let min = rates.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max / min > 1.05,
            "generator matching should spread bare rates, got {rates:?}"
        );
    }

    #[test]
    fn tones_eta_guard() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 2).unwrap();
        match tone_synthesis(&groups, &model, &space, 1.0) {
            Err(Error::Compile(msg)) => assert!(msg.contains("reduce"), "message: {msg}"),
            other => panic!("expected compile error, got {other:?}"),
        }
    }

    #[test]
    fn logical_block_is_exact_sigma_x() {
        let model = reference_model(2.5);
        let space = reference_codespace(&model, 5);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 3).unwrap();
        let schedule = tone_synthesis(&groups, &model, &space, 1e-3).unwrap();
        let bx = 1e-6;
        let hams = schedule.effective_hamiltonians(&model, bx).unwrap();
        let d = model.dim();
        let mut h_total = ComplexMatrix::zeros(d, d);
        for h in &hams {
            h_total += h;
        }
        let logical = space.a.adjoint() * &h_total * &space.a;
        // the summed generator carries the raw (pre-interleaving) rate
        let omega_l = schedule.omega_l_per_tesla * bx;
        let n = d / 2;
        let mut expected = ComplexMatrix::zeros(d, d);
        for k in 0..n {
            expected[(k, n + k)] = cr(omega_l / 2.0);
            expected[(n + k, k)] = cr(omega_l / 2.0);
        }
        let dev = max_abs_diff(&logical, &expected);
        assert!(
            dev < 1e-10 * omega_l,
            "logical block deviates by {dev:.3e} (omega_l = {omega_l:.3e})"
        );
    }

    #[test]
    fn compiled_zero_angle_is_identity() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 2).unwrap();
        let schedule = tone_synthesis(&groups, &model, &space, 10e-3).unwrap();
        let compiled = compile_logical_rabi(&schedule, &model, 0.0, 8).unwrap();
        assert!(compiled.segments.is_empty());
        let u = compiled.unitary().unwrap();
        assert!(max_abs_diff(&u, &identity(4)) < 1e-14);
    }

    #[test]
    fn compiled_single_group_is_step_count_independent() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let groups = vec![vec![(0, 1), (2, 3)]];
        let schedule = tone_synthesis(&groups, &model, &space, 10e-3).unwrap();
        let a = compile_logical_rabi(&schedule, &model, PI, 1)
            .unwrap()
            .unitary()
            .unwrap();
        let b = compile_logical_rabi(&schedule, &model, PI, 33)
            .unwrap()
            .unitary()
            .unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-11);
    }

    fn ideal_rx(space: &CodeSpace, theta: f64) -> ComplexMatrix {
        let n = space.words_per_label();
        let rx = ComplexMatrix::from_row_slice(
            2,
            2,
            &[
                cr((theta / 2.0).cos()),
                Complex64::new(0.0, -(theta / 2.0).sin()),
                Complex64::new(0.0, -(theta / 2.0).sin()),
                cr((theta / 2.0).cos()),
            ],
        );
        &space.a * tensor(&rx, &identity(n)) * space.a.adjoint()
    }

    #[test]
    fn trotter_infidelity_converges_monotonically() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 2).unwrap();
        let schedule = tone_synthesis(&groups, &model, &space, 10e-3).unwrap();
        let ideal = ideal_rx(&space, PI);
        let mut last = f64::INFINITY;
        let mut final_infidelity = f64::INFINITY;
        for n_steps in [1usize, 4, 16, 64, 256] {
            let compiled = compile_logical_rabi(&schedule, &model, PI, n_steps).unwrap();
            let u = compiled.unitary().unwrap();
            let channel = unitary_superoperator(&u).unwrap();
            let infid = 1.0 - gate_fidelity(&channel, &ideal, &space).unwrap();
            assert!(
                infid < last,
                "infidelity should fall with step count: {infid:.3e} after {last:.3e}"
            );
            last = infid;
            final_infidelity = infid;
        }
        assert!(
            final_infidelity < 1e-4,
            "compiled pi rotation infidelity {final_infidelity:.3e}"
        );
    }

    #[test]
    fn compiled_channel_acts_identically_on_every_error_index() {
        let model = reference_model(2.5);
        let space = reference_codespace(&model, 5);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 3).unwrap();
        let schedule = tone_synthesis(&groups, &model, &space, 1e-3).unwrap();
        let compiled = compile_logical_rabi(&schedule, &model, PI, 2048).unwrap();
        let u = compiled.unitary().unwrap();
        let n = space.words_per_label();
        let restriction = |k: usize| -> ComplexMatrix {
            let mut r = ComplexMatrix::zeros(2, 2);
            for i in 0..2 {
                for j in 0..2 {
                    let wi = space.errorword(i, k);
                    let wj = space.errorword(j, k);
                    let mut acc = C_ZERO;
                    for a in 0..space.dim() {
                        for b in 0..space.dim() {
                            acc += wi[a].conj() * u[(a, b)] * wj[b];
                        }
                    }
                    r[(i, j)] = acc;
                }
            }
            r
        };
        let r0 = restriction(0);
        for k in 0..n {
            let rk = restriction(k);
            let overlap = (r0.adjoint() * &rk).trace() / cr(2.0);
            assert!(
                overlap.norm() >= 1.0 - 1e-6,
                "restriction {k} fidelity {:.9} below tolerance",
                overlap.norm()
            );
        }
    }

    #[test]
    fn fidelity_of_ideal_channel_is_one() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let ideal = ideal_rx(&space, PI / 3.0);
        let channel = unitary_superoperator(&ideal).unwrap();
        let fid = gate_fidelity(&channel, &ideal, &space).unwrap();
        assert!((fid - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_after_logical_dephasing_is_two_thirds() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let d = space.dim();
        let ideal = ideal_rx(&space, 0.9);
        let proj = |v: &DVector<Complex64>| {
            let mut p = ComplexMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    p[(i, j)] = v[i] * v[j].conj();
                }
            }
            p
        };
        let p0 = proj(&space.codewords[0]);
        let p1 = proj(&space.codewords[1]);
        let q = identity(d) - &p0 - &p1;
        let mut dephase = ComplexMatrix::zeros(d * d, d * d);
        for x in [&p0, &p1, &q] {
            dephase += tensor(&x.conjugate(), x);
        }
        let channel = unitary_superoperator(&ideal).unwrap() * dephase;
        let fid = gate_fidelity(&channel, &ideal, &space).unwrap();
        assert!((fid - 2.0 / 3.0).abs() < 1e-12, "fidelity {fid}");
    }

    #[test]
    fn synthesize_identity_gate() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let gate = synthesize_ft_gate(&identity(4), &space, &model, 100e-9).unwrap();
        assert!(max_abs(&gate.generator) < 1e-12);
        assert!(gate.pulses.is_empty());
        assert!(!gate.branch_warning);
    }

    #[test]
    fn synthesize_sigma_x_round_trip() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sx = ComplexMatrix::from_row_slice(
            2,
            2,
            &[C_ZERO, cr(1.0), cr(1.0), C_ZERO],
        );
        let u = tensor(&sx, &identity(2));
        let gate = synthesize_ft_gate(&u, &space, &model, 100e-9).unwrap();
        // the exp-check invariant is enforced internally; verify the branch
        // handling and Hermiticity here
        assert!(gate.branch_warning, "sigma_x has eigenvalues on the cut");
        assert!(max_abs_diff(&gate.generator, &gate.generator.adjoint()) < 1e-12);
        let realized = matrix_exponential(
            &gate.generator.map(|z| z * Complex64::new(0.0, -1.0)),
        )
        .unwrap();
        let target = &space.a * &u * space.a.adjoint();
        assert!(max_abs_diff(&realized, &target) < 1e-10);
    }

    #[test]
    fn synthesize_rejects_nonunitary() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let mut m = identity(4);
        m[(0, 0)] = cr(1.5);
        assert!(matches!(
            synthesize_ft_gate(&m, &space, &model, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn schedule_text_round_trip() {
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sets = enumerate_transitions(&space, &model).unwrap();
        let groups = trotter_grouping(&sets.sensing, 2).unwrap();
        let schedule = tone_synthesis(&groups, &model, &space, 10e-3).unwrap();
        let text = schedule.to_text();
        let parsed = PulseSchedule::from_text(&text).unwrap();
        assert_eq!(parsed.n_steps, schedule.n_steps);
        assert_eq!(parsed.theta.to_bits(), schedule.theta.to_bits());
        assert_eq!(parsed.groups.len(), schedule.groups.len());
        for (ga, gb) in schedule.groups.iter().zip(parsed.groups.iter()) {
            assert_eq!(ga.len(), gb.len());
            for (ta, tb) in ga.iter().zip(gb.iter()) {
                assert_eq!(ta.transition, tb.transition);
                assert_eq!(ta.amplitude_t.to_bits(), tb.amplitude_t.to_bits());
                assert_eq!(ta.phi.to_bits(), tb.phi.to_bits());
                assert!((ta.omega - tb.omega).abs() < 1e-6 * ta.omega);
            }
        }
        assert!(matches!(
            PulseSchedule::from_text("nonsense"),
            Err(Error::DataCorruption(_))
        ));
    }

    #[test]
    fn partial_trace_consistency_for_composite_gates() {
        // sanity: a gate on qudit ⊗ ancilla with identity ancilla action
        // reduces to the qudit unitary under partial trace of the maximally
        // mixed ancilla
        let model = reference_model(1.5);
        let space = reference_codespace(&model, 7);
        let sx = ComplexMatrix::from_row_slice(2, 2, &[C_ZERO, cr(1.0), cr(1.0), C_ZERO]);
        let u = tensor(&tensor(&sx, &identity(2)), &identity(2));
        let gate = synthesize_ft_gate(&u, &space, &model, 0.0).unwrap();
        let phys = matrix_exponential(
            &gate.generator.map(|z| z * Complex64::new(0.0, -1.0)),
        )
        .unwrap();
        let rho = ComplexMatrix::identity(8, 8).map(|z| z / cr(8.0));
        let evolved = &phys * &rho * phys.adjoint();
        let reduced = partial_trace(&evolved, (4, 2), 0).unwrap();
        let expected = {
            let uq = &space.a * tensor(&sx, &identity(2)) * space.a.adjoint();
            let r = ComplexMatrix::identity(4, 4).map(|z| z / cr(4.0));
            &uq * r * uq.adjoint()
        };
        assert!(max_abs_diff(&reduced, &expected) < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_grouping_covers_exactly_once(mask in 1u16..(1 << 9)) {
            // random subset of the complete 3x3 bipartite graph between
            // {0,2,4} and {1,3,5}
            let mut pairs = Vec::new();
            for i in 0..9usize {
                if mask & (1 << i) != 0 {
                    let (a, b): (usize, usize) = ([0, 2, 4][i / 3], [1, 3, 5][i % 3]);
                    pairs.push((a.min(b), a.max(b)));
                }
            }
            prop_assume!(!pairs.is_empty());
            let groups = trotter_grouping(&pairs, 3).unwrap();
            let mut covered: Vec<(usize, usize)> = Vec::new();
            for g in &groups {
                let mut used = Vec::new();
                for &(a, b) in g {
                    prop_assert!(!used.contains(&a) && !used.contains(&b));
                    used.push(a);
                    used.push(b);
                    covered.push((a, b));
                }
            }
            covered.sort_unstable();
            let mut expected = pairs.clone();
            expected.sort_unstable();
            prop_assert_eq!(covered, expected);
        }
    }
}
