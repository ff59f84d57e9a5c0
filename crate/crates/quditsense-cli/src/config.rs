//! Experiment configuration: INI-style parsing, validation, defaults, and
//! the mapping onto the library's protocol configuration.
//!
//! The file format is UTF-8 `key = value` lines grouped under `[section]`
//! headers, with `#` starting a comment anywhere on a line. Unknown
//! sections, unknown keys, and duplicate keys are rejected with the
//! offending line number.

use std::collections::HashSet;

use quditsense::model::{units, QubitParams, QuditParams};
use quditsense::protocol::ProtocolConfig;

use crate::error::{CliError, Result};

/// Metric driving the correction-interval sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMetricKind {
    /// Logical damping rate at the configured signal field.
    Damping,
    /// Optimal detectable field from a full calibration per interval.
    BxMin,
}

/// Fully resolved experiment description (all defaults filled).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // [system]
    pub spin: f64,
    pub b_tesla: f64,
    pub d_invcm: f64,
    pub e_invcm: f64,
    pub g: f64,
    // [noise]
    pub t2_us: f64,
    pub t1_s: Option<f64>,
    // [drive]
    pub b_ref_mt: f64,
    pub b1z_mt: f64,
    // [protocol]
    pub bx_ut: f64,
    pub delta_ns: f64,
    pub t_cycle_ns: f64,
    pub t_m_us: f64,
    pub t_max_s: f64,
    pub sample_dt_ns: f64,
    pub trotter_steps: usize,
    pub qec: bool,
    pub restarts: usize,
    pub seed: u64,
    // [sweep]
    pub bx_min_ut: f64,
    pub bx_max_ut: f64,
    pub bx_count: usize,
    pub delta_min_ns: f64,
    pub delta_max_ns: f64,
    pub delta_count: usize,
    pub delta_metric: DeltaMetricKind,
    // [output]
    pub directory: String,
    pub plot: bool,
}

const SECTIONS: [(&str, &[&str]); 6] = [
    ("system", &["spin", "B_tesla", "D_invcm", "E_invcm", "g"]),
    ("noise", &["t2_us", "t1_s"]),
    ("drive", &["b_ref_mT", "b1z_mT"]),
    (
        "protocol",
        &[
            "bx_uT",
            "delta_ns",
            "t_cycle_ns",
            "t_m_us",
            "t_max_s",
            "sample_dt_ns",
            "trotter_steps",
            "qec",
            "restarts",
            "seed",
        ],
    ),
    (
        "sweep",
        &[
            "bx_min_uT",
            "bx_max_uT",
            "bx_count",
            "delta_min_ns",
            "delta_max_ns",
            "delta_count",
            "delta_metric",
        ],
    ),
    ("output", &["directory", "plot"]),
];

struct Entry {
    section: &'static str,
    key: &'static str,
    value: String,
    line: usize,
}

fn cerr(msg: String) -> CliError {
    CliError::Config(msg)
}

fn parse_f64(value: &str, key: &str, line: usize) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| cerr(format!("line {line}: malformed number {value:?} for {key}")))
}

fn parse_usize(value: &str, key: &str, line: usize) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| cerr(format!("line {line}: malformed integer {value:?} for {key}")))
}

fn parse_u64(value: &str, key: &str, line: usize) -> Result<u64> {
    value
        .parse::<u64>()
        .map_err(|_| cerr(format!("line {line}: malformed integer {value:?} for {key}")))
}

fn parse_bool(value: &str, key: &str, line: usize) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(cerr(format!(
            "line {line}: {key} must be on/off (or true/false), got {value:?}"
        ))),
    }
}

/// Half-integer check: `2 * spin` must be an odd positive integer.
fn validate_spin(s: f64) -> std::result::Result<(), String> {
    if !s.is_finite() || s <= 0.0 {
        return Err(format!("spin must be a positive half-integer, got {s}"));
    }
    let doubled = 2.0 * s;
    if (doubled - doubled.round()).abs() > 1e-9 || (doubled.round() as i64) % 2 != 1 {
        return Err(format!(
            "spin must be a half-integer (1/2, 3/2, 5/2, ...), got {s}"
        ));
    }
    Ok(())
}

/// Zero-field-splitting scale from the reference spin 3/2 to `s`.
fn zfs_scale(s: f64) -> f64 {
    3.0 / (s * (2.0 * s - 1.0))
}

impl ExperimentConfig {
    /// The fully defaulted configuration at a given spin.
    pub fn defaults(spin: f64) -> Self {
        let qubit = spin == 0.5;
        let (d_invcm, e_invcm) = if qubit {
            (0.0, 0.0)
        } else {
            (-0.81 * zfs_scale(spin), -0.24 * zfs_scale(spin))
        };
        ExperimentConfig {
            spin,
            b_tesla: 0.35,
            d_invcm,
            e_invcm,
            g: 2.0,
            t2_us: 50.0,
            t1_s: None,
            b_ref_mt: if qubit || spin < 2.0 { 10.0 } else { 1.0 },
            b1z_mt: 10.0,
            bx_ut: 1.0,
            delta_ns: 500.0,
            t_cycle_ns: 100.0,
            t_m_us: 1.0,
            t_max_s: if qubit { 2e-3 } else { 20e-3 },
            sample_dt_ns: 125.0,
            trotter_steps: 64,
            qec: !qubit,
            restarts: 32,
            seed: 7,
            bx_min_ut: 3.0,
            bx_max_ut: 100.0,
            bx_count: 16,
            delta_min_ns: 100.0,
            delta_max_ns: 2000.0,
            delta_count: 7,
            delta_metric: DeltaMetricKind::Damping,
            directory: "out".to_string(),
            plot: true,
        }
    }

    /// Parse a configuration file body (one pass for syntax, one for values).
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        let mut seen: HashSet<(&str, &str)> = HashSet::new();
        let mut section: Option<&'static str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let body = body.trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cerr(format!("line {line}: unterminated section header")))?
                    .trim();
                let known = SECTIONS.iter().find(|(s, _)| *s == name);
                match known {
                    Some((s, _)) => section = Some(s),
                    None => {
                        return Err(cerr(format!("line {line}: unknown section [{name}]")));
                    }
                }
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| cerr(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(cerr(format!("line {line}: empty value for {key}")));
            }
            let section = section
                .ok_or_else(|| cerr(format!("line {line}: key {key} before any [section]")))?;
            let keys = SECTIONS.iter().find(|(s, _)| *s == section).unwrap().1;
            let key = *keys.iter().find(|k| **k == key).ok_or_else(|| {
                cerr(format!("line {line}: unknown key {key} in section [{section}]"))
            })?;
            if !seen.insert((section, key)) {
                return Err(cerr(format!(
                    "line {line}: duplicate key {key} in section [{section}]"
                )));
            }
            entries.push(Entry {
                section,
                key,
                value: value.to_string(),
                line,
            });
        }

        // Resolve the spin first: most defaults depend on it.
        let mut spin = 0.5;
        let mut spin_line = 0;
        for e in &entries {
            if e.section == "system" && e.key == "spin" {
                spin = parse_f64(&e.value, "spin", e.line)?;
                spin_line = e.line;
            }
        }
        validate_spin(spin).map_err(|m| {
            if spin_line > 0 {
                cerr(format!("line {spin_line}: {m}"))
            } else {
                cerr(m)
            }
        })?;

        let mut cfg = ExperimentConfig::defaults(spin);
        for e in &entries {
            cfg.apply(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, e: &Entry) -> Result<()> {
        let (key, value, line) = (e.key, e.value.as_str(), e.line);
        match (e.section, key) {
            ("system", "spin") => {} // already resolved
            ("system", "B_tesla") => self.b_tesla = parse_f64(value, key, line)?,
            ("system", "D_invcm") | ("system", "E_invcm") => {
                if self.spin == 0.5 {
                    return Err(cerr(format!(
                        "line {line}: zero-field splitting ({key}) requires a qudit (spin >= 3/2)"
                    )));
                }
                let v = parse_f64(value, key, line)?;
                if key == "D_invcm" {
                    self.d_invcm = v;
                } else {
                    self.e_invcm = v;
                }
            }
            ("system", "g") => self.g = parse_f64(value, key, line)?,
            ("noise", "t2_us") => self.t2_us = parse_f64(value, key, line)?,
            ("noise", "t1_s") => self.t1_s = Some(parse_f64(value, key, line)?),
            ("drive", "b_ref_mT") => self.b_ref_mt = parse_f64(value, key, line)?,
            ("drive", "b1z_mT") => self.b1z_mt = parse_f64(value, key, line)?,
            ("protocol", "bx_uT") => self.bx_ut = parse_f64(value, key, line)?,
            ("protocol", "delta_ns") => self.delta_ns = parse_f64(value, key, line)?,
            ("protocol", "t_cycle_ns") => self.t_cycle_ns = parse_f64(value, key, line)?,
            ("protocol", "t_m_us") => self.t_m_us = parse_f64(value, key, line)?,
            ("protocol", "t_max_s") => self.t_max_s = parse_f64(value, key, line)?,
            ("protocol", "sample_dt_ns") => self.sample_dt_ns = parse_f64(value, key, line)?,
            ("protocol", "trotter_steps") => self.trotter_steps = parse_usize(value, key, line)?,
            ("protocol", "qec") => self.qec = parse_bool(value, key, line)?,
            ("protocol", "restarts") => self.restarts = parse_usize(value, key, line)?,
            ("protocol", "seed") => self.seed = parse_u64(value, key, line)?,
            ("sweep", "bx_min_uT") => self.bx_min_ut = parse_f64(value, key, line)?,
            ("sweep", "bx_max_uT") => self.bx_max_ut = parse_f64(value, key, line)?,
            ("sweep", "bx_count") => self.bx_count = parse_usize(value, key, line)?,
            ("sweep", "delta_min_ns") => self.delta_min_ns = parse_f64(value, key, line)?,
            ("sweep", "delta_max_ns") => self.delta_max_ns = parse_f64(value, key, line)?,
            ("sweep", "delta_count") => self.delta_count = parse_usize(value, key, line)?,
            ("sweep", "delta_metric") => {
                self.delta_metric = match value {
                    "damping" => DeltaMetricKind::Damping,
                    "bxmin" => DeltaMetricKind::BxMin,
                    _ => {
                        return Err(cerr(format!(
                            "line {line}: delta_metric must be damping or bxmin, got {value:?}"
                        )));
                    }
                }
            }
            ("output", "directory") => self.directory = value.to_string(),
            ("output", "plot") => self.plot = parse_bool(value, key, line)?,
            _ => unreachable!("key table and apply table out of sync: {key}"),
        }
        Ok(())
    }

    /// Cross-field invariants (file-order independent).
    pub fn validate(&self) -> Result<()> {
        validate_spin(self.spin).map_err(cerr)?;
        let positive: [(&str, f64); 9] = [
            ("B_tesla", self.b_tesla),
            ("g", self.g),
            ("t2_us", self.t2_us),
            ("b_ref_mT", self.b_ref_mt),
            ("b1z_mT", self.b1z_mt),
            ("delta_ns", self.delta_ns),
            ("t_max_s", self.t_max_s),
            ("sample_dt_ns", self.sample_dt_ns),
            ("bx_min_uT", self.bx_min_ut),
        ];
        for (name, v) in positive {
            // t2_us is the only physically infinite quantity; everything
            // else must be a finite positive number.
            let finite_ok = v.is_finite() || (name == "t2_us" && v == f64::INFINITY);
            if !finite_ok || v <= 0.0 {
                return Err(cerr(format!("{name} must be positive, got {v:e}")));
            }
        }
        for (name, v) in [
            ("t_cycle_ns", self.t_cycle_ns),
            ("t_m_us", self.t_m_us),
            ("bx_uT", self.bx_ut),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(cerr(format!("{name} must be non-negative, got {v:e}")));
            }
        }
        if let Some(t1) = self.t1_s {
            if !(t1.is_finite() && t1 > 0.0) {
                return Err(cerr(format!("t1_s must be positive, got {t1:e}")));
            }
        }
        for (name, v) in [("D_invcm", self.d_invcm), ("E_invcm", self.e_invcm)] {
            if !v.is_finite() {
                return Err(cerr(format!("{name} must be finite, got {v:e}")));
            }
        }
        if !(self.bx_max_ut.is_finite() && self.bx_max_ut > self.bx_min_ut) {
            return Err(cerr(format!(
                "field sweep needs bx_min_uT < bx_max_uT, got {:e} .. {:e}",
                self.bx_min_ut, self.bx_max_ut
            )));
        }
        if !(self.delta_min_ns > 0.0
            && self.delta_max_ns.is_finite()
            && self.delta_max_ns > self.delta_min_ns)
        {
            return Err(cerr(format!(
                "interval sweep needs 0 < delta_min_ns < delta_max_ns, got {:e} .. {:e}",
                self.delta_min_ns, self.delta_max_ns
            )));
        }
        for (name, v) in [
            ("bx_count", self.bx_count),
            ("delta_count", self.delta_count),
        ] {
            if v < 2 {
                return Err(cerr(format!("{name} must be at least 2, got {v}")));
            }
        }
        if self.trotter_steps == 0 {
            return Err(cerr("trotter_steps must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(cerr("restarts must be at least 1".into()));
        }
        if self.directory.is_empty() {
            return Err(cerr("output directory must not be empty".into()));
        }
        // Everything the protocol machinery checks is a configuration
        // concern at this stage (e.g. sample_dt <= delta / 4).
        self.to_protocol_config()
            .map_err(|e| cerr(e.to_string()))?;
        Ok(())
    }

    /// True for the two-level baseline configuration.
    pub fn is_qubit(&self) -> bool {
        self.spin == 0.5
    }

    /// Map onto the library protocol configuration (system parameters
    /// threaded through the override slots).
    pub fn to_protocol_config(&self) -> quditsense::Result<ProtocolConfig> {
        let bx_t = self.bx_ut * 1e-6;
        let mut pc = if self.is_qubit() {
            ProtocolConfig::qubit_baseline(bx_t)
        } else {
            ProtocolConfig::logical(self.spin, bx_t)
        };
        pc.t2_s = self.t2_us * 1e-6;
        pc.t1_s = self.t1_s;
        pc.b_ref_t = self.b_ref_mt * 1e-3;
        pc.b1z_t = self.b1z_mt * 1e-3;
        pc.delta_s = self.delta_ns * 1e-9;
        pc.t_cycle_s = self.t_cycle_ns * 1e-9;
        pc.t_m_s = self.t_m_us * 1e-6;
        pc.t_max_s = self.t_max_s;
        pc.sample_dt_s = self.sample_dt_ns * 1e-9;
        pc.trotter_steps = self.trotter_steps;
        pc.qec_enabled = self.qec;
        pc.restarts = self.restarts;
        pc.seed = self.seed;
        if self.is_qubit() {
            let gap = units::zeeman_gap(self.g, self.b_tesla);
            pc.qubit_params = Some(QubitParams {
                delta: gap,
                g: self.g,
                b1z_t: pc.b1z_t,
                omega_z: gap,
                phi_z: 0.0,
                bx_t,
                transverse: None,
            });
        } else {
            pc.qudit_params = Some(QuditParams {
                s: self.spin,
                b_t: self.b_tesla,
                d: units::convert(self.d_invcm, units::Unit::InvCm, units::Unit::RadPerSec),
                e: units::convert(self.e_invcm, units::Unit::InvCm, units::Unit::RadPerSec),
                g: self.g,
            });
        }
        pc.validate()?;
        Ok(pc)
    }

    /// Log-spaced signal-field grid (tesla) from the sweep section.
    pub fn bx_grid(&self) -> Vec<f64> {
        log_grid(self.bx_min_ut * 1e-6, self.bx_max_ut * 1e-6, self.bx_count)
    }

    /// Log-spaced correction-interval grid (seconds) from the sweep section.
    pub fn delta_grid(&self) -> Vec<f64> {
        log_grid(
            self.delta_min_ns * 1e-9,
            self.delta_max_ns * 1e-9,
            self.delta_count,
        )
    }

    /// Serialize with every value resolved; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let f = |x: f64| format!("{x:?}");
        let b = |x: bool| if x { "on" } else { "off" };
        let mut out = String::new();
        out.push_str("# effective configuration (all defaults resolved)\n");
        out.push_str("[system]\n");
        out.push_str(&format!("spin = {}\n", f(self.spin)));
        out.push_str(&format!("B_tesla = {}\n", f(self.b_tesla)));
        if !self.is_qubit() {
            out.push_str(&format!("D_invcm = {}\n", f(self.d_invcm)));
            out.push_str(&format!("E_invcm = {}\n", f(self.e_invcm)));
        }
        out.push_str(&format!("g = {}\n", f(self.g)));
        out.push_str("\n[noise]\n");
        out.push_str(&format!("t2_us = {}\n", f(self.t2_us)));
        if let Some(t1) = self.t1_s {
            out.push_str(&format!("t1_s = {}\n", f(t1)));
        }
        out.push_str("\n[drive]\n");
        out.push_str(&format!("b_ref_mT = {}\n", f(self.b_ref_mt)));
        out.push_str(&format!("b1z_mT = {}\n", f(self.b1z_mt)));
        out.push_str("\n[protocol]\n");
        out.push_str(&format!("bx_uT = {}\n", f(self.bx_ut)));
        out.push_str(&format!("delta_ns = {}\n", f(self.delta_ns)));
        out.push_str(&format!("t_cycle_ns = {}\n", f(self.t_cycle_ns)));
        out.push_str(&format!("t_m_us = {}\n", f(self.t_m_us)));
        out.push_str(&format!("t_max_s = {}\n", f(self.t_max_s)));
        out.push_str(&format!("sample_dt_ns = {}\n", f(self.sample_dt_ns)));
        out.push_str(&format!("trotter_steps = {}\n", self.trotter_steps));
        out.push_str(&format!("qec = {}\n", b(self.qec)));
        out.push_str(&format!("restarts = {}\n", self.restarts));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str("\n[sweep]\n");
        out.push_str(&format!("bx_min_uT = {}\n", f(self.bx_min_ut)));
        out.push_str(&format!("bx_max_uT = {}\n", f(self.bx_max_ut)));
        out.push_str(&format!("bx_count = {}\n", self.bx_count));
        out.push_str(&format!("delta_min_ns = {}\n", f(self.delta_min_ns)));
        out.push_str(&format!("delta_max_ns = {}\n", f(self.delta_max_ns)));
        out.push_str(&format!("delta_count = {}\n", self.delta_count));
        out.push_str(&format!(
            "delta_metric = {}\n",
            match self.delta_metric {
                DeltaMetricKind::Damping => "damping",
                DeltaMetricKind::BxMin => "bxmin",
            }
        ));
        out.push_str("\n[output]\n");
        out.push_str(&format!("directory = {}\n", self.directory));
        out.push_str(&format!("plot = {}\n", b(self.plot)));
        out
    }
}

/// Geometric grid from `lo` to `hi` inclusive with `n >= 2` points.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let ratio = (hi / lo).ln();
    (0..n)
        .map(|i| lo * (ratio * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_exactly() {
        for spin in [0.5, 1.5, 2.5, 3.5] {
            let cfg = ExperimentConfig::defaults(spin);
            let text = cfg.serialize();
            let back = ExperimentConfig::parse(&text).expect("reparse");
            assert_eq!(cfg, back);
            assert_eq!(text, back.serialize());
        }
    }

    #[test]
    fn missing_noise_section_defaults_to_50_us() {
        let cfg = ExperimentConfig::parse("[system]\nspin = 1.5\n").expect("parse");
        assert_eq!(cfg.t2_us, 50.0);
        assert!(cfg.t1_s.is_none());
    }

    #[test]
    fn integer_spin_is_rejected() {
        let err = ExperimentConfig::parse("[system]\nspin = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("half-integer"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected_with_line_number() {
        let err =
            ExperimentConfig::parse("[system]\nspin = 0.5\nfrequency = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("frequency"), "{msg}");
    }

    #[test]
    fn unknown_section_rejected() {
        let err = ExperimentConfig::parse("[systems]\nspin = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let err =
            ExperimentConfig::parse("[noise]\nt2_us = 50\nt2_us = 60\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# header\n[noise]\n  t2_us = 25 # trailing\n\n[output]\nplot = off\n";
        let cfg = ExperimentConfig::parse(text).expect("parse");
        assert_eq!(cfg.t2_us, 25.0);
        assert!(!cfg.plot);
    }

    #[test]
    fn zfs_with_qubit_spin_rejected() {
        let err =
            ExperimentConfig::parse("[system]\nspin = 0.5\nD_invcm = -0.81\n").unwrap_err();
        assert!(err.to_string().contains("spin >= 3/2"), "{err}");
    }

    #[test]
    fn sample_interval_invariant_surfaces_as_config_error() {
        let err = ExperimentConfig::parse("[protocol]\nsample_dt_ns = 200\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{err}");
        assert!(err.to_string().contains("sample_dt"), "{err}");
    }

    #[test]
    fn qudit_defaults_rescale_zfs() {
        let cfg = ExperimentConfig::parse("[system]\nspin = 2.5\n").expect("parse");
        let scale = 3.0 / (2.5 * 4.0);
        assert!((cfg.d_invcm + 0.81 * scale).abs() < 1e-15);
        assert!((cfg.e_invcm + 0.24 * scale).abs() < 1e-15);
        let pc = cfg.to_protocol_config().expect("pc");
        let params = pc.qudit_params.expect("params");
        let reference = QuditParams::reference(2.5).expect("reference");
        assert!((params.d - reference.d).abs() <= 1e-9 * reference.d.abs());
        assert!((params.e - reference.e).abs() <= 1e-9 * reference.e.abs());
    }

    #[test]
    fn grid_helpers_are_log_spaced() {
        let g = log_grid(1e-6, 1e-4, 9);
        assert_eq!(g.len(), 9);
        assert!((g[0] - 1e-6).abs() < 1e-18);
        assert!((g[8] - 1e-4).abs() < 1e-16);
        let r0 = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-12);
        }
    }
}
