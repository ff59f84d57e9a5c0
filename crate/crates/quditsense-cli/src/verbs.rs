//! The nine command verbs: each builds its artifacts in memory and writes
//! them (with the manifest) only after the whole computation succeeded.

use std::path::Path;

use quditsense::code::{kl_residual, load_reference_tables, tomography_kraus};
use quditsense::dynamics::{
    default_carrier_step, propagate_piecewise, qubit_dephasing_dissipator, integrate_qubit_lab,
    Liouvillian, NoiseModel, Segment, TimeGrid,
};
use quditsense::model::{
    build_qubit_model, build_qudit_model, rotating_frame_qubit, QuditParams,
};
use quditsense::protocol::{
    calibrate, delta_sweep, fmt_field, prepare_logical_assets, run_protocol, run_qubit,
    sensitivity_curve, DeltaMetric, ProtocolConfig, RunResult,
};
use quditsense::spinops::ComplexMatrix;

use crate::config::{DeltaMetricKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::output::OutputSet;
use crate::svg::{line_chart, Series};

pub const VERBS: [&str; 9] = [
    "simulate-qubit",
    "optimize-code",
    "compile-pulses",
    "run-protocol",
    "calibrate",
    "sensitivity",
    "sweep-delta",
    "validate-frames",
    "tables-check",
];

/// Dispatch a verb; outputs land in `dir`.
pub fn run(verb: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    match verb {
        "simulate-qubit" => simulate_qubit(cfg, dir),
        "optimize-code" => optimize_code(cfg, dir),
        "compile-pulses" => compile_pulses(cfg, dir),
        "run-protocol" => protocol_run(cfg, dir),
        "calibrate" => calibrate_verb(cfg, dir),
        "sensitivity" => sensitivity_verb(cfg, dir),
        "sweep-delta" => sweep_delta(cfg, dir),
        "validate-frames" => validate_frames(cfg, dir),
        "tables-check" => tables_check(cfg, dir),
        _ => Err(CliError::Config(format!(
            "unknown command {verb:?}; expected one of: {}",
            VERBS.join(", ")
        ))),
    }
}

fn require_qubit(cfg: &ExperimentConfig, verb: &str) -> Result<()> {
    if !cfg.is_qubit() {
        return Err(CliError::Config(format!(
            "{verb} requires the two-level baseline (spin = 0.5), got spin = {}",
            cfg.spin
        )));
    }
    Ok(())
}

fn require_qudit(cfg: &ExperimentConfig, verb: &str) -> Result<()> {
    if cfg.is_qubit() {
        return Err(CliError::Config(format!(
            "{verb} requires a qudit (spin >= 1.5), got spin = {}",
            cfg.spin
        )));
    }
    Ok(())
}

fn protocol_config(cfg: &ExperimentConfig) -> Result<ProtocolConfig> {
    // Parsing already validated; a failure here is a programming error in
    // the mapping, but surface it as a configuration problem regardless.
    cfg.to_protocol_config()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Thin a dense trace to at most `cap` points for plotting (the CSV keeps
/// every sample; the chart does not need them). The final point is kept.
fn decimate(xs: &[f64], ys: &[f64], cap: usize) -> Vec<(f64, f64)> {
    let n = xs.len().min(ys.len());
    let stride = n.div_ceil(cap).max(1);
    let mut pts: Vec<(f64, f64)> = (0..n)
        .step_by(stride)
        .map(|i| (xs[i], ys[i]))
        .collect();
    if n > 0 && !(n - 1).is_multiple_of(stride) {
        pts.push((xs[n - 1], ys[n - 1]));
    }
    pts
}

fn population_plot(result: &RunResult, title: &str) -> String {
    let t = &result.trace.times;
    let series = vec![
        Series {
            label: "P0".into(),
            points: decimate(t, &result.trace.populations[0], 2000),
        },
        Series {
            label: "P1".into(),
            points: decimate(t, &result.trace.populations[1], 2000),
        },
    ];
    line_chart(title, "sensing time (s)", "population", &series, false, false)
}

fn run_summary(result: &RunResult) -> String {
    let mut text = String::new();
    match result.t_cross_s {
        Some(t) => text.push_str(&format!("t_cross_s = {}\n", fmt_field(t))),
        None => text.push_str("t_cross_s = none\n"),
    }
    text.push_str(&format!("windows = {}\n", result.windows));
    text.push_str(&format!("qec_cycles = {}\n", result.qec_cycles));
    let last = result.trace.times.len() - 1;
    text.push_str(&format!(
        "final_t_s = {}\nfinal_p0 = {}\nfinal_p1 = {}\nfinal_leakage = {}\n",
        fmt_field(result.trace.times[last]),
        fmt_field(result.trace.populations[0][last]),
        fmt_field(result.trace.populations[1][last]),
        fmt_field(result.leakage(last)),
    ));
    text
}

fn simulate_qubit(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    require_qubit(cfg, "simulate-qubit")?;
    let pc = protocol_config(cfg)?;
    let result = run_qubit(&pc)?;
    let mut out = OutputSet::new("simulate-qubit", cfg);
    out.add("run_qubit.csv", result.to_csv());
    out.add("run_summary.txt", run_summary(&result));
    if cfg.plot {
        out.add(
            "run_qubit.svg",
            population_plot(&result, "two-level Rabi populations"),
        );
    }
    out.write(dir)
}

fn optimize_code(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    require_qudit(cfg, "optimize-code")?;
    let pc = protocol_config(cfg)?;
    let assets = prepare_logical_assets(&pc)?;
    let space = &assets.codespace;
    let mut summary = String::new();
    summary.push_str(&format!("spin = {:?}\n", space.s));
    summary.push_str(&format!("dimension = {}\n", space.dim()));
    summary.push_str(&format!("support_0 = {:?}\n", space.supports[0]));
    summary.push_str(&format!("support_1 = {:?}\n", space.supports[1]));
    summary.push_str(&format!("kl_residual = {}\n", fmt_field(space.kl_residual)));
    summary.push_str(&format!("seed = {}\n", space.seed));
    let mut out = OutputSet::new("optimize-code", cfg);
    out.add("codespace.txt", space.to_text());
    out.add("code_summary.txt", summary);
    out.write(dir)
}

fn compile_pulses(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    require_qudit(cfg, "compile-pulses")?;
    let pc = protocol_config(cfg)?;
    let assets = prepare_logical_assets(&pc)?;
    let schedule = &assets.schedule;
    let mut summary = String::new();
    summary.push_str(&format!("groups = {}\n", schedule.groups.len()));
    summary.push_str(&format!(
        "tones = {}\n",
        schedule.groups.iter().map(|g| g.len()).sum::<usize>()
    ));
    summary.push_str(&format!("n_steps = {}\n", schedule.n_steps));
    summary.push_str(&format!("theta_rad = {}\n", fmt_field(schedule.theta)));
    summary.push_str(&format!(
        "omega_l_per_tesla = {}\n",
        fmt_field(schedule.omega_l_per_tesla)
    ));
    summary.push_str(&format!(
        "omega_logical_at_bx = {}\n",
        fmt_field(schedule.omega_logical(pc.bx_t))
    ));
    summary.push_str(&format!("tau_ref_s = {}\n", fmt_field(schedule.tau_ref)));
    summary.push_str(&format!("max_eta = {}\n", fmt_field(schedule.max_eta)));
    let mut out = OutputSet::new("compile-pulses", cfg);
    out.add("codespace.txt", assets.codespace.to_text());
    out.add("schedule.txt", schedule.to_text());
    out.add("compile_summary.txt", summary);
    out.write(dir)
}

fn protocol_run(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let pc = protocol_config(cfg)?;
    let result = run_protocol(&pc)?;
    let mut out = OutputSet::new("run-protocol", cfg);
    out.add("run_protocol.csv", result.to_csv());
    out.add("run_summary.txt", run_summary(&result));
    if cfg.plot {
        let title = if cfg.is_qubit() {
            "two-level Rabi populations"
        } else {
            "logical Rabi populations"
        };
        out.add("run_protocol.svg", population_plot(&result, title));
    }
    out.write(dir)
}

fn checked_bx_grid(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    if cfg.bx_count < 8 {
        return Err(CliError::Config(format!(
            "calibration needs bx_count >= 8, got {}",
            cfg.bx_count
        )));
    }
    Ok(cfg.bx_grid())
}

fn calibrate_verb(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let pc = protocol_config(cfg)?;
    let grid = checked_bx_grid(cfg)?;
    let cal = calibrate(&pc, &grid)?;
    let mut out = OutputSet::new("calibrate", cfg);
    out.add("calibration.csv", cal.to_csv());
    if cfg.plot {
        let series = vec![Series {
            label: "t_cross".into(),
            points: cal.samples.iter().map(|s| (s.bx_t, s.t_cross_s)).collect(),
        }];
        out.add(
            "calibration.svg",
            line_chart(
                "crossing time vs signal field",
                "B_x (T)",
                "t_cross (s)",
                &series,
                true,
                true,
            ),
        );
    }
    out.write(dir)
}

fn sensitivity_verb(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let pc = protocol_config(cfg)?;
    let grid = checked_bx_grid(cfg)?;
    let cal = calibrate(&pc, &grid)?;
    let sens = sensitivity_curve(&cal)?;
    let mut summary = String::new();
    summary.push_str(&format!("bx_min_T = {}\n", fmt_field(sens.bx_min_t)));
    summary.push_str(&format!("eta_min = {}\n", fmt_field(sens.eta_min)));
    summary.push_str(&format!("boundary = {}\n", sens.boundary));
    let mut out = OutputSet::new("sensitivity", cfg);
    out.add("calibration.csv", cal.to_csv());
    out.add("sensitivity.csv", sens.to_csv());
    out.add("sensitivity_summary.txt", summary);
    if cfg.plot {
        let series = vec![Series {
            label: "eta".into(),
            points: sens.points.iter().map(|p| (p.bx_t, p.eta_rel)).collect(),
        }];
        out.add(
            "sensitivity.svg",
            line_chart(
                "relative sensitivity vs signal field",
                "B_x (T)",
                "eta (rel.)",
                &series,
                true,
                true,
            ),
        );
    }
    out.write(dir)
}

fn sweep_delta(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    require_qudit(cfg, "sweep-delta")?;
    let pc = protocol_config(cfg)?;
    if cfg.delta_count < 3 {
        return Err(CliError::Config(format!(
            "interval sweep needs delta_count >= 3, got {}",
            cfg.delta_count
        )));
    }
    let (metric, metric_name) = match cfg.delta_metric {
        DeltaMetricKind::Damping => (DeltaMetric::DampingRate, "damping_rate_per_s"),
        DeltaMetricKind::BxMin => (
            DeltaMetric::BxMin {
                grid: checked_bx_grid(cfg)?,
            },
            "bx_min_T",
        ),
    };
    let sweep = delta_sweep(&pc, &cfg.delta_grid(), &metric)?;
    let mut summary = String::new();
    summary.push_str(&format!("metric = {metric_name}\n"));
    summary.push_str(&format!("delta_star_s = {}\n", fmt_field(sweep.delta_star_s)));
    summary.push_str(&format!("interior = {}\n", sweep.interior));
    let mut out = OutputSet::new("sweep-delta", cfg);
    out.add("delta_sweep.csv", sweep.to_csv());
    out.add("delta_summary.txt", summary);
    if cfg.plot {
        let series = vec![Series {
            label: metric_name.into(),
            points: sweep.points.iter().map(|p| (p.delta_s, p.metric)).collect(),
        }];
        out.add(
            "delta_sweep.svg",
            line_chart(
                "figure of merit vs sensing window",
                "delta (s)",
                metric_name,
                &series,
                true,
                true,
            ),
        );
    }
    out.write(dir)
}

fn validate_frames(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    require_qubit(cfg, "validate-frames")?;
    let pc = protocol_config(cfg)?;
    let params = pc
        .qubit_params
        .expect("two-level mapping always sets explicit parameters");
    let model = build_qubit_model(params).map_err(CliError::from)?;
    let frame = rotating_frame_qubit(&model)?;
    let tau = 2.0 * std::f64::consts::PI / frame.omega_r;
    let n_samples = 256usize;
    let sample_dt = tau / n_samples as f64;
    let t2 = pc.t2_s.is_finite().then_some(pc.t2_s);

    // Full lab-frame integration across one Rabi period at carrier
    // resolution, against the exact rotating-frame propagation.
    let lab = integrate_qubit_lab(
        &model,
        t2,
        TimeGrid {
            t_span: tau,
            dt: default_carrier_step(params.omega_z),
            sample_dt,
        },
        None,
    )?;
    let mut generator = Liouvillian::coherent(&frame.h_rf)?;
    if let Some(t2v) = t2 {
        generator.add_part(&qubit_dephasing_dissipator(t2v)?)?;
    }
    let mut rho0 = ComplexMatrix::zeros(2, 2);
    rho0[(0, 0)] = num_complex::Complex64::new(1.0, 0.0);
    let mut proj0 = ComplexMatrix::zeros(2, 2);
    proj0[(0, 0)] = num_complex::Complex64::new(1.0, 0.0);
    let mut proj1 = ComplexMatrix::zeros(2, 2);
    proj1[(1, 1)] = num_complex::Complex64::new(1.0, 0.0);
    let rf = propagate_piecewise(
        &rho0,
        &[Segment {
            generator,
            duration: tau,
        }],
        sample_dt,
        &[proj0, proj1],
        false,
    )?;

    let n = lab.times.len().min(rf.times.len());
    let mut rows = String::from("t_s,lab_p0,rf_p0,ideal_p0,abs_dev\n");
    let mut max_dev = 0.0_f64;
    let mut lab_pts = Vec::with_capacity(n);
    let mut rf_pts = Vec::with_capacity(n);
    for i in 0..n {
        let t = lab.times[i];
        let lp = lab.populations[0][i];
        let rp = rf.populations[0][i];
        let ideal = (0.5 * frame.omega_r * t).cos().powi(2);
        let dev = (lp - rp).abs();
        max_dev = max_dev.max(dev);
        rows.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_field(t),
            fmt_field(lp),
            fmt_field(rp),
            fmt_field(ideal),
            fmt_field(dev)
        ));
        lab_pts.push((t, lp));
        rf_pts.push((t, rp));
    }

    let mut summary = String::new();
    summary.push_str(&format!("alpha = {}\n", fmt_field(frame.alpha)));
    summary.push_str(&format!("omega_r_rad_s = {}\n", fmt_field(frame.omega_r)));
    summary.push_str(&format!("rabi_period_s = {}\n", fmt_field(tau)));
    summary.push_str(&format!("samples = {n}\n"));
    summary.push_str(&format!("max_abs_dev = {}\n", fmt_field(max_dev)));
    let tol = 2e-2;
    summary.push_str(&format!("tolerance = {}\n", fmt_field(tol)));
    summary.push_str(&format!(
        "status = {}\n",
        if max_dev <= tol { "pass" } else { "fail" }
    ));

    let mut out = OutputSet::new("validate-frames", cfg);
    out.add("frames.csv", rows);
    out.add("frames_summary.txt", summary);
    if cfg.plot {
        let series = vec![
            Series {
                label: "lab".into(),
                points: lab_pts,
            },
            Series {
                label: "rotating".into(),
                points: rf_pts,
            },
        ];
        out.add(
            "frames.svg",
            line_chart(
                "lab vs rotating frame, one Rabi period",
                "t (s)",
                "P0",
                &series,
                false,
                false,
            ),
        );
    }
    out.write(dir)?;
    if max_dev > tol {
        return Err(CliError::Numerical(format!(
            "frame validation failed: max population deviation {max_dev:.3e} \
             exceeds {tol:.0e} over one Rabi period"
        )));
    }
    Ok(())
}

fn tables_check(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let tables = load_reference_tables()?;
    let design_t2 = cfg.t2_us * 1e-6;
    let t_free = cfg.delta_ns * 1e-9;
    let noise = NoiseModel::pure_dephasing(design_t2)?;

    let mut report = String::new();
    report.push_str("bundled reference tabulations\n\n");
    for block in &tables.kraus {
        let d = (2.0 * block.s + 1.0).round() as usize;
        report.push_str(&format!("[kraus S={:?}]\n", block.s));
        report.push_str(&format!("rows = {}\n", block.rows.len()));
        report.push_str(&format!("dimension = {d}\n"));
        let cols = block.rows.iter().map(|r| r.values.len()).min().unwrap_or(0);
        report.push_str(&format!("columns = {cols}\n"));
        // Completeness of the printed diagonals over the system dimension:
        // sum_k E_k[i]^2 per eigenstate. Transcription artifacts (row
        // duplication or shifts across block boundaries) show up here as
        // order-one deviations.
        let mut worst = 0.0_f64;
        for i in 0..cols.min(d) {
            let total: f64 = block.rows.iter().map(|r| r.values[i] * r.values[i]).sum();
            worst = worst.max((total - 1.0).abs());
        }
        report.push_str(&format!(
            "max_completeness_dev = {}\n\n",
            fmt_field(worst)
        ));
    }
    for block in &tables.codes {
        let d = (2.0 * block.s + 1.0).round() as usize;
        report.push_str(&format!("[codewords S={:?}]\n", block.s));
        report.push_str(&format!("rows = {}\n", block.rows.len()));
        for row in &block.rows {
            report.push_str(&format!(
                "norm l={} k={} in_dim = {} all_cols = {}\n",
                row.ell,
                row.k,
                fmt_field(row.norm_in_dimension),
                fmt_field(row.norm_all_columns)
            ));
        }
        let deficient = block.deficient_rows();
        report.push_str(&format!("deficient_rows = {deficient:?}\n"));
        // Residual of the tabulated code pair against a freshly computed
        // dephasing channel at the reference system parameters.
        let params = QuditParams::reference(block.s)?;
        let model = build_qudit_model(params)?;
        let kraus = tomography_kraus(&model, &noise, t_free)?;
        let pick = |ell: usize| {
            block
                .rows
                .iter()
                .find(|r| r.ell == ell && r.k == 0)
                .map(|r| {
                    let mut v = nalgebra::DVector::from_iterator(
                        d,
                        r.values
                            .iter()
                            .take(d)
                            .map(|&x| num_complex::Complex64::new(x, 0.0)),
                    );
                    let norm = v.norm();
                    if norm > 0.0 {
                        v /= num_complex::Complex64::new(norm, 0.0);
                    }
                    v
                })
        };
        match (pick(0), pick(1)) {
            (Some(w0), Some(w1)) => {
                let residual = kl_residual(&w0, &w1, &kraus, d / 2)?;
                report.push_str(&format!(
                    "kl_residual_vs_computed_channel = {}\n\n",
                    fmt_field(residual)
                ));
            }
            _ => report.push_str("kl_residual_vs_computed_channel = unavailable\n\n"),
        }
    }

    let mut out = OutputSet::new("tables-check", cfg);
    out.add("tables_report.txt", report);
    out.write(dir)
}

#[cfg(test)]
mod tests {
    use super::decimate;

    #[test]
    fn decimate_keeps_endpoints_and_caps_length() {
        let xs: Vec<f64> = (0..10001).map(|i| i as f64).collect();
        let ys = xs.clone();
        let pts = decimate(&xs, &ys, 2000);
        assert!(pts.len() <= 2001);
        assert_eq!(pts.first().unwrap().0, 0.0);
        assert_eq!(pts.last().unwrap().0, 10000.0);
        // Short traces are untouched.
        let pts = decimate(&xs[..5], &ys[..5], 2000);
        assert_eq!(pts.len(), 5);
    }
}
