//! The four subcommands. Each writes its artifacts into the output directory
//! and returns the list of files it produced.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use stgrape_core::model::rad_per_ns_to_mhz;
use stgrape_core::objective::{avg_gate_fidelity, overlap};
use stgrape_core::optimize::{monitor_backend, Checkpoint, Method, PhaseTimings, StopReason};
use stgrape_core::oracle::{noise_sweep, noisy_channel, propagate_noisy_exact, SweepTarget};
use stgrape_core::propagate::relative_distance;
use stgrape_core::timing::benchmark_sweep;
use stgrape_core::{
    AugmentedState, Backend, CMatrix, ControlGrid, MultiIndexSet, NoiseDistribution, OpenSystemModel, Propagator, C64,
};

use crate::config::{InitialState, RunConfig, TaskKind};
use crate::error::CliError;
use crate::output::{num, read_pulse, write_csv, write_pulse, write_toml};

fn core(context: &'static str) -> impl Fn(stgrape_core::Error) -> CliError {
    move |e| CliError::from_core(e, context)
}

fn initial_state(model: &OpenSystemModel, kind: InitialState) -> CMatrix {
    let d = model.dim();
    match kind {
        InitialState::Ground => RunConfig::ground_state(model),
        InitialState::Uniform => CMatrix::from_fn(d, d, |_, _| C64::new(1.0 / d as f64, 0.0)),
    }
}

fn order_label(mset: &MultiIndexSet, k: usize) -> String {
    mset.order(k).iter().map(|p| p.to_string()).collect::<Vec<_>>().join("-")
}

/// Pulse from `explicit`, else the config path, else a seeded random pulse.
fn load_grid(cfg: &RunConfig, model: &OpenSystemModel, explicit: Option<&Path>, fallback: Option<&PathBuf>) -> Result<ControlGrid, CliError> {
    match explicit.or(fallback.map(|p| p.as_path())) {
        Some(p) => read_pulse(p, &cfg.empty_grid(model)?),
        None => cfg.random_grid(model),
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path, pulse: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model()?;
    let mset = cfg.mset(&model)?;
    let grid = load_grid(cfg, &model, pulse, cfg.simulate.pulse.as_ref())?;
    let prop_cfg = cfg.propagation()?;
    if cfg.simulate.backends.is_empty() {
        return Err(CliError::Config("simulate.backends must not be empty".into()));
    }
    let state0 = AugmentedState::initial(&mset, &initial_state(&model, cfg.simulate.initial));
    let mut finals = Vec::new();
    for &b in &cfg.simulate.backends {
        let t0 = Instant::now();
        let prop = Propagator::new(b, &model, &mset, &grid, &prop_cfg).map_err(core("simulate"))?;
        let (fin, _) = prop.forward(&state0, false).map_err(core("simulate"))?;
        log::info!("{b}: propagated {} steps in {:.3} s", grid.steps(), t0.elapsed().as_secs_f64());
        finals.push((b, fin));
    }
    let reference = [Backend::Expm, Backend::Ode]
        .into_iter()
        .find_map(|r| finals.iter().find(|(b, _)| *b == r).map(|(b, s)| (*b, s.clone())));

    let mut block_rows = Vec::new();
    let mut summary_rows = Vec::new();
    for (b, fin) in &finals {
        for (k, blk) in fin.blocks.iter().enumerate() {
            let tr = blk.trace();
            block_rows.push(vec![
                b.to_string(),
                k.to_string(),
                order_label(&mset, k),
                num(tr.re),
                num(tr.im),
                num(blk.frobenius_norm()),
                num(blk.hermitian_error()),
            ]);
        }
        let (ref_name, delta) = match &reference {
            Some((r, s)) if r != b => (r.to_string(), num(relative_distance(s, fin))),
            _ => (String::new(), String::new()),
        };
        summary_rows.push(vec![
            b.to_string(),
            ref_name,
            delta,
            num(fin.zero_order().trace().re),
            num(fin.max_hermitian_error()),
        ]);
    }
    let blocks = out.join("simulate_blocks.csv");
    let summary = out.join("simulate_summary.csv");
    let h = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    write_csv(
        &blocks,
        cfg,
        &h(&["backend", "block", "order", "trace_re", "trace_im", "frobenius_norm", "hermitian_error"]),
        &block_rows,
    )?;
    write_csv(
        &summary,
        cfg,
        &h(&["backend", "reference", "delta", "trace_zero_order", "max_hermitian_error"]),
        &summary_rows,
    )?;
    Ok(vec![blocks, summary])
}

#[derive(Serialize)]
struct OptimizeSummary {
    method: String,
    seed: u64,
    iterations: usize,
    stop_reason: StopReason,
    /// Objective of the returned pulse (exact backend for ST-GRAPE).
    objective: f64,
    /// Average gate fidelity of the returned pulse with all uncertainties at zero.
    gate_fidelity: Option<f64>,
    /// Overlap with the target state for state preparation.
    state_overlap: Option<f64>,
    /// Sum over trajectories of the squared norms of all higher-order blocks, exact backend.
    higher_order_norm_sq: f64,
}

#[derive(Serialize)]
struct OptimizeReport {
    summary: OptimizeSummary,
    checkpoints: Vec<Checkpoint>,
}

#[derive(Serialize)]
struct TimingReport {
    timings: PhaseTimings,
}

pub fn optimize(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model()?;
    let mset = cfg.mset(&model)?;
    let task = cfg.build_task(&model, &mset)?;
    let grid0 = cfg.random_grid(&model)?;
    let prop_cfg = cfg.propagation()?;
    let opt = cfg.optimizer()?;
    let method = cfg.method()?;
    let report = match method {
        Method::Grape(b) => stgrape_core::optimize::run_grape(&model, &mset, &grid0, &task, &opt, b, &prop_cfg),
        Method::StGrape => stgrape_core::optimize::run_stgrape(&model, &mset, &grid0, &task, &opt, &prop_cfg),
    }
    .map_err(core("optimize"))?;
    let best = grid0.clone().with_amplitudes(report.best_control.clone()).map_err(core("optimize"))?;

    let exact = match method {
        Method::Grape(b) => b,
        Method::StGrape => monitor_backend(&model, &mset, &prop_cfg),
    };
    let mut norm_sq = 0.0;
    let prop = Propagator::new(exact, &model, &mset, &best, &prop_cfg).map_err(core("optimize"))?;
    for t in &task.trajectories {
        let (fin, _) = prop.forward(&AugmentedState::initial(&mset, &t.initial), false).map_err(core("optimize"))?;
        norm_sq += fin.blocks[..fin.len() - 1].iter().map(|b| b.norm_sqr()).sum::<f64>();
    }
    let zeros = vec![0.0; model.n_uncertainties()];
    let (gate_fidelity, state_overlap) = match cfg.task()?.kind {
        TaskKind::Gate => {
            let ch = noisy_channel(&model, &best, &zeros).map_err(core("optimize"))?;
            (Some(avg_gate_fidelity(&ch, &cfg.target_unitary(&model)?).map_err(core("optimize"))?), None)
        }
        TaskKind::StatePrep => {
            let rho = propagate_noisy_exact(&model, &best, &zeros, &RunConfig::ground_state(&model)).map_err(core("optimize"))?;
            (None, Some(overlap(&rho, &cfg.target_state(&model)?)))
        }
    };
    if !report.best_objective.is_finite() {
        return Err(CliError::Numerical("optimize: objective is not finite".into()));
    }
    let method_name = match method {
        Method::Grape(b) => format!("grape ({b})"),
        Method::StGrape => "stgrape".to_string(),
    };
    log::info!(
        "{method_name}: {:?} after {} iterations, objective {:.10}",
        report.stop_reason,
        report.iterations,
        report.best_objective
    );

    let report_path = out.join("report.toml");
    write_toml(
        &report_path,
        cfg,
        &OptimizeReport {
            summary: OptimizeSummary {
                method: method_name,
                seed: report.seed,
                iterations: report.iterations,
                stop_reason: report.stop_reason,
                objective: report.best_objective,
                gate_fidelity,
                state_overlap,
                higher_order_norm_sq: norm_sq,
            },
            checkpoints: report.checkpoints.clone(),
        },
    )?;
    let pulse_path = out.join("pulse.csv");
    write_pulse(&pulse_path, cfg, &best)?;
    let history_path = out.join("history.csv");
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .enumerate()
        .map(|(i, v)| vec![i.to_string(), num(*v)])
        .collect();
    write_csv(&history_path, cfg, &["iteration".into(), "objective".into()], &rows)?;
    let timing_path = out.join("timings.toml");
    write_toml(&timing_path, cfg, &TimingReport { timings: report.timings })?;
    Ok(vec![report_path, pulse_path, history_path, timing_path])
}

#[derive(Serialize)]
struct SweepSummary {
    count: usize,
    mean_error: f64,
    noise_seed: u64,
}

pub fn sweep(cfg: &RunConfig, out: &Path, pulse: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model()?;
    let path = pulse
        .map(Path::to_path_buf)
        .or_else(|| cfg.sweep.pulse.clone())
        .ok_or_else(|| CliError::Config("sweep needs a pulse file (--pulse or sweep.pulse)".into()))?;
    let grid = read_pulse(&path, &cfg.empty_grid(&model)?)?;
    if cfg.sweep.count == 0 {
        return Err(CliError::Config("sweep.count must be at least 1".into()));
    }
    let noise_seed = cfg.sweep.noise_seed.unwrap_or(cfg.seed);
    let dist = NoiseDistribution::new(cfg.sweep.distribution, cfg.sigmas(&model)?, noise_seed).map_err(core("robustness.sigmas_mhz"))?;
    let target = match cfg.task()?.kind {
        TaskKind::Gate => SweepTarget::Gate(cfg.target_unitary(&model)?),
        TaskKind::StatePrep => SweepTarget::State {
            initial: RunConfig::ground_state(&model),
            target: cfg.target_state(&model)?,
        },
    };
    let result = noise_sweep(&model, &grid, &target, &dist, cfg.sweep.count, &cfg.sweep_thresholds()?).map_err(core("sweep"))?;
    if result.fidelities.iter().any(|f| !f.is_finite()) {
        return Err(CliError::Numerical("sweep: non-finite fidelity".into()));
    }
    log::info!("sweep: {} samples, mean error {:.6}", result.samples.len(), result.mean_error);

    let m = model.n_uncertainties();
    let mut header = vec!["sample".to_string()];
    header.extend((1..=m).map(|j| format!("eps_{j}_mhz")));
    header.push("fidelity".into());
    header.push("error".into());
    let rows: Vec<Vec<String>> = result
        .samples
        .iter()
        .zip(&result.fidelities)
        .enumerate()
        .map(|(i, (eps, f))| {
            let mut r = vec![i.to_string()];
            r.extend(eps.iter().map(|&e| num(rad_per_ns_to_mhz(e))));
            r.push(num(*f));
            r.push(num(1.0 - f));
            r
        })
        .collect();
    let samples_path = out.join("sweep_samples.csv");
    write_csv(&samples_path, cfg, &header, &rows)?;
    let cdf_rows: Vec<Vec<String>> = result.cdf.iter().map(|r| vec![num(r.threshold), num(r.fraction)]).collect();
    let cdf_path = out.join("sweep_cdf.csv");
    write_csv(&cdf_path, cfg, &["threshold".into(), "fraction".into()], &cdf_rows)?;
    let summary_path = out.join("sweep_summary.toml");
    write_toml(
        &summary_path,
        cfg,
        &SweepSummary {
            count: result.samples.len(),
            mean_error: result.mean_error,
            noise_seed,
        },
    )?;
    Ok(vec![samples_path, cdf_path, summary_path])
}

pub fn benchmark(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut spec = cfg.benchmark.clone();
    spec.seed = cfg.seed;
    if spec.qubits.iter().any(|&q| q == 0 || q > 8) {
        return Err(CliError::Config("benchmark.qubits entries must be in 1..=8".into()));
    }
    let rows = benchmark_sweep(&spec, &cfg.propagation()?).map_err(core("benchmark"))?;
    let path = out.join("benchmark.csv");
    let header: Vec<String> = ["backend", "n_q", "n", "d_aug", "median_ns", "mean_ns"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.backend.to_string(),
                r.n_q.to_string(),
                r.n.to_string(),
                r.d_aug.to_string(),
                num(r.median_ns),
                num(r.mean_ns),
            ]
        })
        .collect();
    write_csv(&path, cfg, &header, &rows)?;
    Ok(vec![path])
}
