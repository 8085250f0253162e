//! The run / sweep / theory subcommands and their output files.
//!
//! All outputs are line-delimited JSON (one self-describing record per line)
//! plus a flat CSV export for the sweep surface, so any plotting tool can
//! consume them directly.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use l2gd_core::compressors::{joint_variance_factor, variance_factor};
use l2gd_core::data::{parse_libsvm, partition_sequential, synth_instance, PartitionedDataset};
use l2gd_core::engine::{run_fedavg, run_l2gd, FedAvgConfig, L2gdConfig, L2gdRun, MetricsTrace};
use l2gd_core::objective::{
    full_smoothness_bound, objective_value, LogisticProblem, Objective, SmoothnessConstants,
    StackedModel,
};
use l2gd_core::theory::{
    alpha, compute_constants, gamma, gamma_no_compression, grid_min_communication,
    grid_min_gamma, nonconvex_budget, ConstantsRequest, NonconvexBudget, TheoryConstants,
};

use crate::config::{Algorithm, Config, DatasetConfig, Eta};
use crate::CliError;

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

fn load_dataset(cfg: &Config) -> Result<PartitionedDataset, CliError> {
    match &cfg.dataset {
        DatasetConfig::Libsvm { path, target_d } => {
            let file = File::open(path)
                .map_err(|e| CliError::data(format!("cannot open dataset {path}: {e}")))?;
            let (examples, d) = parse_libsvm(BufReader::new(file), *target_d)
                .map_err(|e| CliError::data(format!("dataset {path}: {e}")))?;
            partition_sequential(examples, cfg.n, d).map_err(|e| CliError::config(e.to_string()))
        }
        DatasetConfig::Synth {
            d,
            per_client,
            heterogeneity,
            seed,
        } => Ok(synth_instance(cfg.n, *d, *per_client, *heterogeneity, *seed)),
    }
}

fn build_problem(cfg: &Config, lambda: f64) -> Result<LogisticProblem, CliError> {
    let dataset = load_dataset(cfg)?;
    let d = dataset.d;
    cfg.compressors
        .client
        .validate(d)
        .and_then(|_| cfg.compressors.master.validate(d))
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(LogisticProblem::new(&dataset, cfg.l2, lambda))
}

/// The stepsize "auto" resolves to 1/(2 gamma) for l2gd (with the
/// no-compression gamma when both sides are identity) and to 1/L for fedavg.
fn resolve_eta(
    cfg: &Config,
    smoothness: &SmoothnessConstants,
    d: usize,
    p: f64,
    lambda: f64,
) -> Result<f64, CliError> {
    match cfg.eta {
        Eta::Fixed(v) => Ok(v),
        Eta::LocalStepsize(a) => match cfg.algorithm {
            // Hold the per-device stepsize constant: the local update uses
            // eta/(n(1-p)).
            Algorithm::L2gd => Ok(a * cfg.n as f64 * (1.0 - p)),
            Algorithm::FedAvg => Ok(a),
        },
        Eta::Auto => match cfg.algorithm {
            Algorithm::FedAvg => Ok(1.0 / smoothness.l),
            Algorithm::L2gd => {
                let omega = joint_variance_factor(&[cfg.compressors.client], d).map_err(|e| {
                    CliError::config(format!("auto eta needs unbiased compressors: {e}"))
                })?;
                let omega_m = variance_factor(&cfg.compressors.master, d).map_err(|e| {
                    CliError::config(format!("auto eta needs unbiased compressors: {e}"))
                })?;
                let gamma_val = if omega == 0.0 && omega_m == 0.0 {
                    gamma_no_compression(p, lambda, cfg.n, smoothness.l_f)
                } else if smoothness.mu > 0.0 {
                    gamma(
                        p,
                        lambda,
                        cfg.n,
                        smoothness.l_f,
                        alpha(omega, omega_m, smoothness.mu),
                    )
                } else {
                    return Err(CliError::config(
                        "auto eta with compression needs strong convexity (l2 > 0)",
                    ));
                }
                .map_err(|e| CliError::config(e.to_string()))?;
                Ok(1.0 / (2.0 * gamma_val))
            }
        },
    }
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("serializable record"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::internal(format!("write {path:?}: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text).map_err(|e| CliError::internal(format!("write {path:?}: {e}")))
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    final_loss: f64,
    final_f: f64,
    per_client_accuracy: Vec<f64>,
    personalized_accuracy: f64,
    pooled_average_model_accuracy: f64,
    total_bits: u64,
    bits_per_client: f64,
    rounds: u64,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    mean_final_loss: f64,
    std_final_loss: f64,
    mean_bits_per_client: f64,
    mean_rounds: f64,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    v: u32,
    config: &'a Config,
    eta: f64,
    per_seed: Vec<SeedSummary>,
    aggregate: Aggregate,
}

/// Theory report written alongside l2gd runs and by the `theory` command.
#[derive(Debug, Serialize)]
struct TheoryReport {
    v: u32,
    constants: TheoryConstants,
    rate_grid_check: Option<GridCheck>,
    communication_grid_check: Option<GridCheck>,
    theorem1: Theorem1Budget,
    theorem2: Theorem2Budget,
}

#[derive(Debug, Serialize)]
struct GridCheck {
    closed_form_p: f64,
    grid_p: f64,
    closed_form_value: f64,
    grid_value: f64,
    within_one_grid_step: bool,
}

#[derive(Debug, Serialize)]
struct Theorem1Budget {
    eta: f64,
    contraction_per_step: f64,
    neighborhood: f64,
}

#[derive(Debug, Serialize)]
struct Theorem2Budget {
    epsilon: f64,
    smoothness_of_objective: f64,
    gap_from_zero_start: f64,
    eta: f64,
    iterations: usize,
}

/// Reduced report when the full constants cannot be produced (biased
/// compressors carry no variance certificate; fedavg has no p, lambda).
#[derive(Debug, Serialize)]
struct ReducedTheoryReport {
    v: u32,
    smoothness: SmoothnessConstants,
    note: String,
}

fn run_one_l2gd(
    problem: &LogisticProblem,
    cfg: &Config,
    p: f64,
    eta: f64,
    seed: u64,
) -> Result<L2gdRun, CliError> {
    let core_cfg = L2gdConfig::uniform(
        cfg.n,
        p,
        eta,
        cfg.steps,
        cfg.compressors.client,
        cfg.compressors.master,
        seed,
    );
    run_l2gd(problem, &core_cfg, None, None).map_err(CliError::from)
}

fn seed_summary(
    problem: &LogisticProblem,
    n: usize,
    seed: u64,
    trace: &MetricsTrace,
    final_state: &StackedModel,
) -> SeedSummary {
    let per_client = problem.per_client_accuracy(final_state);
    let personalized = per_client.iter().sum::<f64>() / per_client.len() as f64;
    let avg = final_state.average();
    let pooled = problem.pooled_accuracy(avg.view());
    let last = trace.last();
    SeedSummary {
        seed,
        final_loss: last.objective,
        final_f: last.f,
        per_client_accuracy: per_client,
        personalized_accuracy: personalized,
        pooled_average_model_accuracy: pooled,
        total_bits: trace.total_bits(n),
        bits_per_client: trace.bits_per_client(n),
        rounds: last.rounds,
    }
}

fn effective_lambda(cfg: &Config) -> f64 {
    match cfg.algorithm {
        Algorithm::L2gd => cfg.lambda,
        // FedAvg trains one shared model; the penalty plays no role.
        Algorithm::FedAvg => 0.0,
    }
}

pub fn cmd_run(cfg: &Config, out_dir: &Path) -> Result<(), CliError> {
    let lambda = effective_lambda(cfg);
    let problem = build_problem(cfg, lambda)?;
    let smoothness = problem.smoothness();
    let eta = resolve_eta(cfg, &smoothness, problem.d(), cfg.p, lambda)?;
    prepare_out_dir(cfg, out_dir)?;

    let mut per_seed = Vec::with_capacity(cfg.seeds);
    for r in 0..cfg.seeds {
        let seed = cfg.seed + r as u64;
        let (trace, summary) = match cfg.algorithm {
            Algorithm::L2gd => {
                let run = run_one_l2gd(&problem, cfg, cfg.p, eta, seed)?;
                let summary =
                    seed_summary(&problem, cfg.n, seed, &run.trace, &run.final_state);
                (run.trace, summary)
            }
            Algorithm::FedAvg => {
                let fed = FedAvgConfig {
                    local_steps: cfg.local_steps,
                    eta_local: eta,
                    rounds: cfg.steps,
                    compressor: cfg.compressors.client,
                    seed,
                };
                let run = run_fedavg(&problem, &fed).map_err(CliError::from)?;
                let stacked = StackedModel::replicated(run.shared_model, cfg.n);
                let summary = seed_summary(&problem, cfg.n, seed, &run.trace, &stacked);
                (run.trace, summary)
            }
        };
        let name = if cfg.seeds == 1 {
            "trace.jsonl".to_string()
        } else {
            format!("trace_{r:03}.jsonl")
        };
        write_lines(&out_dir.join(name), &trace.records)?;
        per_seed.push(summary);
    }

    let losses: Vec<f64> = per_seed.iter().map(|s| s.final_loss).collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let std = if losses.len() > 1 {
        (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (losses.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let aggregate = Aggregate {
        mean_final_loss: mean,
        std_final_loss: std,
        mean_bits_per_client: per_seed.iter().map(|s| s.bits_per_client).sum::<f64>()
            / per_seed.len() as f64,
        mean_rounds: per_seed.iter().map(|s| s.rounds as f64).sum::<f64>()
            / per_seed.len() as f64,
    };
    let summary = RunSummary {
        v: OUTPUT_SCHEMA_VERSION,
        config: cfg,
        eta,
        per_seed,
        aggregate,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;

    write_theory_report(cfg, &problem, smoothness, eta, out_dir)?;
    Ok(())
}

fn write_theory_report(
    cfg: &Config,
    problem: &LogisticProblem,
    smoothness: SmoothnessConstants,
    eta: f64,
    out_dir: &Path,
) -> Result<(), CliError> {
    let path = out_dir.join("theory.json");
    if cfg.algorithm == Algorithm::FedAvg {
        return write_json(
            &path,
            &ReducedTheoryReport {
                v: OUTPUT_SCHEMA_VERSION,
                smoothness,
                note: "theory constants apply to the l2gd algorithm".to_string(),
            },
        );
    }
    let clients = vec![cfg.compressors.client; cfg.n];
    let request = ConstantsRequest {
        p: cfg.p,
        eta: Some(eta),
        samples: cfg.theory.samples,
        seed: cfg.seed,
    };
    match compute_constants(problem, smoothness, &clients, &cfg.compressors.master, &request) {
        Ok((constants, x_star)) => {
            let report = full_report(cfg, problem, constants, &x_star);
            write_json(&path, &report)
        }
        Err(l2gd_core::Error::Biased(kind)) => write_json(
            &path,
            &ReducedTheoryReport {
                v: OUTPUT_SCHEMA_VERSION,
                smoothness,
                note: format!(
                    "{kind} is biased: no unbiased variance certificate, \
                     expected-smoothness constants unavailable"
                ),
            },
        ),
        Err(e) => Err(CliError::from(e)),
    }
}

fn full_report(
    cfg: &Config,
    problem: &LogisticProblem,
    constants: TheoryConstants,
    x_star: &StackedModel,
) -> TheoryReport {
    let grid_points = cfg.theory.grid_points;
    let step = 1.0 / grid_points as f64;
    let (rate_grid_check, communication_grid_check) = if constants.alpha.is_finite() {
        let (grid_p, grid_value) = grid_min_gamma(
            constants.lambda,
            constants.n,
            constants.l_f,
            constants.alpha,
            grid_points,
        );
        let closed_p = constants.rate.p_star;
        let closed_value = gamma(
            closed_p.clamp(1e-6, 1.0 - 1e-6),
            constants.lambda,
            constants.n,
            constants.l_f,
            constants.alpha,
        )
        .unwrap();
        let rate_check = GridCheck {
            closed_form_p: closed_p,
            grid_p,
            closed_form_value: closed_value,
            grid_value,
            within_one_grid_step: (closed_p - grid_p).abs() <= 1.5 * step
                || closed_value <= grid_value * (1.0 + 1e-9),
        };
        let (grid_p, grid_value) = grid_min_communication(
            constants.lambda,
            constants.n,
            constants.l_f,
            constants.alpha,
            grid_points,
        );
        let closed_p = constants.communication.p_star;
        let clamped = closed_p.clamp(1e-6, 1.0 - 1e-6);
        let closed_value = clamped
            * (1.0 - clamped)
            * gamma(
                clamped,
                constants.lambda,
                constants.n,
                constants.l_f,
                constants.alpha,
            )
            .unwrap();
        let comm_check = GridCheck {
            closed_form_p: closed_p,
            grid_p,
            closed_form_value: closed_value,
            grid_value,
            within_one_grid_step: (closed_p - grid_p).abs() <= 1.5 * step
                || closed_value <= grid_value * (1.0 + 1e-9),
        };
        (Some(rate_check), Some(comm_check))
    } else {
        (None, None)
    };

    let x0 = StackedModel::zeros(constants.n, constants.d);
    let gap = objective_value(problem, &x0) - objective_value(problem, x_star);
    let l_objective = full_smoothness_bound(constants.l_f, constants.lambda, constants.n);
    let budget: NonconvexBudget = nonconvex_budget(
        cfg.theory.epsilon,
        l_objective,
        constants.gamma,
        constants.delta,
        gap.max(0.0),
    );
    TheoryReport {
        v: OUTPUT_SCHEMA_VERSION,
        theorem1: Theorem1Budget {
            eta: constants.eta,
            contraction_per_step: constants.contraction,
            neighborhood: constants.neighborhood,
        },
        theorem2: Theorem2Budget {
            epsilon: cfg.theory.epsilon,
            smoothness_of_objective: l_objective,
            gap_from_zero_start: gap,
            eta: budget.eta,
            iterations: budget.k,
        },
        rate_grid_check,
        communication_grid_check,
        constants,
    }
}

pub fn cmd_theory(cfg: &Config, out_dir: &Path) -> Result<(), CliError> {
    if cfg.algorithm != Algorithm::L2gd {
        return Err(CliError::config("theory applies to algorithm = \"l2gd\""));
    }
    let problem = build_problem(cfg, cfg.lambda)?;
    let smoothness = problem.smoothness();
    let eta = resolve_eta(cfg, &smoothness, problem.d(), cfg.p, cfg.lambda)?;
    prepare_out_dir(cfg, out_dir)?;
    write_theory_report(cfg, &problem, smoothness, eta, out_dir)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRecord {
    v: u32,
    p: f64,
    lambda: f64,
    seed: u64,
    final_loss: f64,
    final_f: f64,
    total_bits: u64,
    bits_per_client: f64,
    rounds: u64,
}

pub fn cmd_sweep(cfg: &Config, out_dir: &Path) -> Result<(), CliError> {
    if cfg.algorithm != Algorithm::L2gd {
        return Err(CliError::config("sweep applies to algorithm = \"l2gd\""));
    }
    let (p_grid, lambda_grid) = cfg.sweep_grids();

    // One dataset load; per-lambda problems share the dense data.
    let base_problem = build_problem(cfg, cfg.lambda)?;
    let smoothness = base_problem.smoothness();
    prepare_out_dir(cfg, out_dir)?;

    let points: Vec<(usize, f64, f64, u64)> = {
        let mut points = Vec::new();
        let mut index = 0;
        for &p in &p_grid {
            for &lambda in &lambda_grid {
                for r in 0..cfg.seeds {
                    points.push((index, p, lambda, cfg.seed + r as u64));
                    index += 1;
                }
            }
        }
        points
    };

    let mut records: Vec<(usize, SweepRecord)> = points
        .par_iter()
        .map(|&(index, p, lambda, seed)| -> Result<(usize, SweepRecord), CliError> {
            let problem = base_problem.with_lambda(lambda);
            let eta = resolve_eta(cfg, &smoothness, problem.d(), p, lambda)?;
            let run = run_one_l2gd(&problem, cfg, p, eta, seed).map_err(|e| {
                CliError::internal(format!(
                    "sweep point p={p}, lambda={lambda}, seed={seed}: {e}"
                ))
            })?;
            let last = run.trace.last();
            Ok((
                index,
                SweepRecord {
                    v: OUTPUT_SCHEMA_VERSION,
                    p,
                    lambda,
                    seed,
                    final_loss: last.objective,
                    final_f: last.f,
                    total_bits: run.trace.total_bits(cfg.n),
                    bits_per_client: run.trace.bits_per_client(cfg.n),
                    rounds: last.rounds,
                },
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    records.sort_by_key(|(index, _)| *index);
    let records: Vec<SweepRecord> = records.into_iter().map(|(_, r)| r).collect();

    write_lines(&out_dir.join("sweep.jsonl"), &records)?;

    let mut csv =
        String::from("p,lambda,seed,final_loss,final_f,total_bits,bits_per_client,rounds\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.p, r.lambda, r.seed, r.final_loss, r.final_f, r.total_bits, r.bits_per_client,
            r.rounds
        ));
    }
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, csv)
        .map_err(|e| CliError::internal(format!("write {csv_path:?}: {e}")))?;
    Ok(())
}

/// Creates the output directory and drops the normalized configuration into
/// it, so any run can be reproduced from its artifacts alone.
fn prepare_out_dir(cfg: &Config, out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::internal(format!("create {out_dir:?}: {e}")))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())
        .map_err(|e| CliError::internal(format!("write normalized config: {e}")))
}

pub fn out_dir(cfg: &Config, flag: Option<&str>) -> PathBuf {
    PathBuf::from(flag.unwrap_or(&cfg.out))
}
