//! Command-line front end. Every run prints the parameters it used, and the
//! output depends only on the flags and the seed.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::dp::{self, Method, SolveOptions};
use crate::error::SpiderError;
use crate::mc::{self, CensorPolicy, EstimateOptions, DEFAULT_CENSOR_THRESHOLD, DEFAULT_KAPPA};
use crate::stopping::StoppingRule;
use crate::value_fn::{self, EvalPoint, ValueParams};
use crate::verifier::{self, GridSpec};
use crate::walk::{InitialState, WalkConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "spider-lab", version, about = "Optimal stopping for the Brownian spider")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct Sim {
    #[arg(long, default_value_t = 0)]
    pub n: usize,
    /// Lattice step.
    #[arg(long, default_value_t = 0.01)]
    pub h: f64,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Path length cap; defaults to a horizon of 1000 time units.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Worker threads; 0 picks the machine's core count.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

impl Sim {
    fn config(&self) -> Result<WalkConfig, SpiderError> {
        let max_steps = self
            .max_steps
            .unwrap_or_else(|| (1000.0 / (self.h * self.h)).min(1e15) as u64);
        WalkConfig::new(self.h, self.n, self.seed, max_steps)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Origin value, spider constant and optimal cost for unit mean time.
    Constants {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Closed-form value at a point.
    Eval {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, allow_hyphen_values = true)]
        x: f64,
        /// Current rib, 1-based (ignored for n <= 1).
        #[arg(long, default_value_t = 1)]
        r: usize,
        /// Records, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        s: Vec<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Finite-difference checks of the closed form.
    Verify {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 1e-4)]
        h_fd: f64,
        #[arg(long, default_value_t = 2.0)]
        s_max: f64,
        #[arg(long, default_value_t = 41)]
        s_points: usize,
        #[arg(long, default_value_t = 41)]
        x_points: usize,
        #[arg(long, default_value_t = 1.5)]
        x_depth: f64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Individual paths from the origin.
    Simulate {
        #[command(flatten)]
        sim: Sim,
        #[arg(long)]
        rule: String,
        #[command(flatten)]
        output: Output,
    },
    /// Monte Carlo estimates and the spider bound check, one per rule.
    Estimate {
        #[command(flatten)]
        sim: Sim,
        /// Rule spec, e.g. first-entry:C=1; repeat for a batch.
        #[arg(long, required = true)]
        rule: Vec<String>,
        /// Time cost of the penalized objective.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = DEFAULT_CENSOR_THRESHOLD)]
        censor_threshold: f64,
        /// Treat the step cap as part of the rule instead of failing.
        #[arg(long)]
        stop_at_horizon: bool,
        /// Lattice bias coefficient of the bound check.
        #[arg(long, default_value_t = DEFAULT_KAPPA)]
        kappa: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Grid dynamic programming at unit cost.
    Dp {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.02)]
        h: f64,
        #[arg(long, default_value_t = 3.0)]
        s_max: f64,
        /// Line only: stop depth below the running maximum.
        #[arg(long, default_value_t = 1.5)]
        x_depth: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iters: u64,
        #[arg(long, value_enum, default_value = "policy")]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Accepted for symmetry with the other commands; the solver is
        /// deterministic.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Grid refinement study with first-order extrapolation.
    Study {
        #[arg(long)]
        n: usize,
        /// Decreasing grid steps with a constant ratio.
        #[arg(long, value_delimiter = ',')]
        h: Option<Vec<f64>>,
        #[arg(long, default_value_t = 3.0)]
        s_max: f64,
        #[arg(long, default_value_t = 1.5)]
        x_depth: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iters: u64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Policy,
    Value,
}

/// Default refinement ladder: coarser for four or more ribs.
pub fn default_ladder(n: usize) -> Vec<f64> {
    if n >= 3 {
        vec![0.08, 0.04, 0.02]
    } else {
        vec![0.04, 0.02, 0.01]
    }
}

/// Outcome of a command: the document to print and whether its checks
/// passed.
struct Report {
    body: Vec<u8>,
    passed: bool,
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut body = serde_json::to_vec_pretty(value).expect("serializable report");
    body.push(b'\n');
    body
}

fn csv_table<H: AsRef<[u8]>>(header: &[H], rows: &[Vec<String>]) -> Result<Vec<u8>, SpiderError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

fn exit_code(err: &SpiderError) -> i32 {
    match err {
        SpiderError::NonConvergence { .. }
        | SpiderError::TruncationContaminated { .. }
        | SpiderError::ExcessiveCensoring { .. } => EXIT_CHECK_FAILED,
        _ => EXIT_USAGE,
    }
}

fn csv_err(e: impl std::fmt::Display) -> SpiderError {
    SpiderError::InvalidParameter(format!("csv output: {e}"))
}

fn execute(command: &Command) -> Result<Report, SpiderError> {
    match command {
        Command::Constants { n, output } => {
            let theta = value_fn::theta(*n)?;
            let doc = json!({
                "n": n,
                "theta": theta,
                "c_n": value_fn::c_n(*n)?,
                "c_star_m1": value_fn::optimal_c(*n, 1.0)?,
            });
            if output.format == Format::Csv {
                let row = vec![
                    n.to_string(),
                    theta.to_string(),
                    value_fn::c_n(*n)?.to_string(),
                    value_fn::optimal_c(*n, 1.0)?.to_string(),
                ];
                let body = csv_table(&["n", "theta", "c_n", "c_star_m1"], &[row])?;
                return Ok(Report { body, passed: true });
            }
            Ok(Report {
                body: to_json(&doc),
                passed: true,
            })
        }
        Command::Eval {
            n,
            c,
            x,
            r,
            s,
            output,
        } => {
            let params = ValueParams::new(*n, *c)?;
            let rib = if *n <= 1 { 0 } else { r.checked_sub(1).ok_or_else(|| SpiderError::DomainViolation("ribs are numbered from 1".into()))? };
            let point = EvalPoint::spider(*x, rib, s.clone());
            let value = value_fn::v_hat(&params, &point)?;
            let stopped = value_fn::in_stopping_set(&params, &point)?;
            if output.format == Format::Csv {
                let records = s.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
                let row = vec![
                    n.to_string(),
                    c.to_string(),
                    x.to_string(),
                    r.to_string(),
                    records,
                    value.to_string(),
                    point.record_sum().to_string(),
                    stopped.to_string(),
                ];
                let header = ["n", "c", "x", "r", "s", "value", "stop_value", "in_stopping_set"];
                return Ok(Report {
                    body: csv_table(&header, &[row])?,
                    passed: true,
                });
            }
            let doc = json!({
                "n": n,
                "c": c,
                "x": x,
                "r": r,
                "s": s,
                "value": value,
                "stop_value": point.record_sum(),
                "in_stopping_set": stopped,
            });
            Ok(Report {
                body: to_json(&doc),
                passed: true,
            })
        }
        Command::Verify {
            n,
            c,
            h_fd,
            s_max,
            s_points,
            x_points,
            x_depth,
            threads,
            output,
        } => {
            let params = ValueParams::new(*n, *c)?;
            let grid = GridSpec {
                h_fd: *h_fd,
                s_max: *s_max,
                s_points: *s_points,
                x_points: *x_points,
                x_depth: *x_depth,
            };
            let (report, fd) = mc::run_in_pool(*threads, || {
                Ok::<_, SpiderError>((
                    verifier::check_properties(&params, &grid)?,
                    verifier::fd_convergence(&params, &grid)?,
                ))
            })??;
            let passed = report.all_passed;
            let body = match output.format {
                Format::Json => to_json(&json!({ "properties": report, "fd_convergence": fd })),
                Format::Csv => {
                    let header = [
                        "property", "applicable", "passed", "max_violation", "tolerance", "samples",
                        "excluded", "fd_ratio",
                    ];
                    let rows: Vec<Vec<String>> = report
                        .properties
                        .iter()
                        .map(|(name, check)| {
                            let ratio = fd.ratio.get(name).copied().flatten();
                            vec![
                                name.clone(),
                                check.applicable.to_string(),
                                check.passed.to_string(),
                                check.max_violation.to_string(),
                                check.tolerance.to_string(),
                                check.samples.to_string(),
                                check.excluded.to_string(),
                                ratio.map(|v| v.to_string()).unwrap_or_default(),
                            ]
                        })
                        .collect();
                    csv_table(&header, &rows)?
                }
            };
            Ok(Report { body, passed })
        }
        Command::Simulate { sim, rule, output } => {
            let rule: StoppingRule = rule.parse()?;
            let config = sim.config()?;
            let outcomes = mc::simulate_outcomes(&InitialState::origin(sim.n), &rule, &config, sim.paths, sim.threads)?;
            let body = match output.format {
                Format::Json => to_json(&json!({
                    "rule": rule.to_string(),
                    "config": config,
                    "paths": outcomes,
                })),
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    let ribs = sim.n.max(1);
                    let mut header = vec!["path".to_string(), "tau".to_string()];
                    header.extend((1..=ribs).map(|i| format!("s{i}")));
                    header.extend(["censored".to_string(), "steps".to_string()]);
                    w.write_record(&header).map_err(csv_err)?;
                    for (i, o) in outcomes.iter().enumerate() {
                        let mut row = vec![i.to_string(), o.tau.to_string()];
                        row.extend(o.s_final.iter().map(|v| v.to_string()));
                        row.extend([o.censored.to_string(), o.steps.to_string()]);
                        w.write_record(&row).map_err(csv_err)?;
                    }
                    w.into_inner().map_err(csv_err)?
                }
            };
            Ok(Report { body, passed: true })
        }
        Command::Estimate {
            sim,
            rule,
            c,
            censor_threshold,
            stop_at_horizon,
            kappa,
            output,
        } => {
            let params = ValueParams::new(sim.n, *c)?;
            let config = sim.config()?;
            let opts = EstimateOptions {
                censor_threshold: *censor_threshold,
                censor_policy: if *stop_at_horizon {
                    CensorPolicy::StopAtHorizon
                } else {
                    CensorPolicy::Fail
                },
                threads: sim.threads,
            };
            let mut estimates = Vec::new();
            let mut entries = Vec::new();
            let mut passed = true;
            for spec in rule {
                let rule: StoppingRule = spec.parse()?;
                let est = mc::estimate(&rule, &params, &config, sim.paths, &opts)?;
                let check = if sim.n <= 2 {
                    Some(mc::bound_check(&est, sim.n, *kappa)?)
                } else {
                    None
                };
                passed &= check.is_none_or(|b| b.satisfied);
                let target = rule.expected_identity_check(sim.n).ok();
                entries.push(json!({ "estimate": est, "bound_check": check, "penalized_target": target }));
                estimates.push(est);
            }
            let body = match output.format {
                Format::Json => to_json(&json!({ "kappa": kappa, "results": entries })),
                Format::Csv => {
                    let mut buf = Vec::new();
                    mc::write_csv(&mut buf, &estimates)?;
                    buf
                }
            };
            Ok(Report { body, passed })
        }
        Command::Dp {
            n,
            h,
            s_max,
            x_depth,
            tol,
            max_iters,
            method,
            threads,
            seed: _,
            output,
        } => {
            let opts = SolveOptions {
                tol: *tol,
                max_iters: *max_iters,
                threads: *threads,
                keep_surface: false,
                method: match method {
                    MethodArg::Policy => Method::PolicyIteration,
                    MethodArg::Value => Method::ValueIteration,
                },
            };
            let grid = if *n == 0 {
                dp::solve_line(*h, *x_depth, *s_max, &opts)?
            } else {
                dp::solve(*n, *h, *s_max, &opts)?
            };
            let body = match output.format {
                Format::Json => to_json(&grid),
                Format::Csv => {
                    let header = [
                        "n", "h", "s_max", "method", "theta", "iterations", "residual",
                        "boundary_settlement", "face_hit_probability", "slices", "states",
                    ];
                    let row = vec![
                        grid.n.to_string(),
                        grid.h.to_string(),
                        grid.s_max.to_string(),
                        serde_json::to_value(grid.method)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_owned))
                            .unwrap_or_default(),
                        grid.theta_estimate.to_string(),
                        grid.iterations.to_string(),
                        grid.residual.to_string(),
                        grid.boundary_settlement.to_string(),
                        grid.face_hit_probability.to_string(),
                        grid.slices.to_string(),
                        grid.states.to_string(),
                    ];
                    csv_table(&header, &[row])?
                }
            };
            Ok(Report { body, passed: true })
        }
        Command::Study {
            n,
            h,
            s_max,
            x_depth,
            tol,
            max_iters,
            threads,
            output,
        } => {
            let ladder = h.clone().unwrap_or_else(|| default_ladder(*n));
            let opts = SolveOptions {
                tol: *tol,
                max_iters: *max_iters,
                threads: *threads,
                ..SolveOptions::default()
            };
            let study = dp::convergence_study(*n, &ladder, *s_max, *x_depth, &opts)?;
            let passed = study.monotone;
            let body = match output.format {
                Format::Json => to_json(&study),
                Format::Csv => {
                    let mut buf = Vec::new();
                    dp::write_study_csv(&mut buf, &study)?;
                    buf
                }
            };
            Ok(Report { body, passed })
        }
    }
}

fn output_of(command: &Command) -> &Output {
    match command {
        Command::Constants { output, .. }
        | Command::Eval { output, .. }
        | Command::Verify { output, .. }
        | Command::Simulate { output, .. }
        | Command::Estimate { output, .. }
        | Command::Dp { output, .. }
        | Command::Study { output, .. } => output,
    }
}

fn emit(output: &Output, body: &[u8]) -> io::Result<()> {
    match &output.out {
        Some(path) => File::create(path)?.write_all(body),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(body)?;
            stdout.flush()
        }
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(&cli.command) {
        Ok(report) => {
            if let Err(e) = emit(output_of(&cli.command), &report.body) {
                eprintln!("error: cannot write output: {e}");
                return EXIT_USAGE;
            }
            if report.passed {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
