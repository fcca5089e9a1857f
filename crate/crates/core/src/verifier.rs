//! Finite-difference checks of the excessiveness conditions on the closed
//! forms, and a Monte Carlo check that `Y(t) = V(state) - C t` is a
//! supermartingale (and a martingale up to the optimal stopping time).
//!
//! Conditions, on `v = v_hat`:
//! * `a`: at `x = 0` the value does not depend on the rib.
//! * `b`: at `x = 0` the outward x-derivatives average to zero over ribs.
//! * `c`: at `x = s_r` the derivative in `s_r` vanishes.
//! * `d`: `v''/2 <= C` in x.
//! * `e`: `v >= s_1 + .. + s_n`.
//! * `f`: `v''/2 = C` where `v > s_1 + .. + s_n`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiderError};
use crate::mc::run_in_pool;
use crate::stats;
use crate::stopping::StoppingRule;
use crate::value_fn::{self, EvalPoint, ValueParams};
use crate::walk::{InitialState, LineState, PathRng, SpiderState, WalkConfig, WalkState, Walker};

/// Sampling grid for the finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h_fd: f64,
    /// Records range over `[0, s_max]`.
    pub s_max: f64,
    pub s_points: usize,
    /// Positions per record configuration.
    pub x_points: usize,
    /// Line only: positions range over `[s - x_depth, s]`.
    pub x_depth: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            h_fd: 1e-4,
            s_max: 2.0,
            s_points: 41,
            x_points: 41,
            x_depth: 1.5,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        let ok = self.h_fd.is_finite()
            && self.h_fd > 0.0
            && self.s_max.is_finite()
            && self.s_max > 0.0
            && self.s_points >= 2
            && self.x_points >= 2
            && self.x_depth.is_finite()
            && self.x_depth > 0.0
            && 4.0 * self.h_fd < self.s_max / (self.s_points - 1) as f64;
        if ok {
            Ok(())
        } else {
            Err(SpiderError::DegenerateGrid(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    /// False when the condition has no content for this rib count (for
    /// example the origin conditions on the line).
    pub applicable: bool,
    pub passed: bool,
    pub max_violation: f64,
    pub tolerance: f64,
    pub worst_point: Option<EvalPoint>,
    pub samples: usize,
    /// Stencils dropped because they come within `2 h_fd` of a hinge.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub params: ValueParams,
    pub grid: GridSpec,
    pub properties: BTreeMap<String, PropertyCheck>,
    pub all_passed: bool,
}

/// Derivative scales used by the tolerances: an `O(h^2)` truncation term
/// (`10 h^2` times a third-derivative bound `10 C`) plus a round-off term.
fn tolerance(c: f64, h: f64, scale: f64, order: i32) -> f64 {
    10.0 * h * h * (10.0 * c) + 64.0 * f64::EPSILON * scale / h.powi(order)
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..count)
        .map(|i| {
            if i + 1 == count {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (count - 1) as f64
            }
        })
        .collect()
}

fn record_grid(n: usize, grid: &GridSpec) -> Vec<Vec<f64>> {
    let axis = linspace(0.0, grid.s_max, grid.s_points);
    match n {
        0 | 1 => axis.iter().map(|&s| vec![s]).collect(),
        _ => axis
            .iter()
            .flat_map(|&a| axis.iter().map(move |&b| vec![a, b]))
            .collect(),
    }
}

fn x_range(n: usize, grid: &GridSpec, r: usize, s: &[f64]) -> (f64, f64) {
    if n == 0 {
        (s[0] - grid.x_depth, s[0])
    } else {
        (0.0, s[r])
    }
}

/// One sample of a condition: the checked quantity's deviation from its
/// target (`residual`) and the violation of the condition itself.
#[derive(Debug, Clone, Copy)]
struct Sample {
    residual: f64,
    violation: f64,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    samples: usize,
    excluded: usize,
    max_violation: f64,
    max_residual: f64,
    worst: Option<EvalPoint>,
}

impl Tally {
    fn add(&mut self, sample: Sample, at: impl FnOnce() -> EvalPoint) {
        self.samples += 1;
        self.max_residual = self.max_residual.max(sample.residual);
        if self.worst.is_none() || sample.violation > self.max_violation {
            self.max_violation = sample.violation;
            self.worst = Some(at());
        }
    }

    fn merge(&mut self, other: Tally) {
        self.samples += other.samples;
        self.excluded += other.excluded;
        self.max_residual = self.max_residual.max(other.max_residual);
        if other.worst.is_some() && (self.worst.is_none() || other.max_violation > self.max_violation) {
            self.max_violation = other.max_violation;
            self.worst = other.worst;
        }
    }
}

const NAMES: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

#[derive(Debug, Clone, Default)]
struct Scan {
    tallies: [Tally; 6],
    value_scale: f64,
}

impl Scan {
    fn merge(mut self, other: Scan) -> Scan {
        for (t, o) in self.tallies.iter_mut().zip(other.tallies) {
            t.merge(o);
        }
        self.value_scale = self.value_scale.max(other.value_scale);
        self
    }
}

/// Scans every grid point with stencil step `h`; stencils are kept only if
/// all nodes within `2 mask_h` share one smooth piece.
fn scan(params: &ValueParams, grid: &GridSpec, h: f64, mask_h: f64) -> Scan {
    let n = params.n;
    let c = params.c;
    let v = |x: f64, r: usize, s: &[f64]| value_fn::v_hat_raw(n, c, x, r, s);
    let piece = |x: f64, r: usize, s: &[f64]| value_fn::smooth_piece(params, x, r, s);
    let ribs = n.max(1);

    let per_record = |s: &Vec<f64>| -> Scan {
        let mut out = Scan::default();
        let sum: f64 = s.iter().sum();
        let [ta, tb, tc, td, te, tf] = &mut out.tallies;

        // a: rib independence at the origin
        if n == 2 {
            let d = (v(0.0, 0, s) - v(0.0, 1, s)).abs();
            ta.add(
                Sample {
                    residual: d,
                    violation: d,
                },
                || EvalPoint::spider(0.0, 0, s.clone()),
            );
        }

        // b: averaged outward derivative at the origin, one-sided stencil
        if n >= 1 {
            let usable = (0..ribs).all(|r| {
                s[r] >= 2.0 * h && {
                    let p0 = piece(0.0, r, s);
                    (1..=4).all(|k| piece(k as f64 * mask_h, r, s) == p0)
                }
            });
            if usable {
                let mean_slope = (0..ribs)
                    .map(|r| (-3.0 * v(0.0, r, s) + 4.0 * v(h, r, s) - v(2.0 * h, r, s)) / (2.0 * h))
                    .sum::<f64>()
                    / ribs as f64;
                tb.add(
                    Sample {
                        residual: mean_slope.abs(),
                        violation: mean_slope.abs(),
                    },
                    || EvalPoint::spider(0.0, 0, s.clone()),
                );
            } else {
                tb.excluded += 1;
            }
        }

        for r in 0..ribs {
            // c: derivative in the current record at x = s_r, forward stencil
            let x = s[r];
            let shifted = |k: f64| {
                let mut t = s.clone();
                t[r] += k;
                t
            };
            let p0 = piece(x, r, s);
            if (1..=4).all(|k| piece(x, r, &shifted(k as f64 * mask_h)) == p0) {
                let slope = (-3.0 * v(x, r, s) + 4.0 * v(x, r, &shifted(h)) - v(x, r, &shifted(2.0 * h)))
                    / (2.0 * h);
                tc.add(
                    Sample {
                        residual: slope.abs(),
                        violation: slope.abs(),
                    },
                    || EvalPoint {
                        x,
                        r,
                        s: s.clone(),
                    },
                );
            } else {
                tc.excluded += 1;
            }

            let (lo, hi) = x_range(n, grid, r, s);
            for x in linspace(lo, hi, grid.x_points) {
                let at = || EvalPoint {
                    x,
                    r,
                    s: s.clone(),
                };
                let value = v(x, r, s);
                out.value_scale = out.value_scale.max(value.abs());

                // e: dominance of the stop value, exact
                let gap = sum - value;
                te.add(
                    Sample {
                        residual: gap.max(0.0),
                        violation: gap.max(0.0),
                    },
                    at,
                );

                // d, f: second derivative in x, central stencil
                if x - h < lo || x + h > hi {
                    continue;
                }
                let p0 = piece(x, r, s);
                let smooth = [-2.0, -1.0, 1.0, 2.0]
                    .iter()
                    .all(|k| piece(x + k * mask_h, r, s) == p0);
                if !smooth {
                    td.excluded += 1;
                    tf.excluded += 1;
                    continue;
                }
                let half_second = 0.5 * (v(x + h, r, s) - 2.0 * value + v(x - h, r, s)) / (h * h);
                let continuing = !value_fn::stop_region_raw(n, c, x, r, s);
                let target = if continuing { c } else { 0.0 };
                td.add(
                    Sample {
                        residual: (half_second - target).abs(),
                        violation: (half_second - c).max(0.0),
                    },
                    at,
                );
                if continuing {
                    let dev = (half_second - c).abs();
                    tf.add(
                        Sample {
                            residual: dev,
                            violation: dev,
                        },
                        at,
                    );
                }
            }
        }
        out
    };

    record_grid(n, grid)
        .par_iter()
        .map(per_record)
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Scan::default(), Scan::merge)
}

fn check_supported(params: &ValueParams) -> Result<()> {
    if params.n > 2 {
        Err(SpiderError::UnsupportedN { n: params.n })
    } else {
        Ok(())
    }
}

/// Evaluates conditions `a`..`f` on the grid.
pub fn check_properties(params: &ValueParams, grid: &GridSpec) -> Result<PropertyReport> {
    check_supported(params)?;
    grid.validate()?;
    let h = grid.h_fd;
    let result = scan(params, grid, h, h);
    let scale = 1.0 + result.value_scale;
    let mut properties = BTreeMap::new();
    for (i, tally) in result.tallies.into_iter().enumerate() {
        let name = NAMES[i];
        let applicable = match name {
            "a" => params.n == 2,
            "b" => params.n >= 1,
            _ => true,
        };
        let tol = match name {
            "a" | "e" => value_fn::BOUNDARY_EPS * scale,
            "b" | "c" => tolerance(params.c, h, scale, 1),
            _ => tolerance(params.c, h, scale, 2),
        };
        let passed = !applicable || (tally.samples > 0 && tally.max_violation <= tol);
        properties.insert(
            name.to_string(),
            PropertyCheck {
                applicable,
                passed,
                max_violation: tally.max_violation,
                tolerance: tol,
                worst_point: tally.worst,
                samples: tally.samples,
                excluded: tally.excluded,
            },
        );
    }
    let all_passed = properties.values().all(|p| p.passed);
    Ok(PropertyReport {
        params: *params,
        grid: *grid,
        properties,
        all_passed,
    })
}

/// Residuals of the derivative checks at `h_fd` and `h_fd / 2` on the same
/// hinge-free stencils, and their ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdConvergence {
    pub h_coarse: f64,
    pub h_fine: f64,
    pub residual_coarse: BTreeMap<String, f64>,
    pub residual_fine: BTreeMap<String, f64>,
    /// `None` when the fine residual is zero.
    pub ratio: BTreeMap<String, Option<f64>>,
    pub band: (f64, f64),
    pub passed: bool,
    /// Same ratios for the same stencils applied to `exp` at 0.3, where the
    /// truncation error dominates round-off.
    pub control_ratio: BTreeMap<String, f64>,
}

pub const FD_RATIO_BAND: (f64, f64) = (3.0, 5.0);

pub fn fd_convergence(params: &ValueParams, grid: &GridSpec) -> Result<FdConvergence> {
    check_supported(params)?;
    grid.validate()?;
    let h = grid.h_fd;
    let coarse = scan(params, grid, h, h);
    let fine = scan(params, grid, h / 2.0, h);
    let mut residual_coarse = BTreeMap::new();
    let mut residual_fine = BTreeMap::new();
    let mut ratio = BTreeMap::new();
    let mut passed = true;
    for (i, name) in NAMES.iter().enumerate() {
        let checked = match *name {
            "b" => params.n >= 1,
            "c" | "d" | "f" => true,
            _ => false,
        };
        if !checked {
            continue;
        }
        let rc = coarse.tallies[i].max_residual;
        let rf = fine.tallies[i].max_residual;
        let q = (rf > 0.0).then(|| rc / rf);
        passed &= q.is_some_and(|q| q >= FD_RATIO_BAND.0 && q <= FD_RATIO_BAND.1);
        residual_coarse.insert(name.to_string(), rc);
        residual_fine.insert(name.to_string(), rf);
        ratio.insert(name.to_string(), q);
    }
    Ok(FdConvergence {
        h_coarse: h,
        h_fine: h / 2.0,
        residual_coarse,
        residual_fine,
        ratio,
        band: FD_RATIO_BAND,
        passed,
        control_ratio: control_ratios(1e-2),
    })
}

fn control_ratios(h: f64) -> BTreeMap<String, f64> {
    let x = 0.3f64;
    let exact = x.exp();
    let one_sided = |h: f64| ((-3.0 * x.exp() + 4.0 * (x + h).exp() - (x + 2.0 * h).exp()) / (2.0 * h) - exact).abs();
    let central = |h: f64| (((x + h).exp() - 2.0 * x.exp() + (x - h).exp()) / (h * h) - exact).abs();
    BTreeMap::from([
        ("one_sided_first".to_string(), one_sided(h) / one_sided(h / 2.0)),
        ("central_second".to_string(), central(h) / central(h / 2.0)),
    ])
}

/// Time grid of `Y(t)` means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleOptions {
    pub horizon: f64,
    /// Number of grid intervals; the grid has `intervals + 1` times.
    pub intervals: usize,
    pub n_paths: usize,
    /// When false, each path ends at the optimal stopping time and only the
    /// stopped series is reported.
    pub track_unstopped: bool,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub params: ValueParams,
    pub initial: EvalPoint,
    pub h: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub times: Vec<f64>,
    pub y0: f64,
    /// `Y(t)`; present when tracked.
    pub unstopped: Option<Series>,
    /// `Y(t ^ tau*)`, `tau*` the first entry into the stopping set.
    pub stopped: Series,
    /// Every unstopped mean is at most `Y(0) + 3 se` (stopped series when the
    /// unstopped one is not tracked).
    pub verdict: bool,
    /// Every stopped mean is within `3 se` of `Y(0)`.
    pub stopped_constant: bool,
    /// Fraction of paths not yet stopped at the horizon.
    pub unstopped_at_horizon: f64,
}

fn initial_state(n: usize, p: &EvalPoint) -> InitialState {
    if n == 0 {
        InitialState::Line(LineState {
            x: p.x,
            s: p.s[0],
            elapsed: 0.0,
        })
    } else {
        InitialState::Spider(SpiderState {
            x: p.x,
            r: p.r,
            s: p.s.clone(),
            elapsed: 0.0,
        })
    }
}

fn y_of(n: usize, c: f64, state: WalkState<'_>) -> f64 {
    let v = match state {
        WalkState::Line(st) => value_fn::v_hat_raw(0, c, st.x, 0, &[st.s]),
        WalkState::Spider(st) => value_fn::v_hat_raw(n, c, st.x, st.r, &st.s),
    };
    v - c * state.elapsed()
}

fn series(columns: &[Vec<f64>], len: usize) -> Series {
    let mut mean = Vec::with_capacity(len);
    let mut stderr = Vec::with_capacity(len);
    for k in 0..len {
        let col: Vec<f64> = columns.iter().map(|row| row[k]).collect();
        mean.push(stats::mean(&col));
        stderr.push(stats::std_error(&col));
    }
    Series { mean, stderr }
}

/// Simulates `Y(t) = V(state) - C t` from `initial` on a fixed time grid.
pub fn supermartingale_mc(
    params: &ValueParams,
    initial: &EvalPoint,
    config: &WalkConfig,
    opts: &SupermartingaleOptions,
) -> Result<SupermartingaleReport> {
    check_supported(params)?;
    initial.validate(params.n)?;
    config.validate()?;
    if config.ribs != params.n {
        return Err(SpiderError::DimensionMismatch {
            expected: config.ribs,
            got: params.n,
        });
    }
    if !(opts.horizon.is_finite() && opts.horizon >= 0.0) || opts.n_paths < 2 {
        return Err(SpiderError::InvalidParameter(format!(
            "need horizon >= 0 and at least 2 paths, got {opts:?}"
        )));
    }
    let n = params.n;
    let c = params.c;
    let intervals = if opts.horizon == 0.0 { 0 } else { opts.intervals.max(1) };
    let total = config.steps_for(opts.horizon);
    if total > config.max_steps {
        return Err(SpiderError::ExcessiveCensoring {
            fraction: 1.0,
            threshold: 0.0,
        });
    }
    let marks: Vec<u64> = (0..=intervals)
        .map(|k| {
            if intervals == 0 {
                0
            } else {
                (total as u128 * k as u128 / intervals as u128) as u64
            }
        })
        .collect();
    let times: Vec<f64> = marks.iter().map(|&m| m as f64 * config.dt()).collect();
    let start = initial_state(n, initial);
    let rule = StoppingRule::FirstEntry { c }.compile(config.h);
    let y0 = value_fn::v_hat_raw(n, c, initial.x, initial.r, &initial.s);

    let run = |path: usize| -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let mut rng = PathRng::for_path(config.seed, path as u64);
        let mut walker = Walker::new(&start, config)?;
        let mut free = Vec::with_capacity(marks.len());
        let mut frozen = Vec::with_capacity(marks.len());
        let mut stop_value: Option<f64> = None;
        for &mark in &marks {
            while walker.steps() < mark {
                if stop_value.is_some() && !opts.track_unstopped {
                    break;
                }
                walker.step(&mut rng);
                if stop_value.is_none() && rule.fires(walker.state()) {
                    stop_value = Some(y_of(n, c, walker.state()));
                }
            }
            if walker.steps() == 0 && stop_value.is_none() && rule.fires(walker.state()) {
                stop_value = Some(y_of(n, c, walker.state()));
            }
            let here = stop_value.unwrap_or_else(|| y_of(n, c, walker.state()));
            frozen.push(here);
            if opts.track_unstopped {
                free.push(y_of(n, c, walker.state()));
            }
        }
        Ok((free, frozen, stop_value.is_none()))
    };

    let rows = run_in_pool(opts.threads, || {
        (0..opts.n_paths)
            .into_par_iter()
            .with_min_len(16)
            .map(run)
            .collect::<Result<Vec<_>>>()
    })??;

    let len = marks.len();
    let frozen: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
    let stopped = series(&frozen, len);
    let unstopped = opts.track_unstopped.then(|| {
        let free: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        series(&free, len)
    });
    let pending = rows.iter().filter(|r| r.2).count();
    let within = |s: &Series, two_sided: bool| {
        s.mean.iter().zip(&s.stderr).all(|(&m, &se)| {
            let band = 3.0 * se + 1e-12 * (1.0 + y0.abs());
            m <= y0 + band && (!two_sided || m >= y0 - band)
        })
    };
    let verdict = within(unstopped.as_ref().unwrap_or(&stopped), false);
    let stopped_constant = within(&stopped, true);
    Ok(SupermartingaleReport {
        params: *params,
        initial: initial.clone(),
        h: config.h,
        seed: config.seed,
        n_paths: opts.n_paths,
        times,
        y0,
        unstopped,
        stopped,
        verdict,
        stopped_constant,
        unstopped_at_horizon: pending as f64 / opts.n_paths as f64,
    })
}
