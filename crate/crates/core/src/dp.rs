//! Lattice dynamic programming for the penalized problem at unit cost.
//!
//! States are `(x, r, s_1, .., s_n)` on the `h`-lattice with the walk of
//! [`crate::walk`]: one step costs `h^2` and the stop value is `s_1 + .. +
//! s_n`. Records never decrease, so the state space splits into slices of
//! fixed record multiset. A slice depends only on slices whose record sum is
//! one step larger, and inside a slice the states form a star: the origin
//! plus one chain per record value. Slices are solved exactly in order of
//! decreasing record sum, either by policy iteration (tridiagonal solves) or
//! by Gauss-Seidel value iteration started at the stop value.
//!
//! A slice in which some record reaches `s_max` is clamped to its stop value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiderError};
use crate::mc::run_in_pool;
use crate::value_fn::EvalPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PolicyIteration,
    ValueIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    /// Cap on policy-iteration rounds or value-iteration sweeps per slice.
    pub max_iters: u64,
    pub threads: usize,
    /// Keep every state's value for [`DPGrid::value_at`].
    pub keep_surface: bool,
    pub method: Method,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 10_000,
            threads: 0,
            keep_surface: false,
            method: Method::PolicyIteration,
        }
    }
}

/// Solved grid. Values are at unit cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DPGrid {
    pub n: usize,
    pub h: f64,
    pub s_max: f64,
    /// Line only: depth below the running maximum at which the walk is
    /// stopped.
    pub x_depth: Option<f64>,
    pub method: Method,
    pub tol: f64,
    pub theta_estimate: f64,
    /// Policy-iteration rounds (or sweeps) summed over slices.
    pub iterations: u64,
    pub max_slice_iterations: u64,
    /// Sup-norm Bellman residual over all states.
    pub residual: f64,
    /// Bellman residual over states with a record within `2h` of `s_max`.
    pub boundary_settlement: f64,
    /// Probability, from the origin under the computed policy, of pushing a
    /// record to `s_max` before stopping.
    pub face_hit_probability: f64,
    pub slices: usize,
    pub states: u64,
    #[serde(skip)]
    surface: Option<Surface>,
}

#[derive(Debug, Clone, PartialEq)]
struct Surface {
    /// Spider: per slice rank, the origin followed by one chain for each
    /// distinct positive record value, ascending. Line: per record index, the chain from the
    /// depth clamp up to the record.
    values: Vec<Vec<f64>>,
}

/// A lattice state reduced by rib symmetry: the current rib's record and the
/// other records sorted in descending order, all in units of `h`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalState {
    pub x: i64,
    pub r_s: i64,
    pub others: Vec<i64>,
}

fn lattice(v: f64, h: f64, what: &str) -> Result<i64> {
    let k = (v / h).round();
    if (v - k * h).abs() > 1e-9 * h.max(v.abs()) {
        return Err(SpiderError::DomainViolation(format!(
            "{what} = {v} is not a multiple of h = {h}"
        )));
    }
    Ok(k as i64)
}

impl CanonicalState {
    pub fn from_point(h: f64, p: &EvalPoint) -> Result<Self> {
        if p.r >= p.s.len() {
            return Err(SpiderError::DomainViolation(format!("rib {} out of range", p.r)));
        }
        let x = lattice(p.x, h, "x")?;
        let r_s = lattice(p.s[p.r], h, "record")?;
        let mut others = p
            .s
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != p.r)
            .map(|(_, &v)| lattice(v, h, "record"))
            .collect::<Result<Vec<_>>>()?;
        others.sort_unstable_by(|a, b| b.cmp(a));
        if x < 0 || x > r_s || others.iter().any(|&m| m < 0) {
            return Err(SpiderError::DomainViolation("need 0 <= x <= s[r]".into()));
        }
        Ok(Self { x, r_s, others })
    }

    /// All records, ascending.
    fn records(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self.others.iter().map(|&m| m as u32).collect();
        all.push(self.r_s as u32);
        all.sort_unstable();
        all
    }
}

/// Ranks ascending multisets of `n` values from `0..k` by the combinatorial
/// number system.
struct Ranker {
    n: usize,
    binom: Vec<Vec<u64>>,
}

impl Ranker {
    fn new(n: usize, k: usize) -> Self {
        let top = k + n;
        let mut binom = vec![vec![0u64; n + 1]; top + 1];
        for (i, row) in binom.iter_mut().enumerate() {
            row[0] = 1;
            for j in 1..=n.min(i) {
                row[j] = 0;
            }
        }
        for i in 1..=top {
            for j in 1..=n {
                binom[i][j] = binom[i - 1][j - 1] + binom[i - 1][j];
            }
        }
        Self { n, binom }
    }

    fn count(&self, k: usize) -> usize {
        self.binom[k + self.n - 1][self.n] as usize
    }

    fn rank(&self, key: &[u32]) -> usize {
        key.iter()
            .enumerate()
            .map(|(i, &a)| self.binom[a as usize + i][i + 1])
            .sum::<u64>() as usize
    }
}

/// Ascending multisets of `n` values in `0..k`, bucketed by sum.
fn slices_by_level(n: usize, k: u32) -> Vec<Vec<u32>> {
    let levels = n * (k as usize - 1) + 1;
    let mut buckets = vec![Vec::new(); levels];
    let mut key = vec![0u32; n];
    fn fill(pos: usize, lo: u32, k: u32, key: &mut [u32], buckets: &mut [Vec<u32>]) {
        if pos == key.len() {
            let sum: u32 = key.iter().sum();
            buckets[sum as usize].extend_from_slice(key);
            return;
        }
        for v in lo..k {
            key[pos] = v;
            fill(pos + 1, v, k, key, buckets);
        }
    }
    fill(0, 0, k, &mut key, &mut buckets);
    buckets
}

/// One arm of the star: `len` states above the origin, leaving at the top
/// to a known exit value.
#[derive(Debug, Clone)]
struct Chain {
    len: usize,
    /// Probability that the origin step enters this arm.
    weight: f64,
    exit: f64,
    stop: Vec<bool>,
    v: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Chain {
    fn new(len: usize, weight: f64, exit: f64, init: f64) -> Self {
        Self {
            len,
            weight,
            exit,
            stop: vec![false; len],
            v: vec![init; len],
            alpha: vec![0.0; len],
            beta: vec![0.0; len],
        }
    }

    /// Value one step above the origin.
    fn first(&self) -> f64 {
        if self.len == 0 {
            self.exit
        } else {
            self.v[0]
        }
    }

    fn neighbors(&self, k: usize, origin: f64) -> (f64, f64) {
        let below = if k == 0 { origin } else { self.v[k - 1] };
        let above = if k + 1 == self.len { self.exit } else { self.v[k + 1] };
        (below, above)
    }

    /// Solves the chain's linear system for the current policy with values
    /// affine in the origin value: `v_k = alpha_k + beta_k * origin`.
    fn solve_affine(&mut self, stop_value: f64, cost: f64, cp: &mut Vec<f64>) {
        let m = self.len;
        if m == 0 {
            return;
        }
        cp.clear();
        cp.resize(m, 0.0);
        for k in 0..m {
            let (sub, diag, sup, mut d0, mut d1) = if self.stop[k] {
                (0.0, 1.0, 0.0, stop_value, 0.0)
            } else {
                let mut d0 = -cost;
                let mut d1 = 0.0;
                let sub = if k == 0 {
                    d1 += 0.5;
                    0.0
                } else {
                    -0.5
                };
                let sup = if k + 1 == m {
                    d0 += 0.5 * self.exit;
                    0.0
                } else {
                    -0.5
                };
                (sub, 1.0, sup, d0, d1)
            };
            let mut denom = diag;
            if k > 0 {
                denom -= sub * cp[k - 1];
                d0 -= sub * self.alpha[k - 1];
                d1 -= sub * self.beta[k - 1];
            }
            cp[k] = sup / denom;
            self.alpha[k] = d0 / denom;
            self.beta[k] = d1 / denom;
        }
        for k in (0..m - 1).rev() {
            self.alpha[k] -= cp[k] * self.alpha[k + 1];
            self.beta[k] -= cp[k] * self.beta[k + 1];
        }
    }

    fn realize(&mut self, origin: f64) {
        for k in 0..self.len {
            self.v[k] = self.alpha[k] + self.beta[k] * origin;
        }
    }
}

/// The origin of a slice: free (spider) or held at a known value (line,
/// where the chain bottom is the depth clamp).
#[derive(Debug, Clone, Copy)]
enum Origin {
    Free { stop: bool, v: f64 },
    Fixed(f64),
}

impl Origin {
    fn value(&self) -> f64 {
        match *self {
            Origin::Free { v, .. } | Origin::Fixed(v) => v,
        }
    }
}

struct Star {
    origin: Origin,
    chains: Vec<Chain>,
}

impl Star {
    fn origin_continuation(&self, cost: f64) -> f64 {
        self.chains.iter().map(|c| c.weight * c.first()).sum::<f64>() - cost
    }

    /// Evaluates the current policy exactly.
    fn evaluate(&mut self, stop_value: f64, cost: f64, cp: &mut Vec<f64>) {
        for ch in &mut self.chains {
            ch.solve_affine(stop_value, cost, cp);
        }
        let origin = match self.origin {
            Origin::Fixed(v) => v,
            Origin::Free { stop: true, .. } => stop_value,
            Origin::Free { stop: false, .. } => {
                let (mut a, mut b) = (-cost, 0.0);
                for ch in &self.chains {
                    if ch.len == 0 {
                        a += ch.weight * ch.exit;
                    } else {
                        a += ch.weight * ch.alpha[0];
                        b += ch.weight * ch.beta[0];
                    }
                }
                a / (1.0 - b)
            }
        };
        if let Origin::Free { v, .. } = &mut self.origin {
            *v = origin;
        }
        for ch in &mut self.chains {
            ch.realize(origin);
        }
    }

    /// Howard improvement; returns true if the policy changed.
    fn improve(&mut self, stop_value: f64, cost: f64, eps: f64) -> bool {
        let mut changed = false;
        let origin = self.origin.value();
        for ch in &mut self.chains {
            for k in 0..ch.len {
                let (lo, hi) = ch.neighbors(k, origin);
                let cont = 0.5 * (lo + hi) - cost;
                let want = if ch.stop[k] {
                    !(cont > stop_value + eps)
                } else {
                    stop_value > cont + eps
                };
                changed |= want != ch.stop[k];
                ch.stop[k] = want;
            }
        }
        let cont = self.origin_continuation(cost);
        if let Origin::Free { stop, .. } = &mut self.origin {
            let want = if *stop {
                !(cont > stop_value + eps)
            } else {
                stop_value > cont + eps
            };
            changed |= want != *stop;
            *stop = want;
        }
        changed
    }

    /// Gauss-Seidel sweep of `v <- max(stop, mean of neighbors - cost)`;
    /// returns the largest change. Values never decrease.
    fn sweep(&mut self, stop_value: f64, cost: f64) -> f64 {
        let mut delta = 0.0f64;
        if let Origin::Free { .. } = self.origin {
            let new = stop_value.max(self.origin_continuation(cost));
            let old = self.origin.value();
            assert!(new >= old - 1e-12 * (1.0 + old.abs()), "sweep decreased the origin value");
            delta = delta.max(new - old);
            self.origin = Origin::Free { stop: false, v: new };
        }
        let origin = self.origin.value();
        for ch in &mut self.chains {
            for k in 0..ch.len {
                let (lo, hi) = ch.neighbors(k, origin);
                let new = stop_value.max(0.5 * (lo + hi) - cost);
                let old = ch.v[k];
                assert!(new >= old - 1e-12 * (1.0 + old.abs()), "sweep decreased a value");
                delta = delta.max(new - old);
                ch.v[k] = new;
            }
        }
        delta
    }

    fn set_policy_from_values(&mut self, stop_value: f64, eps: f64) {
        for ch in &mut self.chains {
            for k in 0..ch.len {
                ch.stop[k] = ch.v[k] <= stop_value + eps;
            }
        }
        if let Origin::Free { stop, v } = &mut self.origin {
            *stop = *v <= stop_value + eps;
        }
    }

    fn bellman_residual(&self, stop_value: f64, cost: f64) -> f64 {
        let origin = self.origin.value();
        let mut r = 0.0f64;
        if let Origin::Free { v, .. } = self.origin {
            r = r.max((v - stop_value.max(self.origin_continuation(cost))).abs());
        }
        for ch in &self.chains {
            for k in 0..ch.len {
                let (lo, hi) = ch.neighbors(k, origin);
                r = r.max((ch.v[k] - stop_value.max(0.5 * (lo + hi) - cost)).abs());
            }
        }
        r
    }

    fn solve(&mut self, stop_value: f64, cost: f64, opts: &SolveOptions) -> Result<u64> {
        let eps = 1e-13 * (1.0 + stop_value.abs());
        let mut cp = Vec::new();
        match opts.method {
            Method::PolicyIteration => {
                for round in 1..=opts.max_iters {
                    self.evaluate(stop_value, cost, &mut cp);
                    if !self.improve(stop_value, cost, eps) {
                        return Ok(round);
                    }
                }
                Err(SpiderError::NonConvergence {
                    iterations: opts.max_iters,
                    residual: self.bellman_residual(stop_value, cost),
                })
            }
            Method::ValueIteration => {
                for sweep in 1..=opts.max_iters {
                    if self.sweep(stop_value, cost) <= opts.tol {
                        self.set_policy_from_values(stop_value, eps);
                        return Ok(sweep);
                    }
                }
                Err(SpiderError::NonConvergence {
                    iterations: opts.max_iters,
                    residual: self.bellman_residual(stop_value, cost),
                })
            }
        }
    }

    /// Probability of leaving through the top of some chain before stopping,
    /// under the current policy, given the exit probabilities.
    fn exit_probability(&self, exits: &[f64]) -> (f64, Vec<f64>) {
        let mut probe = Star {
            origin: match self.origin {
                Origin::Fixed(_) => Origin::Fixed(0.0),
                Origin::Free { stop, .. } => Origin::Free { stop, v: 0.0 },
            },
            chains: self
                .chains
                .iter()
                .zip(exits)
                .map(|(ch, &e)| {
                    let mut c = Chain::new(ch.len, ch.weight, e, 0.0);
                    c.stop.clone_from(&ch.stop);
                    c
                })
                .collect(),
        };
        probe.evaluate(0.0, 0.0, &mut Vec::new());
        let tips = probe
            .chains
            .iter()
            .map(|c| if c.len == 0 { f64::NAN } else { c.v[c.len - 1] })
            .collect();
        (probe.origin.value(), tips)
    }
}

fn check_grid(h: f64, s_max: f64) -> Result<u32> {
    if !(h.is_finite() && h > 0.0 && s_max.is_finite() && s_max > 0.0) {
        return Err(SpiderError::DegenerateGrid(format!("h = {h}, s_max = {s_max}")));
    }
    let k = (s_max / h).round();
    if (k * h - s_max).abs() > 1e-9 * s_max || k < 2.0 || k > u32::MAX as f64 / 8.0 {
        return Err(SpiderError::DegenerateGrid(format!(
            "h = {h} must divide s_max = {s_max} at least twice"
        )));
    }
    Ok(k as u32)
}

fn check_opts(opts: &SolveOptions) -> Result<()> {
    if !(opts.tol.is_finite() && opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(SpiderError::InvalidParameter(format!(
            "need tol > 0 and max_iters >= 1, got {opts:?}"
        )));
    }
    Ok(())
}

/// Result of one slice.
struct SliceSolution {
    origin: f64,
    /// Value at the top of the arm of each sorted key position.
    tips: Vec<f64>,
    p_origin: f64,
    p_tips: Vec<f64>,
    iterations: u64,
    residual: f64,
    states: u64,
    surface: Option<Vec<f64>>,
}

struct Tables {
    tips: Vec<f64>,
    p_tips: Vec<f64>,
}

/// Solves the spider problem with `n >= 1` ribs at unit cost.
pub fn solve(n: usize, h: f64, s_max: f64, opts: &SolveOptions) -> Result<DPGrid> {
    if n == 0 {
        return Err(SpiderError::InvalidParameter(
            "n = 0 is the line; use solve_line".into(),
        ));
    }
    check_opts(opts)?;
    let k = check_grid(h, s_max)?;
    let ranker = Ranker::new(n, k as usize);
    let total = ranker.count(k as usize);
    let levels = slices_by_level(n, k);
    let cost = h * h;
    let near_face = k.saturating_sub(2);

    let solve_slice = |key: &[u32], tables: &Tables| -> Result<SliceSolution> {
        let stop_value = h * key.iter().sum::<u32>() as f64;
        let exit_of = |pos: usize| -> (f64, f64) {
            // raise the last copy of key[pos] so the key stays sorted
            let m = key[pos];
            if m + 1 == k {
                return (stop_value + h, 1.0);
            }
            let last = (pos..n).take_while(|&j| key[j] == m).last().unwrap_or(pos);
            let mut next = key.to_vec();
            next[last] = m + 1;
            let idx = ranker.rank(&next) * n + last;
            (tables.tips[idx], tables.p_tips[idx])
        };
        // one chain per distinct record value
        let mut groups: Vec<(usize, u32, usize)> = Vec::new(); // (first pos, value, count)
        for (pos, &m) in key.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.1 == m => g.2 += 1,
                _ => groups.push((pos, m, 1)),
            }
        }
        let mut p_exits = Vec::with_capacity(groups.len());
        let chains: Vec<Chain> = groups
            .iter()
            .map(|&(pos, m, count)| {
                let (e, pe) = exit_of(pos);
                p_exits.push(pe);
                Chain::new(m as usize, count as f64 / n as f64, e, stop_value)
            })
            .collect();
        let mut star = Star {
            origin: Origin::Free {
                stop: false,
                v: stop_value,
            },
            chains,
        };
        let iterations = star.solve(stop_value, cost, opts)?;
        let residual = star.bellman_residual(stop_value, cost);
        let (p_origin, p_group_tips) = star.exit_probability(&p_exits);
        let mut tips = vec![f64::NAN; n];
        let mut p_tips = vec![f64::NAN; n];
        for (g, &(pos, _, count)) in groups.iter().enumerate() {
            let ch = &star.chains[g];
            if ch.len > 0 {
                for j in pos..pos + count {
                    tips[j] = ch.v[ch.len - 1];
                    p_tips[j] = p_group_tips[g];
                }
            }
        }
        let states = 1 + star.chains.iter().map(|c| c.len as u64).sum::<u64>();
        let surface = opts.keep_surface.then(|| {
            let mut flat = vec![star.origin.value()];
            for ch in &star.chains {
                flat.extend_from_slice(&ch.v);
            }
            flat
        });
        Ok(SliceSolution {
            origin: star.origin.value(),
            tips,
            p_origin,
            p_tips,
            iterations,
            residual,
            states,
            surface,
        })
    };

    let mut tables = Tables {
        tips: vec![f64::NAN; total * n],
        p_tips: vec![f64::NAN; total * n],
    };
    let mut origins = vec![f64::NAN; total];
    let mut p_origins = vec![f64::NAN; total];
    let mut surface = opts.keep_surface.then(|| vec![Vec::new(); total]);
    let mut acc = Accumulator::default();

    run_in_pool(opts.threads, || -> Result<()> {
        for bucket in levels.iter().rev() {
            let solved = bucket
                .par_chunks(n)
                .map(|key| solve_slice(key, &tables))
                .collect::<Result<Vec<_>>>()?;
            for (key, sol) in bucket.chunks(n).zip(solved) {
                let idx = ranker.rank(key);
                tables.tips[idx * n..(idx + 1) * n].copy_from_slice(&sol.tips);
                tables.p_tips[idx * n..(idx + 1) * n].copy_from_slice(&sol.p_tips);
                origins[idx] = sol.origin;
                p_origins[idx] = sol.p_origin;
                acc.add(&sol, key.iter().any(|&m| m >= near_face));
                if let (Some(all), Some(vals)) = (surface.as_mut(), sol.surface) {
                    all[idx] = vals;
                }
            }
        }
        Ok(())
    })??;

    let origin_rank = ranker.rank(&vec![0; n]);
    finish(
        DPGrid {
            n,
            h,
            s_max,
            x_depth: None,
            method: opts.method,
            tol: opts.tol,
            theta_estimate: origins[origin_rank],
            iterations: acc.iterations,
            max_slice_iterations: acc.max_iterations,
            residual: acc.residual,
            boundary_settlement: acc.settlement,
            face_hit_probability: p_origins[origin_rank],
            slices: total,
            states: acc.states,
            surface: surface.map(|values| Surface { values }),
        },
        opts,
    )
}

#[derive(Default)]
struct Accumulator {
    iterations: u64,
    max_iterations: u64,
    residual: f64,
    settlement: f64,
    states: u64,
}

impl Accumulator {
    fn add(&mut self, sol: &SliceSolution, near_face: bool) {
        self.iterations += sol.iterations;
        self.max_iterations = self.max_iterations.max(sol.iterations);
        self.residual = self.residual.max(sol.residual);
        if near_face {
            self.settlement = self.settlement.max(sol.residual);
        }
        self.states += sol.states;
    }
}

fn finish(grid: DPGrid, opts: &SolveOptions) -> Result<DPGrid> {
    if !(grid.residual <= opts.tol) {
        return Err(SpiderError::NonConvergence {
            iterations: grid.max_slice_iterations,
            residual: grid.residual,
        });
    }
    if !(grid.boundary_settlement <= opts.tol) {
        return Err(SpiderError::TruncationContaminated {
            movement: grid.boundary_settlement,
            tol: opts.tol,
        });
    }
    Ok(grid)
}

/// Solves the line problem: states `(x, s)` with `s - x_depth <= x <= s`,
/// stopped at depth `x_depth` and at `s = s_max`.
pub fn solve_line(h: f64, x_depth: f64, s_max: f64, opts: &SolveOptions) -> Result<DPGrid> {
    check_opts(opts)?;
    let k = check_grid(h, s_max)?;
    let depth = check_grid(h, x_depth)? as usize;
    let cost = h * h;
    let mut tips = vec![f64::NAN; k as usize];
    let mut p_tips = vec![f64::NAN; k as usize];
    let mut surface = opts.keep_surface.then(|| vec![Vec::new(); k as usize]);
    let mut acc = Accumulator::default();
    for m in (0..k).rev() {
        let stop_value = h * m as f64;
        let (exit, p_exit) = if m + 1 == k {
            (stop_value + h, 1.0)
        } else {
            (tips[m as usize + 1], p_tips[m as usize + 1])
        };
        // chain from depth x_depth - h (index 0) up to the record (top)
        let mut star = Star {
            origin: Origin::Fixed(stop_value),
            chains: vec![Chain::new(depth, 1.0, exit, stop_value)],
        };
        let iterations = star.solve(stop_value, cost, opts)?;
        let residual = star.bellman_residual(stop_value, cost);
        let (_, p_top) = star.exit_probability(&[p_exit]);
        let ch = &star.chains[0];
        tips[m as usize] = ch.v[depth - 1];
        p_tips[m as usize] = p_top[0];
        let sol = SliceSolution {
            origin: stop_value,
            tips: Vec::new(),
            p_origin: 0.0,
            p_tips: Vec::new(),
            iterations,
            residual,
            states: depth as u64,
            surface: None,
        };
        acc.add(&sol, m + 2 >= k);
        if let Some(all) = surface.as_mut() {
            all[m as usize] = ch.v.clone();
        }
    }
    finish(
        DPGrid {
            n: 0,
            h,
            s_max,
            x_depth: Some(x_depth),
            method: opts.method,
            tol: opts.tol,
            theta_estimate: tips[0],
            iterations: acc.iterations,
            max_slice_iterations: acc.max_iterations,
            residual: acc.residual,
            boundary_settlement: acc.settlement,
            face_hit_probability: p_tips[0],
            slices: k as usize,
            states: acc.states,
            surface: surface.map(|values| Surface { values }),
        },
        opts,
    )
}

impl DPGrid {
    fn k(&self) -> u32 {
        (self.s_max / self.h).round() as u32
    }

    pub fn has_surface(&self) -> bool {
        self.surface.is_some()
    }

    /// Value at a lattice point; needs a grid solved with `keep_surface`.
    /// Points with a record at `s_max` return the clamped stop value.
    pub fn value_at(&self, p: &EvalPoint) -> Result<f64> {
        let surface = self.surface.as_ref().ok_or_else(|| {
            SpiderError::InvalidParameter("grid was solved without keep_surface".into())
        })?;
        p.validate(self.n)?;
        let h = self.h;
        let k = self.k() as i64;
        if self.n == 0 {
            let m = lattice(p.s[0], h, "s")?;
            let x = lattice(p.x, h, "x")?;
            if m > k {
                return Err(SpiderError::DomainViolation(format!("s beyond s_max = {}", self.s_max)));
            }
            let depth = (self.x_depth.unwrap_or(0.0) / h).round() as i64;
            let d = m - x;
            if m == k || d >= depth {
                return Ok(m as f64 * h);
            }
            return Ok(surface.values[m as usize][(depth - 1 - d) as usize]);
        }
        let state = CanonicalState::from_point(h, p)?;
        let key = state.records();
        if key.iter().any(|&m| m as i64 > k) {
            return Err(SpiderError::DomainViolation(format!("record beyond s_max = {}", self.s_max)));
        }
        if key.iter().any(|&m| m as i64 == k) {
            return Ok(h * key.iter().sum::<u32>() as f64);
        }
        let values = &surface.values[Ranker::new(self.n, self.k() as usize).rank(&key)];
        if state.x == 0 {
            return Ok(values[0]);
        }
        let mut offset = 1usize;
        let mut prev = None;
        for &m in &key {
            if prev == Some(m) {
                continue;
            }
            prev = Some(m);
            if m as i64 == state.r_s {
                return Ok(values[offset + state.x as usize - 1]);
            }
            offset += m as usize;
        }
        unreachable!("current record is in the key")
    }

    /// Every lattice state of the solved grid, one representative per
    /// symmetry class, with its value. Needs `keep_surface`.
    pub fn states_iter(&self) -> Result<Vec<(EvalPoint, f64)>> {
        let surface = self.surface.as_ref().ok_or_else(|| {
            SpiderError::InvalidParameter("grid was solved without keep_surface".into())
        })?;
        let h = self.h;
        let mut out = Vec::new();
        if self.n == 0 {
            let depth = (self.x_depth.unwrap_or(0.0) / h).round() as usize;
            for (m, chain) in surface.values.iter().enumerate() {
                for (i, &v) in chain.iter().enumerate() {
                    let d = depth - 1 - i;
                    out.push((EvalPoint::line((m as f64 - d as f64) * h, m as f64 * h), v));
                }
            }
            return Ok(out);
        }
        let k = self.k();
        let ranker = Ranker::new(self.n, k as usize);
        for bucket in slices_by_level(self.n, k) {
            for key in bucket.chunks(self.n) {
                let values = &surface.values[ranker.rank(key)];
                let s: Vec<f64> = key.iter().map(|&m| m as f64 * h).collect();
                out.push((EvalPoint::spider(0.0, 0, s.clone()), values[0]));
                let mut offset = 1usize;
                for (pos, &m) in key.iter().enumerate() {
                    if pos > 0 && key[pos - 1] == m {
                        continue;
                    }
                    for x in 1..=m as usize {
                        out.push((
                            EvalPoint::spider(x as f64 * h, pos, s.clone()),
                            values[offset + x - 1],
                        ));
                    }
                    offset += m as usize;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub h: f64,
    pub theta: f64,
    pub iterations: u64,
    pub residual: f64,
    pub boundary_settlement: f64,
    pub face_hit_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub n: usize,
    pub s_max: f64,
    pub x_depth: Option<f64>,
    pub rows: Vec<StudyRow>,
    pub refinement_ratio: f64,
    /// Successive differences keep one sign and shrink.
    pub monotone: bool,
    /// `(theta_1 - theta_2) / (theta_2 - theta_3)` over the last three rows.
    pub error_ratio: Option<f64>,
    /// First-order Richardson value from the last two rows; absent when the
    /// sequence is not monotone.
    pub extrapolated: Option<f64>,
    pub error_bar: Option<f64>,
    /// n = 3 only: extrapolated value minus 1.
    pub deviation_from_one: Option<f64>,
}

/// Solves at each `h` (decreasing, constant ratio) and extrapolates to
/// `h = 0` assuming first-order error. `s_max` and `x_depth` are rounded up
/// to multiples of the coarsest step; the values used are reported.
pub fn convergence_study(
    n: usize,
    h_list: &[f64],
    s_max: f64,
    x_depth: f64,
    opts: &SolveOptions,
) -> Result<ConvergenceStudy> {
    if h_list.len() < 3 {
        return Err(SpiderError::InvalidParameter("need at least three grid steps".into()));
    }
    let rho = h_list[0] / h_list[1];
    let constant = h_list
        .windows(2)
        .all(|w| w[1] < w[0] && ((w[0] / w[1]) - rho).abs() <= 1e-9 * rho);
    if !(rho > 1.0) || !constant {
        return Err(SpiderError::InvalidParameter(format!(
            "grid steps must decrease with a constant ratio, got {h_list:?}"
        )));
    }
    let opts = SolveOptions {
        keep_surface: false,
        ..*opts
    };
    // every step of the ladder must divide the truncation bounds
    let coarse = h_list[0];
    let align = |v: f64| (v / coarse - 1e-9).ceil() * coarse;
    let (s_max, x_depth) = (align(s_max), align(x_depth));
    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let grid = if n == 0 {
            solve_line(h, x_depth, s_max, &opts)?
        } else {
            solve(n, h, s_max, &opts)?
        };
        rows.push(StudyRow {
            h,
            theta: grid.theta_estimate,
            iterations: grid.iterations,
            residual: grid.residual,
            boundary_settlement: grid.boundary_settlement,
            face_hit_probability: grid.face_hit_probability,
        });
    }
    let thetas: Vec<f64> = rows.iter().map(|r| r.theta).collect();
    let diffs: Vec<f64> = thetas.windows(2).map(|w| w[1] - w[0]).collect();
    let monotone = diffs.iter().all(|&d| d != 0.0 && d.signum() == diffs[0].signum())
        && diffs.windows(2).all(|w| w[1].abs() < w[0].abs());
    let m = thetas.len();
    let error_ratio = (diffs[m - 2] != 0.0).then(|| diffs[m - 3] / diffs[m - 2]);
    let (extrapolated, error_bar) = if monotone {
        let e = thetas[m - 1] + (thetas[m - 1] - thetas[m - 2]) / (rho - 1.0);
        (Some(e), Some((thetas[m - 1] - e).abs()))
    } else {
        (None, None)
    };
    Ok(ConvergenceStudy {
        n,
        s_max,
        x_depth: (n == 0).then_some(x_depth),
        rows,
        refinement_ratio: rho,
        monotone,
        error_ratio,
        extrapolated,
        error_bar,
        deviation_from_one: if n == 3 { extrapolated.map(|e| e - 1.0) } else { None },
    })
}

pub const STUDY_CSV_HEADER: [&str; 5] = ["h", "theta", "extrapolated", "error_bar", "deviation_from_one"];

pub fn write_study_csv<W: std::io::Write>(out: W, study: &ConvergenceStudy) -> Result<()> {
    let io = |e: csv::Error| SpiderError::InvalidParameter(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STUDY_CSV_HEADER).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &study.rows {
        w.write_record([
            row.h.to_string(),
            row.theta.to_string(),
            opt(study.extrapolated),
            opt(study.error_bar),
            opt(study.deviation_from_one),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| SpiderError::InvalidParameter(format!("csv: {e}")))?;
    Ok(())
}
