//! Lattice random-walk simulation of the Brownian spider.
//!
//! Space is discretized with step `h` and time with `h^2`. Away from the
//! origin the walk moves `+-h` with probability one half each. At the origin
//! it always moves to `h` on a rib chosen uniformly from `{0, .., n-1}`, so
//! every visit to the origin ends an excursion and starts a fresh one on an
//! independently drawn rib. Records `s[r]` track the furthest point reached on
//! each rib.
//!
//! The n = 0 case is the unreflected line: `+-h` everywhere, with `s` the
//! one-sided running maximum.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiderError};
use crate::stopping::StoppingRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiderState {
    pub x: f64,
    /// Zero-based rib index.
    pub r: usize,
    pub s: Vec<f64>,
    pub elapsed: f64,
}

impl SpiderState {
    pub fn origin(n: usize) -> Self {
        Self {
            x: 0.0,
            r: 0,
            s: vec![0.0; n],
            elapsed: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineState {
    pub x: f64,
    pub s: f64,
    pub elapsed: f64,
}

impl LineState {
    pub fn origin() -> Self {
        Self {
            x: 0.0,
            s: 0.0,
            elapsed: 0.0,
        }
    }
}

/// Owned starting state of either process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialState {
    Spider(SpiderState),
    Line(LineState),
}

impl InitialState {
    /// Origin with zero records; `n = 0` selects the line.
    pub fn origin(n: usize) -> Self {
        if n == 0 {
            InitialState::Line(LineState::origin())
        } else {
            InitialState::Spider(SpiderState::origin(n))
        }
    }

    pub fn ribs(&self) -> usize {
        match self {
            InitialState::Spider(st) => st.s.len(),
            InitialState::Line(_) => 0,
        }
    }

    pub fn as_view(&self) -> WalkState<'_> {
        match self {
            InitialState::Spider(st) => WalkState::Spider(st),
            InitialState::Line(st) => WalkState::Line(st),
        }
    }
}

/// Borrowed view of the current state, as seen by stopping rules.
#[derive(Debug, Clone, Copy)]
pub enum WalkState<'a> {
    Spider(&'a SpiderState),
    Line(&'a LineState),
}

impl WalkState<'_> {
    /// Rib count, 0 for the line.
    pub fn ribs(&self) -> usize {
        match self {
            WalkState::Spider(st) => st.s.len(),
            WalkState::Line(_) => 0,
        }
    }

    pub fn elapsed(&self) -> f64 {
        match self {
            WalkState::Spider(st) => st.elapsed,
            WalkState::Line(st) => st.elapsed,
        }
    }

    pub fn x(&self) -> f64 {
        match self {
            WalkState::Spider(st) => st.x,
            WalkState::Line(st) => st.x,
        }
    }

    pub fn record_sum(&self) -> f64 {
        match self {
            WalkState::Spider(st) => st.s.iter().sum(),
            WalkState::Line(st) => st.s,
        }
    }

    /// Record vector, one entry for the line.
    pub fn records(&self) -> Vec<f64> {
        match self {
            WalkState::Spider(st) => st.s.clone(),
            WalkState::Line(st) => vec![st.s],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    /// Lattice spatial step; each step takes time `h^2`.
    pub h: f64,
    /// Rib count; 0 selects the unreflected line.
    pub ribs: usize,
    pub seed: u64,
    pub max_steps: u64,
}

impl WalkConfig {
    pub fn new(h: f64, ribs: usize, seed: u64, max_steps: u64) -> Result<Self> {
        let cfg = Self {
            h,
            ribs,
            seed,
            max_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(SpiderError::InvalidParameter(format!(
                "lattice step h must be positive, got {}",
                self.h
            )));
        }
        if self.max_steps == 0 {
            return Err(SpiderError::InvalidParameter("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.h * self.h
    }

    /// Number of steps needed to reach time `t`.
    pub fn steps_for(&self, t: f64) -> u64 {
        (t / self.dt() - 1e-9).ceil().max(0.0) as u64
    }
}

/// Source of the two kinds of randomness the walk consumes.
pub trait StepSource {
    fn coin(&mut self) -> bool;
    /// Uniform draw from `0..n`.
    fn rib(&mut self, n: usize) -> usize;
}

impl<R: RngCore> StepSource for R {
    fn coin(&mut self) -> bool {
        self.gen::<bool>()
    }

    fn rib(&mut self, n: usize) -> usize {
        if n == 1 {
            0
        } else {
            self.gen_range(0..n)
        }
    }
}

/// Counter-based per-path stream: ChaCha8 keyed by `seed`, stream number
/// `path`. Coins are drawn bit by bit from 64-bit words.
///
/// The stream for a path depends only on `(seed, path)`, never on which
/// thread simulates it or in what order.
pub struct PathRng {
    inner: ChaCha8Rng,
    bits: u64,
    left: u32,
}

impl PathRng {
    pub fn for_path(seed: u64, path: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(path);
        Self {
            inner,
            bits: 0,
            left: 0,
        }
    }
}

impl StepSource for PathRng {
    #[inline]
    fn coin(&mut self) -> bool {
        if self.left == 0 {
            self.bits = self.inner.next_u64();
            self.left = 64;
        }
        let b = self.bits & 1 == 1;
        self.bits >>= 1;
        self.left -= 1;
        b
    }

    #[inline]
    fn rib(&mut self, n: usize) -> usize {
        if n == 1 {
            0
        } else {
            self.inner.gen_range(0..n)
        }
    }
}

/// One lattice step of the spider.
pub fn step<S: StepSource + ?Sized>(
    state: &SpiderState,
    config: &WalkConfig,
    rng: &mut S,
) -> SpiderState {
    let h = config.h;
    let n = state.s.len();
    let mut next = state.clone();
    if state.x < 0.5 * h {
        let r = rng.rib(n);
        next.r = r;
        next.x = h;
    } else if rng.coin() {
        next.x = state.x + h;
    } else {
        next.x = state.x - h;
        if next.x < 0.5 * h {
            next.x = 0.0;
        }
    }
    if next.x > next.s[next.r] {
        next.s[next.r] = next.x;
    }
    next.elapsed = state.elapsed + h * h;
    next
}

/// One step of the unreflected walk on the line.
pub fn step_line<S: StepSource + ?Sized>(
    state: &LineState,
    config: &WalkConfig,
    rng: &mut S,
) -> LineState {
    let h = config.h;
    let x = if rng.coin() { state.x + h } else { state.x - h };
    LineState {
        x,
        s: state.s.max(x),
        elapsed: state.elapsed + h * h,
    }
}

fn lattice_index(v: f64, h: f64, what: &str) -> Result<i64> {
    let k = (v / h).round();
    if (k * h - v).abs() > 1e-9 * h.max(v.abs()) {
        return Err(SpiderError::DomainViolation(format!(
            "{what} = {v} is not a multiple of the lattice step {h}"
        )));
    }
    Ok(k as i64)
}

/// Integer-lattice walker that keeps a floating-point view in sync.
///
/// Positions and records are stored as multiples of `h`, so repeated steps
/// never accumulate rounding drift.
pub struct Walker {
    h: f64,
    dt: f64,
    k: i64,
    records: Vec<i64>,
    steps: u64,
    // step count as f64; exact below 2^53
    clock: f64,
    base_elapsed: f64,
    view: InitialState,
}

impl Walker {
    pub fn new(initial: &InitialState, config: &WalkConfig) -> Result<Self> {
        config.validate()?;
        if initial.ribs() != config.ribs {
            return Err(SpiderError::DimensionMismatch {
                expected: config.ribs,
                got: initial.ribs(),
            });
        }
        let h = config.h;
        let (k, records, base_elapsed) = match initial {
            InitialState::Spider(st) => {
                if st.s.is_empty() {
                    return Err(SpiderError::InvalidParameter("spider needs n >= 1".into()));
                }
                if st.r >= st.s.len() {
                    return Err(SpiderError::DomainViolation(format!(
                        "rib index {} out of range",
                        st.r
                    )));
                }
                let k = lattice_index(st.x, h, "x")?;
                let records = st
                    .s
                    .iter()
                    .map(|&v| lattice_index(v, h, "record"))
                    .collect::<Result<Vec<_>>>()?;
                if k < 0 || records.iter().any(|&m| m < 0) || k > records[st.r] {
                    return Err(SpiderError::DomainViolation(
                        "need 0 <= x <= s[r] and nonnegative records".into(),
                    ));
                }
                (k, records, st.elapsed)
            }
            InitialState::Line(st) => {
                let k = lattice_index(st.x, h, "x")?;
                let m = lattice_index(st.s, h, "s")?;
                if k > m {
                    return Err(SpiderError::DomainViolation("need x <= s".into()));
                }
                (k, vec![m], st.elapsed)
            }
        };
        let mut view = initial.clone();
        // snap the view onto the lattice
        match &mut view {
            InitialState::Spider(st) => {
                st.x = k as f64 * h;
                for (v, &m) in st.s.iter_mut().zip(&records) {
                    *v = m as f64 * h;
                }
            }
            InitialState::Line(st) => {
                st.x = k as f64 * h;
                st.s = records[0] as f64 * h;
            }
        }
        Ok(Self {
            h,
            dt: h * h,
            k,
            records,
            steps: 0,
            clock: 0.0,
            base_elapsed,
            view,
        })
    }

    pub fn state(&self) -> WalkState<'_> {
        self.view.as_view()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    #[inline]
    pub fn step<S: StepSource + ?Sized>(&mut self, src: &mut S) {
        let h = self.h;
        match &mut self.view {
            InitialState::Spider(st) => {
                if self.k == 0 {
                    let r = src.rib(self.records.len());
                    st.r = r;
                    self.k = 1;
                } else {
                    // branch-free: coin flips are unpredictable
                    self.k += 2 * (src.coin() as i64) - 1;
                }
                let r = st.r;
                let m = self.records[r].max(self.k);
                self.records[r] = m;
                st.s[r] = m as f64 * h;
                st.x = self.k as f64 * h;
                debug_assert!(self.k >= 0 && self.k <= self.records[r]);
                self.steps += 1;
                self.clock += 1.0;
                st.elapsed = self.base_elapsed + self.clock * self.dt;
            }
            InitialState::Line(st) => {
                self.k += 2 * (src.coin() as i64) - 1;
                let m = self.records[0].max(self.k);
                self.records[0] = m;
                st.s = m as f64 * h;
                st.x = self.k as f64 * h;
                debug_assert!(self.k <= self.records[0]);
                self.steps += 1;
                self.clock += 1.0;
                st.elapsed = self.base_elapsed + self.clock * self.dt;
            }
        }
    }
}

/// One realization of `(tau, S_1(tau), .., S_n(tau))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    pub tau: f64,
    pub s_final: Vec<f64>,
    pub censored: bool,
    pub steps: u64,
}

impl PathOutcome {
    pub fn record_sum(&self) -> f64 {
        self.s_final.iter().sum()
    }
}

/// Runs the walk until `rule` fires (checked before the first step and after
/// every step) or `max_steps` is reached, in which case the path is flagged
/// as censored.
pub fn simulate_path<S: StepSource + ?Sized>(
    initial: &InitialState,
    rule: &StoppingRule,
    config: &WalkConfig,
    rng: &mut S,
) -> Result<PathOutcome> {
    rule.validate(config.ribs)?;
    let compiled = rule.compile(config.h);
    let mut walker = Walker::new(initial, config)?;
    let censored = loop {
        if compiled.fires(walker.state()) {
            break false;
        }
        if walker.steps >= config.max_steps {
            break true;
        }
        walker.step(rng);
    };
    let st = walker.state();
    Ok(PathOutcome {
        tau: st.elapsed(),
        s_final: st.records(),
        censored,
        steps: walker.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a fixed script of coin flips and rib draws.
    struct Script {
        coins: Vec<bool>,
        ribs: Vec<usize>,
    }

    impl StepSource for Script {
        fn coin(&mut self) -> bool {
            self.coins.remove(0)
        }
        fn rib(&mut self, _n: usize) -> usize {
            self.ribs.remove(0)
        }
    }

    fn cfg(ribs: usize) -> WalkConfig {
        WalkConfig::new(0.01, ribs, 1, 1_000_000).unwrap()
    }

    #[test]
    fn origin_step_picks_a_rib() {
        let st = SpiderState::origin(2);
        let mut src = Script {
            coins: vec![],
            ribs: vec![1],
        };
        let next = step(&st, &cfg(2), &mut src);
        assert_eq!(next.x, 0.01);
        assert_eq!(next.r, 1);
        assert_eq!(next.s, vec![0.0, 0.01]);
        assert!((next.elapsed - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn upward_step_pushes_record() {
        let st = SpiderState {
            x: 0.01,
            r: 0,
            s: vec![0.01, 0.0],
            elapsed: 0.0,
        };
        let mut src = Script {
            coins: vec![true],
            ribs: vec![],
        };
        let next = step(&st, &cfg(2), &mut src);
        assert_eq!(next.x, 0.02);
        assert_eq!(next.s, vec![0.02, 0.0]);
    }

    #[test]
    fn line_steps() {
        let st = LineState::origin();
        let up = step_line(&st, &cfg(0), &mut Script { coins: vec![true], ribs: vec![] });
        assert_eq!((up.x, up.s), (0.01, 0.01));
        let down = step_line(&st, &cfg(0), &mut Script { coins: vec![false], ribs: vec![] });
        assert_eq!((down.x, down.s), (-0.01, 0.0));

        let mut rng = PathRng::for_path(3, 0);
        let mut st = LineState::origin();
        let config = cfg(0);
        for k in 1..=500u32 {
            st = step_line(&st, &config, &mut rng);
            assert!(st.x.abs() <= k as f64 * config.h + 1e-12);
            assert!((st.elapsed - k as f64 * 1e-4).abs() < 1e-12);
            assert!(st.s >= st.x);
        }
    }

    #[test]
    fn walker_keeps_invariants() {
        let config = WalkConfig::new(0.05, 3, 9, 10).unwrap();
        let mut walker = Walker::new(&InitialState::origin(3), &config).unwrap();
        let mut rng = PathRng::for_path(9, 4);
        let mut prev = vec![0.0; 3];
        for k in 1..=20_000u64 {
            walker.step(&mut rng);
            let WalkState::Spider(st) = walker.state() else { unreachable!() };
            assert!(st.x <= st.s[st.r]);
            assert!(st.s.iter().zip(&prev).all(|(a, b)| a >= b));
            assert_eq!(walker.steps(), k);
            assert_eq!(st.elapsed, k as f64 * config.dt());
            prev.clone_from(&st.s);
        }
    }

    #[test]
    fn walker_rejects_off_lattice_and_mismatch() {
        let config = WalkConfig::new(0.1, 2, 0, 10).unwrap();
        let st = InitialState::Spider(SpiderState {
            x: 0.05,
            r: 0,
            s: vec![0.1, 0.0],
            elapsed: 0.0,
        });
        assert!(matches!(
            Walker::new(&st, &config),
            Err(SpiderError::DomainViolation(_))
        ));
        assert!(matches!(
            Walker::new(&InitialState::origin(3), &config),
            Err(SpiderError::DimensionMismatch { .. })
        ));
        assert!(WalkConfig::new(0.0, 1, 0, 10).is_err());
        assert!(WalkConfig::new(0.1, 1, 0, 0).is_err());
    }

    #[test]
    fn fixed_time_zero_stops_immediately() {
        let init = InitialState::Spider(SpiderState {
            x: 0.02,
            r: 1,
            s: vec![0.1, 0.03],
            elapsed: 0.0,
        });
        let out = simulate_path(
            &init,
            &StoppingRule::FixedTime { t: 0.0 },
            &cfg(2),
            &mut PathRng::for_path(1, 1),
        )
        .unwrap();
        assert_eq!(out.tau, 0.0);
        assert_eq!(out.s_final, vec![0.1, 0.03]);
        assert!(!out.censored);
    }

    #[test]
    fn censoring_is_flagged() {
        let config = WalkConfig::new(0.01, 1, 1, 100).unwrap();
        let out = simulate_path(
            &InitialState::origin(1),
            &StoppingRule::SumThreshold { b: 10.0 },
            &config,
            &mut PathRng::for_path(1, 0),
        )
        .unwrap();
        assert!(out.censored);
        assert_eq!(out.steps, 100);
    }

    #[test]
    fn rib_choice_is_uniform() {
        // 1e5 origin departures of an n = 3 walker; binomial band of 3 sd
        let config = WalkConfig::new(0.5, 3, 2024, u64::MAX).unwrap();
        let mut rng = PathRng::for_path(2024, 0);
        let visits = 100_000usize;
        let mut counts = [0usize; 3];
        for i in 0..visits {
            let mut walker = Walker::new(&InitialState::origin(3), &config).unwrap();
            walker.step(&mut rng);
            let WalkState::Spider(st) = walker.state() else { unreachable!() };
            assert_eq!(st.x, 0.5);
            assert_eq!(st.s[st.r], 0.5);
            counts[st.r] += 1;
            if i % 2 == 0 {
                let next = step(&SpiderState::origin(3), &config, &mut rng);
                assert_eq!(next.x, 0.5);
            }
        }
        let band = 3.0 * (2.0f64 / (9.0 * visits as f64)).sqrt();
        for c in counts {
            let f = c as f64 / visits as f64;
            assert!((f - 1.0 / 3.0).abs() <= band, "frequency {f}");
        }
    }

    #[test]
    fn path_streams_are_reproducible_and_distinct() {
        let draw = |seed, path| {
            let mut r = PathRng::for_path(seed, path);
            (0..256).map(|_| r.coin()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5, 17), draw(5, 17));
        assert_ne!(draw(5, 17), draw(5, 18));
        assert_ne!(draw(5, 17), draw(6, 17));
    }
}
