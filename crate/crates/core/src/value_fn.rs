//! Closed-form candidate value functions for n = 0, 1, 2 ribs.
//!
//! `v_hat` is the value of the penalized problem
//! `sup_tau E[S_1(tau) + ... + S_n(tau) - C tau]` started from `(x, r, s)`.
//! For n = 0 the process is ordinary Brownian motion on the line and `s` is
//! its one-sided running maximum.
//!
//! Every function here is a pure function of value types.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiderError};

/// Slack used when testing the closed-form region inequalities, relative to
/// the magnitude of the coordinates involved.
pub const BOUNDARY_EPS: f64 = 1e-12;

/// Rib count and linear time cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub n: usize,
    pub c: f64,
}

impl ValueParams {
    pub fn new(n: usize, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(SpiderError::InvalidParameter(format!(
                "time cost C must be positive and finite, got {c}"
            )));
        }
        Ok(Self { n, c })
    }

    fn half(&self) -> f64 {
        0.5 / self.c
    }
}

/// A point `(x, r, s_1, .., s_n)` of the state space.
///
/// `r` is zero-based. For n = 0 the record vector has exactly one entry and
/// `r` is ignored; `x` may be negative there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub x: f64,
    pub r: usize,
    pub s: Vec<f64>,
}

impl EvalPoint {
    pub fn line(x: f64, s: f64) -> Self {
        Self { x, r: 0, s: vec![s] }
    }

    pub fn spider(x: f64, r: usize, s: Vec<f64>) -> Self {
        Self { x, r, s }
    }

    /// The origin with every record at zero.
    pub fn origin(n: usize) -> Self {
        Self {
            x: 0.0,
            r: 0,
            s: vec![0.0; n.max(1)],
        }
    }

    pub fn record_sum(&self) -> f64 {
        self.s.iter().sum()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let expected = n.max(1);
        if self.s.len() != expected {
            return Err(SpiderError::DimensionMismatch {
                expected,
                got: self.s.len(),
            });
        }
        if !self.x.is_finite() || self.s.iter().any(|v| !v.is_finite()) {
            return Err(SpiderError::DomainViolation("non-finite coordinate".into()));
        }
        if n == 0 {
            if self.x > self.s[0] {
                return Err(SpiderError::DomainViolation(format!(
                    "x = {} exceeds the running maximum s = {}",
                    self.x, self.s[0]
                )));
            }
            return Ok(());
        }
        if self.r >= n {
            return Err(SpiderError::DomainViolation(format!(
                "rib index {} out of range for n = {n}",
                self.r
            )));
        }
        if self.s.iter().any(|&v| v < 0.0) {
            return Err(SpiderError::DomainViolation("negative record".into()));
        }
        if self.x < 0.0 || self.x > self.s[self.r] {
            return Err(SpiderError::DomainViolation(format!(
                "need 0 <= x <= s[r], got x = {}, s[r] = {}",
                self.x, self.s[self.r]
            )));
        }
        Ok(())
    }
}

fn pos_sq(v: f64) -> f64 {
    let p = v.max(0.0);
    p * p
}

fn other_rib(r: usize) -> usize {
    1 - r
}

fn supported(n: usize) -> Result<()> {
    if n <= 2 {
        Ok(())
    } else {
        Err(SpiderError::UnsupportedN { n })
    }
}

/// Below the seam `s_1 + s_2 = 1/C`: both records are within reach.
fn two_rib_inner(c: f64, x: f64, si: f64, sj: f64) -> f64 {
    c * x * x - c * x * (si - sj) + 0.5 * c * (si * si + sj * sj) + 0.75 / c
}

/// On or above the seam: a stopping band separates the two record hinges.
fn two_rib_outer(c: f64, x: f64, si: f64, sj: f64) -> f64 {
    let half = 0.5 / c;
    c * pos_sq(x - (si - half)) + c * pos_sq(-x - (sj - half)) + si + sj
}

/// Unchecked evaluation; callers guarantee `n <= 2` and a valid point.
pub(crate) fn v_hat_raw(n: usize, c: f64, x: f64, r: usize, s: &[f64]) -> f64 {
    let half = 0.5 / c;
    match n {
        0 => c * pos_sq(x - s[0] + half) + s[0],
        1 => {
            if s[0] <= half {
                c * x * x + half
            } else {
                c * pos_sq(x - s[0] + half) + s[0]
            }
        }
        2 => {
            let (si, sj) = (s[r], s[other_rib(r)]);
            let sigma = si + sj;
            if sigma < 1.0 / c {
                two_rib_inner(c, x, si, sj)
            } else {
                let outer = two_rib_outer(c, x, si, sj);
                if sigma == 1.0 / c {
                    debug_assert!(
                        (outer - two_rib_inner(c, x, si, sj)).abs()
                            <= 1e-12 * (1.0 + outer.abs())
                    );
                }
                outer
            }
        }
        _ => unreachable!("closed form requested for n = {n}"),
    }
}

/// Candidate value function `V(x, r; s; C)`.
pub fn v_hat(params: &ValueParams, p: &EvalPoint) -> Result<f64> {
    supported(params.n)?;
    p.validate(params.n)?;
    Ok(v_hat_raw(params.n, params.c, p.x, p.r, &p.s))
}

/// Stopping-set membership by the closed-form region inequalities.
pub(crate) fn stop_region_raw(n: usize, c: f64, x: f64, r: usize, s: &[f64]) -> bool {
    let half = 0.5 / c;
    let scale: f64 = 1.0 + x.abs() + s.iter().map(|v| v.abs()).sum::<f64>() + 1.0 / c;
    let eps = BOUNDARY_EPS * scale;
    match n {
        0 => x <= s[0] - half + eps,
        1 => s[0] >= half - eps && x <= s[0] - half + eps,
        2 => {
            let (si, sj) = (s[r], s[other_rib(r)]);
            si + sj >= 1.0 / c - eps && x >= half - sj - eps && x <= si - half + eps
        }
        _ => unreachable!("closed-form stopping set requested for n = {n}"),
    }
}

/// True iff `p` lies in `{V = s_1 + .. + s_n}`.
pub fn in_stopping_set(params: &ValueParams, p: &EvalPoint) -> Result<bool> {
    supported(params.n)?;
    p.validate(params.n)?;
    Ok(stop_region_raw(params.n, params.c, p.x, p.r, &p.s))
}

/// Maps a point at cost C to the equivalent point at cost 1.
///
/// `v_hat(params, p) == scale * v_hat(C = 1, rescaled)`.
pub fn rescale(params: &ValueParams, p: &EvalPoint) -> (EvalPoint, f64) {
    let c = params.c;
    let point = EvalPoint {
        x: c * p.x,
        r: p.r,
        s: p.s.iter().map(|v| c * v).collect(),
    };
    (point, 1.0 / c)
}

/// Origin value at unit cost: `A_n(C) = theta_n / C`.
pub fn theta(n: usize) -> Result<f64> {
    match n {
        0 => Ok(0.25),
        1 => Ok(0.5),
        2 => Ok(0.75),
        _ => Err(SpiderError::UnsupportedN { n }),
    }
}

/// The spider constant `C_n = 2 sqrt(theta_n)`.
pub fn c_n(n: usize) -> Result<f64> {
    Ok(2.0 * theta(n)?.sqrt())
}

/// Cost minimizing `theta_n / C + C m` for a given mean stopping time `m`.
pub fn optimal_c(n: usize, m: f64) -> Result<f64> {
    let th = theta(n)?;
    if !(m.is_finite() && m > 0.0) {
        return Err(SpiderError::InvalidParameter(format!(
            "mean stopping time must be positive, got {m}"
        )));
    }
    Ok((th / m).sqrt())
}

/// The upper bound `theta_n / C + C m` on `E[S(tau)]` when `E[tau] = m`.
pub fn penalized_bound(n: usize, c: f64, m: f64) -> Result<f64> {
    Ok(theta(n)? / c + c * m)
}

/// Identifier of the smooth piece of `v_hat` containing a point.
///
/// Two points with the same id lie on the same quadratic branch, so a finite
/// difference stencil whose nodes all share an id sees a polynomial.
pub(crate) fn smooth_piece(params: &ValueParams, x: f64, r: usize, s: &[f64]) -> u8 {
    let c = params.c;
    let half = params.half();
    match params.n {
        0 => (x - s[0] + half > 0.0) as u8,
        1 => {
            if s[0] <= half {
                0
            } else {
                1 + (x - s[0] + half > 0.0) as u8
            }
        }
        _ => {
            let (si, sj) = (s[r], s[other_rib(r)]);
            if si + sj < 1.0 / c {
                0
            } else {
                let up = (x - (si - half) > 0.0) as u8;
                let down = (-x - (sj - half) > 0.0) as u8;
                1 + up + 2 * down
            }
        }
    }
}
