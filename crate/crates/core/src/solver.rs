//! Hybrid proximal generalized conditional gradient (HPGCG) iteration.
//!
//! The solver minimizes `f + g` where `f` is smooth and `g` is convex, proper
//! and lower semicontinuous. Each step solves the hybrid subproblem
//!
//! ```text
//! v(u) ∈ argmin_v  <∇f(u), v> - <u, v>_P + ½‖v‖_P² + g(v)
//! ```
//!
//! for a positive *semi*definite metric `P`, and moves to the convex
//! combination `u + θ (v - u)` with the adaptive step
//!
//! ```text
//! θ = min(1, (D(u) + ½‖u - v‖_P²) / (2 D_f(u, v)))
//! ```
//!
//! `P = 0` is the generalized conditional gradient method; a positive definite
//! `P` with unit steps is the preconditioned forward-backward method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real inner-product space operations needed by the iteration.
pub trait Vector: Clone {
    fn dot(&self, other: &Self) -> f64;

    /// `self += a * x`
    fn axpy(&mut self, a: f64, x: &Self);

    fn scale(&mut self, a: f64);

    fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self - other`
    fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// The convex combination `(1 - θ) self + θ other`.
    ///
    /// Evaluated in this form so that `θ = 1` lands exactly on `other`.
    fn lerp(&self, other: &Self, theta: f64) -> Self {
        let mut out = self.clone();
        out.scale(1.0 - theta);
        out.axpy(theta, other);
        out
    }
}

impl Vector for f64 {
    fn dot(&self, other: &Self) -> f64 {
        self * other
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }

    fn scale(&mut self, a: f64) {
        *self *= a;
    }
}

impl Vector for Vec<f64> {
    fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        debug_assert_eq!(self.len(), x.len());
        for (s, x) in self.iter_mut().zip(x) {
            *s += a * x;
        }
    }

    fn scale(&mut self, a: f64) {
        for s in self.iter_mut() {
            *s *= a;
        }
    }
}

/// A composite problem `min f + g` together with the metric `P` and the
/// curvature surrogate `D_f` that drive the HPGCG iteration.
///
/// Implementations must satisfy, for the tested points,
/// `df(u, v) >= f(v) - f(u) - <∇f(u), v - u>` and
/// `df(u, u + θ(v - u)) <= θ² df(u, v)` for `θ ∈ [0, 1]`.
pub trait ProblemOracle {
    type Point: Vector;

    fn grad_f(&self, u: &Self::Point) -> Result<Self::Point>;

    /// Any minimizer of the hybrid subproblem at `u`, given `grad = ∇f(u)`.
    /// The selection rule among several minimizers must be deterministic.
    fn hybrid_argmin(&self, u: &Self::Point, grad: &Self::Point) -> Result<Self::Point>;

    fn df(&self, u: &Self::Point, v: &Self::Point) -> f64;

    /// `‖w‖_P²`
    fn p_seminorm_sq(&self, w: &Self::Point) -> f64;

    fn f_value(&self, u: &Self::Point) -> f64;

    /// Value of `g`; `f64::INFINITY` outside its domain.
    fn g_value(&self, u: &Self::Point) -> f64;

    /// The quantity compared with the tolerance at `u`, given its residual
    /// `D(u)`. Defaults to `D(u)`; problems with a stronger optimality
    /// certificate (such as a duality gap) may return that instead.
    fn stopping_measure(&self, _u: &Self::Point, residual: f64) -> f64 {
        residual
    }

    fn objective(&self, u: &Self::Point) -> f64 {
        self.f_value(u) + self.g_value(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub residual_tolerance: f64,
    pub max_iterations: usize,
    /// Record every `trace_every`-th iterate (the last one is always kept).
    pub trace_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            residual_tolerance: 1e-8,
            max_iterations: 100_000,
            trace_every: 1,
        }
    }
}

impl SolverConfig {
    pub fn new(residual_tolerance: f64, max_iterations: usize) -> Self {
        SolverConfig {
            residual_tolerance,
            max_iterations,
            trace_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "residual tolerance must be positive, got {}",
                self.residual_tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidConfig(
                "trace_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One recorded iterate `u^k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// `D(u^k)`
    pub residual: f64,
    /// `½‖u^k - v^k‖_P²`
    pub p_gap: f64,
    /// Step taken from `u^k`; `None` on the terminal record.
    pub theta: Option<f64>,
    /// `(f + g)(u^k)`
    pub objective: f64,
}

impl IterationRecord {
    /// `‖u^{k+1} - u^k‖_P`, which equals `θ ‖u^k - v^k‖_P`.
    pub fn step_p_norm(&self) -> f64 {
        self.theta.unwrap_or(0.0) * (2.0 * self.p_gap).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
}

impl SolveTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn objectives(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.objective)
    }

    /// Smallest objective value seen along the run.
    pub fn best_objective(&self) -> f64 {
        self.objectives().fold(f64::INFINITY, f64::min)
    }

    /// Write the trace as CSV with the fixed header `k,residual,theta,objective`.
    /// The terminal record has an empty `theta` field.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,residual,theta,objective")?;
        for r in &self.records {
            match r.theta {
                Some(t) => writeln!(out, "{},{:e},{:e},{:e}", r.k, r.residual, t, r.objective)?,
                None => writeln!(out, "{},{:e},,{:e}", r.k, r.residual, r.objective)?,
            }
        }
        Ok(())
    }

    /// Parse a trace previously written by [`SolveTrace::write_csv`].
    /// `p_gap` is not part of the CSV schema and reads back as zero.
    pub fn read_csv<R: std::io::BufRead>(input: R) -> std::result::Result<Self, String> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or("empty trace file")?
            .map_err(|e| e.to_string())?;
        if header.trim() != "k,residual,theta,objective" {
            return Err(format!("unexpected trace header `{}`", header.trim()));
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 4 {
                return Err(format!("line {}: expected 4 fields", lineno + 2));
            }
            let num = |s: &str| -> std::result::Result<f64, String> {
                s.parse::<f64>()
                    .map_err(|e| format!("line {}: {e}", lineno + 2))
            };
            records.push(IterationRecord {
                k: fields[0]
                    .parse()
                    .map_err(|e| format!("line {}: {e}", lineno + 2))?,
                residual: num(fields[1])?,
                p_gap: 0.0,
                theta: if fields[2].is_empty() {
                    None
                } else {
                    Some(num(fields[2])?)
                },
                objective: num(fields[3])?,
            });
        }
        Ok(SolveTrace { records })
    }
}

#[derive(Clone, Debug)]
pub struct Solution<P> {
    pub point: P,
    pub trace: SolveTrace,
    pub status: SolveStatus,
    /// Number of steps taken.
    pub iterations: usize,
    /// `D` at the returned point.
    pub residual: f64,
}

impl<P> Solution<P> {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

const CLAMP_REL: f64 = 1e-12;
const INCONSISTENT_REL: f64 = 1e-9;

/// The residual `D(u) = <∇f(u), u - v> + g(u) - g(v) - ½‖u - v‖_P²` with
/// `v = v(u)` and `grad = ∇f(u)`.
///
/// Round-off negatives are clamped to zero; values below
/// `-1e-9 (1 + scale)` are reported as an inconsistent oracle.
pub fn residual<O: ProblemOracle>(
    problem: &O,
    u: &O::Point,
    v: &O::Point,
    grad: &O::Point,
) -> Result<f64> {
    let (d, _) = residual_parts(problem, u, v, grad)?;
    Ok(d)
}

/// Returns `(D(u), ½‖u - v‖_P²)`.
fn residual_parts<O: ProblemOracle>(
    problem: &O,
    u: &O::Point,
    v: &O::Point,
    grad: &O::Point,
) -> Result<(f64, f64)> {
    let g_u = problem.g_value(u);
    if !g_u.is_finite() {
        return Err(Error::Infeasible(
            "g(u) is infinite at the current iterate".into(),
        ));
    }
    let g_v = problem.g_value(v);
    if !g_v.is_finite() {
        return Err(Error::Infeasible(
            "the hybrid subproblem returned a point outside dom g".into(),
        ));
    }
    let diff = u.sub(v);
    let linear = grad.dot(&diff);
    let p_gap = 0.5 * problem.p_seminorm_sq(&diff);
    let d = linear + g_u - g_v - p_gap;
    if !d.is_finite() {
        return Err(Error::Infeasible(format!("non-finite residual {d}")));
    }
    if d >= 0.0 {
        return Ok((d, p_gap));
    }
    let scale = linear.abs() + g_u.abs() + g_v.abs() + p_gap;
    if d >= -CLAMP_REL * (1.0 + d.abs()) || d >= -INCONSISTENT_REL * (1.0 + scale) {
        Ok((0.0, p_gap))
    } else {
        Err(Error::NegativeResidual { residual: d, scale })
    }
}

/// `θ = min(1, (d_u + p_gap) / (2 df))`, with `θ = 1` when `df = 0`.
pub fn step_size(d_u: f64, p_gap: f64, df_val: f64) -> f64 {
    let num = d_u + p_gap;
    if df_val <= 0.0 {
        return 1.0;
    }
    (num / (2.0 * df_val)).clamp(0.0, 1.0)
}

/// Run HPGCG from `u0` until the stopping measure (by default `D(u^k)`) drops
/// below `residual_tolerance` or the iteration budget is spent.
pub fn hpgcg_solve<O: ProblemOracle>(
    problem: &O,
    u0: O::Point,
    config: &SolverConfig,
) -> Result<Solution<O::Point>> {
    hpgcg_solve_with(problem, u0, config, |_, _| {})
}

/// Like [`hpgcg_solve`], calling `observe` on every iterate `u^k` (recorded or
/// not) together with its record.
pub fn hpgcg_solve_with<O, F>(
    problem: &O,
    u0: O::Point,
    config: &SolverConfig,
    mut observe: F,
) -> Result<Solution<O::Point>>
where
    O: ProblemOracle,
    F: FnMut(&O::Point, &IterationRecord),
{
    config.validate()?;
    if !problem.g_value(&u0).is_finite() {
        return Err(Error::Infeasible("initial point is outside dom g".into()));
    }

    let mut u = u0;
    let mut trace = SolveTrace::default();
    let mut k = 0usize;
    loop {
        let grad = problem.grad_f(&u)?;
        let v = problem.hybrid_argmin(&u, &grad)?;
        let (d, p_gap) = residual_parts(problem, &u, &v, &grad)?;
        let objective = problem.objective(&u);

        let stop = if problem.stopping_measure(&u, d) < config.residual_tolerance {
            Some(SolveStatus::Converged)
        } else if k >= config.max_iterations {
            Some(SolveStatus::MaxIterations)
        } else {
            None
        };

        let theta = match stop {
            Some(_) => None,
            None => {
                let t = step_size(d, p_gap, problem.df(&u, &v));
                // θ = 0 only happens when d = p_gap = 0, i.e. at a minimizer.
                (t > 0.0).then_some(t)
            }
        };
        let record = IterationRecord {
            k,
            residual: d,
            p_gap,
            theta,
            objective,
        };
        observe(&u, &record);

        let Some(theta) = theta else {
            trace.records.push(record);
            let status = stop.unwrap_or(SolveStatus::Converged);
            log::debug!("hpgcg stopped after {k} steps: {status:?}, residual {d:e}");
            return Ok(Solution {
                point: u,
                trace,
                status,
                iterations: k,
                residual: d,
            });
        };
        if k.is_multiple_of(config.trace_every) {
            trace.records.push(record);
        }
        u = u.lerp(&v, theta);
        k += 1;
    }
}

/// Outcome of the `o(k^{-1/3})` rate proxy on a recorded trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub k_min: usize,
    pub k_max: usize,
    /// `2 r̂(k_min) k_min^{1/3}`
    pub constant: f64,
    pub best_objective: f64,
    /// Largest `r̂(k) / (C k^{-1/3})` over the checked records.
    pub worst_ratio: f64,
    pub checked: usize,
    pub violations: Vec<usize>,
    pub pass: bool,
}

/// Check `r̂(k) <= C k^{-1/3}` for recorded `k_min <= k <= k_max`, where
/// `r̂(k)` is the objective minus the best objective of the whole trace and
/// `C = 2 r̂(k_min) k_min^{1/3}`. An absolute slack of `1e-12 (1 + |best|)`
/// absorbs round-off once the objective has settled.
pub fn rate_check(trace: &SolveTrace, k_min: usize, k_max: usize) -> Result<RateCheck> {
    if k_min == 0 || k_max < k_min {
        return Err(Error::InvalidConfig(format!(
            "invalid rate window [{k_min}, {k_max}]"
        )));
    }
    let best = trace.best_objective();
    if !best.is_finite() {
        return Err(Error::InvalidConfig("trace has no finite objective".into()));
    }
    let start = trace
        .records
        .iter()
        .find(|r| r.k == k_min)
        .ok_or_else(|| Error::InvalidConfig(format!("trace has no record for k = {k_min}")))?;
    let constant = 2.0 * (start.objective - best) * (k_min as f64).cbrt();
    let slack = 1e-12 * (1.0 + best.abs());
    let mut worst_ratio: f64 = 0.0;
    let mut violations = Vec::new();
    let mut checked = 0;
    for r in trace
        .records
        .iter()
        .filter(|r| r.k >= k_min && r.k <= k_max)
    {
        let bound = constant / (r.k as f64).cbrt();
        let gap = r.objective - best;
        checked += 1;
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(gap / bound);
        }
        if gap > bound + slack {
            violations.push(r.k);
        }
    }
    Ok(RateCheck {
        k_min,
        k_max,
        constant,
        best_objective: best,
        worst_ratio,
        checked,
        pass: violations.is_empty(),
        violations,
    })
}
