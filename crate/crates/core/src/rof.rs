//! ROF denoising `min_u ½‖u - ξ‖² + α TV(u)` through its dual
//!
//! ```text
//! min_v ½‖div v + ξ‖²   s.t. ‖v‖_{∞,2} <= α
//! ```
//!
//! solved by HPGCG, with primal recovery `u = div v + ξ` and primal-dual gap
//! certificates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{hpgcg_solve, ProblemOracle, SolveStatus, SolveTrace, SolverConfig, Vector};
use crate::tv::{div, grad, norm_inf_2, tv, ScalarField, VectorField};

/// Relative slack on the dual ball before a point counts as infeasible.
pub const BALL_TOLERANCE: f64 = 1e-12;

/// Largest admissible primal-dual gap of a pair handed to
/// [`bregman_decomposition`].
pub const PAIR_GAP_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RofInstance {
    xi: ScalarField,
    alpha: f64,
}

impl RofInstance {
    pub fn new(xi: ScalarField, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "regularization parameter must be positive, got {alpha}"
            )));
        }
        Ok(RofInstance { xi, alpha })
    }

    pub fn xi(&self) -> &ScalarField {
        &self.xi
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn width(&self) -> usize {
        self.xi.width()
    }

    /// Primal objective `½‖u - ξ‖² + α TV(u)`.
    pub fn primal_objective(&self, u: &ScalarField) -> f64 {
        0.5 * u.dist_sq(&self.xi) + self.alpha * tv(u)
    }

    /// Primal point associated with a dual one, `div v + ξ`.
    pub fn primal_from_dual(&self, v: &VectorField) -> ScalarField {
        let mut u = div(v);
        u.axpy(1.0, &self.xi);
        u
    }

    pub fn is_dual_feasible(&self, v: &VectorField) -> bool {
        norm_inf_2(v) <= self.alpha * (1.0 + BALL_TOLERANCE)
    }
}

/// The metric `P` used for the dual solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "weight")]
pub enum DualMetric {
    /// `P = 0`: pure generalized conditional gradient.
    Zero,
    /// `P = κ I` with `κ > 0`. For `κ >= 8` every step is a full projected
    /// gradient step; smaller `κ` gives longer candidates damped by the
    /// adaptive step-size.
    Scaled(f64),
}

impl Default for DualMetric {
    fn default() -> Self {
        DualMetric::Scaled(1.0)
    }
}

/// The curvature surrogate `D_f` for the dual objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualCurvature {
    /// `½‖div(v - w)‖²`, exact for the quadratic dual objective.
    #[default]
    Operator,
    /// `(L/2)‖v - w‖²` with `L = 8 >= ‖div‖²`.
    Lipschitz,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualSettings {
    pub metric: DualMetric,
    pub curvature: DualCurvature,
}

/// Minimizer of `<g, v>` over `‖v‖_{∞,2} <= α`: per pixel `-α g_j / ‖g_j‖`,
/// and zero where `g_j = 0`.
pub fn lmo_ball(g_field: &VectorField, alpha: f64) -> VectorField {
    let mut out = VectorField::zeros(g_field.width());
    for (o, g) in out.values_mut().iter_mut().zip(g_field.values()) {
        let n = g[0].hypot(g[1]);
        if n > 0.0 && alpha > 0.0 {
            *o = [-alpha * g[0] / n, -alpha * g[1] / n];
        }
    }
    out
}

/// Euclidean projection onto `‖v‖_{∞,2} <= α`, pixel by pixel.
pub fn project_ball(v: &VectorField, alpha: f64) -> VectorField {
    let mut out = v.clone();
    for o in out.values_mut() {
        let n = o[0].hypot(o[1]);
        if n > alpha {
            let s = if n > 0.0 { alpha / n } else { 0.0 };
            o[0] *= s;
            o[1] *= s;
        }
    }
    out
}

/// The dual problem as an HPGCG oracle over vector fields.
#[derive(Clone, Debug)]
pub struct RofDual<'a> {
    instance: &'a RofInstance,
    settings: DualSettings,
}

impl<'a> RofDual<'a> {
    pub fn new(instance: &'a RofInstance, settings: DualSettings) -> Result<Self> {
        if let DualMetric::Scaled(k) = settings.metric {
            if !(k > 0.0) || !k.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "dual metric weight must be positive, got {k}"
                )));
            }
        }
        Ok(RofDual { instance, settings })
    }
}

impl ProblemOracle for RofDual<'_> {
    type Point = VectorField;

    fn grad_f(&self, v: &VectorField) -> Result<VectorField> {
        let mut g = grad(&self.instance.primal_from_dual(v));
        g.scale(-1.0);
        Ok(g)
    }

    fn hybrid_argmin(&self, v: &VectorField, grad_f: &VectorField) -> Result<VectorField> {
        let alpha = self.instance.alpha;
        Ok(match self.settings.metric {
            DualMetric::Zero => lmo_ball(grad_f, alpha),
            DualMetric::Scaled(kappa) => {
                let mut w = v.clone();
                w.axpy(-1.0 / kappa, grad_f);
                project_ball(&w, alpha)
            }
        })
    }

    fn df(&self, v: &VectorField, w: &VectorField) -> f64 {
        let d = v.sub(w);
        match self.settings.curvature {
            DualCurvature::Operator => 0.5 * div(&d).norm_sq(),
            DualCurvature::Lipschitz => 4.0 * d.norm_sq(),
        }
    }

    fn p_seminorm_sq(&self, w: &VectorField) -> f64 {
        match self.settings.metric {
            DualMetric::Zero => 0.0,
            DualMetric::Scaled(kappa) => kappa * w.norm_sq(),
        }
    }

    fn f_value(&self, v: &VectorField) -> f64 {
        0.5 * self.instance.primal_from_dual(v).norm_sq()
    }

    fn g_value(&self, v: &VectorField) -> f64 {
        if self.instance.is_dual_feasible(v) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// The primal-dual gap at `(div v + ξ, v)`. For `P = 0` this is the
    /// residual itself; for `P > 0` the residual only bounds it from below.
    fn stopping_measure(&self, v: &VectorField, residual: f64) -> f64 {
        match self.settings.metric {
            DualMetric::Zero => residual,
            DualMetric::Scaled(_) => {
                primal_dual_gap(&self.instance.primal_from_dual(v), v, self.instance)
            }
        }
    }
}

/// A (near) primal-dual solution pair with its achieved gap.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualPair {
    pub u: ScalarField,
    pub v: VectorField,
    pub gap: f64,
}

#[derive(Clone, Debug)]
pub struct Denoised {
    pub pair: PrimalDualPair,
    pub trace: SolveTrace,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Denoise with the default dual settings.
pub fn denoise(instance: &RofInstance, config: &SolverConfig) -> Result<Denoised> {
    denoise_with(instance, config, DualSettings::default())
}

/// Solve the dual by HPGCG from `v = 0` until the primal-dual gap drops below
/// the tolerance, and recover `u = div v + ξ`.
/// Non-convergence is reported through `status`, not as an error.
pub fn denoise_with(
    instance: &RofInstance,
    config: &SolverConfig,
    settings: DualSettings,
) -> Result<Denoised> {
    let problem = RofDual::new(instance, settings)?;
    let sol = hpgcg_solve(&problem, VectorField::zeros(instance.width()), config)?;
    let u = instance.primal_from_dual(&sol.point);
    let gap = primal_dual_gap(&u, &sol.point, instance);
    Ok(Denoised {
        pair: PrimalDualPair {
            u,
            v: sol.point,
            gap,
        },
        trace: sol.trace,
        status: sol.status,
        iterations: sol.iterations,
    })
}

/// `f(u) + α TV(u) + f*(div v) + g*(v)` with `f*(w) = ½‖w + ξ‖² - ½‖ξ‖²` and
/// `g*` the indicator of the dual ball; `+∞` for infeasible `v`.
pub fn primal_dual_gap(u: &ScalarField, v: &VectorField, instance: &RofInstance) -> f64 {
    if !instance.is_dual_feasible(v) {
        return f64::INFINITY;
    }
    let xi = &instance.xi;
    let f = 0.5 * u.dist_sq(xi);
    let g = instance.alpha * tv(u);
    let f_star = 0.5 * instance.primal_from_dual(v).norm_sq() - 0.5 * xi.norm_sq();
    f + g + f_star
}

/// The four Bregman divergences whose sum is the primal-dual gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BregmanDecomposition {
    /// `½‖u - u^α‖²`
    pub d_f: f64,
    pub d_fstar: f64,
    pub d_gstar: f64,
    pub d_g: f64,
}

impl BregmanDecomposition {
    pub fn total(&self) -> f64 {
        self.d_f + self.d_fstar + self.d_gstar + self.d_g
    }
}

/// Decompose `G_α(u, v)` relative to a primal-dual solution pair `pd`.
pub fn bregman_decomposition(
    u: &ScalarField,
    v: &VectorField,
    pd: &PrimalDualPair,
    instance: &RofInstance,
) -> Result<BregmanDecomposition> {
    let p = instance.width();
    if u.width() != p || v.width() != p || pd.u.width() != p || pd.v.width() != p {
        return Err(Error::Dimension(
            "fields do not match the instance grid".into(),
        ));
    }
    if !instance.is_dual_feasible(&pd.v) {
        return Err(Error::NotPrimalDualPair(
            "dual solution outside the ball".into(),
        ));
    }
    let gap = primal_dual_gap(&pd.u, &pd.v, instance);
    let scale = 1.0 + instance.xi.norm_sq();
    if !(gap <= PAIR_GAP_TOLERANCE * scale) {
        return Err(Error::NotPrimalDualPair(format!("gap {gap:e} too large")));
    }
    if !instance.is_dual_feasible(v) {
        return Err(Error::Infeasible("v lies outside the dual ball".into()));
    }

    let xi = &instance.xi;
    let alpha = instance.alpha;
    let f_star = |w: &ScalarField| {
        let mut s = w.clone();
        s.axpy(1.0, xi);
        0.5 * s.norm_sq() - 0.5 * xi.norm_sq()
    };

    let d_f = 0.5 * u.dist_sq(&pd.u);

    let div_v = div(v);
    let div_va = div(&pd.v);
    let d_fstar = f_star(&div_v) - f_star(&div_va) - pd.u.dot(&div_v.sub(&div_va));

    let grad_ua = grad(&pd.u);
    let d_gstar = -grad_ua.dot(&v.sub(&pd.v));

    let grad_u = grad(u);
    let d_g = alpha * (tv(u) - tv(&pd.u)) - pd.v.dot(&grad_u.sub(&grad_ua));

    Ok(BregmanDecomposition {
        d_f,
        d_fstar,
        d_gstar,
        d_g,
    })
}
