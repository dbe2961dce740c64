//! Learning a total-variation parameter model from `(ground truth, noisy)`
//! patch pairs.
//!
//! The bilevel problem is replaced by its monolevel proxy: jointly minimize
//! the primal-dual gap at the ground truths over the model and one dual field
//! per patch,
//!
//! ```text
//! min  1/(2N) Σ ‖div v_i + ξ_i‖² + 1/N Σ α(ξ_i) TV(u†_i)
//! s.t. model feasible, ‖v_i‖_{∞,2} <= α(ξ_i) for all i
//! ```
//!
//! solved by HPGCG with metric `‖(v, A)‖_P² = λ ‖A‖_F²`. The candidate step has
//! a closed form: a PSD projection for the model followed by a per-pixel
//! normalization of the dual fields, so no projection onto the coupled
//! feasible set is ever needed.

use std::cell::Cell;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PatchPair;
use crate::error::{Error, Result};
use crate::psd::{min_eigenvalue, psd_project, QuadraticModel, ROUNDOFF_EIGEN};
use crate::rof::{lmo_ball, BALL_TOLERANCE};
use crate::solver::{
    hpgcg_solve_with, residual, IterationRecord, ProblemOracle, SolveStatus, SolveTrace,
    SolverConfig, Vector,
};
use crate::tv::{div, grad, norm_inf_2, tv, ScalarField, VectorField};

/// `ξ̄ = [ξ, 1]`, the patch flattened row-major with a trailing one.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedPatch(Vec<f64>);

impl LiftedPatch {
    pub fn new(xi: &ScalarField) -> Self {
        let mut v = Vec::with_capacity(xi.len() + 1);
        v.extend_from_slice(xi.values());
        v.push(1.0);
        LiftedPatch(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A parameter model family: a convex cone of models, each mapping a lifted
/// patch to a regularization weight linearly in the model.
pub trait ParamModel: Vector + Send + Sync + std::fmt::Debug {
    const KIND: ModelKind;

    /// The origin of the model space for lifted patches of length `dim`.
    fn zero(dim: usize) -> Self;

    /// The weight before clamping at zero; linear in the model.
    fn raw_alpha(&self, lifted: &[f64]) -> f64;

    /// `Σ_i w_i ∂α(ξ_i)/∂model`, accumulated in index order.
    fn weighted_features<'a>(dim: usize, terms: impl Iterator<Item = (&'a [f64], f64)>) -> Self;

    /// Nearest feasible model, and how many significant clamps it took.
    fn project(&self) -> Result<(Self, usize)>
    where
        Self: Sized;

    /// Whether the model lies in its cone (within round-off).
    fn is_feasible(&self) -> Result<bool>;
}

/// `α(ξ)` clamped at zero so it is a valid ball radius.
pub fn model_alpha<M: ParamModel>(model: &M, lifted: &LiftedPatch) -> f64 {
    model.raw_alpha(lifted.as_slice()).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    Constant,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quadratic" => Ok(ModelKind::Quadratic),
            "constant" => Ok(ModelKind::Constant),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

impl Vector for QuadraticModel {
    fn dot(&self, other: &Self) -> f64 {
        self.matrix().dot(other.matrix())
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        let mut m = std::mem::replace(self, QuadraticModel::zeros(0)).into_matrix();
        m += x.matrix() * a;
        *self = QuadraticModel::from_projected(m);
    }

    fn scale(&mut self, a: f64) {
        let m = std::mem::replace(self, QuadraticModel::zeros(0)).into_matrix();
        *self = QuadraticModel::from_projected(m * a);
    }
}

impl ParamModel for QuadraticModel {
    const KIND: ModelKind = ModelKind::Quadratic;

    fn zero(dim: usize) -> Self {
        QuadraticModel::zeros(dim)
    }

    fn raw_alpha(&self, lifted: &[f64]) -> f64 {
        self.quadratic_form(lifted)
    }

    fn weighted_features<'a>(dim: usize, terms: impl Iterator<Item = (&'a [f64], f64)>) -> Self {
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        for (lifted, w) in terms {
            if w == 0.0 {
                continue;
            }
            let x = nalgebra::DVectorView::from_slice(lifted, dim);
            acc.ger(w, &x, &x, 1.0);
        }
        QuadraticModel::from_projected(acc)
    }

    fn project(&self) -> Result<(Self, usize)> {
        let p = psd_project(self.matrix())?;
        Ok((QuadraticModel::from_projected(p.matrix), p.clamped))
    }

    fn is_feasible(&self) -> Result<bool> {
        let scale = self.matrix().norm();
        Ok(min_eigenvalue(self.matrix())? >= -ROUNDOFF_EIGEN * scale)
    }
}

/// A single non-negative weight shared by every patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantModel(pub f64);

impl Vector for ConstantModel {
    fn dot(&self, other: &Self) -> f64 {
        self.0 * other.0
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        self.0 += a * x.0;
    }

    fn scale(&mut self, a: f64) {
        self.0 *= a;
    }
}

impl ParamModel for ConstantModel {
    const KIND: ModelKind = ModelKind::Constant;

    fn zero(_dim: usize) -> Self {
        ConstantModel(0.0)
    }

    fn raw_alpha(&self, _lifted: &[f64]) -> f64 {
        self.0
    }

    fn weighted_features<'a>(_dim: usize, terms: impl Iterator<Item = (&'a [f64], f64)>) -> Self {
        ConstantModel(terms.map(|(_, w)| w).sum())
    }

    fn project(&self) -> Result<(Self, usize)> {
        if !self.0.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite constant model {}",
                self.0
            )));
        }
        Ok((ConstantModel(self.0.max(0.0)), 0))
    }

    fn is_feasible(&self) -> Result<bool> {
        Ok(self.0 >= 0.0)
    }
}

/// One training pair prepared for the learning problem.
#[derive(Clone, Debug)]
pub struct TrainingPatch {
    pub xi: ScalarField,
    pub lifted: LiftedPatch,
    /// `TV(u†)`
    pub tv_truth: f64,
}

/// The training set in the form the solver consumes.
#[derive(Clone, Debug)]
pub struct LearningData {
    width: usize,
    patches: Vec<TrainingPatch>,
}

impl LearningData {
    pub fn from_pairs(pairs: &[PatchPair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidConfig("training set is empty".into()))?;
        let width = first.noisy.width();
        let mut patches = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            if pair.noisy.width() != width || pair.truth.width() != width {
                return Err(Error::Dimension(format!("pair {i} is not {width}x{width}")));
            }
            patches.push(TrainingPatch {
                xi: pair.noisy.clone(),
                lifted: LiftedPatch::new(&pair.noisy),
                tv_truth: tv(&pair.truth),
            });
        }
        Ok(LearningData { width, patches })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of patches `N`.
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Length of the lifted patches, `n + 1`.
    pub fn lifted_dim(&self) -> usize {
        self.width * self.width + 1
    }

    pub fn patches(&self) -> &[TrainingPatch] {
        &self.patches
    }
}

/// The joint variable `(v_1, …, v_N, model)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningPoint<M> {
    pub duals: Vec<VectorField>,
    pub model: M,
}

impl<M: ParamModel> LearningPoint<M> {
    /// `A = 0`, `v_i = 0`, which is feasible.
    pub fn origin(data: &LearningData) -> Self {
        LearningPoint {
            duals: vec![VectorField::zeros(data.width()); data.len()],
            model: M::zero(data.lifted_dim()),
        }
    }
}

impl<M: ParamModel> Vector for LearningPoint<M> {
    fn dot(&self, other: &Self) -> f64 {
        let duals: f64 = self
            .duals
            .iter()
            .zip(&other.duals)
            .map(|(a, b)| a.dot(b))
            .sum();
        duals + self.model.dot(&other.model)
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, x) in self.duals.iter_mut().zip(&x.duals) {
            s.axpy(a, x);
        }
        self.model.axpy(a, &x.model);
    }

    fn scale(&mut self, a: f64) {
        for s in self.duals.iter_mut() {
            s.scale(a);
        }
        self.model.scale(a);
    }
}

/// The curvature surrogate `D_f` for the learning objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LearningCurvature {
    /// `(L/2) ‖x - y‖²` over the joint variable; `None` means `L = 8/N`.
    Lipschitz(Option<f64>),
    /// `1/(2N) Σ ‖div(v_i - w_i)‖²`, exact because the objective is
    /// quadratic in the duals and linear in the model.
    Operator,
}

impl Default for LearningCurvature {
    fn default() -> Self {
        LearningCurvature::Lipschitz(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the metric `λ ‖A‖_F²`.
    pub lambda: f64,
    pub residual_tolerance: f64,
    pub max_iterations: usize,
    pub model_kind: ModelKind,
    pub curvature: LearningCurvature,
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 50.0,
            residual_tolerance: 1e-4,
            max_iterations: 100_000,
            model_kind: ModelKind::Quadratic,
            curvature: LearningCurvature::default(),
            trace_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if let LearningCurvature::Lipschitz(Some(l)) = self.curvature {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "Lipschitz constant must be positive, got {l}"
                )));
            }
        }
        self.solver_config().validate()
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            residual_tolerance: self.residual_tolerance,
            max_iterations: self.max_iterations,
            trace_every: self.trace_every,
        }
    }

    /// The Lipschitz constant in effect for `n_patches` patches.
    pub fn lipschitz(&self, n_patches: usize) -> Option<f64> {
        match self.curvature {
            LearningCurvature::Lipschitz(Some(l)) => Some(l),
            LearningCurvature::Lipschitz(None) => Some(8.0 / n_patches as f64),
            LearningCurvature::Operator => None,
        }
    }
}

/// The learning problem as an HPGCG oracle.
pub struct LearningProblem<'a, M> {
    data: &'a LearningData,
    lambda: f64,
    curvature: LearningCurvature,
    /// `1/N Σ TV(u†_i) ∂α(ξ_i)/∂model`, the model block of `∇f` (constant).
    model_grad: M,
    clamped: Cell<usize>,
}

impl<'a, M: ParamModel> LearningProblem<'a, M> {
    pub fn new(data: &'a LearningData, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let inv_n = 1.0 / data.len() as f64;
        let model_grad = M::weighted_features(
            data.lifted_dim(),
            data.patches()
                .iter()
                .map(|p| (p.lifted.as_slice(), inv_n * p.tv_truth)),
        );
        Ok(LearningProblem {
            data,
            lambda: config.lambda,
            curvature: config.curvature,
            model_grad,
            clamped: Cell::new(0),
        })
    }

    pub fn data(&self) -> &LearningData {
        self.data
    }

    /// Significant negative eigenvalues clamped by the candidate steps so far.
    pub fn clamped_eigenvalues(&self) -> usize {
        self.clamped.get()
    }

    fn inv_n(&self) -> f64 {
        1.0 / self.data.len() as f64
    }

    fn check_shape(&self, x: &LearningPoint<M>) -> Result<()> {
        if x.duals.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "{} dual fields for {} patches",
                x.duals.len(),
                self.data.len()
            )));
        }
        if let Some(v) = x.duals.iter().find(|v| v.width() != self.data.width()) {
            return Err(Error::Dimension(format!(
                "dual field of width {} for patches of width {}",
                v.width(),
                self.data.width()
            )));
        }
        Ok(())
    }

    /// Denoised estimates `div v_i + ξ_i`.
    pub fn reconstructions(&self, x: &LearningPoint<M>) -> Vec<ScalarField> {
        self.data
            .patches()
            .par_iter()
            .zip(x.duals.par_iter())
            .map(|(p, v)| {
                let mut u = div(v);
                u.axpy(1.0, &p.xi);
                u
            })
            .collect()
    }

    /// Whether every dual lies in its ball `‖v_i‖_{∞,2} <= α(ξ_i)`.
    pub fn duals_feasible(&self, x: &LearningPoint<M>) -> bool {
        self.data.patches().iter().zip(&x.duals).all(|(p, v)| {
            norm_inf_2(v) <= model_alpha(&x.model, &p.lifted) * (1.0 + BALL_TOLERANCE)
        })
    }

    /// Full membership test, including the model cone.
    pub fn is_feasible(&self, x: &LearningPoint<M>) -> Result<bool> {
        Ok(x.model.is_feasible()? && self.duals_feasible(x))
    }

    /// The closed-form minimizer of the hybrid subproblem at `x`.
    pub fn candidate_step(&self, x: &LearningPoint<M>) -> Result<LearningPoint<M>> {
        self.check_shape(x)?;
        let recon = self.reconstructions(x);
        // c_i = TV(u†_i) - TV(div v_i + ξ_i)
        let weights: Vec<f64> = self
            .data
            .patches()
            .par_iter()
            .zip(recon.par_iter())
            .map(|(p, u)| p.tv_truth - tv(u))
            .collect();
        let scale = -1.0 / (self.lambda * self.data.len() as f64);
        let pull = M::weighted_features(
            self.data.lifted_dim(),
            self.data
                .patches()
                .iter()
                .zip(&weights)
                .map(|(p, &c)| (p.lifted.as_slice(), c)),
        );
        let mut shifted = x.model.clone();
        shifted.axpy(scale, &pull);
        let (model, clamped) = shifted.project()?;
        self.clamped.set(self.clamped.get() + clamped);

        let duals = self
            .data
            .patches()
            .par_iter()
            .zip(recon.par_iter())
            .map(|(p, u)| {
                let radius = model_alpha(&model, &p.lifted);
                // Minimizing <-∇u, v> over the ball gives α ∇u/‖∇u‖.
                let mut neg = grad(u);
                neg.scale(-1.0);
                lmo_ball(&neg, radius)
            })
            .collect();
        Ok(LearningPoint { duals, model })
    }
}

impl<M: ParamModel> ProblemOracle for LearningProblem<'_, M> {
    type Point = LearningPoint<M>;

    fn grad_f(&self, x: &LearningPoint<M>) -> Result<LearningPoint<M>> {
        self.check_shape(x)?;
        let inv_n = self.inv_n();
        let duals = self
            .reconstructions(x)
            .par_iter()
            .map(|u| {
                let mut g = grad(u);
                g.scale(-inv_n);
                g
            })
            .collect();
        Ok(LearningPoint {
            duals,
            model: self.model_grad.clone(),
        })
    }

    fn hybrid_argmin(
        &self,
        x: &LearningPoint<M>,
        _grad: &LearningPoint<M>,
    ) -> Result<LearningPoint<M>> {
        self.candidate_step(x)
    }

    fn df(&self, x: &LearningPoint<M>, y: &LearningPoint<M>) -> f64 {
        match self.curvature {
            LearningCurvature::Lipschitz(l) => {
                let l = l.unwrap_or(8.0 * self.inv_n());
                0.5 * l * x.sub(y).norm_sq()
            }
            LearningCurvature::Operator => {
                let total: f64 = x
                    .duals
                    .par_iter()
                    .zip(y.duals.par_iter())
                    .map(|(a, b)| div(&a.sub(b)).norm_sq())
                    .collect::<Vec<_>>()
                    .into_iter()
                    .sum();
                0.5 * self.inv_n() * total
            }
        }
    }

    fn p_seminorm_sq(&self, w: &LearningPoint<M>) -> f64 {
        self.lambda * w.model.norm_sq()
    }

    fn f_value(&self, x: &LearningPoint<M>) -> f64 {
        let inv_n = self.inv_n();
        let terms: Vec<f64> = self
            .data
            .patches()
            .par_iter()
            .zip(x.duals.par_iter())
            .map(|(p, v)| {
                let mut u = div(v);
                u.axpy(1.0, &p.xi);
                0.5 * u.norm_sq() + x.model.raw_alpha(p.lifted.as_slice()) * p.tv_truth
            })
            .collect();
        inv_n * terms.into_iter().sum::<f64>()
    }

    /// Indicator of the feasible set. Only the dual balls are checked here;
    /// the model stays in its cone because every candidate is a projection
    /// and iterates are convex combinations of candidates.
    fn g_value(&self, x: &LearningPoint<M>) -> f64 {
        if self.duals_feasible(x) {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Objective of the monolevel learning problem at a feasible point.
pub fn learning_objective<M: ParamModel>(
    x: &LearningPoint<M>,
    data: &LearningData,
    config: &TrainConfig,
) -> Result<f64> {
    let problem = LearningProblem::<M>::new(data, config)?;
    problem.check_shape(x)?;
    if !problem.is_feasible(x)? {
        return Err(Error::Infeasible(
            "learning state violates its constraints".into(),
        ));
    }
    Ok(problem.f_value(x))
}

/// The residual `D` between a state and a candidate, both of which must be
/// feasible.
pub fn learning_residual<M: ParamModel>(
    state: &LearningPoint<M>,
    candidate: &LearningPoint<M>,
    data: &LearningData,
    config: &TrainConfig,
) -> Result<f64> {
    let problem = LearningProblem::<M>::new(data, config)?;
    problem.check_shape(state)?;
    problem.check_shape(candidate)?;
    for (name, x) in [("state", state), ("candidate", candidate)] {
        if !problem.is_feasible(x)? {
            return Err(Error::Infeasible(format!(
                "{name} violates its constraints"
            )));
        }
    }
    let grad = problem.grad_f(state)?;
    residual(&problem, state, candidate, &grad)
}

/// A trained model of either family, as stored on disk and used for
/// denoising.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Quadratic(QuadraticModel),
    Constant(f64),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Quadratic(_) => ModelKind::Quadratic,
            TrainedModel::Constant(_) => ModelKind::Constant,
        }
    }

    /// Matrix dimension `n + 1`, or 1 for a constant.
    pub fn dim(&self) -> usize {
        match self {
            TrainedModel::Quadratic(m) => m.dim(),
            TrainedModel::Constant(_) => 1,
        }
    }

    /// Patch width the model expects, if it depends on the patch.
    pub fn patch_width(&self) -> Option<usize> {
        match self {
            TrainedModel::Quadratic(m) => m.patch_width(),
            TrainedModel::Constant(_) => None,
        }
    }

    /// Regularization weight for a noisy patch, clamped at zero.
    pub fn alpha(&self, xi: &ScalarField) -> Result<f64> {
        match self {
            TrainedModel::Quadratic(m) => {
                if xi.len() + 1 != m.dim() {
                    return Err(Error::Dimension(format!(
                        "model of dimension {} applied to a patch of {} pixels",
                        m.dim(),
                        xi.len()
                    )));
                }
                Ok(model_alpha(m, &LiftedPatch::new(xi)))
            }
            TrainedModel::Constant(a) => Ok(a.max(0.0)),
        }
    }
}

impl From<QuadraticModel> for TrainedModel {
    fn from(m: QuadraticModel) -> Self {
        TrainedModel::Quadratic(m)
    }
}

impl From<ConstantModel> for TrainedModel {
    fn from(m: ConstantModel) -> Self {
        TrainedModel::Constant(m.0)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub duals: Vec<VectorField>,
    pub trace: SolveTrace,
    pub status: SolveStatus,
    pub iterations: usize,
    pub residual: f64,
    /// Objective of the learning problem at the returned point.
    pub objective: f64,
    pub clamped_eigenvalues: usize,
}

/// Train a model of family `M`, calling `observe` on every iterate.
pub fn train_model_with<M, F>(
    data: &LearningData,
    config: &TrainConfig,
    mut observe: F,
) -> Result<TrainOutcome<M>>
where
    M: ParamModel,
    F: FnMut(&LearningPoint<M>, &IterationRecord),
{
    let problem = LearningProblem::<M>::new(data, config)?;
    let x0 = LearningPoint::origin(data);
    let sol = hpgcg_solve_with(&problem, x0, &config.solver_config(), |x, r| observe(x, r))?;
    let objective = problem.f_value(&sol.point);
    if problem.clamped_eigenvalues() > 0 {
        log::warn!(
            "{} significantly negative eigenvalues were clamped during training",
            problem.clamped_eigenvalues()
        );
    }
    Ok(TrainOutcome {
        model: sol.point.model,
        duals: sol.point.duals,
        trace: sol.trace,
        status: sol.status,
        iterations: sol.iterations,
        residual: sol.residual,
        objective,
        clamped_eigenvalues: problem.clamped_eigenvalues(),
    })
}

/// Train the quadratic model `α(ξ) = ξ̄ᵀ A ξ̄` from `A = 0`, `v = 0`.
pub fn train(data: &LearningData, config: &TrainConfig) -> Result<TrainOutcome<QuadraticModel>> {
    train_model_with(data, config, |_, _| {})
}

/// Train a single non-negative constant parameter from `α = 0`, `v = 0`.
pub fn train_constant(
    data: &LearningData,
    config: &TrainConfig,
) -> Result<TrainOutcome<ConstantModel>> {
    train_model_with(data, config, |_, _| {})
}
