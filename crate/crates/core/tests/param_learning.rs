use hpgcg::dataset::PatchPair;
use hpgcg::learning::{
    learning_objective, learning_residual, model_alpha, train_model_with, ConstantModel,
    LearningCurvature, LearningData, LearningPoint, LearningProblem, LiftedPatch,
};
use hpgcg::rof::{denoise, RofInstance};
use hpgcg::tv::{div, grad, tv, ScalarField, VectorField};
use hpgcg::{
    Error, ModelKind, ProblemOracle, QuadraticModel, SolveStatus, SolverConfig, TrainConfig, Vector,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair(truth: &[f64], noisy: &[f64]) -> PatchPair {
    PatchPair {
        truth: ScalarField::new(2, truth.to_vec()).unwrap(),
        noisy: ScalarField::new(2, noisy.to_vec()).unwrap(),
    }
}

/// Three 2×2 pairs whose noisy TV exceeds the clean TV.
fn small_pairs() -> Vec<PatchPair> {
    vec![
        pair(&[0.0, 1.0, 0.0, 1.0], &[0.1, 0.85, -0.05, 1.1]),
        pair(&[0.5; 4], &[0.6, 0.4, 0.45, 0.55]),
        pair(&[0.2, 0.2, 0.9, 0.9], &[0.25, 0.1, 0.95, 0.8]),
    ]
}

fn config(lambda: f64, tol: f64, kind: ModelKind) -> TrainConfig {
    TrainConfig {
        lambda,
        residual_tolerance: tol,
        max_iterations: 200_000,
        model_kind: kind,
        curvature: LearningCurvature::default(),
        trace_every: 1,
    }
}

fn random_psd(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> QuadraticModel {
    let rank = rng.random_range(1..=dim);
    let b = DMatrix::from_fn(dim, rank, |_, _| rng.random_range(-1.0..1.0));
    QuadraticModel::new(&b * b.transpose() * (scale / rank as f64)).unwrap()
}

fn random_ball(rng: &mut ChaCha8Rng, p: usize, radius: f64) -> VectorField {
    let vals = (0..p * p)
        .map(|_| {
            let r = radius * rng.random_range(0.0..=1.0);
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            [r * t.cos(), r * t.sin()]
        })
        .collect();
    VectorField::new(p, vals).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, data: &LearningData) -> LearningPoint<QuadraticModel> {
    let scale = rng.random_range(0.0..0.5);
    let model = random_psd(rng, data.lifted_dim(), scale);
    let duals = data
        .patches()
        .iter()
        .map(|p| random_ball(rng, data.width(), model_alpha(&model, &p.lifted)))
        .collect();
    LearningPoint { duals, model }
}

fn dot_v(a: &VectorField, b: &VectorField) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x[0] * y[0] + x[1] * y[1])
        .sum()
}

fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = nalgebra::DVector::from_column_slice(x);
    (v.transpose() * a * &v)[0]
}

/// The hybrid subproblem objective at `w` for the state `x`, assembled from
/// the gradient formulas directly.
fn subproblem_value(
    x: &LearningPoint<QuadraticModel>,
    w: &LearningPoint<QuadraticModel>,
    data: &LearningData,
    lambda: f64,
) -> f64 {
    let n = data.len() as f64;
    let mut total = 0.0;
    for ((p, vx), vw) in data.patches().iter().zip(&x.duals).zip(&w.duals) {
        let mut u = div(vx);
        u.axpy(1.0, &p.xi);
        total -= dot_v(&grad(&u), vw) / n;
        total += p.tv_truth * quad_form(w.model.matrix(), p.lifted.as_slice()) / n;
    }
    let (ax, aw) = (x.model.matrix(), w.model.matrix());
    total - lambda * ax.dot(aw) + 0.5 * lambda * aw.norm_squared()
}

#[test]
fn candidate_minimizes_the_subproblem() {
    let data = LearningData::from_pairs(&small_pairs()).unwrap();
    let lambda = 2.0;
    let cfg = config(lambda, 1e-6, ModelKind::Quadratic);
    let problem = LearningProblem::<QuadraticModel>::new(&data, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let x = random_point(&mut rng, &data);
        let cand = problem.candidate_step(&x).unwrap();
        assert!(problem.is_feasible(&cand).unwrap());
        let best = subproblem_value(&x, &cand, &data, lambda);
        for _ in 0..100 {
            let w = random_point(&mut rng, &data);
            let other = subproblem_value(&x, &w, &data, lambda);
            assert!(
                best <= other + 1e-10 * (1.0 + other.abs()),
                "{best} > {other}"
            );
        }
        // nearby feasible perturbations of the candidate do no better
        for _ in 0..50 {
            let t = rng.random_range(0.0..0.1);
            let w = random_point(&mut rng, &data);
            let mixed = cand.lerp(&w, t);
            let other = subproblem_value(&x, &mixed, &data, lambda);
            assert!(
                best <= other + 1e-10 * (1.0 + other.abs()),
                "{best} > {other}"
            );
        }
    }
}

#[test]
fn residual_matches_the_direct_formula() {
    let data = LearningData::from_pairs(&small_pairs()).unwrap();
    let lambda = 3.0;
    let cfg = config(lambda, 1e-6, ModelKind::Quadratic);
    let problem = LearningProblem::<QuadraticModel>::new(&data, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = random_point(&mut rng, &data);
        let w = problem.candidate_step(&x).unwrap();
        // D = <∇f(x), x - w> - ½λ‖A_x - A_w‖²
        let n = data.len() as f64;
        let mut lin = 0.0;
        for ((p, vx), vw) in data.patches().iter().zip(&x.duals).zip(&w.duals) {
            let mut u = div(vx);
            u.axpy(1.0, &p.xi);
            let g = grad(&u);
            lin -= (dot_v(&g, vx) - dot_v(&g, vw)) / n;
            let qa = quad_form(x.model.matrix(), p.lifted.as_slice());
            let qb = quad_form(w.model.matrix(), p.lifted.as_slice());
            lin += p.tv_truth * (qa - qb) / n;
        }
        let direct = lin - 0.5 * lambda * (x.model.matrix() - w.model.matrix()).norm_squared();
        let lib = learning_residual(&x, &w, &data, &cfg).unwrap();
        assert!(direct >= -1e-12);
        assert!(
            (lib - direct.max(0.0)).abs() <= 1e-10 * (1.0 + direct.abs()),
            "{lib} vs {direct}"
        );
    }
}

#[test]
fn objective_at_the_origin() {
    let pairs = small_pairs();
    let data = LearningData::from_pairs(&pairs).unwrap();
    let expect: f64 = pairs
        .iter()
        .map(|p| 0.5 * p.noisy.values().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / pairs.len() as f64;
    let cfg = TrainConfig::default();
    let q =
        learning_objective(&LearningPoint::<QuadraticModel>::origin(&data), &data, &cfg).unwrap();
    let c =
        learning_objective(&LearningPoint::<ConstantModel>::origin(&data), &data, &cfg).unwrap();
    assert!((q - expect).abs() < 1e-14);
    assert!((c - expect).abs() < 1e-14);
}

#[test]
fn zero_pull_leaves_the_model_alone() {
    // Noise-free data with v = 0: every TV mismatch vanishes.
    let clean: Vec<PatchPair> = small_pairs()
        .into_iter()
        .map(|p| PatchPair {
            noisy: p.truth.clone(),
            truth: p.truth,
        })
        .collect();
    let data = LearningData::from_pairs(&clean).unwrap();
    let problem = LearningProblem::<QuadraticModel>::new(&data, &TrainConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let model = random_psd(&mut rng, data.lifted_dim(), 1.0);
        let x = LearningPoint {
            duals: vec![VectorField::zeros(2); data.len()],
            model: model.clone(),
        };
        let cand = problem.candidate_step(&x).unwrap();
        assert!((cand.model.matrix() - model.matrix()).amax() < 1e-12);
    }
}

#[test]
fn constant_patches_are_already_optimal() {
    let pairs = vec![pair(&[0.3; 4], &[0.3; 4]), pair(&[0.8; 4], &[0.8; 4])];
    let data = LearningData::from_pairs(&pairs).unwrap();
    for kind in [ModelKind::Quadratic, ModelKind::Constant] {
        let cfg = config(50.0, 1e-8, kind);
        let iterations = match kind {
            ModelKind::Quadratic => {
                let out = train_model_with::<QuadraticModel, _>(&data, &cfg, |_, _| {}).unwrap();
                assert_eq!(out.model.matrix().amax(), 0.0);
                out.iterations
            }
            ModelKind::Constant => {
                let out = train_model_with::<ConstantModel, _>(&data, &cfg, |_, _| {}).unwrap();
                assert_eq!(out.model.0, 0.0);
                out.iterations
            }
        };
        assert_eq!(iterations, 0);
    }
}

#[test]
fn constant_embeds_into_the_quadratic_family() {
    let data = LearningData::from_pairs(&small_pairs()).unwrap();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let c = rng.random_range(0.0..0.5);
        let duals: Vec<VectorField> = (0..data.len())
            .map(|_| random_ball(&mut rng, 2, c))
            .collect();
        let q = LearningPoint {
            duals: duals.clone(),
            model: QuadraticModel::constant(data.lifted_dim(), c),
        };
        let k = LearningPoint {
            duals,
            model: ConstantModel(c),
        };
        let a = learning_objective(&q, &data, &cfg).unwrap();
        let b = learning_objective(&k, &data, &cfg).unwrap();
        assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        for p in data.patches() {
            assert_eq!(model_alpha(&q.model, &p.lifted), c);
        }
    }
}

/// `min_v (1/2N) Σ ‖div v + ξ‖²` over the balls of radius `a`, plus the
/// linear term, via the primal denoising values.
fn reduced_objective(pairs: &[PatchPair], a: f64) -> f64 {
    let n = pairs.len() as f64;
    pairs
        .iter()
        .map(|p| {
            let xi_sq = p.noisy.values().iter().map(|x| x * x).sum::<f64>();
            let inst = RofInstance::new(p.noisy.clone(), a).unwrap();
            let out = denoise(&inst, &SolverConfig::new(1e-13, 400_000)).unwrap();
            0.5 * xi_sq - inst.primal_objective(&out.pair.u) + a * tv(&p.truth)
        })
        .sum::<f64>()
        / n
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn constant_training_matches_a_line_search() {
    let pairs = small_pairs();
    let data = LearningData::from_pairs(&pairs).unwrap();
    let best = golden_section(|a| reduced_objective(&pairs, a), 1e-9, 1.0, 1e-7);
    // the residual decays like 1/k, so ask for 1e-7 rather than round-off
    let cfg = TrainConfig {
        curvature: LearningCurvature::Operator,
        ..config(1.0, 1e-7, ModelKind::Constant)
    };
    let out = train_model_with::<ConstantModel, _>(&data, &cfg, |_, _| {}).unwrap();
    assert_eq!(out.status, SolveStatus::Converged);
    let (f_train, f_best) = (
        reduced_objective(&pairs, out.model.0),
        reduced_objective(&pairs, best),
    );
    assert!(f_train <= f_best + 1e-7, "{f_train} vs {f_best}");
    assert!(
        (out.model.0 - best).abs() < 1e-3,
        "{} vs {best}",
        out.model.0
    );
    // the joint objective can only sit above the reduced one
    assert!(out.objective >= f_train - 1e-9);
    assert!(out.objective <= f_best + 1e-6);
}

#[test]
fn training_settles_and_stays_feasible() {
    let data = LearningData::from_pairs(&small_pairs()).unwrap();
    let (lambda, tol) = (1.0, 1e-6);
    let cfg = config(lambda, tol, ModelKind::Quadratic);
    let problem = LearningProblem::<QuadraticModel>::new(&data, &cfg).unwrap();
    let mut models = Vec::new();
    let mut residuals = Vec::new();
    let mut objectives = Vec::new();
    let out = train_model_with::<QuadraticModel, _>(&data, &cfg, |x, r| {
        assert!(
            problem.is_feasible(x).unwrap(),
            "infeasible iterate at k = {}",
            r.k
        );
        models.push(x.model.matrix().clone());
        residuals.push(r.residual);
        objectives.push(r.objective);
    })
    .unwrap();
    assert_eq!(
        out.status,
        SolveStatus::Converged,
        "residual {:e}",
        out.residual
    );
    assert!(out.residual < tol);
    for w in objectives.windows(2) {
        assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
    }
    for (k, pair) in models.windows(2).enumerate() {
        let step = (&pair[1] - &pair[0]).norm();
        assert!(
            step <= (2.0 * residuals[k] / lambda).sqrt() + 1e-12,
            "k = {k}"
        );
    }
    let last = models.len() - 1;
    let step = (&models[last] - &models[last - 1]).norm();
    assert!(step <= 10.0 * (tol / lambda).sqrt(), "{step}");
    assert!(out.objective <= objectives[0]);
}

#[test]
fn lifted_patches_append_a_one() {
    let xi = ScalarField::new(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert_eq!(LiftedPatch::new(&xi).as_slice(), &[0.1, 0.2, 0.3, 0.4, 1.0]);
}

#[test]
fn invalid_inputs() {
    assert!(matches!(
        LearningData::from_pairs(&[]),
        Err(Error::InvalidConfig(_)) | Err(Error::Dimension(_))
    ));
    let mixed = vec![
        pair(&[0.0; 4], &[0.0; 4]),
        PatchPair {
            truth: ScalarField::zeros(3),
            noisy: ScalarField::zeros(3),
        },
    ];
    assert!(matches!(
        LearningData::from_pairs(&mixed),
        Err(Error::Dimension(_))
    ));

    let data = LearningData::from_pairs(&small_pairs()).unwrap();
    let cfg = TrainConfig::default();
    let short = LearningPoint {
        duals: vec![VectorField::zeros(2)],
        model: QuadraticModel::zeros(5),
    };
    assert!(matches!(
        learning_objective(&short, &data, &cfg),
        Err(Error::Dimension(_))
    ));

    let outside = LearningPoint {
        duals: vec![VectorField::new(2, vec![[1.0, 0.0]; 4]).unwrap(); 3],
        model: QuadraticModel::zeros(5),
    };
    assert!(matches!(
        learning_objective(&outside, &data, &cfg),
        Err(Error::Infeasible(_))
    ));

    for bad in [
        TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            residual_tolerance: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            curvature: LearningCurvature::Lipschitz(Some(0.0)),
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            train_model_with::<ConstantModel, _>(&data, &bad, |_, _| {}),
            Err(Error::InvalidConfig(_))
        ));
    }

    let problem = LearningProblem::<QuadraticModel>::new(&data, &cfg).unwrap();
    assert!(problem.grad_f(&short).is_err());
}
