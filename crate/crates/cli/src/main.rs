//! `hpgcg` command-line front end.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use hpgcg::dataset::{
    add_noise, build_dataset, load_dataset, load_model, save_dataset, save_model,
    synthetic_cartoon, ModelMetadata, MODEL_FORMAT_VERSION,
};
use hpgcg::learning::{
    train_model_with, ConstantModel, LearningCurvature, LearningData, ModelKind, TrainConfig,
    TrainedModel,
};
use hpgcg::metrics::{cached_oracle_alphas, constant_grid, evaluate, oracle_alphas, EvalConfig};
use hpgcg::pgm::{read_pgm, write_pgm, GrayImage};
use hpgcg::rof::{bregman_decomposition, denoise, primal_dual_gap, RofInstance};
use hpgcg::solver::{rate_check, SolveTrace, SolverConfig};
use hpgcg::tv::{ScalarField, VectorField};
use hpgcg::QuadraticModel;

#[derive(Parser, Debug)]
#[command(
    name = "hpgcg",
    version,
    about = "HPGCG solver and TV parameter learning"
)]
struct Cli {
    /// Worker threads (1 gives the reference serial order).
    #[arg(long, global = true, env = "HPGCG_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut images into patches, add seeded Gaussian noise and save a dataset.
    MakeDataset(MakeDatasetArgs),
    /// Train a parameter model on a dataset.
    Train(TrainArgs),
    /// Denoise an image tile by tile with a model or a fixed weight.
    Denoise(DenoiseArgs),
    /// Evaluate models on a test dataset.
    Eval(EvalArgs),
    /// Print the primal-dual gap and its Bregman decomposition.
    GapCheck(GapCheckArgs),
    /// Check the o(k^-1/3) rate proxy on a trace CSV.
    RateCheck(RateCheckArgs),
}

#[derive(Args, Debug)]
struct MakeDatasetArgs {
    /// Directory of PGM images (read in file-name order).
    #[arg(long, conflicts_with = "synthetic")]
    images: Option<PathBuf>,
    /// Generate this many synthetic cartoon images instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 64)]
    synthetic_size: usize,
    /// Output manifest; the payload goes next to it with extension `.bin`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long, default_value_t = 16)]
    stride: usize,
    #[arg(long, default_value_t = 0.05)]
    variance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_patches: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model metadata; the payload goes next to it with extension `.bin`.
    #[arg(long)]
    out: PathBuf,
    /// Residual trace CSV (`k,residual,theta,objective`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "quadratic")]
    kind: ModelKind,
    #[arg(long, default_value_t = 50.0)]
    lambda: f64,
    /// Lipschitz constant for the step size (default 8/N).
    #[arg(long, conflicts_with = "exact_curvature")]
    lipschitz: Option<f64>,
    /// Use the exact curvature of the objective instead of a Lipschitz bound.
    #[arg(long)]
    exact_curvature: bool,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iterations: usize,
    /// Keep every n-th iterate in the trace.
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    /// Noisy PGM image.
    #[arg(long)]
    input: PathBuf,
    /// Reassembled denoised PGM.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, required_unless_present = "alpha", conflicts_with = "alpha")]
    model: Option<PathBuf>,
    /// Fixed weight for every tile.
    #[arg(long)]
    alpha: Option<f64>,
    /// Tile size; taken from a quadratic model when omitted.
    #[arg(long)]
    patch_size: Option<usize>,
    /// CSV with one row per tile: `row,col,alpha,status,gap`.
    #[arg(long)]
    alpha_map: Option<PathBuf>,
    /// Directory for one denoised PGM per tile.
    #[arg(long)]
    patch_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iterations: usize,
    /// Maxval of the written PGM files.
    #[arg(long, default_value_t = 65535)]
    maxval: u16,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Test dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Model to evaluate as `name=path`; repeatable.
    #[arg(long = "model", value_parser = parse_named_path)]
    models: Vec<(String, PathBuf)>,
    /// Also evaluate the eight geometric constants from 1e-4 to 1e-1.
    #[arg(long)]
    constant_grid: bool,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-patch CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Cache for the per-patch best constants.
    #[arg(long)]
    oracle_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 50.0)]
    oracle_lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    oracle_tolerance: f64,
    #[arg(long, default_value_t = 100_000)]
    oracle_max_iterations: usize,
    #[arg(long, default_value_t = 1e-8)]
    denoise_tolerance: f64,
    #[arg(long, default_value_t = 100_000)]
    denoise_max_iterations: usize,
}

#[derive(Args, Debug)]
struct GapCheckArgs {
    /// Square PGM used as the noisy data.
    #[arg(long, conflicts_with = "size")]
    input: Option<PathBuf>,
    /// Side of a synthetic instance (cartoon patch plus noise).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    variance: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Random feasible pairs to decompose.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gap the reference pair is solved to.
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iterations: usize,
}

#[derive(Args, Debug)]
struct RateCheckArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 10)]
    k_min: usize,
    #[arg(long, default_value_t = 5000)]
    k_max: usize,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

/// A command-line problem detected before any work starts.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Files written by the running command, removed again if it fails.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
}

impl Outputs {
    fn claim(&mut self, path: &Path) -> PathBuf {
        self.paths.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn cleanup(&self) {
        for p in &self.paths {
            let _ = fs::remove_file(p);
        }
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn require_dir(path: &Path) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(usage(format!(
            "directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn require_writable(path: &Path, inputs: &[&Path]) -> anyhow::Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(usage(format!(
            "output directory {} does not exist",
            parent.display()
        )));
    }
    for input in inputs {
        if same_file(path, input) {
            return Err(usage(format!(
                "output {} would overwrite an input",
                path.display()
            )));
        }
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn require_positive(name: &str, value: f64) -> anyhow::Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(usage(format!("--{name} must be positive, got {value}")));
    }
    Ok(())
}

fn write_text(outputs: &mut Outputs, path: &Path, text: &str) -> anyhow::Result<()> {
    let path = outputs.claim(path);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_trace(outputs: &mut Outputs, path: &Path, trace: &SolveTrace) -> anyhow::Result<()> {
    let path = outputs.claim(path);
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn make_dataset(
    args: &MakeDatasetArgs,
    outputs: &mut Outputs,
) -> anyhow::Result<serde_json::Value> {
    require_writable(&args.out, &[])?;
    if args.patch_size < 2 || args.stride == 0 {
        return Err(usage("--patch-size must be >= 2 and --stride >= 1"));
    }
    if !(args.variance >= 0.0) || !args.variance.is_finite() {
        return Err(usage("--variance must be non-negative"));
    }
    let (images, source) = match (&args.images, args.synthetic) {
        (Some(dir), None) => {
            require_dir(dir)?;
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .with_context(|| format!("listing {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(usage(format!("no .pgm files in {}", dir.display())));
            }
            let images = files
                .iter()
                .map(read_pgm)
                .collect::<hpgcg::Result<Vec<_>>>()?;
            (images, format!("pgm:{}", dir.display()))
        }
        (None, Some(count)) => {
            if count == 0 || args.synthetic_size < args.patch_size {
                return Err(usage("synthetic images must be non-empty and hold a patch"));
            }
            let images = (0..count)
                .map(|i| synthetic_cartoon(args.synthetic_size, args.seed.wrapping_add(i as u64)))
                .collect::<Vec<_>>();
            (
                images,
                format!("synthetic:{count}x{0}x{0}", args.synthetic_size),
            )
        }
        _ => return Err(usage("give exactly one of --images or --synthetic")),
    };
    let dataset = build_dataset(
        &images,
        args.patch_size,
        args.stride,
        args.variance,
        args.seed,
        args.max_patches,
        &source,
    )?;
    outputs.claim(&args.out);
    outputs.claim(&args.out.with_extension("bin"));
    save_dataset(&args.out, &dataset)?;
    Ok(json!({
        "dataset": args.out,
        "count": dataset.len(),
        "patch_size": dataset.patch_size(),
        "checksum": format!("{:08x}", dataset.checksum()),
    }))
}

fn train(args: &TrainArgs, outputs: &mut Outputs) -> anyhow::Result<serde_json::Value> {
    require_file(&args.data)?;
    require_writable(&args.out, &[&args.data])?;
    if let Some(t) = &args.trace {
        require_writable(t, &[&args.data])?;
    }
    require_positive("lambda", args.lambda)?;
    require_positive("tolerance", args.tolerance)?;
    if let Some(l) = args.lipschitz {
        require_positive("lipschitz", l)?;
    }
    if args.max_iterations == 0 || args.trace_every == 0 {
        return Err(usage(
            "--max-iterations and --trace-every must be at least 1",
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let data = LearningData::from_pairs(&dataset.pairs)?;
    let config = TrainConfig {
        lambda: args.lambda,
        residual_tolerance: args.tolerance,
        max_iterations: args.max_iterations,
        model_kind: args.kind,
        curvature: if args.exact_curvature {
            LearningCurvature::Operator
        } else {
            LearningCurvature::Lipschitz(args.lipschitz)
        },
        trace_every: args.trace_every,
    };
    let (model, trace, status, iterations, residual, objective, clamped) = match args.kind {
        ModelKind::Quadratic => {
            let o = train_model_with::<QuadraticModel, _>(&data, &config, |_, _| {})?;
            let m = TrainedModel::from(o.model);
            (
                m,
                o.trace,
                o.status,
                o.iterations,
                o.residual,
                o.objective,
                o.clamped_eigenvalues,
            )
        }
        ModelKind::Constant => {
            let o = train_model_with::<ConstantModel, _>(&data, &config, |_, _| {})?;
            let m = TrainedModel::from(o.model);
            (
                m,
                o.trace,
                o.status,
                o.iterations,
                o.residual,
                o.objective,
                o.clamped_eigenvalues,
            )
        }
    };
    let meta = ModelMetadata {
        format_version: MODEL_FORMAT_VERSION,
        kind: model.kind(),
        dim: model.dim(),
        patch_size: dataset.patch_size(),
        lambda: config.lambda,
        lipschitz: config.lipschitz(data.len()),
        residual_tolerance: config.residual_tolerance,
        iterations,
        final_residual: residual,
        status,
        objective,
        training_set: format!("{:08x}", dataset.checksum()),
        payload: String::new(),
        payload_crc32: 0,
    };
    outputs.claim(&args.out);
    outputs.claim(&args.out.with_extension("bin"));
    save_model(&args.out, &model, &meta)?;
    if let Some(t) = &args.trace {
        write_trace(outputs, t, &trace)?;
    }
    let mut summary = json!({
        "model": args.out,
        "kind": model.kind(),
        "status": status,
        "iterations": iterations,
        "residual": residual,
        "objective": objective,
        "clamped_eigenvalues": clamped,
    });
    if let TrainedModel::Constant(a) = model {
        summary["alpha"] = json!(a);
    }
    Ok(summary)
}

struct Tile {
    row: usize,
    col: usize,
    alpha: f64,
    u: ScalarField,
    status: hpgcg::SolveStatus,
    gap: f64,
}

fn denoise_image(args: &DenoiseArgs, outputs: &mut Outputs) -> anyhow::Result<serde_json::Value> {
    require_file(&args.input)?;
    let mut inputs: Vec<&Path> = vec![&args.input];
    if let Some(m) = &args.model {
        require_file(m)?;
        inputs.push(m);
    }
    require_writable(&args.out, &inputs)?;
    if let Some(a) = &args.alpha_map {
        require_writable(a, &inputs)?;
    }
    if let Some(d) = &args.patch_dir {
        require_dir(d)?;
    }
    require_positive("tolerance", args.tolerance)?;
    if let Some(a) = args.alpha {
        if !(a >= 0.0) || !a.is_finite() {
            return Err(usage("--alpha must be non-negative"));
        }
    }
    let model = match (&args.model, args.alpha) {
        (Some(path), _) => load_model(path, args.patch_size)?.0,
        (None, Some(a)) => TrainedModel::Constant(a),
        (None, None) => return Err(usage("give --model or --alpha")),
    };
    let p = match (model.patch_width(), args.patch_size) {
        (Some(p), _) => p,
        (None, Some(p)) => p,
        (None, None) => 16,
    };
    if p < 2 {
        return Err(usage("--patch-size must be at least 2"));
    }
    let image = read_pgm(&args.input)?;
    if image.width < p || image.height < p {
        return Err(hpgcg::Error::ImageTooSmall {
            width: image.width,
            height: image.height,
            patch: p,
        }
        .into());
    }
    let solver = SolverConfig {
        residual_tolerance: args.tolerance,
        max_iterations: args.max_iterations,
        trace_every: usize::MAX,
    };
    let slots: Vec<(usize, usize)> = (0..image.height / p)
        .flat_map(|r| (0..image.width / p).map(move |c| (r, c)))
        .collect();
    let tiles = slots
        .par_iter()
        .map(|&(row, col)| -> anyhow::Result<Tile> {
            let xi = ScalarField::from_fn(p, |i, j| image.get(row * p + i, col * p + j));
            let alpha = model.alpha(&xi)?;
            let (u, status, gap) = hpgcg::metrics::reconstruct(
                &xi,
                alpha,
                &EvalConfig {
                    denoise: solver.clone(),
                    ..EvalConfig::default()
                },
            )?;
            Ok(Tile {
                row,
                col,
                alpha,
                u,
                status,
                gap,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut out = image.clone();
    for t in &tiles {
        for i in 0..p {
            for j in 0..p {
                out.set(t.row * p + i, t.col * p + j, t.u.get(i, j));
            }
        }
    }
    let out_path = outputs.claim(&args.out);
    write_pgm(&out_path, &out, args.maxval)?;
    if let Some(path) = &args.alpha_map {
        let mut csv = String::from("row,col,alpha,status,gap\n");
        for t in &tiles {
            csv.push_str(&format!(
                "{},{},{:e},{},{:e}\n",
                t.row,
                t.col,
                t.alpha,
                status_name(t.status),
                t.gap
            ));
        }
        write_text(outputs, path, &csv)?;
    }
    if let Some(dir) = &args.patch_dir {
        for t in &tiles {
            let path = outputs.claim(&dir.join(format!("tile_{:04}_{:04}.pgm", t.row, t.col)));
            let img = GrayImage::new(p, p, t.u.values().to_vec())?;
            write_pgm(&path, &img, args.maxval)?;
        }
    }
    let unconverged = tiles
        .iter()
        .filter(|t| t.status != hpgcg::SolveStatus::Converged)
        .count();
    Ok(json!({
        "output": args.out,
        "tiles": tiles.len(),
        "patch_size": p,
        "unconverged_tiles": unconverged,
    }))
}

fn status_name(s: hpgcg::SolveStatus) -> &'static str {
    match s {
        hpgcg::SolveStatus::Converged => "converged",
        hpgcg::SolveStatus::MaxIterations => "max_iterations",
    }
}

fn eval(args: &EvalArgs, outputs: &mut Outputs) -> anyhow::Result<serde_json::Value> {
    require_file(&args.data)?;
    let mut inputs: Vec<&Path> = vec![&args.data];
    for (_, m) in &args.models {
        require_file(m)?;
        inputs.push(m);
    }
    require_writable(&args.out, &inputs)?;
    if let Some(c) = &args.csv {
        require_writable(c, &inputs)?;
    }
    if let Some(c) = &args.oracle_cache {
        require_writable(c, &inputs)?;
    }
    if args.models.is_empty() && !args.constant_grid {
        return Err(usage(
            "nothing to evaluate: give --model or --constant-grid",
        ));
    }
    require_positive("oracle-lambda", args.oracle_lambda)?;
    require_positive("oracle-tolerance", args.oracle_tolerance)?;
    require_positive("denoise-tolerance", args.denoise_tolerance)?;

    let dataset = load_dataset(&args.data)?;
    let mut models = Vec::new();
    for (name, path) in &args.models {
        let (m, _) = load_model(path, Some(dataset.patch_size()))?;
        models.push((name.clone(), m));
    }
    if args.constant_grid {
        for a in constant_grid() {
            models.push((format!("constant={a:.3e}"), TrainedModel::Constant(a)));
        }
    }
    let mut config = EvalConfig::default();
    config.oracle.lambda = args.oracle_lambda;
    config.oracle.residual_tolerance = args.oracle_tolerance;
    config.oracle.max_iterations = args.oracle_max_iterations;
    config.denoise.residual_tolerance = args.denoise_tolerance;
    config.denoise.max_iterations = args.denoise_max_iterations;
    let oracle = match &args.oracle_cache {
        Some(path) => {
            let existed = path.exists();
            let alphas = cached_oracle_alphas(path, &dataset, &config.oracle)?;
            if !existed {
                outputs.claim(path);
            }
            alphas
        }
        None => oracle_alphas(&dataset.pairs, &config.oracle)?,
    };
    let report = evaluate(&models, &dataset, &oracle, &config)?;
    write_text(outputs, &args.out, &report.to_json()?)?;
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_text(outputs, path, &String::from_utf8(buf)?)?;
    }
    eprint!("{}", report.summary());
    Ok(json!({
        "report": args.out,
        "models": report
            .models
            .iter()
            .map(|m| json!({"name": m.name, "mse_alpha": m.mse_alpha, "mse_u": m.mse_u}))
            .collect::<Vec<_>>(),
    }))
}

fn random_feasible(p: usize, alpha: f64, rng: &mut ChaCha8Rng) -> (ScalarField, VectorField) {
    let u = ScalarField::from_fn(p, |_, _| rng.random_range(-0.5..1.5));
    let mut v = VectorField::zeros(p);
    for x in v.values_mut() {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let r = alpha * rng.random_range(0.0..=1.0f64);
        *x = [r * angle.cos(), r * angle.sin()];
    }
    (u, v)
}

fn gap_check(args: &GapCheckArgs) -> anyhow::Result<serde_json::Value> {
    require_positive("alpha", args.alpha)?;
    require_positive("tolerance", args.tolerance)?;
    let (xi, truth) = match (&args.input, args.size) {
        (Some(path), None) => {
            require_file(path)?;
            let img = read_pgm(path)?;
            if img.width != img.height {
                return Err(hpgcg::Error::Dimension(format!(
                    "gap-check needs a square image, got {}x{}",
                    img.width, img.height
                ))
                .into());
            }
            (ScalarField::new(img.width, img.pixels)?, None)
        }
        (None, Some(p)) => {
            if p < 2 {
                return Err(usage("--size must be at least 2"));
            }
            let img = synthetic_cartoon(p, args.seed);
            let truth = ScalarField::new(p, img.pixels)?;
            (add_noise(&truth, args.variance, args.seed)?, Some(truth))
        }
        _ => return Err(usage("give exactly one of --input or --size")),
    };
    let p = xi.width();
    let instance = RofInstance::new(xi, args.alpha)?;
    let solved = denoise(
        &instance,
        &SolverConfig {
            residual_tolerance: args.tolerance,
            max_iterations: args.max_iterations,
            trace_every: usize::MAX,
        },
    )?;
    let pair = solved.pair;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst: f64 = 0.0;
    let mut samples = Vec::with_capacity(args.samples);
    for _ in 0..args.samples {
        let (u, v) = random_feasible(p, args.alpha, &mut rng);
        let gap = primal_dual_gap(&u, &v, &instance);
        let d = bregman_decomposition(&u, &v, &pair, &instance)?;
        let discrepancy = (gap - d.total()).abs() / (1.0 + gap);
        worst = worst.max(discrepancy);
        samples.push(json!({
            "gap": gap,
            "d_f": d.d_f,
            "d_fstar": d.d_fstar,
            "d_gstar": d.d_gstar,
            "d_g": d.d_g,
            "relative_discrepancy": discrepancy,
        }));
    }
    let mut out = json!({
        "patch_size": p,
        "alpha": args.alpha,
        "pair_gap": pair.gap,
        "pair_iterations": solved.iterations,
        "pair_status": status_name(solved.status),
        "max_relative_discrepancy": worst,
        "samples": samples,
    });
    if let Some(truth) = truth {
        let (_, v) = random_feasible(p, args.alpha, &mut rng);
        let g = primal_dual_gap(&truth, &v, &instance);
        let dist = 0.5 * truth.dist_sq(&pair.u);
        out["majorization"] = json!({
            "gap_at_truth": g,
            "half_distance_sq": dist,
            "holds": g >= dist - 1e-7,
        });
    }
    Ok(out)
}

fn rate(args: &RateCheckArgs) -> anyhow::Result<(serde_json::Value, bool)> {
    require_file(&args.trace)?;
    let file = fs::File::open(&args.trace)?;
    let trace = SolveTrace::read_csv(BufReader::new(file)).map_err(|e| {
        anyhow!(hpgcg::Error::Format {
            path: args.trace.clone(),
            reason: e,
        })
    })?;
    let check = rate_check(&trace, args.k_min, args.k_max)?;
    let pass = check.pass;
    Ok((serde_json::to_value(check)?, pass))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut outputs = Outputs::default();
    let result = match &cli.command {
        Command::MakeDataset(a) => make_dataset(a, &mut outputs).map(|v| (v, true)),
        Command::Train(a) => train(a, &mut outputs).map(|v| (v, true)),
        Command::Denoise(a) => denoise_image(a, &mut outputs).map(|v| (v, true)),
        Command::Eval(a) => eval(a, &mut outputs).map(|v| (v, true)),
        Command::GapCheck(a) => gap_check(a).map(|v| (v, true)),
        Command::RateCheck(a) => rate(a),
    };
    match result {
        Ok((value, ok)) => {
            // a closed pipe on stdout is not a failure of the command
            let _ = writeln!(
                std::io::stdout().lock(),
                "{}",
                serde_json::to_string_pretty(&value)?
            );
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Err(e) => {
            outputs.cleanup();
            Err(e)
        }
    }
}

fn error_kind(e: &anyhow::Error) -> (&'static str, u8) {
    if e.downcast_ref::<Usage>().is_some() {
        return ("usage", 2);
    }
    match e.downcast_ref::<hpgcg::Error>() {
        Some(hpgcg::Error::InvalidConfig(_)) => ("invalid_config", 2),
        Some(hpgcg::Error::Dimension(_)) => ("dimension", 2),
        Some(hpgcg::Error::ImageTooSmall { .. }) => ("image_too_small", 2),
        Some(hpgcg::Error::Format { .. }) => ("format", 1),
        Some(hpgcg::Error::Checksum { .. }) => ("checksum", 1),
        Some(hpgcg::Error::Version { .. }) => ("version", 1),
        Some(hpgcg::Error::Io { .. }) => ("io", 1),
        Some(hpgcg::Error::Infeasible(_)) => ("infeasible", 1),
        Some(hpgcg::Error::NegativeResidual { .. }) => ("internal", 1),
        Some(hpgcg::Error::Eigen(_)) => ("eigen", 1),
        Some(hpgcg::Error::NotPrimalDualPair(_)) => ("not_primal_dual_pair", 1),
        Some(hpgcg::Error::Json(_)) => ("json", 1),
        None => ("error", 1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            eprintln!(
                "{}",
                json!({"error": "usage", "message": msg, "detail": e.to_string()})
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            eprintln!("{}", json!({"error": kind, "message": format!("{e:#}")}));
            ExitCode::from(code)
        }
    }
}
