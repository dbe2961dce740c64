//! Evaluation of trained parameter models on a test set.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PatchPair};
use crate::error::{Error, Result};
use crate::learning::{train_constant, LearningData, ModelKind, TrainConfig, TrainedModel};
use crate::rof::{denoise_with, DualSettings, RofInstance};
use crate::solver::{SolveStatus, SolverConfig};
use crate::tv::ScalarField;

/// Smallest weight handed to the denoiser; a model output of zero means
/// "keep the data".
pub const ALPHA_FLOOR: f64 = 1e-12;

/// Eight geometrically spaced constants from `1e-4` to `1e-1`.
pub fn constant_grid() -> Vec<f64> {
    (0..8)
        .map(|j| 10f64.powf(-4.0 + 3.0 * j as f64 / 7.0))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Training settings for the per-patch best constant.
    pub oracle: TrainConfig,
    /// Settings for every reconstruction.
    pub denoise: SolverConfig,
    pub dual: DualSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            oracle: TrainConfig {
                residual_tolerance: 1e-5,
                max_iterations: 100_000,
                model_kind: ModelKind::Constant,
                trace_every: usize::MAX,
                ..TrainConfig::default()
            },
            denoise: SolverConfig {
                residual_tolerance: 1e-8,
                max_iterations: 100_000,
                trace_every: usize::MAX,
            },
            dual: DualSettings::default(),
        }
    }
}

/// The best non-negative constant for one patch: the constant model trained
/// on the singleton set.
pub fn best_alpha(pair: &PatchPair, config: &TrainConfig) -> Result<f64> {
    let data = LearningData::from_pairs(std::slice::from_ref(pair))?;
    Ok(train_constant(&data, config)?.model.0.max(0.0))
}

/// Best constants for a whole set, in patch order.
pub fn oracle_alphas(pairs: &[PatchPair], config: &TrainConfig) -> Result<Vec<f64>> {
    pairs.par_iter().map(|p| best_alpha(p, config)).collect()
}

/// `1/N Σ (α*_i - α(ξ_i))²`.
pub fn mse_alpha(model: &TrainedModel, pairs: &[PatchPair], oracle: &[f64]) -> Result<f64> {
    if pairs.len() != oracle.len() {
        return Err(Error::Dimension(format!(
            "{} patches but {} oracle values",
            pairs.len(),
            oracle.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("test set is empty".into()));
    }
    let mut total = 0.0;
    for (pair, &star) in pairs.iter().zip(oracle) {
        let a = model.alpha(&pair.noisy)?;
        total += (star - a) * (star - a);
    }
    Ok(total / pairs.len() as f64)
}

/// Denoise one patch with weight `alpha` (floored at [`ALPHA_FLOOR`]).
pub fn reconstruct(
    xi: &ScalarField,
    alpha: f64,
    config: &EvalConfig,
) -> Result<(ScalarField, SolveStatus, f64)> {
    let instance = RofInstance::new(xi.clone(), alpha.max(ALPHA_FLOOR))?;
    let d = denoise_with(&instance, &config.denoise, config.dual)?;
    Ok((d.pair.u, d.status, d.pair.gap))
}

/// `1/N Σ ‖u†_i - u_i^{α(ξ_i)}‖²`.
pub fn mse_u(model: &TrainedModel, pairs: &[PatchPair], config: &EvalConfig) -> Result<f64> {
    let records = patch_records(model, pairs, None, config)?;
    Ok(mean(records.iter().map(|r| r.reconstruction_error)))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut total = 0.0;
    for v in values {
        total += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub index: usize,
    pub alpha_star: Option<f64>,
    pub alpha_model: f64,
    /// `‖u† - u^{α(ξ)}‖²`
    pub reconstruction_error: f64,
    pub status: SolveStatus,
    pub gap: f64,
}

fn patch_records(
    model: &TrainedModel,
    pairs: &[PatchPair],
    oracle: Option<&[f64]>,
    config: &EvalConfig,
) -> Result<Vec<PatchRecord>> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("test set is empty".into()));
    }
    pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let alpha_model = model.alpha(&pair.noisy)?;
            let (u, status, gap) = reconstruct(&pair.noisy, alpha_model, config)?;
            Ok(PatchRecord {
                index,
                alpha_star: oracle.map(|o| o[index]),
                alpha_model,
                reconstruction_error: u.dist_sq(&pair.truth),
                status,
                gap,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub kind: ModelKind,
    pub mse_alpha: f64,
    pub mse_u: f64,
    /// Patches whose reconstruction hit the iteration cap.
    pub unconverged: usize,
    pub records: Vec<PatchRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset_checksum: u32,
    pub patch_size: usize,
    pub count: usize,
    pub settings: EvalConfig,
    pub models: Vec<ModelReport>,
}

/// Evaluate each named model against the oracle constants.
pub fn evaluate(
    models: &[(String, TrainedModel)],
    dataset: &Dataset,
    oracle: &[f64],
    config: &EvalConfig,
) -> Result<EvaluationReport> {
    let pairs = &dataset.pairs;
    if oracle.len() != pairs.len() {
        return Err(Error::Dimension(format!(
            "{} patches but {} oracle values",
            pairs.len(),
            oracle.len()
        )));
    }
    let mut reports = Vec::with_capacity(models.len());
    for (name, model) in models {
        if let Some(p) = model.patch_width() {
            if p != dataset.patch_size() {
                return Err(Error::Dimension(format!(
                    "model `{name}` expects {p}x{p} patches, test set has {0}x{0}",
                    dataset.patch_size()
                )));
            }
        }
        let records = patch_records(model, pairs, Some(oracle), config)?;
        let mse_alpha = mean(
            records
                .iter()
                .map(|r| (r.alpha_star.unwrap_or(0.0) - r.alpha_model).powi(2)),
        );
        let mse_u = mean(records.iter().map(|r| r.reconstruction_error));
        reports.push(ModelReport {
            name: name.clone(),
            kind: model.kind(),
            mse_alpha,
            mse_u,
            unconverged: records
                .iter()
                .filter(|r| r.status != SolveStatus::Converged)
                .count(),
            records,
        });
    }
    Ok(EvaluationReport {
        dataset_checksum: dataset.checksum(),
        patch_size: dataset.patch_size(),
        count: pairs.len(),
        settings: config.clone(),
        models: reports,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per model and patch.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "model,index,alpha_star,alpha_model,reconstruction_error,status,gap"
        )?;
        for m in &self.models {
            for r in &m.records {
                let star = r.alpha_star.map(|a| format!("{a:e}")).unwrap_or_default();
                let status = match r.status {
                    SolveStatus::Converged => "converged",
                    SolveStatus::MaxIterations => "max_iterations",
                };
                writeln!(
                    out,
                    "{},{},{},{:e},{:e},{},{:e}",
                    m.name, r.index, star, r.alpha_model, r.reconstruction_error, status, r.gap
                )?;
            }
        }
        Ok(())
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut s = format!("{:<24} {:>14} {:>14}\n", "model", "mse_alpha", "mse_u");
        for m in &self.models {
            s.push_str(&format!(
                "{:<24} {:>14.6e} {:>14.6e}\n",
                m.name, m.mse_alpha, m.mse_u
            ));
        }
        s
    }
}

/// Oracle constants cached on disk, valid only for the same patch values and
/// oracle settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCache {
    pub dataset_checksum: u32,
    pub settings: TrainConfig,
    pub alphas: Vec<f64>,
}

/// Load cached oracle constants if they match, else compute and store them.
pub fn cached_oracle_alphas(
    cache_path: &Path,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let checksum = dataset.checksum();
    if let Ok(text) = std::fs::read_to_string(cache_path) {
        match serde_json::from_str::<OracleCache>(&text) {
            Ok(c)
                if c.dataset_checksum == checksum
                    && &c.settings == config
                    && c.alphas.len() == dataset.len() =>
            {
                return Ok(c.alphas)
            }
            _ => log::info!(
                "oracle cache {} is stale, recomputing",
                cache_path.display()
            ),
        }
    }
    let alphas = oracle_alphas(&dataset.pairs, config)?;
    let cache = OracleCache {
        dataset_checksum: checksum,
        settings: config.clone(),
        alphas: alphas.clone(),
    };
    std::fs::write(cache_path, serde_json::to_string_pretty(&cache)?)
        .map_err(|e| Error::io(cache_path, e))?;
    Ok(alphas)
}
