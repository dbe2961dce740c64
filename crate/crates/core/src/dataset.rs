//! Patch datasets and model files.
//!
//! A dataset is a JSON manifest next to a raw payload of little-endian `f64`
//! values: for each patch, its `p²` ground-truth values followed by its `p²`
//! noisy values, both row-major. A model is a JSON metadata file next to a
//! payload holding the row-major matrix (or the single constant).

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::TrainedModel;
use crate::pgm::GrayImage;
use crate::psd::{min_eigenvalue, QuadraticModel, ROUNDOFF_EIGEN};
use crate::solver::SolveStatus;
use crate::tv::ScalarField;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Name of the generator used for noise, stored in every manifest.
pub const NOISE_RNG: &str = "chacha8/seed_from_u64/stream=patch-index+normal-ziggurat";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    /// Ground truth `u†`.
    pub truth: ScalarField,
    /// Noisy observation `ξ`.
    pub noisy: ScalarField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub patch_size: usize,
    pub count: usize,
    pub noise_variance: f64,
    pub seed: u64,
    pub rng: String,
    pub source: String,
    /// Noisy values are never clipped to `[0, 1]`.
    pub clipped: bool,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    pub payload_bytes: u64,
    pub payload_crc32: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<PatchPair>,
}

impl Dataset {
    pub fn patch_size(&self) -> usize {
        self.manifest.patch_size
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CRC32 of the encoded payload, which identifies the patch values.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&encode_pairs(&self.pairs))
    }
}

/// Row-major `p × p` tiles at the given stride; partial border tiles are
/// dropped.
pub fn extract_patches(image: &GrayImage, p: usize, stride: usize) -> Result<Vec<ScalarField>> {
    if p == 0 || stride == 0 {
        return Err(Error::InvalidConfig(
            "patch size and stride must be positive".into(),
        ));
    }
    if image.width < p || image.height < p {
        return Err(Error::ImageTooSmall {
            width: image.width,
            height: image.height,
            patch: p,
        });
    }
    let mut out = Vec::new();
    for top in (0..=image.height - p).step_by(stride) {
        for left in (0..=image.width - p).step_by(stride) {
            out.push(ScalarField::from_fn(p, |i, j| image.get(top + i, left + j)));
        }
    }
    Ok(out)
}

/// `u + η` with `η` i.i.d. `N(0, variance)` from stream 0 of the seeded
/// generator. No clipping.
pub fn add_noise(u: &ScalarField, variance: f64, seed: u64) -> Result<ScalarField> {
    add_noise_stream(u, variance, seed, 0)
}

/// Like [`add_noise`] but drawing from stream `stream` of the generator, so
/// patches of one dataset get independent noise from a single seed.
pub fn add_noise_stream(
    u: &ScalarField,
    variance: f64,
    seed: u64,
    stream: u64,
) -> Result<ScalarField> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise variance must be non-negative, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(u.clone());
    }
    let normal =
        Normal::new(0.0, variance.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = u.clone();
    for x in out.values_mut() {
        *x += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Cut every image into patches and add seeded Gaussian noise to each.
pub fn build_dataset(
    images: &[GrayImage],
    patch_size: usize,
    stride: usize,
    noise_variance: f64,
    seed: u64,
    max_patches: Option<usize>,
    source: &str,
) -> Result<Dataset> {
    if patch_size < 2 {
        return Err(Error::InvalidConfig("patch size must be at least 2".into()));
    }
    let mut pairs = Vec::new();
    'outer: for image in images {
        for truth in extract_patches(image, patch_size, stride)? {
            if max_patches.is_some_and(|m| pairs.len() >= m) {
                break 'outer;
            }
            let noisy = add_noise_stream(&truth, noise_variance, seed, pairs.len() as u64)?;
            pairs.push(PatchPair { truth, noisy });
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no patches could be extracted".into()));
    }
    let payload = encode_pairs(&pairs);
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            patch_size,
            count: pairs.len(),
            noise_variance,
            seed,
            rng: NOISE_RNG.into(),
            source: source.into(),
            clipped: false,
            payload: String::new(),
            payload_bytes: payload.len() as u64,
            payload_crc32: crc32fast::hash(&payload),
        },
        pairs,
    })
}

/// Piecewise-constant test image: a flat background with overlapping
/// rectangles and disks of random gray levels.
pub fn synthetic_cartoon(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep clear of the noise streams
    rng.set_stream(u64::MAX);
    let mut pixels = vec![rng.random_range(0.0..1.0); size * size];
    let shapes = 3 + (size / 8).min(12);
    let s = size as f64;
    for _ in 0..shapes {
        let level: f64 = rng.random_range(0.0..1.0);
        if rng.random_bool(0.5) {
            let (r0, c0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let (h, w) = (
                rng.random_range(0.1..0.6) * s,
                rng.random_range(0.1..0.6) * s,
            );
            for i in 0..size {
                for j in 0..size {
                    let (y, x) = (i as f64, j as f64);
                    if y >= r0 && y < r0 + h && x >= c0 && x < c0 + w {
                        pixels[i * size + j] = level;
                    }
                }
            }
        } else {
            let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let r = rng.random_range(0.08..0.35) * s;
            for i in 0..size {
                for j in 0..size {
                    let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        pixels[i * size + j] = level;
                    }
                }
            }
        }
    }
    GrayImage {
        width: size,
        height: size,
        pixels,
    }
}

fn encode_pairs(pairs: &[PatchPair]) -> Vec<u8> {
    let n = pairs.first().map_or(0, |p| p.truth.len());
    let mut out = Vec::with_capacity(pairs.len() * 2 * n * 8);
    for pair in pairs {
        for field in [&pair.truth, &pair.noisy] {
            for v in field.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn resolve_payload(manifest_path: &Path, name: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Write `<path>` (manifest) and `<path>.bin` (payload, same stem).
pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    if dataset.pairs.is_empty() {
        return Err(Error::InvalidConfig(
            "refusing to save an empty dataset".into(),
        ));
    }
    let payload = encode_pairs(&dataset.pairs);
    let bin = payload_path(path);
    let mut manifest = dataset.manifest.clone();
    manifest.count = dataset.pairs.len();
    manifest.patch_size = dataset.pairs[0].truth.width();
    manifest.payload = file_name(&bin);
    manifest.payload_bytes = payload.len() as u64;
    manifest.payload_crc32 = crc32fast::hash(&payload);
    write_file(&bin, &payload)?;
    write_file(path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    if manifest.count == 0 {
        return Err(Error::format(path, "dataset holds no patches"));
    }
    if manifest.patch_size < 2 {
        return Err(Error::format(path, "patch size must be at least 2"));
    }
    let bin = resolve_payload(path, &manifest.payload);
    let payload = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n = manifest.patch_size * manifest.patch_size;
    let expected = (manifest.count * 2 * n * 8) as u64;
    if payload.len() as u64 != expected || manifest.payload_bytes != expected {
        return Err(Error::format(
            &bin,
            format!(
                "payload has {} bytes, manifest implies {expected}",
                payload.len()
            ),
        ));
    }
    let found = crc32fast::hash(&payload);
    if found != manifest.payload_crc32 {
        return Err(Error::Checksum {
            path: bin,
            expected: manifest.payload_crc32,
            found,
        });
    }
    let values = decode_f64s(&payload);
    let p = manifest.patch_size;
    let mut pairs = Vec::with_capacity(manifest.count);
    for chunk in values.chunks_exact(2 * n) {
        pairs.push(PatchPair {
            truth: ScalarField::new(p, chunk[..n].to_vec())?,
            noisy: ScalarField::new(p, chunk[n..].to_vec())?,
        });
    }
    Ok(Dataset { manifest, pairs })
}

/// Training settings and outcome stored alongside a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub kind: crate::learning::ModelKind,
    /// Matrix dimension `n + 1` (1 for a constant model).
    pub dim: usize,
    pub patch_size: usize,
    pub lambda: f64,
    pub lipschitz: Option<f64>,
    pub residual_tolerance: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub status: SolveStatus,
    pub objective: f64,
    pub training_set: String,
    pub payload: String,
    pub payload_crc32: u32,
}

fn encode_model(model: &TrainedModel) -> Vec<u8> {
    match model {
        TrainedModel::Constant(a) => a.to_le_bytes().to_vec(),
        TrainedModel::Quadratic(m) => {
            let a = m.matrix();
            let mut out = Vec::with_capacity(a.len() * 8);
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    out.extend_from_slice(&a[(i, j)].to_le_bytes());
                }
            }
            out
        }
    }
}

/// Write `<path>` (metadata) and `<path>.bin` (payload).
pub fn save_model(
    path: impl AsRef<Path>,
    model: &TrainedModel,
    meta: &ModelMetadata,
) -> Result<()> {
    let path = path.as_ref();
    let payload = encode_model(model);
    let bin = payload_path(path);
    let mut meta = meta.clone();
    meta.format_version = MODEL_FORMAT_VERSION;
    meta.kind = model.kind();
    meta.dim = model.dim();
    meta.payload = file_name(&bin);
    meta.payload_crc32 = crc32fast::hash(&payload);
    write_file(&bin, &payload)?;
    write_file(path, serde_json::to_string_pretty(&meta)?.as_bytes())
}

/// Load a model; `expected_patch_size` rejects models trained for another
/// patch size. Symmetry is re-validated; a PSD violation only warns.
pub fn load_model(
    path: impl AsRef<Path>,
    expected_patch_size: Option<usize>,
) -> Result<(TrainedModel, ModelMetadata)> {
    use crate::learning::ModelKind;

    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: ModelMetadata =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if meta.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    if let Some(p) = expected_patch_size {
        if meta.patch_size != p {
            return Err(Error::Dimension(format!(
                "model was trained on {0}x{0} patches, data has {p}x{p}",
                meta.patch_size
            )));
        }
    }
    let bin = resolve_payload(path, &meta.payload);
    let payload = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let found = crc32fast::hash(&payload);
    if found != meta.payload_crc32 {
        return Err(Error::Checksum {
            path: bin,
            expected: meta.payload_crc32,
            found,
        });
    }
    let values = decode_f64s(&payload);
    let model = match meta.kind {
        ModelKind::Constant => {
            if payload.len() != 8 {
                return Err(Error::format(
                    &bin,
                    "constant model payload must hold one value",
                ));
            }
            TrainedModel::Constant(values[0])
        }
        ModelKind::Quadratic => {
            let d = meta.dim;
            if d != meta.patch_size * meta.patch_size + 1 {
                return Err(Error::format(
                    path,
                    "dimension does not match the patch size",
                ));
            }
            if payload.len() != d * d * 8 {
                return Err(Error::format(&bin, format!("expected {} bytes", d * d * 8)));
            }
            let a = DMatrix::from_row_slice(d, d, &values);
            let scale = a.norm();
            let model = QuadraticModel::from_symmetric(a)
                .map_err(|e| Error::format(&bin, e.to_string()))?;
            let min_eig = min_eigenvalue(model.matrix())?;
            if min_eig < -ROUNDOFF_EIGEN * scale {
                log::warn!("loaded model has min eigenvalue {min_eig:e}");
            }
            TrainedModel::Quadratic(model)
        }
    };
    Ok((model, meta))
}
