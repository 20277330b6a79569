//! PCA channel compression: fit on pooled training observations, project
//! each character segment from `[channels, time]` to `[time, k]`.
//!
//! All fitting and projection arithmetic runs in f64; compressed outputs are
//! cast to f32 at the very end. Components are rows, sorted by decreasing
//! explained variance, with a fixed sign convention (the entry of largest
//! magnitude in each row is positive) so results do not depend on the
//! eigen-solver's sign choices.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PCA_FORMAT_VERSION: u32 = 1;

/// A fitted channel-compression transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Per-channel mean, length = channel count.
    pub mean: Array1<f64>,
    /// Principal directions as rows, `[k, channels]`.
    pub components: Array2<f64>,
    /// Fraction of total variance captured by each component, non-increasing.
    pub explained_variance_ratio: Vec<f64>,
    /// Which split the model was fitted on (normally "train").
    pub fitted_on: String,
}

#[derive(Serialize, Deserialize)]
struct PcaFile {
    format_version: u32,
    n_components: usize,
    n_features: usize,
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    explained_variance_ratio: Vec<f64>,
    fitted_on: String,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Canonical JSON serialization (used for files and byte-level equality).
    pub fn to_json(&self) -> String {
        let file = PcaFile {
            format_version: PCA_FORMAT_VERSION,
            n_components: self.n_components(),
            n_features: self.n_features(),
            mean: self.mean.to_vec(),
            components: self
                .components
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            explained_variance_ratio: self.explained_variance_ratio.clone(),
            fitted_on: self.fitted_on.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("serializable model");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let file: PcaFile = serde_json::from_str(&raw).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: msg.to_string(),
        };
        if file.format_version != PCA_FORMAT_VERSION {
            return Err(bad(&format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        if file.mean.len() != file.n_features
            || file.components.len() != file.n_components
            || file.explained_variance_ratio.len() != file.n_components
            || file.components.iter().any(|r| r.len() != file.n_features)
        {
            return Err(bad("inconsistent dimensions"));
        }
        let mut components = Array2::<f64>::zeros((file.n_components, file.n_features));
        for (i, row) in file.components.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                components[[i, j]] = *v;
            }
        }
        Ok(PcaModel {
            mean: Array1::from_vec(file.mean),
            components,
            explained_variance_ratio: file.explained_variance_ratio,
            fitted_on: file.fitted_on,
        })
    }
}

/// Fits a `k`-component PCA on the pooled observations of `segments`.
///
/// Each segment is `[n_chars, channels, time]`; every (character, time)
/// column is one observation vector over channels. `fitted_on` is recorded
/// verbatim so saved models name their fitting split (always "train" in the
/// pipeline).
pub fn fit_pca(segments: &[Array3<f32>], k: usize, fitted_on: &str) -> Result<PcaModel> {
    if segments.is_empty() {
        return Err(Error::Data("no segments to fit PCA on".into()));
    }
    let c = segments[0].shape()[1];
    if k < 1 {
        return Err(Error::Config("PCA component count must be >= 1".into()));
    }
    if k > c {
        return Err(Error::Config(format!(
            "PCA component count {k} exceeds channel count {c}"
        )));
    }
    for s in segments {
        if s.shape()[1] != c {
            return Err(Error::Shape(format!(
                "inconsistent channel counts: {} vs {}",
                s.shape()[1],
                c
            )));
        }
    }
    let n_obs: usize = segments.iter().map(|s| s.shape()[0] * s.shape()[2]).sum();
    if n_obs < k {
        return Err(Error::Data(format!(
            "{n_obs} observations are too few to fit {k} components"
        )));
    }

    // Per-channel mean over all observations.
    let mut mean = Array1::<f64>::zeros(c);
    for s in segments {
        let (n, _, t) = s.dim();
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for ti in 0..t {
                    acc += s[[i, ch, ti]] as f64;
                }
                mean[ch] += acc;
            }
        }
    }
    mean.mapv_inplace(|v| v / n_obs as f64);

    // Centered scatter matrix, accumulated one character segment at a time.
    let mut scatter = Array2::<f64>::zeros((c, c));
    for s in segments {
        let (n, _, t) = s.dim();
        for i in 0..n {
            let block = Array2::from_shape_fn((t, c), |(ti, ch)| s[[i, ch, ti]] as f64 - mean[ch]);
            general_mat_mul(1.0, &block.t(), &block, 1.0, &mut scatter);
        }
    }
    let denom = if n_obs > 1 { (n_obs - 1) as f64 } else { 1.0 };
    let cov = DMatrix::from_row_iterator(c, c, scatter.iter().map(|v| v / denom));

    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let mut components = Array2::<f64>::zeros((k, c));
    for (row, &col) in order.iter().take(k).enumerate() {
        for ch in 0..c {
            components[[row, ch]] = eigen.eigenvectors[(ch, col)];
        }
        // Sign convention: the largest-magnitude entry is positive.
        let mut best = 0usize;
        for ch in 1..c {
            if components[[row, ch]].abs() > components[[row, best]].abs() {
                best = ch;
            }
        }
        if components[[row, best]] < 0.0 {
            for ch in 0..c {
                components[[row, ch]] = -components[[row, ch]];
            }
        }
    }

    let clamped: Vec<f64> = order
        .iter()
        .map(|&col| eigen.eigenvalues[col].max(0.0))
        .collect();
    let total: f64 = clamped.iter().sum();
    let explained_variance_ratio = clamped
        .iter()
        .take(k)
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();

    Ok(PcaModel {
        mean,
        components,
        explained_variance_ratio,
        fitted_on: fitted_on.to_string(),
    })
}

/// Projects one character segment `[channels, time]` to `[time, k]`:
/// `out[t, j] = Σ_c components[j, c] · (segment[c, t] − mean[c])`.
pub fn apply_pca(model: &PcaModel, segment: ArrayView2<f32>) -> Result<Array2<f32>> {
    let (c, t) = segment.dim();
    if c != model.n_features() {
        return Err(Error::Shape(format!(
            "segment has {} channels, model expects {}",
            c,
            model.n_features()
        )));
    }
    let k = model.n_components();
    let mut out = Array2::<f32>::zeros((t, k));
    for ti in 0..t {
        for j in 0..k {
            let mut acc = 0.0f64;
            for ch in 0..c {
                acc += model.components[[j, ch]] * (segment[[ch, ti]] as f64 - model.mean[ch]);
            }
            out[[ti, j]] = acc as f32;
        }
    }
    Ok(out)
}

/// Maps a compressed segment `[time, k]` back to channel space `[channels, time]`.
pub fn reconstruct(model: &PcaModel, compressed: ArrayView2<f32>) -> Result<Array2<f32>> {
    let (t, k) = compressed.dim();
    if k != model.n_components() {
        return Err(Error::Shape(format!(
            "compressed segment has {} components, model expects {}",
            k,
            model.n_components()
        )));
    }
    let c = model.n_features();
    let mut out = Array2::<f32>::zeros((c, t));
    for ti in 0..t {
        for ch in 0..c {
            let mut acc = model.mean[ch];
            for j in 0..k {
                acc += model.components[[j, ch]] * compressed[[ti, j]] as f64;
            }
            out[[ch, ti]] = acc as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const CH: usize = 128;
    const T: usize = 90;

    fn random_segments(rng: &mut ChaCha8Rng, n_sentences: usize, chars: usize) -> Vec<Array3<f32>> {
        (0..n_sentences)
            .map(|_| {
                Array3::from_shape_fn((chars, CH, T), |_| {
                    let x: f64 = StandardNormal.sample(rng);
                    x as f32
                })
            })
            .collect()
    }

    #[test]
    fn apply_matches_brute_force_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let segments = random_segments(&mut rng, 3, 2);
        let model = fit_pca(&segments, 8, "train").unwrap();
        let seg = Array3::from_shape_fn((1, CH, T), |_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x as f32
        });
        let view = seg.index_axis(ndarray::Axis(0), 0);
        let got = apply_pca(&model, view).unwrap();
        assert_eq!(got.dim(), (T, 8));
        for ti in 0..T {
            for j in 0..8 {
                let mut oracle = 0.0f64;
                for ch in 0..CH {
                    oracle += model.components[[j, ch]] * (view[[ch, ti]] as f64 - model.mean[ch]);
                }
                assert!(
                    (got[[ti, j]] as f64 - oracle).abs() <= 1e-6,
                    "t={ti} j={j}: {} vs {}",
                    got[[ti, j]],
                    oracle
                );
            }
        }
    }

    #[test]
    fn components_orthonormal_and_ratios_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = fit_pca(&random_segments(&mut rng, 4, 3), 8, "train").unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..CH)
                    .map(|c| model.components[[i, c]] * model.components[[j, c]])
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() <= 1e-5, "row {i}·row {j} = {dot}");
            }
        }
        let r = &model.explained_variance_ratio;
        assert_eq!(r.len(), 8);
        let sum: f64 = r.iter().sum();
        assert!(sum <= 1.0 + 1e-6);
        for w in r.windows(2) {
            assert!(w[0] >= w[1] - 1e-12, "ratios must be non-increasing: {r:?}");
        }
        assert!(r.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = fit_pca(&random_segments(&mut rng, 3, 2), 8, "train").unwrap();
        for i in 0..8 {
            let row = model.components.row(i);
            let mut best = 0usize;
            for c in 1..CH {
                if row[c].abs() > row[best].abs() {
                    best = c;
                }
            }
            assert!(row[best] > 0.0, "component {i} violates sign convention");
        }
    }

    #[test]
    fn exact_reconstruction_on_rank8_subspace() {
        // Build an orthonormal 8-dim channel basis via QR of a seeded matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = DMatrix::<f64>::from_fn(CH, 8, |_, _| StandardNormal.sample(&mut rng));
        let q = raw.qr().q(); // CH x 8, orthonormal columns

        // Data = mean offset + combinations of the basis columns.
        let offset: Vec<f64> = (0..CH).map(|_| rng.random_range(-1.0..1.0)).collect();
        let segments: Vec<Array3<f32>> = (0..3)
            .map(|_| {
                Array3::from_shape_fn((2, CH, T), |(i, ch, ti)| {
                    let mut v = offset[ch];
                    for j in 0..8 {
                        // Coefficient varies per (sentence-char, time, component).
                        let coeff = ((i * T + ti) as f64 * 0.01 + j as f64).sin() * 3.0;
                        v += coeff * q[(ch, j)];
                    }
                    v as f32
                })
            })
            .collect();
        let model = fit_pca(&segments, 8, "train").unwrap();

        let view = segments[0].index_axis(ndarray::Axis(0), 0);
        let compressed = apply_pca(&model, view).unwrap();
        let rebuilt = reconstruct(&model, compressed.view()).unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for ch in 0..CH {
            for ti in 0..T {
                num += ((rebuilt[[ch, ti]] - view[[ch, ti]]) as f64).powi(2);
                den += (view[[ch, ti]] as f64).powi(2);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 1e-5, "relative reconstruction error {rel}");
    }

    #[test]
    fn centering_maps_mean_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = fit_pca(&random_segments(&mut rng, 3, 2), 8, "train").unwrap();
        let seg = Array2::from_shape_fn((CH, T), |(ch, _)| model.mean[ch] as f32);
        let out = apply_pca(&model, seg.view()).unwrap();
        // The f32 cast of the mean reintroduces rounding of order 1e-7 per channel.
        for v in out.iter() {
            assert!(v.abs() <= 1e-4, "expected ~0, got {v}");
        }
    }

    #[test]
    fn injected_component_projects_to_unit_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = fit_pca(&random_segments(&mut rng, 3, 2), 8, "train").unwrap();
        let mut seg = Array2::from_shape_fn((CH, T), |(ch, _)| model.mean[ch] as f32);
        for ch in 0..CH {
            seg[[ch, 0]] += model.components[[0, ch]] as f32;
        }
        let out = apply_pca(&model, seg.view()).unwrap();
        for j in 0..8 {
            let expected = if j == 0 { 1.0 } else { 0.0 };
            assert!(
                (out[[0, j]] as f64 - expected).abs() <= 1e-4,
                "out[0,{j}] = {}",
                out[[0, j]]
            );
        }
    }

    #[test]
    fn fit_is_deterministic_to_the_byte() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let segments = random_segments(&mut rng, 3, 2);
        let a = fit_pca(&segments, 8, "train").unwrap();
        let b = fit_pca(&segments, 8, "train").unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn save_load_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = fit_pca(&random_segments(&mut rng, 2, 2), 4, "train").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.json");
        model.save(&path).unwrap();
        let loaded = PcaModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(loaded.fitted_on, "train");
    }

    #[test]
    fn error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let segments = random_segments(&mut rng, 1, 1);
        assert!(matches!(
            fit_pca(&segments, 129, "train"),
            Err(Error::Config(_))
        ));
        // One observation only: fewer observations than components.
        let tiny = vec![Array3::<f32>::zeros((1, CH, 1))];
        assert!(matches!(fit_pca(&tiny, 8, "train"), Err(Error::Data(_))));
        let model = fit_pca(&segments, 2, "train").unwrap();
        let wrong = Array2::<f32>::zeros((64, T));
        assert!(matches!(
            apply_pca(&model, wrong.view()),
            Err(Error::Shape(_))
        ));
    }
}
