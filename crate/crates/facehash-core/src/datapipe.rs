//! Dataset loading, synthetic data generation, protocol splits, and batching.
//!
//! On-disk layout is one subdirectory per identity under a root directory:
//! `<root>/<identity_name>/<image_file>`. Labels are assigned by sorted
//! subdirectory name so two machines loading the same tree agree bit-for-bit.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::colorspace::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::rng::{
    stream_rng, SALT_SHUFFLE, SALT_SPLIT, SALT_SYNTH_IMAGE, SALT_SYNTH_TEMPLATE,
};

/// An H x W x 3 image with every channel value in [0,1].
///
/// Grayscale content is stored as three equal channels; there is no
/// single-channel representation anywhere in the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(
                "image values must lie in [0,1]".into(),
            ));
        }
        Ok(ImageTensor { data })
    }

    /// Build from a generator, clamping into [0,1].
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c).clamp(0.0, 1.0));
        ImageTensor { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y, x, c)]
    }

    /// Mean absolute pixel difference to another image of the same shape.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }
}

/// Identity class index in `[0, identity_count)`. The one-hot vector it
/// stands for has exactly one 1, so two labels agree iff their indices do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdentityLabel(pub u32);

impl IdentityLabel {
    pub fn index(&self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    RetrievalDb,
    Query,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: IdentityLabel,
    /// Stable identifier: relative file path for folder datasets, a
    /// `synthetic:<id>/<n>` tag for generated ones.
    pub source_id: String,
}

/// An immutable labeled image collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    identity_count: usize,
    identity_names: Vec<String>,
    split_role: SplitRole,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        identity_count: usize,
        identity_names: Vec<String>,
        split_role: SplitRole,
    ) -> Result<Self> {
        if identity_names.len() != identity_count {
            return Err(Error::InvalidArgument(format!(
                "{} identity names for {} identities",
                identity_names.len(),
                identity_count
            )));
        }
        for s in &samples {
            if s.label.index() >= identity_count {
                return Err(Error::InvalidArgument(format!(
                    "label {} out of range for {} identities",
                    s.label.index(),
                    identity_count
                )));
            }
        }
        Ok(Dataset {
            samples,
            identity_count,
            identity_names,
            split_role,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn identity_count(&self) -> usize {
        self.identity_count
    }

    pub fn identity_names(&self) -> &[String] {
        &self.identity_names
    }

    pub fn identity_name(&self, label: IdentityLabel) -> &str {
        &self.identity_names[label.index()]
    }

    pub fn split_role(&self) -> SplitRole {
        self.split_role
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.height())
    }

    /// Write every sample as a PNG under `dir/<identity_name>/<n>.png`.
    pub fn export_images(&self, dir: &Path) -> Result<()> {
        let mut counters = vec![0usize; self.identity_count];
        for sample in &self.samples {
            let id_dir = dir.join(&self.identity_names[sample.label.index()]);
            std::fs::create_dir_all(&id_dir).map_err(|e| Error::io(&id_dir, e))?;
            let n = counters[sample.label.index()];
            counters[sample.label.index()] += 1;
            let path = id_dir.join(format!("{n:04}.png"));
            let (h, w) = (sample.image.height(), sample.image.width());
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        (sample.image.get(y, x, 0) * 255.0).round() as u8,
                        (sample.image.get(y, x, 1) * 255.0).round() as u8,
                        (sample.image.get(y, x, 2) * 255.0).round() as u8,
                    ];
                    buf.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            buf.save(&path).map_err(|e| Error::BadImage {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Load a directory-per-identity dataset, resizing every image to
/// `image_size` x `image_size` with bilinear interpolation. Labels follow
/// sorted directory names.
pub fn load_image_folder(root: &Path, image_size: usize) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::InvalidArgument("image_size must be positive".into()));
    }
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let mut identity_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    identity_dirs.sort();
    if identity_dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no identity directories under {}",
            root.display()
        )));
    }

    let mut jobs: Vec<(PathBuf, IdentityLabel, String)> = Vec::new();
    let mut identity_names = Vec::with_capacity(identity_dirs.len());
    for (idx, dir) in identity_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .map(|x| {
                            IMAGE_EXTENSIONS
                                .contains(&x.to_string_lossy().to_lowercase().as_str())
                        })
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyIdentityDir(dir.clone()));
        }
        for f in files {
            let source_id = format!(
                "{}/{}",
                name,
                f.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
            );
            jobs.push((f, IdentityLabel(idx as u32), source_id));
        }
        identity_names.push(name);
    }

    let samples: Result<Vec<Sample>> = jobs
        .par_iter()
        .map(|(path, label, source_id)| {
            let img = image::open(path).map_err(|e| Error::BadImage {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let rgb = img.to_rgb8();
            let resized = image::imageops::resize(
                &rgb,
                image_size as u32,
                image_size as u32,
                image::imageops::FilterType::Triangle,
            );
            let image = ImageTensor::from_fn(image_size, image_size, |y, x, c| {
                resized.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            });
            Ok(Sample {
                image,
                label: *label,
                source_id: source_id.clone(),
            })
        })
        .collect();

    Dataset::new(samples?, identity_dirs.len(), identity_names, SplitRole::Train)
}

/// The noiseless per-identity template behind [`make_synthetic_dataset`].
///
/// Each identity owns a disjoint hue band; the template paints a value
/// gradient in that hue plus a fixed geometric pattern (bright rectangle,
/// dark disc, light stripe) whose placement is drawn once per identity.
pub fn synthetic_template(
    identities: usize,
    identity: usize,
    image_size: usize,
    seed: u64,
) -> ImageTensor {
    let s = image_size as f64;
    let hue = (identity as f64 + 0.5) / identities as f64;
    let mut rng = stream_rng(seed, SALT_SYNTH_TEMPLATE + identity as u64);

    let rect_x = rng.gen_range(0..image_size / 2);
    let rect_y = rng.gen_range(0..image_size / 2);
    let rect_w = rng.gen_range(image_size / 5..image_size / 2 + 1);
    let rect_h = rng.gen_range(image_size / 5..image_size / 2 + 1);
    let circle_x = rng.gen_range(s * 0.25..s * 0.75);
    let circle_y = rng.gen_range(s * 0.25..s * 0.75);
    let circle_r = rng.gen_range(s * 0.12..s * 0.25);
    let stripe_y = rng.gen_range(0..image_size.saturating_sub(2).max(1));

    ImageTensor::from_fn(image_size, image_size, |y, x, c| {
        let fx = x as f64;
        let fy = y as f64;
        let mut sat = 0.85;
        let mut val = 0.45 + 0.35 * (fx + fy) / (2.0 * (s - 1.0));
        if x >= rect_x && x < rect_x + rect_w && y >= rect_y && y < rect_y + rect_h {
            sat = 0.95;
            val = 0.95;
        }
        if (fx - circle_x).powi(2) + (fy - circle_y).powi(2) <= circle_r * circle_r {
            sat = 0.75;
            val = 0.20;
        }
        if y >= stripe_y && y < stripe_y + 2 {
            val = (val + 0.40).min(1.0);
        }
        let (r, g, b) = hsv_to_rgb(hue, sat, val);
        [r, g, b][c]
    })
}

// Per-image jitter applied on top of the template. The magnitudes are small
// enough that the separability invariant (inter-identity template distance
// exceeds intra-identity jitter distance) holds; see the datapipe oracle test.
const JITTER_BRIGHTNESS: f64 = 0.08;
const JITTER_NOISE_SIGMA: f64 = 0.03;

/// Generate a deterministic desk-scale dataset of `identities` parametric
/// identities with `images_per_identity` jittered views each.
pub fn make_synthetic_dataset(
    identities: usize,
    images_per_identity: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if identities < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 identities".into(),
        ));
    }
    if images_per_identity < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 images per identity".into(),
        ));
    }
    if image_size < 8 {
        return Err(Error::InvalidArgument(
            "image_size must be at least 8".into(),
        ));
    }

    let templates: Vec<ImageTensor> = (0..identities)
        .map(|i| synthetic_template(identities, i, image_size, seed))
        .collect();

    let max_shift = (image_size / 16).max(1) as i64;
    let samples: Vec<Sample> = (0..identities * images_per_identity)
        .into_par_iter()
        .map(|k| {
            let identity = k / images_per_identity;
            let j = k % images_per_identity;
            let mut rng = stream_rng(seed, SALT_SYNTH_IMAGE + k as u64);
            let dx = rng.gen_range(-max_shift..=max_shift);
            let dy = rng.gen_range(-max_shift..=max_shift);
            let brightness = rng.gen_range(-JITTER_BRIGHTNESS..JITTER_BRIGHTNESS);
            let template = &templates[identity];
            let size = image_size as i64;
            let mut noise = vec![0.0f64; image_size * image_size * 3];
            for v in noise.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = n * JITTER_NOISE_SIGMA;
            }
            let image = ImageTensor::from_fn(image_size, image_size, |y, x, c| {
                let sy = (y as i64 + dy).clamp(0, size - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, size - 1) as usize;
                template.get(sy, sx, c) + brightness + noise[(y * image_size + x) * 3 + c]
            });
            Sample {
                image,
                label: IdentityLabel(identity as u32),
                source_id: format!("synthetic:{identity}/{j}"),
            }
        })
        .collect();

    let identity_names = (0..identities).map(|i| format!("id_{i:03}")).collect();
    Dataset::new(samples, identities, identity_names, SplitRole::Train)
}

/// Split a dataset into a retrieval database and a query set, moving exactly
/// `queries_per_identity` samples of each identity into the query split.
/// Deterministic for a fixed seed.
pub fn split_protocol(
    dataset: &Dataset,
    queries_per_identity: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if queries_per_identity == 0 {
        return Err(Error::InvalidArgument(
            "queries_per_identity must be positive".into(),
        ));
    }
    let mut per_identity: Vec<Vec<usize>> = vec![Vec::new(); dataset.identity_count()];
    for (i, sample) in dataset.samples().iter().enumerate() {
        per_identity[sample.label.index()].push(i);
    }
    let mut is_query = vec![false; dataset.len()];
    for (identity, indices) in per_identity.iter().enumerate() {
        if indices.len() <= queries_per_identity {
            return Err(Error::TooFewSamples {
                name: dataset.identity_names()[identity].clone(),
                available: indices.len(),
                requested: queries_per_identity,
            });
        }
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut stream_rng(seed, SALT_SPLIT + identity as u64));
        for &i in shuffled.iter().take(queries_per_identity) {
            is_query[i] = true;
        }
    }

    let pick = |query: bool, role: SplitRole| -> Result<Dataset> {
        let samples: Vec<Sample> = dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(i, _)| is_query[*i] == query)
            .map(|(_, s)| s.clone())
            .collect();
        Dataset::new(
            samples,
            dataset.identity_count(),
            dataset.identity_names().to_vec(),
            role,
        )
    };
    Ok((
        pick(false, SplitRole::RetrievalDb)?,
        pick(true, SplitRole::Query)?,
    ))
}

/// A mini-batch of images with their identity labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<IdentityLabel>,
    pub identity_count: usize,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Iterator over one epoch of shuffled full batches. The shuffle is a pure
/// function of (seed, epoch); the final partial batch is dropped.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let samples = self.dataset.samples();
        Some(LabeledBatch {
            images: idx.iter().map(|&i| samples[i].image.clone()).collect(),
            labels: idx.iter().map(|&i| samples[i].label).collect(),
            identity_count: self.dataset.identity_count(),
        })
    }
}

pub fn batch_iterator(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if batch_size > dataset.len() {
        return Err(Error::BatchTooLarge {
            batch: batch_size,
            len: dataset.len(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream_rng(seed, SALT_SHUFFLE + epoch as u64));
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = make_synthetic_dataset(10, 50, 32, 7).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a.identity_count(), 10);
        let b = make_synthetic_dataset(10, 50, 32, 7).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label, y.label);
        }
        let c = make_synthetic_dataset(2, 2, 16, 1).unwrap();
        let d = make_synthetic_dataset(2, 2, 16, 1).unwrap();
        assert_eq!(c.samples()[0].image, d.samples()[0].image);
    }

    #[test]
    fn synthetic_rejects_degenerate_args() {
        assert!(make_synthetic_dataset(1, 10, 32, 0).is_err());
        assert!(make_synthetic_dataset(4, 1, 32, 0).is_err());
        assert!(make_synthetic_dataset(4, 8, 4, 0).is_err());
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = make_synthetic_dataset(10, 50, 16, 3).unwrap();
        let (db, query) = split_protocol(&ds, 5, 11).unwrap();
        assert_eq!(query.len(), 50);
        assert_eq!(db.len(), 450);
        assert_eq!(db.split_role(), SplitRole::RetrievalDb);
        assert_eq!(query.split_role(), SplitRole::Query);

        let db_ids: std::collections::HashSet<&str> =
            db.samples().iter().map(|s| s.source_id.as_str()).collect();
        let q_ids: std::collections::HashSet<&str> =
            query.samples().iter().map(|s| s.source_id.as_str()).collect();
        assert!(db_ids.is_disjoint(&q_ids));
        assert_eq!(db_ids.len() + q_ids.len(), ds.len());

        // per-identity query count is exact
        for id in 0..10u32 {
            let n = query
                .samples()
                .iter()
                .filter(|s| s.label == IdentityLabel(id))
                .count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn split_needs_spare_samples() {
        let ds = make_synthetic_dataset(3, 4, 16, 0).unwrap();
        let err = split_protocol(&ds, 4, 0).unwrap_err();
        assert!(err.to_string().contains("id_000"), "error names the identity: {err}");
    }

    #[test]
    fn split_is_deterministic() {
        let ds = make_synthetic_dataset(5, 10, 16, 2).unwrap();
        let (db1, q1) = split_protocol(&ds, 2, 9).unwrap();
        let (db2, q2) = split_protocol(&ds, 2, 9).unwrap();
        let ids = |d: &Dataset| -> Vec<String> {
            d.samples().iter().map(|s| s.source_id.clone()).collect()
        };
        assert_eq!(ids(&db1), ids(&db2));
        assert_eq!(ids(&q1), ids(&q2));
    }

    #[test]
    fn batches_are_full_and_replayable() {
        let ds = make_synthetic_dataset(10, 50, 16, 5).unwrap();
        let batches: Vec<LabeledBatch> = batch_iterator(&ds, 256, 1, 0).unwrap().collect();
        assert_eq!(batches.len(), 1, "500 samples at batch 256 -> one batch");
        assert_eq!(batches[0].len(), 256);

        let a: Vec<Vec<IdentityLabel>> = batch_iterator(&ds, 64, 1, 3)
            .unwrap()
            .map(|b| b.labels)
            .collect();
        let b: Vec<Vec<IdentityLabel>> = batch_iterator(&ds, 64, 1, 3)
            .unwrap()
            .map(|b| b.labels)
            .collect();
        assert_eq!(a, b);
        let c: Vec<Vec<IdentityLabel>> = batch_iterator(&ds, 64, 1, 4)
            .unwrap()
            .map(|b| b.labels)
            .collect();
        assert_ne!(a, c, "different epochs reshuffle");

        assert!(batch_iterator(&ds, 501, 1, 0).is_err());
    }

    #[test]
    fn folder_roundtrip_and_label_order() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_dataset(2, 3, 16, 4).unwrap();
        // export under names that sort as alice < bob
        let renamed = Dataset::new(
            ds.samples().to_vec(),
            2,
            vec!["alice".into(), "bob".into()],
            SplitRole::Train,
        )
        .unwrap();
        renamed.export_images(dir.path()).unwrap();

        let loaded = load_image_folder(dir.path(), 16).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.identity_count(), 2);
        assert_eq!(loaded.identity_names(), &["alice".to_string(), "bob".to_string()]);
        assert_eq!(loaded.samples()[0].label, IdentityLabel(0));

        let again = load_image_folder(dir.path(), 16).unwrap();
        for (a, b) in loaded.samples().iter().zip(again.samples()) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.source_id, b.source_id);
        }
    }

    #[test]
    fn folder_errors() {
        assert!(matches!(
            load_image_folder(Path::new("/nonexistent/xyz"), 16),
            Err(Error::DatasetNotFound(_))
        ));

        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_folder(dir.path(), 16).is_err(), "no identity dirs");

        std::fs::create_dir(dir.path().join("empty_id")).unwrap();
        let err = load_image_folder(dir.path(), 16).unwrap_err();
        assert!(err.to_string().contains("empty_id"), "{err}");

        std::fs::write(dir.path().join("empty_id/bad.png"), b"not a png").unwrap();
        let err = load_image_folder(dir.path(), 16).unwrap_err();
        assert!(err.to_string().contains("bad.png"), "{err}");
    }
}
