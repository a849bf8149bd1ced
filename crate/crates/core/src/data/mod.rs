//! Dataset handling: synthetic generation, on-disk ingestion, preprocessing
//! (pad/tile/resize), augmentation, and ground-truth density rasterization.

mod io;
mod prep;
mod raster;
mod synth;

pub use io::{dataset_content_hash, load_dataset, save_dataset, DatasetLayout, DatasetManifest};
pub use prep::{augment, pad_and_tile, quad_patch, resize_sample, AugmentOp};
pub use raster::rasterize_density;
pub use synth::generate_synthetic;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-cell point labels in sub-pixel image coordinates, `(x, y)` = (column, row).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DotAnnotation {
    points: Vec<(f64, f64)>,
}

impl DotAnnotation {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// The cell count is always the number of points, never stored separately.
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that every point lies inside `[0, width) x [0, height)`.
    pub fn validate_bounds(&self, height: usize, width: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64)
                || !x.is_finite()
                || !y.is_finite()
            {
                return Err(Error::Annotation { x, y, width, height });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

/// One unit of training data: an image, its dot annotations, and provenance.
#[derive(Debug, Clone)]
pub struct ImageSample {
    /// H x W x C intensities in `[0, 1]`.
    pub image: Array3<f32>,
    pub dots: DotAnnotation,
    pub source_id: String,
    pub split: Split,
}

impl ImageSample {
    pub fn new(image: Array3<f32>, dots: DotAnnotation, source_id: String, split: Split) -> Result<Self> {
        let (h, w, _) = image.dim();
        dots.validate_bounds(h, w)?;
        Ok(Self { image, dots, source_id, split })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn channels(&self) -> usize {
        self.image.dim().2
    }

    /// Original image id for tiled samples (`"<id>#tile..."` → `"<id>"`).
    pub fn original_id(&self) -> &str {
        self.source_id.split('#').next().unwrap_or(&self.source_id)
    }
}

/// Nonnegative 2D field whose sum encodes a count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    values: Array2<f64>,
    total: f64,
}

impl DensityMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Shape("density map entries must be finite and nonnegative".into()));
        }
        let total = values.sum();
        Ok(Self { values, total })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { values: Array2::zeros((height, width)), total: 0.0 }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub(crate) fn from_parts_unchecked(values: Array2<f64>) -> Self {
        let total = values.sum();
        Self { values, total }
    }
}

/// Parameters of the synthetic fluorescence-microscopy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub count_mean: f64,
    pub count_std: f64,
    /// (min, max) cell radius in pixels.
    pub cell_radius_range: (f64, f64),
    /// (min, max) defocus blur sigma in pixels.
    pub blur_sigma_range: (f64, f64),
    pub overlap_allowed: bool,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Count statistics follow the synthetic fluorescence benchmark: 174 +- 64
        // cells per 256x256 image, overlapping, at varied focal distances.
        Self {
            num_images: 200,
            image_size: (256, 256),
            count_mean: 174.0,
            count_std: 64.0,
            cell_radius_range: (3.0, 6.0),
            blur_sigma_range: (0.5, 2.0),
            overlap_allowed: true,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("image_size must be nonzero".into()));
        }
        if self.cell_radius_range.0 > self.cell_radius_range.1 || self.cell_radius_range.0 <= 0.0 {
            return Err(Error::Config(format!(
                "invalid cell_radius_range ({}, {})",
                self.cell_radius_range.0, self.cell_radius_range.1
            )));
        }
        if self.blur_sigma_range.0 > self.blur_sigma_range.1 || self.blur_sigma_range.0 < 0.0 {
            return Err(Error::Config(format!(
                "invalid blur_sigma_range ({}, {})",
                self.blur_sigma_range.0, self.blur_sigma_range.1
            )));
        }
        if self.count_std < 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config("count_std and noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Deterministic train:test:val split with ratio 10:9:1 by largest remainder.
///
/// Ids are ranked by a seeded hash, so the assignment is a pure function of
/// the seed and the id set.
pub fn assign_splits(source_ids: &[String], seed: u64) -> Vec<Split> {
    use sha2::{Digest, Sha256};
    let n = source_ids.len();
    if n == 0 {
        return Vec::new();
    }
    let ratios = [10usize, 9, 1];
    let total: usize = ratios.iter().sum();
    // Largest-remainder apportionment of n over 10:9:1.
    let mut counts = [0usize; 3];
    let mut rem: Vec<(usize, usize)> = Vec::new(); // (remainder numerator, bucket)
    let mut assigned = 0;
    for (b, &r) in ratios.iter().enumerate() {
        counts[b] = n * r / total;
        assigned += counts[b];
        rem.push((n * r % total, b));
    }
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for i in 0..(n - assigned) {
        counts[rem[i % 3].1] += 1;
    }

    let mut ranked: Vec<(Vec<u8>, usize)> = source_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut hasher = Sha256::new();
            hasher.update(seed.to_le_bytes());
            hasher.update(id.as_bytes());
            (hasher.finalize().to_vec(), i)
        })
        .collect();
    ranked.sort();

    let mut splits = vec![Split::Train; n];
    for (rank, &(_, idx)) in ranked.iter().enumerate() {
        splits[idx] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Test
        } else {
            Split::Val
        };
    }
    splits
}
