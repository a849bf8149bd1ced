use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{assign_splits, DotAnnotation, ImageSample, SynthConfig};
use crate::error::Result;

/// Generates a synthetic fluorescence-microscopy style dataset: blurred
/// bright blobs on a dark background, with per-image counts drawn from a
/// clamped normal distribution.
///
/// Everything is a pure function of the config seed; the per-image RNG is
/// derived from `(seed, image index)` so the result is independent of
/// iteration order.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<ImageSample>> {
    config.validate()?;
    let (height, width) = config.image_size;

    let ids: Vec<String> = (0..config.num_images).map(|i| format!("synth_{i:05}")).collect();
    let splits = assign_splits(&ids, config.seed);

    let mut samples = Vec::with_capacity(config.num_images);
    for (i, (id, split)) in ids.into_iter().zip(splits).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, i as u64));

        let count = if config.count_std > 0.0 {
            let normal = Normal::new(config.count_mean, config.count_std).expect("validated");
            normal.sample(&mut rng).round().max(0.0) as usize
        } else {
            config.count_mean.round().max(0.0) as usize
        };

        let dots = place_dots(&mut rng, count, height, width, config);
        let image = render(&mut rng, &dots, height, width, config);
        samples.push(ImageSample::new(image, dots, id, split)?);
    }
    Ok(samples)
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed, index)
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn place_dots(
    rng: &mut ChaCha8Rng,
    count: usize,
    height: usize,
    width: usize,
    config: &SynthConfig,
) -> DotAnnotation {
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(count);
    let min_sep = config.cell_radius_range.1 * 2.0;
    for _ in 0..count {
        let mut placed = (0.0, 0.0);
        // Best effort separation when overlap is disallowed; the count is
        // never sacrificed to spacing.
        for attempt in 0..64 {
            let x = rng.gen_range(0.0..width as f64).min(width as f64 - 1e-6);
            let y = rng.gen_range(0.0..height as f64).min(height as f64 - 1e-6);
            placed = (x, y);
            if config.overlap_allowed || attempt == 63 {
                break;
            }
            let sep_ok = points
                .iter()
                .all(|&(px, py)| (px - x).hypot(py - y) >= min_sep);
            if sep_ok {
                break;
            }
        }
        points.push(placed);
    }
    DotAnnotation::new(points)
}

fn render(
    rng: &mut ChaCha8Rng,
    dots: &DotAnnotation,
    height: usize,
    width: usize,
    config: &SynthConfig,
) -> Array3<f32> {
    let mut image = Array3::<f32>::zeros((height, width, 1));
    for &(x, y) in dots.points() {
        let radius = rng.gen_range(config.cell_radius_range.0..=config.cell_radius_range.1);
        let blur = rng.gen_range(config.blur_sigma_range.0..=config.blur_sigma_range.1);
        let amplitude = rng.gen_range(0.5..=1.0);
        // Defocus widens the blob: effective sigma combines cell size and blur.
        let sigma = ((radius * 0.5).powi(2) + blur * blur).sqrt();
        let reach = (3.0 * sigma).ceil() as i64;
        let inv = 1.0 / (2.0 * sigma * sigma);

        let r0 = ((y.floor() as i64) - reach).max(0) as usize;
        let r1 = ((y.ceil() as i64) + reach).min(height as i64 - 1) as usize;
        let c0 = ((x.floor() as i64) - reach).max(0) as usize;
        let c1 = ((x.ceil() as i64) + reach).min(width as i64 - 1) as usize;
        for r in r0..=r1 {
            let dy = r as f64 - y;
            for c in c0..=c1 {
                let dx = c as f64 - x;
                image[[r, c, 0]] += (amplitude * (-(dx * dx + dy * dy) * inv).exp()) as f32;
            }
        }
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("validated");
        for v in image.iter_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    image
}
