use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use super::{DensityMap, DotAnnotation, ImageSample};
use crate::error::{Error, Result};

/// The four count-preserving isometries used for augmentation, plus identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Identity,
    Hflip,
    Vflip,
    Rot90Cw,
    Rot90Ccw,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Identity,
        AugmentOp::Hflip,
        AugmentOp::Vflip,
        AugmentOp::Rot90Cw,
        AugmentOp::Rot90Ccw,
    ];
}

/// Bilinear resize of an H x W x C image, sampling at pixel centers.
fn resize_bilinear(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, channels) = image.dim();
    let mut out = Array3::<f32>::zeros((out_h, out_w, channels));
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for r in 0..out_h {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = (y - y0 as f64) as f32;
        for c in 0..out_w {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = (x - x0 as f64) as f32;
            for ch in 0..channels {
                let v00 = image[[y0, x0, ch]];
                let v01 = image[[y0, x1, ch]];
                let v10 = image[[y1, x0, ch]];
                let v11 = image[[y1, x1, ch]];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[[r, c, ch]] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Resizes a sample to the given shape; dot geometry rescales, counts never
/// interpolate.
pub fn resize_sample(sample: &ImageSample, out_h: usize, out_w: usize) -> Result<ImageSample> {
    let (in_h, in_w, _) = sample.image.dim();
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize requires nonempty images".into()));
    }
    let sy = out_h as f64 / in_h as f64;
    let sx = out_w as f64 / in_w as f64;
    let points = sample
        .dots
        .points()
        .iter()
        .map(|&(x, y)| {
            (
                (x * sx).min(out_w as f64 - 1e-6),
                (y * sy).min(out_h as f64 - 1e-6),
            )
        })
        .collect();
    ImageSample::new(
        resize_bilinear(&sample.image, out_h, out_w),
        DotAnnotation::new(points),
        sample.source_id.clone(),
        sample.split,
    )
}

/// Pads the shorter side to square, resizes to the nearest multiple of `tile`
/// (ties round up, at least one tile), and splits into non-overlapping
/// `tile` x `tile` patches.
///
/// Dots are transformed by the same pad/scale and each dot lands in exactly
/// one tile via half-open tile intervals, so the per-tile counts always sum
/// to the original count.
pub fn pad_and_tile(sample: &ImageSample, tile: usize) -> Result<Vec<ImageSample>> {
    let (h, w, channels) = sample.image.dim();
    if h == 0 || w == 0 || tile == 0 {
        return Err(Error::Shape("pad_and_tile requires a nonempty image and tile size".into()));
    }
    let side = h.max(w);

    // Zero-pad bottom/right to square; dot coordinates are unaffected.
    let mut padded = Array3::<f32>::zeros((side, side, channels));
    padded.slice_mut(ndarray::s![..h, ..w, ..]).assign(&sample.image);

    // Nearest multiple of `tile`, ties round up.
    let k = ((side + tile / 2) / tile).max(1);
    let target = k * tile;
    let scale = target as f64 / side as f64;

    let resized = if target == side { padded } else { resize_bilinear(&padded, target, target) };
    let scaled_dots: Vec<(f64, f64)> = sample
        .dots
        .points()
        .iter()
        .map(|&(x, y)| {
            (
                (x * scale).min(target as f64 - 1e-6),
                (y * scale).min(target as f64 - 1e-6),
            )
        })
        .collect();

    let mut tiles = Vec::with_capacity(k * k);
    for ty in 0..k {
        for tx in 0..k {
            let (y0, x0) = (ty * tile, tx * tile);
            let image = resized
                .slice(ndarray::s![y0..y0 + tile, x0..x0 + tile, ..])
                .to_owned();
            let points: Vec<(f64, f64)> = scaled_dots
                .iter()
                .filter(|&&(x, y)| {
                    x >= x0 as f64
                        && x < (x0 + tile) as f64
                        && y >= y0 as f64
                        && y < (y0 + tile) as f64
                })
                .map(|&(x, y)| (x - x0 as f64, y - y0 as f64))
                .collect();
            tiles.push(ImageSample::new(
                image,
                DotAnnotation::new(points),
                format!("{}#tile{}_{}", sample.source_id, ty, tx),
                sample.split,
            )?);
        }
    }
    Ok(tiles)
}

/// Splits a sample into four equal quadrant patches (half-open ownership).
pub fn quad_patch(sample: &ImageSample) -> Result<Vec<ImageSample>> {
    let (h, w, _) = sample.image.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("quad_patch needs even dimensions, got {h}x{w}")));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut patches = Vec::with_capacity(4);
    for qy in 0..2usize {
        for qx in 0..2usize {
            let (y0, x0) = (qy * ph, qx * pw);
            let image = sample
                .image
                .slice(ndarray::s![y0..y0 + ph, x0..x0 + pw, ..])
                .to_owned();
            let points: Vec<(f64, f64)> = sample
                .dots
                .points()
                .iter()
                .filter(|&&(x, y)| {
                    x >= x0 as f64 && x < (x0 + pw) as f64 && y >= y0 as f64 && y < (y0 + ph) as f64
                })
                .map(|&(x, y)| (x - x0 as f64, y - y0 as f64))
                .collect();
            patches.push(ImageSample::new(
                image,
                DotAnnotation::new(points),
                format!("{}#quad{}_{}", sample.source_id, qy, qx),
                sample.split,
            )?);
        }
    }
    Ok(patches)
}

/// Applies one isometry to an image, its dots, and its density map together.
/// Counts and map totals are unchanged by construction.
pub fn augment(
    sample: &ImageSample,
    map: &DensityMap,
    op: AugmentOp,
) -> Result<(ImageSample, DensityMap)> {
    let (h, w, _) = sample.image.dim();
    if map.shape() != (h, w) {
        return Err(Error::Shape(format!(
            "density map {:?} does not match image {}x{}",
            map.shape(),
            h,
            w
        )));
    }
    if matches!(op, AugmentOp::Rot90Cw | AugmentOp::Rot90Ccw) && h != w {
        return Err(Error::Shape(format!("90-degree rotation needs a square input, got {h}x{w}")));
    }
    if op == AugmentOp::Identity {
        return Ok((sample.clone(), map.clone()));
    }

    let image = transform_array3(&sample.image, h, w, op);
    let values = transform_array2(map.values(), h, w, op);
    let points = sample
        .dots
        .points()
        .iter()
        .map(|&(x, y)| transform_point(x, y, h, w, op))
        .collect();

    let out = ImageSample::new(
        image,
        DotAnnotation::new(points),
        sample.source_id.clone(),
        sample.split,
    )?;
    Ok((out, DensityMap::from_parts_unchecked(values)))
}

fn transform_point(x: f64, y: f64, h: usize, w: usize, op: AugmentOp) -> (f64, f64) {
    let (nx, ny) = match op {
        AugmentOp::Identity => (x, y),
        AugmentOp::Hflip => ((w - 1) as f64 - x, y),
        AugmentOp::Vflip => (x, (h - 1) as f64 - y),
        AugmentOp::Rot90Cw => ((h - 1) as f64 - y, x),
        AugmentOp::Rot90Ccw => (y, (w - 1) as f64 - x),
    };
    // Flipping about pixel centers sends sub-pixel coordinates in
    // (dim-1, dim) slightly negative; keep dots inside the image domain.
    let (oh, ow) = out_dims(h, w, op);
    (nx.clamp(0.0, ow as f64 - 1e-6), ny.clamp(0.0, oh as f64 - 1e-6))
}

fn transform_array3(a: &Array3<f32>, h: usize, w: usize, op: AugmentOp) -> Array3<f32> {
    let channels = a.dim().2;
    let (oh, ow) = out_dims(h, w, op);
    let mut out = Array3::<f32>::zeros((oh, ow, channels));
    Zip::indexed(&mut out).for_each(|(r, c, ch), v| {
        let (sr, sc) = source_index(r, c, h, w, op);
        *v = a[[sr, sc, ch]];
    });
    out
}

fn transform_array2(a: &Array2<f64>, h: usize, w: usize, op: AugmentOp) -> Array2<f64> {
    let (oh, ow) = out_dims(h, w, op);
    let mut out = Array2::<f64>::zeros((oh, ow));
    Zip::indexed(&mut out).for_each(|(r, c), v| {
        let (sr, sc) = source_index(r, c, h, w, op);
        *v = a[[sr, sc]];
    });
    out
}

fn out_dims(h: usize, w: usize, op: AugmentOp) -> (usize, usize) {
    match op {
        AugmentOp::Rot90Cw | AugmentOp::Rot90Ccw => (w, h),
        _ => (h, w),
    }
}

/// Maps an output index back to its source pixel for each isometry.
fn source_index(r: usize, c: usize, h: usize, w: usize, op: AugmentOp) -> (usize, usize) {
    match op {
        AugmentOp::Identity => (r, c),
        AugmentOp::Hflip => (r, w - 1 - c),
        AugmentOp::Vflip => (h - 1 - r, c),
        // out[r][c] = in[h-1-c][r]
        AugmentOp::Rot90Cw => (h - 1 - c, r),
        // out[r][c] = in[c][w-1-r]
        AugmentOp::Rot90Ccw => (c, w - 1 - r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rasterize_density, Split};
    use proptest::prelude::*;

    fn sample_with(h: usize, w: usize, dots: Vec<(f64, f64)>) -> ImageSample {
        let mut image = Array3::<f32>::zeros((h, w, 1));
        for (i, &(x, y)) in dots.iter().enumerate() {
            image[[y as usize % h, x as usize % w, 0]] = 0.1 + 0.05 * i as f32;
        }
        ImageSample::new(image, DotAnnotation::new(dots), "t".into(), Split::Train).unwrap()
    }

    #[test]
    fn exact_tile_is_identity_geometry() {
        let s = sample_with(256, 256, vec![(10.0, 20.0), (200.5, 100.25)]);
        let tiles = pad_and_tile(&s, 256).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].image, s.image);
        assert_eq!(tiles[0].dots, s.dots);
    }

    #[test]
    fn dcc_min_size_gives_one_tile() {
        // 306x322 -> pad to 322x322 -> nearest multiple is 256 (|322-256| < |322-512|)
        let s = sample_with(306, 322, vec![(300.0, 100.0)]);
        let tiles = pad_and_tile(&s, 256).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].image.dim(), (256, 256, 1));
        assert_eq!(tiles[0].dots.count(), 1);
    }

    #[test]
    fn dcc_max_size_gives_nine_tiles() {
        // 798x788 -> pad to 798x798 -> nearest multiple is 768 (|798-768| < |798-1024|)
        let s = sample_with(798, 788, vec![(10.0, 10.0), (400.0, 400.0), (780.0, 700.0)]);
        let tiles = pad_and_tile(&s, 256).unwrap();
        assert_eq!(tiles.len(), 9);
        let total: usize = tiles.iter().map(|t| t.dots.count()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn tie_rounds_up() {
        // 384 is equidistant from 256 and 512; round up to 512 -> 4 tiles.
        let s = sample_with(384, 384, vec![]);
        assert_eq!(pad_and_tile(&s, 256).unwrap().len(), 4);
    }

    #[test]
    fn augment_identity_returns_inputs() {
        let s = sample_with(16, 16, vec![(3.0, 4.0)]);
        let m = rasterize_density(&s.dots, (16, 16), 1.5).unwrap();
        let (s2, m2) = augment(&s, &m, AugmentOp::Identity).unwrap();
        assert_eq!(s2.image, s.image);
        assert_eq!(m2.values(), m.values());
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = sample_with(16, 24, vec![(3.5, 4.0), (20.0, 10.0)]);
        let m = rasterize_density(&s.dots, (16, 24), 1.5).unwrap();
        let (s1, m1) = augment(&s, &m, AugmentOp::Hflip).unwrap();
        let (s2, m2) = augment(&s1, &m1, AugmentOp::Hflip).unwrap();
        assert_eq!(s2.image, s.image);
        assert_eq!(s2.dots, s.dots);
        assert_eq!(m2.values(), m.values());
    }

    #[test]
    fn rot90cw_moves_dot_per_coordinate_map() {
        let s = sample_with(256, 256, vec![(10.0, 20.0)]);
        let m = DensityMap::zeros(256, 256);
        let (s2, _) = augment(&s, &m, AugmentOp::Rot90Cw).unwrap();
        assert_eq!(s2.dots.points()[0], (235.0, 10.0));
    }

    #[test]
    fn rot90cw_matches_one_hot_array_rotation() {
        // Oracle: a one-hot map rotated as an array must put its mass where
        // the transformed dot lands.
        let h = 8;
        let mut values = Array2::<f64>::zeros((h, h));
        values[[2, 5]] = 1.0; // dot at (x=5, y=2)
        let s = sample_with(h, h, vec![(5.0, 2.0)]);
        let m = DensityMap::new(values).unwrap();
        let (s2, m2) = augment(&s, &m, AugmentOp::Rot90Cw).unwrap();
        let (x, y) = s2.dots.points()[0];
        assert_eq!(m2.values()[[y as usize, x as usize]], 1.0);
    }

    #[test]
    fn rotation_pair_is_identity() {
        let s = sample_with(12, 12, vec![(1.0, 2.0), (7.5, 3.25)]);
        let m = rasterize_density(&s.dots, (12, 12), 1.0).unwrap();
        let (s1, m1) = augment(&s, &m, AugmentOp::Rot90Cw).unwrap();
        let (s2, m2) = augment(&s1, &m1, AugmentOp::Rot90Ccw).unwrap();
        assert_eq!(s2.image, s.image);
        assert_eq!(m2.values(), m.values());
        assert_eq!(s2.dots, s.dots);
    }

    #[test]
    fn rotation_of_non_square_is_rejected() {
        let s = sample_with(8, 12, vec![]);
        let m = DensityMap::zeros(8, 12);
        assert!(augment(&s, &m, AugmentOp::Rot90Cw).is_err());
    }

    #[test]
    fn quad_patch_conserves_count() {
        let s = sample_with(600, 600, vec![(10.0, 10.0), (350.0, 10.0), (299.9, 299.9), (300.0, 300.0)]);
        let patches = quad_patch(&s).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches.iter().map(|p| p.dots.count()).sum::<usize>(), 4);
        assert!(patches.iter().all(|p| p.image.dim() == (300, 300, 1)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tiling_conserves_counts(
            h in 100usize..600,
            w in 100usize..600,
            n_dots in 0usize..30,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dots: Vec<(f64, f64)> = (0..n_dots)
                .map(|_| (rng.gen_range(0.0..w as f64 - 1e-3), rng.gen_range(0.0..h as f64 - 1e-3)))
                .collect();
            let s = ImageSample::new(
                Array3::zeros((h, w, 1)),
                DotAnnotation::new(dots),
                "p".into(),
                Split::Train,
            ).unwrap();
            let tiles = pad_and_tile(&s, 256).unwrap();
            let total: usize = tiles.iter().map(|t| t.dots.count()).sum();
            prop_assert_eq!(total, n_dots);
            for t in &tiles {
                t.dots.validate_bounds(256, 256).unwrap();
            }
        }

        #[test]
        fn augment_conserves_count_and_mass(
            op_idx in 0usize..5,
            n_dots in 0usize..10,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let side = 32usize;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dots: Vec<(f64, f64)> = (0..n_dots)
                .map(|_| (rng.gen_range(0.0..side as f64 - 1e-3), rng.gen_range(0.0..side as f64 - 1e-3)))
                .collect();
            let s = ImageSample::new(
                Array3::zeros((side, side, 1)),
                DotAnnotation::new(dots),
                "a".into(),
                Split::Train,
            ).unwrap();
            let m = rasterize_density(&s.dots, (side, side), 2.0).unwrap();
            let (s2, m2) = augment(&s, &m, AugmentOp::ALL[op_idx]).unwrap();
            prop_assert_eq!(s2.dots.count(), n_dots);
            prop_assert!((m2.total() - m.total()).abs() <= 1e-9);
        }
    }
}
