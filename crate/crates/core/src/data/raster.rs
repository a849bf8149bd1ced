use ndarray::Array2;

use super::{DensityMap, DotAnnotation};
use crate::error::{Error, Result};

/// Renders dot annotations as a sum of Gaussian bumps.
///
/// Each dot's kernel is evaluated on a window of +-4 sigma, truncated to the
/// image bounds, and renormalized so every dot contributes exactly unit mass.
/// The map total therefore equals the dot count up to float error.
pub fn rasterize_density(dots: &DotAnnotation, shape: (usize, usize), sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (height, width) = shape;
    dots.validate_bounds(height, width)?;

    let mut values = Array2::<f64>::zeros((height, width));
    let radius = (4.0 * sigma).ceil() as i64;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    for &(x, y) in dots.points() {
        let r0 = ((y.floor() as i64) - radius).max(0) as usize;
        let r1 = ((y.ceil() as i64) + radius).min(height as i64 - 1) as usize;
        let c0 = ((x.floor() as i64) - radius).max(0) as usize;
        let c1 = ((x.ceil() as i64) + radius).min(width as i64 - 1) as usize;

        let mut mass = 0.0;
        for r in r0..=r1 {
            let dy = r as f64 - y;
            for c in c0..=c1 {
                let dx = c as f64 - x;
                mass += (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
            }
        }
        // A dot inside the bounds always covers at least one pixel.
        debug_assert!(mass > 0.0);
        let inv_mass = 1.0 / mass;
        for r in r0..=r1 {
            let dy = r as f64 - y;
            for c in c0..=c1 {
                let dx = c as f64 - x;
                values[[r, c]] += (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp() * inv_mass;
            }
        }
    }
    Ok(DensityMap::from_parts_unchecked(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: evaluate each renormalized kernel over the whole
    /// image with a naive double loop, no windowing.
    fn brute_force_total(dots: &[(f64, f64)], shape: (usize, usize), sigma: f64) -> f64 {
        let (h, w) = shape;
        let mut total = 0.0;
        for &(x, y) in dots {
            let mut mass = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let (dx, dy) = (c as f64 - x, r as f64 - y);
                    mass += (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
            }
            total += if mass > 0.0 { 1.0 } else { 0.0 };
        }
        total
    }

    #[test]
    fn empty_dots_give_zero_map() {
        let m = rasterize_density(&DotAnnotation::default(), (64, 64), 3.0).unwrap();
        assert_eq!(m.total(), 0.0);
        assert!(m.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn centered_dot_has_unit_mass() {
        let dots = DotAnnotation::new(vec![(32.0, 32.0)]);
        let m = rasterize_density(&dots, (64, 64), 3.0).unwrap();
        assert!((m.total() - 1.0).abs() <= 1e-6, "total = {}", m.total());
    }

    #[test]
    fn border_dots_keep_unit_mass() {
        let pts = vec![(1.0, 1.0), (40.0, 12.5), (20.25, 55.75)];
        let dots = DotAnnotation::new(pts.clone());
        let m = rasterize_density(&dots, (64, 64), 3.0).unwrap();
        let expected = brute_force_total(&pts, (64, 64), 3.0);
        assert_eq!(expected, 3.0);
        assert!((m.total() - 3.0).abs() <= 1e-4, "total = {}", m.total());
    }

    #[test]
    fn out_of_bounds_dot_is_reported() {
        let dots = DotAnnotation::new(vec![(5.0, 5.0), (70.0, 3.0)]);
        let err = rasterize_density(&dots, (64, 64), 3.0).unwrap_err();
        match err {
            crate::error::Error::Annotation { x, .. } => assert_eq!(x, 70.0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        assert!(rasterize_density(&DotAnnotation::default(), (8, 8), 0.0).is_err());
    }

    #[test]
    fn map_is_nonnegative() {
        let dots = DotAnnotation::new(vec![(0.0, 0.0), (7.9, 7.9)]);
        let m = rasterize_density(&dots, (8, 8), 2.0).unwrap();
        assert!(m.values().iter().all(|v| *v >= 0.0));
    }
}
