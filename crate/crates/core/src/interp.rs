//! Differentiable bilinear interpolation, shared by the message passing
//! module (sub-pixel feature reads) and the fixed upsampling stages.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Reads bilinear samples from a `(C, H, W)` grid at continuous positions.
///
/// `sx`/`sy` are 1-D tensors of x (column) and y (row) coordinates, expected
/// in `[0, W-1]` / `[0, H-1]`. The result is `(len, C)`. Gradients flow both
/// to the grid values and to the positions (through the fractional weights);
/// the corner indices themselves are piecewise constant.
pub fn bilinear_sample(x: &Tensor, sx: &Tensor, sy: &Tensor) -> Result<Tensor> {
    let (channels, h, w) = x.dims3()?;
    let flat = x.reshape((channels, h * w))?.t()?.contiguous()?; // (HW, C)

    let x0 = sx.detach().floor()?.clamp(0f64, (w - 1) as f64)?;
    let y0 = sy.detach().floor()?.clamp(0f64, (h - 1) as f64)?;
    let x1 = (&x0 + 1.0)?.clamp(0f64, (w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0f64, (h - 1) as f64)?;
    let fx = (sx - &x0)?;
    let fy = (sy - &y0)?;

    let corner = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * w as f64)? + xx)?.to_dtype(DType::U32)?;
        Ok(flat.index_select(&idx, 0)?)
    };
    let v00 = corner(&y0, &x0)?;
    let v01 = corner(&y0, &x1)?;
    let v10 = corner(&y1, &x0)?;
    let v11 = corner(&y1, &x1)?;

    let one = Tensor::ones_like(&fx)?;
    let gx = (&one - &fx)?;
    let gy = (&one - &fy)?;
    let weight = |a: &Tensor, b: &Tensor| -> Result<Tensor> { Ok((a * b)?.unsqueeze(1)?) };

    let out = (weight(&gx, &gy)?.broadcast_mul(&v00)?
        + weight(&fx, &gy)?.broadcast_mul(&v01)?)?;
    let out = (out + weight(&gx, &fy)?.broadcast_mul(&v10)?)?;
    let out = (out + weight(&fx, &fy)?.broadcast_mul(&v11)?)?;
    Ok(out)
}

/// Bilinear upsampling of a `(N, C, H, W)` tensor to `(out_h, out_w)`,
/// sampling at pixel centers with border clamping (align_corners = false).
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, _c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("upsample target must be nonzero".into()));
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut xs = Vec::with_capacity(out_h * out_w);
    let mut ys = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for c in 0..out_w {
            let x_pos = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            ys.push(y);
            xs.push(x_pos);
        }
    }
    let device = x.device();
    let xs = Tensor::from_vec(xs, out_h * out_w, device)?.to_dtype(x.dtype())?;
    let ys = Tensor::from_vec(ys, out_h * out_w, device)?.to_dtype(x.dtype())?;

    let mut per_batch = Vec::with_capacity(n);
    for i in 0..n {
        let sample = bilinear_sample(&x.get(i)?, &xs, &ys)?; // (out_h*out_w, C)
        per_batch.push(sample.t()?.reshape((1, (), out_h, out_w))?);
    }
    Ok(Tensor::cat(&per_batch, 0)?)
}

/// Errors out if the tensor contains NaN or infinite entries.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let sum = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if !sum.is_finite() {
        return Err(Error::Input(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn grid_2x2() -> Tensor {
        // single channel, values [[0,0],[0,4]]
        Tensor::from_vec(vec![0f64, 0.0, 0.0, 4.0], (1, 2, 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn integer_positions_return_grid_values() {
        let x = Tensor::from_vec((0..12).map(|v| v as f64).collect::<Vec<_>>(), (2, 2, 3), &Device::Cpu).unwrap();
        let sx = Tensor::from_vec(vec![0f64, 2.0, 1.0], 3, &Device::Cpu).unwrap();
        let sy = Tensor::from_vec(vec![0f64, 1.0, 0.0], 3, &Device::Cpu).unwrap();
        let out = bilinear_sample(&x, &sx, &sy).unwrap().to_vec2::<f64>().unwrap();
        // channel 0 is 0..6 row-major over (2,3); channel 1 is 6..12
        assert_eq!(out[0], vec![0.0, 6.0]);
        assert_eq!(out[1], vec![5.0, 11.0]);
        assert_eq!(out[2], vec![1.0, 7.0]);
    }

    #[test]
    fn center_of_four_equal_vectors_is_that_vector() {
        let x = Tensor::full(2.5f64, (3, 2, 2), &Device::Cpu).unwrap();
        let sx = Tensor::from_vec(vec![0.5f64], 1, &Device::Cpu).unwrap();
        let sy = Tensor::from_vec(vec![0.5f64], 1, &Device::Cpu).unwrap();
        let out = bilinear_sample(&x, &sx, &sy).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out[0], vec![2.5, 2.5, 2.5]);
    }

    #[test]
    fn four_term_formula_oracle() {
        // explicit bilinear formula at (0.5, 0.5) on [[0,0],[0,4]] gives 1.0
        let out = bilinear_sample(
            &grid_2x2(),
            &Tensor::from_vec(vec![0.5f64], 1, &Device::Cpu).unwrap(),
            &Tensor::from_vec(vec![0.5f64], 1, &Device::Cpu).unwrap(),
        )
        .unwrap();
        assert_eq!(out.to_vec2::<f64>().unwrap()[0][0], 1.0);
    }

    #[test]
    fn upsample_preserves_constant_fields() {
        let x = Tensor::full(3f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let up = upsample_bilinear(&x, 8, 8).unwrap();
        assert_eq!(up.dims(), &[1, 2, 8, 8]);
        let max = up.flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        let min = up.flatten_all().unwrap().min(0).unwrap().to_scalar::<f64>().unwrap();
        assert!((max - 3.0).abs() < 1e-12 && (min - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ensure_finite_detects_nan() {
        let x = Tensor::from_vec(vec![1f64, f64::NAN], 2, &Device::Cpu).unwrap();
        assert!(ensure_finite(&x, "test").is_err());
        let y = Tensor::from_vec(vec![1f64, 2.0], 2, &Device::Cpu).unwrap();
        assert!(ensure_finite(&y, "test").is_ok());
    }
}
