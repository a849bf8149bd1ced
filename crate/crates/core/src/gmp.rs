//! Global message passing: each position predicts per-head 2D offsets from
//! its own feature vector (linear embeddings, realizable as 1x1 convs), reads
//! features at the displaced positions with bilinear interpolation, and
//! aggregates the samples with a parameter-free mean.
//!
//! With zero-initialized offset weights the module is an exact identity,
//! which is also how it is initialized for training.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::interp::{bilinear_sample, ensure_finite};

/// Per-head linear offset predictors: `w_u`, `w_v` of shape `(K, C)`.
#[derive(Debug, Clone)]
pub struct GmpParams {
    pub w_u: Tensor,
    pub w_v: Tensor,
}

impl GmpParams {
    /// Zero initialization: all offsets vanish and the module is an identity.
    pub fn zeros(heads: usize, channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("gmp needs at least one head".into()));
        }
        Ok(Self {
            w_u: Tensor::zeros((heads, channels), dtype, device)?,
            w_v: Tensor::zeros((heads, channels), dtype, device)?,
        })
    }

    pub fn from_weights(w_u: Tensor, w_v: Tensor) -> Result<Self> {
        if w_u.dims() != w_v.dims() || w_u.rank() != 2 {
            return Err(Error::Shape(format!(
                "offset weights must be two (K, C) tensors, got {:?} and {:?}",
                w_u.dims(),
                w_v.dims()
            )));
        }
        Ok(Self { w_u, w_v })
    }

    pub fn heads(&self) -> usize {
        self.w_u.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.w_u.dims()[1]
    }
}

/// Per-position, per-head displacement vectors in feature-grid pixels.
#[derive(Debug, Clone)]
pub struct OffsetField {
    /// x-displacements, `(N, K, H, W)`.
    pub u: Tensor,
    /// y-displacements, `(N, K, H, W)`.
    pub v: Tensor,
}

/// Clamped absolute sampling coordinates, `(N, K, H, W)` each.
#[derive(Debug, Clone)]
pub struct SampledPositions {
    pub sx: Tensor,
    pub sy: Tensor,
}

/// Predicts the offset field: `u = w_u . x_p`, `v = w_v . x_p` per head.
pub fn predict_offsets(x: &Tensor, params: &GmpParams) -> Result<OffsetField> {
    let (n, channels, h, w) = x.dims4()?;
    if channels != params.channels() {
        return Err(Error::Shape(format!(
            "feature grid has {channels} channels but offset weights expect {}",
            params.channels()
        )));
    }
    let heads = params.heads();
    let x_flat = x.reshape((n, channels, h * w))?;
    let project = |weight: &Tensor| -> Result<Tensor> {
        let out = weight.unsqueeze(0)?.broadcast_matmul(&x_flat)?; // (N, K, HW)
        Ok(out.reshape((n, heads, h, w))?)
    };
    Ok(OffsetField { u: project(&params.w_u)?, v: project(&params.w_v)? })
}

/// `s = p + omega(p)`, clamped into the grid domain `[0, W-1] x [0, H-1]`.
pub fn sample_positions(offsets: &OffsetField) -> Result<SampledPositions> {
    let (_n, _k, h, w) = offsets.u.dims4()?;
    let device = offsets.u.device();
    let dtype = offsets.u.dtype();
    let px: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
    let py: Vec<f64> = (0..h * w).map(|i| (i / w) as f64).collect();
    let px = Tensor::from_vec(px, (1, 1, h, w), device)?.to_dtype(dtype)?;
    let py = Tensor::from_vec(py, (1, 1, h, w), device)?.to_dtype(dtype)?;
    let sx = offsets.u.broadcast_add(&px)?.clamp(0f64, (w - 1) as f64)?;
    let sy = offsets.v.broadcast_add(&py)?.clamp(0f64, (h - 1) as f64)?;
    Ok(SampledPositions { sx, sy })
}

/// Bilinear read of the feature grid at every sampled position.
/// Returns `(N, K, C, H, W)`; differentiable in both the grid and the
/// positions, which is what lets gradients reach `w_u`, `w_v`.
pub fn bilinear_gather(x: &Tensor, positions: &SampledPositions) -> Result<Tensor> {
    let (n, channels, h, w) = x.dims4()?;
    let (pn, heads, ph, pw) = positions.sx.dims4()?;
    if (pn, ph, pw) != (n, h, w) {
        return Err(Error::Shape(format!(
            "positions {:?} do not match feature grid {:?}",
            positions.sx.dims(),
            x.dims()
        )));
    }
    let mut per_batch = Vec::with_capacity(n);
    for i in 0..n {
        let sx = positions.sx.get(i)?.flatten_all()?;
        let sy = positions.sy.get(i)?.flatten_all()?;
        let sampled = bilinear_sample(&x.get(i)?, &sx, &sy)?; // (K*H*W, C)
        let sampled = sampled
            .reshape((heads, h, w, channels))?
            .permute((0, 3, 1, 2))?; // (K, C, H, W)
        per_batch.push(sampled.unsqueeze(0)?);
    }
    Ok(Tensor::cat(&per_batch, 0)?)
}

/// Zero-parameter aggregation: the mean over the K samples at each position.
pub fn aggregate(sampled: &Tensor) -> Result<Tensor> {
    let (_n, heads, _c, _h, _w) = sampled.dims5()?;
    if heads == 0 {
        return Err(Error::Shape("aggregation needs at least one head".into()));
    }
    Ok(sampled.mean(1)?)
}

/// Full module: offset prediction, sampling, bilinear read, mean aggregation.
pub fn gmp_forward(x: &Tensor, params: &GmpParams) -> Result<Tensor> {
    ensure_finite(x, "gmp input")?;
    let offsets = predict_offsets(x, params)?;
    let positions = sample_positions(&offsets)?;
    let sampled = bilinear_gather(x, &positions)?;
    let out = aggregate(&sampled)?;
    ensure_finite(&out, "gmp output")?;
    Ok(out)
}

/// Dense attention aggregation over all positions, used as a comparison
/// oracle and benchmark baseline only: `a_p = (1/C_norm) sum_q w_pq x_q`.
pub fn attention_reference(x: &Tensor, weights: &Tensor, c_norm: f64) -> Result<Tensor> {
    let (n, channels, h, w) = x.dims4()?;
    if !(c_norm > 0.0) {
        return Err(Error::Config(format!("normalization constant must be positive, got {c_norm}")));
    }
    let hw = h * w;
    if weights.dims() != [hw, hw] {
        return Err(Error::Shape(format!(
            "pairwise weights must be ({hw}, {hw}), got {:?}",
            weights.dims()
        )));
    }
    let x_flat = x.reshape((n, channels, hw))?.transpose(1, 2)?; // (N, HW, C)
    let out = weights.unsqueeze(0)?.broadcast_matmul(&x_flat)?; // (N, HW, C)
    let out = (out / c_norm)?;
    Ok(out.transpose(1, 2)?.reshape((n, channels, h, w))?)
}
