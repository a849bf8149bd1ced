//! Counting network: truncated VGG-19-style backbone (stride 16), x2
//! bilinear upsample, global message passing, then a 1x1 head producing a
//! single-channel coarse density map whose l1 norm is the count estimate.

use std::path::PathBuf;

use candle_core::Tensor;
use candle_nn::{Conv2d, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmp::{gmp_forward, GmpParams};
use crate::interp::upsample_bilinear;
use crate::nn::{rectify, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Vgg19Truncated,
    /// Four conv blocks with the same total stride (16) as the truncated
    /// VGG-19, for desk-scale runs; all spatial contracts are identical.
    TinyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterConfig {
    pub backbone: BackboneKind,
    pub input_channels: usize,
    /// Bypass the message passing module entirely (ablation switch).
    pub gmp_enabled: bool,
    pub gmp_heads: usize,
    /// Rectify the head so the coarse map is a bona fide density and the
    /// l1 norm reduces to a plain sum.
    pub head_nonneg: bool,
    /// Optional safetensors file with backbone weights to warm-start from.
    pub pretrained_path: Option<PathBuf>,
}

impl Default for CounterConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Vgg19Truncated,
            input_channels: 3,
            gmp_enabled: true,
            gmp_heads: 8,
            head_nonneg: true,
            pretrained_path: None,
        }
    }
}

impl CounterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gmp_heads == 0 {
            return Err(Error::Config("gmp_heads must be at least 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        Ok(())
    }
}

/// (out_channels, pool after this conv)
fn backbone_plan(kind: BackboneKind) -> Vec<(usize, bool)> {
    match kind {
        // VGG-19 conv stack with the final pool and classifier removed:
        // four retained pools give a total stride of 16.
        BackboneKind::Vgg19Truncated => vec![
            (64, false), (64, true),
            (128, false), (128, true),
            (256, false), (256, false), (256, false), (256, true),
            (512, false), (512, false), (512, false), (512, true),
            (512, false), (512, false), (512, false), (512, false),
        ],
        BackboneKind::TinyCnn => vec![(8, true), (16, true), (32, true), (32, true)],
    }
}

/// The coarse map `z` at 1/8 input resolution plus its per-sample l1 norms.
#[derive(Debug, Clone)]
pub struct CoarseMap {
    /// `(N, 1, H/8, W/8)`
    pub values: Tensor,
    /// `(N,)` — the count estimates `||z||_1`.
    pub counts: Tensor,
}

impl CoarseMap {
    pub fn count_values(&self) -> Result<Vec<f64>> {
        Ok(self.counts.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
    }
}

pub struct Counter {
    convs: Vec<(Conv2d, bool)>,
    gmp: GmpParams,
    head: Conv2d,
    cfg: CounterConfig,
}

impl Counter {
    pub fn new(cfg: &CounterConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let plan = backbone_plan(cfg.backbone);
        let mut convs = Vec::with_capacity(plan.len());
        let mut in_channels = cfg.input_channels;
        for (i, &(out_channels, pool)) in plan.iter().enumerate() {
            let conv = store.conv2d(&format!("counter.backbone.{i}"), in_channels, out_channels, 3, false)?;
            convs.push((conv, pool));
            in_channels = out_channels;
        }
        // Zero-initialized offsets make the module an identity at step 0.
        let w_u = store.var("counter.gmp.w_u", &[cfg.gmp_heads, in_channels], crate::nn::Init::Zeros)?;
        let w_v = store.var("counter.gmp.w_v", &[cfg.gmp_heads, in_channels], crate::nn::Init::Zeros)?;
        let gmp = GmpParams::from_weights(w_u.as_tensor().clone(), w_v.as_tensor().clone())?;
        // Zero-initialized head: an all-zero image maps to count 0.
        let head = store.conv2d("counter.head", in_channels, 1, 1, true)?;
        Ok(Self { convs, gmp, head, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &CounterConfig {
        &self.cfg
    }

    pub fn gmp_params(&self) -> &GmpParams {
        &self.gmp
    }

    /// Runs the counter on a `(N, C, H, W)` batch; H and W must be divisible
    /// by 16.
    pub fn forward(&self, images: &Tensor) -> Result<CoarseMap> {
        let (_n, c, h, w) = images.dims4()?;
        if c != self.cfg.input_channels {
            return Err(Error::Shape(format!(
                "counter expects {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "counter input spatial dims must be divisible by 16, got {h}x{w}"
            )));
        }
        let mut x = images.clone();
        for (conv, pool) in &self.convs {
            x = conv.forward(&x)?.relu()?;
            if *pool {
                x = x.max_pool2d(2)?;
            }
        }
        let x = upsample_bilinear(&x, h / 8, w / 8)?;
        let x = if self.cfg.gmp_enabled { gmp_forward(&x, &self.gmp)? } else { x };
        let z = self.head.forward(&x)?;
        let z = if self.cfg.head_nonneg { rectify(&z)? } else { z };
        let l1 = if self.cfg.head_nonneg { z.clone() } else { z.abs()? };
        let counts = l1.sum((1, 2, 3))?;
        Ok(CoarseMap { values: z, counts })
    }
}

/// `L = |  ||z||_1 - y |`, averaged over the batch. The subgradient at the
/// kink is 0.
pub fn count_loss(coarse: &CoarseMap, labels: &Tensor) -> Result<Tensor> {
    let labels = labels.to_dtype(coarse.counts.dtype())?;
    let values = labels.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Label(format!("count labels must be nonnegative, got {bad}")));
    }
    Ok((&coarse.counts - &labels)?.abs()?.mean_all()?)
}
