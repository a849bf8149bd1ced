//! Localization network: a UNet-style encoder-decoder that reconstructs a
//! full-resolution density map conditioned on the input image and the
//! counter's coarse map, trained with mean square error. Also holds the peak
//! extraction used to recover dots from predicted maps.

use candle_core::Tensor;
use candle_nn::{Conv2d, Module};
use serde::{Deserialize, Serialize};

use crate::data::{DensityMap, DotAnnotation};
use crate::error::{Error, Result};
use crate::interp::upsample_bilinear;
use crate::nn::{rectify, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    /// Image channels; the conditioning map adds one more internally.
    pub image_channels: usize,
    /// Number of downsampling stages.
    pub depth: usize,
    pub base_width: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { image_channels: 3, depth: 4, base_width: 16 }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 || self.image_channels == 0 {
            return Err(Error::Config("localizer depth, base_width and image_channels must be nonzero".into()));
        }
        Ok(())
    }
}

/// Concatenates the image with the mass-preserving x8 upsampled coarse map.
///
/// The coarse map covers 8x8 input pixels per cell, so after bilinear
/// upsampling it is rescaled by 1/64 to keep the channel total equal to the
/// coarse count.
pub fn condition_inputs(image: &Tensor, coarse: &Tensor) -> Result<Tensor> {
    let (n, _c, h, w) = image.dims4()?;
    let (cn, cc, ch, cw) = coarse.dims4()?;
    if cn != n || cc != 1 || ch * 8 != h || cw * 8 != w {
        return Err(Error::Shape(format!(
            "coarse map {:?} does not condition image {:?} (expected (N, 1, H/8, W/8))",
            coarse.dims(),
            image.dims()
        )));
    }
    let up = (upsample_bilinear(coarse, h, w)? / 64.0)?;
    Ok(Tensor::cat(&[image, &up.to_dtype(image.dtype())?], 1)?)
}

struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            a: store.conv2d(&format!("{name}.0"), in_c, out_c, 3, false)?,
            b: store.conv2d(&format!("{name}.1"), out_c, out_c, 3, false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.a.forward(x)?.relu()?;
        Ok(self.b.forward(&x)?.relu()?)
    }
}

pub struct Localizer {
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<DoubleConv>,
    head: Conv2d,
    cfg: LocalizerConfig,
}

impl Localizer {
    pub fn new(cfg: &LocalizerConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let width = |level: usize| cfg.base_width << level;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut in_c = cfg.image_channels + 1;
        for level in 0..cfg.depth {
            encoder.push(DoubleConv::new(store, &format!("localizer.enc.{level}"), in_c, width(level))?);
            in_c = width(level);
        }
        let bottleneck = DoubleConv::new(store, "localizer.bottleneck", in_c, width(cfg.depth))?;
        let mut decoder = Vec::with_capacity(cfg.depth);
        for level in (0..cfg.depth).rev() {
            // upsampled deeper features concatenated with the skip connection
            decoder.push(DoubleConv::new(
                store,
                &format!("localizer.dec.{level}"),
                width(level + 1) + width(level),
                width(level),
            )?);
        }
        let head = store.conv2d("localizer.head", cfg.base_width, 1, 1, false)?;
        Ok(Self { encoder, bottleneck, decoder, head, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.cfg
    }

    /// Dense prediction: `(N, C+1, H, W)` conditioned input to a nonnegative
    /// `(N, 1, H, W)` density map.
    pub fn forward(&self, conditioned: &Tensor) -> Result<Tensor> {
        let (_n, c, h, w) = conditioned.dims4()?;
        let expected_c = self.cfg.image_channels + 1;
        if c != expected_c {
            return Err(Error::Shape(format!("localizer expects {expected_c} channels, got {c}")));
        }
        let factor = 1usize << self.cfg.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "localizer input spatial dims must be divisible by {factor}, got {h}x{w}"
            )));
        }
        let mut x = conditioned.clone();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for enc in &self.encoder {
            x = enc.forward(&x)?;
            skips.push(x.clone());
            x = x.max_pool2d(2)?;
        }
        x = self.bottleneck.forward(&x)?;
        for dec in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let (_, _, sh, sw) = skip.dims4()?;
            x = upsample_bilinear(&x, sh, sw)?;
            x = Tensor::cat(&[&x, &skip], 1)?;
            x = dec.forward(&x)?;
        }
        rectify(&self.head.forward(&x)?)
    }
}

/// Mean of squared per-pixel differences.
pub fn localizer_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok((pred - gt)?.sqr()?.mean_all()?)
}

/// Peak value of a renormalized Gaussian bump away from borders; peak
/// extraction defaults derive from it.
pub fn gaussian_peak_value(sigma: f64) -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// Scale-aware defaults: threshold at 10% of a unit dot's peak, suppression
/// radius of one sigma.
pub fn default_peak_params(sigma: f64) -> (f64, f64) {
    (sigma.max(1.0), 0.1 * gaussian_peak_value(sigma))
}

/// Local maxima above `threshold`, greedily non-maximum suppressed within
/// `min_distance` pixels.
pub fn extract_peaks(map: &DensityMap, min_distance: f64, threshold: f64) -> Result<DotAnnotation> {
    if min_distance < 1.0 {
        return Err(Error::Config(format!("min_distance must be >= 1, got {min_distance}")));
    }
    let values = map.values();
    let (h, w) = map.shape();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = values[[r, c]];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    if values[[nr as usize, nc as usize]] > v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                candidates.push((v, r, c));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut kept: Vec<(f64, f64)> = Vec::new();
    for (_, r, c) in candidates {
        let (x, y) = (c as f64, r as f64);
        if kept.iter().all(|&(kx, ky)| (kx - x).hypot(ky - y) >= min_distance) {
            kept.push((x, y));
        }
    }
    Ok(DotAnnotation::new(kept))
}
