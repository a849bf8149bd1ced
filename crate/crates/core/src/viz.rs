//! Qualitative outputs: a four-panel PNG per image (input, coarse map, fine
//! map, dot overlay with the predicted count) for eyeballing model behavior.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::data::{DensityMap, ImageSample};
use crate::error::{Error, Result};

const GUTTER: u32 = 2;

pub fn format_count(value: f64) -> String {
    format!("{value:.1}")
}

/// Everything one panel row needs; the coarse map is at 1/8 resolution and
/// gets nearest-upsampled for display.
pub struct VisualInputs<'a> {
    pub sample: &'a ImageSample,
    pub coarse: &'a Array2<f64>,
    pub fine: &'a DensityMap,
    pub predicted_count: f64,
}

/// Writes `input | coarse | fine | overlay` side by side as one PNG.
pub fn export_visuals(inputs: &VisualInputs, path: &Path) -> Result<()> {
    let (h, w) = (inputs.sample.height(), inputs.sample.width());
    if inputs.fine.shape() != (h, w) {
        return Err(Error::Shape(format!(
            "fine map {:?} does not match the {h}x{w} image",
            inputs.fine.shape()
        )));
    }
    let (hw, ww) = (h as u32, w as u32);
    let mut canvas = RgbImage::from_pixel(4 * ww + 3 * GUTTER, hw, Rgb([255, 255, 255]));

    blit(&mut canvas, 0, &image_panel(inputs.sample));
    blit(&mut canvas, ww + GUTTER, &heat_panel_scaled(inputs.coarse, h, w));
    blit(&mut canvas, 2 * (ww + GUTTER), &heat_panel_scaled(inputs.fine.values(), h, w));
    let mut overlay = image_panel(inputs.sample);
    for &(x, y) in inputs.sample.dots.points() {
        draw_dot(&mut overlay, x as i64, y as i64);
    }
    draw_text(&mut overlay, 2, 2, &format_count(inputs.predicted_count));
    blit(&mut canvas, 3 * (ww + GUTTER), &overlay);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    canvas.save(path)?;
    Ok(())
}

fn blit(canvas: &mut RgbImage, x_off: u32, panel: &RgbImage) {
    for (x, y, px) in panel.enumerate_pixels() {
        canvas.put_pixel(x + x_off, y, *px);
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_panel(sample: &ImageSample) -> RgbImage {
    let (h, w, c) = sample.image.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for col in 0..w {
            let px = if c >= 3 {
                [
                    to_byte(sample.image[[r, col, 0]]),
                    to_byte(sample.image[[r, col, 1]]),
                    to_byte(sample.image[[r, col, 2]]),
                ]
            } else {
                let v = to_byte(sample.image[[r, col, 0]]);
                [v, v, v]
            };
            out.put_pixel(col as u32, r as u32, Rgb(px));
        }
    }
    out
}

/// Nearest-upsampled heatmap, normalized by the map's own maximum so faint
/// maps stay visible.
fn heat_panel_scaled(values: &Array2<f64>, out_h: usize, out_w: usize) -> RgbImage {
    let (h, w) = values.dim();
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = RgbImage::new(out_w as u32, out_h as u32);
    for r in 0..out_h {
        for c in 0..out_w {
            let sr = (r * h / out_h).min(h.saturating_sub(1));
            let sc = (c * w / out_w).min(w.saturating_sub(1));
            let v = if max > 0.0 { values[[sr, sc]] / max } else { 0.0 };
            out.put_pixel(c as u32, r as u32, Rgb(hot(v)));
        }
    }
    out
}

/// Black -> red -> yellow -> white ramp.
fn hot(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (3.0 * v).min(1.0);
    let g = (3.0 * v - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * v - 2.0).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn draw_dot(img: &mut RgbImage, x: i64, y: i64) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb([255, 0, 0]));
            }
        }
    }
}

/// 3x5 bitmap glyphs for digits and the decimal point, drawn at 2x scale.
fn glyph(ch: char) -> [u8; 5] {
    // each byte holds one 3-pixel row, most significant bit left
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    const SCALE: u32 = 2;
    let mut cursor = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..3u32 {
                if row & (0b100 >> gx) == 0 {
                    continue;
                }
                for sy in 0..SCALE {
                    for sx in 0..SCALE {
                        let (px, py) = (cursor + gx * SCALE + sx, y + gy as u32 * SCALE + sy);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb([0, 255, 0]));
                        }
                    }
                }
            }
        }
        cursor += 4 * SCALE;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DotAnnotation, Split};
    use ndarray::Array3;

    fn sample() -> ImageSample {
        let mut image = Array3::<f32>::zeros((32, 32, 1));
        image[[10, 10, 0]] = 1.0;
        ImageSample::new(image, DotAnnotation::new(vec![(10.0, 10.0)]), "v".into(), Split::Test)
            .unwrap()
    }

    #[test]
    fn format_count_one_decimal() {
        assert_eq!(format_count(173.96), "174.0");
        assert_eq!(format_count(0.0), "0.0");
        assert_eq!(format_count(-1.25), "-1.2");
    }

    #[test]
    fn panel_file_has_expected_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        let s = sample();
        let coarse = Array2::<f64>::zeros((4, 4));
        let fine = crate::data::rasterize_density(&s.dots, (32, 32), 2.0).unwrap();
        export_visuals(
            &VisualInputs { sample: &s, coarse: &coarse, fine: &fine, predicted_count: 1.2 },
            &path,
        )
        .unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.height(), img.width()), (32, 4 * 32 + 3 * GUTTER));
    }

    #[test]
    fn heatmaps_normalize_per_map() {
        // a faint map must still reach full brightness at its own max
        let mut faint = Array2::<f64>::zeros((8, 8));
        faint[[3, 3]] = 1e-6;
        let panel = heat_panel_scaled(&faint, 8, 8);
        assert_eq!(panel.get_pixel(3, 3).0, [255, 255, 255]);
        // and an all-zero map renders black without dividing by zero
        let zero = Array2::<f64>::zeros((8, 8));
        let panel = heat_panel_scaled(&zero, 8, 8);
        assert_eq!(panel.get_pixel(3, 3).0, [0, 0, 0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        let coarse = Array2::<f64>::zeros((4, 4));
        let fine = DensityMap::zeros(16, 16);
        let err = export_visuals(
            &VisualInputs { sample: &s, coarse: &coarse, fine: &fine, predicted_count: 0.0 },
            &dir.path().join("x.png"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
