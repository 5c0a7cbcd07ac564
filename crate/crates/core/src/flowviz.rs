//! PNG renderings of flow fields and feature tensors for reports.

use image::ExtendedColorType;

use crate::error::{Error, Result};
use crate::featflow::FlowField;
use crate::imageops::encode_png;
use crate::tensor::Tensor3;

/// HSV with full value to RGB; `h` in turns.
fn hue_rgb(h: f64, s: f64) -> [u8; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = 1.0 - c;
    [r, g, b].map(|v| ((v + m) * 255.0).round() as u8)
}

/// Color-wheel rendering: hue is direction, saturation is magnitude relative
/// to `max_magnitude` (the field's own maximum if `None`). Each cell becomes
/// a `cell_px` square.
pub fn flow_color_png(field: &FlowField, max_magnitude: Option<f32>, cell_px: usize) -> Result<Vec<u8>> {
    if cell_px == 0 {
        return Err(Error::invalid("cell size must be positive"));
    }
    let (h, w) = (field.height(), field.width());
    let mags: Vec<f64> = field.u().iter().zip(field.v()).map(|(&u, &v)| f64::from(u).hypot(f64::from(v))).collect();
    let max = max_magnitude.map(f64::from).unwrap_or_else(|| mags.iter().copied().fold(0.0, f64::max));
    let (pw, ph) = (w * cell_px, h * cell_px);
    let mut buf = vec![255u8; pw * ph * 3];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = field.at(y, x);
            let s = if max > 0.0 { (mags[y * w + x] / max).min(1.0) } else { 0.0 };
            let rgb = hue_rgb(f64::from(v).atan2(f64::from(u)) / std::f64::consts::TAU, s);
            for dy in 0..cell_px {
                for dx in 0..cell_px {
                    let i = ((y * cell_px + dy) * pw + x * cell_px + dx) * 3;
                    buf[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    encode_png(&buf, pw, ph, ExtendedColorType::Rgb8)
}

/// All channels of `t` tiled in a near-square grid, one pixel per cell,
/// gray levels scaled by the largest absolute value (mid-gray is zero).
pub fn channel_grid_png(t: &Tensor3<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims();
    if t.is_empty() {
        return Err(Error::shape("cannot render an empty tensor"));
    }
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (pw, ph) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let max = t.as_slice().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut buf = vec![0u8; pw * ph];
    for ch in 0..c {
        let (ox, oy) = ((ch % cols) * (w + 1), (ch / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                let v = if max > 0.0 { t.get(ch, y, x) / max } else { 0.0 };
                buf[(oy + y) * pw + ox + x] = ((v * 0.5 + 0.5) * 255.0).round() as u8;
            }
        }
    }
    encode_png(&buf, pw, ph, ExtendedColorType::L8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(bytes: &[u8]) -> image::DynamicImage {
        image::load_from_memory_with_format(bytes, image::ImageFormat::Png).unwrap()
    }

    #[test]
    fn flow_png_has_expected_size_and_colors() {
        let f = FlowField::from_parts(1, 3, vec![1.0, 0.0, -1.0], vec![0.0, 0.0, 0.0]).unwrap();
        let img = decode(&flow_color_png(&f, None, 4).unwrap()).into_rgb8();
        assert_eq!(img.dimensions(), (12, 4));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(5, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(9, 0).0, [0, 255, 255]);
        assert!(flow_color_png(&f, None, 0).is_err());
    }

    #[test]
    fn channel_grid_layout() {
        let mut t = Tensor3::zeros(5, 2, 3);
        t.set(4, 1, 2, -2.0);
        t.set(0, 0, 0, 2.0);
        let img = decode(&channel_grid_png(&t).unwrap()).into_luma8();
        // 3 columns x 2 rows of 3x2 tiles with 1-pixel gaps
        assert_eq!(img.dimensions(), (11, 5));
        assert_eq!(img.get_pixel(0, 0).0, [255]);
        assert_eq!(img.get_pixel(4 + 2, 3 + 1).0, [0]);
        assert_eq!(img.get_pixel(1, 0).0, [128]);
    }
}
