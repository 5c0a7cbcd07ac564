//! Grayscale images, center-anchored affine resampling, and the synthetic
//! shape dataset.
//!
//! All resampling is backward: every output pixel pulls the source at the
//! inverse-mapped location with bilinear interpolation, and anything outside
//! the source canvas reads as background 0. Pixel centers sit on integer
//! coordinates and the transform center is `((w-1)/2, (h-1)/2)`, so quarter
//! turns and integer shifts land exactly on source pixels.

mod dataset;
mod io;

pub use dataset::{object_bbox, make_dataset, DatasetSpec, LabeledImage, ShapeKind, ShapeParams};
pub(crate) use io::encode_png;
pub use io::{read_pgm, write_pgm, write_png};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::bilinear;

pub const MIN_SIDE: usize = 16;

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image {width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn blank(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Resamples through `inverse`, which maps an output pixel to its source location.
    fn resample(&self, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = vec![0.0f32; self.pixels.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = inverse(x as f64, y as f64);
                let v = bilinear(&self.pixels, self.height, self.width, snap(sx), snap(sy));
                out[y * self.width + x] = v.clamp(0.0, 1.0);
            }
        }
        Image {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }
}

/// Rounds coordinates that are integral up to trigonometric noise, so that
/// e.g. a 90 degree turn is an exact pixel permutation.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Rotates the content counterclockwise (as displayed, y pointing down) by
/// `angle` degrees about the image center.
pub fn rotate(image: &Image, angle: f64) -> Result<Image> {
    if !angle.is_finite() {
        return Err(Error::invalid(format!("rotation angle {angle} is not finite")));
    }
    let (s, c) = angle.to_radians().sin_cos();
    let (cx, cy) = image.center();
    Ok(image.resample(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + dx * c - dy * s, cy + dx * s + dy * c)
    }))
}

/// Scales the content about the image center by `factor`, keeping the canvas size.
pub fn scale(image: &Image, factor: f64) -> Result<Image> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("scale factor {factor} must be positive")));
    }
    let (cx, cy) = image.center();
    Ok(image.resample(|x, y| (cx + (x - cx) / factor, cy + (y - cy) / factor)))
}

/// Shifts the content by `(dx, dy)` pixels (positive x right, positive y down).
pub fn translate(image: &Image, dx: f64, dy: f64) -> Result<Image> {
    let limit = image.width.min(image.height) as f64 / 2.0;
    if !(dx.is_finite() && dy.is_finite()) || dx.abs() >= limit || dy.abs() >= limit {
        return Err(Error::invalid(format!(
            "shift ({dx}, {dy}) must stay below {limit} pixels in magnitude"
        )));
    }
    Ok(image.resample(|x, y| (x - dx, y - dy)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Rotation,
    Scale,
    TranslateX,
    TranslateY,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Rotation,
        TransformKind::Scale,
        TransformKind::TranslateX,
        TransformKind::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Rotation => "rotation",
            TransformKind::Scale => "scale",
            TransformKind::TranslateX => "translate_x",
            TransformKind::TranslateY => "translate_y",
        }
    }

    /// Amount at which the transform is the identity.
    pub fn identity_amount(self) -> f64 {
        match self {
            TransformKind::Scale => 1.0,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One transformation: degrees for rotation, a factor for scale, pixels for shifts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub amount: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, amount: f64) -> Self {
        Self { kind, amount }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let a = self.amount;
        let ok = a.is_finite()
            && match self.kind {
                TransformKind::Rotation => a > -360.0 && a < 360.0,
                TransformKind::Scale => a > 0.0,
                TransformKind::TranslateX | TransformKind::TranslateY => {
                    a.abs() < width.min(height) as f64 / 2.0
                }
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{} amount {a} out of range", self.kind)))
        }
    }

    /// Where the transform sends the point `(x, y)` of a `width x height` canvas.
    pub fn map_point(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        match self.kind {
            TransformKind::Rotation => {
                let (s, c) = self.amount.to_radians().sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (cx + dx * c + dy * s, cy - dx * s + dy * c)
            }
            TransformKind::Scale => (cx + (x - cx) * self.amount, cy + (y - cy) * self.amount),
            TransformKind::TranslateX => (x + self.amount, y),
            TransformKind::TranslateY => (x, y + self.amount),
        }
    }
}

impl std::fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}({})", self.kind, self.amount)
    }
}

pub fn apply_transform(image: &Image, t: &TransformSpec) -> Result<Image> {
    match t.kind {
        TransformKind::Rotation => {
            t.validate(image.width, image.height)?;
            rotate(image, t.amount)
        }
        TransformKind::Scale => scale(image, t.amount),
        TransformKind::TranslateX => translate(image, t.amount, 0.0),
        TransformKind::TranslateY => translate(image, 0.0, t.amount),
    }
}

/// Normalizes an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(angle: f64) -> f64 {
    angle.rem_euclid(360.0)
}
