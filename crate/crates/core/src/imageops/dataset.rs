use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{wrap_degrees, Image, TransformKind, TransformSpec, MIN_SIDE};
use crate::error::{Error, Result};
use crate::seeding;

/// Parameters of a synthetic dataset of centered shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_count: usize,
    /// Side of the square canvas in pixels.
    pub image_size: usize,
    /// Allowed fraction of canvas pixels covered by the object's bounding box.
    pub shape_area_fraction_range: (f64, f64),
    /// Initial orientations in degrees.
    pub angle_grid: Vec<f64>,
    /// Rotation amounts added to every initial orientation.
    pub delta_grid: Vec<f64>,
    /// Scale factors the object must survive in frame.
    #[serde(default)]
    pub scale_grid: Vec<f64>,
    /// Shifts in pixels, applied along x and along y, the object must survive in frame.
    #[serde(default)]
    pub translate_grid: Vec<f64>,
    /// Sub-seed for shape parameters; the pipeline derives it from the global seed.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Cross,
    LBlob,
    StripedDisk,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Cross,
        ShapeKind::LBlob,
        ShapeKind::StripedDisk,
    ];

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Membership of the pixel at normalized bounding-box coordinates in `[-1, 1]`.
    fn contains(self, a: f64, b: f64) -> bool {
        match self {
            ShapeKind::Disk | ShapeKind::StripedDisk => a * a + b * b <= 1.0,
            ShapeKind::Square => true,
            ShapeKind::Cross => a.abs() <= 0.3 || b.abs() <= 0.3,
            ShapeKind::LBlob => a <= -0.2 || b >= 0.2,
        }
    }
}

/// Generation parameters of one image, recorded in dataset manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    /// Bounding-box side in pixels (even, centered on the canvas).
    pub side: usize,
    /// Texture bumps as (x, y, sigma, amplitude) in canvas pixels.
    pub bumps: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub params: ShapeParams,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_count == 0 {
            return Err(Error::invalid("dataset needs at least one image"));
        }
        if self.image_size < MIN_SIDE {
            return Err(Error::invalid(format!("image size {} below {MIN_SIDE}", self.image_size)));
        }
        let (lo, hi) = self.shape_area_fraction_range;
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return Err(Error::invalid(format!("area fraction range ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
        }
        for (name, grid, required) in [
            ("angle_grid", &self.angle_grid, true),
            ("delta_grid", &self.delta_grid, true),
            ("scale_grid", &self.scale_grid, false),
            ("translate_grid", &self.translate_grid, false),
        ] {
            if required && grid.is_empty() {
                return Err(Error::invalid(format!("{name} is empty")));
            }
            if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("{name} must be finite and strictly increasing")));
            }
        }
        if self.scale_grid.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("scale_grid entries must be positive"));
        }
        Ok(())
    }

    /// Transformed-pair count per rotation amount: every image at every initial orientation.
    pub fn pairs_per_delta(&self) -> usize {
        self.image_count * self.angle_grid.len()
    }

    /// Every transform under which objects must stay fully inside the canvas.
    pub fn in_frame_transforms(&self) -> Vec<TransformSpec> {
        let mut angles: Vec<f64> = Vec::new();
        for &theta in &self.angle_grid {
            angles.push(wrap_degrees(theta));
            for &delta in &self.delta_grid {
                angles.push(wrap_degrees(theta + delta));
            }
        }
        angles.sort_by(f64::total_cmp);
        angles.dedup();
        let mut out: Vec<TransformSpec> = angles
            .into_iter()
            .map(|a| TransformSpec::new(TransformKind::Rotation, a))
            .collect();
        out.extend(self.scale_grid.iter().map(|&s| TransformSpec::new(TransformKind::Scale, s)));
        for &t in &self.translate_grid {
            out.push(TransformSpec::new(TransformKind::TranslateX, t));
            out.push(TransformSpec::new(TransformKind::TranslateY, t));
        }
        out
    }
}

fn render_mask(kind: ShapeKind, n: usize, side: usize) -> Vec<bool> {
    let origin = (n - side) / 2;
    let mut mask = vec![false; n * n];
    for y in origin..origin + side {
        for x in origin..origin + side {
            let a = (2.0 * (x - origin) as f64 + 1.0) / side as f64 - 1.0;
            let b = (2.0 * (y - origin) as f64 + 1.0) / side as f64 - 1.0;
            mask[y * n + x] = kind.contains(a, b);
        }
    }
    mask
}

/// First transform that pushes part of the mask off the canvas, if any.
fn leaves_frame(mask: &[bool], n: usize, transforms: &[TransformSpec]) -> Option<TransformSpec> {
    let lo = -0.5;
    let hi = n as f64 - 0.5;
    let corners: Vec<(f64, f64)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(i, _)| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            [(x - 0.5, y - 0.5), (x + 0.5, y - 0.5), (x - 0.5, y + 0.5), (x + 0.5, y + 0.5)]
        })
        .collect();
    transforms.iter().copied().find(|t| {
        corners.iter().any(|&(x, y)| {
            let (u, v) = t.map_point(x, y, n, n);
            // tolerance for trig round-off on points exactly at the border
            u < lo - 1e-9 || u > hi + 1e-9 || v < lo - 1e-9 || v > hi + 1e-9
        })
    })
}

/// Even bounding-box sides satisfying both the area range and the in-frame constraint.
fn feasible_sides(spec: &DatasetSpec, kind: ShapeKind, transforms: &[TransformSpec]) -> Result<Vec<usize>> {
    let n = spec.image_size;
    let total = (n * n) as f64;
    let (lo, hi) = spec.shape_area_fraction_range;
    let area_ok: Vec<usize> = (2..=n)
        .step_by(2)
        .filter(|&s| {
            let f = (s * s) as f64 / total;
            f >= lo && f <= hi
        })
        .collect();
    if area_ok.is_empty() {
        return Err(Error::ConstraintViolation {
            transform: "none".into(),
            detail: format!("no even bounding-box side on a {n}px canvas covers a fraction in [{lo}, {hi}]"),
        });
    }
    let mut first_offender = None;
    let sides: Vec<usize> = area_ok
        .iter()
        .copied()
        .filter(|&s| match leaves_frame(&render_mask(kind, n, s), n, transforms) {
            None => true,
            Some(t) => {
                first_offender.get_or_insert(t);
                false
            }
        })
        .collect();
    if sides.is_empty() {
        let t = first_offender.expect("some side was rejected");
        return Err(Error::ConstraintViolation {
            transform: t.to_string(),
            detail: format!("{kind:?} of side {} leaves the {n}px canvas", area_ok[0]),
        });
    }
    Ok(sides)
}

fn render(params: &ShapeParams, n: usize) -> Image {
    let mask = render_mask(params.kind, n, params.side);
    let origin = (n - params.side) / 2;
    let tex: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            params
                .bumps
                .iter()
                .map(|&[bx, by, s, amp]| amp * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp())
                .sum()
        })
        .collect();
    let peak = tex
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| *t)
        .fold(f64::MIN_POSITIVE, f64::max);
    let pixels = (0..n * n)
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let mut v = 0.35 + 0.65 * tex[i] / peak;
            if params.kind == ShapeKind::StripedDisk && ((i % n - origin) / 4) % 2 == 1 {
                v *= 0.45;
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(n, n, pixels).expect("rendered pixels are valid")
}

/// Renders `spec.image_count` labeled images. Image `i` holds shape
/// `ShapeKind::ALL[i % 5]`, so labels are balanced; everything else about the
/// image is drawn from a sub-seed of `(spec.seed, i)`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let n = spec.image_size;
    let transforms = spec.in_frame_transforms();
    let sides = ShapeKind::ALL
        .iter()
        .map(|&k| feasible_sides(spec, k, &transforms))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..spec.image_count)
        .map(|i| {
            let label = i % ShapeKind::ALL.len();
            let kind = ShapeKind::ALL[label];
            let mut rng = seeding::rng(seeding::indexed_seed(spec.seed, i as u64));
            let side = sides[label][rng.gen_range(0..sides[label].len())];
            let origin = ((n - side) / 2) as f64;
            let s = side as f64;
            let bumps = (0..20)
                .map(|_| {
                    [
                        origin + rng.gen_range(0.0..s),
                        origin + rng.gen_range(0.0..s),
                        rng.gen_range(s / 20.0..s / 12.0),
                        rng.gen_range(0.5..1.0),
                    ]
                })
                .collect();
            let params = ShapeParams { kind, side, bumps };
            LabeledImage {
                image: render(&params, n),
                label,
                params,
            }
        })
        .collect())
}

/// Tight bounding box `(x0, y0, x1, y1)` (exclusive ends) of nonzero pixels.
pub fn object_bbox(image: &Image) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (image.width(), image.height());
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if image.get(x, y) > 0.0 {
                bbox = Some(match bbox {
                    None => (x, y, x + 1, y + 1),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                });
            }
        }
    }
    bbox
}
