//! Applying flow fields to feature tensors.
//!
//! Warping is backward sampling: `out(c, p) = in(c, p - w(p))`, bilinear,
//! with zeros outside the grid. A field therefore moves content along
//! `+w`, the direction an estimated flow points from source to target.

use crate::error::{Error, Result};
use crate::featflow::FlowField;
use crate::sampling::bilinear;
use crate::tensor::{Real, Tensor3};

fn check_dims<F: Real>(t: &Tensor3<F>, field: &FlowField) -> Result<()> {
    if (t.height(), t.width()) != (field.height(), field.width()) {
        return Err(Error::shape(format!(
            "field {}x{} does not match tensor {}x{}",
            field.height(),
            field.width(),
            t.height(),
            t.width()
        )));
    }
    Ok(())
}

fn sample_by<F: Real>(t: &Tensor3<F>, field: &FlowField, sign: f64) -> Tensor3<F> {
    let (c, h, w) = t.dims();
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        let src = t.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = field.at(y, x);
                let sx = x as f64 - sign * f64::from(u);
                let sy = y as f64 - sign * f64::from(v);
                dst[y * w + x] = bilinear(src, h, w, sx, sy);
            }
        }
    }
    out
}

/// Move the contents of `t` along `field`.
pub fn apply_flow<F: Real>(t: &Tensor3<F>, field: &FlowField) -> Result<Tensor3<F>> {
    check_dims(t, field)?;
    if field.is_zero() {
        return Ok(t.clone());
    }
    Ok(sample_by(t, field, 1.0))
}

/// Gradient routing for a warped activation: the upstream gradient is warped
/// by the negated field. This is the exact adjoint of [`apply_flow`] for
/// spatially constant fields and an approximation otherwise.
pub fn warp_gradient<F: Real>(grad: &Tensor3<F>, field: &FlowField) -> Result<Tensor3<F>> {
    check_dims(grad, field)?;
    if field.is_zero() {
        return Ok(grad.clone());
    }
    Ok(sample_by(grad, field, -1.0))
}

/// Approximate additive inverse: componentwise negation. Exact where the
/// field is locally constant.
pub fn invert_flow(field: &FlowField) -> FlowField {
    field.negated()
}

/// Where a warped tensor came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub layer: String,
    pub generator: String,
    pub delta: f64,
}

/// A feature tensor after [`apply_flow`], tagged with its source.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedFeatures {
    pub tensor: Tensor3<f32>,
    pub provenance: Provenance,
}

impl WarpedFeatures {
    pub fn apply(features: &Tensor3<f32>, field: &FlowField, provenance: Provenance) -> Result<Self> {
        Ok(Self {
            tensor: apply_flow(features, field)?,
            provenance,
        })
    }
}

/// Error of warping by a field and back by its negation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundTrip {
    pub rms: f64,
    /// Mean absolute difference.
    pub mad: f64,
    /// Cells the metrics were taken over.
    pub cells: usize,
}

fn roundtrip_metrics(t: &Tensor3<f32>, field: &FlowField, keep: impl Fn(usize, usize) -> bool) -> Result<RoundTrip> {
    check_dims(t, field)?;
    let back = apply_flow(&apply_flow(t, field)?, &invert_flow(field))?;
    let (c, h, w) = t.dims();
    let (mut sq, mut abs, mut cells) = (0.0f64, 0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !keep(y, x) {
                continue;
            }
            cells += 1;
            for ch in 0..c {
                let d = f64::from(back.get(ch, y, x)) - f64::from(t.get(ch, y, x));
                sq += d * d;
                abs += d.abs();
            }
        }
    }
    if cells == 0 {
        return Err(Error::invalid("round trip leaves no cell to measure"));
    }
    let n = (cells * c) as f64;
    Ok(RoundTrip {
        rms: (sq / n).sqrt(),
        mad: abs / n,
        cells,
    })
}

/// RMS and mean absolute difference between `t` and the round trip
/// `apply(apply(t, field), invert(field))`, over all channels and cells.
pub fn roundtrip_error(t: &Tensor3<f32>, field: &FlowField) -> Result<RoundTrip> {
    roundtrip_metrics(t, field, |_, _| true)
}

/// As [`roundtrip_error`], restricted to cells whose round trip never
/// samples outside the grid, so zero fill plays no part.
pub fn roundtrip_error_interior(t: &Tensor3<f32>, field: &FlowField) -> Result<RoundTrip> {
    let (h, w) = (field.height(), field.width());
    let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
    roundtrip_metrics(t, field, |y, x| {
        // the inverse pulls from q + w(q); each tap there pulls from n - w(n)
        let (u, v) = field.at(y, x);
        let (sx, sy) = (x as f64 + f64::from(u), y as f64 + f64::from(v));
        if !inside(sx, sy) {
            return false;
        }
        [(sx.floor(), sy.floor()), (sx.ceil(), sy.floor()), (sx.floor(), sy.ceil()), (sx.ceil(), sy.ceil())]
            .iter()
            .all(|&(tx, ty)| {
                let (u, v) = field.at(ty as usize, tx as usize);
                inside(tx - f64::from(u), ty - f64::from(v))
            })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3<f64> {
        let mut rng = seeding::rng(seed);
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor3<f64>, b: &Tensor3<f64>) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_field_is_identity() {
        let t = random_tensor(3, 7, 9, 1).cast::<f32>();
        let f = FlowField::zeros(7, 9);
        assert_eq!(apply_flow(&t, &f).unwrap(), t);
        assert_eq!(warp_gradient(&t, &f).unwrap(), t);
    }

    #[test]
    fn integer_field_moves_content() {
        let t = random_tensor(2, 6, 8, 2);
        let out = apply_flow(&t, &FlowField::constant(6, 8, 2.0, -1.0)).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let expected = if x >= 2 && y + 1 < 6 { t.get(1, y + 1, x - 2) } else { 0.0 };
                assert_eq!(out.get(1, y, x), expected);
            }
        }
    }

    #[test]
    fn negation_is_adjoint_for_constant_fields() {
        for (i, &(u, v)) in [(0.6f32, -1.3f32), (2.0, 0.0), (-0.25, 0.75)].iter().enumerate() {
            let x = random_tensor(3, 8, 8, 10 + i as u64);
            let g = random_tensor(3, 8, 8, 20 + i as u64);
            let f = FlowField::constant(8, 8, u, v);
            let lhs = dot(&apply_flow(&x, &f).unwrap(), &g);
            let rhs = dot(&x, &warp_gradient(&g, &f).unwrap());
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn inversion_is_an_involution() {
        let f = FlowField::from_parts(2, 2, vec![0.5, -1.25, 0.0, 3.0], vec![1.0, 0.0, -0.75, 2.5]).unwrap();
        assert_eq!(invert_flow(&invert_flow(&f)), f);
        assert_eq!(invert_flow(&FlowField::zeros(3, 3)), FlowField::zeros(3, 3));
        assert_eq!(invert_flow(&FlowField::constant(2, 3, 1.5, -2.0)), FlowField::constant(2, 3, -1.5, 2.0));
    }

    #[test]
    fn zero_field_round_trip_is_exact() {
        let t = random_tensor(3, 9, 9, 5).cast::<f32>();
        let rt = roundtrip_error(&t, &FlowField::zeros(9, 9)).unwrap();
        assert_eq!((rt.rms, rt.mad, rt.cells), (0.0, 0.0, 81));
    }

    #[test]
    fn integer_round_trip_is_exact_inside() {
        let t = random_tensor(4, 12, 12, 3).cast::<f32>();
        let f = FlowField::constant(12, 12, 3.0, -2.0);
        let rt = roundtrip_error_interior(&t, &f).unwrap();
        assert_eq!(rt.rms, 0.0);
        assert_eq!(rt.cells, 9 * 10);
        // zero fill at the border shows up over the full grid
        assert!(roundtrip_error(&t, &f).unwrap().rms > 0.0);
    }

    #[test]
    fn smooth_field_round_trip_is_small() {
        let (h, w) = (24, 24);
        // smooth content so bilinear resampling loses little
        let mut t = Tensor3::zeros(2, h, w);
        for y in 0..h {
            for x in 0..w {
                t.set(0, y, x, ((x as f32) * 0.3).sin());
                t.set(1, y, x, ((y as f32) * 0.2).cos());
            }
        }
        let u: Vec<f32> = (0..h * w).map(|i| 1.0 + 0.5 * ((i / w) as f32 / h as f32)).collect();
        let v: Vec<f32> = (0..h * w).map(|i| -0.5 * ((i % w) as f32 / w as f32)).collect();
        let f = FlowField::from_parts(h, w, u, v).unwrap();
        let rt = roundtrip_error_interior(&t, &f).unwrap();
        assert!(rt.rms < 0.05, "{rt:?}");
        assert!(rt.mad <= rt.rms);
        assert!(rt.cells > 300);
    }

    proptest::proptest! {
        #[test]
        fn warping_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, u in -3.0f32..3.0, v in -3.0f32..3.0) {
            let x = random_tensor(2, 6, 7, seed);
            let y = random_tensor(2, 6, 7, seed + 1);
            let mut rng = seeding::rng(seed + 2);
            let us = (0..42).map(|_| u + rng.gen_range(-1.0f32..1.0)).collect();
            let vs = (0..42).map(|_| v + rng.gen_range(-1.0f32..1.0)).collect();
            let f = FlowField::from_parts(6, 7, us, vs).unwrap();
            let combo = Tensor3::from_vec(2, 6, 7, x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = apply_flow(&combo, &f).unwrap();
            let (wx, wy) = (apply_flow(&x, &f).unwrap(), apply_flow(&y, &f).unwrap());
            for ((l, p), q) in lhs.as_slice().iter().zip(wx.as_slice()).zip(wy.as_slice()) {
                proptest::prop_assert!((l - (a * p + b * q)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = random_tensor(1, 4, 5, 4);
        assert!(matches!(apply_flow(&t, &FlowField::zeros(5, 4)), Err(Error::Shape(_))));
        assert!(matches!(warp_gradient(&t, &FlowField::zeros(4, 4)), Err(Error::Shape(_))));
    }
}
