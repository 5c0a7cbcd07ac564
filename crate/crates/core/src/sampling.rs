use crate::tensor::Real;

/// Bilinear sample of a row-major `height x width` plane at `(x, y)`, with
/// pixel centers on integer coordinates. Taps outside the grid contribute 0,
/// so the result is linear in the plane values.
#[inline]
pub(crate) fn bilinear<F: Real>(plane: &[F], height: usize, width: usize, x: f64, y: f64) -> F {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let tap = |xi: i64, yi: i64| -> F {
        if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
            F::zero()
        } else {
            plane[yi as usize * width + xi as usize]
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return tap(x0, y0);
    }
    let wx1 = F::from_f64_lossy(fx);
    let wy1 = F::from_f64_lossy(fy);
    let wx0 = F::one() - wx1;
    let wy0 = F::one() - wy1;
    let mut acc = wy0 * wx0 * tap(x0, y0);
    if fx != 0.0 {
        acc = acc + wy0 * wx1 * tap(x0 + 1, y0);
    }
    if fy != 0.0 {
        acc = acc + wy1 * wx0 * tap(x0, y0 + 1);
        if fx != 0.0 {
            acc = acc + wy1 * wx1 * tap(x0 + 1, y0 + 1);
        }
    }
    acc
}
