//! Dense integer flow between two feature tensors.
//!
//! The flow `w` maps cell `p` of `src` to cell `p + w(p)` of `dst` and
//! minimizes
//!
//! ```text
//! E(w) = sum_p min(|src(p) - dst(p + w(p))|_1, t) + eta * (|u(p)| + |v(p)|)
//!      + sum_{p~q} min(alpha * (|u(p) - u(q)| + |v(p) - v(q)|), d)
//! ```
//!
//! over 4-adjacent pairs, with lookups outside `dst` charged `t`. The solver
//! starts from the better of the zero field and a per-cell exhaustive window
//! search, then runs ICM sweeps in row-major order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use crate::convnet::read_u32;

/// Per-cell displacement `(u, v)` in grid cells; `u` along x, `v` along y.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn from_parts(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::shape(format!(
                "flow {height}x{width} needs {} values per component",
                height * width
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::invalid("flow components must be finite"));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|&x| x == 0.0)
    }

    pub fn is_integral(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.fract() == 0.0)
    }

    pub fn negated(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|x| -x).collect(),
            v: self.v.iter().map(|x| -x).collect(),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.u.iter().chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `FFG1`, u32 height, u32 width, then the u plane and the v plane as
    /// row-major little-endian f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"FFG1")?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for x in self.u.iter().chain(&self.v) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FFG1" {
            return Err(Error::format("FFG1 flow", "bad magic"));
        }
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let n = height * width;
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf)?;
        let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (u, v) = vals.split_at(n);
        Self::from_parts(height, width, u.to_vec(), v.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Largest |u| and |v| considered, in cells.
    pub search_radius: usize,
    /// Truncation `t` of the per-cell L1 matching cost.
    pub data_truncation: f64,
    /// Weight `alpha` of the neighbor smoothness term.
    pub smoothness_weight: f64,
    /// Truncation `d` of the smoothness term.
    pub smoothness_truncation: f64,
    /// Weight `eta` of the small-displacement prior.
    pub displacement_penalty: f64,
    pub icm_sweeps: usize,
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            self.data_truncation,
            self.smoothness_weight,
            self.smoothness_truncation,
            self.displacement_penalty,
        ];
        if self.search_radius == 0 || self.icm_sweeps == 0 || reals.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid(format!("invalid flow parameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-layer policy that derives [`FlowParams`] from the source tensor. The
/// cost scales are multiples of `m`, the median nonzero L1 distance between
/// horizontally adjacent cells of `src`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowDefaults {
    pub search_radius: usize,
    #[serde(default = "default_truncation")]
    pub truncation_factor: f64,
    #[serde(default = "default_smoothness")]
    pub smoothness_factor: f64,
    #[serde(default = "default_truncation")]
    pub smoothness_truncation_factor: f64,
    /// `eta` as a fraction of `t`.
    #[serde(default = "default_displacement")]
    pub displacement_fraction: f64,
    #[serde(default = "default_sweeps")]
    pub icm_sweeps: usize,
}

fn default_truncation() -> f64 {
    10.0
}
// Larger weights let the smoothness term outvote exact matches, and pure
// shifts of random tensors are no longer recovered.
fn default_smoothness() -> f64 {
    0.1
}
fn default_displacement() -> f64 {
    0.005
}
fn default_sweeps() -> usize {
    5
}

impl FlowDefaults {
    pub fn with_radius(search_radius: usize) -> Self {
        Self {
            search_radius,
            truncation_factor: default_truncation(),
            smoothness_factor: default_smoothness(),
            smoothness_truncation_factor: default_truncation(),
            displacement_fraction: default_displacement(),
            icm_sweeps: default_sweeps(),
        }
    }

    /// Radii 8, 5, 3 for the three toy-network taps.
    pub fn toy_alex() -> Vec<Self> {
        vec![Self::with_radius(8), Self::with_radius(5), Self::with_radius(3)]
    }

    pub fn resolve(&self, src: &Tensor3<f32>) -> FlowParams {
        let m = median_neighbor_distance(src);
        let t = self.truncation_factor * m;
        FlowParams {
            search_radius: self.search_radius,
            data_truncation: t,
            smoothness_weight: self.smoothness_factor * m,
            smoothness_truncation: self.smoothness_truncation_factor * m,
            displacement_penalty: self.displacement_fraction * t,
            icm_sweeps: self.icm_sweeps,
        }
    }
}

/// Median of the nonzero L1 distances between each cell and its right
/// neighbor (left neighbor in the last column); 1 if all are zero.
pub fn median_neighbor_distance(src: &Tensor3<f32>) -> f64 {
    let (c, h, w) = src.dims();
    if w < 2 {
        return 1.0;
    }
    let mut dists: Vec<f64> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let nx = if x + 1 < w { x + 1 } else { x - 1 };
            let d: f64 = (0..c).map(|ch| f64::from((src.get(ch, y, x) - src.get(ch, y, nx)).abs())).sum();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    dists[dists.len() / 2]
}

/// Cell-major copies of both tensors plus the cost routine shared by the
/// solver and [`flow_energy`].
struct CostModel<'a> {
    channels: usize,
    height: usize,
    width: usize,
    src: Vec<f32>,
    dst: Vec<f32>,
    params: &'a FlowParams,
}

impl<'a> CostModel<'a> {
    fn new(src: &Tensor3<f32>, dst: &Tensor3<f32>, params: &'a FlowParams) -> Result<Self> {
        if src.dims() != dst.dims() {
            return Err(Error::shape(format!("flow inputs differ: {:?} vs {:?}", src.dims(), dst.dims())));
        }
        let (c, h, w) = src.dims();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape("flow inputs must be nonempty"));
        }
        let cell_major = |t: &Tensor3<f32>| {
            let mut out = vec![0.0f32; c * h * w];
            for ch in 0..c {
                for (i, &v) in t.plane(ch).iter().enumerate() {
                    out[i * c + ch] = v;
                }
            }
            out
        };
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            src: cell_major(src),
            dst: cell_major(dst),
            params,
        })
    }

    /// Data term plus displacement prior of cell `(y, x)` under label `(u, v)`.
    #[inline]
    fn unary(&self, y: usize, x: usize, u: i64, v: i64) -> f64 {
        let t = self.params.data_truncation;
        let (qx, qy) = (x as i64 + u, y as i64 + v);
        let data = if qx < 0 || qy < 0 || qx >= self.width as i64 || qy >= self.height as i64 {
            t
        } else {
            let c = self.channels;
            let p = (y * self.width + x) * c;
            let q = (qy as usize * self.width + qx as usize) * c;
            let l1: f64 = self.src[p..p + c]
                .iter()
                .zip(&self.dst[q..q + c])
                .map(|(a, b)| f64::from((a - b).abs()))
                .sum();
            l1.min(t)
        };
        data + self.params.displacement_penalty * (u.abs() + v.abs()) as f64
    }

    #[inline]
    fn pairwise(&self, a: (i64, i64), b: (i64, i64)) -> f64 {
        let diff = ((a.0 - b.0).abs() + (a.1 - b.1).abs()) as f64;
        (self.params.smoothness_weight * diff).min(self.params.smoothness_truncation)
    }

    fn energy(&self, labels: &[(i64, i64)], unary: impl Fn(usize, (i64, i64)) -> f64) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut e = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                e += unary(i, labels[i]);
                if x + 1 < w {
                    e += self.pairwise(labels[i], labels[i + 1]);
                }
                if y + 1 < h {
                    e += self.pairwise(labels[i], labels[i + w]);
                }
            }
        }
        e
    }
}

fn integer_labels(field: &FlowField) -> Result<Vec<(i64, i64)>> {
    if !field.is_integral() {
        return Err(Error::invalid("flow energy is defined for integer-valued fields"));
    }
    Ok(field.u.iter().zip(&field.v).map(|(&u, &v)| (u as i64, v as i64)).collect())
}

/// Exact energy of an integer-valued `field`.
pub fn flow_energy(src: &Tensor3<f32>, dst: &Tensor3<f32>, field: &FlowField, params: &FlowParams) -> Result<f64> {
    params.validate()?;
    let model = CostModel::new(src, dst, params)?;
    if (field.height, field.width) != (model.height, model.width) {
        return Err(Error::shape(format!(
            "field {}x{} does not match features {}x{}",
            field.height, field.width, model.height, model.width
        )));
    }
    let labels = integer_labels(field)?;
    let w = model.width;
    Ok(model.energy(&labels, |i, (u, v)| model.unary(i / w, i % w, u, v)))
}

/// Estimated field plus the energy before the first and after every ICM sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEstimate {
    pub field: FlowField,
    pub sweep_energies: Vec<f64>,
}

pub fn estimate_flow(src: &Tensor3<f32>, dst: &Tensor3<f32>, params: &FlowParams) -> Result<FlowField> {
    Ok(estimate_flow_traced(src, dst, params)?.field)
}

pub fn estimate_flow_traced(src: &Tensor3<f32>, dst: &Tensor3<f32>, params: &FlowParams) -> Result<FlowEstimate> {
    params.validate()?;
    let model = CostModel::new(src, dst, params)?;
    let (h, w) = (model.height, model.width);
    let r = params.search_radius as i64;
    // tie-break order: smaller |u|+|v|, then (v, u)
    let mut labels: Vec<(i64, i64)> = (-r..=r).flat_map(|v| (-r..=r).map(move |u| (u, v))).collect();
    labels.sort_by_key(|&(u, v)| (u.abs() + v.abs(), v, u));
    let nl = labels.len();
    let zero = labels.iter().position(|&l| l == (0, 0)).unwrap();

    let mut table = vec![0.0f64; h * w * nl];
    for y in 0..h {
        for x in 0..w {
            let row = &mut table[(y * w + x) * nl..(y * w + x + 1) * nl];
            for (slot, &(u, v)) in row.iter_mut().zip(&labels) {
                *slot = model.unary(y, x, u, v);
            }
        }
    }
    let unary = |i: usize, l: usize| table[i * nl + l];

    let window: Vec<usize> = (0..h * w)
        .map(|i| {
            let mut best = 0;
            for l in 1..nl {
                if unary(i, l) < unary(i, best) {
                    best = l;
                }
            }
            best
        })
        .collect();
    let zeros = vec![zero; h * w];
    let energy_of = |assign: &[usize]| {
        let coords: Vec<(i64, i64)> = assign.iter().map(|&l| labels[l]).collect();
        model.energy(&coords, |i, c| {
            let l = assign[i];
            debug_assert_eq!(labels[l], c);
            unary(i, l)
        })
    };
    let (e_window, e_zero) = (energy_of(&window), energy_of(&zeros));
    let (mut assign, start) = if e_window < e_zero { (window, e_window) } else { (zeros, e_zero) };

    let mut sweep_energies = vec![start];
    for _ in 0..params.icm_sweeps {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut neighbors = [(0i64, 0i64); 4];
                let mut count = 0;
                for (ok, j) in [(x > 0, i.wrapping_sub(1)), (x + 1 < w, i + 1), (y > 0, i.wrapping_sub(w)), (y + 1 < h, i + w)] {
                    if ok {
                        neighbors[count] = labels[assign[j]];
                        count += 1;
                    }
                }
                let local = |l: usize| {
                    unary(i, l) + neighbors[..count].iter().map(|&q| model.pairwise(labels[l], q)).sum::<f64>()
                };
                let current = local(assign[i]);
                let mut best = (assign[i], current);
                for l in 0..nl {
                    let e = local(l);
                    // strictly better, or equal and earlier in tie-break order
                    if e < best.1 || (e == best.1 && l < best.0) {
                        best = (l, e);
                    }
                }
                if best.0 != assign[i] {
                    assign[i] = best.0;
                    changed = true;
                }
            }
        }
        sweep_energies.push(energy_of(&assign));
        if !changed {
            break;
        }
    }
    let u = assign.iter().map(|&l| labels[l].0 as f32).collect();
    let v = assign.iter().map(|&l| labels[l].1 as f32).collect();
    Ok(FlowEstimate {
        field: FlowField::from_parts(h, w, u, v)?,
        sweep_energies,
    })
}
