use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{stack_dimension, FlowStack};
use crate::error::{Error, Result};

/// Mean flow plus the top principal directions of a set of flow stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBasis {
    pub layer_dims: Vec<(usize, usize)>,
    pub mean: Vec<f32>,
    /// Orthonormal, in order of decreasing eigenvalue.
    pub components: Vec<Vec<f32>>,
    /// Variance along each component, `sigma^2 / (N - 1)`.
    pub eigenvalues: Vec<f32>,
}

impl FlowBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// The mean followed by every component: the design-matrix blocks.
    pub fn blocks(&self) -> impl Iterator<Item = &[f32]> {
        std::iter::once(self.mean.as_slice()).chain(self.components.iter().map(Vec::as_slice))
    }

    pub fn validate(&self) -> Result<()> {
        let d = stack_dimension(&self.layer_dims);
        if self.mean.len() != d || self.components.iter().any(|c| c.len() != d) {
            return Err(Error::shape(format!("basis vectors must have dimension {d}")));
        }
        if self.eigenvalues.len() != self.components.len() {
            return Err(Error::shape("one eigenvalue per component"));
        }
        if self.blocks().flatten().chain(&self.eigenvalues).any(|x| !x.is_finite()) {
            return Err(Error::invalid("basis values must be finite"));
        }
        Ok(())
    }

    /// Coefficients of `x - mean` on the first `k` components.
    pub fn project(&self, x: &[f32], k: usize) -> Vec<f64> {
        self.components[..k]
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(&u, (&a, &m))| f64::from(u) * (f64::from(a) - f64::from(m))).sum())
            .collect()
    }
}

/// How the principal directions are computed. Both give the same basis up to
/// rounding; `Auto` picks the smaller eigenproblem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaRoute {
    #[default]
    Auto,
    /// Eigendecomposition of the D x D scatter matrix.
    Covariance,
    /// Eigendecomposition of the N x N row Gram matrix, mapped back to D.
    Gram,
}

/// Eigenvalues at or below this fraction of the largest count as zero.
const NULL_RATIO: f64 = 1e-12;

pub fn fit_pca(rows: &[FlowStack], k: usize) -> Result<FlowBasis> {
    fit_pca_with(rows, k, PcaRoute::Auto)
}

/// Centered PCA of `rows`, keeping `k` components. Each component's
/// largest-magnitude entry is made positive. Directions beyond the rank of
/// the data are completed with standard basis vectors orthogonalized against
/// the others, with eigenvalue 0.
pub fn fit_pca_with(rows: &[FlowStack], k: usize, route: PcaRoute) -> Result<FlowBasis> {
    let n = rows.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("need 1 <= K < N, got K = {k}, N = {n}")));
    }
    let layer_dims = rows[0].layer_dims().to_vec();
    if rows.iter().any(|r| r.layer_dims() != layer_dims) {
        return Err(Error::shape("PCA rows must share layer dims"));
    }
    let d = rows[0].dimension();
    if k > d {
        return Err(Error::invalid(format!("K = {k} exceeds dimension {d}")));
    }
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r.data()) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.data().iter().zip(&mean).map(|(&x, m)| f64::from(x) - m).collect())
        .collect();

    let use_gram = match route {
        PcaRoute::Auto => n < d,
        PcaRoute::Covariance => false,
        PcaRoute::Gram => true,
    };
    let (sigma2, mut dirs) = if use_gram { gram_route(&centered, k) } else { covariance_route(&centered, d, k) };

    let top = sigma2.first().copied().unwrap_or(0.0);
    let rank = sigma2.iter().take_while(|&&s| s > NULL_RATIO * top && s > 0.0).count();
    dirs.truncate(rank);
    let mut sigma2: Vec<f64> = sigma2[..rank].to_vec();
    orthonormalize(&mut dirs);
    let mut e = 0;
    while dirs.len() < k {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        e += 1;
        if let Some(u) = orthogonal_residual(&dirs, v) {
            dirs.push(u);
            sigma2.push(0.0);
        }
    }
    for u in &mut dirs {
        fix_sign(u);
    }
    Ok(FlowBasis {
        layer_dims,
        mean: mean.iter().map(|&m| m as f32).collect(),
        components: dirs.iter().map(|u| u.iter().map(|&x| x as f32).collect()).collect(),
        eigenvalues: sigma2.iter().map(|&s| (s.max(0.0) / (n - 1) as f64) as f32).collect(),
    })
}

/// Top-`k` eigenpairs of a symmetric matrix, largest first.
fn top_eigen(m: DMatrix<f64>, k: usize) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).iter().copied().collect()))
        .collect()
}

fn covariance_route(x: &[Vec<f64>], d: usize, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut scatter = DMatrix::<f64>::zeros(d, d);
    for row in x {
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            for j in i..d {
                scatter[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            scatter[(i, j)] = scatter[(j, i)];
        }
    }
    top_eigen(scatter, k).into_iter().unzip()
}

fn gram_route(x: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.len();
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let d = x[0].len();
    top_eigen(gram, k)
        .into_iter()
        .map(|(s2, a)| {
            let mut u = vec![0.0; d];
            for (row, &ai) in x.iter().zip(&a) {
                for (uj, &xj) in u.iter_mut().zip(row) {
                    *uj += ai * xj;
                }
            }
            let norm = s2.sqrt();
            if norm > 0.0 {
                u.iter_mut().for_each(|v| *v /= norm);
            }
            (s2, u)
        })
        .unzip()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v` minus its projection on `basis` (twice, for stability), normalized;
/// `None` if almost nothing is left.
fn orthogonal_residual(basis: &[Vec<f64>], mut v: Vec<f64>) -> Option<Vec<f64>> {
    let before = dot(&v, &v).sqrt();
    for _ in 0..2 {
        for b in basis {
            let c = dot(b, &v);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    let norm = dot(&v, &v).sqrt();
    if norm <= 1e-6 * before {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

fn orthonormalize(dirs: &mut Vec<Vec<f64>>) {
    let mut done: Vec<Vec<f64>> = Vec::with_capacity(dirs.len());
    for v in dirs.drain(..) {
        if let Some(u) = orthogonal_residual(&done, v) {
            done.push(u);
        }
    }
    *dirs = done;
}

fn fix_sign(u: &mut [f64]) {
    let mut best = 0;
    for (i, x) in u.iter().enumerate() {
        if x.abs() > u[best].abs() {
            best = i;
        }
    }
    if u[best] < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Mean squared error per entry of reconstructing `rows` from the mean and
/// the first `k` components.
pub fn reconstruction_mse(basis: &FlowBasis, rows: &[FlowStack], k: usize) -> Result<f64> {
    if k > basis.k() {
        return Err(Error::invalid(format!("basis has {} components, asked for {k}", basis.k())));
    }
    if rows.is_empty() {
        return Err(Error::invalid("no rows to reconstruct"));
    }
    let d = basis.dimension();
    let mut total = 0.0;
    for r in rows {
        if r.dimension() != d {
            return Err(Error::shape(format!("row dimension {} vs basis {d}", r.dimension())));
        }
        let coef = basis.project(r.data(), k);
        let mut resid: Vec<f64> = r.data().iter().zip(&basis.mean).map(|(&x, &m)| f64::from(x) - f64::from(m)).collect();
        for (c, u) in coef.iter().zip(&basis.components) {
            resid.iter_mut().zip(u).for_each(|(x, &y)| *x -= c * f64::from(y));
        }
        total += dot(&resid, &resid);
    }
    Ok(total / (rows.len() * d) as f64)
}
