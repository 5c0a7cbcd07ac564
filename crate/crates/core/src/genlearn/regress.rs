use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{FlowBasis, FlowStack, GeneratorModel, PairRecord};
use crate::error::{Error, Result};
use crate::imageops::TransformKind;

/// Design matrix `U[delta]` (D x 3(K+1)): for the mean and each component
/// `B`, the columns `B`, `r B`, `r^2 B` with `r = delta / reference_delta`.
pub fn build_design(basis: &FlowBasis, reference_delta: f64, delta: f64) -> DMatrix<f64> {
    let r = delta / reference_delta;
    let blocks: Vec<&[f32]> = basis.blocks().collect();
    let d = basis.dimension();
    DMatrix::from_fn(d, 3 * blocks.len(), |row, col| {
        let b = f64::from(blocks[col / 3][row]);
        match col % 3 {
            0 => b,
            1 => r * b,
            _ => r * r * b,
        }
    })
}

/// How the normal equations are solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Cholesky; a Gram matrix with condition number above 1e12 is an error.
    #[default]
    Strict,
    /// Minimum-norm solution through the eigendecomposition, for problems
    /// that are rank deficient by construction (e.g. a single delta).
    MinimumNorm,
}

const MAX_CONDITION: f64 = 1e12;

/// Running sums of `U[d]^T U[d]` and `U[d]^T V` over pairs, in double
/// precision. Since `U[d]` only rescales the basis blocks by powers of `r`,
/// both sums are assembled from the block Gram matrix `B^T B` and the block
/// products `B^T V`; the stacked design matrix is never formed.
#[derive(Clone, Debug)]
pub struct GramAccumulator<'a> {
    basis: &'a FlowBasis,
    reference_delta: f64,
    blocks_gram: DMatrix<f64>,
    gram: DMatrix<f64>,
    moment: DVector<f64>,
    pairs: usize,
}

impl<'a> GramAccumulator<'a> {
    pub fn new(basis: &'a FlowBasis, reference_delta: f64) -> Result<Self> {
        basis.validate()?;
        if !(reference_delta.is_finite() && reference_delta != 0.0) {
            return Err(Error::invalid(format!("reference delta {reference_delta} must be finite and nonzero")));
        }
        let blocks: Vec<&[f32]> = basis.blocks().collect();
        let g = blocks.len();
        let mut blocks_gram = DMatrix::zeros(g, g);
        for i in 0..g {
            for j in i..g {
                let v = dot32(blocks[i], blocks[j]);
                blocks_gram[(i, j)] = v;
                blocks_gram[(j, i)] = v;
            }
        }
        Ok(Self {
            basis,
            reference_delta,
            blocks_gram,
            gram: DMatrix::zeros(3 * g, 3 * g),
            moment: DVector::zeros(3 * g),
            pairs: 0,
        })
    }

    /// `B_i^T v` for every block; pure, so callers may compute these in
    /// parallel and feed them to [`GramAccumulator::add_products`] in order.
    pub fn block_products<T: Copy + Into<f64>>(basis: &FlowBasis, v: &[T]) -> Result<Vec<f64>> {
        if v.len() != basis.dimension() {
            return Err(Error::shape(format!("flow dimension {} vs basis {}", v.len(), basis.dimension())));
        }
        Ok(basis
            .blocks()
            .map(|b| b.iter().zip(v).map(|(&x, &y)| f64::from(x) * y.into()).sum())
            .collect())
    }

    pub fn add<T: Copy + Into<f64>>(&mut self, delta: f64, v: &[T]) -> Result<()> {
        let products = Self::block_products(self.basis, v)?;
        self.add_products(delta, &products)
    }

    pub fn add_products(&mut self, delta: f64, products: &[f64]) -> Result<()> {
        let g = self.blocks_gram.nrows();
        if products.len() != g || !delta.is_finite() {
            return Err(Error::invalid("block products must match the basis and delta must be finite"));
        }
        let r = delta / self.reference_delta;
        let pow = [1.0, r, r * r];
        for i in 0..g {
            for a in 0..3 {
                self.moment[3 * i + a] += pow[a] * products[i];
                for j in 0..g {
                    for b in 0..3 {
                        self.gram[(3 * i + a, 3 * j + b)] += pow[a] * pow[b] * self.blocks_gram[(i, j)];
                    }
                }
            }
        }
        self.pairs += 1;
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn solve(&self, solver: Solver) -> Result<Vec<f64>> {
        if self.pairs == 0 {
            return Err(Error::invalid("no pairs accumulated"));
        }
        let eig = SymmetricEigen::new(self.gram.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        match solver {
            Solver::Strict => {
                let condition = if min > 0.0 { max / min } else { f64::INFINITY };
                if condition.is_nan() || condition > MAX_CONDITION {
                    return Err(Error::RankDeficient { condition });
                }
                let chol = self.gram.clone().cholesky().ok_or(Error::RankDeficient { condition })?;
                Ok(chol.solve(&self.moment).iter().copied().collect())
            }
            Solver::MinimumNorm => {
                let q = &eig.eigenvectors;
                let proj = q.transpose() * &self.moment;
                let mut w = DVector::zeros(self.moment.len());
                for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
                    if lambda > max * 1e-12 && lambda > 0.0 {
                        w += q.column(i) * (proj[i] / lambda);
                    }
                }
                Ok(w.iter().copied().collect())
            }
        }
    }
}

fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Least-squares generator coefficients over `pairs`.
pub fn fit_generator<'p>(
    pairs: impl IntoIterator<Item = &'p PairRecord>,
    basis: &FlowBasis,
    transform_kind: TransformKind,
    reference_delta: f64,
    solver: Solver,
) -> Result<GeneratorModel> {
    let mut acc = GramAccumulator::new(basis, reference_delta)?;
    for p in pairs {
        if p.flow.layer_dims() != basis.layer_dims.as_slice() {
            return Err(Error::shape(format!("pair of image {} has flow dims unlike the basis", p.image_id)));
        }
        acc.add(p.delta, p.flow.data())?;
    }
    if acc.pairs() == 0 {
        return Err(Error::invalid("no pairs to fit"));
    }
    let w = acc.solve(solver)?;
    let model = GeneratorModel {
        transform_kind,
        reference_delta,
        basis: basis.clone(),
        coefficients: w.iter().map(|&x| x as f32).collect(),
    };
    model.validate()?;
    Ok(model)
}

/// `G[delta] = sum_i (a_i + b_i r + c_i r^2) B_i`, in double precision.
pub fn synth_dense(model: &GeneratorModel, delta: f64) -> Vec<f64> {
    let r = delta / model.reference_delta;
    let mut out = vec![0.0f64; model.basis.dimension()];
    for (block, abc) in model.basis.blocks().zip(model.coefficients.chunks_exact(3)) {
        let s = f64::from(abc[0]) + f64::from(abc[1]) * r + f64::from(abc[2]) * r * r;
        if s == 0.0 {
            continue;
        }
        for (o, &b) in out.iter_mut().zip(block) {
            *o += s * f64::from(b);
        }
    }
    out
}

pub fn synth_generator(model: &GeneratorModel, delta: f64) -> Result<FlowStack> {
    if !delta.is_finite() {
        return Err(Error::invalid("delta must be finite"));
    }
    FlowStack::new(
        model.basis.layer_dims.clone(),
        synth_dense(model, delta).iter().map(|&x| x as f32).collect(),
    )
}
