//! Flow stacking, PCA, the quadratic-in-delta design matrix and the streaming
//! least-squares fit of generator coefficients.

mod model;
mod pca;
mod regress;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featflow::FlowField;

pub use model::GeneratorModel;
pub use pca::{fit_pca, fit_pca_with, reconstruction_mse, FlowBasis, PcaRoute};
pub use regress::{build_design, fit_generator, synth_dense, synth_generator, GramAccumulator, Solver};

/// Flow fields of every tap layer flattened into one vector: layer by layer,
/// the u plane then the v plane, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    layer_dims: Vec<(usize, usize)>,
    data: Vec<f32>,
}

/// `D = sum of 2 * H * W` over layers.
pub fn stack_dimension(layer_dims: &[(usize, usize)]) -> usize {
    layer_dims.iter().map(|(h, w)| 2 * h * w).sum()
}

pub fn stack_flows(fields: &[FlowField]) -> FlowStack {
    let layer_dims = fields.iter().map(|f| (f.height(), f.width())).collect();
    let mut data = Vec::new();
    for f in fields {
        data.extend_from_slice(f.u());
        data.extend_from_slice(f.v());
    }
    FlowStack { layer_dims, data }
}

impl FlowStack {
    pub fn new(layer_dims: Vec<(usize, usize)>, data: Vec<f32>) -> Result<Self> {
        let d = stack_dimension(&layer_dims);
        if data.len() != d {
            return Err(Error::shape(format!("flow stack needs {d} values, got {}", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("flow stack values must be finite"));
        }
        Ok(Self { layer_dims, data })
    }

    pub fn zeros(layer_dims: Vec<(usize, usize)>) -> Self {
        let d = stack_dimension(&layer_dims);
        Self { layer_dims, data: vec![0.0; d] }
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layer_dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dimension(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
    }

    pub fn unstack(&self) -> Vec<FlowField> {
        let mut offset = 0;
        self.layer_dims
            .iter()
            .map(|&(h, w)| {
                let n = h * w;
                let u = self.data[offset..offset + n].to_vec();
                let v = self.data[offset + n..offset + 2 * n].to_vec();
                offset += 2 * n;
                FlowField::from_parts(h, w, u, v).expect("stack values are finite")
            })
            .collect()
    }

    /// One FFG1 record per layer, back to back. The layer dims go in a JSON
    /// sidecar (see [`StackSidecar`]).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for f in self.unstack() {
            f.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, layer_dims: &[(usize, usize)]) -> Result<Self> {
        let mut fields = Vec::with_capacity(layer_dims.len());
        for &(h, w) in layer_dims {
            let f = FlowField::read_from(&mut r)?;
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::format(
                    "FFG1 flow stack",
                    format!("layer is {}x{}, sidecar says {h}x{w}", f.height(), f.width()),
                ));
            }
            fields.push(f);
        }
        Ok(stack_flows(&fields))
    }
}

/// JSON sidecar for a file of concatenated flow stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSidecar {
    pub layer_dims: Vec<(usize, usize)>,
    pub count: usize,
}

/// Writes `stacks` (all with the same layer dims) as concatenated FFG1 records.
pub fn write_stacks(stacks: &[FlowStack]) -> Result<(Vec<u8>, StackSidecar)> {
    let layer_dims = stacks.first().map(|s| s.layer_dims.clone()).unwrap_or_default();
    let mut bytes = Vec::new();
    for s in stacks {
        if s.layer_dims != layer_dims {
            return Err(Error::shape("flow stacks in one file must share layer dims"));
        }
        s.write_to(&mut bytes)?;
    }
    Ok((bytes, StackSidecar { layer_dims, count: stacks.len() }))
}

pub fn read_stacks(bytes: &[u8], sidecar: &StackSidecar) -> Result<Vec<FlowStack>> {
    let mut r = bytes;
    let stacks = (0..sidecar.count)
        .map(|_| FlowStack::read_from(&mut r, &sidecar.layer_dims))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::format("FFG1 flow stack", format!("{} trailing bytes", r.len())));
    }
    Ok(stacks)
}

/// One observed transformation pair and its stacked flow.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub image_id: usize,
    /// Starting amount (degrees, scale factor or pixels, by family).
    pub theta_init: f64,
    pub delta: f64,
    pub flow: FlowStack,
}
