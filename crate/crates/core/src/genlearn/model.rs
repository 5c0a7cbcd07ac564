use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::{stack_dimension, FlowBasis};
use crate::error::{Error, Result};
use crate::imageops::TransformKind;

/// A fitted generator family: basis plus one `(a, b, c)` coefficient group
/// for the mean and for each component.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub transform_kind: TransformKind,
    /// Amount at which the basis was learned; `r = delta / reference_delta`.
    pub reference_delta: f64,
    pub basis: FlowBasis,
    pub coefficients: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    transform_kind: TransformKind,
    #[serde(rename = "K")]
    k: usize,
    reference_delta: f64,
    layer_dims: Vec<(usize, usize)>,
    #[serde(rename = "D")]
    d: usize,
}

impl GeneratorModel {
    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        if self.coefficients.len() != 3 * (self.basis.k() + 1) {
            return Err(Error::shape(format!(
                "{} coefficients for K = {}; need {}",
                self.coefficients.len(),
                self.basis.k(),
                3 * (self.basis.k() + 1)
            )));
        }
        if !self.reference_delta.is_finite() || self.reference_delta == 0.0 || self.coefficients.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("generator values must be finite with a nonzero reference delta"));
        }
        Ok(())
    }

    /// One line of JSON header, then `GEN1`, then mean, components,
    /// eigenvalues and coefficients as little-endian f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.validate()?;
        let header = Header {
            transform_kind: self.transform_kind,
            k: self.basis.k(),
            reference_delta: self.reference_delta,
            layer_dims: self.basis.layer_dims.clone(),
            d: self.basis.dimension(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\nGEN1")?;
        let values = self
            .basis
            .blocks()
            .flatten()
            .chain(&self.basis.eigenvalues)
            .chain(&self.coefficients);
        for x in values {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::format("GEN1 model", "missing header line"));
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::format("GEN1 model", format!("header: {e}")))?;
        if header.d != stack_dimension(&header.layer_dims) {
            return Err(Error::format("GEN1 model", "D does not match layer_dims"));
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GEN1" {
            return Err(Error::format("GEN1 model", "bad magic"));
        }
        let (k, d) = (header.k, header.d);
        let mut read = |n: usize| -> Result<Vec<f32>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mean = read(d)?;
        let components = (0..k).map(|_| read(d)).collect::<Result<Vec<_>>>()?;
        let eigenvalues = read(k)?;
        let coefficients = read(3 * (k + 1))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format("GEN1 model", format!("{} trailing bytes", rest.len())));
        }
        let model = Self {
            transform_kind: header.transform_kind,
            reference_delta: header.reference_delta,
            basis: FlowBasis {
                layer_dims: header.layer_dims,
                mean,
                components,
                eigenvalues,
            },
            coefficients,
        };
        model.validate()?;
        Ok(model)
    }
}
