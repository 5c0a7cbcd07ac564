use std::io::{Read, Write};

use rand::Rng;

use super::spec::{LayerSpec, NetworkSpec, Shape};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<F = f32> {
    pub dims: Vec<usize>,
    pub data: Vec<F>,
}

/// Parameters of every conv and fully-connected layer, in layer order, each
/// as a weight tensor followed by a bias vector. Conv weights are
/// `[out, in, k, k]`; dense weights are `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<F = f32> {
    pub init_seed: u64,
    pub tensors: Vec<ParamTensor<F>>,
}

impl<F: Real> Weights<F> {
    /// Fan-in scaled uniform init (`U(-sqrt(3/fan_in), sqrt(3/fan_in))`, unit
    /// variance gain), zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = seeding::rng(seed);
        let mut tensors = Vec::new();
        let mut input = Shape::Spatial {
            channels: 1,
            height: spec.input_size,
            width: spec.input_size,
        };
        for (layer, &out) in spec.layers.iter().zip(&shapes) {
            let dims = match (*layer, input) {
                (LayerSpec::Conv { out_channels, kernel, .. }, Shape::Spatial { channels, .. }) => {
                    Some(vec![out_channels, channels, kernel, kernel])
                }
                (LayerSpec::FullyConnected { out_units }, Shape::Flat(n)) => Some(vec![out_units, n]),
                _ => None,
            };
            if let Some(dims) = dims {
                let fan_in: usize = dims[1..].iter().product();
                let limit = (3.0 / fan_in as f64).sqrt();
                let data = (0..dims.iter().product::<usize>())
                    .map(|_| F::from_f64_lossy(rng.gen_range(-limit..limit)))
                    .collect();
                let bias = ParamTensor {
                    dims: vec![dims[0]],
                    data: vec![F::zero(); dims[0]],
                };
                tensors.push(ParamTensor { dims, data });
                tensors.push(bias);
            }
            input = out;
        }
        Ok(Self { init_seed: seed, tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            init_seed: self.init_seed,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    dims: t.dims.clone(),
                    data: vec![F::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: F, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + alpha * y;
            }
        }
    }

    pub fn cast<G: Real>(&self) -> Weights<G> {
        Weights {
            init_seed: self.init_seed,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| G::from_f64_lossy(v.to_f64().unwrap())).collect(),
                })
                .collect(),
        }
    }

    /// Checks that tensor shapes match what `spec` expects.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = Weights::<f32>::init(spec, 0)?;
        if expected.tensors.len() != self.tensors.len()
            || expected.tensors.iter().zip(&self.tensors).any(|(e, t)| e.dims != t.dims)
        {
            return Err(Error::shape("weight tensors do not match the network spec"));
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"CNW1";

impl Weights<f32> {
    /// `CNW1`, u32 parametric-layer count, then per tensor (weight then bias of
    /// each layer) a u32 rank, u32 dims, and f32 data, all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&((self.tensors.len() / 2) as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a `CNW1` stream. The init seed is not stored and reads back as 0.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("CNW1 weights", "bad magic"));
        }
        let layers = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(2 * layers);
        for _ in 0..2 * layers {
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::format("CNW1 weights", format!("tensor rank {rank}")));
            }
            let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(ParamTensor { dims, data });
        }
        Ok(Self { init_seed: 0, tensors })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = NetworkSpec::toy_alex();
        let a = Weights::<f32>::init(&spec, 3).unwrap();
        let b = Weights::<f32>::init(&spec, 3).unwrap();
        assert_eq!(a, b);
        for bias in a.tensors.iter().skip(1).step_by(2) {
            assert!(bias.data.iter().all(|&v| v == 0.0));
        }
        let c = Weights::<f32>::init(&spec, 4).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.tensors.len(), 10);
        assert_eq!(a.tensors[0].dims, vec![8, 1, 5, 5]);
        assert_eq!(a.tensors[8].dims, vec![5, 64]);
    }

    #[test]
    fn cnw1_round_trip() {
        let w = Weights::<f32>::init(&NetworkSpec::toy_small(3), 9).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"CNW1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        let back = Weights::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.tensors, w.tensors);
        assert!(Weights::read_from(&b"XXXX"[..]).is_err());
        assert!(Weights::read_from(&bytes[..bytes.len() - 1]).is_err());
    }
}
