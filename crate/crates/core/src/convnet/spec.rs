use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    FullyConnected {
        out_units: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::FullyConnected { .. } => "fully_connected",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }
}

/// Named feature-extraction point: the output of layer `after`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    pub after: usize,
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { channels, height, width } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Smallest spatial side allowed at a tap point.
pub const MIN_TAP_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Side of the square single-channel input.
    pub input_size: usize,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
    /// Tap points in layer order; flows are computed per tap.
    pub taps: Vec<TapSpec>,
}

impl NetworkSpec {
    /// 64x64 input, three conv taps (8x32x32, 16x16x16, 32x8x8), two dense layers, 5 classes.
    pub fn toy_alex() -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input_size: 64,
            class_count: 5,
            layers: vec![
                Conv { out_channels: 8, kernel: 5, stride: 2, pad: 2 },
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Conv { out_channels: 16, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Conv { out_channels: 32, kernel: 3, stride: 1, pad: 1 },
                Relu,
                Flatten,
                FullyConnected { out_units: 64 },
                Relu,
                FullyConnected { out_units: 5 },
            ],
            taps: vec![
                TapSpec { name: "c1".into(), after: 1 },
                TapSpec { name: "c2".into(), after: 4 },
                TapSpec { name: "c3".into(), after: 7 },
            ],
        }
    }

    /// Three parametric layers on an 8x8 input; used for gradient checks.
    pub fn toy_small(class_count: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input_size: 8,
            class_count,
            layers: vec![
                Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 },
                Relu,
                Flatten,
                FullyConnected { out_units: class_count },
            ],
            taps: vec![
                TapSpec { name: "c1".into(), after: 1 },
                TapSpec { name: "c2".into(), after: 4 },
            ],
        }
    }

    /// Output shape of every layer, validating the whole spec on the way.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_size == 0 || self.class_count < 2 {
            return Err(Error::shape("network needs a nonempty input and at least two classes"));
        }
        let mut shape = Shape::Spatial {
            channels: 1,
            height: self.input_size,
            width: self.input_size,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::shape(format!("layer {i} ({}): {msg}", layer.kind()));
            shape = match (*layer, shape) {
                (LayerSpec::Conv { out_channels, kernel, stride, pad }, Shape::Spatial { height, width, .. }) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(fail("zero-sized conv parameter".into()));
                    }
                    if height + 2 * pad < kernel || width + 2 * pad < kernel {
                        return Err(fail(format!("kernel {kernel} exceeds padded input {height}x{width}")));
                    }
                    Shape::Spatial {
                        channels: out_channels,
                        height: (height + 2 * pad - kernel) / stride + 1,
                        width: (width + 2 * pad - kernel) / stride + 1,
                    }
                }
                (LayerSpec::MaxPool { kernel, stride }, Shape::Spatial { channels, height, width }) => {
                    if kernel == 0 || stride == 0 || kernel > height || kernel > width {
                        return Err(fail(format!("pool {kernel}/{stride} invalid on {height}x{width}")));
                    }
                    Shape::Spatial {
                        channels,
                        height: (height - kernel) / stride + 1,
                        width: (width - kernel) / stride + 1,
                    }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, s) => Shape::Flat(s.len()),
                (LayerSpec::FullyConnected { out_units }, Shape::Flat(_)) => {
                    if out_units == 0 {
                        return Err(fail("zero output units".into()));
                    }
                    Shape::Flat(out_units)
                }
                (_, s) => return Err(fail(format!("cannot follow activation of shape {s:?}"))),
            };
            out.push(shape);
        }
        match out.last() {
            Some(&Shape::Flat(n)) if n == self.class_count => {}
            last => {
                return Err(Error::shape(format!(
                    "final layer must produce {} class scores, produces {last:?}",
                    self.class_count
                )))
            }
        }
        let mut prev: Option<usize> = None;
        for tap in &self.taps {
            if self.taps.iter().filter(|t| t.name == tap.name).count() > 1 {
                return Err(Error::shape(format!("duplicate tap name {}", tap.name)));
            }
            if prev.is_some_and(|p| p >= tap.after) {
                return Err(Error::shape(format!("tap {} is out of layer order", tap.name)));
            }
            prev = Some(tap.after);
            match out.get(tap.after) {
                Some(Shape::Spatial { height, width, .. }) if *height >= MIN_TAP_SIDE && *width >= MIN_TAP_SIDE => {}
                Some(s) => {
                    return Err(Error::shape(format!(
                        "tap {} after layer {} has shape {s:?}; taps need a spatial map of side >= {MIN_TAP_SIDE}",
                        tap.name, tap.after
                    )))
                }
                None => return Err(Error::shape(format!("tap {} refers to missing layer {}", tap.name, tap.after))),
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// `(channels, height, width)` of every tap, in tap order.
    pub fn tap_dims(&self) -> Result<Vec<(usize, usize, usize)>> {
        let shapes = self.shapes()?;
        Ok(self
            .taps
            .iter()
            .map(|t| match shapes[t.after] {
                Shape::Spatial { channels, height, width } => (channels, height, width),
                Shape::Flat(_) => unreachable!("validated as spatial"),
            })
            .collect())
    }

    /// Spatial `(height, width)` of every tap; the layer dims of a flow stack.
    pub fn flow_layer_dims(&self) -> Result<Vec<(usize, usize)>> {
        Ok(self.tap_dims()?.into_iter().map(|(_, h, w)| (h, w)).collect())
    }

    pub fn tap_index(&self, name: &str) -> Result<usize> {
        self.taps
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown tap layer {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_alex_tap_dims_and_flow_dimension() {
        let spec = NetworkSpec::toy_alex();
        assert_eq!(spec.tap_dims().unwrap(), vec![(8, 32, 32), (16, 16, 16), (32, 8, 8)]);
        let d: usize = spec.flow_layer_dims().unwrap().iter().map(|(h, w)| 2 * h * w).sum();
        assert_eq!(d, 2688);
    }

    #[test]
    fn rejects_bad_specs_naming_the_layer() {
        let mut spec = NetworkSpec::toy_alex();
        spec.layers[3] = LayerSpec::FullyConnected { out_units: 3 };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("layer 3"), "{err}");

        let mut spec = NetworkSpec::toy_alex();
        spec.taps.push(TapSpec { name: "fc".into(), after: 9 });
        assert!(spec.validate().is_err());

        let mut spec = NetworkSpec::toy_alex();
        spec.layers.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let spec = NetworkSpec::toy_alex();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"type\":\"conv\""));
        assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), spec);
    }
}
