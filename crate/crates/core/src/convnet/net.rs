use super::spec::{LayerSpec, NetworkSpec, Shape};
use super::weights::Weights;
use crate::error::{Error, Result};
use crate::featflow::FlowField;
use crate::imageops::Image;
use crate::tensor::{Real, Tensor3};
use crate::warp;

/// Activations at every tap point, in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<F = f32> {
    pub layers: Vec<(String, Tensor3<F>)>,
}

impl<F: Real> FeatureStack<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor3<F>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor3<F>> {
        self.layers.iter().map(|(_, t)| t)
    }
}

/// Flow field applied to the activations of tap `layer` on the forward pass;
/// its negation is applied to the gradient on the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpHook {
    pub layer: String,
    pub field: FlowField,
}

#[derive(Clone, Debug)]
enum Act<F> {
    Spatial(Tensor3<F>),
    Flat(Vec<F>),
}

impl<F: Real> Act<F> {
    fn spatial(&self) -> &Tensor3<F> {
        match self {
            Act::Spatial(t) => t,
            Act::Flat(_) => unreachable!("shape validated by spec"),
        }
    }

    fn flat(&self) -> &[F] {
        match self {
            Act::Flat(v) => v,
            Act::Spatial(t) => t.as_slice(),
        }
    }
}

struct Trace<F> {
    /// `inputs[i]` feeds layer `i`; the last entry holds the class scores.
    inputs: Vec<Act<F>>,
    pool_argmax: Vec<Vec<usize>>,
    hook: Option<(usize, FlowField)>,
    taps: FeatureStack<F>,
}

/// A network spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<F = f32> {
    spec: NetworkSpec,
    weights: Weights<F>,
    shapes: Vec<Shape>,
    /// Index of the weight tensor of each parametric layer.
    slots: Vec<Option<usize>>,
}

impl<F: Real> Network<F> {
    pub fn new(spec: NetworkSpec, weights: Weights<F>) -> Result<Self> {
        let shapes = spec.shapes()?;
        weights.cast::<f32>().check_against(&spec)?;
        let mut next = 0;
        let slots = spec
            .layers
            .iter()
            .map(|l| {
                l.has_params().then(|| {
                    next += 2;
                    next - 2
                })
            })
            .collect();
        Ok(Self {
            spec,
            weights,
            shapes,
            slots,
        })
    }

    /// Freshly initialized network; see [`Weights::init`].
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let weights = Weights::init(&spec, seed)?;
        Self::new(spec, weights)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights<F> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<F> {
        &mut self.weights
    }

    pub fn into_weights(self) -> Weights<F> {
        self.weights
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            spec: self.spec.clone(),
            weights: self.weights.cast(),
            shapes: self.shapes.clone(),
            slots: self.slots.clone(),
        }
    }

    fn input_tensor(&self, image: &Image) -> Result<Tensor3<F>> {
        let n = self.spec.input_size;
        if image.width() != n || image.height() != n {
            return Err(Error::shape(format!(
                "image is {}x{}, network expects {n}x{n}",
                image.width(),
                image.height()
            )));
        }
        Tensor3::from_vec(1, n, n, image.pixels().iter().map(|&v| F::from_f32(v).unwrap()).collect())
    }

    fn check_input(&self, input: &Tensor3<F>) -> Result<()> {
        let n = self.spec.input_size;
        if input.dims() != (1, n, n) {
            return Err(Error::shape(format!("input is {:?}, network expects (1, {n}, {n})", input.dims())));
        }
        Ok(())
    }

    fn resolve_hook(&self, hook: Option<&WarpHook>) -> Result<Option<(usize, FlowField)>> {
        let Some(hook) = hook else { return Ok(None) };
        let tap = self.spec.tap_index(&hook.layer)?;
        let after = self.spec.taps[tap].after;
        match self.shapes[after] {
            Shape::Spatial { height, width, .. } if (height, width) == (hook.field.height(), hook.field.width()) => {}
            _ => {
                return Err(Error::shape(format!(
                    "hook field {}x{} does not match tap {}",
                    hook.field.height(),
                    hook.field.width(),
                    hook.layer
                )))
            }
        }
        Ok(Some((after, hook.field.clone())))
    }

    fn trace(&self, input: &Tensor3<F>, hook: Option<&WarpHook>) -> Result<Trace<F>> {
        self.check_input(input)?;
        let hook = self.resolve_hook(hook)?;
        let mut act = Act::Spatial(input.clone());
        let mut inputs = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut pool_argmax = Vec::new();
        let mut taps = Vec::new();
        let mut next_tap = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let mut out = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let s = self.slots[i].unwrap();
                    let (w, b) = (&self.weights.tensors[s], &self.weights.tensors[s + 1]);
                    Act::Spatial(conv_forward(act.spatial(), &w.data, &w.dims, &b.data, stride, pad))
                }
                LayerSpec::Relu => match &act {
                    Act::Spatial(t) => {
                        let mut t = t.clone();
                        t.as_mut_slice().iter_mut().for_each(|v| *v = v.max(F::zero()));
                        Act::Spatial(t)
                    }
                    Act::Flat(v) => Act::Flat(v.iter().map(|v| v.max(F::zero())).collect()),
                },
                LayerSpec::MaxPool { kernel, stride } => {
                    let (t, arg) = pool_forward(act.spatial(), kernel, stride);
                    pool_argmax.push(arg);
                    Act::Spatial(t)
                }
                LayerSpec::Flatten => Act::Flat(act.flat().to_vec()),
                LayerSpec::FullyConnected { .. } => {
                    let s = self.slots[i].unwrap();
                    let (w, b) = (&self.weights.tensors[s], &self.weights.tensors[s + 1]);
                    Act::Flat(dense_forward(act.flat(), &w.data, &b.data))
                }
            };
            if let Some((at, field)) = &hook {
                if *at == i {
                    out = Act::Spatial(warp::apply_flow(out.spatial(), field)?);
                }
            }
            if self.spec.taps.get(next_tap).is_some_and(|t| t.after == i) {
                taps.push((self.spec.taps[next_tap].name.clone(), out.spatial().clone()));
                next_tap += 1;
            }
            inputs.push(std::mem::replace(&mut act, out));
        }
        inputs.push(act);
        Ok(Trace {
            inputs,
            pool_argmax,
            hook,
            taps: FeatureStack { layers: taps },
        })
    }

    /// Tap activations and class scores.
    pub fn forward(&self, image: &Image) -> Result<(FeatureStack<F>, Vec<F>)> {
        self.forward_hooked(image, None)
    }

    pub fn forward_hooked(&self, image: &Image, hook: Option<&WarpHook>) -> Result<(FeatureStack<F>, Vec<F>)> {
        self.forward_tensor(&self.input_tensor(image)?, hook)
    }

    /// Forward pass on a raw `1 x n x n` input tensor.
    pub fn forward_tensor(&self, input: &Tensor3<F>, hook: Option<&WarpHook>) -> Result<(FeatureStack<F>, Vec<F>)> {
        let mut trace = self.trace(input, hook)?;
        let scores = match trace.inputs.pop() {
            Some(Act::Flat(v)) => v,
            _ => unreachable!("spec ends in class scores"),
        };
        Ok((trace.taps, scores))
    }

    /// Which ReLU units are active and which max-pool inputs win, as one flat
    /// list. The loss is smooth in the parameters wherever this stays fixed,
    /// so finite-difference checks can tell when a step crossed a kink.
    pub fn activation_pattern(&self, input: &Tensor3<F>, hook: Option<&WarpHook>) -> Result<Vec<u32>> {
        let trace = self.trace(input, hook)?;
        let mut pattern = Vec::new();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if let LayerSpec::Relu = layer {
                pattern.extend(trace.inputs[i].flat().iter().map(|&v| u32::from(v > F::zero())));
            }
        }
        for arg in &trace.pool_argmax {
            pattern.extend(arg.iter().map(|&a| a as u32));
        }
        Ok(pattern)
    }

    pub fn extract_features(&self, image: &Image) -> Result<FeatureStack<F>> {
        Ok(self.forward(image)?.0)
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        let (_, scores) = self.forward(image)?;
        Ok(argmax(&scores))
    }

    /// Softmax cross-entropy loss and its gradient with respect to every
    /// parameter. With a hook, the forward pass warps the hooked tap by the
    /// field and the backward pass warps the gradient by the negated field.
    pub fn backward(&self, image: &Image, label: usize, hook: Option<&WarpHook>) -> Result<(f64, Weights<F>)> {
        let (loss, grads, _) = self.backward_predict(&self.input_tensor(image)?, label, hook)?;
        Ok((loss, grads))
    }

    /// [`Network::backward`] on a raw `1 x n x n` input tensor.
    pub fn backward_tensor(&self, input: &Tensor3<F>, label: usize, hook: Option<&WarpHook>) -> Result<(f64, Weights<F>)> {
        let (loss, grads, _) = self.backward_predict(input, label, hook)?;
        Ok((loss, grads))
    }

    pub(crate) fn backward_image(
        &self,
        image: &Image,
        label: usize,
        hook: Option<&WarpHook>,
    ) -> Result<(f64, Weights<F>, usize)> {
        self.backward_predict(&self.input_tensor(image)?, label, hook)
    }

    /// [`Network::backward`] plus the predicted class of the same forward pass.
    fn backward_predict(
        &self,
        input: &Tensor3<F>,
        label: usize,
        hook: Option<&WarpHook>,
    ) -> Result<(f64, Weights<F>, usize)> {
        if label >= self.spec.class_count {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.spec.class_count
            )));
        }
        let trace = self.trace(input, hook)?;
        let scores = trace.inputs.last().unwrap().flat();
        let predicted = argmax(scores);
        let (loss, mut grad) = softmax_xent(scores, label);
        let mut grads = self.weights.zeros_like();
        let mut pools = trace.pool_argmax.len();
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            if let Some((at, field)) = &trace.hook {
                if *at == i {
                    grad = Act::Spatial(warp::warp_gradient(grad.spatial(), field)?);
                }
            }
            let input = &trace.inputs[i];
            grad = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let s = self.slots[i].unwrap();
                    let w = &self.weights.tensors[s];
                    let (gw, rest) = grads.tensors.split_at_mut(s + 1);
                    let gin = conv_backward(
                        input.spatial(),
                        &w.data,
                        &w.dims,
                        grad.spatial(),
                        stride,
                        pad,
                        &mut gw[s].data,
                        &mut rest[0].data,
                        i > 0,
                    );
                    Act::Spatial(gin)
                }
                LayerSpec::Relu => match (grad, input) {
                    (Act::Spatial(mut g), Act::Spatial(x)) => {
                        for (gv, &xv) in g.as_mut_slice().iter_mut().zip(x.as_slice()) {
                            if xv <= F::zero() {
                                *gv = F::zero();
                            }
                        }
                        Act::Spatial(g)
                    }
                    (Act::Flat(mut g), Act::Flat(x)) => {
                        for (gv, &xv) in g.iter_mut().zip(x) {
                            if xv <= F::zero() {
                                *gv = F::zero();
                            }
                        }
                        Act::Flat(g)
                    }
                    _ => unreachable!("relu preserves shape"),
                },
                LayerSpec::MaxPool { .. } => {
                    pools -= 1;
                    let x = input.spatial();
                    let mut gin = Tensor3::zeros(x.channels(), x.height(), x.width());
                    let gs = gin.as_mut_slice();
                    for (&src, &g) in trace.pool_argmax[pools].iter().zip(grad.spatial().as_slice()) {
                        gs[src] = gs[src] + g;
                    }
                    Act::Spatial(gin)
                }
                LayerSpec::Flatten => {
                    let (c, h, w) = input.spatial().dims();
                    Act::Spatial(Tensor3::from_vec(c, h, w, grad.flat().to_vec())?)
                }
                LayerSpec::FullyConnected { .. } => {
                    let s = self.slots[i].unwrap();
                    let w = &self.weights.tensors[s];
                    let x = input.flat();
                    let g = grad.flat();
                    let n_in = x.len();
                    let mut gin = vec![F::zero(); n_in];
                    for (o, &go) in g.iter().enumerate() {
                        let row = &w.data[o * n_in..(o + 1) * n_in];
                        let grow = &mut grads.tensors[s].data[o * n_in..(o + 1) * n_in];
                        for j in 0..n_in {
                            grow[j] = grow[j] + go * x[j];
                            gin[j] = gin[j] + row[j] * go;
                        }
                        grads.tensors[s + 1].data[o] = grads.tensors[s + 1].data[o] + go;
                    }
                    Act::Flat(gin)
                }
            };
        }
        Ok((loss, grads, predicted))
    }

    /// Loss only; used by finite-difference checks.
    pub fn loss(&self, image: &Image, label: usize, hook: Option<&WarpHook>) -> Result<f64> {
        self.loss_tensor(&self.input_tensor(image)?, label, hook)
    }

    pub fn loss_tensor(&self, input: &Tensor3<F>, label: usize, hook: Option<&WarpHook>) -> Result<f64> {
        let (_, scores) = self.forward_tensor(input, hook)?;
        Ok(softmax_xent(&scores, label).0)
    }
}

pub(crate) fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_xent<F: Real>(scores: &[F], label: usize) -> (f64, Act<F>) {
    let m = scores.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = scores.iter().map(|&z| (z - m).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    let loss = sum.ln() + m - scores[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / sum - if i == label { F::one() } else { F::zero() })
        .collect();
    (loss.to_f64().unwrap_or(f64::NAN), Act::Flat(grad))
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `[0, width)`.
#[inline]
fn valid_range(out: usize, width: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if width + pad > k {
        ((width - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward<F: Real>(
    input: &Tensor3<F>,
    w: &[F],
    dims: &[usize],
    bias: &[F],
    stride: usize,
    pad: usize,
) -> Tensor3<F> {
    let (cin, h, wd) = input.dims();
    let (cout, k) = (dims[0], dims[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor3::zeros(cout, oh, ow);
    for oc in 0..cout {
        let oplane = out.plane_mut(oc);
        oplane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..cin {
            let iplane = input.plane(ic);
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((oc * cin + ic) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, wd, kx, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let irow = &iplane[iy * wd..(iy + 1) * wd];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            orow[ox] = orow[ox] + wv * irow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<F: Real>(
    input: &Tensor3<F>,
    w: &[F],
    dims: &[usize],
    gout: &Tensor3<F>,
    stride: usize,
    pad: usize,
    gw: &mut [F],
    gb: &mut [F],
    want_input_grad: bool,
) -> Tensor3<F> {
    let (cin, h, wd) = input.dims();
    let (cout, oh, ow) = gout.dims();
    let k = dims[2];
    let mut gin = Tensor3::zeros(cin, h, wd);
    for oc in 0..cout {
        let gplane = gout.plane(oc);
        gb[oc] = gb[oc] + gplane.iter().copied().sum();
        for ic in 0..cin {
            let iplane = input.plane(ic);
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..k {
                    let widx = ((oc * cin + ic) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = valid_range(ow, wd, kx, stride, pad);
                    let mut acc = F::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &iplane[iy * wd..(iy + 1) * wd];
                        for ox in ox_lo..ox_hi {
                            acc = acc + grow[ox] * irow[ox * stride + kx - pad];
                        }
                        if want_input_grad {
                            let girow = &mut gin.plane_mut(ic)[iy * wd..(iy + 1) * wd];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                girow[ix] = girow[ix] + wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] = gw[widx] + acc;
                }
            }
        }
    }
    gin
}

fn pool_forward<F: Real>(input: &Tensor3<F>, k: usize, stride: usize) -> (Tensor3<F>, Vec<usize>) {
    let (c, h, w) = input.dims();
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let data = input.as_slice();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.set(ch, oy, ox, data[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn dense_forward<F: Real>(x: &[F], w: &[F], b: &[F]) -> Vec<F> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            w[o * n..(o + 1) * n]
                .iter()
                .zip(x)
                .fold(bo, |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect()
}
