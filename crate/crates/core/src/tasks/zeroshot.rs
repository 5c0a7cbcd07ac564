use serde::{Deserialize, Serialize};

use crate::convnet::{FeatureStack, Network};
use crate::error::{Error, Result};
use crate::featflow::{estimate_flow, FlowDefaults};
use crate::genlearn::{stack_flows, synth_dense, FlowStack, GeneratorModel};
use crate::imageops::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    /// Candidate amounts, strictly increasing.
    pub delta_grid_fine: Vec<f64>,
    pub threshold: f64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            delta_grid_fine: (0..=60).map(|i| 2.0 * i as f64).collect(),
            threshold: 60.0,
        }
    }
}

impl ZeroShotConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.delta_grid_fine;
        if g.is_empty() || g.iter().any(|d| !d.is_finite()) || g.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("delta grid must be finite and strictly increasing"));
        }
        if !(g[0] < self.threshold && *g.last().unwrap() >= self.threshold) {
            return Err(Error::invalid(format!("delta grid does not span the threshold {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LessThanThreshold,
    GreaterThanThreshold,
}

impl Category {
    /// Amounts equal to the threshold count as greater.
    pub fn of(delta: f64, threshold: f64) -> Self {
        if delta < threshold {
            Category::LessThanThreshold
        } else {
            Category::GreaterThanThreshold
        }
    }
}

/// Generators synthesized once for every candidate amount.
#[derive(Clone, Debug)]
pub struct DeltaMatcher {
    config: ZeroShotConfig,
    layer_dims: Vec<(usize, usize)>,
    table: Vec<Vec<f64>>,
}

impl DeltaMatcher {
    pub fn new(model: &GeneratorModel, config: &ZeroShotConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        Ok(Self {
            config: config.clone(),
            layer_dims: model.basis.layer_dims.clone(),
            table: config.delta_grid_fine.iter().map(|&d| synth_dense(model, d)).collect(),
        })
    }

    pub fn config(&self) -> &ZeroShotConfig {
        &self.config
    }

    /// L2 distance from `observed` to every candidate generator.
    pub fn residuals(&self, observed: &FlowStack) -> Result<Vec<f64>> {
        if observed.layer_dims() != self.layer_dims.as_slice() {
            return Err(Error::shape(format!(
                "observed flow has layer dims {:?}, generator has {:?}",
                observed.layer_dims(),
                self.layer_dims
            )));
        }
        Ok(self
            .table
            .iter()
            .map(|g| g.iter().zip(observed.data()).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>().sqrt())
            .collect())
    }

    /// Best-matching amount and its residual; ties go to the smaller amount.
    pub fn estimate(&self, observed: &FlowStack) -> Result<(f64, f64)> {
        let res = self.residuals(observed)?;
        let mut best = 0;
        for (i, &r) in res.iter().enumerate() {
            if r < res[best] {
                best = i;
            }
        }
        Ok((self.config.delta_grid_fine[best], res[best]))
    }

    pub fn categorize(&self, observed: &FlowStack) -> Result<Category> {
        Ok(Category::of(self.estimate(observed)?.0, self.config.threshold))
    }
}

pub fn estimate_delta(observed: &FlowStack, model: &GeneratorModel, cfg: &ZeroShotConfig) -> Result<(f64, f64)> {
    DeltaMatcher::new(model, cfg)?.estimate(observed)
}

pub fn categorize(observed: &FlowStack, model: &GeneratorModel, cfg: &ZeroShotConfig) -> Result<Category> {
    DeltaMatcher::new(model, cfg)?.categorize(observed)
}

/// Flow from every tap of `src` to the same tap of `dst`, stacked.
/// `defaults` gives one parameter policy per tap.
pub fn feature_flow_stack(src: &FeatureStack, dst: &FeatureStack, defaults: &[FlowDefaults]) -> Result<FlowStack> {
    if src.layers.len() != defaults.len() || dst.layers.len() != defaults.len() {
        return Err(Error::invalid(format!(
            "{} flow parameter sets for {} tap layers",
            defaults.len(),
            src.layers.len()
        )));
    }
    let fields = src
        .tensors()
        .zip(dst.tensors())
        .zip(defaults)
        .map(|((a, b), d)| estimate_flow(a, b, &d.resolve(a)))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_flows(&fields))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRecord {
    pub true_delta: f64,
    pub estimated_delta: f64,
    pub residual: f64,
    pub verdict: Category,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub pairs: Vec<ZeroShotRecord>,
}

/// Categorizes a single test pair; the per-pair unit of [`zero_shot_eval`].
pub fn zero_shot_pair(
    net: &Network,
    matcher: &DeltaMatcher,
    pair: &(Image, Image, f64),
    defaults: &[FlowDefaults],
) -> Result<ZeroShotRecord> {
    let (a, b, true_delta) = pair;
    let observed = feature_flow_stack(&net.extract_features(a)?, &net.extract_features(b)?, defaults)?;
    let (estimated_delta, residual) = matcher.estimate(&observed)?;
    let threshold = matcher.config.threshold;
    let verdict = Category::of(estimated_delta, threshold);
    Ok(ZeroShotRecord {
        true_delta: *true_delta,
        estimated_delta,
        residual,
        verdict,
        correct: verdict == Category::of(*true_delta, threshold),
    })
}

pub fn report_from_records(threshold: f64, pairs: Vec<ZeroShotRecord>) -> Result<ZeroShotReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no test pairs"));
    }
    let accuracy = pairs.iter().filter(|r| r.correct).count() as f64 / pairs.len() as f64;
    Ok(ZeroShotReport { threshold, accuracy, pairs })
}

/// Fraction of `(image, transformed image, true delta)` pairs whose
/// estimated amount falls on the same side of the threshold as the truth.
pub fn zero_shot_eval(
    net: &Network,
    model: &GeneratorModel,
    test_pairs: &[(Image, Image, f64)],
    cfg: &ZeroShotConfig,
    defaults: &[FlowDefaults],
) -> Result<ZeroShotReport> {
    let matcher = DeltaMatcher::new(model, cfg)?;
    let records = test_pairs
        .iter()
        .map(|p| zero_shot_pair(net, &matcher, p, defaults))
        .collect::<Result<Vec<_>>>()?;
    report_from_records(cfg.threshold, records)
}
