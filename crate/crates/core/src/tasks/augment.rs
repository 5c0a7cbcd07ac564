use rand::Rng;

use crate::convnet::{train, BatchHook, EpochStats, NetworkSpec, Network, TrainConfig, WarpHook};
use crate::error::{Error, Result};
use crate::featflow::FlowField;
use crate::genlearn::{synth_generator, GeneratorModel};
use crate::imageops::Image;
use crate::seeding;

/// One deployable generator: a fitted family evaluated at a fixed amount.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorChoice {
    pub name: String,
    pub model: GeneratorModel,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub generators: Vec<GeneratorChoice>,
    pub hook_layer: String,
    pub selection_seed: u64,
    pub apply_probability: f64,
}

/// Per-batch generator selection with the hook-layer fields synthesized once.
#[derive(Clone, Debug)]
pub struct Augmenter {
    hook_layer: String,
    names: Vec<String>,
    fields: Vec<FlowField>,
    zero: FlowField,
    selection_seed: u64,
    apply_probability: f64,
}

impl Augmenter {
    pub fn new(cfg: &AugmentConfig, spec: &NetworkSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.apply_probability) {
            return Err(Error::invalid(format!("apply probability {} outside [0, 1]", cfg.apply_probability)));
        }
        if cfg.generators.is_empty() && cfg.apply_probability > 0.0 {
            return Err(Error::invalid("no generators to apply"));
        }
        let tap = spec.tap_index(&cfg.hook_layer)?;
        let (_, h, w) = spec.tap_dims()?[tap];
        let fields = cfg
            .generators
            .iter()
            .map(|g| {
                let stack = synth_generator(&g.model, g.delta)?;
                let field = stack.unstack().into_iter().nth(tap).filter(|f| (f.height(), f.width()) == (h, w));
                field.ok_or_else(|| {
                    Error::shape(format!("generator {} has no {h}x{w} field for tap {}", g.name, cfg.hook_layer))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hook_layer: cfg.hook_layer.clone(),
            names: cfg.generators.iter().map(|g| g.name.clone()).collect(),
            fields,
            zero: FlowField::zeros(h, w),
            selection_seed: cfg.selection_seed,
            apply_probability: cfg.apply_probability,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn fields(&self) -> &[FlowField] {
        &self.fields
    }

    /// Index of the generator used for `batch_index`, if any. A pure function
    /// of the selection seed and the index.
    pub fn select(&self, batch_index: usize) -> Option<usize> {
        if self.fields.is_empty() {
            return None;
        }
        let mut rng = seeding::rng(seeding::indexed_seed(self.selection_seed, batch_index as u64));
        let apply = rng.gen::<f64>() < self.apply_probability;
        let pick = rng.gen_range(0..self.fields.len());
        apply.then_some(pick)
    }

    /// Layer name and field for `batch_index`; the zero field when no
    /// generator is applied.
    pub fn augment_hook(&self, batch_index: usize) -> (String, FlowField) {
        let field = match self.select(batch_index) {
            Some(i) => self.fields[i].clone(),
            None => self.zero.clone(),
        };
        (self.hook_layer.clone(), field)
    }
}

impl BatchHook for Augmenter {
    fn hook_for_batch(&self, batch_index: usize) -> Result<Option<WarpHook>> {
        // a zero field is a no-op, so skip the hook entirely
        Ok(self.select(batch_index).map(|i| WarpHook {
            layer: self.hook_layer.clone(),
            field: self.fields[i].clone(),
        }))
    }
}

/// [`train`] with one generator warp per batch at the hook layer.
pub fn train_augmented(
    net: &Network,
    samples: &[(Image, usize)],
    config: &TrainConfig,
    augmenter: &Augmenter,
) -> Result<(Network, Vec<EpochStats>)> {
    net.spec().tap_index(&augmenter.hook_layer)?;
    train(net, samples, config, Some(augmenter))
}
