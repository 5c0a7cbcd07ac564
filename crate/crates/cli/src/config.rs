use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowgen::convnet::NetworkSpec;
use flowgen::featflow::FlowDefaults;
use flowgen::imageops::{DatasetSpec, TransformKind};
use flowgen::tasks::ZeroShotConfig;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "FLOWGEN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// A transformation family and the amount its basis is learned at. Its pairs
/// come from the matching dataset grid: rotations start at every entry of
/// `angle_grid` and add every `delta_grid` entry; the other families start
/// from the untransformed image and use `scale_grid` or `translate_grid`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub kind: TransformKind,
    pub reference_delta: f64,
}

/// Images rendered from a separate seed, used for zero-shot pairs, the
/// augmentation test split and round-trip measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutConfig {
    pub image_count: usize,
    /// Test rotations are multiples of this many degrees.
    pub angle_step: f64,
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSettings {
    #[serde(flatten)]
    pub matching: ZeroShotConfig,
    pub test_pairs: usize,
    pub test_deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSetting {
    pub name: String,
    pub family: TransformKind,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub hook_layer: String,
    pub apply_probability: f64,
    pub generators: Vec<GeneratorSetting>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Transformed views of each held-out image in the test split.
    pub test_views: usize,
    /// Held-out images the round-trip metrics are averaged over.
    pub roundtrip_images: usize,
}

fn default_pca_k() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Network spec JSON, relative to the config file.
    pub network: PathBuf,
    pub dataset: DatasetSpec,
    pub train: TrainSettings,
    /// Flow parameter policy for each tap layer, in tap order.
    pub flow: Vec<FlowDefaults>,
    #[serde(default = "default_pca_k")]
    pub pca_k: usize,
    pub families: Vec<FamilyConfig>,
    pub heldout: HeldoutConfig,
    pub zeroshot: ZeroShotSettings,
    pub augment: AugmentSettings,
    /// Default output directory, relative to the config file; `--out` overrides.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A loaded config with its network spec, effective seed and hash.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub network: NetworkSpec,
    /// Hex SHA-256 of the canonical config (see [`Pipeline::hash_config`]).
    pub hash: String,
    pub config_dir: PathBuf,
}

impl Pipeline {
    /// Reads `path` and the network spec it references. `FLOWGEN_SEED`, if
    /// set, replaces the config seed.
    pub fn load(path: &Path) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|e| CliError::Config(format!("{SEED_ENV}={v}: {e}")))?),
            Err(_) => None,
        };
        Self::load_with_seed(path, env_seed)
    }

    pub fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let config_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let net_path = config_dir.join(&config.network);
        let net_text = std::fs::read_to_string(&net_path).map_err(CliError::io(&net_path))?;
        let network: NetworkSpec = serde_json::from_str(&net_text)
            .map_err(|e| CliError::Config(format!("{}: {e}", net_path.display())))?;
        let hash = Self::hash_config(&config, &network)?;
        let pipeline = Self { config, network, hash, config_dir };
        pipeline.validate()?;
        Ok(pipeline)
    }

    /// SHA-256 of the config as canonical JSON (sorted keys), with the
    /// network path replaced by the spec it names and the output directory
    /// left out, so moving files around does not change the hash.
    pub fn hash_config(config: &PipelineConfig, network: &NetworkSpec) -> Result<String> {
        let mut value = serde_json::to_value(config)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        obj.remove("output_dir");
        obj.insert("network".into(), serde_json::to_value(network)?);
        // serde_json maps are ordered by key, so this text is canonical
        let canonical = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let bad = |m: String| Err(CliError::Config(m));
        self.network.validate()?;
        c.dataset.validate()?;
        if c.pca_k == 0 {
            return bad("pca_k must be at least 1".into());
        }
        if c.flow.len() != self.network.taps.len() {
            return bad(format!("{} flow settings for {} tap layers", c.flow.len(), self.network.taps.len()));
        }
        for f in &c.families {
            let grid = self.family_deltas(f.kind);
            if !grid.contains(&f.reference_delta) {
                return bad(format!("{} reference delta {} is not in its grid {grid:?}", f.kind, f.reference_delta));
            }
        }
        if !c.families.iter().any(|f| f.kind == TransformKind::Rotation) {
            return bad("a rotation family is required for zero-shot evaluation".into());
        }
        for g in &c.augment.generators {
            if !c.families.iter().any(|f| f.kind == g.family) {
                return bad(format!("generator {} uses family {} which is not configured", g.name, g.family));
            }
        }
        c.zeroshot.matching.validate()?;
        if c.heldout.image_count == 0 || !(c.heldout.angle_step > 0.0) {
            return bad("heldout needs images and a positive angle step".into());
        }
        if c.augment.roundtrip_images > c.heldout.image_count {
            return bad("roundtrip_images exceeds heldout.image_count".into());
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn sub_seed(&self, name: &str) -> u64 {
        flowgen::seeding::sub_seed(self.config.seed, name)
    }

    /// The dataset spec with its seed derived from the global seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.sub_seed("dataset"),
            ..self.config.dataset.clone()
        }
    }

    /// Held-out images: every multiple of the angle step and the test scales
    /// and shifts must keep the object in frame.
    pub fn heldout_spec(&self) -> DatasetSpec {
        let h = &self.config.heldout;
        let steps = (360.0 / h.angle_step).round() as usize;
        let mut scales = h.scales.clone();
        scales.sort_by(f64::total_cmp);
        let mut shifts = h.shifts.clone();
        shifts.sort_by(f64::total_cmp);
        DatasetSpec {
            image_count: h.image_count,
            angle_grid: (0..steps).map(|i| i as f64 * h.angle_step).collect(),
            delta_grid: vec![h.angle_step],
            scale_grid: scales,
            translate_grid: shifts,
            seed: self.sub_seed("heldout"),
            ..self.config.dataset.clone()
        }
    }

    pub fn family_deltas(&self, kind: TransformKind) -> Vec<f64> {
        let d = &self.config.dataset;
        match kind {
            TransformKind::Rotation => d.delta_grid.clone(),
            TransformKind::Scale => d.scale_grid.clone(),
            TransformKind::TranslateX | TransformKind::TranslateY => d.translate_grid.clone(),
        }
    }

    pub fn family(&self, kind: TransformKind) -> Option<&FamilyConfig> {
        self.config.families.iter().find(|f| f.kind == kind)
    }

    pub fn default_out(&self) -> PathBuf {
        self.config_dir.join(self.config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out")))
    }
}
