use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowgen::convnet::{accuracy, train, EpochStats, FeatureStack, Network, TrainConfig, Weights};
use flowgen::flowviz::{channel_grid_png, flow_color_png};
use flowgen::genlearn::{
    fit_generator, fit_pca, read_stacks, synth_dense, synth_generator, write_stacks, FlowStack, GeneratorModel,
    PairRecord, Solver, StackSidecar,
};
use flowgen::imageops::{
    apply_transform, make_dataset, read_pgm, write_pgm, wrap_degrees, Image, LabeledImage, ShapeParams,
    TransformKind, TransformSpec,
};
use flowgen::seeding;
use flowgen::tasks::{
    feature_flow_stack, report_from_records, train_augmented, zero_shot_pair, AugmentConfig, Augmenter,
    DeltaMatcher, GeneratorChoice, ZeroShotRecord,
};
use flowgen::warp::{apply_flow, roundtrip_error, roundtrip_error_interior};

use crate::artifacts::{features_from_bytes, features_to_bytes, read_bytes, read_json, require, StageDir, STAMP};
use crate::config::Pipeline;
use crate::error::{CliError, Result};
use crate::report;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainBase,
    Extract,
    Flow,
    Fit,
    Synth,
    ZeroShot,
    TrainAug,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainBase,
        Stage::Extract,
        Stage::Flow,
        Stage::Fit,
        Stage::Synth,
        Stage::ZeroShot,
        Stage::TrainAug,
        Stage::Report,
    ];

    /// Subcommand name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBase => "train-base",
            Stage::Extract => "extract",
            Stage::Flow => "flow",
            Stage::Fit => "fit",
            Stage::Synth => "synth",
            Stage::ZeroShot => "zeroshot",
            Stage::TrainAug => "train-aug",
            Stage::Report => "report",
        }
    }

    /// Output directory under the run root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::TrainBase => "model",
            Stage::Extract => "features",
            Stage::Flow => "flows",
            Stage::Fit => "models",
            Stage::Synth => "synth",
            Stage::ZeroShot => "zeroshot",
            Stage::TrainAug => "augment",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn needs(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::TrainBase => &[Stage::GenData],
            Stage::Extract => &[Stage::GenData, Stage::TrainBase],
            Stage::Flow => &[Stage::Extract],
            Stage::Fit => &[Stage::Flow],
            Stage::Synth => &[Stage::TrainBase, Stage::Fit],
            Stage::ZeroShot => &[Stage::TrainBase, Stage::Fit],
            Stage::TrainAug => &[Stage::GenData, Stage::TrainBase, Stage::Fit],
            Stage::Report => &[
                Stage::GenData,
                Stage::TrainBase,
                Stage::Flow,
                Stage::Fit,
                Stage::Synth,
                Stage::ZeroShot,
                Stage::TrainAug,
            ],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a stage needs to run.
#[derive(Clone, Debug)]
pub struct Context {
    pub pipeline: Pipeline,
    pub out: PathBuf,
    pub force: bool,
    /// Extra amounts `synth` evaluates every family at.
    pub synth_deltas: Vec<f64>,
    /// Have `synth` write hook-layer channel grids before and after each generator.
    pub dump_warps: bool,
}

impl Context {
    pub fn new(pipeline: Pipeline, out: PathBuf) -> Self {
        Self {
            pipeline,
            out,
            force: false,
            synth_deltas: Vec::new(),
            dump_warps: false,
        }
    }

    pub(crate) fn create_stage(&self, stage: Stage) -> Result<StageDir> {
        for &up in stage.needs() {
            require(&self.out, up.dir(), stage.name(), up.name(), &self.pipeline.hash)?;
        }
        StageDir::create(&self.out, stage.dir(), stage.name(), self.force)
    }

    pub(crate) fn finish_stage(&self, dir: StageDir) -> Result<PathBuf> {
        dir.finish(&self.pipeline.hash, self.pipeline.seed())
    }

    pub fn stage_path(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir())
    }

    /// Whether `stage` finished under the current config.
    pub fn is_current(&self, stage: Stage) -> bool {
        let path = self.stage_path(stage).join(STAMP);
        read_json::<crate::artifacts::StageStamp>(&path).is_ok_and(|s| s.config_hash == self.pipeline.hash)
    }
}

pub fn run_stage(ctx: &Context, stage: Stage) -> Result<PathBuf> {
    match stage {
        Stage::GenData => gen_data(ctx),
        Stage::TrainBase => train_base(ctx),
        Stage::Extract => extract(ctx),
        Stage::Flow => flow(ctx),
        Stage::Fit => fit(ctx),
        Stage::Synth => synth(ctx),
        Stage::ZeroShot => zeroshot(ctx),
        Stage::TrainAug => train_aug(ctx),
        Stage::Report => report::build(ctx),
    }
}

/// Runs every stage in order. Stages already finished under the current
/// config are kept unless `ctx.force` is set.
pub fn run_all(ctx: &Context) -> Result<()> {
    for stage in Stage::ALL {
        if !ctx.force && ctx.is_current(stage) {
            eprintln!("[{stage}] up to date");
            continue;
        }
        let ctx = Context { force: true, ..ctx.clone() };
        let path = run_stage(&ctx, stage)?;
        eprintln!("[{stage}] wrote {}", path.display());
    }
    Ok(())
}

// ---- dataset ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub label: usize,
    pub params: ShapeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub image_count: usize,
    pub image_size: usize,
    pub dataset_seed: u64,
    /// Image pairs available for each rotation amount of the delta grid.
    pub rotation_pairs_per_delta: usize,
    pub rotation_pairs: usize,
    /// Pair count of each configured family.
    pub family_pairs: BTreeMap<String, usize>,
    pub images: Vec<ManifestEntry>,
}

fn gen_data(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let spec = p.dataset_spec();
    let images = make_dataset(&spec)?;
    let mut dir = ctx.create_stage(Stage::GenData)?;
    let mut entries = Vec::with_capacity(images.len());
    for (id, li) in images.iter().enumerate() {
        let file = format!("images/img_{id:04}.pgm");
        dir.write(&file, &write_pgm(&li.image)?)?;
        entries.push(ManifestEntry {
            id,
            file,
            label: li.label,
            params: li.params.clone(),
        });
    }
    let manifest = DataManifest {
        image_count: spec.image_count,
        image_size: spec.image_size,
        dataset_seed: spec.seed,
        rotation_pairs_per_delta: spec.pairs_per_delta(),
        rotation_pairs: spec.pairs_per_delta() * spec.delta_grid.len(),
        family_pairs: p
            .config
            .families
            .iter()
            .map(|f| (f.kind.name().to_string(), family_pairs(p, f.kind, spec.image_count).len()))
            .collect(),
        images: entries,
    };
    dir.write_json("manifest.json", &manifest)?;
    ctx.finish_stage(dir)
}

pub fn load_manifest(ctx: &Context) -> Result<DataManifest> {
    read_json(&ctx.stage_path(Stage::GenData).join("manifest.json"))
}

/// Dataset images as stored, with their labels.
pub fn load_images(ctx: &Context) -> Result<Vec<(Image, usize)>> {
    let data = ctx.stage_path(Stage::GenData);
    load_manifest(ctx)?
        .images
        .iter()
        .map(|e| Ok((read_pgm(&read_bytes(&data.join(&e.file))?)?, e.label)))
        .collect()
}

/// Held-out images, rendered in memory from their own seed.
pub fn heldout_images(p: &Pipeline) -> Result<Vec<LabeledImage>> {
    Ok(make_dataset(&p.heldout_spec())?)
}

fn transformed(image: &Image, t: &TransformSpec) -> Result<Image> {
    if t.amount == t.kind.identity_amount() {
        Ok(image.clone())
    } else {
        Ok(apply_transform(image, t)?)
    }
}

fn rotation(angle: f64) -> TransformSpec {
    TransformSpec::new(TransformKind::Rotation, wrap_degrees(angle))
}

/// Views the base network trains on: every grid rotation, scale and shift.
fn training_views(p: &Pipeline) -> Vec<TransformSpec> {
    let d = &p.config.dataset;
    let mut views: Vec<TransformSpec> = d.angle_grid.iter().map(|&a| rotation(a)).collect();
    views.extend(d.scale_grid.iter().map(|&s| TransformSpec::new(TransformKind::Scale, s)));
    for kind in [TransformKind::TranslateX, TransformKind::TranslateY] {
        views.extend(d.translate_grid.iter().map(|&t| TransformSpec::new(kind, t)));
    }
    views
}

pub fn training_samples(ctx: &Context) -> Result<Vec<(Image, usize)>> {
    let views = training_views(&ctx.pipeline);
    let mut out = Vec::new();
    for (image, label) in load_images(ctx)? {
        for t in &views {
            out.push((transformed(&image, t)?, label));
        }
    }
    Ok(out)
}

// ---- base network ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseHistory {
    pub samples: usize,
    pub epochs: Vec<EpochStats>,
    pub train_accuracy: f64,
}

fn train_config(p: &Pipeline, epochs: usize, seed: u64) -> TrainConfig {
    let t = &p.config.train;
    TrainConfig {
        epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        momentum: t.momentum,
        seed,
    }
}

fn train_base(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let mut dir = ctx.create_stage(Stage::TrainBase)?;
    let samples = training_samples(ctx)?;
    let init = Network::init(p.network.clone(), p.sub_seed("init"))?;
    let cfg = train_config(p, p.config.train.epochs, p.sub_seed("train"));
    let (net, epochs) = train(&init, &samples, &cfg, None)?;
    dir.write("base.cnw", &net.weights().to_bytes())?;
    let history = BaseHistory {
        samples: samples.len(),
        epochs,
        train_accuracy: accuracy(&net, &samples)?,
    };
    dir.write_json("history.json", &history)?;
    ctx.finish_stage(dir)
}

pub fn load_network(ctx: &Context) -> Result<Network> {
    let bytes = read_bytes(&ctx.stage_path(Stage::TrainBase).join("base.cnw"))?;
    let weights = Weights::read_from(bytes.as_slice())?;
    Ok(Network::new(ctx.pipeline.network.clone(), weights)?)
}

// ---- pairs and features ----

/// One pair of a family: the image, the starting amount and the change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub image_id: usize,
    pub theta_init: f64,
    pub delta: f64,
}

impl PairMeta {
    /// Transforms producing the source and destination images.
    pub fn endpoints(&self, kind: TransformKind) -> (TransformSpec, TransformSpec) {
        match kind {
            TransformKind::Rotation => (rotation(self.theta_init), rotation(self.theta_init + self.delta)),
            _ => (
                TransformSpec::new(kind, kind.identity_amount()),
                TransformSpec::new(kind, self.delta),
            ),
        }
    }
}

/// Image-major list of the pairs of one family.
pub fn family_pairs(p: &Pipeline, kind: TransformKind, image_count: usize) -> Vec<PairMeta> {
    let deltas = p.family_deltas(kind);
    let starts = match kind {
        TransformKind::Rotation => p.config.dataset.angle_grid.clone(),
        _ => vec![kind.identity_amount()],
    };
    let mut out = Vec::new();
    for image_id in 0..image_count {
        for &theta_init in &starts {
            for &delta in &deltas {
                out.push(PairMeta { image_id, theta_init, delta });
            }
        }
    }
    out
}

pub fn feature_key(t: &TransformSpec) -> String {
    if t.amount == t.kind.identity_amount() {
        "identity".into()
    } else {
        format!("{}_{}", t.kind.name(), t.amount)
    }
}

/// Every transform some family pair starts or ends at, by feature key.
fn needed_transforms(p: &Pipeline) -> BTreeMap<String, TransformSpec> {
    let mut out = BTreeMap::new();
    for f in &p.config.families {
        for pair in family_pairs(p, f.kind, 1) {
            let (a, b) = pair.endpoints(f.kind);
            out.insert(feature_key(&a), a);
            out.insert(feature_key(&b), b);
        }
    }
    out
}

fn feature_file(image_id: usize, key: &str) -> String {
    format!("img_{image_id:04}/{key}.fst")
}

fn extract(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let mut dir = ctx.create_stage(Stage::Extract)?;
    let net = load_network(ctx)?;
    let images = load_images(ctx)?;
    let transforms: Vec<(String, TransformSpec)> = needed_transforms(p).into_iter().collect();
    eprintln!("[extract] {} images x {} transforms", images.len(), transforms.len());
    for (id, (image, _)) in images.iter().enumerate() {
        let files = transforms
            .par_iter()
            .map(|(key, t)| {
                let features = net.extract_features(&transformed(image, t)?)?;
                Ok((feature_file(id, key), features_to_bytes(&features)))
            })
            .collect::<Result<Vec<_>>>()?;
        for (rel, bytes) in files {
            dir.write(&rel, &bytes)?;
        }
    }
    dir.write_json("keys.json", &transforms.iter().map(|(k, _)| k).collect::<Vec<_>>())?;
    ctx.finish_stage(dir)
}

fn load_features(root: &Path, image_id: usize, t: &TransformSpec) -> Result<FeatureStack> {
    features_from_bytes(&read_bytes(&root.join(feature_file(image_id, &feature_key(t))))?)
}

// ---- flows ----

/// Sidecar of `flows/<family>.ffg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSidecar {
    pub kind: TransformKind,
    #[serde(flatten)]
    pub stacks: StackSidecar,
    pub pairs: Vec<PairMeta>,
}

fn flow(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let mut dir = ctx.create_stage(Stage::Flow)?;
    let features = ctx.stage_path(Stage::Extract);
    let image_count = load_manifest(ctx)?.image_count;
    for family in &p.config.families {
        let pairs = family_pairs(p, family.kind, image_count);
        eprintln!("[flow] {}: {} pairs", family.kind, pairs.len());
        let stacks = pairs
            .par_iter()
            .map(|pair| {
                let (a, b) = pair.endpoints(family.kind);
                let src = load_features(&features, pair.image_id, &a)?;
                let dst = load_features(&features, pair.image_id, &b)?;
                Ok(feature_flow_stack(&src, &dst, &p.config.flow)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let (bytes, stacks) = write_stacks(&stacks)?;
        dir.write(&format!("{}.ffg", family.kind), &bytes)?;
        dir.write_json(
            &format!("{}.json", family.kind),
            &FlowSidecar {
                kind: family.kind,
                stacks,
                pairs,
            },
        )?;
    }
    ctx.finish_stage(dir)
}

/// Observed pairs of one family.
pub fn load_pairs(ctx: &Context, kind: TransformKind) -> Result<Vec<PairRecord>> {
    let root = ctx.stage_path(Stage::Flow);
    let sidecar: FlowSidecar = read_json(&root.join(format!("{kind}.json")))?;
    let stacks = read_stacks(&read_bytes(&root.join(format!("{kind}.ffg")))?, &sidecar.stacks)?;
    Ok(sidecar
        .pairs
        .into_iter()
        .zip(stacks)
        .map(|(m, flow)| PairRecord {
            image_id: m.image_id,
            theta_init: m.theta_init,
            delta: m.delta,
            flow,
        })
        .collect())
}

// ---- generator fitting ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaFit {
    pub delta: f64,
    pub pairs: usize,
    /// Mean of `|G[delta] - V| / |V|` over pairs with nonzero flow.
    pub relative_error: Option<f64>,
    /// Mean observed flow norm.
    pub mean_flow_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyFit {
    pub kind: TransformKind,
    pub reference_delta: f64,
    pub pairs: usize,
    pub pca_rows: usize,
    pub k: usize,
    pub eigenvalues: Vec<f32>,
    /// Share of the reference flows' variance captured by the K components.
    pub explained_fraction: f64,
    pub deltas: Vec<DeltaFit>,
}

fn family_fit(model: &GeneratorModel, pairs: &[PairRecord], rows: &[FlowStack]) -> FamilyFit {
    let basis = &model.basis;
    let total: f64 = rows
        .iter()
        .map(|r| {
            r.data()
                .iter()
                .zip(&basis.mean)
                .map(|(&x, &m)| (f64::from(x) - f64::from(m)).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (rows.len().max(2) - 1) as f64;
    let explained: f64 = basis.eigenvalues.iter().map(|&l| f64::from(l)).sum();
    let mut deltas: Vec<f64> = pairs.iter().map(|p| p.delta).collect();
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();
    let deltas = deltas
        .into_iter()
        .map(|delta| {
            let g = synth_dense(model, delta);
            let group: Vec<&PairRecord> = pairs.iter().filter(|p| p.delta == delta).collect();
            let errors: Vec<f64> = group
                .iter()
                .filter(|p| p.flow.norm() > 0.0)
                .map(|p| {
                    let diff: f64 = g.iter().zip(p.flow.data()).map(|(&a, &b)| (a - f64::from(b)).powi(2)).sum();
                    diff.sqrt() / p.flow.norm()
                })
                .collect();
            DeltaFit {
                delta,
                pairs: group.len(),
                relative_error: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
                mean_flow_norm: group.iter().map(|p| p.flow.norm()).sum::<f64>() / group.len() as f64,
            }
        })
        .collect();
    FamilyFit {
        kind: model.transform_kind,
        reference_delta: model.reference_delta,
        pairs: pairs.len(),
        pca_rows: rows.len(),
        k: basis.k(),
        eigenvalues: basis.eigenvalues.clone(),
        explained_fraction: if total > 0.0 { explained / total } else { 1.0 },
        deltas,
    }
}

fn fit(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let mut dir = ctx.create_stage(Stage::Fit)?;
    let mut summary = Vec::new();
    for family in &p.config.families {
        let pairs = load_pairs(ctx, family.kind)?;
        let rows: Vec<FlowStack> = pairs
            .iter()
            .filter(|r| r.delta == family.reference_delta)
            .map(|r| r.flow.clone())
            .collect();
        let basis = fit_pca(&rows, p.config.pca_k)?;
        let model = fit_generator(&pairs, &basis, family.kind, family.reference_delta, Solver::Strict)?;
        eprintln!("[fit] {}: {} pairs, K = {}", family.kind, pairs.len(), basis.k());
        dir.write(&format!("{}.gen", family.kind), &model.to_bytes()?)?;
        summary.push(family_fit(&model, &pairs, &rows));
    }
    dir.write_json("fit.json", &summary)?;
    ctx.finish_stage(dir)
}

pub fn load_model(ctx: &Context, kind: TransformKind) -> Result<GeneratorModel> {
    let bytes = read_bytes(&ctx.stage_path(Stage::Fit).join(format!("{kind}.gen")))?;
    Ok(GeneratorModel::read_from(bytes.as_slice())?)
}

// ---- synthesis ----

/// Sidecar of a synthesized generator stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSidecar {
    pub name: String,
    pub family: TransformKind,
    pub delta: f64,
    #[serde(flatten)]
    pub stacks: StackSidecar,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTripStats {
    pub rms: f64,
    pub mad: f64,
    /// Share of cells that count as interior.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRoundTrip {
    pub name: String,
    pub family: TransformKind,
    pub delta: f64,
    /// Cells whose round trip stays in-grid; the tracked metric.
    pub interior: RoundTripStats,
    pub full: RoundTripStats,
    pub layers: Vec<(String, RoundTripStats)>,
}

/// Pools per-tensor metrics weighted by their element counts.
#[derive(Default)]
struct Pool {
    sq: f64,
    abs: f64,
    n: f64,
    cells: f64,
    total_cells: f64,
}

impl Pool {
    fn add(&mut self, rms: f64, mad: f64, cells: usize, channels: usize, total_cells: usize) {
        let n = (cells * channels) as f64;
        self.sq += rms * rms * n;
        self.abs += mad * n;
        self.n += n;
        self.cells += cells as f64;
        self.total_cells += total_cells as f64;
    }

    fn stats(&self) -> RoundTripStats {
        RoundTripStats {
            rms: (self.sq / self.n).sqrt(),
            mad: self.abs / self.n,
            coverage: self.cells / self.total_cells,
        }
    }
}

fn roundtrip_stats(name: &str, family: TransformKind, delta: f64, stack: &FlowStack, features: &[FeatureStack]) -> Result<GeneratorRoundTrip> {
    let fields = stack.unstack();
    let (mut interior, mut full) = (Pool::default(), Pool::default());
    let mut layers = Vec::new();
    for (tap, field) in fields.iter().enumerate() {
        let mut layer = Pool::default();
        for fs in features {
            let (layer_name, t) = &fs.layers[tap];
            let (c, h, w) = t.dims();
            if let Ok(rt) = roundtrip_error_interior(t, field) {
                interior.add(rt.rms, rt.mad, rt.cells, c, h * w);
                layer.add(rt.rms, rt.mad, rt.cells, c, h * w);
            } else {
                // no interior cell at all
                interior.add(0.0, 0.0, 0, c, h * w);
                layer.add(0.0, 0.0, 0, c, h * w);
            }
            let rt = roundtrip_error(t, field)?;
            full.add(rt.rms, rt.mad, rt.cells, c, h * w);
            if layers.len() == tap {
                layers.push((layer_name.clone(), RoundTripStats::default()));
            }
        }
        layers[tap].1 = layer.stats();
    }
    Ok(GeneratorRoundTrip {
        name: name.to_string(),
        family,
        delta,
        interior: interior.stats(),
        full: full.stats(),
        layers,
    })
}

fn png_cell(width: usize) -> usize {
    (128 / width.max(1)).max(1)
}

fn synth(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let mut dir = ctx.create_stage(Stage::Synth)?;
    let net = load_network(ctx)?;
    let taps: Vec<String> = p.network.taps.iter().map(|t| t.name.clone()).collect();
    let heldout = heldout_images(p)?;
    let features = heldout[..p.config.augment.roundtrip_images]
        .iter()
        .map(|li| Ok(net.extract_features(&li.image)?))
        .collect::<Result<Vec<_>>>()?;
    let mut models = BTreeMap::new();
    for f in &p.config.families {
        models.insert(f.kind, load_model(ctx, f.kind)?);
    }
    let mut roundtrips = Vec::new();
    for g in &p.config.augment.generators {
        let stack = synth_generator(&models[&g.family], g.delta)?;
        let (bytes, stacks) = write_stacks(std::slice::from_ref(&stack))?;
        dir.write(&format!("generators/{}.ffg", g.name), &bytes)?;
        dir.write_json(
            &format!("generators/{}.json", g.name),
            &GeneratorSidecar {
                name: g.name.clone(),
                family: g.family,
                delta: g.delta,
                stacks,
            },
        )?;
        for (tap, field) in taps.iter().zip(stack.unstack()) {
            let png = flow_color_png(&field, None, png_cell(field.width()))?;
            dir.write(&format!("generators/{}_{tap}.png", g.name), &png)?;
        }
        roundtrips.push(roundtrip_stats(&g.name, g.family, g.delta, &stack, &features)?);
        if ctx.dump_warps {
            let tap = p.network.tap_index(&p.config.augment.hook_layer)?;
            let field = &stack.unstack()[tap];
            if let Some(fs) = features.first() {
                let before = &fs.layers[tap].1;
                dir.write(&format!("warps/{}_before.png", g.name), &channel_grid_png(before)?)?;
                dir.write(&format!("warps/{}_after.png", g.name), &channel_grid_png(&apply_flow(before, field)?)?)?;
            }
        }
    }
    dir.write_json("roundtrip.json", &roundtrips)?;
    for &delta in &ctx.synth_deltas {
        for (kind, model) in &models {
            let stack = synth_generator(model, delta)?;
            let (bytes, stacks) = write_stacks(std::slice::from_ref(&stack))?;
            let name = format!("{kind}_{delta}");
            dir.write(&format!("deltas/{name}.ffg"), &bytes)?;
            dir.write_json(
                &format!("deltas/{name}.json"),
                &GeneratorSidecar {
                    name: name.clone(),
                    family: *kind,
                    delta,
                    stacks,
                },
            )?;
        }
    }
    ctx.finish_stage(dir)
}

/// Reads a stack written by `synth`, from `generators/` or `deltas/`.
pub fn load_synth_stack(ctx: &Context, rel: &str) -> Result<(GeneratorSidecar, FlowStack)> {
    let root = ctx.stage_path(Stage::Synth);
    let sidecar: GeneratorSidecar = read_json(&root.join(format!("{rel}.json")))?;
    let mut stacks = read_stacks(&read_bytes(&root.join(format!("{rel}.ffg")))?, &sidecar.stacks)?;
    let stack = stacks.pop().ok_or_else(|| CliError::Config(format!("{rel}.ffg holds no stack")))?;
    Ok((sidecar, stack))
}

// ---- zero-shot ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaAccuracy {
    pub delta: f64,
    pub pairs: usize,
    pub accuracy: f64,
    pub mean_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSummary {
    pub threshold: f64,
    pub accuracy: f64,
    pub per_delta: Vec<DeltaAccuracy>,
    pub pairs: Vec<ZeroShotPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotPair {
    pub image_id: usize,
    pub theta_init: f64,
    #[serde(flatten)]
    pub record: ZeroShotRecord,
}

/// Rotation pairs on held-out images with amounts from `test_deltas`.
pub fn zeroshot_pairs(p: &Pipeline, heldout: &[LabeledImage]) -> Vec<(usize, f64, f64)> {
    let z = &p.config.zeroshot;
    let step = p.config.heldout.angle_step;
    let steps = (360.0 / step).round() as usize;
    let mut rng = seeding::rng(p.sub_seed("zeroshot"));
    (0..z.test_pairs)
        .map(|i| {
            let theta = step * rng.gen_range(0..steps) as f64;
            (i % heldout.len(), theta, z.test_deltas[i % z.test_deltas.len()])
        })
        .collect()
}

fn zeroshot(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let mut dir = ctx.create_stage(Stage::ZeroShot)?;
    let net = load_network(ctx)?;
    let model = load_model(ctx, TransformKind::Rotation)?;
    let matcher = DeltaMatcher::new(&model, &p.config.zeroshot.matching)?;
    let heldout = heldout_images(p)?;
    let pairs = zeroshot_pairs(p, &heldout);
    eprintln!("[zeroshot] {} pairs", pairs.len());
    let records = pairs
        .par_iter()
        .map(|&(id, theta, delta)| {
            let image = &heldout[id].image;
            let pair = (
                transformed(image, &rotation(theta))?,
                transformed(image, &rotation(theta + delta))?,
                delta,
            );
            Ok(zero_shot_pair(&net, &matcher, &pair, &p.config.flow)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let threshold = p.config.zeroshot.matching.threshold;
    let report = report_from_records(threshold, records)?;
    let mut per_delta = Vec::new();
    for &delta in &p.config.zeroshot.test_deltas {
        let group: Vec<&ZeroShotRecord> = report.pairs.iter().filter(|r| r.true_delta == delta).collect();
        if group.is_empty() || per_delta.iter().any(|d: &DeltaAccuracy| d.delta == delta) {
            continue;
        }
        let n = group.len() as f64;
        per_delta.push(DeltaAccuracy {
            delta,
            pairs: group.len(),
            accuracy: group.iter().filter(|r| r.correct).count() as f64 / n,
            mean_estimate: group.iter().map(|r| r.estimated_delta).sum::<f64>() / n,
        });
    }
    let summary = ZeroShotSummary {
        threshold,
        accuracy: report.accuracy,
        per_delta,
        pairs: pairs
            .iter()
            .zip(report.pairs)
            .map(|(&(image_id, theta_init, _), record)| ZeroShotPair {
                image_id,
                theta_init,
                record,
            })
            .collect(),
    };
    dir.write_json("zeroshot_report.json", &summary)?;
    ctx.finish_stage(dir)
}

// ---- augmentation ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub epochs: Vec<EpochStats>,
    /// `None` when training diverged.
    pub test_accuracy: Option<f64>,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train_seed: u64,
    pub selection_seed: u64,
    pub baseline: ArmReport,
    pub augmented: ArmReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub hook_layer: String,
    pub apply_probability: f64,
    pub generators: Vec<String>,
    pub epochs: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Test accuracy of the base network both arms start from.
    pub base_test_accuracy: f64,
    pub runs: Vec<SeedRun>,
    pub median_baseline: Option<f64>,
    pub median_augmented: Option<f64>,
    pub all_finite: bool,
}

/// Held-out images under random rotations, scalings and shifts.
pub fn augment_test_split(p: &Pipeline, heldout: &[LabeledImage]) -> Result<Vec<(Image, usize)>> {
    let h = &p.config.heldout;
    let steps = (360.0 / h.angle_step).round() as usize;
    let mut rng = seeding::rng(p.sub_seed("augment-test"));
    let mut kinds = vec![TransformKind::Rotation];
    if !h.scales.is_empty() {
        kinds.push(TransformKind::Scale);
    }
    if !h.shifts.is_empty() {
        kinds.push(TransformKind::TranslateX);
    }
    let mut out = Vec::new();
    for li in heldout {
        for view in 0..p.config.augment.test_views {
            let t = match kinds[view % kinds.len()] {
                TransformKind::Rotation => rotation(h.angle_step * rng.gen_range(0..steps) as f64),
                TransformKind::Scale => TransformSpec::new(TransformKind::Scale, *h.scales.choose(&mut rng).unwrap()),
                _ => {
                    let axis = if rng.gen::<bool>() {
                        TransformKind::TranslateX
                    } else {
                        TransformKind::TranslateY
                    };
                    TransformSpec::new(axis, *h.shifts.choose(&mut rng).unwrap())
                }
            };
            out.push((transformed(&li.image, &t)?, li.label));
        }
    }
    Ok(out)
}

fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().collect::<Option<Vec<_>>>()?;
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn arm(result: flowgen::Result<(Network, Vec<EpochStats>)>, test: &[(Image, usize)]) -> Result<ArmReport> {
    match result {
        Ok((net, epochs)) => Ok(ArmReport {
            finite: epochs.iter().all(|e| e.loss.is_finite()),
            test_accuracy: Some(accuracy(&net, test)?),
            epochs,
        }),
        Err(flowgen::Error::TrainingDiverged { .. }) => Ok(ArmReport {
            epochs: Vec::new(),
            test_accuracy: None,
            finite: false,
        }),
        Err(e) => Err(e.into()),
    }
}

fn train_aug(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let a = &p.config.augment;
    let mut dir = ctx.create_stage(Stage::TrainAug)?;
    let base = load_network(ctx)?;
    let samples = training_samples(ctx)?;
    let test = augment_test_split(p, &heldout_images(p)?)?;
    let mut models = BTreeMap::new();
    for f in &p.config.families {
        models.insert(f.kind, load_model(ctx, f.kind)?);
    }
    let generators: Vec<GeneratorChoice> = a
        .generators
        .iter()
        .map(|g| GeneratorChoice {
            name: g.name.clone(),
            model: models[&g.family].clone(),
            delta: g.delta,
        })
        .collect();
    let jobs: Vec<(u64, bool)> = a.seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    eprintln!("[train-aug] {} runs of {} epochs on {} samples", jobs.len(), a.epochs, samples.len());
    let arms = jobs
        .par_iter()
        .map(|&(seed, augmented)| {
            let cfg = train_config(p, a.epochs, seeding::indexed_seed(p.sub_seed("train-aug"), seed));
            let result = if augmented {
                let augmenter = Augmenter::new(
                    &AugmentConfig {
                        generators: generators.clone(),
                        hook_layer: a.hook_layer.clone(),
                        selection_seed: seeding::indexed_seed(p.sub_seed("augment"), seed),
                        apply_probability: a.apply_probability,
                    },
                    &p.network,
                )?;
                train_augmented(&base, &samples, &cfg, &augmenter)
            } else {
                train(&base, &samples, &cfg, None)
            };
            arm(result, &test)
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<SeedRun> = a
        .seeds
        .iter()
        .zip(arms.chunks_exact(2))
        .map(|(&seed, pair)| SeedRun {
            seed,
            train_seed: seeding::indexed_seed(p.sub_seed("train-aug"), seed),
            selection_seed: seeding::indexed_seed(p.sub_seed("augment"), seed),
            baseline: pair[0].clone(),
            augmented: pair[1].clone(),
        })
        .collect();
    let report = AugmentReport {
        hook_layer: a.hook_layer.clone(),
        apply_probability: a.apply_probability,
        generators: a.generators.iter().map(|g| g.name.clone()).collect(),
        epochs: a.epochs,
        train_samples: samples.len(),
        test_samples: test.len(),
        base_test_accuracy: accuracy(&base, &test)?,
        median_baseline: median(&runs.iter().map(|r| r.baseline.test_accuracy).collect::<Vec<_>>()),
        median_augmented: median(&runs.iter().map(|r| r.augmented.test_accuracy).collect::<Vec<_>>()),
        all_finite: runs.iter().all(|r| r.baseline.finite && r.augmented.finite),
        runs,
    };
    dir.write_json("augment_report.json", &report)?;
    ctx.finish_stage(dir)
}
