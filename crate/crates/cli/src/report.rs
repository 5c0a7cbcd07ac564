//! Collation of every stage's outputs into `report.json` and `report.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use flowgen::flowviz::flow_color_png;
use flowgen::genlearn::synth_generator;
use flowgen::imageops::TransformKind;

use crate::artifacts::read_json;
use crate::error::Result;
use crate::stages::{
    load_manifest, load_model, load_pairs, load_synth_stack, AugmentReport, BaseHistory, Context, DeltaAccuracy,
    FamilyFit, GeneratorRoundTrip, Stage, ZeroShotSummary,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub image_count: usize,
    pub rotation_pairs_per_delta: usize,
    pub rotation_pairs: usize,
    pub family_pairs: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub samples: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTotals {
    pub threshold: f64,
    pub accuracy: f64,
    pub pairs: usize,
    pub per_delta: Vec<DeltaAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub baseline: Option<f64>,
    pub augmented: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentTotals {
    pub base_test_accuracy: f64,
    pub test_samples: usize,
    pub median_baseline: Option<f64>,
    pub median_augmented: Option<f64>,
    pub all_finite: bool,
    pub seeds: Vec<SeedAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub base: BaseSummary,
    pub families: Vec<FamilyFit>,
    pub roundtrip: Vec<GeneratorRoundTrip>,
    pub zeroshot: ZeroShotTotals,
    pub augment: AugmentTotals,
    /// Flow images written next to the report.
    pub figures: Vec<String>,
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{:.1}%", 100.0 * v))
}

pub fn build(ctx: &Context) -> Result<PathBuf> {
    let p = &ctx.pipeline;
    let mut dir = ctx.create_stage(Stage::Report)?;
    let manifest = load_manifest(ctx)?;
    let history: BaseHistory = read_json(&ctx.stage_path(Stage::TrainBase).join("history.json"))?;
    let families: Vec<FamilyFit> = read_json(&ctx.stage_path(Stage::Fit).join("fit.json"))?;
    let roundtrip: Vec<GeneratorRoundTrip> = read_json(&ctx.stage_path(Stage::Synth).join("roundtrip.json"))?;
    let zs: ZeroShotSummary = read_json(&ctx.stage_path(Stage::ZeroShot).join("zeroshot_report.json"))?;
    let aug: AugmentReport = read_json(&ctx.stage_path(Stage::TrainAug).join("augment_report.json"))?;

    let taps: Vec<String> = p.network.taps.iter().map(|t| t.name.clone()).collect();
    let mut figures = Vec::new();
    let mut figure = |dir: &mut crate::artifacts::StageDir, name: String, png: Vec<u8>| -> Result<()> {
        dir.write(&name, &png)?;
        figures.push(name);
        Ok(())
    };

    // an observed rotation flow next to the generator learned from such flows
    if let Some(rot) = p.family(TransformKind::Rotation) {
        let pairs = load_pairs(ctx, TransformKind::Rotation)?;
        if let Some(pair) = pairs.iter().find(|r| r.delta == rot.reference_delta) {
            for (tap, field) in taps.iter().zip(pair.flow.unstack()) {
                let png = flow_color_png(&field, None, 128 / field.width().max(1))?;
                figure(&mut dir, format!("figures/observed_rotation_{tap}.png"), png)?;
            }
        }
        let model = load_model(ctx, TransformKind::Rotation)?;
        let stack = synth_generator(&model, rot.reference_delta)?;
        for (tap, field) in taps.iter().zip(stack.unstack()) {
            let png = flow_color_png(&field, None, 128 / field.width().max(1))?;
            figure(&mut dir, format!("figures/generator_rotation_{tap}.png"), png)?;
        }
    }
    for g in &p.config.augment.generators {
        let (_, stack) = load_synth_stack(ctx, &format!("generators/{}", g.name))?;
        let hook = p.network.tap_index(&p.config.augment.hook_layer)?;
        let field = &stack.unstack()[hook];
        let png = flow_color_png(field, None, 128 / field.width().max(1))?;
        figure(&mut dir, format!("figures/{}_{}.png", g.name, taps[hook]), png)?;
    }

    let report = Report {
        config_hash: p.hash.clone(),
        seed: p.seed(),
        dataset: DatasetSummary {
            image_count: manifest.image_count,
            rotation_pairs_per_delta: manifest.rotation_pairs_per_delta,
            rotation_pairs: manifest.rotation_pairs,
            family_pairs: manifest.family_pairs,
        },
        base: BaseSummary {
            samples: history.samples,
            epochs: history.epochs.len(),
            final_loss: history.epochs.last().map(|e| e.loss),
            train_accuracy: history.train_accuracy,
        },
        families,
        roundtrip,
        zeroshot: ZeroShotTotals {
            threshold: zs.threshold,
            accuracy: zs.accuracy,
            pairs: zs.pairs.len(),
            per_delta: zs.per_delta,
        },
        augment: AugmentTotals {
            base_test_accuracy: aug.base_test_accuracy,
            test_samples: aug.test_samples,
            median_baseline: aug.median_baseline,
            median_augmented: aug.median_augmented,
            all_finite: aug.all_finite,
            seeds: aug
                .runs
                .iter()
                .map(|r| SeedAccuracy {
                    seed: r.seed,
                    baseline: r.baseline.test_accuracy,
                    augmented: r.augmented.test_accuracy,
                })
                .collect(),
        },
        figures,
    };
    dir.write_json("report.json", &report)?;
    dir.write("report.md", markdown(&report).as_bytes())?;
    ctx.finish_stage(dir)
}

pub fn markdown(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# flowgen report\n");
    let _ = writeln!(s, "Config hash `{}`, seed {}.\n", r.config_hash, r.seed);
    let _ = writeln!(s, "## Data\n");
    let _ = writeln!(
        s,
        "{} images; {} rotation pairs per amount, {} rotation pairs in total.\n",
        r.dataset.image_count, r.dataset.rotation_pairs_per_delta, r.dataset.rotation_pairs
    );
    let _ = writeln!(s, "| family | pairs |\n|---|---|");
    for (k, n) in &r.dataset.family_pairs {
        let _ = writeln!(s, "| {k} | {n} |");
    }
    let _ = writeln!(s, "\n## Base network\n");
    let _ = writeln!(
        s,
        "{} samples, {} epochs, final loss {}, training accuracy {}.\n",
        r.base.samples,
        r.base.epochs,
        r.base.final_loss.map_or_else(|| "n/a".into(), |l| format!("{l:.4}")),
        pct(Some(r.base.train_accuracy))
    );
    let _ = writeln!(s, "## Generator fits\n");
    let _ = writeln!(s, "| family | reference | pairs | K | explained | top eigenvalue |\n|---|---|---|---|---|---|");
    for f in &r.families {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.3} | {:.4} |",
            f.kind,
            f.reference_delta,
            f.pairs,
            f.k,
            f.explained_fraction,
            f.eigenvalues.first().copied().unwrap_or(0.0)
        );
    }
    for f in &r.families {
        let _ = writeln!(s, "\n{} fit by amount:\n\n| delta | pairs | mean flow norm | relative error |\n|---|---|---|---|", f.kind);
        for d in &f.deltas {
            let err = d.relative_error.map_or_else(|| "n/a".into(), |e| format!("{e:.3}"));
            let _ = writeln!(s, "| {} | {} | {:.2} | {err} |", d.delta, d.pairs, d.mean_flow_norm);
        }
    }
    let _ = writeln!(s, "\n## Round trip\n");
    let _ = writeln!(s, "| generator | interior RMS | interior coverage | full RMS |\n|---|---|---|---|");
    for g in &r.roundtrip {
        let _ = writeln!(
            s,
            "| {} | {:.5} | {:.3} | {:.5} |",
            g.name, g.interior.rms, g.interior.coverage, g.full.rms
        );
    }
    let _ = writeln!(s, "\n## Zero-shot amount categorization\n");
    let _ = writeln!(
        s,
        "Accuracy {} on {} pairs, threshold {}.\n",
        pct(Some(r.zeroshot.accuracy)),
        r.zeroshot.pairs,
        r.zeroshot.threshold
    );
    let _ = writeln!(s, "| true delta | pairs | accuracy | mean estimate |\n|---|---|---|---|");
    for d in &r.zeroshot.per_delta {
        let _ = writeln!(s, "| {} | {} | {} | {:.1} |", d.delta, d.pairs, pct(Some(d.accuracy)), d.mean_estimate);
    }
    let _ = writeln!(s, "\n## Internal augmentation\n");
    let _ = writeln!(
        s,
        "Base network test accuracy {} on {} samples. Median baseline {}, median augmented {}; all losses finite: {}.\n",
        pct(Some(r.augment.base_test_accuracy)),
        r.augment.test_samples,
        pct(r.augment.median_baseline),
        pct(r.augment.median_augmented),
        r.augment.all_finite
    );
    let _ = writeln!(s, "| seed | baseline | augmented |\n|---|---|---|");
    for a in &r.augment.seeds {
        let _ = writeln!(s, "| {} | {} | {} |", a.seed, pct(a.baseline), pct(a.augmented));
    }
    let _ = writeln!(s, "\n## Figures\n");
    for f in &r.figures {
        let _ = writeln!(s, "![{f}]({f})");
    }
    s
}
