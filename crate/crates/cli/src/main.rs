use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowgen_cli::{run_all, run_stage, Context, Pipeline, Stage};

#[derive(Parser)]
#[command(name = "flowgen", version, about = "Learn and apply generators of feature flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite existing stage outputs.
    #[arg(long)]
    force: bool,
    /// Run directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and write its manifest.
    GenData(Common),
    /// Train the base network.
    TrainBase(Common),
    /// Extract tap-layer features for every transformed image the flows need.
    Extract(Common),
    /// Estimate feature flows for every pair of every family.
    Flow(Common),
    /// Fit PCA bases and generator coefficients.
    Fit(Common),
    /// Synthesize the configured generators and measure their round trip.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Also write every family's generator at this amount (repeatable).
        #[arg(long = "delta", allow_negative_numbers = true)]
        deltas: Vec<f64>,
        /// Write hook-layer channel grids before and after each generator warp.
        #[arg(long)]
        dump_warps: bool,
    },
    /// Zero-shot categorization of rotation amounts.
    Zeroshot(Common),
    /// Baseline versus generator-augmented training.
    TrainAug(Common),
    /// Collate every stage into report.json and report.md.
    Report(Common),
    /// Run every stage, keeping the ones already current.
    Run(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common, deltas, dump_warps) = match cli.command {
        Command::GenData(c) => (Some(Stage::GenData), c, vec![], false),
        Command::TrainBase(c) => (Some(Stage::TrainBase), c, vec![], false),
        Command::Extract(c) => (Some(Stage::Extract), c, vec![], false),
        Command::Flow(c) => (Some(Stage::Flow), c, vec![], false),
        Command::Fit(c) => (Some(Stage::Fit), c, vec![], false),
        Command::Synth { common, deltas, dump_warps } => (Some(Stage::Synth), common, deltas, dump_warps),
        Command::Zeroshot(c) => (Some(Stage::ZeroShot), c, vec![], false),
        Command::TrainAug(c) => (Some(Stage::TrainAug), c, vec![], false),
        Command::Report(c) => (Some(Stage::Report), c, vec![], false),
        Command::Run(c) => (None, c, vec![], false),
    };
    if let Some(jobs) = common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("flowgen: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = Pipeline::load(&common.config).and_then(|pipeline| {
        let out = common.out.clone().unwrap_or_else(|| pipeline.default_out());
        let ctx = Context {
            force: common.force,
            synth_deltas: deltas,
            dump_warps,
            ..Context::new(pipeline, out)
        };
        match stage {
            Some(stage) => run_stage(&ctx, stage).map(|path| println!("{}", path.display())),
            None => run_all(&ctx),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowgen: {e}");
            ExitCode::FAILURE
        }
    }
}
