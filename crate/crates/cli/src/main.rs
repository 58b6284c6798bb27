//! `pot`: pooled-trajectory video similarity over a corpus of frame folders.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pot_core::engine::StageReport;
use pot_core::heatmap::render_heatmap;
use pot_core::{Error, FarnebackParams, Manifest, Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "pot",
    version,
    about = "Video similarity from pooled motion descriptors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-video features and write feature shards.
    Extract(StageArgs),
    /// Compute corpus mean chi-square distances from the shards.
    Mean(StageArgs),
    /// Score every video pair into similarity.csv.
    Sim(StageArgs),
    /// Run extract, mean and sim, resuming from checkpoints.
    Run(StageArgs),
    /// Render similarity.csv as an N×N PGM heat map.
    Heatmap {
        /// Path to similarity.csv.
        sim_csv: PathBuf,
        /// Output prefix; writes <out>.pgm and <out>.keys.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    /// Manifest file with one `<key>,<frames-directory>` line per video.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for shards and CSV results.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: logical CPU count).
    #[arg(long)]
    workers: Option<usize>,
    /// Working resolution frames are resized to.
    #[arg(long, default_value = "128x128", value_parser = parse_resize)]
    resize: (usize, usize),
    /// Temporal pyramid levels.
    #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
    levels: Vec<usize>,
    /// Frame-difference threshold for the gradient histograms.
    #[arg(long, default_value_t = 40.0)]
    hog_threshold: f64,
    /// Feature shard count (default: max(1, ceil(N/64))).
    #[arg(long)]
    shards: Option<usize>,
    /// State directory (default: <out>/state).
    #[arg(long, env = "POT_STATE_DIR")]
    state_dir: Option<PathBuf>,
    /// Also write <key>.of.txt / <key>.hog.txt per-frame histograms.
    #[arg(long)]
    dump_series: bool,
    #[command(flatten)]
    flow: FlowArgs,
}

#[derive(Args)]
struct FlowArgs {
    /// Optical flow pyramid scale.
    #[arg(long)]
    fb_pyr_scale: Option<f64>,
    /// Optical flow pyramid levels.
    #[arg(long)]
    fb_levels: Option<usize>,
    /// Optical flow averaging window.
    #[arg(long)]
    fb_winsize: Option<usize>,
    /// Optical flow iterations per level.
    #[arg(long)]
    fb_iterations: Option<usize>,
    /// Polynomial expansion neighbourhood.
    #[arg(long)]
    fb_poly_n: Option<usize>,
    /// Polynomial expansion Gaussian sigma.
    #[arg(long)]
    fb_poly_sigma: Option<f64>,
}

impl FlowArgs {
    fn params(&self) -> FarnebackParams {
        let d = FarnebackParams::default();
        FarnebackParams {
            pyr_scale: self.fb_pyr_scale.unwrap_or(d.pyr_scale),
            levels: self.fb_levels.unwrap_or(d.levels),
            winsize: self.fb_winsize.unwrap_or(d.winsize),
            iterations: self.fb_iterations.unwrap_or(d.iterations),
            poly_n: self.fb_poly_n.unwrap_or(d.poly_n),
            poly_sigma: self.fb_poly_sigma.unwrap_or(d.poly_sigma),
        }
    }
}

fn parse_resize(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let dim = |v: &str| {
        v.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid dimension {v:?} in {s:?}"))
    };
    Ok((dim(w)?, dim(h)?))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn open_pipeline(args: &StageArgs) -> Result<Pipeline, Failure> {
    if !args.manifest.is_file() {
        return Err(Failure::Usage(format!(
            "manifest {} not found",
            args.manifest.display()
        )));
    }
    let manifest = Manifest::load(&args.manifest)?;
    let workers = match args.workers {
        Some(0) => return Err(Failure::Usage("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let config = PipelineConfig {
        working_width: args.resize.0,
        working_height: args.resize.1,
        farneback: args.flow.params(),
        hog_threshold: args.hog_threshold,
        levels: args.levels.clone(),
        shards: args.shards,
    };
    let state_dir = args
        .state_dir
        .clone()
        .unwrap_or_else(|| args.out.join("state"));
    let pipeline = Pipeline::open(config, manifest, &args.out, &state_dir, workers)?;
    Ok(pipeline.with_series_dump(args.dump_series))
}

fn report(stage: &str, r: &StageReport) {
    if r.up_to_date {
        println!("{stage}: up to date ({} tasks)", r.exec.skipped);
        return;
    }
    print!(
        "{stage}: {} tasks run, {} skipped, {:.2}s",
        r.exec.executed,
        r.exec.skipped,
        r.exec.wall_time.as_secs_f64()
    );
    if let Some(t) = r.per_pair_time() {
        print!(", {} pairs, {:.3} ms/pair", r.pairs, t.as_secs_f64() * 1e3);
    }
    println!();
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Extract(args) => report("extract", &open_pipeline(&args)?.extract()?),
        Command::Mean(args) => report("mean", &open_pipeline(&args)?.mean()?),
        Command::Sim(args) => report("sim", &open_pipeline(&args)?.similarity()?),
        Command::Run(args) => {
            let r = open_pipeline(&args)?.run()?;
            report("extract", &r.extract);
            report("mean", &r.mean);
            report("sim", &r.similarity);
        }
        Command::Heatmap { sim_csv, out } => {
            if !sim_csv.is_file() {
                return Err(Failure::Usage(format!("{} not found", sim_csv.display())));
            }
            let (pgm, keys) = render_heatmap(&sim_csv, Path::new(&out))?;
            println!("wrote {} and {}", pgm.display(), keys.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
