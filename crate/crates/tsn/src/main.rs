use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use tsn::infer::{InferSettings, Retrieval};
use tsn::{bench, diagnostics, eval, infer, train, Result};
use tsn_core::synth::{EmergenceMode, SynthConfig};
use tsn_core::ModelConfig;

#[derive(Parser)]
#[command(name = "tsn", version, about = "Two-stream video object segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Occlusion,
    Border,
    Articulation,
    /// Cycle through the three emergence modes.
    Mixed,
    /// No emergence.
    None,
}

impl From<Mode> for EmergenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Occlusion => EmergenceMode::Occlusion,
            Mode::Border => EmergenceMode::Border,
            Mode::Articulation => EmergenceMode::Articulation,
            Mode::Mixed => EmergenceMode::Mixed,
            Mode::None => EmergenceMode::None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: usize,
        #[arg(long, value_parser = ["32", "64"])]
        size: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        objects: usize,
    },
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a video (or every video of a corpus) from its first-frame mask.
    #[command(group(ArgGroup::new("retrieval").args(["topk", "dense"])))]
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_routing: bool,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        dense: bool,
        /// Keep only the annotated first frame in memory.
        #[arg(long)]
        first_frame_only: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Gradcheck,
    /// Time the retrieval, routing and head kernels.
    Bench {
        #[arg(long)]
        mem_frames: usize,
        /// Feature positions per frame.
        #[arg(long)]
        hw: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            out,
            videos,
            size,
            seed,
            mode,
            frames,
            objects,
        } => {
            let cfg = SynthConfig {
                frames,
                size: size.parse().expect("validated by clap"),
                objects,
                mode: mode.into(),
                reveal_frame: None,
            };
            let dirs = tsn::corpus::generate_corpus(&out, seed, videos, &cfg)?;
            println!("wrote {} videos to {}", dirs.len(), out.display());
        }
        Command::Train { corpus, config, out } => {
            train::run(&corpus, &config, &out)?;
            println!("wrote {} and {}", out.display(), train::loss_csv_path(&out).display());
        }
        Command::Infer {
            ckpt,
            video,
            out,
            dump_routing,
            topk,
            dense,
            first_frame_only,
        } => {
            let retrieval = match (topk, dense) {
                (Some(k), _) => Retrieval::TopK(k),
                (None, true) => Retrieval::Dense,
                (None, false) => Retrieval::Configured,
            };
            let settings = InferSettings {
                retrieval,
                dump_routing,
                first_frame_only,
            };
            let timings = infer::run(&ckpt, &video, &out, &settings)?;
            let frames: usize = timings.iter().map(|t| t.frames).sum();
            let secs: f64 = timings.iter().map(|t| t.seconds).sum();
            println!("{} videos, {frames} frames, {:.1} frames/s", timings.len(), frames as f64 / secs.max(1e-9));
        }
        Command::Eval { pred, gt, out } => {
            let s = eval::run(&pred, &gt, &out)?;
            let je = s.j_emergent.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            println!("objects {}  J {:.4}  F {:.4}  J&F {:.4}  J_emergent {je}", s.objects, s.j, s.f, s.jf);
        }
        Command::Gradcheck => {
            diagnostics::run()?;
        }
        Command::Bench { mem_frames, hw } => {
            let cfg = ModelConfig::default();
            let rows = bench::run_bench(mem_frames, hw, cfg.key_dim, cfg.value_dim, cfg.topk)?;
            print!("{}", bench::format_table(&rows, mem_frames, hw));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
