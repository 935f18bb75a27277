use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use occtrack_cli::{cmd_bench, cmd_eval, cmd_library, cmd_synth, cmd_track, BenchRow, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "occtrack", version, about = "Occlusion-robust deformable object tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from a scene file or a built-in preset.
    Synth {
        /// Scene script (JSON).
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        scene: Option<PathBuf>,
        /// One of: static, drag, occlusion, reappear, fold, cloth.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the frame count.
        #[arg(long)]
        frames: Option<usize>,
        /// Image size as WIDTHxHEIGHT; intrinsics scale with it.
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
        /// Also write a descriptor library of the rendered frames here.
        #[arg(long)]
        library_out: Option<PathBuf>,
    },
    /// Track a dataset and write per-frame states plus run_summary.json.
    Track(RunArgs),
    /// Per-frame mean vertex error of one or more track directories.
    Eval {
        /// Track directories; more than one gives mean and std per frame.
        #[arg(long = "tracks", num_args = 1.., required = true)]
        tracks: Vec<PathBuf>,
        /// Dataset holding gt_%05d.csv.
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV.
        #[arg(long, default_value = "errors.csv")]
        out: PathBuf,
    },
    /// Median per-component timings over repeated runs.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    no_vis_prior: bool,
    #[arg(long)]
    no_lle: bool,
    #[arg(long)]
    no_constraint: bool,
    #[arg(long)]
    no_recovery: bool,
    /// Descriptor library written by `synth --library-out`.
    #[arg(long)]
    library: Option<PathBuf>,
}

impl From<RunArgs> for RunConfig {
    fn from(a: RunArgs) -> Self {
        RunConfig {
            dataset: a.dataset,
            params: a.params,
            out: a.out,
            tau: a.tau,
            disable_vis_prior: a.no_vis_prior,
            disable_lle: a.no_lle,
            disable_constraint: a.no_constraint,
            disable_recovery: a.no_recovery,
            seed: a.seed,
            library: a.library,
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok((w.parse().map_err(|e| format!("{e}"))?, h.parse().map_err(|e| format!("{e}"))?))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { scene, preset, out, seed, frames, size, library_out } => {
            let mut s = match (preset, scene) {
                (Some(name), _) => occtrack_synth::preset(&name).ok_or_else(|| {
                    CliError::Validation(format!("unknown preset {name}; known: {:?}", occtrack_synth::PRESETS))
                })?,
                (None, Some(path)) => {
                    if !path.exists() {
                        return Err(CliError::Validation(format!("{} not found", path.display())));
                    }
                    occtrack::io::read_json(&path)?
                }
                (None, None) => unreachable!("clap requires --scene or --preset"),
            };
            if let Some((w, h)) = size {
                s = occtrack_synth::scene::with_resolution(s, w, h);
            }
            s.seed = seed.unwrap_or(s.seed);
            s.frames = frames.unwrap_or(s.frames);
            let n = cmd_synth(&s, &out)?;
            println!("wrote {n} frames to {}", out.display());
            if let Some(path) = library_out {
                let params = occtrack::Parameters::default();
                let k = cmd_library(&s, &params, s.seed, &path)?;
                println!("wrote a {k}-entry library to {}", path.display());
            }
        }
        Command::Track(args) => {
            let cfg = RunConfig::from(args);
            let s = cmd_track(&cfg)?;
            println!(
                "tracked {} frames at {:.1} FPS; recovery invoked on {} and selected on {}",
                s.num_frames, s.fps, s.recovery_invocations, s.recovery_selections
            );
        }
        Command::Eval { tracks, dataset, out } => {
            let r = cmd_eval(&tracks, &dataset, &out)?;
            let all: Vec<f64> = r.mean.iter().copied().collect();
            let (m, _) = occtrack_synth::mean_std(&all);
            let peak = all.iter().copied().fold(0.0, f64::max);
            println!("{} frames: mean {:.2} mm, peak {:.2} mm -> {}", all.len(), m * 1e3, peak * 1e3, out.display());
        }
        Command::Bench { run, repeats } => {
            let cfg = RunConfig::from(run);
            let r = cmd_bench(&cfg, repeats)?;
            println!("{}", BenchRow::header());
            println!("{}", r.median.format());
            if !r.identical_outputs {
                eprintln!("warning: repeats produced different states");
            }
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
