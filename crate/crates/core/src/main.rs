use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokenalign::commands::{self, Failure};
use tokenalign::config::{out_dir, RunConfig};

/// Dense versus global contrastive alignment on synthetic audio/visual tokens.
#[derive(Parser)]
#[command(name = "tokenalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for unset output paths [default: $TOKENALIGN_OUT_DIR or ./out].
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sets both `corpus.seed` and `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, its manifest and config.
    GenData(Common),
    /// Train one objective and write a checkpoint and loss log.
    Train(Common),
    /// Score a checkpoint: retrieval reports for both directions and a table.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to report relative R@1 against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Write per-token PGM heatmaps and a manifest for selected samples.
    Heatmaps {
        #[command(flatten)]
        common: Common,
        /// Comma-separated corpus sample indices.
        #[arg(long, value_delimiter = ',')]
        samples: Option<Vec<usize>>,
    },
    /// Compare analytic and finite-difference gradients per objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train every objective on one corpus and seed and compare them.
    Compare(Common),
}

fn setup(common: &Common, extra: Vec<String>) -> Result<(RunConfig, tokenalign::config::Paths), Failure> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Validation(tokenalign::Error::Config {
                field: "threads".into(),
                reason: "must be at least 1".into(),
            }));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(tokenalign::Error::InvalidArgument(e.to_string())))?;
    }
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("corpus.seed={s}"));
        overrides.push(format!("train.seed={s}"));
    }
    overrides.extend(extra);
    let cfg = RunConfig::load(common.config.as_deref(), &overrides).map_err(Failure::Validation)?;
    let paths = cfg.resolve_paths(&out_dir(common.out_dir.as_deref()));
    Ok((cfg, paths))
}

fn run(cli: Cli) -> Result<Vec<String>, Failure> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, paths) = setup(&c, vec![])?;
            commands::gen_data(&cfg, &paths)
        }
        Command::Train(c) => {
            let (cfg, paths) = setup(&c, vec![])?;
            commands::train(&cfg, &paths)
        }
        Command::Eval { common, baseline } => {
            let extra = baseline.map(|b| format!("eval.baseline={:?}", b.display().to_string())).into_iter().collect();
            let (cfg, paths) = setup(&common, extra)?;
            commands::eval(&cfg, &paths)
        }
        Command::Heatmaps { common, samples } => {
            let extra = samples.map(|s| format!("heatmaps.samples={s:?}")).into_iter().collect();
            let (cfg, paths) = setup(&common, extra)?;
            commands::heatmaps(&cfg, &paths)
        }
        Command::Gradcheck { common, corrupt_backward } => {
            let (cfg, paths) = setup(&common, vec![])?;
            commands::gradcheck(&cfg, &paths, corrupt_backward)
        }
        Command::Compare(c) => {
            let (cfg, paths) = setup(&c, vec![])?;
            let out = commands::compare(&cfg, &paths)?;
            let mut lines: Vec<String> = out.table.lines().map(String::from).collect();
            lines.extend(out.summary);
            lines.extend(out.runs.iter().map(|r| format!("{}.seconds={:.2}", r.objective, r.seconds)));
            Ok(lines)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("tokenalign: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
