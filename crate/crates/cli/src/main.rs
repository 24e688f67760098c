use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emoter_cli::{ablate, evaluate, gen, gradcheck, to_json, train, ttest_files, write_file, CliError, EvalSplit, GenArgs, RunConfig};
use emoter_core::datagen::Dims;
use emoter_core::trainer::hyperparam_table;

#[derive(Parser)]
#[command(name = "emoter", version, about = "Multimodal conversational emotion recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn config_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let mut s = String::from(
            "Config file: JSON with keys seed, seeds, data{path, class_names, profile, synthetic{..}}, \
             stages, ablation{no_speaker_id, no_fusion_loss, no_kd, no_contrastive}, output_dir, hyper{..}. \
             Unknown keys are rejected; missing keys take the defaults below. \
             EMOTER_SEED overrides `seed`.\n\nHyperparameters (`hyper` keys, settable with --set):\n",
        );
        for (name, default, meaning) in hyperparam_table() {
            s.push_str(&format!("  {name:<16} {default:<8} {meaning}\n"));
        }
        s
    })
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a hyperparameter, e.g. --set epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [default: config `output_dir`, else runs]
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature container
    Gen {
        /// Class profile: meld or iemocap
        #[arg(long, default_value = "meld")]
        profile: String,
        /// Number of utterances
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Text feature width
        #[arg(long, default_value_t = Dims::default().text)]
        text_dim: usize,
        /// Audio feature width
        #[arg(long, default_value_t = Dims::default().audio)]
        audio_dim: usize,
        /// Visual feature width
        #[arg(long, default_value_t = Dims::default().visual)]
        visual_dim: usize,
        /// Per-modality noise as text,audio,visual [default: 0.5,1.0,1.5]
        #[arg(long, value_name = "T,A,V", value_parser = parse_noise)]
        noise: Option<[f64; 3]>,
        /// Random seed [default: 0; EMOTER_SEED overrides]
        #[arg(long)]
        seed: Option<u64>,
        /// Output file
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged pipeline; writes checkpoint.emoc, metrics.json and metrics.csv
    #[command(after_long_help = config_help())]
    Train(ConfigArgs),
    /// Evaluate a checkpoint and print the report as JSON
    Eval {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON run configuration naming the data [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature container to evaluate on [default: config `data.path`, else synthetic]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which split to score
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the report here [default: stdout only]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full system and the four single-removal arms over several seeds; writes ablation.json
    #[command(after_long_help = config_help())]
    Ablate(ConfigArgs),
    /// Finite-difference check of every loss and layer; exits 4 on any failure
    Gradcheck {
        /// Randomised configurations per case
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        /// Random seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative error tolerance
        #[arg(long, default_value_t = 1e-4)]
        rel_tol: f64,
    },
    /// Paired t-test between two per-seed score files (JSON array, {"scores": [..]} or an ablation arm)
    Ttest {
        /// First score file
        a: PathBuf,
        /// Second score file
        b: PathBuf,
    },
}

fn parse_noise(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected three comma-separated values, got {}", v.len()))
}

fn seed_or_env(seed: Option<u64>) -> Result<u64, CliError> {
    match std::env::var(emoter_cli::SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{} must be an unsigned integer, got `{s}`", emoter_cli::SEED_ENV))),
        Err(_) => Ok(seed.unwrap_or(0)),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            profile,
            n,
            text_dim,
            audio_dim,
            visual_dim,
            noise,
            seed,
            out,
        } => {
            let args = GenArgs {
                profile,
                n,
                dims: Dims::new(text_dim, audio_dim, visual_dim),
                noise,
                seed: seed_or_env(seed)?,
                out,
            };
            let bytes = gen(&args)?;
            eprintln!("wrote {} ({bytes} bytes)", args.out.display());
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = train(&cfg)?;
            print!("{}", out.metrics_json);
            eprintln!("wrote {}", cfg.output_dir.display());
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            split,
            out,
        } => {
            let mut cfg = RunConfig::load(config.as_deref(), &[])?;
            if data.is_some() {
                cfg.data.path = data;
            }
            let split = match split {
                SplitArg::Train => EvalSplit::Train,
                SplitArg::Test => EvalSplit::Test,
            };
            let json = to_json(&evaluate(&checkpoint, &cfg, split)?)?;
            if let Some(p) = out {
                write_file(&p, json.as_bytes())?;
            }
            print!("{json}");
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let report = ablate(&cfg)?;
            let json = to_json(&report)?;
            write_file(&cfg.output_dir.join("ablation.json"), json.as_bytes())?;
            for a in &report.arms {
                eprintln!("{:<16} wf1 {:.4} ± {:.4}  Δ {:+.4}", a.arm, a.summary.mean, a.summary.sd, a.delta_wf1);
            }
            print!("{json}");
        }
        Command::Gradcheck { rounds, seed, rel_tol } => {
            let report = gradcheck(rounds, seed, rel_tol)?;
            print!("{}", to_json(&report)?);
            let failed: Vec<String> = report.failures().map(|f| format!("{}#{}", f.case, f.config)).collect();
            if !failed.is_empty() {
                return Err(CliError::Check(format!("{} gradient checks failed: {}", failed.len(), failed.join(", "))));
            }
            eprintln!("{} checks passed, max rel error {:.3e}", report.results.len(), report.max_rel_error);
        }
        Command::Ttest { a, b } => print!("{}", to_json(&ttest_files(&a, &b)?)?),
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
