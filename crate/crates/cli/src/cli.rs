//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use g2sf::features::AnomalyKind;

use crate::commands::{cmd_ablate, cmd_bank, cmd_eval, cmd_gen, cmd_score, cmd_synth, cmd_train, StageOpts};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunDir, Stage};
use crate::selftest::{format_table, run_suite};

#[derive(Parser, Debug)]
#[command(name = "g2sf", version, about = "Geometry-guided score fusion for two-modality anomaly detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed of every random stream in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Single-threaded, and logs without wall-clock times.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite outputs of a stage that already ran.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct RunArg {
    /// Run directory.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset, or ingest one with --from.
    Gen {
        /// Run directory to create.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Existing dataset directory holding train.json (and test.json).
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
        /// Feature grid, e.g. 16x16.
        #[arg(long, value_name = "HxW")]
        grid: Option<String>,
        /// Feature dimensions, e.g. 8,8 for point cloud and RGB.
        #[arg(long, value_name = "PC,RGB")]
        dims: Option<String>,
        /// Normal training samples.
        #[arg(long)]
        n_train: Option<usize>,
        /// Test samples, normal and anomalous.
        #[arg(long)]
        n_test: Option<usize>,
        /// Comma-separated subset of pc, rgb, joint.
        #[arg(long, value_name = "LIST")]
        anomaly_modes: Option<String>,
    },
    /// Build the memory banks and the distance normaliser.
    Bank {
        #[command(flatten)]
        run: RunArg,
        /// Fraction of foreground features kept as prototypes.
        #[arg(long)]
        coreset_fraction: Option<f64>,
    },
    /// Synthesize anomalous training samples.
    Synth {
        #[command(flatten)]
        run: RunArg,
        /// Augmented samples to draw; 0 keeps the normal samples only.
        #[arg(long)]
        n_aug: Option<usize>,
        /// Injection strength relative to the mean prototype distance.
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Train the scale network.
    Train {
        #[command(flatten)]
        run: RunArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score the test split.
    Score {
        #[command(flatten)]
        run: RunArg,
        /// first, max, mean or min.
        #[arg(long)]
        aggregation: Option<String>,
    },
    /// Image- and pixel-level metrics of the stored scores.
    Eval {
        #[command(flatten)]
        run: RunArg,
    },
    /// Score-variant and aggregation tables plus the learning curve.
    Ablate {
        #[command(flatten)]
        run: RunArg,
    },
    /// Run the embedded invariant suite.
    Selftest {
        /// Also check that this checkpoint directory loads and behaves.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
}

fn pair(key: &str, value: impl Into<String>) -> (String, String) {
    (key.to_string(), value.into())
}

fn parse_pair(raw: &str, sep: char, what: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::config(format!("{what} `{raw}` is not of the form A{sep}B"));
    let (a, b) = raw.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_modes(raw: &str) -> CliResult<String> {
    let names = raw
        .split(',')
        .map(|m| {
            AnomalyKind::parse(m.trim())
                .map(|k| format!("{:?}", serde_json::to_value(k).expect("plain enum").as_str().unwrap_or_default()))
                .ok_or_else(|| CliError::config(format!("unknown anomaly mode `{m}`")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(format!("[{}]", names.join(", ")))
}

/// Overrides from `--set` and the command-specific flags, in that order.
fn overrides(global: &Global, command: &Command) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &global.set {
        let (k, v) =
            s.split_once('=').ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        out.push(pair(k.trim(), v.trim()));
    }
    if let Some(seed) = global.seed {
        out.push(pair("seed", seed.to_string()));
    }
    let num = |k: &str, v: Option<String>, out: &mut Vec<(String, String)>| {
        if let Some(v) = v {
            out.push(pair(k, v));
        }
    };
    match command {
        Command::Gen { grid, dims, n_train, n_test, anomaly_modes, .. } => {
            if let Some(g) = grid {
                let (h, w) = parse_pair(g, 'x', "--grid")?;
                out.push(pair("grid", format!("[{h}, {w}]")));
            }
            if let Some(d) = dims {
                let (p, r) = parse_pair(d, ',', "--dims")?;
                out.push(pair("dims", format!("[{p}, {r}]")));
            }
            num("n_train", n_train.map(|v| v.to_string()), &mut out);
            num("n_test", n_test.map(|v| v.to_string()), &mut out);
            if let Some(m) = anomaly_modes {
                out.push(pair("anomaly_modes", parse_modes(m)?));
            }
        }
        Command::Bank { coreset_fraction, .. } => {
            num("coreset_fraction", coreset_fraction.map(|v| format!("{v:?}")), &mut out);
        }
        Command::Synth { n_aug, strength, .. } => {
            num("n_aug", n_aug.map(|v| v.to_string()), &mut out);
            num("strength", strength.map(|v| format!("{v:?}")), &mut out);
        }
        Command::Train { epochs, lr, batch_size, .. } => {
            num("epochs", epochs.map(|v| v.to_string()), &mut out);
            num("lr", lr.map(|v| format!("{v:?}")), &mut out);
            num("batch_size", batch_size.map(|v| v.to_string()), &mut out);
        }
        Command::Score { aggregation, .. } => {
            if let Some(a) = aggregation {
                out.push(pair("aggregation", format!("{a:?}")));
            }
        }
        Command::Eval { .. } | Command::Ablate { .. } | Command::Selftest { .. } => {}
    }
    Ok(out)
}

fn configure_threads(global: &Global) {
    let threads = if global.deterministic { Some(1) } else { global.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    let opts = StageOpts { force: g.force, deterministic: g.deterministic };
    let run = |p: &Path| RunDir::new(p);
    // Later stages start from the values their upstream stages recorded.
    let load = |dir: &RunDir, stage: Stage| -> CliResult<RunConfig> {
        let inherited = if stage == Stage::Gen { Default::default() } else { dir.inherited(stage)? };
        RunConfig::load(&inherited, g.config.as_deref(), &overrides(g, &cli.command)?)
    };
    let stage = |p: &Path, s: Stage| -> CliResult<(RunDir, RunConfig)> {
        let dir = run(p);
        let cfg = load(&dir, s)?;
        Ok((dir, cfg))
    };
    match &cli.command {
        Command::Gen { out, from, .. } => {
            let (dir, cfg) = stage(out, Stage::Gen)?;
            cmd_gen(&dir, &cfg, opts, from.as_deref()).map(drop)
        }
        Command::Bank { run: r, .. } => stage(&r.run, Stage::Bank).and_then(|(d, c)| cmd_bank(&d, &c, opts)).map(drop),
        Command::Synth { run: r, .. } => {
            stage(&r.run, Stage::Synth).and_then(|(d, c)| cmd_synth(&d, &c, opts)).map(drop)
        }
        Command::Train { run: r, .. } => {
            stage(&r.run, Stage::Train).and_then(|(d, c)| cmd_train(&d, &c, opts)).map(drop)
        }
        Command::Score { run: r, .. } => {
            stage(&r.run, Stage::Score).and_then(|(d, c)| cmd_score(&d, &c, opts)).map(drop)
        }
        Command::Eval { run: r } => stage(&r.run, Stage::Eval).and_then(|(d, c)| cmd_eval(&d, &c, opts)).map(drop),
        Command::Ablate { run: r } => {
            stage(&r.run, Stage::Ablate).and_then(|(d, c)| cmd_ablate(&d, &c, opts)).map(drop)
        }
        Command::Selftest { checkpoint } => {
            let checks = run_suite(checkpoint.as_deref());
            print!("{}", format_table(&checks));
            let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.to_string()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::SelfTest(failed))
            }
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    configure_threads(&cli.global);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
