//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spiketrain_core::encode::{make_synthetic_rate_task, poisson_encode, LabeledSpikeSample};
use spiketrain_core::optimize::{evaluate, train};
use spiketrain_core::oracle::{run_gradcheck, GradcheckOptions};
use spiketrain_core::{NeuronParams, Topology};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSection, RunConfig, SolverName};
use crate::error::{CliError, ExitCode};
use crate::events::{load_event_csv, write_event_csv};
use crate::idx::{load_idx, IdxSample};
use crate::metrics::MetricsLog;

#[derive(Debug, Parser)]
#[command(name = "spiketrain", version, about = "Spike-train level backpropagation for recurrent spiking networks")]
pub struct Cli {
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub solver: Option<SolverArg>,
    /// Validate inputs and exit without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Exact,
    Taylor,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network; writes checkpoint.txt and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Record real elapsed time in metrics.csv instead of 0.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Check the backward pass against the reference implementations.
    Gradcheck(GradcheckArgs),
    /// Poisson-encode IDX images into event CSV files.
    Encode(EncodeArgs),
    /// Validate a config file and the files it names.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random linear systems.
    #[arg(long, default_value_t = 100)]
    pub systems: usize,
    /// Largest linear system dimension.
    #[arg(long, default_value_t = 50)]
    pub size: usize,
    /// Number of random surrogate networks.
    #[arg(long, default_value_t = 25)]
    pub surrogates: usize,
    /// Perturb the production gradients (negative control).
    #[arg(long)]
    pub inject_bug: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Sample duration in ms (one step per ms).
    #[arg(long, default_value_t = 400.0)]
    pub duration: f64,
    /// Spike probability per step at full intensity.
    #[arg(long, default_value_t = 0.25)]
    pub scale: f64,
    /// Encode only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Diagnostics go to `err` as a single line.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Validation as i32 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => ExitCode::Success as i32,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code() as i32
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { config, wall_clock } => cmd_train(cli, config, *wall_clock, out),
        Command::Eval {
            config,
            checkpoint,
            split,
        } => cmd_eval(cli, config, checkpoint, *split, out),
        Command::Gradcheck(args) => cmd_gradcheck(cli, args, out),
        Command::Encode(args) => cmd_encode(cli, args, out),
        Command::Validate { config } => {
            load_config(cli, config)?;
            say(out, format_args!("config ok"));
            Ok(())
        }
    }
}

fn say(out: &mut dyn Write, args: std::fmt::Arguments) {
    let _ = writeln!(out, "{args}");
}

/// Loads a config, applies command-line overrides and validates it.
pub fn load_config(cli: &Cli, path: &Path) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(s) = cli.solver {
        cfg.train.solver = match s {
            SolverArg::Exact => SolverName::Exact,
            SolverArg::Taylor => SolverName::Taylor,
        };
    }
    cfg.check()?;
    Ok(cfg)
}

/// Seed of the Poisson draw for one image, distinct per split and index.
pub fn sample_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed ^ (split << 48) ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn encode_images(samples: &[IdxSample], steps: u32, duration_ms: f64, scale: f64, seed: u64, split: u64) -> Vec<LabeledSpikeSample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| LabeledSpikeSample {
            input: poisson_encode(&s.pixels, steps, scale, sample_seed(seed, split, i)),
            label: s.label as usize,
            duration_ms,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<LabeledSpikeSample>,
    pub test: Option<Vec<LabeledSpikeSample>>,
}

/// Loads or generates the configured data and checks every sample against
/// the network's input and output sizes.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets, CliError> {
    let params = cfg.neuron_params();
    let duration_ms = cfg.duration_ms();
    let steps = params
        .steps_exact(duration_ms)
        .ok_or_else(|| CliError::Validation(format!("duration {duration_ms} ms")))?;
    let sets = match &cfg.data {
        DataSection::Synthetic { .. } => {
            let task = cfg.synthetic_task().expect("synthetic section");
            let d = make_synthetic_rate_task(&task, cfg.seed)?;
            Datasets {
                train: d.train,
                test: Some(d.test),
            }
        }
        DataSection::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            scale,
            limit_train,
            limit_test,
            ..
        } => {
            let mut tr = load_idx(train_images, train_labels)?;
            tr.truncate(limit_train.unwrap_or(usize::MAX));
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => {
                    let mut te = load_idx(i, l)?;
                    te.truncate(limit_test.unwrap_or(usize::MAX));
                    Some(encode_images(&te, steps, duration_ms, *scale, cfg.seed, 1))
                }
                _ => None,
            };
            Datasets {
                train: encode_images(&tr, steps, duration_ms, *scale, cfg.seed, 0),
                test,
            }
        }
        DataSection::Events {
            train_events,
            train_labels,
            test_events,
            test_labels,
            ..
        } => {
            let inputs = cfg.layers[0].size;
            let train = load_event_csv(train_events, train_labels, inputs, duration_ms, params.sim_step)?;
            let test = match (test_events, test_labels) {
                (Some(e), Some(l)) => Some(load_event_csv(e, l, inputs, duration_ms, params.sim_step)?),
                _ => None,
            };
            Datasets { train, test }
        }
    };
    let inputs = cfg.layers[0].size;
    let classes = cfg.layers.last().map_or(0, |l| l.size);
    for (name, set) in [("train", Some(&sets.train)), ("test", sets.test.as_ref())] {
        for (i, s) in set.into_iter().flatten().enumerate() {
            if s.input.len() != inputs {
                return Err(CliError::Data(format!(
                    "{name} sample {i}: {} input trains but the input layer has {inputs} neurons",
                    s.input.len()
                )));
            }
            s.check(steps, classes)
                .map_err(|e| CliError::Data(format!("{name} sample {i}: {e}")))?;
        }
    }
    Ok(sets)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn cmd_train(cli: &Cli, config: &Path, wall_clock: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(cli, config)?;
    let data = load_datasets(&cfg)?;
    if data.train.is_empty() {
        return Err(CliError::Data("training set is empty".into()));
    }
    say(out, format_args!("seed={}", cfg.seed));
    if cli.dry_run {
        say(
            out,
            format_args!(
                "dry run: {} train / {} test samples, config ok",
                data.train.len(),
                data.test.as_ref().map_or(0, Vec::len)
            ),
        );
        return Ok(());
    }

    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let params = cfg.neuron_params();
    let topology = Topology::new(cfg.layer_specs())?.init_weights(cfg.seed)?;
    let train_cfg = cfg.train_config();
    let ckpt_path = dir.join("checkpoint.txt");
    let mut log = MetricsLog::create(&dir.join("metrics.csv"))?;
    let started = Instant::now();
    let mut io_error = None;

    let (trained, _) = train(
        &data.train,
        data.test.as_deref(),
        &topology,
        &params,
        &train_cfg,
        |m, net| {
            if io_error.is_some() {
                return;
            }
            let wall = if wall_clock { started.elapsed().as_secs_f64() } else { 0.0 };
            let ckpt = Checkpoint {
                seed: cfg.seed,
                params: params.clone(),
                topology: net.clone(),
            };
            if let Err(e) = log.append(m, wall).and_then(|_| ckpt.save(&ckpt_path).map_err(CliError::from)) {
                io_error = Some(e);
                return;
            }
            let test = m.test_acc.map_or(String::from("-"), |a| format!("{a:.4}"));
            say(
                out,
                format_args!(
                    "epoch {} loss {:.4} train_acc {:.4} test_acc {test} skipped {}",
                    m.epoch, m.train_loss, m.train_acc, m.skipped
                ),
            );
        },
    )?;
    if let Some(e) = io_error {
        return Err(e);
    }
    Checkpoint {
        seed: cfg.seed,
        params,
        topology: trained,
    }
    .save(&ckpt_path)?;
    say(out, format_args!("wrote {}", ckpt_path.display()));
    Ok(())
}

fn check_compatible(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<(), CliError> {
    let specs = cfg.layer_specs();
    let same = specs.len() == ckpt.topology.layers.len()
        && specs
            .iter()
            .zip(&ckpt.topology.layers)
            .all(|(a, b)| a.kind == b.kind && a.size == b.size);
    if !same {
        return Err(CliError::Validation("checkpoint layers do not match the config".into()));
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, config: &Path, checkpoint: &Path, split: Split, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(cli, config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_compatible(&ckpt, &cfg)?;
    let violations = spiketrain_core::topology::validate(&ckpt.topology, &ckpt.params);
    if !violations.is_empty() {
        return Err(spiketrain_core::Error::Invalid(violations).into());
    }
    let data = load_datasets(&cfg)?;
    let set = match split {
        Split::Train => data.train,
        Split::Test => data.test.unwrap_or_default(),
    };
    if set.is_empty() {
        return Err(CliError::Data(format!("{split:?} dataset is empty").to_lowercase()));
    }
    if cli.dry_run {
        say(out, format_args!("dry run: {} samples, checkpoint ok", set.len()));
        return Ok(());
    }
    let eval = evaluate(&set, &ckpt.topology, &ckpt.params, cfg.train.inhibition_weight)?;
    say(out, format_args!("accuracy={}", eval.accuracy()));
    for (c, row) in eval.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        say(out, format_args!("class {c}: {}", cells.join(" ")));
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let options = GradcheckOptions {
        seed: cli.seed.unwrap_or(0),
        systems: args.systems,
        max_size: args.size,
        surrogates: args.surrogates,
        inject_bug: args.inject_bug,
    };
    say(out, format_args!("seed={}", options.seed));
    if options.max_size == 0 {
        return Err(CliError::Validation("--size must be at least 1".into()));
    }
    if cli.dry_run {
        say(out, format_args!("dry run: {options:?}"));
        return Ok(());
    }
    let r = run_gradcheck(&options);
    say(out, format_args!("linear systems: {} max scaled residual {:e}", r.systems, r.max_residual));
    say(out, format_args!("taylor deviation / bound: {:e}", r.max_taylor_ratio));
    say(out, format_args!("surrogate nets: {} max finite-difference relative error {:e}", r.surrogates, r.max_fd_rel));
    say(out, format_args!("max deviation from forward-mode oracle {:e}", r.max_naive_diff));
    if r.passed() {
        say(out, format_args!("PASS"));
        Ok(())
    } else {
        say(out, format_args!("FAIL"));
        Err(CliError::Validation(format!("gradcheck failed: {}", r.failures.join("; "))))
    }
}

fn cmd_encode(cli: &Cli, args: &EncodeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let params = NeuronParams::default();
    let steps = params
        .steps_exact(args.duration)
        .filter(|&s| s > 0)
        .ok_or_else(|| CliError::Validation(format!("--duration {} is not a positive whole number of ms", args.duration)))?;
    if !(0.0..=1.0).contains(&args.scale) {
        return Err(CliError::Validation("--scale must lie in [0, 1]".into()));
    }
    let dir = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("encode needs --out DIR".into()))?;
    let mut images = load_idx(&args.images, &args.labels)?;
    images.truncate(args.limit.unwrap_or(usize::MAX));
    let seed = cli.seed.unwrap_or(0);
    say(out, format_args!("seed={seed}"));
    if cli.dry_run {
        say(out, format_args!("dry run: {} images", images.len()));
        return Ok(());
    }
    let samples = encode_images(&images, steps, args.duration, args.scale, seed, 0);
    create_dir(&dir)?;
    let (events, labels) = (dir.join("events.csv"), dir.join("labels.csv"));
    write_event_csv(&samples, &events, &labels, params.sim_step)?;
    say(out, format_args!("wrote {} samples to {}", samples.len(), events.display()));
    Ok(())
}
