// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use statetrack::{Domain, Scheme};

use crate::backend::Backend;
use crate::config::ExperimentConfig;
use crate::experiment::{
    run_attention_analysis, run_evaluation, run_generate, run_pairs, run_patching_experiment, RunOptions,
};
use crate::manifest::{timestamp_now, RunManifest};
use crate::plot::emit_plots;
use crate::RunError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "statetrack", version, about = "State-tracking benchmarks, counterfactual pairs and activation patching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset of every grid cell.
    Gen(RunArgs),
    /// Decode every sample and write the accuracy grid.
    Eval(RunArgs),
    /// Write counterfactual pairs.
    Pairs(RunArgs),
    /// Run residual and head patching grids.
    Patch(RunArgs),
    /// Aggregate attention of the top heads from a prior `patch` run.
    Attn {
        #[command(flatten)]
        run: RunArgs,
        /// Number of heads to select.
        #[arg(long)]
        k: Option<usize>,
        /// Directory holding head_grid.json and pairs.jsonl [default: --out].
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Render result files (or directories of them) as SVG.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config, or a manifest to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Protocol server URL, or `synthetic`. The bearer token is read from STATETRACK_TOKEN.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub domain: Option<Domain>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// Samples per cell (gen, eval), pair count (pairs, patch) or prompt count (attn).
    #[arg(long)]
    pub samples: Option<usize>,
}

impl RunArgs {
    fn has_overrides(&self) -> bool {
        self.seed.is_some() || self.endpoint.is_some() || self.domain.is_some() || self.scheme.is_some() || self.samples.is_some()
    }
}

/// Result of a command that did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Partial,
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, Option<RunManifest>), RunError> {
    let text = fs::read_to_string(path).map_err(RunError::io(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    if value.get("config_hash").is_some() {
        let manifest = RunManifest::load(path)?;
        Ok((manifest.config.clone(), Some(manifest)))
    } else {
        Ok((ExperimentConfig::from_json(&text)?, None))
    }
}

/// Flags over config file over defaults.
pub fn resolve_config(args: &RunArgs, command: &str) -> Result<(ExperimentConfig, Option<RunManifest>), RunError> {
    let (mut config, manifest) = match &args.config {
        Some(p) => load_config(p)?,
        None => (ExperimentConfig::default(), None),
    };
    if manifest.is_some() {
        if args.has_overrides() {
            return Err(RunError::Config("flags other than --out cannot be combined with a manifest".into()));
        }
        return Ok((config, manifest));
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = &args.endpoint {
        config.model_endpoint = e.clone();
    }
    if let Some(s) = args.scheme {
        config.patching.scheme = Some(s);
        if args.domain.is_none() {
            config.domain = s.domain();
        }
    }
    if let Some(d) = args.domain {
        if d != config.domain {
            // Axes and schemes of another domain no longer apply.
            config.grid = None;
            if args.scheme.is_none() {
                config.patching.scheme = None;
            }
        }
        config.domain = d;
    }
    if let Some(n) = args.samples {
        match command {
            "pairs" | "patch" => config.patching.pair_count = n,
            "attn" => config.attention.prompts = n,
            _ => config.samples_per_cell = n,
        }
    }
    config.validate()?;
    Ok((config, manifest))
}

fn execute_run(command: &str, args: &RunArgs, k: Option<usize>, from: Option<&Path>) -> Result<Status, RunError> {
    let (mut config, manifest) = resolve_config(args, command)?;
    if let Some(k) = k {
        if manifest.is_some() {
            return Err(RunError::Config("--k cannot be combined with a manifest".into()));
        }
        config.attention.k = k;
        config.validate()?;
    }
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    let opts = RunOptions { out_dir: out_dir.clone(), created_at: timestamp_now() };
    let backend = Backend::from_config(&config)?;
    if let Some(m) = &manifest {
        m.check_environment(command, &backend.info()?)?;
    }
    let mut status = Status::Ok;
    let fresh = match command {
        "gen" => {
            let (m, skipped) = run_generate(&config, &backend, &opts)?;
            for s in &skipped {
                eprintln!("skipped {s}");
            }
            m
        }
        "eval" => {
            let (m, grid) = run_evaluation(&config, &backend, &opts)?;
            for c in &grid.cells {
                if c.skipped.is_none() && c.completed < c.requested {
                    eprintln!("cell ({}, {}): {}/{} samples completed", c.row, c.col, c.completed, c.requested);
                }
            }
            if grid.is_partial() {
                status = Status::Partial;
            }
            m
        }
        "pairs" => run_pairs(&config, &backend, &opts)?.0,
        "patch" => run_patching_experiment(&config, &backend, &opts)?.0,
        "attn" => run_attention_analysis(&config, &backend, from.unwrap_or(&out_dir), &opts)?.0,
        other => unreachable!("unknown command {other}"),
    };
    if let Some(m) = &manifest {
        m.check_outputs(&fresh)?;
        println!("replay matches manifest ({} files)", fresh.outputs.len());
    }
    for o in &fresh.outputs {
        println!("{}", out_dir.join(&o.path).display());
    }
    Ok(status)
}

pub fn execute(cli: Cli) -> Result<Status, RunError> {
    match cli.command {
        Command::Gen(a) => execute_run("gen", &a, None, None),
        Command::Eval(a) => execute_run("eval", &a, None, None),
        Command::Pairs(a) => execute_run("pairs", &a, None, None),
        Command::Patch(a) => execute_run("patch", &a, None, None),
        Command::Attn { run, k, from } => execute_run("attn", &run, k, from.as_deref()),
        Command::Plot { inputs, out } => {
            for p in emit_plots(&inputs, &out)? {
                println!("{}", p.display());
            }
            Ok(Status::Ok)
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::Partial) => EXIT_PARTIAL,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
