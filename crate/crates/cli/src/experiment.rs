// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run directories for every subcommand: datasets, accuracy grids,
//! counterfactual pairs, patching grids and attention summaries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statetrack::counterfactual::{
    check_alignment, corrupt_dfa_irrelevant, generate_box_pair, generate_same_action_pair, irrelevant_actions_dfa,
    same_action_dfa, CounterfactualError, PAIR_RETRY_BUDGET,
};
use statetrack::model::Tokenizer;
use statetrack::patching::{aggregate_attention, run_head_patch_grid, run_residual_patch_grid, top_k_heads, PatchGrid};
use statetrack::rng::derive_seed;
use statetrack::tasks::write_jsonl;
use statetrack::{AttentionSummary, CounterfactualPair, Dfa, PairRecord, PatchingResult, Scheme};

use crate::accuracy::{generate_dataset, run_accuracy_grid, AccuracyGrid};
use crate::backend::Backend;
use crate::config::ExperimentConfig;
use crate::manifest::{OutputWriter, RunManifest};
use crate::RunError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const ACCURACY_FILE: &str = "accuracy_grid.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const DFA_FILE: &str = "dfa.json";
pub const HEAD_GRID_FILE: &str = "head_grid.json";
pub const TOP_HEADS_FILE: &str = "top_heads.json";

/// Manifest file name of a subcommand's run directory.
pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

pub fn residual_file(len: usize) -> String {
    format!("residual_len{len}.json")
}

pub fn attention_file(index: usize) -> String {
    format!("attention_{index:03}.json")
}

/// Where a run writes and when it claims to have happened.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub created_at: String,
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items).expect("writing to memory");
    buf
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializes");
    s.push('\n');
    s
}

fn with_pool<R: Send>(config: &ExperimentConfig, f: impl FnOnce() -> R + Send) -> Result<R, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn finish(
    out: OutputWriter,
    command: &str,
    config: &ExperimentConfig,
    backend: &Backend,
    opts: &RunOptions,
) -> Result<RunManifest, RunError> {
    out.finish(&manifest_name(command), command, config, backend.info()?, opts.created_at.clone())
}

/// Writes the grid's dataset. Infeasible cells are listed in the result.
pub fn run_generate(
    config: &ExperimentConfig,
    backend: &Backend,
    opts: &RunOptions,
) -> Result<(RunManifest, Vec<String>), RunError> {
    config.validate()?;
    let (records, skipped) = generate_dataset(config);
    let mut out = OutputWriter::create(&opts.out_dir)?;
    out.write(DATASET_FILE, &jsonl(&records))?;
    Ok((finish(out, "gen", config, backend, opts)?, skipped))
}

/// Evaluates the accuracy grid and writes it with the per-sample records.
pub fn run_evaluation(
    config: &ExperimentConfig,
    backend: &Backend,
    opts: &RunOptions,
) -> Result<(RunManifest, AccuracyGrid), RunError> {
    let run = run_accuracy_grid(config, backend)?;
    let mut out = OutputWriter::create(&opts.out_dir)?;
    out.write_text(ACCURACY_FILE, &pretty(&run.grid))?;
    out.write(SAMPLES_FILE, &jsonl(&run.samples))?;
    Ok((finish(out, "eval", config, backend, opts)?, run.grid))
}

/// Counterfactual pairs of one scheme, with the automaton they share.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub scheme: Scheme,
    pub dfa: Option<Dfa>,
    pub pairs: Vec<CounterfactualPair>,
}

/// Resamples a DFA pair until it is aligned under `tokenizer`.
fn aligned_dfa_pair(
    tokenizer: &dyn Tokenizer,
    seed: u64,
    make: impl Fn(u64) -> Result<CounterfactualPair, CounterfactualError>,
) -> Result<CounterfactualPair, RunError> {
    for attempt in 0..PAIR_RETRY_BUDGET as u64 {
        let pair = make(derive_seed(seed, &[attempt]))?;
        let report = check_alignment(&pair, tokenizer)?;
        if report.aligned && report.answers_single_token {
            return Ok(pair);
        }
    }
    Err(CounterfactualError::Misaligned { attempts: PAIR_RETRY_BUDGET }.into())
}

/// `config.patching.pair_count` pairs of the configured scheme. DFA
/// schemes share one automaton with the scheme's pattern planted.
pub fn generate_pairs(config: &ExperimentConfig, tokenizer: &dyn Tokenizer) -> Result<PairSet, RunError> {
    let scheme = config.scheme()?;
    let p = &config.patching;
    if p.pair_count == 0 {
        return Err(RunError::Config("patching.pair_count must be at least 1".into()));
    }
    let alphabet = config.alphabet_size.unwrap_or(p.num_states);
    let dfa_seed = derive_seed(config.seed, &[10, 0]);
    let pair_seed = |i: usize| derive_seed(config.seed, &[10, 1, i as u64]);
    let (dfa, pairs) = match scheme {
        Scheme::BoxInitialOrLastMove => {
            let pairs = (0..p.pair_count)
                .map(|i| generate_box_pair(p.num_boxes, p.num_objects, p.num_moves, pair_seed(i), tokenizer))
                .collect::<Result<Vec<_>, _>>()?;
            (None, pairs)
        }
        Scheme::DfaSameActionDifferentState => {
            let dfa = same_action_dfa(p.num_states, alphabet, config.density, dfa_seed)?;
            let pairs = (0..p.pair_count)
                .map(|i| aligned_dfa_pair(tokenizer, pair_seed(i), |s| generate_same_action_pair(&dfa, p.transitions, s)))
                .collect::<Result<Vec<_>, _>>()?;
            (Some(dfa), pairs)
        }
        Scheme::DfaIrrelevantActions => {
            let dfa = irrelevant_actions_dfa(p.num_states, alphabet, config.density, dfa_seed)?;
            let pairs = (0..p.pair_count)
                .map(|i| aligned_dfa_pair(tokenizer, pair_seed(i), |s| corrupt_dfa_irrelevant(&dfa, p.noop_run_length, s)))
                .collect::<Result<Vec<_>, _>>()?;
            (Some(dfa), pairs)
        }
    };
    Ok(PairSet { scheme, dfa, pairs })
}

fn pair_id(i: usize) -> String {
    format!("pair{i:04}")
}

fn write_pair_set(out: &mut OutputWriter, set: &PairSet) -> Result<(), RunError> {
    let records: Vec<PairRecord> = set.pairs.iter().enumerate().map(|(i, p)| p.to_record(pair_id(i))).collect();
    out.write(PAIRS_FILE, &jsonl(&records))?;
    if let Some(dfa) = &set.dfa {
        out.write_text(DFA_FILE, &(dfa.to_json() + "\n"))?;
    }
    Ok(())
}

fn malformed(path: &Path, reason: impl ToString) -> RunError {
    RunError::MalformedResultFile { path: path.to_owned(), reason: reason.to_string() }
}

/// Reads a pair file (and its automaton, when present) from `dir`.
pub fn read_pair_set(dir: &Path) -> Result<Option<PairSet>, RunError> {
    let path = dir.join(PAIRS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(RunError::io(&path))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| malformed(&path, format!("line {}: {e}", n + 1)))?;
        pairs.push(rec.to_pair());
    }
    let scheme = pairs.first().map(|p| p.scheme).ok_or_else(|| malformed(&path, "no pairs"))?;
    let dfa_path = dir.join(DFA_FILE);
    let dfa = if dfa_path.exists() {
        let text = fs::read_to_string(&dfa_path).map_err(RunError::io(&dfa_path))?;
        Some(Dfa::from_json(&text).map_err(|e| malformed(&dfa_path, e))?)
    } else {
        None
    };
    Ok(Some(PairSet { scheme, dfa, pairs }))
}

/// Generates and writes counterfactual pairs.
pub fn run_pairs(config: &ExperimentConfig, backend: &Backend, opts: &RunOptions) -> Result<(RunManifest, PairSet), RunError> {
    config.validate()?;
    let set = generate_pairs(config, backend.tokenizer())?;
    let mut out = OutputWriter::create(&opts.out_dir)?;
    write_pair_set(&mut out, &set)?;
    Ok((finish(out, "pairs", config, backend, opts)?, set))
}

#[derive(Clone, Debug)]
pub struct PatchOutputs {
    pub pairs: PairSet,
    /// One grid per prompt length, shortest first.
    pub residual: Vec<PatchingResult>,
    pub head: PatchingResult,
}

/// Generates pairs, runs the residual and head grids, writes everything.
pub fn run_patching_experiment(
    config: &ExperimentConfig,
    backend: &Backend,
    opts: &RunOptions,
) -> Result<(RunManifest, PatchOutputs), RunError> {
    config.validate()?;
    let set = generate_pairs(config, backend.tokenizer())?;
    let (residual, head) = with_pool(config, || {
        backend.with_model(set.dfa.as_ref(), |m| {
            let residual: Vec<PatchGrid<f64>> = run_residual_patch_grid(m, &set.pairs)?;
            let head: PatchGrid<f64> = run_head_patch_grid(m, &set.pairs)?;
            Ok((residual, head))
        })
    })??;
    let mut out = OutputWriter::create(&opts.out_dir)?;
    write_pair_set(&mut out, &set)?;
    for g in &residual {
        out.write_text(&residual_file(g.cols), &(g.to_json() + "\n"))?;
    }
    out.write_text(HEAD_GRID_FILE, &(head.to_json() + "\n"))?;
    let manifest = finish(out, "patch", config, backend, opts)?;
    Ok((manifest, PatchOutputs { pairs: set, residual, head }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    /// Null when the heads came from the config rather than a grid.
    pub metric: Option<f64>,
}

/// Loads a head grid written by `patch`.
pub fn read_head_grid(path: &Path) -> Result<PatchingResult, RunError> {
    if !path.exists() {
        return Err(RunError::MissingPriorResult(path.to_owned()));
    }
    let text = fs::read_to_string(path).map_err(RunError::io(path))?;
    let grid = PatchGrid::<f64>::from_json(&text).map_err(|e| malformed(path, e))?;
    let problems = grid.violations();
    if !problems.is_empty() {
        return Err(malformed(path, problems.join("; ")));
    }
    Ok(grid)
}

/// Selects heads (explicit list, else the top `k` of the head grid in
/// `prior_dir`) and aggregates their final-position attention on the clean
/// prompts of the pair file in `prior_dir`, generating pairs if none exist.
pub fn run_attention_analysis(
    config: &ExperimentConfig,
    backend: &Backend,
    prior_dir: &Path,
    opts: &RunOptions,
) -> Result<(RunManifest, Vec<AttentionSummary>), RunError> {
    config.validate()?;
    let ranked: Vec<RankedHead> = match &config.attention.heads {
        Some(heads) => heads.iter().map(|&(layer, head)| RankedHead { layer, head, metric: None }).collect(),
        None => {
            let grid = read_head_grid(&prior_dir.join(HEAD_GRID_FILE))?;
            top_k_heads(&grid, config.attention.k)?
                .into_iter()
                .map(|(layer, head, m)| RankedHead { layer, head, metric: Some(m) })
                .collect()
        }
    };
    let heads: Vec<(usize, usize)> = ranked.iter().map(|h| (h.layer, h.head)).collect();
    let set = match read_pair_set(prior_dir)? {
        Some(s) => s,
        None => generate_pairs(config, backend.tokenizer())?,
    };
    let prompts: Vec<&CounterfactualPair> = set.pairs.iter().take(config.attention.prompts.max(1)).collect();
    let summaries = with_pool(config, || {
        backend.with_model(set.dfa.as_ref(), |m| {
            prompts
                .iter()
                .map(|p| {
                    let ids = m.tokenize(&p.clean.prompt)?;
                    let s: AttentionSummary = aggregate_attention(m, &ids, &heads)?;
                    Ok(s)
                })
                .collect::<Result<Vec<_>, RunError>>()
        })
    })??;
    let mut out = OutputWriter::create(&opts.out_dir)?;
    out.write_text(TOP_HEADS_FILE, &pretty(&ranked))?;
    for (i, s) in summaries.iter().enumerate() {
        out.write_text(&attention_file(i), &(s.to_json() + "\n"))?;
    }
    Ok((finish(out, "attn", config, backend, opts)?, summaries))
}
