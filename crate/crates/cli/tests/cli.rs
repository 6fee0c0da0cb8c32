// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs through the command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use statetrack::model::{AnswerPolicy, InstrumentedModel, ModelError, SyntheticConfig, Tokenizer};
use statetrack::tasks::AnswerSpec;
use statetrack::{AttentionSummary, Dfa, Domain, SyntheticModel};
use statetrack_cli::accuracy::{cell_instance, AccuracyGrid, SampleRecord};
use statetrack_cli::backend::Backend;
use statetrack_cli::cli::{run_cli, EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME, EXIT_USAGE};
use statetrack_cli::config::{ExperimentConfig, GridAxes};
use statetrack_cli::experiment::{attention_file, manifest_name, HEAD_GRID_FILE};
use statetrack_cli::run_accuracy_grid;
use statetrack_remote::wire::{ErrorBody, ForwardRequest, ForwardResponse, TokenizeRequest, TokenizeResponse, WireLogits, WireTensor};

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["statetrack"];
    full.extend_from_slice(args);
    run_cli(full)
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, config.to_json()).unwrap();
    p
}

fn read_grid(dir: &Path) -> AccuracyGrid {
    serde_json::from_str(&fs::read_to_string(dir.join("accuracy_grid.json")).unwrap()).unwrap()
}

fn small(domain: Domain) -> ExperimentConfig {
    let grid = match domain {
        Domain::FruitStore => GridAxes::Fruit { n_axis: vec![2, 4, 6], clues_axis: vec![0, 1, 3] },
        _ => GridAxes::States { states_axis: vec![2, 3, 7], transitions_axis: vec![1, 4, 12] },
    };
    ExperimentConfig { domain, grid: Some(grid), samples_per_cell: 12, seed: 3, ..Default::default() }
}

#[test]
fn perfect_synthetic_model_scores_one_everywhere() {
    for domain in [Domain::AbstractDfa, Domain::BoxTracking, Domain::FruitStore] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_config(tmp.path(), &small(domain));
        let out = tmp.path().join("eval");
        assert_eq!(cli(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
        let grid = read_grid(&out);
        assert!(grid.violations().is_empty());
        for c in &grid.cells {
            if domain == Domain::FruitStore && c.col >= c.row {
                assert!(c.skipped.is_some() && c.accuracy.is_none());
                continue;
            }
            assert_eq!(c.completed, 12, "{domain} {c:?}");
            assert_eq!(c.accuracy, Some(1.0), "{domain} {c:?}");
            if domain == Domain::FruitStore {
                assert_eq!(c.relaxed_accuracy, Some(1.0));
            }
        }
        // Per-sample records add up to the grid.
        let samples: Vec<SampleRecord> = fs::read_to_string(out.join("samples.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        for c in &grid.cells {
            let mine: Vec<_> = samples.iter().filter(|s| (s.row, s.col) == (c.row, c.col)).collect();
            assert_eq!(mine.len(), c.completed);
            assert_eq!(mine.iter().filter(|s| s.correct == Some(true)).count(), c.correct);
        }
    }
}

// The biased model always names the first state or box in the prompt, so
// its accuracy is the share of instances whose answer is that token.
fn start_token(domain: Domain, prompt: &str) -> String {
    let w: Vec<&str> = prompt.split(' ').collect();
    match domain {
        Domain::AbstractDfa => format!(" {}", w[3].trim_end_matches('.')),
        _ => format!(" {}", w[5].trim_end_matches('.')),
    }
}

#[test]
fn start_state_bias_matches_analytic_accuracy() {
    for domain in [Domain::AbstractDfa, Domain::BoxTracking] {
        let mut config = small(domain);
        config.synthetic.policy = AnswerPolicy::StartState;
        let run = run_accuracy_grid(&config, &Backend::from_config(&config).unwrap()).unwrap();
        let mut some_wrong = false;
        for c in &run.grid.cells {
            let hits = (0..config.samples_per_cell)
                .filter(|&i| {
                    let (inst, _) = cell_instance(&config, c.row, c.col, i).unwrap();
                    inst.answer == AnswerSpec::SingleToken(start_token(domain, &inst.prompt))
                })
                .count();
            assert_eq!(c.correct, hits, "{domain} {c:?}");
            assert_eq!(c.accuracy, Some(hits as f64 / config.samples_per_cell as f64));
            some_wrong |= hits < config.samples_per_cell;
        }
        assert!(some_wrong, "the bias should cost accuracy somewhere");
    }
}

#[test]
fn usage_and_runtime_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["gen", "--bogus"]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
    assert_eq!(cli(&["gen", "--samples", "0", "--out", out]), EXIT_USAGE);
    assert_eq!(cli(&["gen", "--domain", "nowhere", "--out", out]), EXIT_USAGE);
    assert_eq!(cli(&["patch", "--domain", "fruit_store", "--out", out]), EXIT_USAGE);
    assert_eq!(cli(&["eval", "--endpoint", "http://127.0.0.1:9", "--samples", "1", "--out", out]), EXIT_RUNTIME);
    assert_eq!(cli(&["attn", "--out", out]), EXIT_RUNTIME);
    let missing = tmp.path().join("missing.json");
    assert_eq!(cli(&["gen", "--config", missing.to_str().unwrap(), "--out", out]), EXIT_RUNTIME);
}

#[test]
fn manifest_replay_reproduces_or_reports_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(cli(&["patch", "--scheme", "irrelevant", "--samples", "8", "--seed", "4", "--out", a.to_str().unwrap()]), EXIT_OK);
    let manifest = a.join(manifest_name("patch"));
    let m = manifest.to_str().unwrap();
    assert_eq!(cli(&["patch", "--config", m, "--out", b.to_str().unwrap()]), EXIT_OK);
    for entry in ["pairs.jsonl", "dfa.json", HEAD_GRID_FILE] {
        assert_eq!(fs::read(a.join(entry)).unwrap(), fs::read(b.join(entry)).unwrap());
    }
    assert_eq!(cli(&["patch", "--config", m, "--seed", "5", "--out", b.to_str().unwrap()]), EXIT_USAGE);
    assert_eq!(cli(&["gen", "--config", m, "--out", b.to_str().unwrap()]), EXIT_RUNTIME);

    // A recorded hash that no longer matches is drift.
    let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    value["outputs"][0]["sha256"] = "0".repeat(64).into();
    fs::write(&manifest, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    assert_eq!(cli(&["patch", "--config", m, "--out", b.to_str().unwrap()]), EXIT_RUNTIME);

    // So is a model that changed shape.
    value["outputs"] = serde_json::from_str(&fs::read_to_string(b.join(manifest_name("patch"))).unwrap())
        .map(|v: serde_json::Value| v["outputs"].clone())
        .unwrap();
    value["model_info"]["num_heads"] = 99.into();
    fs::write(&manifest, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    assert_eq!(cli(&["patch", "--config", m, "--out", b.to_str().unwrap()]), EXIT_RUNTIME);
}

#[test]
fn attention_follows_the_carrier() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();
    assert_eq!(cli(&["patch", "--scheme", "same_action", "--samples", "6", "--out", d]), EXIT_OK);
    assert_eq!(cli(&["attn", "--k", "1", "--samples", "3", "--out", d]), EXIT_OK);
    let config = SyntheticConfig::default();
    let dfa = Dfa::from_json(&fs::read_to_string(dir.join("dfa.json")).unwrap()).unwrap();
    let model = SyntheticModel::new(Some(dfa), config).unwrap();
    for i in 0..3 {
        let s: AttentionSummary = serde_json::from_str(&fs::read_to_string(dir.join(attention_file(i))).unwrap()).unwrap();
        assert_eq!(s.heads, vec![config.carrier]);
        assert!((s.total() - 1.0).abs() < 1e-6);
        let ids: Vec<u32> = s.token_labels.iter().flat_map(|t| model.tokenize(t).unwrap()).collect();
        assert_eq!(ids.len(), s.weights.len());
        let src = model.read(&ids).source;
        assert!((s.weights[src] - 0.9).abs() < 1e-6, "{:?}", s.weights);
    }

    // Default k is five; every emitted file is a distribution.
    let five = tmp.path().join("five");
    assert_eq!(cli(&["attn", "--from", d, "--out", five.to_str().unwrap()]), EXIT_OK);
    let ranked: serde_json::Value = serde_json::from_str(&fs::read_to_string(five.join("top_heads.json")).unwrap()).unwrap();
    assert_eq!(ranked.as_array().unwrap().len(), 5);
    assert_eq!((ranked[0]["layer"].as_u64(), ranked[0]["head"].as_u64()), (Some(3), Some(2)));
    for i in 0..5 {
        let s: AttentionSummary = serde_json::from_str(&fs::read_to_string(five.join(attention_file(i))).unwrap()).unwrap();
        assert!((s.total() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn plots_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    assert_eq!(cli(&["patch", "--scheme", "box", "--samples", "5", "--out", r]), EXIT_OK);
    let cfg = write_config(tmp.path(), &small(Domain::FruitStore));
    assert_eq!(cli(&["eval", "--config", cfg.to_str().unwrap(), "--out", r]), EXIT_OK);
    assert_eq!(cli(&["attn", "--out", r]), EXIT_OK);
    let p1 = tmp.path().join("p1");
    let p2 = tmp.path().join("p2");
    assert_eq!(cli(&["plot", r, "--out", p1.to_str().unwrap()]), EXIT_OK);
    assert_eq!(cli(&["plot", r, "--out", p2.to_str().unwrap()]), EXIT_OK);
    let mut names: Vec<String> = fs::read_dir(&p1).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert!(names.contains(&"head_grid.svg".to_owned()) && names.contains(&"accuracy_grid.svg".to_owned()));
    assert!(names.contains(&"attention_000.svg".to_owned()));
    for n in &names {
        assert_eq!(fs::read(p1.join(n)).unwrap(), fs::read(p2.join(n)).unwrap(), "{n}");
    }
    // Infeasible fruit cells are drawn hatched.
    assert!(fs::read_to_string(p1.join("accuracy_grid.svg")).unwrap().contains("cell null"));

    let one = tmp.path().join("one.json");
    fs::write(
        &one,
        r#"{"axis_kind":"layer_by_head","rows":1,"cols":1,"grid":[0.5],"clean_ld":1.0,"corrupted_ld":0.0,"pair_count":1}"#,
    )
    .unwrap();
    assert_eq!(cli(&["plot", one.to_str().unwrap(), "--out", p1.to_str().unwrap()]), EXIT_OK);
    let svg = fs::read_to_string(p1.join("one.svg")).unwrap();
    assert_eq!(svg.matches("class=\"cell").count(), 1);
    fs::write(&one, "[1, 2]").unwrap();
    assert_eq!(cli(&["plot", one.to_str().unwrap(), "--out", p1.to_str().unwrap()]), EXIT_RUNTIME);
}

// A server whose forward pass fails on long prompts.
struct Flaky {
    model: SyntheticModel,
    max_len: usize,
}

fn fail(e: ModelError) -> Response {
    let (status, body) = ErrorBody::from_model_error(&e);
    (StatusCode::from_u16(status).unwrap(), Json(body)).into_response()
}

async fn info(State(s): State<Arc<Flaky>>) -> Response {
    Json(s.model.info().unwrap()).into_response()
}

async fn tokenize(State(s): State<Arc<Flaky>>, Json(req): Json<TokenizeRequest>) -> Response {
    Json(TokenizeResponse { ids: s.model.tokenize(&req.text).unwrap() }).into_response()
}

async fn forward(State(s): State<Arc<Flaky>>, Json(req): Json<ForwardRequest>) -> Response {
    if req.ids.len() > s.max_len {
        return fail(ModelError::Protocol("simulated outage".into()));
    }
    match s.model.forward(&req.ids, &req.capture) {
        Ok(out) => Json(ForwardResponse {
            final_logits: WireLogits::encode(&out.final_logits),
            captured: out.captured.iter().map(WireTensor::from_tensor).collect(),
        })
        .into_response(),
        Err(e) => fail(e),
    }
}

fn serve(state: Flaky) -> String {
    let state = Arc::new(state);
    let (tx, rx) = std::sync::mpsc::channel();
    thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/v1/info", get(info))
                .route("/v1/tokenize", post(tokenize))
                .route("/v1/forward", post(forward))
                .with_state(state);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

#[test]
fn partial_failures_exit_three_with_counts() {
    let url = serve(Flaky { model: SyntheticModel::new(None, SyntheticConfig::default()).unwrap(), max_len: 40 });
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        domain: Domain::BoxTracking,
        grid: Some(GridAxes::States { states_axis: vec![3], transitions_axis: vec![0, 8] }),
        samples_per_cell: 3,
        model_endpoint: url,
        ..Default::default()
    };
    let cfg = write_config(tmp.path(), &config);
    let out = tmp.path().join("eval");
    assert_eq!(cli(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_PARTIAL);
    let grid = read_grid(&out);
    let short = grid.get(3, 0).unwrap();
    let long = grid.get(3, 8).unwrap();
    assert_eq!((short.completed, short.accuracy), (3, Some(1.0)));
    assert_eq!((long.completed, long.accuracy), (0, None));
    let samples = fs::read_to_string(out.join("samples.jsonl")).unwrap();
    assert_eq!(samples.lines().filter(|l| l.contains("simulated outage")).count(), 3);
}
