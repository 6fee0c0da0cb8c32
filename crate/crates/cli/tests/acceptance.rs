// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria. Each test prints one PASS/FAIL line to stderr
//! (uncaptured) and fails if its criterion is not met.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use statetrack::counterfactual::{check_alignment, pair_violations};
use statetrack::dfa::{generate_dfa, sample_trajectory, step, StateId};
use statetrack::model::{SyntheticConfig, WordTokenizer};
use statetrack::patching::{patching_metric, run_head_patch_grid, run_residual_patch_grid, PatchGrid};
use statetrack::rng::derive_seed;
use statetrack::tasks::words::{fruits, names};
use statetrack::tasks::{
    box_oracle, fruit_oracle, render_abstract_dfa, render_fruit_store, BoxMove, BoxWorld, Clue, FruitWorld,
};
use statetrack::{Dfa, Scheme, SyntheticModel, Trajectory};
use statetrack_cli::backend::Backend;
use statetrack_cli::config::{ExperimentConfig, GridAxes};
use statetrack_cli::experiment::{generate_pairs, run_generate, run_patching_experiment, RunOptions};

fn report(name: &str, result: Result<String, String>) {
    let line = match &result {
        Ok(detail) => format!("PASS {name}: {detail}"),
        Err(detail) => format!("FAIL {name}: {detail}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(e) = result {
        panic!("{name}: {e}");
    }
}

fn pick(seed: u64, path: &[u64], n: usize) -> usize {
    (derive_seed(seed, path) % n as u64) as usize
}

// ---------------------------------------------------------------- fruit

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Fruits `person` holds in some bijection satisfying every clue, found by
/// trying all of them.
fn brute_force(world: &FruitWorld, perms: &[Vec<usize>], person: usize) -> Vec<String> {
    let p = |name: &str| world.people.iter().position(|x| x == name);
    let f = |name: &str| world.fruits.iter().position(|x| x == name);
    let mut seen = BTreeSet::new();
    for perm in perms {
        // perm[person] = fruit index
        let ok = world.clues.iter().all(|c| match c {
            Clue::Takes { person, fruit } => matches!((p(person), f(fruit)), (Some(a), Some(b)) if perm[a] == b),
            Clue::Gives { giver, receiver, fruit } => match (p(giver), p(receiver), f(fruit)) {
                (Some(g), Some(r), Some(b)) => perm[r] == b && perm[g] != b,
                _ => false,
            },
        });
        if ok {
            seen.insert(perm[person]);
        }
    }
    world.fruits.iter().enumerate().filter(|(i, _)| seen.contains(i)).map(|(_, s)| s.clone()).collect()
}

fn random_world(n: usize, seed: u64) -> FruitWorld {
    let people: Vec<String> = names()[..n].iter().map(|s| s.to_string()).collect();
    let fruit_names: Vec<String> = fruits()[..n].iter().map(|s| s.to_string()).collect();
    let num_clues = pick(seed, &[0], n + 1);
    let clues = (0..num_clues as u64)
        .map(|k| {
            let fruit = fruit_names[pick(seed, &[1, k], n)].clone();
            let a = pick(seed, &[2, k], n);
            if pick(seed, &[3, k], 2) == 0 {
                Clue::Takes { person: people[a].clone(), fruit }
            } else {
                let b = (a + 1 + pick(seed, &[4, k], n - 1)) % n;
                Clue::Gives { giver: people[a].clone(), receiver: people[b].clone(), fruit }
            }
        })
        .collect();
    FruitWorld { people: people.clone(), fruits: fruit_names, clues, queried_person: people[0].clone() }
}

#[test]
fn fruit_oracle_matches_brute_force() {
    let start = Instant::now();
    let perms: Vec<Vec<Vec<usize>>> = (0..=6).map(permutations).collect();
    let mut checked = 0;
    let mut sets = 0;
    let mut failure = None;
    for i in 0..1000u64 {
        let n = 2 + (i as usize % 5);
        // Half consistent generated worlds, half arbitrary (possibly contradictory) clue sets.
        let world = if i % 2 == 0 {
            render_fruit_store(n, pick(i, &[9], n), derive_seed(7, &[i])).expect("generated").0
        } else {
            random_world(n, derive_seed(8, &[i]))
        };
        sets += 1;
        for (pi, person) in world.people.iter().enumerate() {
            let got = fruit_oracle(&world, person).expect("known person");
            let want = brute_force(&world, &perms[n], pi);
            checked += 1;
            if got != want && failure.is_none() {
                failure = Some(format!("{world:?} / {person}: oracle {got:?}, brute force {want:?}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let result = match failure {
        Some(f) => Err(f),
        None if secs >= 60.0 => Err(format!("took {secs:.1}s")),
        None => Ok(format!("{sets} clue sets, {checked} queries, n in 2..=6, {secs:.2}s")),
    };
    report("fruit oracle equals brute force", result);
}

// ----------------------------------------------------------- trajectories

#[test]
fn trajectories_replay_through_step() {
    let axes = GridAxes::default_for(statetrack::Domain::AbstractDfa);
    let cells: Vec<(usize, usize)> =
        axes.rows().iter().flat_map(|&r| axes.cols().iter().map(move |&c| (r, c))).collect();
    let density = statetrack::dfa::DEFAULT_DENSITY;
    let total = 10_000;
    let mut violations = Vec::new();
    for i in 0..total {
        let (n, t) = cells[i % cells.len()];
        let dfa = generate_dfa(n, n, density, derive_seed(1, &[i as u64, 0])).expect("dfa");
        let traj = sample_trajectory(&dfa, t, derive_seed(1, &[i as u64, 1])).expect("trajectory");
        if traj.steps.len() != t {
            violations.push(format!("#{i}: {} steps, wanted {t}", traj.steps.len()));
            continue;
        }
        let mut state = traj.start.clone();
        if &state != dfa.start() {
            violations.push(format!("#{i}: starts at {state}"));
        }
        for (k, s) in traj.steps.iter().enumerate() {
            match step(&dfa, &state, &s.action) {
                Ok(next) if next == s.next => state = next,
                other => {
                    violations.push(format!("#{i} step {k}: {other:?} vs {}", s.next));
                    break;
                }
            }
        }
    }
    let result = if violations.is_empty() {
        Ok(format!("{total} trajectories over {} grid cells, 0 violations", cells.len()))
    } else {
        Err(format!("{} violations, first {}", violations.len(), violations[0]))
    };
    report("trajectory soundness", result);
}

// ---------------------------------------------------------------- metric

#[test]
fn patching_metric_endpoints_are_exact() {
    let mut checked = 0;
    let mut bad = Vec::new();
    for i in 0..2000u64 {
        let u = |k: u64| (derive_seed(3, &[i, k]) >> 11) as f64 / (1u64 << 53) as f64;
        let clean = (u(0) - 0.5) * 10f64.powi((i % 13) as i32 - 4);
        let corrupted = (u(1) - 0.5) * 10f64.powi((i % 7) as i32 - 2);
        if (clean - corrupted).abs() <= 1e-6 {
            continue;
        }
        let one = patching_metric(clean, clean, corrupted).unwrap();
        let zero = patching_metric(corrupted, clean, corrupted).unwrap();
        let (c32, k32) = (clean as f32, corrupted as f32);
        let one32 = patching_metric(c32, c32, k32).unwrap();
        let zero32 = patching_metric(k32, c32, k32).unwrap();
        checked += 1;
        if one != 1.0 || zero != 0.0 || one32 != 1.0 || zero32 != 0.0 {
            bad.push(format!("clean {clean}, corrupted {corrupted}: {one} {zero} {one32} {zero32}"));
        }
    }
    let result = if bad.is_empty() {
        Ok(format!("{checked} baselines in f64 and f32, 1.0 and 0.0 exactly"))
    } else {
        Err(bad.join("; "))
    };
    report("patching metric endpoints", result);
}

// ----------------------------------------------------- planted carrier

fn expected_residual(model: &SyntheticModel, grid: &PatchGrid<f64>, pairs: &[statetrack::CounterfactualPair]) -> Vec<Option<f64>> {
    let tok = WordTokenizer::standard();
    let masks: Vec<Vec<Vec<bool>>> = pairs
        .iter()
        .map(|p| tok.encode(&p.clean.prompt))
        .filter(|ids| ids.len() == grid.cols)
        .map(|ids| model.residual_path_mask(&ids))
        .collect();
    let mut out = Vec::new();
    for l in 0..grid.rows {
        for pos in 0..grid.cols {
            let sum: f64 = masks.iter().map(|m| if m[l][pos] { 1.0 } else { 0.0 }).sum();
            out.push(Some(sum / masks.len() as f64));
        }
    }
    out
}

#[test]
fn planted_carrier_is_localized() {
    let runs = 100u64;
    let mut head_hits = 0;
    let mut residual_hits = 0;
    let mut failures = Vec::new();
    for run in 0..runs {
        let num_layers = 2 + pick(run, &[0], 7);
        let num_heads = 2 + pick(run, &[1], 5);
        let carrier = (pick(run, &[2], num_layers), pick(run, &[3], num_heads));
        let propagation_layer = pick(run, &[4], carrier.0 + 1);
        let synthetic = SyntheticConfig {
            num_layers,
            num_heads,
            d_model: 4 * num_heads,
            carrier,
            propagation_layer,
            seed: derive_seed(run, &[5]),
            ..Default::default()
        };
        let scheme = Scheme::ALL[run as usize % Scheme::ALL.len()];
        let mut config = ExperimentConfig { domain: scheme.domain(), seed: run, synthetic, ..Default::default() };
        config.patching.scheme = Some(scheme);
        config.patching.pair_count = 4;
        config.patching.transitions = 1 + pick(run, &[6], 8);
        config.patching.noop_run_length = pick(run, &[7], 6);
        let set = generate_pairs(&config, WordTokenizer::standard()).expect("pairs");
        let model = SyntheticModel::new(set.dfa.clone(), synthetic).expect("model");
        let head: PatchGrid<f64> = run_head_patch_grid(&model, &set.pairs).expect("head grid");
        let residual: Vec<PatchGrid<f64>> = run_residual_patch_grid(&model, &set.pairs).expect("residual grid");
        let head_ok = head.argmax() == Some(carrier)
            && head.grid.iter().enumerate().all(|(i, v)| {
                *v == Some(if (i / head.cols, i % head.cols) == carrier { 1.0 } else { 0.0 })
            });
        let residual_ok = residual.iter().all(|g| g.grid == expected_residual(&model, g, &set.pairs));
        head_hits += usize::from(head_ok);
        residual_hits += usize::from(residual_ok);
        if !(head_ok && residual_ok) {
            failures.push(format!("run {run} ({scheme}, carrier {carrier:?}): head {head_ok}, residual {residual_ok}"));
        }
    }
    let result = if failures.is_empty() {
        Ok(format!("head argmax {head_hits}/{runs}, residual mask {residual_hits}/{runs}"))
    } else {
        Err(format!("head {head_hits}/{runs}, residual {residual_hits}/{runs}; {}", failures.join("; ")))
    };
    report("planted carrier localization", result);
}

// ------------------------------------------------------- counterfactuals

#[test]
fn counterfactual_pairs_are_valid() {
    let tok = WordTokenizer::standard();
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    for scheme in Scheme::ALL {
        let mut config = ExperimentConfig { domain: scheme.domain(), seed: 2024, ..Default::default() };
        config.patching.scheme = Some(scheme);
        config.patching.pair_count = 1000;
        let set = generate_pairs(&config, tok).expect("pairs");
        let mut ok = 0;
        for (i, pair) in set.pairs.iter().enumerate() {
            let mut v = pair_violations(pair, set.dfa.as_ref());
            let report = check_alignment(pair, tok).expect("tokenizes");
            if !report.aligned {
                v.push("token counts differ".into());
            }
            if !report.answers_single_token {
                v.push("answer is not one token".into());
            }
            if scheme != Scheme::BoxInitialOrLastMove && report.multi_token_edit {
                v.push("edit spans several tokens".into());
            }
            if report.differing_positions.is_empty() {
                v.push("prompts tokenize identically".into());
            }
            if v.is_empty() {
                ok += 1;
            } else if bad.len() < 3 {
                bad.push(format!("{scheme} #{i}: {}", v.join(", ")));
            }
        }
        lines.push(format!("{scheme} {ok}/{}", set.pairs.len()));
        if ok != 1000 {
            bad.push(format!("{scheme}: {ok}/1000"));
        }
    }
    let result = if bad.is_empty() { Ok(lines.join(", ")) } else { Err(bad.join("; ")) };
    report("counterfactual validity", result);
}

// ------------------------------------------------------------- templates

#[test]
fn templates_match_worked_examples() {
    let mut bad = Vec::new();
    let box_world = BoxWorld {
        boxes: vec!["A".into(), "B".into()],
        objects: vec!["hat".into(), "glove".into(), "ball".into()],
        initial: [("hat", "A"), ("glove", "B"), ("ball", "A")].into_iter().map(|(o, b)| (o.into(), b.into())).collect(),
        moves: vec![
            BoxMove { object: "hat".into(), from: "A".into(), to: "B".into() },
            BoxMove { object: "ball".into(), from: "A".into(), to: "B".into() },
        ],
    };
    let box_prompt = "The hat is in Box A. The glove is in Box B. The ball is in Box A. Move the hat from Box A to Box B. \
                      Move the ball from Box A to Box B. The glove is in the Box";
    if box_world.render("glove") != box_prompt {
        bad.push(format!("box prompt {:?}", box_world.render("glove")));
    }
    if box_oracle(&box_world, "glove").unwrap() != "B" {
        bad.push("box answer".into());
    }

    let dfa = Dfa::from_parts(
        vec!["a".into(), "b".into()],
        vec!["K".into(), "M".into()],
        [("a".into(), "M".into(), "b".into()), ("b".into(), "K".into(), "a".into())],
        "a".into(),
        BTreeSet::new(),
        0,
    )
    .unwrap();
    let traj = Trajectory {
        start: StateId::from("a"),
        steps: vec![
            statetrack::dfa::Step { action: "M".into(), next: "b".into() },
            statetrack::dfa::Step { action: "K".into(), next: "a".into() },
            statetrack::dfa::Step { action: "M".into(), next: "b".into() },
        ],
    };
    let inst = render_abstract_dfa(&dfa, &traj).unwrap();
    if inst.prompt != "Start at state a. Take action M, go to state b. Take action K, go to state a. Take action M, go to state" {
        bad.push(format!("dfa prompt {:?}", inst.prompt));
    }
    if inst.answer.completion() != " b" {
        bad.push(format!("dfa answer {:?}", inst.answer.completion()));
    }

    let fruit_world = FruitWorld {
        people: ["Kate", "Sarah", "Jack", "Dean"].map(String::from).to_vec(),
        fruits: ["grape", "apple", "peach", "pear"].map(String::from).to_vec(),
        clues: vec![Clue::Gives { giver: "Sarah".into(), receiver: "Jack".into(), fruit: "peach".into() }],
        queried_person: "Sarah".into(),
    };
    let fruit_prompt = "Kate, Sarah, Jack, Dean walk into a fruit store. There are only 4 fruits: grape, apple, peach, pear. \
                        Each person gets a different fruit. Sarah gives Jack the peach. Sarah can have the";
    if fruit_world.render() != fruit_prompt {
        bad.push(format!("fruit prompt {:?}", fruit_world.render()));
    }
    let answer = fruit_oracle(&fruit_world, "Sarah").unwrap().join(", ");
    if answer != "grape, apple, pear" {
        bad.push(format!("fruit answer {answer:?}"));
    }
    let result = if bad.is_empty() { Ok("box, abstract DFA and fruit store byte-exact".into()) } else { Err(bad.join("; ")) };
    report("template conformance", result);
}

// ----------------------------------------------------------- determinism

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_and_patch_are_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut summary = Vec::new();
    let mut bad = Vec::new();
    let mut gen_config = ExperimentConfig {
        grid: Some(GridAxes::States { states_axis: vec![2, 5, 26], transitions_axis: vec![1, 10, 100] }),
        samples_per_cell: 10,
        seed: 11,
        ..Default::default()
    };
    let mut cases: Vec<(&str, ExperimentConfig)> = Vec::new();
    for domain in [statetrack::Domain::AbstractDfa, statetrack::Domain::BoxTracking] {
        gen_config.domain = domain;
        cases.push(("gen", gen_config.clone()));
    }
    for scheme in Scheme::ALL {
        let mut c = ExperimentConfig { domain: scheme.domain(), seed: 5, ..Default::default() };
        c.patching.scheme = Some(scheme);
        c.patching.pair_count = 20;
        cases.push(("patch", c));
    }
    for (k, (command, config)) in cases.iter().enumerate() {
        let backend = Backend::from_config(config).unwrap();
        let mut outputs = Vec::new();
        for attempt in 0..2 {
            let opts = RunOptions { out_dir: tmp.path().join(format!("{k}_{attempt}")), created_at: "2024-01-01T00:00:00Z".into() };
            match *command {
                "gen" => {
                    run_generate(config, &backend, &opts).unwrap();
                }
                _ => {
                    run_patching_experiment(config, &backend, &opts).unwrap();
                }
            }
            outputs.push(dir_bytes(&opts.out_dir));
        }
        let files = outputs[0].len();
        if outputs[0] != outputs[1] {
            bad.push(format!("{command} {}: outputs differ", config.domain));
        }
        summary.push(format!("{command} {} ({files} files)", config.patching.scheme.map_or(config.domain.to_string(), |s| s.to_string())));
    }
    let result = if bad.is_empty() { Ok(format!("identical across two runs: {}", summary.join(", "))) } else { Err(bad.join("; ")) };
    report("determinism", result);
}
