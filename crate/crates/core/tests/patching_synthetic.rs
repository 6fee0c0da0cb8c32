// SPDX-License-Identifier: MIT OR Apache-2.0

use statetrack::counterfactual::{
    corrupt_dfa_irrelevant, generate_box_pair, generate_same_action_pair, irrelevant_actions_dfa, same_action_dfa,
    CounterfactualPair,
};
use statetrack::model::{ActivationSelector, InstrumentedModel, SyntheticConfig, SyntheticModel, Tokenizer};
use statetrack::patching::{
    aggregate_attention, logit_diff, patching_metric, residual_pair_grids, run_head_patch_grid,
    run_residual_patch_grid, top_k_heads, AxisKind, PatchGrid, PatchingError,
};
use statetrack::{Dfa, PatchingResult};

fn model(dfa: Option<Dfa>, carrier: (usize, usize), prop: usize, seed: u64) -> SyntheticModel {
    SyntheticModel::new(
        dfa,
        SyntheticConfig { num_layers: 5, num_heads: 3, d_model: 12, carrier, propagation_layer: prop, seed, ..Default::default() },
    )
    .unwrap()
}

fn expected_mask(m: &SyntheticModel, pair: &CounterfactualPair) -> Vec<Option<f64>> {
    let ids = m.tokenize(&pair.corrupted.prompt).unwrap();
    m.residual_path_mask(&ids).into_iter().flatten().map(|on| Some(if on { 1.0 } else { 0.0 })).collect()
}

fn assert_exact_grids(m: &SyntheticModel, pairs: &[CounterfactualPair]) {
    let grids: Vec<PatchingResult> = run_residual_patch_grid(m, pairs).unwrap();
    assert_eq!(grids.len(), 1, "pairs share one length");
    let g = &grids[0];
    assert_eq!(g.axis_kind, AxisKind::LayerByPosition);
    assert_eq!(g.pair_count, pairs.len());
    assert_eq!(g.grid, expected_mask(m, &pairs[0]));
    assert!(g.violations().is_empty());
    let heads: PatchingResult = run_head_patch_grid(m, pairs).unwrap();
    let (cl, ch) = m.config().carrier;
    assert_eq!(heads.argmax(), Some((cl, ch)));
    for l in 0..heads.rows {
        for h in 0..heads.cols {
            assert_eq!(heads.get(l, h), Some(if (l, h) == (cl, ch) { 1.0 } else { 0.0 }));
        }
    }
    assert_eq!(top_k_heads(&heads, 1).unwrap()[0], (cl, ch, 1.0));
}

#[test]
fn irrelevant_action_pairs_give_planted_grids() {
    let dfa = irrelevant_actions_dfa(6, 6, 2, 11).unwrap();
    let m = model(Some(dfa.clone()), (2, 1), 1, 3);
    let pairs: Vec<_> = (0..12).map(|s| corrupt_dfa_irrelevant(&dfa, 5, s).unwrap()).collect();
    assert_exact_grids(&m, &pairs);
}

#[test]
fn same_action_pairs_give_planted_grids() {
    let dfa = same_action_dfa(5, 5, 2, 2).unwrap();
    let m = model(Some(dfa.clone()), (3, 0), 2, 8);
    let pairs: Vec<_> = (0..12).map(|s| generate_same_action_pair(&dfa, 6, s).unwrap()).collect();
    assert_exact_grids(&m, &pairs);
}

#[test]
fn box_pairs_give_planted_grids() {
    let m = model(None, (1, 2), 0, 5);
    let pairs: Vec<_> = (0..12).map(|s| generate_box_pair(3, 3, 2, s, m.tokenizer()).unwrap()).collect();
    let grids: Vec<PatchingResult> = run_residual_patch_grid(&m, &pairs).unwrap();
    // Source positions vary between worlds, so each bucket is the mean of its masks.
    for g in &grids {
        let bucket: Vec<_> = pairs.iter().filter(|p| m.tokenize(&p.clean.prompt).unwrap().len() == g.cols).collect();
        let masks: Vec<_> = bucket.iter().map(|p| expected_mask(&m, p)).collect();
        let mean: Vec<Option<f64>> = (0..g.grid.len())
            .map(|i| Some(masks.iter().map(|mk| mk[i].unwrap()).sum::<f64>() / masks.len() as f64))
            .collect();
        assert_eq!(g.grid, mean);
    }
    assert_eq!(grids.iter().map(|g| g.pair_count).sum::<usize>(), pairs.len());
    let heads: PatchingResult = run_head_patch_grid(&m, &pairs).unwrap();
    assert_eq!(heads.argmax(), Some((1, 2)));
}

#[test]
fn averaging_commutes_with_per_pair_grids() {
    let dfa = same_action_dfa(4, 4, 2, 9).unwrap();
    let m = model(Some(dfa.clone()), (2, 2), 0, 1);
    let pairs: Vec<_> = (0..8).map(|s| generate_same_action_pair(&dfa, 5, s).unwrap()).collect();
    let per_pair = residual_pair_grids::<f64, _>(&m, &pairs).unwrap();
    let avg: Vec<PatchingResult> = run_residual_patch_grid(&m, &pairs).unwrap();
    let n = per_pair.len() as f64;
    for (i, cell) in avg[0].grid.iter().enumerate() {
        let mean = per_pair.iter().map(|g| g.cells[i].unwrap()).sum::<f64>() / n;
        assert!((cell.unwrap() - mean).abs() <= 1e-6);
    }
    let f32_grid: Vec<PatchGrid<f32>> = run_residual_patch_grid(&m, &pairs).unwrap();
    for (a, b) in avg[0].grid.iter().zip(&f32_grid[0].grid) {
        assert!((a.unwrap() - b.unwrap() as f64).abs() <= 1e-6);
    }
}

#[test]
fn self_patching_corrupted_run_scores_zero() {
    let dfa = irrelevant_actions_dfa(4, 4, 2, 0).unwrap();
    let m = model(Some(dfa.clone()), (2, 1), 1, 0);
    let pair = corrupt_dfa_irrelevant(&dfa, 3, 0).unwrap();
    let clean = m.tokenize(&pair.clean.prompt).unwrap();
    let corrupted = m.tokenize(&pair.corrupted.prompt).unwrap();
    let (ca, ka) = (m.tokenize(&pair.clean_answer).unwrap()[0], m.tokenize(&pair.corrupted_answer).unwrap()[0]);
    let clean_ld: f64 = logit_diff(&m.forward(&clean, &[]).unwrap().final_logits, ca, ka).unwrap();
    let caps: Vec<_> = (0..5).map(|l| ActivationSelector::residual(l, None)).collect();
    let own = m.forward(&corrupted, &caps).unwrap();
    let corrupted_ld: f64 = logit_diff(&own.final_logits, ca, ka).unwrap();
    assert!(clean_ld > 0.0);
    for t in &own.captured {
        for p in 0..corrupted.len() {
            let out = m.forward_with_patch(&corrupted, &[t.select_position(p).unwrap()]).unwrap();
            let ld: f64 = logit_diff(&out.final_logits, ca, ka).unwrap();
            assert_eq!(patching_metric(ld, clean_ld, corrupted_ld).unwrap(), 0.0);
        }
    }
}

#[test]
fn grid_errors() {
    let m = model(None, (0, 0), 0, 0);
    assert_eq!(run_head_patch_grid::<f64, _>(&m, &[]).unwrap_err(), PatchingError::EmptyPairSet);
    let mut pair = generate_box_pair(3, 2, 1, 0, m.tokenizer()).unwrap();
    pair.corrupted.prompt.push_str(" Box");
    assert!(matches!(
        run_residual_patch_grid::<f64, _>(&m, &[pair]),
        Err(PatchingError::MisalignedPair { index: 0, .. })
    ));
}

#[test]
fn identical_prompts_give_null_cells() {
    let m = model(None, (0, 0), 0, 0);
    let mut pair = generate_box_pair(3, 2, 1, 0, m.tokenizer()).unwrap();
    pair.corrupted = pair.clean.clone();
    let g: PatchingResult = run_head_patch_grid(&m, &[pair]).unwrap();
    assert!(g.grid.iter().all(Option::is_none));
    assert!(g.to_json().contains("null"));
}

#[test]
fn grids_serialize_deterministically() {
    let dfa = irrelevant_actions_dfa(5, 5, 2, 4).unwrap();
    let run = || {
        let m = model(Some(dfa.clone()), (2, 1), 1, 3);
        let pairs: Vec<_> = (0..6).map(|s| corrupt_dfa_irrelevant(&dfa, 2, s).unwrap()).collect();
        let r: Vec<PatchingResult> = run_residual_patch_grid(&m, &pairs).unwrap();
        let h: PatchingResult = run_head_patch_grid(&m, &pairs).unwrap();
        (r[0].to_json(), h.to_json())
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_aggregation() {
    let m = model(None, (2, 1), 1, 7);
    let prompt = "The hat is in Box A. Move the hat from Box A to Box C. The hat is in the Box";
    let ids = m.tokenize(prompt).unwrap();
    let one = aggregate_attention::<f64, _>(&m, &ids, &[(0, 0)]).unwrap();
    let row = m.forward(&ids, &[ActivationSelector::attention(0, 0, Some(ids.len() - 1))]).unwrap();
    let verbatim: Vec<f64> = row.captured[0].values.iter().map(|&v| v as f64).collect();
    assert_eq!(one.weights, verbatim);
    let carrier = aggregate_attention::<f64, _>(&m, &ids, &[(2, 1)]).unwrap();
    let source = m.read(&ids).source;
    assert_eq!(carrier.token_labels[source], " C");
    assert!((carrier.weights[source] - 0.9).abs() < 1e-6);
    let many = aggregate_attention::<f32, _>(&m, &ids, &[(0, 0), (2, 1), (4, 2)]).unwrap();
    assert!((many.total() - 1.0).abs() <= 1e-5);
    assert!(many.weights.iter().all(|&w| w >= 0.0));
    assert_eq!(aggregate_attention::<f64, _>(&m, &ids, &[]).unwrap_err(), PatchingError::NoHeads);
    assert!(matches!(aggregate_attention::<f64, _>(&m, &ids, &[(9, 0)]), Err(PatchingError::Model(_))));
}
