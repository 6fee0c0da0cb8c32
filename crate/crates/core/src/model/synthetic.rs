// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-process pseudo-transformer with a planted information path.
//!
//! The model reads the prompt symbolically and works out the answer token
//! (the next state a literal reader of the text predicts, the final box, or
//! the next fruit of the feasible set). It
//! also locates the *source* position, the token that determines the answer:
//! the last state mention before the final action, or the box letter of the
//! queried object's last placement.
//!
//! The answer code then travels along a fixed path:
//!
//! 1. `ResidualPre` at the source position, layers `propagation_layer..=carrier.layer`;
//! 2. the carrier head's `HeadOutput` at the last position;
//! 3. `ResidualPre` at the last position, layers after `carrier.layer`.
//!
//! Component 0 of each of those vectors holds the code; everything else any
//! site exposes is seed-derived noise that the model never reads. Patching a
//! path site overwrites the code carried from that point on, so patching
//! results are known exactly: 1 on the path, 0 elsewhere. Final logits are a
//! fixed per-vocabulary baseline plus [`ANSWER_MARGIN`] on the decoded code.

use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, WordTokenizer, UNK};
use super::{ActivationSelector, ActivationTensor, ForwardResult, InstrumentedModel, ModelError, ModelInfo, Site};
use crate::dfa::{ActionId, Dfa, StateId};
use crate::rng::hash_unit;
use crate::tasks::{fruit_oracle, DfaPromptReading, FruitWorld};

/// Logit boost given to the decoded answer code.
pub const ANSWER_MARGIN: f32 = 10.0;

/// Share of the carrier head's final-row attention placed on the source token.
pub const CARRIER_FOCUS: f64 = 0.9;

/// How the model chooses its answer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerPolicy {
    /// The true answer.
    #[default]
    Oracle,
    /// Always the first state or box mentioned in the prompt.
    StartState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    /// `(layer, head)` of the head that moves the answer to the last position.
    pub carrier: (usize, usize),
    /// First layer at which the source position's residual carries the answer.
    pub propagation_layer: usize,
    #[serde(default)]
    pub policy: AnswerPolicy,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { num_layers: 6, num_heads: 4, d_model: 16, carrier: (3, 2), propagation_layer: 1, policy: AnswerPolicy::Oracle, seed: 0 }
    }
}

#[derive(Debug)]
pub struct SyntheticModel {
    config: SyntheticConfig,
    dfa: Option<Dfa>,
    tok: &'static WordTokenizer,
    info: ModelInfo,
    base_logits: Vec<f32>,
}

/// Builds a synthetic model with `d_model = 4 * num_heads` and the oracle policy.
pub fn make_synthetic_model(
    dfa: Option<Dfa>,
    num_layers: usize,
    num_heads: usize,
    carrier: (usize, usize),
    propagation_layer: usize,
    seed: u64,
) -> Result<SyntheticModel, ModelError> {
    SyntheticModel::new(
        dfa,
        SyntheticConfig {
            num_layers,
            num_heads,
            d_model: 4 * num_heads,
            carrier,
            propagation_layer,
            policy: AnswerPolicy::Oracle,
            seed,
        },
    )
}

/// What the model extracted from a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reading {
    pub source: usize,
    pub code: u32,
}

impl SyntheticModel {
    pub fn new(dfa: Option<Dfa>, config: SyntheticConfig) -> Result<Self, ModelError> {
        let SyntheticConfig { num_layers, num_heads, d_model, carrier, propagation_layer, .. } = config;
        if num_layers == 0 || num_heads == 0 {
            return Err(ModelError::Bounds("num_layers and num_heads must be positive".into()));
        }
        if d_model == 0 || d_model % num_heads != 0 {
            return Err(ModelError::Bounds(format!("d_model {d_model} must be a positive multiple of num_heads {num_heads}")));
        }
        if carrier.0 >= num_layers || carrier.1 >= num_heads {
            return Err(ModelError::Bounds(format!("carrier {carrier:?} outside {num_layers}x{num_heads}")));
        }
        if propagation_layer > carrier.0 {
            return Err(ModelError::Bounds(format!(
                "propagation_layer {propagation_layer} after carrier layer {}",
                carrier.0
            )));
        }
        let tok = WordTokenizer::standard();
        let info = ModelInfo {
            name: "synthetic".into(),
            num_layers,
            num_heads,
            d_model,
            vocab_size: tok.vocab_size(),
        };
        let base_logits = (0..tok.vocab_size() as u64).map(|v| 0.5 * hash_unit(config.seed, &[4, v]) as f32).collect();
        Ok(SyntheticModel { config, dfa, tok, info, base_logits })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &'static WordTokenizer {
        self.tok
    }

    /// Source position and answer code for a token sequence.
    pub fn read(&self, ids: &[u32]) -> Reading {
        let words: Vec<&str> = ids.iter().map(|&i| self.tok.piece(i).trim_start()).collect();
        self.read_dfa(ids, &words)
            .or_else(|| self.read_box(ids, &words))
            .or_else(|| self.read_fruit(ids, &words))
            .unwrap_or(Reading { source: ids.len().saturating_sub(1), code: UNK })
    }

    fn id_of(&self, piece: &str) -> u32 {
        self.tok.id(piece).unwrap_or(UNK)
    }

    fn read_dfa(&self, ids: &[u32], w: &[&str]) -> Option<Reading> {
        if w.len() < 4 || w[..3] != ["Start", "at", "state"] {
            return None;
        }
        let ia = (1..w.len()).rev().find(|&i| w[i - 1] == "action")?;
        let open = ia + 4;
        if open >= w.len() || w[ia + 1..=open] != [",", "go", "to", "state"] {
            return None;
        }
        let generated = w.len() - open - 1;
        let (source, answer) = match self.config.policy {
            AnswerPolicy::StartState => (3, self.tok.id(&format!(" {}", w[3]))),
            AnswerPolicy::Oracle => {
                let s = (1..ia).rev().find(|&j| w[j - 1] == "state")?;
                let reading = DfaPromptReading::parse(&self.tok.decode(&ids[..=open]))?;
                let target = reading
                    .demonstrated(&StateId::from(w[s]), &ActionId::from(w[ia]))
                    .cloned()
                    .or_else(|| self.dfa.as_ref().and_then(|d| d.lookup(&StateId::from(w[s]), &ActionId::from(w[ia])).cloned()));
                (s, target.and_then(|t| self.tok.id(&format!(" {t}"))))
            }
        };
        let continuation = [answer.unwrap_or(UNK), self.id_of(".")];
        Some(Reading { source, code: continuation[generated.min(1)] })
    }

    fn read_box(&self, ids: &[u32], w: &[&str]) -> Option<Reading> {
        let n = w.len();
        // Query: The X is in the Box
        let j = (4..n.saturating_sub(1))
            .rev()
            .find(|&j| w[j] == "the" && w[j + 1] == "Box" && w[j - 1] == "in" && w[j - 2] == "is" && w[j - 4] == "The")?;
        let object = w[j - 3];
        let generated = n - (j + 2);
        let mut first_box = None;
        let mut source = None;
        let query_start = j - 4;
        for i in 0..query_start {
            if i + 5 < query_start && w[i] == "The" && w[i + 2..i + 5] == ["is", "in", "Box"] {
                first_box.get_or_insert(i + 5);
                if w[i + 1] == object {
                    source = Some(i + 5);
                }
            } else if i + 8 < query_start
                && w[i] == "Move"
                && w[i + 1] == "the"
                && w[i + 2] == object
                && w[i + 3] == "from"
                && w[i + 4] == "Box"
                && w[i + 6] == "to"
                && w[i + 7] == "Box"
            {
                source = Some(i + 8);
            }
        }
        let source = match self.config.policy {
            AnswerPolicy::Oracle => source?,
            AnswerPolicy::StartState => first_box?,
        };
        let continuation = [ids[source], self.id_of(".")];
        Some(Reading { source, code: continuation[generated.min(1)] })
    }

    fn read_fruit(&self, ids: &[u32], w: &[&str]) -> Option<Reading> {
        let n = w.len();
        let j = (2..n).rev().find(|&j| w[j] == "the" && w[j - 1] == "have" && w[j - 2] == "can")?;
        let world = FruitWorld::parse_prompt(&self.tok.decode(&ids[..=j]))?;
        let feasible = fruit_oracle(&world, &world.queried_person).ok()?;
        let mut continuation = Vec::new();
        for (k, f) in feasible.iter().enumerate() {
            if k > 0 {
                continuation.push(self.id_of(","));
            }
            continuation.push(self.id_of(&format!(" {f}")));
        }
        continuation.push(self.id_of("."));
        let generated = n - (j + 1);
        Some(Reading { source: j, code: continuation[generated.min(continuation.len() - 1)] })
    }

    fn path_position(&self, layer: usize, source: usize, last: usize) -> Option<usize> {
        let (carrier_layer, _) = self.config.carrier;
        if layer < self.config.propagation_layer {
            None
        } else if layer <= carrier_layer {
            Some(source)
        } else {
            Some(last)
        }
    }

    /// `mask[layer][position]` is true on the residual path for `ids`.
    pub fn residual_path_mask(&self, ids: &[u32]) -> Vec<Vec<bool>> {
        let n = ids.len();
        let r = self.read(ids);
        (0..self.config.num_layers)
            .map(|l| {
                let p = self.path_position(l, r.source, n.saturating_sub(1));
                (0..n).map(|pos| Some(pos) == p).collect()
            })
            .collect()
    }

    fn decode_code(&self, v: f32) -> u32 {
        let r = v.round();
        if r.is_finite() && r >= 0.0 && (r as usize) < self.info.vocab_size {
            r as u32
        } else {
            UNK
        }
    }

    fn noise(&self, tag: u64, a: u64, b: u64, c: u64, d: u64) -> f32 {
        hash_unit(self.config.seed, &[tag, a, b, c, d]) as f32
    }

    fn residual_row(&self, ids: &[u32], layer: usize, pos: usize, code: Option<f32>) -> Vec<f32> {
        let mut row: Vec<f32> =
            (0..self.info.d_model).map(|k| self.noise(1, layer as u64, pos as u64, ids[pos] as u64, k as u64)).collect();
        if let Some(c) = code {
            row[0] = c;
        }
        row
    }

    fn head_row(&self, ids: &[u32], layer: usize, head: usize, pos: usize, code: Option<f32>) -> Vec<f32> {
        let d_head = self.info.d_head();
        let mut row: Vec<f32> = (0..d_head)
            .map(|k| self.noise(2, (layer * self.info.num_heads + head) as u64, pos as u64, ids[pos] as u64, k as u64))
            .collect();
        if let Some(c) = code {
            row[0] = c;
        }
        row
    }

    fn attention_row(&self, ids: &[u32], layer: usize, head: usize, query: usize, source: usize, last: usize) -> Vec<f32> {
        let n = ids.len();
        let mut row = vec![0.0f64; n];
        if (layer, head) == self.config.carrier && query == last {
            if query == 0 {
                row[0] = 1.0;
            } else {
                let rest = (1.0 - CARRIER_FOCUS) / query as f64;
                for (k, v) in row.iter_mut().enumerate().take(query + 1) {
                    *v = if k == source { CARRIER_FOCUS } else { rest };
                }
            }
        } else {
            let hl = (layer * self.info.num_heads + head) as u64;
            let scores: Vec<f64> =
                (0..=query).map(|k| 2.0 * hash_unit(self.config.seed, &[3, hl, query as u64, k as u64, ids[k] as u64])).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (k, s) in scores.iter().enumerate() {
                row[k] = (s - max).exp() / total;
            }
        }
        row.into_iter().map(|v| v as f32).collect()
    }

    fn run(
        &self,
        ids: &[u32],
        capture: &[ActivationSelector],
        patches: &[ActivationTensor],
    ) -> Result<ForwardResult, ModelError> {
        let n = ids.len();
        if n == 0 {
            return Err(ModelError::EmptySequence);
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.info.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: self.info.vocab_size });
        }
        for sel in capture {
            sel.validate(&self.info, n)?;
        }
        for p in patches {
            p.check(&self.info, n)?;
        }
        let last = n - 1;
        let reading = self.read(ids);
        let (carrier_layer, carrier_head) = self.config.carrier;

        // Later patches in the list win when two address the same site.
        let patch_at = |site: Site, layer: usize, head: Option<usize>, pos: usize| -> Option<f32> {
            patches
                .iter()
                .rev()
                .filter(|p| p.selector.site == site && p.selector.layer == layer && p.selector.head == head)
                .find_map(|p| p.at_position(pos).map(|row| row[0]))
        };

        let mut code = reading.code as f32;
        let mut residual_code: Vec<Option<f32>> = vec![None; self.config.num_layers];
        let mut head_code = None;
        for (layer, slot) in residual_code.iter_mut().enumerate() {
            if let Some(pos) = self.path_position(layer, reading.source, last) {
                if let Some(v) = patch_at(Site::ResidualPre, layer, None, pos) {
                    code = self.decode_code(v) as f32;
                }
                *slot = Some(code);
            }
            if layer == carrier_layer {
                if let Some(v) = patch_at(Site::HeadOutput, carrier_layer, Some(carrier_head), last) {
                    code = self.decode_code(v) as f32;
                }
                head_code = Some(code);
            }
        }
        let answer = self.decode_code(code) as usize;
        let mut final_logits = self.base_logits.clone();
        final_logits[answer] += ANSWER_MARGIN;

        let captured = capture
            .iter()
            .map(|sel| {
                let positions: Vec<usize> = match sel.position {
                    Some(p) => vec![p],
                    None => (0..n).collect(),
                };
                let mut values = Vec::new();
                for pos in positions {
                    let row = match sel.site {
                        Site::ResidualPre => {
                            let on_path = self.path_position(sel.layer, reading.source, last) == Some(pos);
                            self.residual_row(ids, sel.layer, pos, if on_path { residual_code[sel.layer] } else { None })
                        }
                        Site::HeadOutput => {
                            let h = sel.head.expect("validated");
                            let is_carrier = (sel.layer, h) == self.config.carrier && pos == last;
                            self.head_row(ids, sel.layer, h, pos, if is_carrier { head_code } else { None })
                        }
                        Site::AttentionPattern => {
                            self.attention_row(ids, sel.layer, sel.head.expect("validated"), pos, reading.source, last)
                        }
                    };
                    values.extend(row);
                }
                ActivationTensor { selector: *sel, shape: sel.natural_shape(&self.info, n), values }
            })
            .collect();
        Ok(ForwardResult { final_logits, captured })
    }
}

impl Tokenizer for SyntheticModel {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        Ok(self.tok.encode(text))
    }
}

impl InstrumentedModel for SyntheticModel {
    fn info(&self) -> Result<ModelInfo, ModelError> {
        Ok(self.info.clone())
    }

    fn detokenize(&self, ids: &[u32]) -> Result<String, ModelError> {
        Ok(self.tok.decode(ids))
    }

    fn forward(&self, ids: &[u32], capture: &[ActivationSelector]) -> Result<ForwardResult, ModelError> {
        self.run(ids, capture, &[])
    }

    fn forward_with_patch(&self, ids: &[u32], patches: &[ActivationTensor]) -> Result<ForwardResult, ModelError> {
        self.run(ids, &[], patches)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::model::{argmax, greedy_generate};

    fn example_dfa() -> Dfa {
        Dfa::from_parts(
            vec!["a".into(), "b".into()],
            vec!["K".into(), "M".into()],
            [("a".into(), "M".into(), "b".into()), ("b".into(), "K".into(), "a".into())],
            "a".into(),
            BTreeSet::new(),
            0,
        )
        .unwrap()
    }

    const DFA_PROMPT: &str =
        "Start at state a. Take action M, go to state b. Take action K, go to state a. Take action M, go to state";

    fn model(carrier: (usize, usize), prop: usize) -> SyntheticModel {
        make_synthetic_model(Some(example_dfa()), 4, 3, carrier, prop, 17).unwrap()
    }

    #[test]
    fn predicts_example_dfa_answer() {
        let m = model((2, 1), 1);
        let ids = m.tokenize(DFA_PROMPT).unwrap();
        let out = m.forward(&ids, &[]).unwrap();
        assert_eq!(argmax(&out.final_logits).unwrap() as u32, m.tokenizer().id(" b").unwrap());
        let r = m.read(&ids);
        // The last state mention is the `a` after "Take action K, go to state".
        assert_eq!(m.tokenizer().piece(ids[r.source]), " a");
        let (_, text) = greedy_generate(&m, &ids, 4).unwrap();
        assert_eq!(text, " b.");
    }

    #[test]
    fn predicts_box_and_fruit_answers() {
        let m = make_synthetic_model(None, 2, 2, (1, 0), 0, 1).unwrap();
        let box_prompt = "The hat is in Box A. The glove is in Box B. The ball is in Box A. \
             Move the hat from Box A to Box B. Move the ball from Box A to Box B. The ball is in the Box";
        let (_, text) = greedy_generate(&m, &m.tokenize(box_prompt).unwrap(), 4).unwrap();
        assert_eq!(text, " B.");
        let glove = box_prompt.replace("The ball is in the Box", "The glove is in the Box");
        let ids = m.tokenize(&glove).unwrap();
        assert_eq!(m.tokenizer().piece(ids[m.read(&ids).source]), " B");
        let fruit = "Kate, Sarah, Jack, Dean walk into a fruit store. There are only 4 fruits: grape, apple, peach, pear. \
             Each person gets a different fruit. Sarah gives Jack the peach. Sarah can have the";
        let (_, text) = greedy_generate(&m, &m.tokenize(fruit).unwrap(), 16).unwrap();
        assert_eq!(text, " grape, apple, pear.");
    }

    #[test]
    fn start_state_policy() {
        let cfg = SyntheticConfig { policy: AnswerPolicy::StartState, ..SyntheticConfig::default() };
        let m = SyntheticModel::new(Some(example_dfa()), cfg).unwrap();
        let ids = m.tokenize(DFA_PROMPT).unwrap();
        let out = m.forward(&ids, &[]).unwrap();
        assert_eq!(argmax(&out.final_logits).unwrap() as u32, m.tokenizer().id(" a").unwrap());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = model((2, 1), 0);
        let ids = m.tokenize(DFA_PROMPT).unwrap();
        let caps: Vec<_> = (0..4).flat_map(|l| (0..3).map(move |h| ActivationSelector::attention(l, h, None))).collect();
        let out = m.forward(&ids, &caps).unwrap();
        for t in &out.captured {
            let n = ids.len();
            for q in 0..n {
                let row = &t.values[q * n..(q + 1) * n];
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-5, "{} row {q} sums to {s}", t.selector);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!(row[q + 1..].iter().all(|&v| v == 0.0), "causal");
            }
        }
    }

    #[test]
    fn carrier_patch_restores_clean_answer() {
        let m = model((0, 0), 0);
        let clean = m.tokenize(DFA_PROMPT).unwrap();
        // Corrupt the context state a -> b; delta(b, M) is undefined so the answer changes.
        let corrupted = m.tokenize(&DFA_PROMPT.replace("go to state a. Take action M", "go to state b. Take action M")).unwrap();
        assert_eq!(clean.len(), corrupted.len());
        let sel = ActivationSelector::head_output(0, 0, None);
        let cache = m.forward(&clean, &[sel]).unwrap();
        let corrupt_out = m.forward(&corrupted, &[]).unwrap();
        let b = m.tokenizer().id(" b").unwrap() as usize;
        assert_ne!(argmax(&corrupt_out.final_logits), Some(b));
        let patched = m.forward_with_patch(&corrupted, &cache.captured).unwrap();
        assert_eq!(argmax(&patched.final_logits), Some(b));
        assert_eq!(patched.final_logits, cache.final_logits);

        // Non-carrier heads leave the output alone.
        let other = ActivationSelector::head_output(0, 1, None);
        let cache = m.forward(&clean, &[other]).unwrap();
        let patched = m.forward_with_patch(&corrupted, &cache.captured).unwrap();
        assert_eq!(patched.final_logits, corrupt_out.final_logits);
    }

    #[test]
    fn empty_patch_equals_forward_and_errors() {
        let m = model((1, 2), 1);
        let ids = m.tokenize(DFA_PROMPT).unwrap();
        assert_eq!(m.forward_with_patch(&ids, &[]).unwrap(), m.forward(&ids, &[]).unwrap());
        assert_eq!(m.forward(&[], &[]), Err(ModelError::EmptySequence));
        let bad = ActivationTensor { selector: ActivationSelector::residual(0, None), shape: vec![2, 12], values: vec![0.0; 24] };
        assert!(matches!(m.forward_with_patch(&ids, &[bad]), Err(ModelError::ShapeMismatch { .. })));
        assert!(matches!(m.forward(&ids, &[ActivationSelector::residual(9, None)]), Err(ModelError::InvalidSelector(_))));
        assert!(make_synthetic_model(None, 2, 2, (2, 0), 0, 0).is_err());
        assert!(make_synthetic_model(None, 2, 2, (1, 0), 2, 0).is_err());
    }

    #[test]
    fn residual_mask_follows_path() {
        let m = model((2, 1), 1);
        let ids = m.tokenize(DFA_PROMPT).unwrap();
        let mask = m.residual_path_mask(&ids);
        let r = m.read(&ids);
        let last = ids.len() - 1;
        for (l, row) in mask.iter().enumerate() {
            let expected = match l {
                0 => None,
                1 | 2 => Some(r.source),
                _ => Some(last),
            };
            for (p, &on) in row.iter().enumerate() {
                assert_eq!(on, Some(p) == expected, "layer {l} pos {p}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model((2, 1), 1);
        let ids = m.tokenize(DFA_PROMPT).unwrap();
        let caps = [ActivationSelector::residual(1, None), ActivationSelector::head_output(3, 0, Some(2))];
        assert_eq!(m.forward(&ids, &caps).unwrap(), m.forward(&ids, &caps).unwrap());
    }
}
