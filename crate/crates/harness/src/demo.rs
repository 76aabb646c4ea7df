// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale models built from a corpus, for exercising the harness end to end.
//!
//! The demo mock scripts each query so that counterfactual energy grows with
//! the manipulation's pressure. Its numbers say nothing about real models.

use std::collections::BTreeMap;

use beliefscope::corpus::{
    apply_manipulation, group_counters, BeliefQuery, Manipulation, FK_SYSTEM_PROMPT, NEURO_SYSTEM_PROMPT, WS_SYSTEM_PROMPT,
};
use beliefscope::model::{
    ChannelEntry, InjectedResponse, MockScenario, PromptBackground, ScriptedMockSpec, TinyTransformer, ANSWER_DELIMITER,
    CARRIER_TEXT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::HarnessError;

/// Layer count of the demo mock.
pub const DEMO_LAYERS: usize = 8;
/// Span positions the demo plans cover (default reasoning plus the delimiter).
const DEMO_SPAN: usize = 11;
const BACKGROUND: &str = "__background";
/// Marker that identifies self-report prompts.
const NEURO_MARKER: &str = "Only output the integer label.";

/// Share of active cells that carry the counterfactual under `m`.
fn pressure(m: Manipulation) -> f64 {
    match m {
        Manipulation::None => 0.1,
        Manipulation::InternalDoubt => 0.15,
        Manipulation::LexicalControl => 0.25,
        Manipulation::PrioritizeModel | Manipulation::PrioritizePlausibility => 0.3,
        Manipulation::UnreliableSource => 0.5,
        Manipulation::ReliableSource => 0.65,
        Manipulation::Assertion | Manipulation::PrioritizeImplausibility => 0.7,
        Manipulation::PrioritizeUser => 0.8,
    }
}

fn query_rng(id: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Scripted mock over every belief of `queries`, with `k` self-report classes.
pub fn demo_mock(queries: &[BeliefQuery], k: usize, seed: u64) -> Result<ScriptedMockSpec, HarnessError> {
    let counters = group_counters(queries);
    let mut verbalizer = BTreeMap::new();
    verbalizer.insert(BACKGROUND.to_owned(), "background".to_owned());
    for q in queries {
        for b in std::iter::once(&q.b_base).chain(q.b_counter.as_ref()) {
            verbalizer.entry(b.id.clone()).or_insert_with(|| b.canonical().to_owned());
        }
    }
    let ids: Vec<&String> = verbalizer.keys().collect();
    let codebook: BTreeMap<String, Vec<f32>> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut v = vec![0.0; ids.len()];
            v[i] = 1.0;
            ((*id).clone(), v)
        })
        .collect();

    let mut neuro = Vec::new();
    let mut tasks = Vec::new();
    for q in queries {
        let Some(counter) = q.b_counter.as_ref().or_else(|| counters.get(q.group())) else { continue };
        let mut rng = query_rng(&q.id, seed);
        let p = pressure(q.manipulation);
        let mut plan = Vec::new();
        // One belief per position, so positions owned by one belief are
        // candidate steering sites for the other.
        for pos in 0..DEMO_SPAN {
            let who = if rng.random_bool(p) { &counter.id } else { &q.b_base.id };
            // Every cell is active: a zero hidden state cannot be steered.
            for layer in 0..=DEMO_LAYERS {
                let energy: f32 = rng.random_range(0.3..1.0);
                plan.push(ChannelEntry { position: pos, layer, channels: vec![(who.clone(), energy)] });
            }
        }
        let user = apply_manipulation(q)?;
        tasks.push(MockScenario {
            trigger: user.clone(),
            also: q.system_placement.iter().cloned().collect(),
            reasoning: None,
            channel_plan: Some(plan),
            answer: None,
            choices: Vec::new(),
            injected_response: None,
        });
        neuro.push(MockScenario {
            trigger: user,
            also: vec![NEURO_MARKER.to_owned()],
            reasoning: Some(String::new()),
            channel_plan: Some(Vec::new()),
            answer: None,
            choices: (1..=k).map(|c| c.to_string()).collect(),
            injected_response: Some(InjectedResponse {
                belief: counter.id.clone(),
                threshold: 0.45,
                response: k.to_string(),
            }),
        });
    }
    // First match wins: self-report prompts, then system-placed variants,
    // then longer user texts before the texts they contain.
    neuro.sort_by(|a, b| b.trigger.len().cmp(&a.trigger.len()).then(a.trigger.cmp(&b.trigger)));
    neuro.dedup_by(|a, b| a.trigger == b.trigger);
    tasks.sort_by(|a, b| b.also.len().cmp(&a.also.len()).then(b.trigger.len().cmp(&a.trigger.len())));
    let mut scenarios = neuro;
    scenarios.extend(tasks);
    Ok(ScriptedMockSpec {
        belief_codebook: codebook,
        channel_plan: Vec::new(),
        verbalizer,
        layer_count: DEMO_LAYERS,
        supports_system_role: true,
        null_text: "nothing in particular".to_owned(),
        reasoning: "Let me think about this question carefully.".to_owned(),
        prompt_background: Some(PromptBackground { belief: BACKGROUND.to_owned(), energy: 1.0 }),
        scenarios,
    })
}

/// Random tiny transformer whose vocabulary covers the corpus prompts.
pub fn demo_tiny(
    queries: &[BeliefQuery],
    layers: usize,
    dim: usize,
    heads: usize,
    seed: u64,
) -> Result<TinyTransformer, HarnessError> {
    let mut texts: Vec<String> = vec![
        FK_SYSTEM_PROMPT.to_owned(),
        WS_SYSTEM_PROMPT.to_owned(),
        NEURO_SYSTEM_PROMPT.to_owned(),
        CARRIER_TEXT.to_owned(),
        ANSWER_DELIMITER.to_owned(),
    ];
    for q in queries {
        texts.push(apply_manipulation(q)?);
        texts.extend(q.system_placement.iter().cloned());
        for b in std::iter::once(&q.b_base).chain(q.b_counter.as_ref()) {
            texts.extend(b.verbalizations.iter().cloned());
        }
    }
    Ok(TinyTransformer::from_corpus(&texts, 4096, layers, dim, heads, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use beliefscope::corpus::{build_ws_corpus, WsSentence};
    use beliefscope::model::ScriptedMock;

    fn corpus() -> Vec<BeliefQuery> {
        let s = WsSentence {
            id: None,
            sentence: "The bee landed on the flower because it had pollen.".into(),
            pronoun: "it".into(),
            plausible: "flower".into(),
            implausible: "bee".into(),
        };
        build_ws_corpus(&[s], &[]).unwrap()
    }

    #[test]
    fn demo_mock_is_valid_and_deterministic() {
        let q = corpus();
        let a = demo_mock(&q, 3, 1).unwrap();
        assert_eq!(a, demo_mock(&q, 3, 1).unwrap());
        assert_ne!(a, demo_mock(&q, 3, 2).unwrap());
        assert_eq!(a.belief_codebook.len(), 3);
        assert_eq!(a.scenarios.len(), 2 * q.len() - 2, "two WS variants share the bare question");
        ScriptedMock::new(a).unwrap();
    }

    #[test]
    fn demo_tiny_builds() {
        let m = demo_tiny(&corpus(), 2, 16, 2, 0).unwrap();
        assert_eq!(beliefscope::model::InstrumentedLM::config(&m).layer_count, 2);
    }
}
