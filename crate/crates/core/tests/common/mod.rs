// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::BufReader;
use std::os::unix::net::UnixStream;
use std::sync::Arc;

use beliefscope::bridge::{serve_lm, BridgeClient};
use beliefscope::corpus::{FactTriplet, RelationTemplate, WsSentence};
use beliefscope::patchscope::Belief;
use beliefscope::model::{
    ChannelEntry, ChatMessage, ChatPrompt, InstrumentedLM, MockScenario, ScriptedMock, ScriptedMockSpec,
    TinyTransformer,
};

/// Standard basis vector.
pub fn unit(dim: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Plan entry.
pub fn entry(position: usize, layer: usize, channels: &[(&str, f32)]) -> ChannelEntry {
    ChannelEntry {
        position,
        layer,
        channels: channels.iter().map(|(b, e)| ((*b).to_owned(), *e)).collect(),
    }
}

/// Scenario with only a trigger and a plan.
pub fn scenario(trigger: &str, plan: Vec<ChannelEntry>) -> MockScenario {
    MockScenario {
        trigger: trigger.to_owned(),
        also: Vec::new(),
        reasoning: None,
        channel_plan: Some(plan),
        answer: None,
        choices: Vec::new(),
        injected_response: None,
    }
}

/// Spec over `(id, verbalization)` beliefs with one-hot codes of width `dim`.
pub fn mock_spec(beliefs: &[(&str, &str)], dim: usize, plan: Vec<ChannelEntry>) -> ScriptedMockSpec {
    let mut codebook = BTreeMap::new();
    let mut verbalizer = BTreeMap::new();
    for (i, (id, text)) in beliefs.iter().enumerate() {
        codebook.insert((*id).to_owned(), unit(dim, i));
        verbalizer.insert((*id).to_owned(), (*text).to_owned());
    }
    ScriptedMockSpec {
        belief_codebook: codebook,
        channel_plan: plan,
        verbalizer,
        layer_count: 8,
        supports_system_role: true,
        null_text: "nothing in particular".to_owned(),
        reasoning: "Let me think about this question carefully.".to_owned(),
        prompt_background: None,
        scenarios: Vec::new(),
    }
}

/// A small two-belief mock.
pub fn small_mock() -> ScriptedMock {
    let spec = mock_spec(
        &[("paris", "Paris"), ("rome", "Rome")],
        8,
        vec![
            entry(0, 5, &[("paris", 2.0)]),
            entry(2, 6, &[("rome", 1.0)]),
            entry(3, 6, &[("paris", 1.0), ("rome", 0.5)]),
        ],
    );
    ScriptedMock::new(spec).expect("valid mock spec")
}

/// Texts the tiny fixture tokenizer is built from.
pub const TINY_TEXTS: [&str; 4] = [
    "What is the capital of France? The capital of France is Paris.",
    "Sure, I'll tell you about x",
    "Let me think step by step. Final answer: Paris",
    "Rome London Berlin Madrid city country language",
];

/// A small random transformer.
pub fn small_tiny() -> TinyTransformer {
    TinyTransformer::from_corpus(&TINY_TEXTS, 512, 4, 16, 2, 7).expect("tiny model")
}

/// Serve `lm` on one end of a socket pair and return a client on the other.
pub fn bridged(lm: Arc<dyn InstrumentedLM>) -> BridgeClient {
    let (server, client) = UnixStream::pair().expect("socket pair");
    std::thread::spawn(move || {
        let reader = BufReader::new(server.try_clone().expect("clone"));
        let _ = serve_lm(lm.as_ref(), reader, server);
    });
    let read = client.try_clone().expect("clone");
    BridgeClient::from_streams(Box::new(read), Box::new(client)).expect("bridge handshake")
}

/// Single-turn chat prompt.
pub fn user(text: &str) -> ChatPrompt {
    ChatPrompt::chat(vec![ChatMessage::user(text)])
}

/// Single-alias belief with a lowercased id.
pub fn belief(text: &str) -> Belief {
    Belief::new(text.to_lowercase(), [text]).unwrap()
}

/// Triplets and templates reproducing the FK prompt exemplars.
pub fn fk_inputs() -> (Vec<FactTriplet>, BTreeMap<String, RelationTemplate>) {
    let rel = |q: &str, d: &str| RelationTemplate { question: q.into(), declarative: d.into(), lexical: None };
    let mut t = BTreeMap::new();
    t.insert("sport".to_owned(), rel("What sport does {} play?", "The sport played by {} is"));
    t.insert("work_location".to_owned(), rel("Where did {} work?", "{} worked in"));
    t.insert("manufacturer".to_owned(), rel("Who manufactured {}?", "{} was manufactured by"));
    t.insert("instrument".to_owned(), rel("What instrument does {} play?", "The instrument played by {} is"));
    t.insert("network".to_owned(), rel("On which network did {} premiere?", "The network {} premiered on is"));
    t.insert(
        "official_language".to_owned(),
        rel("What is the official language of {}?", "The official language of {} is"),
    );
    t.insert("capital".to_owned(), rel("What is the capital of {}?", "The capital of {} is"));
    t.insert("mother_tongue".to_owned(), rel("What is the mother tongue of {}?", "The mother tongue of {} is"));
    let triplet = |s: &str, r: &str, a: &str, b: &str| FactTriplet {
        subject: s.into(),
        relation_id: r.into(),
        true_object: belief(a),
        counter_object: belief(b),
    };
    let triplets = vec![
        triplet("LeBron James", "sport", "Basketball", "Tennis"),
        triplet("George Auriol", "work_location", "Paris", "London"),
        triplet("Infiniti QX", "manufacturer", "Nissan", "Fiat"),
        triplet("Toko Yasuda", "instrument", "guitar", "piano"),
        triplet("The Loner", "network", "CBS", "HBO"),
        triplet("Nykarleby", "official_language", "Swedish", "Spanish"),
        triplet("Afghanistan", "capital", "Kabul", "Ankara"),
        triplet("Emmanuel Macron", "mother_tongue", "French", "German"),
    ];
    (triplets, t)
}

/// Sentences reproducing the WS prompt exemplars.
pub fn ws_inputs() -> Vec<WsSentence> {
    let s = |sentence: &str, pronoun: &str, p: &str, i: &str| WsSentence {
        id: None,
        sentence: sentence.into(),
        pronoun: pronoun.into(),
        plausible: p.into(),
        implausible: i.into(),
    };
    vec![
        s("The bee landed on the flower because it had pollen.", "it", "flower", "bee"),
        s("When Debbie splashed Tina, she got in trouble.", "she", "Debbie", "Tina"),
        s("Jimbo attacked Bobbert because he stole an elephant from the zoo.", "he", "Bobbert", "Jimbo"),
        s("Gary envied Bill because he was rich.", "he", "Bill", "Gary"),
        s("The bird perched on the limb and it sang.", "it", "The bird", "The limb"),
    ]
}
