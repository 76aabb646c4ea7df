// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompts for every (task, manipulation) pair against hand-written
//! expected texts.

mod common;

use beliefscope::corpus::{
    assemble_prompt, build_fk_corpus, build_ws_corpus, from_jsonl, to_jsonl, BeliefQuery, Manipulation, Task,
};
use beliefscope::model::{ChatPrompt, Role};
use serde::Deserialize;

use common::{fk_inputs, ws_inputs};

#[derive(Deserialize)]
struct Golden {
    id: String,
    system_role: bool,
    system: String,
    user: String,
    b_base: String,
    b_counter: Option<String>,
}

fn corpus() -> Vec<BeliefQuery> {
    let (triplets, templates) = fk_inputs();
    let mut q = build_fk_corpus(&triplets, &templates).unwrap();
    q.extend(build_ws_corpus(&ws_inputs(), &[]).unwrap());
    q
}

fn turns(p: &ChatPrompt) -> (String, String) {
    let ChatPrompt::Chat { messages } = p else { panic!("chat prompt expected") };
    assert_eq!(messages.len(), 2);
    assert_eq!(messages[0].role, Role::System);
    assert_eq!(messages[1].role, Role::User);
    (messages[0].content.clone(), messages[1].content.clone())
}

#[test]
fn every_pair_matches_golden() {
    let goldens: Vec<Golden> = serde_json::from_str(include_str!("golden/prompts.json")).unwrap();
    let queries = corpus();
    let mut covered = std::collections::BTreeSet::new();
    for g in &goldens {
        let q = queries.iter().find(|q| q.id == g.id).unwrap_or_else(|| panic!("no query {}", g.id));
        let (system, user) = turns(&assemble_prompt(q, g.system_role).unwrap());
        assert_eq!(system, g.system, "{} system", g.id);
        assert_eq!(user, g.user, "{} user", g.id);
        assert_eq!(q.b_base.canonical(), g.b_base, "{} base", g.id);
        assert_eq!(q.b_counter.as_ref().map(|b| b.canonical().to_owned()), g.b_counter, "{} counter", g.id);
        covered.insert((q.task, q.manipulation));
    }
    for task in [Task::Fk, Task::Ws] {
        for &m in task.manipulations() {
            assert!(covered.contains(&(task, m)), "{task:?}/{m:?} has no golden");
        }
    }
}

#[test]
fn corpus_counts_and_ids() {
    let q = corpus();
    assert_eq!(q.len(), 8 * 8 + 5 * 5);
    for query in &q {
        query.validate().unwrap();
    }
    let fk0: Vec<&str> = q.iter().filter(|x| x.group() == "fk/000000").map(|x| x.manipulation.slug()).collect();
    assert_eq!(fk0.len(), 8);
    assert!(q.iter().all(|x| x.manipulation != Manipulation::PrioritizePlausibility || x.task == Task::Ws));
}

#[test]
fn ws_aliases_drop_shared_and_stop_words() {
    let q = corpus();
    let bird = q.iter().find(|x| x.id == "ws/000004/none").unwrap();
    assert_eq!(bird.b_base.id, "the bird");
    assert_eq!(bird.b_base.verbalizations, vec!["The bird".to_owned(), "bird".to_owned()]);
    assert_eq!(bird.b_counter.as_ref().unwrap().verbalizations, vec!["The limb".to_owned(), "limb".to_owned()]);
}

#[test]
fn exclusions_drop_whole_sentences() {
    let q = build_ws_corpus(&ws_inputs(), &["000001".to_owned()]).unwrap();
    assert_eq!(q.len(), 4 * 5);
    assert!(q.iter().all(|x| !x.id.starts_with("ws/000001/")));
}

#[test]
fn jsonl_roundtrip() {
    let q = corpus();
    let back: Vec<BeliefQuery> = from_jsonl(&to_jsonl(&q).unwrap()).unwrap();
    assert_eq!(back, q);
}
