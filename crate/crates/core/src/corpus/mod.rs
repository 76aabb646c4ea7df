// SPDX-License-Identifier: MIT OR Apache-2.0

//! Query corpora for the factual-knowledge (FK) and pronoun-resolution (WS)
//! tasks, prompt manipulations, prompt assembly and action parsing.

mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ChatMessage, ChatPrompt, GenerationRecord, GenerationSettings, InstrumentedLM,
    ANSWER_DELIMITER,
};
use crate::patchscope::{casefold, contains_word, match_belief, Belief};

pub use prompts::{FK_SYSTEM_PROMPT, NEURO_SYSTEM_PROMPT, STOP_WORDS, WS_SYSTEM_PROMPT};

/// Task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Factual knowledge with counterfactual claims.
    Fk,
    /// Pronoun resolution with implausible candidates.
    Ws,
}

impl Task {
    /// Short lowercase name.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fk => "fk",
            Self::Ws => "ws",
        }
    }

    /// Task system prompt.
    pub fn system_prompt(self) -> &'static str {
        match self {
            Self::Fk => FK_SYSTEM_PROMPT,
            Self::Ws => WS_SYSTEM_PROMPT,
        }
    }

    /// Manipulations defined for the task, in reporting order.
    pub fn manipulations(self) -> &'static [Manipulation] {
        use Manipulation::*;
        match self {
            Self::Fk => &[
                None,
                Assertion,
                ReliableSource,
                UnreliableSource,
                PrioritizeModel,
                PrioritizeUser,
                LexicalControl,
                InternalDoubt,
            ],
            Self::Ws => &[
                None,
                ReliableSource,
                UnreliableSource,
                PrioritizePlausibility,
                PrioritizeImplausibility,
            ],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fk" => Ok(Self::Fk),
            "ws" => Ok(Self::Ws),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected fk or ws)"))),
        }
    }
}

/// Prompt augmentation applied to a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    /// Unmodified question.
    None,
    /// Counterfactual stated as fact.
    Assertion,
    /// Counterfactual attributed to a reliable source.
    ReliableSource,
    /// Counterfactual attributed to an unreliable source.
    UnreliableSource,
    /// Instruction to prefer internal knowledge.
    PrioritizeModel,
    /// Instruction to prefer the user's claim.
    PrioritizeUser,
    /// Counterfactual mentioned in a neutral sentence.
    LexicalControl,
    /// Doubt cast on the model's memory.
    InternalDoubt,
    /// Instruction to pick the plausible referent.
    PrioritizePlausibility,
    /// Instruction to pick the implausible referent.
    PrioritizeImplausibility,
}

impl Manipulation {
    /// Identifier used in query ids and reports.
    pub fn slug(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Assertion => "assertion",
            Self::ReliableSource => "reliable_source",
            Self::UnreliableSource => "unreliable_source",
            Self::PrioritizeModel => "prioritize_model",
            Self::PrioritizeUser => "prioritize_user",
            Self::LexicalControl => "lexical_control",
            Self::InternalDoubt => "internal_doubt",
            Self::PrioritizePlausibility => "prioritize_plausibility",
            Self::PrioritizeImplausibility => "prioritize_implausibility",
        }
    }

    /// Display name.
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "None",
            Self::Assertion => "Assertion",
            Self::ReliableSource => "Reliable Source",
            Self::UnreliableSource => "Unreliable Source",
            Self::PrioritizeModel => "Prioritize Model",
            Self::PrioritizeUser => "Prioritize User",
            Self::LexicalControl => "Lexical Control",
            Self::InternalDoubt => "Internal Doubt",
            Self::PrioritizePlausibility => "Prioritize Plausibility",
            Self::PrioritizeImplausibility => "Prioritize Implausibility",
        }
    }

    /// Conflict-handling instruction, placed in the system prompt when the
    /// model has a system role.
    pub fn instruction(self) -> Option<&'static str> {
        match self {
            Self::PrioritizeModel => Some(prompts::PRIORITIZE_MODEL),
            Self::PrioritizeUser => Some(prompts::PRIORITIZE_USER),
            Self::PrioritizePlausibility => Some(prompts::PRIORITIZE_PLAUSIBILITY),
            Self::PrioritizeImplausibility => Some(prompts::PRIORITIZE_IMPLAUSIBILITY),
            _ => None,
        }
    }

    /// Whether the manipulation is defined for `task`.
    pub fn valid_for(self, task: Task) -> bool {
        task.manipulations().contains(&self)
    }

    /// FK variants that carry no counterfactual.
    pub fn has_counter(self, task: Task) -> bool {
        task == Task::Ws || !matches!(self, Self::None | Self::InternalDoubt)
    }
}

impl FromStr for Manipulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::Fk
            .manipulations()
            .iter()
            .chain(Task::Ws.manipulations())
            .copied()
            .find(|m| m.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown manipulation {s:?}")))
    }
}

/// One task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefQuery {
    /// `"{task}/{source:06}/{manipulation}"`.
    pub id: String,
    /// Task family.
    pub task: Task,
    /// Unmanipulated user text.
    pub question: String,
    /// Applied manipulation.
    pub manipulation: Manipulation,
    /// Text inserted before the question in the user turn.
    pub manipulation_text: String,
    /// Prior-knowledge (or plausible) belief.
    pub b_base: Belief,
    /// Counterfactual (or implausible) belief; absent for FK None/InternalDoubt.
    pub b_counter: Option<Belief>,
    /// Instruction destined for the system prompt.
    pub system_placement: Option<String>,
}

impl BeliefQuery {
    /// Id of the source item shared by every manipulation of it.
    pub fn group(&self) -> &str {
        self.id.rsplit_once('/').map_or(&self.id, |(g, _)| g)
    }

    /// Check the query's structural invariants.
    pub fn validate(&self) -> Result<()> {
        if !self.manipulation.valid_for(self.task) {
            return Err(Error::Input(format!(
                "manipulation {} is not defined for task {}",
                self.manipulation.slug(),
                self.task
            )));
        }
        if self.task == Task::Ws && self.b_counter.is_none() {
            return Err(Error::Input(format!("{}: pronoun queries need both beliefs", self.id)));
        }
        self.b_base.validate()?;
        if let Some(c) = &self.b_counter {
            c.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Subject-relation-object fact with its counterfactual object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriplet {
    /// Subject entity.
    pub subject: String,
    /// Relation key into the template table.
    pub relation_id: String,
    /// True object.
    pub true_object: Belief,
    /// Counterfactual object.
    pub counter_object: Belief,
}

/// Question and declarative templates of one relation; `{}` marks the subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    /// e.g. `"What is the capital of {}?"`.
    pub question: String,
    /// e.g. `"The capital of {} is"`.
    pub declarative: String,
    /// Neutral mention of the counterfactual; `{}` marks the object.
    #[serde(default)]
    pub lexical: Option<String>,
}

/// Relation id → templates.
pub type TemplateTable = BTreeMap<String, RelationTemplate>;

/// Annotated pronoun-resolution sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsSentence {
    /// Stable id matched against the exclusion list.
    #[serde(default)]
    pub id: Option<String>,
    /// The sentence.
    pub sentence: String,
    /// The ambiguous pronoun.
    pub pronoun: String,
    /// Plausible referent (`b_base`).
    pub plausible: String,
    /// Implausible referent (`b_counter`).
    pub implausible: String,
}

fn fill(template: &str, value: &str) -> String {
    template.replacen("{}", value, 1)
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn join(parts: &[&str]) -> String {
    parts.iter().filter(|p| !p.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

/// One query per (triplet, FK manipulation), in input order.
pub fn build_fk_corpus(triplets: &[FactTriplet], templates: &TemplateTable) -> Result<Vec<BeliefQuery>> {
    let missing: BTreeSet<&str> = triplets
        .iter()
        .map(|t| t.relation_id.as_str())
        .filter(|r| !templates.contains_key(*r))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "no template for relation(s): {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut out = Vec::new();
    for (source, t) in triplets.iter().enumerate() {
        if casefold(t.true_object.canonical()) == casefold(t.counter_object.canonical()) {
            return Err(Error::Data(format!("triplet {source}: true and counter objects coincide")));
        }
        let tpl = &templates[&t.relation_id];
        let question = fill(&tpl.question, &t.subject);
        let counter = t.counter_object.canonical();
        let claim = format!("{} {counter}.", fill(&tpl.declarative, &t.subject));
        // Literal-text templates continue a source prefix mid-sentence.
        let attributed = if tpl.declarative.starts_with("{}") { claim.clone() } else { lowercase_first(&claim) };
        let lexical = fill(tpl.lexical.as_deref().unwrap_or(prompts::LEXICAL_DEFAULT), counter);
        for &m in Task::Fk.manipulations() {
            let manipulation_text = match m {
                Manipulation::None => String::new(),
                Manipulation::Assertion | Manipulation::PrioritizeModel | Manipulation::PrioritizeUser => claim.clone(),
                Manipulation::ReliableSource => join(&[prompts::FK_RELIABLE, &attributed]),
                Manipulation::UnreliableSource => join(&[prompts::FK_UNRELIABLE, &attributed]),
                Manipulation::LexicalControl => lexical.clone(),
                Manipulation::InternalDoubt => prompts::INTERNAL_DOUBT.to_owned(),
                _ => unreachable!("not an FK manipulation"),
            };
            out.push(BeliefQuery {
                id: format!("fk/{source:06}/{}", m.slug()),
                task: Task::Fk,
                question: question.clone(),
                manipulation: m,
                manipulation_text,
                b_base: t.true_object.clone(),
                b_counter: m.has_counter(Task::Fk).then(|| t.counter_object.clone()),
                system_placement: m.instruction().map(str::to_owned),
            });
        }
    }
    Ok(out)
}

/// Disambiguating question for a pronoun.
pub fn ws_question(pronoun: &str) -> String {
    match casefold(pronoun).as_str() {
        "it" | "its" => format!("What does {pronoun} refer to?"),
        _ => format!("Who does {pronoun} refer to?"),
    }
}

/// Candidate belief: the full answer plus its individual non-stop-words.
fn ws_candidate(text: &str, other: &str) -> Result<Belief> {
    let other_words: BTreeSet<String> = words(other).map(casefold).collect();
    let mut aliases = vec![text.trim().to_owned()];
    for w in words(text) {
        let folded = casefold(w);
        if !STOP_WORDS.contains(&folded.as_str()) && !other_words.contains(&folded) {
            aliases.push(w.to_owned());
        }
    }
    Belief::new(casefold(text.trim()), aliases)
}

fn words(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// One query per (non-excluded sentence, WS manipulation), in input order.
pub fn build_ws_corpus(sentences: &[WsSentence], exclusions: &[String]) -> Result<Vec<BeliefQuery>> {
    let excluded: BTreeSet<&str> = exclusions.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for (source, s) in sentences.iter().enumerate() {
        let id = s.id.clone().unwrap_or_else(|| format!("{source:06}"));
        if excluded.contains(id.as_str()) {
            continue;
        }
        if !contains_word(&casefold(&s.sentence), &casefold(s.pronoun.trim())) {
            return Err(Error::Data(format!("sentence {id}: pronoun {:?} not found", s.pronoun)));
        }
        let question = join(&[s.sentence.trim(), &ws_question(s.pronoun.trim())]);
        let b_base = ws_candidate(&s.plausible, &s.implausible)?;
        let b_counter = ws_candidate(&s.implausible, &s.plausible)?;
        for &m in Task::Ws.manipulations() {
            let manipulation_text = match m {
                Manipulation::ReliableSource => prompts::WS_RELIABLE.to_owned(),
                Manipulation::UnreliableSource => prompts::WS_UNRELIABLE.to_owned(),
                _ => String::new(),
            };
            out.push(BeliefQuery {
                id: format!("ws/{source:06}/{}", m.slug()),
                task: Task::Ws,
                question: question.clone(),
                manipulation: m,
                manipulation_text,
                b_base: b_base.clone(),
                b_counter: Some(b_counter.clone()),
                system_placement: m.instruction().map(str::to_owned),
            });
        }
    }
    Ok(out)
}

/// Full user text for a model with a system role.
pub fn apply_manipulation(query: &BeliefQuery) -> Result<String> {
    if !query.manipulation.valid_for(query.task) {
        return Err(Error::Input(format!(
            "manipulation {} is not defined for task {}",
            query.manipulation.slug(),
            query.task
        )));
    }
    Ok(join(&[&query.manipulation_text, &query.question]))
}

/// Chat prompt: task system prompt (plus instruction when supported) and
/// the manipulated user text.
pub fn assemble_prompt(query: &BeliefQuery, supports_system_role: bool) -> Result<ChatPrompt> {
    let user = apply_manipulation(query)?;
    let system = query.task.system_prompt();
    let (system, user) = match (&query.system_placement, supports_system_role) {
        (Some(instr), true) => (join(&[system, instr]), user),
        (Some(instr), false) => (system.to_owned(), join(&[instr, &user])),
        (None, _) => (system.to_owned(), user),
    };
    Ok(ChatPrompt::chat(vec![ChatMessage::system(system), ChatMessage::user(user)]))
}

/// Parsed final action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLabel {
    /// Matches `b_base` only.
    Base,
    /// Matches `b_counter` only.
    Counter,
    /// Neither, both, or no delimiter.
    Other,
}

/// Text after the last answer delimiter.
pub fn answer_text(text: &str) -> Option<&str> {
    text.rfind(ANSWER_DELIMITER).map(|i| text[i + ANSWER_DELIMITER.len()..].trim())
}

/// Classify the answer against both alias sets; a double match is `Other`.
pub fn parse_action(text: &str, base: &Belief, counter: Option<&Belief>) -> ActionLabel {
    let Some(answer) = answer_text(text) else {
        return ActionLabel::Other;
    };
    let is_base = match_belief(answer, base);
    let is_counter = counter.is_some_and(|c| match_belief(answer, c));
    match (is_base, is_counter) {
        (true, false) => ActionLabel::Base,
        (false, true) => ActionLabel::Counter,
        _ => ActionLabel::Other,
    }
}

/// [`parse_action`] on a record for a query (counter taken from `counter`
/// when the query carries none).
pub fn parse_record_action(record: &GenerationRecord, query: &BeliefQuery, counter: Option<&Belief>) -> ActionLabel {
    parse_action(&record.text, &query.b_base, query.b_counter.as_ref().or(counter))
}

/// Counterfactual belief per source group, for variants that carry none.
pub fn group_counters(queries: &[BeliefQuery]) -> BTreeMap<String, Belief> {
    let mut out = BTreeMap::new();
    for q in queries {
        if let Some(c) = &q.b_counter {
            out.entry(q.group().to_owned()).or_insert_with(|| c.clone());
        }
    }
    out
}

/// Result of [`filter_known`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Queries whose group passed.
    pub kept: Vec<BeliefQuery>,
    /// Groups kept.
    pub kept_groups: usize,
    /// Groups dropped.
    pub dropped_groups: usize,
}

/// Keep groups whose unmanipulated greedy answer shows the model knows the
/// item: FK requires a `Base` action, WS either candidate.
pub fn filter_known(lm: &dyn InstrumentedLM, queries: &[BeliefQuery]) -> Result<FilterOutcome> {
    use rayon::prelude::*;
    let counters = group_counters(queries);
    let probes: Vec<&BeliefQuery> = queries.iter().filter(|q| q.manipulation == Manipulation::None).collect();
    let verdicts = probes
        .par_iter()
        .map(|q| {
            let prompt = assemble_prompt(q, lm.supports_system_role())?;
            let record = lm.generate_with_trace(&prompt, &GenerationSettings::greedy())?;
            if record.hit_length_limit {
                return Ok((q.group().to_owned(), false));
            }
            let action = parse_record_action(&record, q, counters.get(q.group()));
            let keep = match q.task {
                Task::Fk => action == ActionLabel::Base,
                Task::Ws => action != ActionLabel::Other,
            };
            Ok((q.group().to_owned(), keep))
        })
        .collect::<Result<Vec<_>>>()?;
    let keep: BTreeSet<String> = verdicts.iter().filter(|(_, k)| *k).map(|(g, _)| g.clone()).collect();
    let kept: Vec<BeliefQuery> = queries.iter().filter(|q| keep.contains(q.group())).cloned().collect();
    log::info!("filter_known kept {} of {} groups", keep.len(), verdicts.len());
    Ok(FilterOutcome { kept, kept_groups: keep.len(), dropped_groups: verdicts.len() - keep.len() })
}

/// Serialize queries as one JSON object per line.
pub fn to_jsonl(queries: &[BeliefQuery]) -> Result<String> {
    let mut out = String::new();
    for q in queries {
        out.push_str(&serde_json::to_string(q)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse a JSON-lines file of `T`, skipping blank lines.
pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn belief(id: &str, a: &[&str]) -> Belief {
        Belief::new(id, a.iter().copied()).unwrap()
    }

    #[test]
    fn ws_question_rules() {
        assert_eq!(ws_question("it"), "What does it refer to?");
        assert_eq!(ws_question("she"), "Who does she refer to?");
        assert_eq!(ws_question("his"), "Who does his refer to?");
    }

    #[test]
    fn ws_aliases_drop_stop_words() {
        let b = ws_candidate("The Prince of Wales", "The President").unwrap();
        assert_eq!(b.verbalizations, vec!["The Prince of Wales", "Prince", "Wales"]);
    }

    #[test]
    fn parse_action_cases() {
        let base = belief("paris", &["Paris"]);
        let counter = belief("nyc", &["New York City", "New York"]);
        assert_eq!(parse_action("x Final answer: Paris", &base, Some(&counter)), ActionLabel::Base);
        assert_eq!(parse_action("Final answer: New York City", &base, Some(&counter)), ActionLabel::Counter);
        assert_eq!(parse_action("Final answer: unsure", &base, Some(&counter)), ActionLabel::Other);
        assert_eq!(parse_action("Final answer: Paris or New York", &base, Some(&counter)), ActionLabel::Other);
        assert_eq!(parse_action("Paris", &base, Some(&counter)), ActionLabel::Other);
    }

    #[test]
    fn missing_template_lists_relations() {
        let t = FactTriplet {
            subject: "X".into(),
            relation_id: "P999".into(),
            true_object: belief("a", &["A"]),
            counter_object: belief("b", &["B"]),
        };
        let err = build_fk_corpus(&[t], &TemplateTable::new()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("P999")));
    }

    #[test]
    fn pronoun_absent_is_data_error() {
        let s = WsSentence {
            id: None,
            sentence: "The cat sat.".into(),
            pronoun: "she".into(),
            plausible: "cat".into(),
            implausible: "mat".into(),
        };
        assert!(matches!(build_ws_corpus(&[s], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn invalid_pair_rejected() {
        let q = BeliefQuery {
            id: "ws/000000/assertion".into(),
            task: Task::Ws,
            question: "q".into(),
            manipulation: Manipulation::Assertion,
            manipulation_text: String::new(),
            b_base: belief("a", &["A"]),
            b_counter: Some(belief("b", &["B"])),
            system_placement: None,
        };
        assert!(matches!(apply_manipulation(&q), Err(Error::Input(_))));
        assert_eq!(q.group(), "ws/000000");
    }
}
