// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment execution and the structured report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use beliefscope::bridge::BridgeClient;
use beliefscope::corpus::{
    answer_text, apply_manipulation, assemble_prompt, filter_known, from_jsonl, group_counters, parse_record_action,
    ActionLabel, BeliefQuery, Manipulation, Task,
};
use beliefscope::metrics::{measure, BDDiff, BDScore, DominanceMap, MetricConfig};
use beliefscope::model::{load_model, GenerationRecord, GenerationSettings, InstrumentedLM, ModelKind};
use beliefscope::neurofeedback::{
    class_shares, label_samples, run_classification, run_injection_probe, sample_exemplars, NeuroConfig, NeuroReport,
    NeuroSample, ProbeItem, ShiftReport,
};
use beliefscope::patchscope::Belief;
use beliefscope::stats::{mann_whitney_u, median, wilcoxon_signed_rank, RankTestOptions, TestResult};
use beliefscope::steering::{evaluate_steering, SteeringItem, SteeringQueryRecord, SteeringStatus, SuccessRate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, ModelSpec, RunConfig, SampleConfig};
use crate::report::{emit_report, Format};
use crate::HarnessError;

/// File of per-query measurement records inside a run directory.
pub const QUERY_RECORDS: &str = "records/queries.jsonl";
/// File of per-query steering records.
pub const STEERING_RECORDS: &str = "records/steering.jsonl";

/// Outcome of measuring one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    /// BDDiff defined.
    Measured,
    /// Neither belief decoded at any span position.
    NoSignal,
    /// The generation has no answer delimiter.
    Unparsed,
    /// No counterfactual belief exists for the item.
    NoCounter,
    /// Generated only (steering runs).
    Generated,
}

/// Persisted per-query record. Every aggregate table is recomputable from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Query id.
    pub query_id: String,
    /// Source item id.
    pub group: String,
    /// Task family.
    pub task: Task,
    /// Manipulation.
    pub manipulation: Manipulation,
    /// Parsed action.
    pub action: ActionLabel,
    /// Text after the answer delimiter.
    pub answer: Option<String>,
    /// Generated tokens.
    pub generated_tokens: usize,
    /// Measurement outcome.
    pub status: QueryStatus,
    /// Reasoning-span length.
    pub span_len: Option<usize>,
    /// BD of `b_base`.
    pub bd_base: Option<BDScore>,
    /// BD of the counterfactual.
    pub bd_counter: Option<BDScore>,
    /// Exact `BD(b_base) − BD(b_counter)`.
    pub bd_diff: Option<BDDiff>,
    /// Its real value.
    pub bd_diff_value: Option<f64>,
}

/// Selection statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    /// Queries in the corpus file.
    pub queries_total: usize,
    /// Items whose knowledge was checked.
    pub groups_considered: usize,
    /// Items kept.
    pub groups_kept: usize,
    /// Items dropped by the knowledge filter.
    pub groups_dropped: usize,
    /// Queries run.
    pub queries_selected: usize,
}

/// Median BDDiff of one (task, manipulation) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    /// Task family.
    pub task: Task,
    /// Manipulation slug.
    pub manipulation: Manipulation,
    /// Queries contributing.
    pub n: usize,
    /// Median, when `n > 0`.
    pub median: Option<f64>,
    /// Queries excluded for lack of belief signal.
    pub excluded_no_signal: usize,
    /// Queries excluded because the answer could not be parsed.
    pub excluded_unparsed: usize,
}

/// Paired Wilcoxon test of a manipulation against `none` over shared items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Task family.
    pub task: Task,
    /// Manipulation compared with `none`.
    pub manipulation: Manipulation,
    /// Items with both values.
    pub pairs: usize,
    /// Test result.
    pub result: Option<TestResult>,
    /// Why no result exists.
    pub note: Option<String>,
}

/// BDDiff summary of one (task, manipulation, action) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCell {
    /// Task family.
    pub task: Task,
    /// Manipulation.
    pub manipulation: Manipulation,
    /// Parsed action.
    pub action: ActionLabel,
    /// Measured queries available in the cell.
    pub instances: usize,
    /// Queries used (first `per_action_cell` in corpus order).
    pub query_ids: Vec<String>,
    /// Box summary of the used values.
    pub summary: BoxSummary,
}

/// Five-number summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    /// Minimum.
    pub min: f64,
    /// First quartile (linear interpolation).
    pub q1: f64,
    /// Median.
    pub median: f64,
    /// Third quartile.
    pub q3: f64,
    /// Maximum.
    pub max: f64,
}

impl BoxSummary {
    /// Summary of a non-empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (s.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            s[lo] + (h - lo as f64) * (s[hi] - s[lo])
        };
        (!s.is_empty()).then(|| Self { min: s[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: s[s.len() - 1] })
    }
}

/// Cell dropped from the action split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedCell {
    /// Task family.
    pub task: Task,
    /// Manipulation.
    pub manipulation: Manipulation,
    /// Parsed action.
    pub action: ActionLabel,
    /// Instances found.
    pub instances: usize,
}

/// Mann–Whitney comparison of the base-action and counter-action cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTest {
    /// Task family.
    pub task: Task,
    /// Manipulation.
    pub manipulation: Manipulation,
    /// Two-sided test, statistic `U` of the base-action cell.
    pub result: Option<TestResult>,
    /// Why no result exists.
    pub note: Option<String>,
}

/// Aggregated steering outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    /// Amplifying the counterfactual.
    pub toward_counter: SuccessRate,
    /// Amplifying the base belief.
    pub toward_base: SuccessRate,
    /// Queries per status.
    pub status_counts: BTreeMap<String, usize>,
    /// Queries without a counterfactual belief.
    pub skipped_no_counter: usize,
}

/// Few-shot self-report on one BD stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuroSection {
    /// Task family.
    pub task: Task,
    /// `bd_base` or `bd_counter`.
    pub stream: String,
    /// Labelled queries.
    pub samples: usize,
    /// Classification results.
    pub report: Option<NeuroReport>,
    /// Why no report exists.
    pub note: Option<String>,
}

/// Injection probe on one BD stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    /// Task family.
    pub task: Task,
    /// `bd_base` or `bd_counter`.
    pub stream: String,
    /// Label distributions.
    pub report: Option<ShiftReport>,
    /// Share per class without injection.
    pub shares_before: BTreeMap<usize, f64>,
    /// Share per class with injection.
    pub shares_after: BTreeMap<usize, f64>,
    /// Why no report exists.
    pub note: Option<String>,
}

/// Deterministic body of a run (no timestamps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Experiment family.
    pub experiment: Experiment,
    /// Model label used as the table column prefix.
    pub model: String,
    /// Content hash of config, corpus and model file.
    pub config_hash: String,
    /// Harness version.
    pub code_version: String,
    /// Selection statistics.
    pub corpus: CorpusSummary,
    /// Queries per status.
    pub status_counts: BTreeMap<String, usize>,
    /// Median BDDiff per (task, manipulation).
    pub medians: Vec<MedianRow>,
    /// Paired tests against `none`.
    pub paired_tests: Vec<PairedTest>,
    /// Action-split cells with enough instances.
    pub action_cells: Vec<ActionCell>,
    /// Cells below the instance minimum.
    pub omitted_cells: Vec<OmittedCell>,
    /// Base- vs counter-action tests.
    pub action_tests: Vec<ActionTest>,
    /// Steering outcome.
    pub steering: Option<SteeringSummary>,
    /// Self-report sections.
    pub neuro: Vec<NeuroSection>,
    /// Injection-probe sections.
    pub probe: Vec<ProbeSection>,
}

/// Timing and status, kept apart from the deterministic body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Content hash.
    pub config_hash: String,
    /// Harness version.
    pub code_version: String,
    /// Start time in seconds since the Unix epoch.
    pub started_at: u64,
    /// Wall time in milliseconds.
    pub wall_time_ms: u128,
    /// `ok` or `failed`.
    pub status: String,
    /// Failure message.
    pub error: Option<String>,
}

struct Processed {
    record: QueryRecord,
    generation: Option<GenerationRecord>,
    vector_base: Option<Vec<f32>>,
    vector_counter: Option<Vec<f32>>,
}

/// Trace vector of the earliest cell where `own` decodes and `other` does not.
fn dominant_vector(own: &DominanceMap, other: &DominanceMap, record: &GenerationRecord) -> Option<Vec<f32>> {
    for (r, row) in own.grid.iter().enumerate() {
        for (c, &hit) in row.iter().enumerate() {
            if hit && !other.grid[r][c] {
                return record.trace.read_hidden(own.positions[r], own.layers[c]).ok();
            }
        }
    }
    None
}

fn process(
    lm: &dyn InstrumentedLM,
    q: &BeliefQuery,
    counter: Option<&Belief>,
    metric: &MetricConfig,
    max_new_tokens: usize,
    measure_bd: bool,
) -> beliefscope::Result<Processed> {
    let prompt = assemble_prompt(q, lm.supports_system_role())?;
    let settings = GenerationSettings::greedy().with_max_new_tokens(max_new_tokens);
    let generation = lm.generate_with_trace(&prompt, &settings)?;
    let record = QueryRecord {
        query_id: q.id.clone(),
        group: q.group().to_owned(),
        task: q.task,
        manipulation: q.manipulation,
        action: parse_record_action(&generation, q, counter),
        answer: answer_text(&generation.text).map(str::to_owned),
        generated_tokens: generation.generated_tokens.len(),
        status: QueryStatus::Generated,
        span_len: None,
        bd_base: None,
        bd_counter: None,
        bd_diff: None,
        bd_diff_value: None,
    };
    if !measure_bd {
        return Ok(Processed { record, generation: Some(generation), vector_base: None, vector_counter: None });
    }
    let mut out = Processed { record, generation: None, vector_base: None, vector_counter: None };
    let Some(counter) = counter else {
        out.record.status = QueryStatus::NoCounter;
        return Ok(out);
    };
    match measure(lm, &generation, q.task, &q.b_base, counter, metric) {
        Ok(m) => {
            let r = &mut out.record;
            r.span_len = Some(m.span.len());
            r.bd_base = m.bd1;
            r.bd_counter = m.bd2;
            r.bd_diff = m.diff;
            r.bd_diff_value = m.diff.map(|d| d.value());
            r.status = if m.diff.is_some() { QueryStatus::Measured } else { QueryStatus::NoSignal };
            out.vector_base = dominant_vector(&m.map1, &m.map2, &generation);
            out.vector_counter = dominant_vector(&m.map2, &m.map1, &generation);
        }
        Err(beliefscope::Error::Parse(_)) => out.record.status = QueryStatus::Unparsed,
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// Append-only JSON-lines writer flushed after every batch, so a failed run
/// keeps what it finished.
struct Sink(BufWriter<File>);

impl Sink {
    fn create(path: &Path) -> Result<Self, HarnessError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn write_all<T: Serialize>(&mut self, items: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
        for item in items {
            serde_json::to_writer(&mut self.0, &item)?;
            self.0.write_all(b"\n")?;
        }
        self.0.flush()?;
        Ok(())
    }
}

/// Items per task in corpus order, keeping at most `groups_per_task` that
/// pass the knowledge filter.
fn select(
    lm: &dyn InstrumentedLM,
    all: &[BeliefQuery],
    sample: &SampleConfig,
) -> Result<(Vec<BeliefQuery>, CorpusSummary), HarnessError> {
    let mut summary = CorpusSummary { queries_total: all.len(), ..CorpusSummary::default() };
    let mut keep: BTreeSet<String> = BTreeSet::new();
    for task in [Task::Fk, Task::Ws] {
        let mut groups: Vec<&str> = Vec::new();
        for q in all.iter().filter(|q| q.task == task) {
            if groups.last() != Some(&q.group()) && !groups.contains(&q.group()) {
                groups.push(q.group());
            }
        }
        let mut kept = 0;
        for chunk in groups.chunks(sample.batch_size) {
            if kept >= sample.groups_per_task {
                break;
            }
            let chunk: BTreeSet<&str> = chunk.iter().copied().collect();
            let accepted: Vec<String> = if sample.filter_known {
                let qs: Vec<BeliefQuery> = all.iter().filter(|q| chunk.contains(q.group())).cloned().collect();
                let outcome = filter_known(lm, &qs)?;
                let ok: BTreeSet<&str> = outcome.kept.iter().map(BeliefQuery::group).collect();
                groups.iter().filter(|g| chunk.contains(*g) && ok.contains(*g)).map(|g| (*g).to_owned()).collect()
            } else {
                groups.iter().filter(|g| chunk.contains(*g)).map(|g| (*g).to_owned()).collect()
            };
            summary.groups_considered += chunk.len();
            summary.groups_dropped += chunk.len() - accepted.len();
            for g in accepted {
                if kept < sample.groups_per_task {
                    keep.insert(g);
                    kept += 1;
                }
            }
        }
    }
    summary.groups_kept = keep.len();
    let selected: Vec<BeliefQuery> = all.iter().filter(|q| keep.contains(q.group())).cloned().collect();
    summary.queries_selected = selected.len();
    log::info!(
        "selected {} queries from {} items ({} dropped by the knowledge filter)",
        summary.queries_selected,
        summary.groups_kept,
        summary.groups_dropped
    );
    Ok((selected, summary))
}

/// Route errors that only invalidate one report section into a note.
fn soft<T>(r: beliefscope::Result<T>) -> Result<Result<T, String>, HarnessError> {
    use beliefscope::Error as E;
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e @ (E::Input(_) | E::Degenerate(_) | E::Capacity { .. } | E::Parse(_))) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn status_counts<'a>(statuses: impl Iterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in statuses {
        *m.entry(s.to_owned()).or_insert(0) += 1;
    }
    m
}

fn status_name(s: QueryStatus) -> &'static str {
    match s {
        QueryStatus::Measured => "measured",
        QueryStatus::NoSignal => "no_signal",
        QueryStatus::Unparsed => "unparsed",
        QueryStatus::NoCounter => "no_counter",
        QueryStatus::Generated => "generated",
    }
}

fn steering_status_name(s: SteeringStatus) -> &'static str {
    match s {
        SteeringStatus::Scored => "scored",
        SteeringStatus::OtherAction => "other_action",
        SteeringStatus::NoSite => "no_site",
        SteeringStatus::NoAnswer => "no_answer",
        SteeringStatus::Unparsed => "unparsed",
    }
}

/// Tasks present in `records`, in reporting order.
fn tasks_of(records: &[QueryRecord]) -> Vec<Task> {
    [Task::Fk, Task::Ws].into_iter().filter(|t| records.iter().any(|r| r.task == *t)).collect()
}

/// Median BDDiff per (task, manipulation) present in `records`.
pub fn median_rows(records: &[QueryRecord]) -> Vec<MedianRow> {
    let mut rows = Vec::new();
    for task in tasks_of(records) {
        for &m in task.manipulations() {
            let cell: Vec<&QueryRecord> = records.iter().filter(|r| r.task == task && r.manipulation == m).collect();
            if cell.is_empty() {
                continue;
            }
            let values: Vec<f64> = cell.iter().filter_map(|r| r.bd_diff_value).collect();
            rows.push(MedianRow {
                task,
                manipulation: m,
                n: values.len(),
                median: median(&values),
                excluded_no_signal: cell.iter().filter(|r| r.status == QueryStatus::NoSignal).count(),
                excluded_unparsed: cell.iter().filter(|r| r.status == QueryStatus::Unparsed).count(),
            });
        }
    }
    rows
}

fn paired_tests(records: &[QueryRecord]) -> Vec<PairedTest> {
    let mut out = Vec::new();
    for task in tasks_of(records) {
        let none: BTreeMap<&str, f64> = records
            .iter()
            .filter(|r| r.task == task && r.manipulation == Manipulation::None)
            .filter_map(|r| r.bd_diff_value.map(|v| (r.group.as_str(), v)))
            .collect();
        for &m in task.manipulations().iter().filter(|m| **m != Manipulation::None) {
            if !records.iter().any(|r| r.task == task && r.manipulation == m) {
                continue;
            }
            let pairs: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.task == task && r.manipulation == m)
                .filter_map(|r| Some((r.bd_diff_value?, *none.get(r.group.as_str())?)))
                .collect();
            let (result, note) = if pairs.is_empty() {
                (None, Some("no items with both values".to_owned()))
            } else {
                match wilcoxon_signed_rank(&pairs, RankTestOptions::default()) {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            };
            out.push(PairedTest { task, manipulation: m, pairs: pairs.len(), result, note });
        }
    }
    out
}

/// Action-split cells, omitted cells, and per-manipulation tests.
pub fn action_split(
    records: &[QueryRecord],
    sample: &SampleConfig,
) -> (Vec<ActionCell>, Vec<OmittedCell>, Vec<ActionTest>) {
    let mut cells = Vec::new();
    let mut omitted = Vec::new();
    let mut tests = Vec::new();
    for task in tasks_of(records) {
        for &m in task.manipulations() {
            let mut kept: BTreeMap<ActionLabel, Vec<f64>> = BTreeMap::new();
            for action in [ActionLabel::Base, ActionLabel::Counter] {
                let cell: Vec<&QueryRecord> = records
                    .iter()
                    .filter(|r| r.task == task && r.manipulation == m && r.action == action && r.bd_diff_value.is_some())
                    .collect();
                if cell.len() < sample.min_cell {
                    if !cell.is_empty() {
                        log::info!(
                            "{task}/{}/{action:?}: {} instances, below the minimum of {}",
                            m.slug(),
                            cell.len(),
                            sample.min_cell
                        );
                    }
                    omitted.push(OmittedCell { task, manipulation: m, action, instances: cell.len() });
                    continue;
                }
                let used = &cell[..cell.len().min(sample.per_action_cell)];
                let values: Vec<f64> = used.iter().filter_map(|r| r.bd_diff_value).collect();
                cells.push(ActionCell {
                    task,
                    manipulation: m,
                    action,
                    instances: cell.len(),
                    query_ids: used.iter().map(|r| r.query_id.clone()).collect(),
                    summary: BoxSummary::of(&values).expect("cell is non-empty"),
                });
                kept.insert(action, values);
            }
            if let (Some(b), Some(c)) = (kept.get(&ActionLabel::Base), kept.get(&ActionLabel::Counter)) {
                let (result, note) = match mann_whitney_u(b, c, true, RankTestOptions::default()) {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                tests.push(ActionTest { task, manipulation: m, result, note });
            }
        }
    }
    (cells, omitted, tests)
}

struct Measured<'a> {
    query: &'a BeliefQuery,
    record: QueryRecord,
    vector_base: Option<Vec<f32>>,
    vector_counter: Option<Vec<f32>>,
}

fn stream_samples(
    items: &[Measured<'_>],
    task: Task,
    stream: &str,
    k: usize,
) -> Result<Result<Vec<NeuroSample>, String>, HarnessError> {
    let mut rows = Vec::new();
    for m in items.iter().filter(|m| m.record.task == task) {
        let bd = if stream == "bd_base" { m.record.bd_base } else { m.record.bd_counter };
        if let Some(bd) = bd {
            rows.push((m.record.query_id.clone(), apply_manipulation(m.query)?, bd.value()));
        }
    }
    soft(label_samples(&rows, k))
}

fn neuro_sections(
    lm: &dyn InstrumentedLM,
    items: &[Measured<'_>],
    cfg: &NeuroConfig,
    run_dir: &Path,
) -> Result<Vec<NeuroSection>, HarnessError> {
    let records: Vec<QueryRecord> = items.iter().map(|m| m.record.clone()).collect();
    let mut out = Vec::new();
    for task in tasks_of(&records) {
        for stream in ["bd_base", "bd_counter"] {
            let mut section = NeuroSection { task, stream: stream.to_owned(), samples: 0, report: None, note: None };
            match stream_samples(items, task, stream, cfg.k)? {
                Err(note) => section.note = Some(note),
                Ok(samples) => {
                    section.samples = samples.len();
                    Sink::create(&run_dir.join(format!("records/neuro_{task}_{stream}.jsonl")))?.write_all(&samples)?;
                    match soft(run_classification(lm, &samples, cfg))? {
                        Ok(r) => section.report = Some(r),
                        Err(note) => section.note = Some(note),
                    }
                }
            }
            out.push(section);
        }
    }
    Ok(out)
}

fn probe_sections(
    lm: &dyn InstrumentedLM,
    items: &[Measured<'_>],
    counters: &BTreeMap<String, Belief>,
    cfg: &NeuroConfig,
) -> Result<Vec<ProbeSection>, HarnessError> {
    let records: Vec<QueryRecord> = items.iter().map(|m| m.record.clone()).collect();
    let by_id: BTreeMap<&str, &Measured<'_>> = items.iter().map(|m| (m.record.query_id.as_str(), m)).collect();
    let mut out = Vec::new();
    for task in tasks_of(&records) {
        for stream in ["bd_base", "bd_counter"] {
            let mut section = ProbeSection {
                task,
                stream: stream.to_owned(),
                report: None,
                shares_before: BTreeMap::new(),
                shares_after: BTreeMap::new(),
                note: None,
            };
            let samples = match stream_samples(items, task, stream, cfg.k)? {
                Ok(s) => s,
                Err(note) => {
                    section.note = Some(note);
                    out.push(section);
                    continue;
                }
            };
            let held = match soft(sample_exemplars(&samples, cfg.k, cfg.exemplars_per_class, cfg.seeds[0]))? {
                Ok((_, held)) => held,
                Err(note) => {
                    section.note = Some(note);
                    out.push(section);
                    continue;
                }
            };
            let probe_items: Vec<ProbeItem> = held
                .iter()
                .filter_map(|&i| {
                    let m = by_id[samples[i].query_id.as_str()];
                    let (belief, vector) = if stream == "bd_base" {
                        (Some(m.query.b_base.clone()), m.vector_base.clone())
                    } else {
                        (
                            m.query.b_counter.clone().or_else(|| counters.get(m.query.group()).cloned()),
                            m.vector_counter.clone(),
                        )
                    };
                    Some(ProbeItem { text: samples[i].text.clone(), counter: belief?, vector })
                })
                .collect();
            match soft(run_injection_probe(lm, &samples, &probe_items, cfg))? {
                Ok(r) => {
                    section.shares_before = class_shares(&r.baseline_counts);
                    section.shares_after = class_shares(&r.injected_counts);
                    section.report = Some(r);
                }
                Err(note) => section.note = Some(note),
            }
            out.push(section);
        }
    }
    Ok(out)
}

/// Run `cfg.experiment` on `lm`, persisting records under `run_dir`.
pub fn run_experiment(
    cfg: &RunConfig,
    lm: &dyn InstrumentedLM,
    model_label: &str,
    config_hash: &str,
    run_dir: &Path,
) -> Result<ExperimentReport, HarnessError> {
    let text = fs::read_to_string(&cfg.corpus)?;
    let all: Vec<BeliefQuery> = from_jsonl(&text)?;
    for q in &all {
        q.validate()?;
    }
    let counters = group_counters(&all);
    let (selected, corpus) = select(lm, &all, &cfg.sample)?;
    let measure_bd = cfg.experiment != Experiment::Steering;

    let mut sink = Sink::create(&run_dir.join(QUERY_RECORDS))?;
    let mut measured: Vec<Measured<'_>> = Vec::new();
    let mut generations: Vec<(usize, GenerationRecord)> = Vec::new();
    for (b, batch) in selected.chunks(cfg.sample.batch_size).enumerate() {
        let done: Vec<Processed> = batch
            .par_iter()
            .map(|q| {
                let counter = q.b_counter.as_ref().or_else(|| counters.get(q.group()));
                process(lm, q, counter, &cfg.metric, cfg.sample.max_new_tokens, measure_bd)
            })
            .collect::<beliefscope::Result<_>>()?;
        sink.write_all(done.iter().map(|p| &p.record))?;
        for (i, p) in done.into_iter().enumerate() {
            let idx = b * cfg.sample.batch_size + i;
            if let Some(g) = p.generation {
                generations.push((idx, g));
            }
            measured.push(Measured {
                query: &selected[idx],
                record: p.record,
                vector_base: p.vector_base,
                vector_counter: p.vector_counter,
            });
        }
        log::info!("processed {} of {} queries", measured.len(), selected.len());
    }
    let records: Vec<QueryRecord> = measured.iter().map(|m| m.record.clone()).collect();

    let mut report = ExperimentReport {
        experiment: cfg.experiment,
        model: model_label.to_owned(),
        config_hash: config_hash.to_owned(),
        code_version: env!("CARGO_PKG_VERSION").to_owned(),
        corpus,
        status_counts: status_counts(records.iter().map(|r| status_name(r.status))),
        medians: Vec::new(),
        paired_tests: Vec::new(),
        action_cells: Vec::new(),
        omitted_cells: Vec::new(),
        action_tests: Vec::new(),
        steering: None,
        neuro: Vec::new(),
        probe: Vec::new(),
    };
    match cfg.experiment {
        Experiment::ManipulationEffects => {
            report.medians = median_rows(&records);
            report.paired_tests = paired_tests(&records);
        }
        Experiment::ActionSplit => {
            let (cells, omitted, tests) = action_split(&records, &cfg.sample);
            report.action_cells = cells;
            report.omitted_cells = omitted;
            report.action_tests = tests;
        }
        Experiment::Steering => {
            let steering = cfg.steering.as_ref().expect("validated");
            let mut skipped = 0;
            let items: Vec<SteeringItem> = generations
                .into_iter()
                .filter_map(|(idx, record)| {
                    let query = selected[idx].clone();
                    let counter = query.b_counter.clone().or_else(|| counters.get(query.group()).cloned());
                    if counter.is_none() {
                        skipped += 1;
                    }
                    Some(SteeringItem { query, record, counter: counter? })
                })
                .collect();
            let sr = evaluate_steering(lm, &items, steering, &cfg.metric)?;
            Sink::create(&run_dir.join(STEERING_RECORDS))?.write_all(&sr.records)?;
            report.steering = Some(SteeringSummary {
                toward_counter: sr.toward_counter,
                toward_base: sr.toward_base,
                status_counts: status_counts(sr.records.iter().map(|r: &SteeringQueryRecord| steering_status_name(r.status))),
                skipped_no_counter: skipped,
            });
        }
        Experiment::Neurofeedback => {
            report.neuro = neuro_sections(lm, &measured, cfg.neuro.as_ref().expect("validated"), run_dir)?;
        }
        Experiment::NeuroProbe => {
            report.probe = probe_sections(lm, &measured, &counters, cfg.neuro.as_ref().expect("validated"))?;
        }
    }
    Ok(report)
}

/// Open the model a config names.
pub fn open_model(spec: &ModelSpec, path: Option<&Path>) -> Result<Arc<dyn InstrumentedLM>, HarnessError> {
    let need = |p: Option<&Path>| p.map(Path::to_path_buf).ok_or_else(|| HarnessError::Config(format!("model {spec} needs a model file")));
    Ok(match spec {
        ModelSpec::Tiny => load_model(&need(path)?, ModelKind::Tiny)?,
        ModelSpec::Mock => load_model(&need(path)?, ModelKind::Mock)?,
        ModelSpec::Bridge(endpoint) => Arc::new(BridgeClient::connect(endpoint)?),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Load a config, run it, and emit every artifact. Returns the run directory.
pub fn execute(config_path: &Path, model_override: Option<&str>) -> Result<PathBuf, HarnessError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(m) = model_override {
        cfg.model = m.to_owned();
    }
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    if matches!(spec, ModelSpec::Bridge(_)) {
        cfg.model_path = None;
    }
    let hash = cfg.content_hash()?;
    let run_dir = cfg.output_dir.join(&hash[..16]);
    if run_dir.exists() {
        fs::remove_dir_all(&run_dir)?;
    }
    fs::create_dir_all(run_dir.join("records"))?;
    write_json(&run_dir.join("config.json"), &cfg)?;

    let started = Instant::now();
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let label = match &spec {
        ModelSpec::Bridge(_) => "bridge".to_owned(),
        other => other.to_string(),
    };
    let outcome = open_model(&spec, cfg.model_path.as_deref())
        .and_then(|lm| run_experiment(&cfg, lm.as_ref(), &label, &hash, &run_dir));
    let mut meta = RunMeta {
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_owned(),
        started_at,
        wall_time_ms: 0,
        status: "ok".to_owned(),
        error: None,
    };
    match outcome {
        Ok(report) => {
            write_json(&run_dir.join("report.json"), &report)?;
            meta.wall_time_ms = started.elapsed().as_millis();
            write_json(&run_dir.join("meta.json"), &meta)?;
            emit_report(&report, &run_dir, &Format::ALL)?;
            Ok(run_dir)
        }
        Err(e) => {
            meta.wall_time_ms = started.elapsed().as_millis();
            meta.status = "failed".to_owned();
            meta.error = Some(e.to_string());
            write_json(&run_dir.join("meta.json"), &meta)?;
            Err(e)
        }
    }
}
