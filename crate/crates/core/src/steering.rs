// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal steering: pick a hidden state that encodes the unselected belief,
//! inject it during generation, and score the shift of the answer margin.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_record_action, ActionLabel, BeliefQuery};
use crate::error::{Error, Result};
use crate::metrics::{reasoning_span, DominanceMap, LayerWindow, MetricConfig, TextGrid};
use crate::model::{GenerationRecord, GenerationSettings, InjectionSite, InstrumentedLM, SAMPLING_TEMPERATURE};
use crate::patchscope::Belief;
use crate::stats::mean;

/// Steering hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    /// Injection scale `α`.
    pub alpha: f32,
    /// Inject every `stride` generated positions.
    pub stride: usize,
    /// Layers a site may come from; `None` means `0..=L/2`.
    pub site_layer_range: Option<LayerWindow>,
    /// Fraction of the span searched for a site.
    pub start_limit: f64,
    /// Sampling seeds; both arms are re-sampled per seed.
    pub seeds: Vec<u64>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self { alpha: 2.0, stride: 10, site_layer_range: None, start_limit: 0.5, seeds: vec![0, 1, 2, 3, 4] }
    }
}

impl SteeringConfig {
    /// Check the invariants.
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".to_owned()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".to_owned()));
        }
        if !(self.start_limit > 0.0 && self.start_limit <= 1.0) {
            return Err(Error::Config("start_limit must be in (0, 1]".to_owned()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".to_owned()));
        }
        Ok(())
    }

    /// Site layer range resolved against a model depth.
    pub fn site_layers(&self, layer_count: usize) -> LayerWindow {
        let w = self.site_layer_range.unwrap_or(LayerWindow::new(0, layer_count / 2));
        LayerWindow::new(w.start.min(layer_count), w.end.min(layer_count))
    }
}

/// Which belief the injection should amplify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Amplify `b_base` (the model chose the counter).
    TowardBase,
    /// Amplify `b_counter` (the model chose the base).
    TowardCounter,
}

/// Whether the margin moved the expected way; ties fail.
pub fn judge(m_minus: f64, m_plus: f64, direction: Direction) -> bool {
    match direction {
        Direction::TowardCounter => m_plus < m_minus,
        Direction::TowardBase => m_plus > m_minus,
    }
}

/// Baseline and steered margins of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    /// Mean margin without intervention.
    pub m_minus: f64,
    /// Mean margin with intervention.
    pub m_plus: f64,
    /// Expected direction.
    pub direction: Direction,
    /// [`judge`] outcome.
    pub success: bool,
}

impl MarginRecord {
    /// Build and judge.
    pub fn new(m_minus: f64, m_plus: f64, direction: Direction) -> Self {
        Self { m_minus, m_plus, direction, success: judge(m_minus, m_plus, direction) }
    }
}

/// Earliest qualifying site among the first `start_limit` of the span.
///
/// A position qualifies when the selected belief decodes at no layer and the
/// unselected belief decodes at some layer of the site range; the layer with
/// the most matching target layers wins (lowest on ties). Both maps must
/// cover every layer `0..=L` of the candidate positions.
pub fn select_site_from_maps(
    record: &GenerationRecord,
    selected: &DominanceMap,
    unselected: &DominanceMap,
    site_layers: LayerWindow,
    candidates: usize,
) -> Result<Option<InjectionSite>> {
    if !selected.same_shape(unselected) {
        return Err(Error::Input("dominance maps differ in shape".to_owned()));
    }
    for (row, &position) in selected.positions.iter().enumerate().take(candidates) {
        if selected.grid[row].iter().any(|&b| b) {
            continue;
        }
        let mut best: Option<(u32, usize)> = None;
        for (col, &layer) in unselected.layers.iter().enumerate() {
            if layer < site_layers.start || layer > site_layers.end || !unselected.grid[row][col] {
                continue;
            }
            let hits = unselected.target_hits[row][col];
            if best.is_none_or(|(h, _)| hits > h) {
                best = Some((hits, layer));
            }
        }
        if let Some((_, layer)) = best {
            return Ok(Some(InjectionSite {
                position,
                layer,
                vector: record.trace.read_hidden(position, layer)?,
            }));
        }
    }
    Ok(None)
}

/// Number of span positions searched for a site.
pub fn candidate_count(span_len: usize, start_limit: f64) -> usize {
    ((span_len as f64) * start_limit).ceil() as usize
}

/// Decode the candidate positions over all layers and select a site.
pub fn select_site(
    lm: &dyn InstrumentedLM,
    record: &GenerationRecord,
    selected: &Belief,
    unselected: &Belief,
    span: Range<usize>,
    cfg: &SteeringConfig,
    metric: &MetricConfig,
) -> Result<Option<InjectionSite>> {
    cfg.validate()?;
    let l = lm.config().layer_count;
    let n = candidate_count(span.len(), cfg.start_limit);
    let positions: Vec<usize> = span.take(n).collect();
    let layers: Vec<usize> = (0..=l).collect();
    let grid = TextGrid::decode(lm, record, &positions, &layers, metric)?;
    let sel = grid.dominance_map(selected);
    let unsel = grid.dominance_map(unselected);
    select_site_from_maps(record, &sel, &unsel, cfg.site_layers(l), n)
}

/// First token of the verbalization as it would follow the delimiter.
pub fn answer_token(lm: &dyn InstrumentedLM, belief: &Belief) -> Result<u32> {
    let tokens = lm.tokenize(&format!(" {}", belief.canonical()))?;
    for t in tokens {
        if !lm.detokenize(&[t])?.trim().is_empty() {
            return Ok(t);
        }
    }
    Err(Error::Data(format!("verbalization of {} tokenizes to nothing", belief.id)))
}

/// `logit(b̂_base) − logit(b̂_counter)` over first tokens.
pub fn logit_margin(lm: &dyn InstrumentedLM, logits: &[f32], base: &Belief, counter: &Belief) -> Result<f64> {
    let b = answer_token(lm, base)? as usize;
    let c = answer_token(lm, counter)? as usize;
    let get = |i: usize| {
        logits
            .get(i)
            .copied()
            .ok_or_else(|| Error::Bounds(format!("token {i} outside logits of length {}", logits.len())))
    };
    Ok(f64::from(get(b)?) - f64::from(get(c)?))
}

/// Margin from a context ending right after the delimiter.
pub fn logit_margin_at(lm: &dyn InstrumentedLM, context: &[u32], base: &Belief, counter: &Belief) -> Result<f64> {
    logit_margin(lm, &lm.next_token_logits(context)?, base, counter)
}

/// One pre-generated query to steer.
#[derive(Debug, Clone)]
pub struct SteeringItem {
    /// The query.
    pub query: BeliefQuery,
    /// Greedy generation with trace.
    pub record: GenerationRecord,
    /// Counterfactual belief (from the query or its group).
    pub counter: Belief,
}

/// Outcome class of one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringStatus {
    /// Scored.
    Scored,
    /// Action was neither belief.
    OtherAction,
    /// No qualifying site.
    NoSite,
    /// No seed produced an answer position in both arms.
    NoAnswer,
    /// The baseline could not be parsed.
    Unparsed,
}

/// Per-query steering record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringQueryRecord {
    /// Query id.
    pub query_id: String,
    /// Outcome class.
    pub status: SteeringStatus,
    /// `(position, layer)` of the site.
    pub site: Option<(usize, usize)>,
    /// Margins, when scored.
    pub margin: Option<MarginRecord>,
    /// Seeds contributing to the margins.
    pub seeds_used: usize,
    /// Interventions skipped for singularity.
    pub skipped_interventions: usize,
}

/// Success count of one direction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SuccessRate {
    /// Successes.
    pub successes: usize,
    /// Scored queries.
    pub total: usize,
}

impl SuccessRate {
    /// `successes / total` (`None` when empty).
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.successes as f64 / self.total as f64)
    }
}

/// Aggregated steering results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    /// Per-query records in input order.
    pub records: Vec<SteeringQueryRecord>,
    /// Amplifying the counterfactual.
    pub toward_counter: SuccessRate,
    /// Amplifying the base belief.
    pub toward_base: SuccessRate,
    /// Queries without a qualifying site.
    pub no_site: usize,
}

fn steer_one(
    lm: &dyn InstrumentedLM,
    item: &SteeringItem,
    cfg: &SteeringConfig,
    metric: &MetricConfig,
) -> Result<SteeringQueryRecord> {
    let q = &item.query;
    let mut out = SteeringQueryRecord {
        query_id: q.id.clone(),
        status: SteeringStatus::Scored,
        site: None,
        margin: None,
        seeds_used: 0,
        skipped_interventions: 0,
    };
    let (direction, selected, unselected) = match parse_record_action(&item.record, q, Some(&item.counter)) {
        ActionLabel::Base => (Direction::TowardCounter, &q.b_base, &item.counter),
        ActionLabel::Counter => (Direction::TowardBase, &item.counter, &q.b_base),
        ActionLabel::Other => {
            out.status = SteeringStatus::OtherAction;
            return Ok(out);
        }
    };
    let span = match reasoning_span(&item.record, q.task, metric, &[q.b_base.canonical(), item.counter.canonical()]) {
        Ok(s) => s,
        Err(Error::Parse(_)) => {
            out.status = SteeringStatus::Unparsed;
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let Some(site) = select_site(lm, &item.record, selected, unselected, span, cfg, metric)? else {
        out.status = SteeringStatus::NoSite;
        return Ok(out);
    };
    out.site = Some((site.position, site.layer));
    let mut minus = Vec::new();
    let mut plus = Vec::new();
    for &seed in &cfg.seeds {
        let settings = GenerationSettings::sampled(SAMPLING_TEMPERATURE, seed)
            .with_max_new_tokens(item.record.settings.max_new_tokens);
        let base = lm.steered_generate(&item.record, &site, 0.0, cfg.stride, &settings)?;
        let steered = lm.steered_generate(&item.record, &site, cfg.alpha, cfg.stride, &settings)?;
        out.skipped_interventions += steered.interventions.iter().filter(|e| !e.applied).count();
        if let (Some(lb), Some(ls)) = (&base.answer_logits, &steered.answer_logits) {
            minus.push(logit_margin(lm, lb, &q.b_base, &item.counter)?);
            plus.push(logit_margin(lm, ls, &q.b_base, &item.counter)?);
        }
    }
    out.seeds_used = minus.len();
    if minus.is_empty() {
        out.status = SteeringStatus::NoAnswer;
        return Ok(out);
    }
    out.margin = Some(MarginRecord::new(mean(&minus), mean(&plus), direction));
    Ok(out)
}

/// Steer every item and aggregate success per direction.
pub fn evaluate_steering(
    lm: &dyn InstrumentedLM,
    items: &[SteeringItem],
    cfg: &SteeringConfig,
    metric: &MetricConfig,
) -> Result<SteeringReport> {
    cfg.validate()?;
    let records = items
        .par_iter()
        .map(|item| steer_one(lm, item, cfg, metric))
        .collect::<Result<Vec<_>>>()?;
    let mut report = SteeringReport {
        records,
        toward_counter: SuccessRate::default(),
        toward_base: SuccessRate::default(),
        no_site: 0,
    };
    for r in &report.records {
        if r.status == SteeringStatus::NoSite {
            report.no_site += 1;
        }
        if let Some(m) = &r.margin {
            let rate = match m.direction {
                Direction::TowardCounter => &mut report.toward_counter,
                Direction::TowardBase => &mut report.toward_base,
            };
            rate.total += 1;
            rate.successes += usize::from(m.success);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&str], hits: &[&[u32]]) -> DominanceMap {
        DominanceMap {
            belief_id: "b".into(),
            positions: (0..rows.len()).collect(),
            layers: (0..rows[0].len()).collect(),
            grid: rows.iter().map(|r| r.chars().map(|c| c == '1').collect()).collect(),
            target_hits: hits.iter().map(|h| h.to_vec()).collect(),
        }
    }

    fn record(positions: usize, layers: usize) -> GenerationRecord {
        let trace = crate::model::ActivationTrace::from_flat(
            positions,
            layers,
            1,
            (0..positions * layers).map(|v| v as f32).collect(),
        )
        .unwrap();
        GenerationRecord {
            prompt_tokens: vec![],
            generated_tokens: vec![0; positions],
            text: String::new(),
            token_offsets: vec![0; positions + 1],
            trace,
            settings: GenerationSettings::greedy(),
            hit_length_limit: false,
            answer_logits: None,
            interventions: vec![],
        }
    }

    #[test]
    fn judge_ties_fail() {
        assert!(judge(1.0, 0.5, Direction::TowardCounter));
        assert!(!judge(1.0, 1.0, Direction::TowardCounter));
        assert!(judge(-1.0, 0.0, Direction::TowardBase));
        assert!(!judge(0.0, 0.0, Direction::TowardBase));
    }

    #[test]
    fn site_prefers_most_target_hits() {
        let sel = map(&["000", "000"], &[&[0, 0, 0], &[0, 0, 0]]);
        let unsel = map(&["011", "000"], &[&[0, 1, 3], &[0, 0, 0]]);
        let r = record(2, 3);
        let site = select_site_from_maps(&r, &sel, &unsel, LayerWindow::new(0, 2), 2).unwrap().unwrap();
        assert_eq!((site.position, site.layer), (0, 2));
        assert_eq!(site.vector, vec![2.0]);
    }

    #[test]
    fn site_requires_clean_position() {
        let sel = map(&["100", "000"], &[&[1, 0, 0], &[0, 0, 0]]);
        let unsel = map(&["011", "010"], &[&[0, 1, 1], &[0, 2, 0]]);
        let r = record(2, 3);
        let site = select_site_from_maps(&r, &sel, &unsel, LayerWindow::new(0, 2), 2).unwrap().unwrap();
        assert_eq!((site.position, site.layer), (1, 1));
        let both = map(&["111", "111"], &[&[1, 1, 1], &[1, 1, 1]]);
        assert!(select_site_from_maps(&r, &both, &both, LayerWindow::new(0, 2), 2).unwrap().is_none());
        // position 1 is outside the candidate window
        assert!(select_site_from_maps(&r, &sel, &unsel, LayerWindow::new(0, 2), 1).unwrap().is_none());
    }

    #[test]
    fn candidate_window() {
        assert_eq!(candidate_count(30, 0.5), 15);
        assert_eq!(candidate_count(7, 0.5), 4);
    }
}
