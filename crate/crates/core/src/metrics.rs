// SPDX-License-Identifier: MIT OR Apache-2.0

//! Belief Dominance and its difference, aggregated over the reasoning span.
//!
//! BD is kept as an exact count (`hits` out of `positions × layers`), so
//! differences over the same denominator are exact rationals.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::model::{GenerationRecord, GenerationSettings, InstrumentedLM, ANSWER_DELIMITER, SAMPLING_TEMPERATURE};
use crate::patchscope::{casefold, decode_set, target_layers, Belief, TextSet};

/// Inclusive source-layer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWindow {
    /// First layer.
    pub start: usize,
    /// Last layer (inclusive).
    pub end: usize,
}

impl LayerWindow {
    /// Inclusive window.
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Every layer `0..=layer_count`.
    pub fn all(layer_count: usize) -> Self {
        Self { start: 0, end: layer_count }
    }

    /// The middle-upper quarter of depth: `round(L/4)` layers starting at
    /// `round(0.675·L)`. Gives 54..=73 for `L = 80`.
    pub fn default_for(layer_count: usize) -> Self {
        let l = layer_count as f64;
        let len = ((l / 4.0).round() as usize).max(1);
        let start = ((0.675 * l).round() as usize).min(layer_count);
        Self { start, end: (start + len - 1).min(layer_count) }
    }

    /// Layers in the window.
    pub fn layers(&self) -> Vec<usize> {
        (self.start..=self.end).collect()
    }

    /// Number of layers.
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    /// Never true for a validated window.
    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    fn validate(&self, layer_count: usize) -> Result<()> {
        if self.start > self.end || self.end > layer_count {
            return Err(Error::Config(format!(
                "layer window {}..={} outside 0..={layer_count}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// Aggregation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Source-layer window; `None` picks [`LayerWindow::default_for`].
    pub layer_window: Option<LayerWindow>,
    /// Decode into every `target_stride`-th layer.
    pub target_stride: usize,
    /// Restrict BD to positions where either belief decodes.
    pub active_position_filter: bool,
    /// Keep the delimiter's last token in the span.
    pub include_final_token: bool,
    /// Decodes per (source vector, target layer).
    pub repeats: usize,
    /// Base seed of patched decodes.
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            layer_window: None,
            target_stride: 10,
            active_position_filter: true,
            include_final_token: true,
            repeats: 1,
            seed: 0,
        }
    }
}

impl MetricConfig {
    /// Window resolved against a model depth.
    pub fn window(&self, layer_count: usize) -> Result<LayerWindow> {
        let w = self.layer_window.unwrap_or_else(|| LayerWindow::default_for(layer_count));
        w.validate(layer_count)?;
        Ok(w)
    }

    /// Settings of every patched decode.
    pub fn decode_settings(&self) -> GenerationSettings {
        GenerationSettings::sampled(SAMPLING_TEMPERATURE, self.seed)
    }

    fn validate(&self) -> Result<()> {
        if self.target_stride == 0 {
            return Err(Error::Config("target_stride must be at least 1".to_owned()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reasoning span
// ---------------------------------------------------------------------------

/// Token range from the start of the generation through the `:` of the last
/// answer delimiter. For WS, answer tokens whose accumulated text is a prefix
/// of both candidates extend the span. With `include_final_token = false`
/// the last index is dropped.
pub fn reasoning_span(
    record: &GenerationRecord,
    task: Task,
    cfg: &MetricConfig,
    candidates: &[&str],
) -> Result<Range<usize>> {
    let at = record
        .text
        .rfind(ANSWER_DELIMITER)
        .ok_or_else(|| Error::Parse("answer delimiter not found".to_owned()))?;
    let colon = at + ANSWER_DELIMITER.len() - 1;
    let offsets = &record.token_offsets;
    let n = record.generated_tokens.len();
    let colon_tok = (0..n)
        .find(|&t| offsets[t] <= colon && colon < offsets[t + 1])
        .ok_or_else(|| Error::Parse("delimiter is not aligned with tokens".to_owned()))?;
    let mut end = colon_tok + 1;
    if task == Task::Ws && candidates.len() == 2 {
        let a = casefold(candidates[0].trim());
        let b = casefold(candidates[1].trim());
        for j in colon_tok + 1..n {
            let tail = casefold(record.text[offsets[colon_tok + 1]..offsets[j + 1]].trim());
            if tail.is_empty() {
                continue;
            }
            if a.starts_with(&tail) && b.starts_with(&tail) {
                end = j + 1;
            } else {
                break;
            }
        }
    }
    if !cfg.include_final_token {
        end -= 1;
    }
    Ok(0..end)
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

/// Decoded text sets over a (position × layer) grid, shared by every belief
/// matched against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGrid {
    /// Source positions (rows).
    pub positions: Vec<usize>,
    /// Source layers (columns).
    pub layers: Vec<usize>,
    /// Target layers used for each decode.
    pub targets: Vec<usize>,
    /// Row-major text sets.
    pub sets: Vec<TextSet>,
}

impl TextGrid {
    /// Decode every `(position, layer)` cell of `record`'s trace.
    pub fn decode(
        lm: &dyn InstrumentedLM,
        record: &GenerationRecord,
        positions: &[usize],
        layers: &[usize],
        cfg: &MetricConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let targets = target_layers(lm.config().layer_count, cfg.target_stride)?;
        let settings = cfg.decode_settings();
        let cells: Vec<(usize, usize)> = positions
            .iter()
            .flat_map(|&p| layers.iter().map(move |&l| (p, l)))
            .collect();
        let sets = cells
            .par_iter()
            .map(|&(p, l)| {
                let h = record.trace.view(p, l)?;
                decode_set(lm, h, &targets, &settings, cfg.repeats)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { positions: positions.to_vec(), layers: layers.to_vec(), targets, sets })
    }

    /// Text set of one cell by row/column index.
    pub fn cell(&self, row: usize, col: usize) -> &TextSet {
        &self.sets[row * self.layers.len() + col]
    }

    /// ψ grid and per-cell target-layer hit counts for `belief`.
    pub fn dominance_map(&self, belief: &Belief) -> DominanceMap {
        let cols = self.layers.len();
        let mut grid = Vec::with_capacity(self.positions.len());
        let mut target_hits = Vec::with_capacity(self.positions.len());
        for r in 0..self.positions.len() {
            let counts: Vec<u32> = (0..cols).map(|c| self.cell(r, c).layer_hits(belief) as u32).collect();
            grid.push(counts.iter().map(|&c| c > 0).collect());
            target_hits.push(counts);
        }
        DominanceMap {
            belief_id: belief.id.clone(),
            positions: self.positions.clone(),
            layers: self.layers.clone(),
            grid,
            target_hits,
        }
    }
}

/// Binary ψ values over (span positions × window layers) for one belief.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DominanceMap {
    /// Belief id.
    pub belief_id: String,
    /// Row positions.
    pub positions: Vec<usize>,
    /// Column layers.
    pub layers: Vec<usize>,
    /// `grid[row][col]` is ψ at that cell.
    pub grid: Vec<Vec<bool>>,
    /// Number of target layers whose decode matched, per cell.
    pub target_hits: Vec<Vec<u32>>,
}

/// Serialized form: belief id, span offsets, window, row-major bit rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominanceMapRecord {
    /// Belief id.
    pub belief_id: String,
    /// `[first, last + 1)` of the rows.
    pub span: (usize, usize),
    /// Columns as an inclusive layer range.
    pub window: (usize, usize),
    /// One `0`/`1` string per row.
    pub rows: Vec<String>,
}

impl DominanceMap {
    /// Whether the two maps cover the same cells.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.positions == other.positions && self.layers == other.layers
    }

    /// Total ψ hits.
    pub fn hits(&self) -> u64 {
        self.grid.iter().flatten().filter(|&&b| b).count() as u64
    }

    /// Compact serializable form.
    pub fn to_record(&self) -> DominanceMapRecord {
        DominanceMapRecord {
            belief_id: self.belief_id.clone(),
            span: (
                self.positions.first().copied().unwrap_or(0),
                self.positions.last().map_or(0, |p| p + 1),
            ),
            window: (
                self.layers.first().copied().unwrap_or(0),
                self.layers.last().copied().unwrap_or(0),
            ),
            rows: self
                .grid
                .iter()
                .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
                .collect(),
        }
    }
}

/// Decode `record` over `span × window` and match one belief.
pub fn dominance_map(
    lm: &dyn InstrumentedLM,
    record: &GenerationRecord,
    belief: &Belief,
    span: Range<usize>,
    cfg: &MetricConfig,
) -> Result<DominanceMap> {
    let window = cfg.window(lm.config().layer_count)?;
    let positions: Vec<usize> = span.collect();
    let grid = TextGrid::decode(lm, record, &positions, &window.layers(), cfg)?;
    Ok(grid.dominance_map(belief))
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Positions whose row is non-zero in either map.
pub fn active_positions(map1: &DominanceMap, map2: &DominanceMap) -> Result<Vec<usize>> {
    if !map1.same_shape(map2) {
        return Err(Error::Input("dominance maps differ in shape".to_owned()));
    }
    Ok(map1
        .positions
        .iter()
        .enumerate()
        .filter(|(r, _)| map1.grid[*r].iter().any(|&b| b) || map2.grid[*r].iter().any(|&b| b))
        .map(|(_, &p)| p)
        .collect())
}

/// Belief Dominance as an exact count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BDScore {
    /// Number of ψ = 1 cells.
    pub hits: u64,
    /// Positions averaged over.
    pub positions_used: usize,
    /// Layers averaged over.
    pub layers_used: usize,
}

impl BDScore {
    /// `hits / (positions_used · layers_used)`.
    pub fn value(&self) -> f64 {
        self.hits as f64 / self.denominator() as f64
    }

    /// `positions_used · layers_used`.
    pub fn denominator(&self) -> u64 {
        (self.positions_used * self.layers_used) as u64
    }
}

/// BD over `positions`; `None` when the set is empty (no belief signal).
pub fn belief_dominance(map: &DominanceMap, positions: &[usize]) -> Result<Option<BDScore>> {
    if positions.is_empty() {
        return Ok(None);
    }
    let mut hits = 0u64;
    for p in positions {
        let row = map
            .positions
            .iter()
            .position(|q| q == p)
            .ok_or_else(|| Error::Input(format!("position {p} is not in the map")))?;
        hits += map.grid[row].iter().filter(|&&b| b).count() as u64;
    }
    Ok(Some(BDScore { hits, positions_used: positions.len(), layers_used: map.layers.len() }))
}

/// Exact BD difference `numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BDDiff {
    /// `hits₁ − hits₂`.
    pub numerator: i64,
    /// Shared denominator.
    pub denominator: u64,
}

impl BDDiff {
    /// Real value in `[-1, 1]`.
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// `BD₁ − BD₂` over the same denominator; positive favours belief 1.
pub fn bd_diff(bd1: &BDScore, bd2: &BDScore) -> Result<BDDiff> {
    if bd1.positions_used != bd2.positions_used || bd1.layers_used != bd2.layers_used {
        return Err(Error::Input("BD scores have different denominators".to_owned()));
    }
    Ok(BDDiff { numerator: bd1.hits as i64 - bd2.hits as i64, denominator: bd1.denominator() })
}

/// BD of both beliefs and their difference for one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Reasoning span.
    pub span: Range<usize>,
    /// Map of the first belief.
    pub map1: DominanceMap,
    /// Map of the second belief.
    pub map2: DominanceMap,
    /// Positions BD is averaged over.
    pub positions: Vec<usize>,
    /// BD of the first belief (`None` = no belief signal).
    pub bd1: Option<BDScore>,
    /// BD of the second belief.
    pub bd2: Option<BDScore>,
    /// `BD₁ − BD₂`.
    pub diff: Option<BDDiff>,
}

/// Measure two competing beliefs over `record`'s reasoning span.
pub fn measure(
    lm: &dyn InstrumentedLM,
    record: &GenerationRecord,
    task: Task,
    b1: &Belief,
    b2: &Belief,
    cfg: &MetricConfig,
) -> Result<Measurement> {
    let span = reasoning_span(record, task, cfg, &[b1.canonical(), b2.canonical()])?;
    let window = cfg.window(lm.config().layer_count)?;
    let positions: Vec<usize> = span.clone().collect();
    let grid = TextGrid::decode(lm, record, &positions, &window.layers(), cfg)?;
    let map1 = grid.dominance_map(b1);
    let map2 = grid.dominance_map(b2);
    let used = if cfg.active_position_filter { active_positions(&map1, &map2)? } else { positions };
    let bd1 = belief_dominance(&map1, &used)?;
    let bd2 = belief_dominance(&map2, &used)?;
    let diff = match (&bd1, &bd2) {
        (Some(a), Some(b)) => Some(bd_diff(a, b)?),
        _ => None,
    };
    Ok(Measurement { span, map1, map2, positions: used, bd1, bd2, diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(rows: &[&str]) -> DominanceMap {
        let grid: Vec<Vec<bool>> = rows.iter().map(|r| r.chars().map(|c| c == '1').collect()).collect();
        DominanceMap {
            belief_id: "b".into(),
            positions: (0..rows.len()).collect(),
            layers: (0..grid.first().map_or(0, Vec::len)).collect(),
            target_hits: grid.iter().map(|r| r.iter().map(|&b| u32::from(b)).collect()).collect(),
            grid,
        }
    }

    #[test]
    fn default_windows() {
        assert_eq!(LayerWindow::default_for(80), LayerWindow::new(54, 73));
        assert_eq!(LayerWindow::default_for(8), LayerWindow::new(5, 6));
        assert_eq!(LayerWindow::default_for(1).len(), 1);
    }

    #[test]
    fn bd_arithmetic() {
        let m = map(&["00000", "00100", "00000", "00000"]);
        let bd = belief_dominance(&m, &[0, 1, 2, 3]).unwrap().unwrap();
        assert_eq!(bd.value(), 0.05);
        let full = map(&["11", "11"]);
        assert_eq!(belief_dominance(&full, &[0, 1]).unwrap().unwrap().value(), 1.0);
        assert_eq!(belief_dominance(&full, &[]).unwrap(), None);
        assert!(belief_dominance(&full, &[5]).is_err());
    }

    #[test]
    fn active_union() {
        let a = map(&["0", "1", "0", "1", "0"]);
        let b = map(&["0", "0", "0", "1", "1"]);
        assert_eq!(active_positions(&a, &b).unwrap(), vec![1, 3, 4]);
        let z = map(&["0", "0", "0", "0", "0"]);
        assert!(active_positions(&z, &z).unwrap().is_empty());
        assert!(active_positions(&a, &map(&["0"])).is_err());
    }

    #[test]
    fn diff_checks_denominators() {
        let a = BDScore { hits: 3, positions_used: 2, layers_used: 5 };
        let b = BDScore { hits: 1, positions_used: 3, layers_used: 5 };
        assert!(bd_diff(&a, &b).is_err());
        assert_eq!(bd_diff(&a, &a).unwrap().numerator, 0);
    }

    proptest! {
        #[test]
        fn bd_bounds_and_antisymmetry(
            bits1 in proptest::collection::vec(any::<bool>(), 24),
            bits2 in proptest::collection::vec(any::<bool>(), 24),
        ) {
            let to_rows = |bits: &[bool]| -> Vec<String> {
                bits.chunks(4).map(|c| c.iter().map(|&b| if b { '1' } else { '0' }).collect()).collect()
            };
            let r1 = to_rows(&bits1);
            let r2 = to_rows(&bits2);
            let m1 = map(&r1.iter().map(String::as_str).collect::<Vec<_>>());
            let m2 = map(&r2.iter().map(String::as_str).collect::<Vec<_>>());
            let act = active_positions(&m1, &m2).unwrap();
            if let (Some(a), Some(b)) = (belief_dominance(&m1, &act).unwrap(), belief_dominance(&m2, &act).unwrap()) {
                prop_assert!((0.0..=1.0).contains(&a.value()));
                let d = bd_diff(&a, &b).unwrap();
                let e = bd_diff(&b, &a).unwrap();
                prop_assert_eq!(d.numerator, -e.numerator);
                prop_assert!((-1.0..=1.0).contains(&d.value()));
                // active filter never lowers BD of a belief with a hit
                let all: Vec<usize> = (0..6).collect();
                let full = belief_dominance(&m1, &all).unwrap().unwrap();
                if full.hits > 0 {
                    prop_assert!(a.value() >= full.value());
                }
            } else {
                prop_assert!(act.is_empty());
            }
        }
    }
}
