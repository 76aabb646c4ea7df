// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named configurations and reference results for full-size models reached
//! through the bridge.
//!
//! None of the reference values can be reproduced with the in-process tiny
//! or mock models; they are targets for bridge runs only.

use serde::Serialize;

use crate::metrics::{LayerWindow, MetricConfig};
use crate::neurofeedback::NeuroConfig;
use crate::steering::SteeringConfig;

/// Layer choices for one production model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelPreset {
    /// Preset name.
    pub name: &'static str,
    /// Number of blocks.
    pub layer_count: usize,
    /// Source window for BD.
    pub bd_window: LayerWindow,
    /// Layers a steering site may come from.
    pub site_layers: LayerWindow,
    /// Steering scale.
    pub alpha: f32,
    /// Steering stride.
    pub stride: usize,
    /// Injection layer of the self-report probe.
    pub probe_layer: usize,
}

impl ModelPreset {
    /// Metric settings with this preset's window.
    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig { layer_window: Some(self.bd_window), ..MetricConfig::default() }
    }

    /// Steering settings with this preset's site range.
    pub fn steering_config(&self) -> SteeringConfig {
        SteeringConfig {
            alpha: self.alpha,
            stride: self.stride,
            site_layer_range: Some(self.site_layers),
            ..SteeringConfig::default()
        }
    }

    /// Probe settings with this preset's injection layer.
    pub fn neuro_config(&self) -> NeuroConfig {
        NeuroConfig { probe_layer: Some(self.probe_layer), probe_alpha: self.alpha, ..NeuroConfig::default() }
    }
}

/// Llama-3.3-70B-Instruct.
pub const LLAMA_70B: ModelPreset = ModelPreset {
    name: "llama-3.3-70b-instruct",
    layer_count: 80,
    bd_window: LayerWindow { start: 54, end: 73 },
    site_layers: LayerWindow { start: 0, end: 40 },
    alpha: 2.0,
    stride: 10,
    probe_layer: 20,
};

/// Gemma-3-27B-Instruct.
pub const GEMMA_27B: ModelPreset = ModelPreset {
    name: "gemma-3-27b-instruct",
    layer_count: 62,
    bd_window: LayerWindow { start: 46, end: 60 },
    site_layers: LayerWindow { start: 0, end: 45 },
    alpha: 2.0,
    stride: 10,
    probe_layer: 22,
};

/// All model presets.
pub const MODEL_PRESETS: [ModelPreset; 2] = [LLAMA_70B, GEMMA_27B];

/// Look up a preset by name.
pub fn model_preset(name: &str) -> Option<&'static ModelPreset> {
    MODEL_PRESETS.iter().find(|p| p.name == name)
}

/// Kind of reference value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Median BDDiff for a manipulation.
    MedianBdDiff,
    /// Steering success rate.
    SteeringSuccess,
    /// Self-report accuracy (mean ± std over seeds).
    NeuroAccuracy,
    /// Share of one predicted class before and after injection.
    ProbeShare,
}

/// One reference value from a full-size run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceTarget {
    /// Unique key.
    pub name: String,
    /// Model preset name.
    pub model: &'static str,
    /// `fk` or `ws`.
    pub task: &'static str,
    /// What is measured.
    pub kind: TargetKind,
    /// Manipulation, direction, or BD stream the value belongs to.
    pub condition: String,
    /// Reported value (the post-injection share for [`TargetKind::ProbeShare`]).
    pub value: f64,
    /// Pre-injection share for [`TargetKind::ProbeShare`].
    pub before: Option<f64>,
    /// Reported spread, where given.
    pub tolerance: Option<f64>,
    /// Always false: reachable only through the bridge.
    pub reproducible_at_desk_scale: bool,
}

fn target(
    model: &'static str,
    task: &'static str,
    kind: TargetKind,
    condition: &str,
    value: f64,
    before: Option<f64>,
    tolerance: Option<f64>,
) -> ReferenceTarget {
    let kind_name = match kind {
        TargetKind::MedianBdDiff => "median_bddiff",
        TargetKind::SteeringSuccess => "steering_success",
        TargetKind::NeuroAccuracy => "neuro_accuracy",
        TargetKind::ProbeShare => "probe_share",
    };
    ReferenceTarget {
        name: format!("{model}/{task}/{kind_name}/{condition}"),
        model,
        task,
        kind,
        condition: condition.to_owned(),
        value,
        before,
        tolerance,
        reproducible_at_desk_scale: false,
    }
}

/// Every reference value.
pub fn reference_targets() -> Vec<ReferenceTarget> {
    let g = GEMMA_27B.name;
    let l = LLAMA_70B.name;
    let mut out = Vec::new();

    // Median BDDiff per manipulation: (manipulation, gemma fk, gemma ws, llama fk, llama ws).
    let medians: [(&str, f64, Option<f64>, f64, Option<f64>); 8] = [
        ("none", 0.45, Some(0.18), 0.61, Some(0.12)),
        ("internal_doubt", 0.42, None, 0.56, None),
        ("lexical_control", 0.34, None, 0.49, None),
        ("assertion", -0.35, None, 0.21, None),
        ("unreliable_source", -0.22, Some(0.10), 0.27, Some(0.08)),
        ("reliable_source", -0.40, Some(0.17), 0.20, Some(0.11)),
        ("prioritize_model", -0.01, None, 0.26, None),
        ("prioritize_user", -0.49, None, 0.12, None),
    ];
    for (m, gfk, gws, lfk, lws) in medians {
        out.push(target(g, "fk", TargetKind::MedianBdDiff, m, gfk, None, None));
        out.push(target(l, "fk", TargetKind::MedianBdDiff, m, lfk, None, None));
        let ws = match m {
            "prioritize_model" => "prioritize_plausibility",
            "prioritize_user" => "prioritize_implausibility",
            other => other,
        };
        let ws_values = match m {
            "prioritize_model" => (Some(0.11), Some(0.07)),
            "prioritize_user" => (Some(-0.02), Some(0.00)),
            _ => (gws, lws),
        };
        if let (Some(gv), Some(lv)) = ws_values {
            out.push(target(g, "ws", TargetKind::MedianBdDiff, ws, gv, None, None));
            out.push(target(l, "ws", TargetKind::MedianBdDiff, ws, lv, None, None));
        }
    }

    // Steering success: (model, task, toward_counter, toward_base).
    for (model, task, counter, base) in
        [(g, "fk", 0.854, 0.667), (l, "fk", 0.755, 0.833), (g, "ws", 0.673, 0.735), (l, "ws", 0.826, 0.714)]
    {
        out.push(target(model, task, TargetKind::SteeringSuccess, "toward_counter", counter, None, None));
        out.push(target(model, task, TargetKind::SteeringSuccess, "toward_base", base, None, None));
    }

    // Self-report accuracy, mean ± std: (model, task, base, counter).
    for (model, task, base, counter) in [
        (g, "fk", (0.48, 0.02), (0.42, 0.04)),
        (l, "fk", (0.46, 0.02), (0.54, 0.05)),
        (g, "ws", (0.39, 0.01), (0.43, 0.04)),
        (l, "ws", (0.35, 0.02), (0.34, 0.01)),
    ] {
        out.push(target(model, task, TargetKind::NeuroAccuracy, "bd_base", base.0, None, Some(base.1)));
        out.push(target(model, task, TargetKind::NeuroAccuracy, "bd_counter", counter.0, None, Some(counter.1)));
    }

    // Injection probe shares (before → after).
    for (task, cond, before, after) in [
        ("fk", "bd_counter/high", 0.17, 0.47),
        ("fk", "bd_counter/low", 0.54, 0.20),
        ("fk", "bd_base/low", 0.48, 0.58),
        ("fk", "bd_base/high", 0.35, 0.23),
        ("ws", "bd_counter/high", 0.17, 0.48),
        ("ws", "bd_counter/low", 0.52, 0.46),
    ] {
        out.push(target(g, task, TargetKind::ProbeShare, cond, after, Some(before), None));
    }
    out
}
