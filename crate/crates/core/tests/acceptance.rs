// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs every primary criterion, prints one PASS/FAIL line
//! per criterion and exits non-zero when any fails.

mod common;

use std::io::Write;
use std::ops::Range;
use std::time::{Duration, Instant};

use beliefscope::corpus::{
    assemble_prompt, build_fk_corpus, build_ws_corpus, BeliefQuery, Manipulation, Task,
};
use beliefscope::metrics::{bd_diff, measure, reasoning_span, LayerWindow, MetricConfig};
use beliefscope::model::{
    derive_seed, steer_update, ActivationTrace, ChatPrompt, GenerationRecord, GenerationSettings,
    InjectionSite, InstrumentedLM, ScriptedMock, ANSWER_DELIMITER,
};
use beliefscope::neurofeedback::discretize;
use beliefscope::patchscope::{psi, target_layers, Belief};
use beliefscope::presets::{reference_targets, TargetKind, GEMMA_27B, LLAMA_70B};
use beliefscope::stats::{mann_whitney_u, t_test_one_sided, wilcoxon_signed_rank, RankTestOptions, TestMethod};
use beliefscope::steering::{evaluate_steering, SteeringConfig, SteeringItem};
use beliefscope::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{entry, fk_inputs, mock_spec, scenario, small_tiny, unit, user, ws_inputs};

// Pinned tolerances and budgets.
const NORM_REL_TOL: f64 = 1e-6;
const EXACT_P_TOL: f64 = 1e-12;
const T_TOL: f64 = 1e-9;
const BD_BUDGET: Duration = Duration::from_secs(60);
const STEERING_BUDGET: Duration = Duration::from_secs(120);
const SUITE_BUDGET: Duration = Duration::from_secs(300);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

const NAMES: [&str; 20] = [
    "Paris", "Rome", "Kabul", "Ankara", "Oslo", "Lima", "Quito", "Cairo", "Delhi", "Tokyo", "Seoul", "Hanoi",
    "Dakar", "Accra", "Sofia", "Minsk", "Riga", "Bern", "Doha", "Baku",
];

fn beliefs(n: usize) -> Vec<(String, String)> {
    NAMES[..n].iter().map(|v| (v.to_lowercase(), (*v).to_owned())).collect()
}

fn belief_of(name: &str) -> Belief {
    Belief::new(name.to_lowercase(), [name]).unwrap()
}

fn spec_pairs(b: &[(String, String)]) -> Vec<(&str, &str)> {
    b.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect()
}

// ---------------------------------------------------------------------------
// BD on a random mock population
// ---------------------------------------------------------------------------

const BD_QUERIES: usize = 200;
const BD_BELIEFS: usize = 6;
// Span of the default mock reasoning: 8 words/punctuation + " Final answer:".
const BD_SPAN: usize = 11;

fn bd_metric() -> MetricConfig {
    MetricConfig { layer_window: Some(LayerWindow::new(2, 7)), target_stride: 3, ..MetricConfig::default() }
}

struct BdPopulation {
    mock: ScriptedMock,
    cases: Vec<(GenerationRecord, Belief, Belief)>,
}

fn bd_population() -> BdPopulation {
    let b = beliefs(BD_BELIEFS);
    let mut spec = mock_spec(&spec_pairs(&b), 8, Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = Vec::new();
    for i in 0..BD_QUERIES {
        let mut plan = Vec::new();
        for p in 0..BD_SPAN {
            for l in 0..=8 {
                if rng.random_bool(0.3) {
                    let k = rng.random_range(1..=2);
                    let ch: Vec<(&str, f32)> = (0..k)
                        .map(|_| (b[rng.random_range(0..BD_BELIEFS)].0.as_str(), rng.random_range(0.2f32..2.0)))
                        .collect();
                    plan.push(entry(p, l, &ch));
                }
            }
        }
        spec.scenarios.push(scenario(&format!("q{i:03}"), plan));
        let x = rng.random_range(0..BD_BELIEFS);
        let y = (x + rng.random_range(1..BD_BELIEFS)) % BD_BELIEFS;
        pairs.push((x, y));
    }
    let mock = ScriptedMock::new(spec).unwrap();
    let cases = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let r = mock.generate_with_trace(&user(&format!("q{i:03}")), &GenerationSettings::greedy()).unwrap();
            (r, belief_of(&b[x].1), belief_of(&b[y].1))
        })
        .collect();
    BdPopulation { mock, cases }
}

/// Whole-word, case-insensitive membership, written independently of the
/// library matcher.
fn mentions(text: &str, word: &str) -> bool {
    let w = word.to_lowercase();
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).any(|t| t == w)
}

/// Recount BD by brute force: returns (hits1, hits2, positions used).
fn recount(lm: &dyn InstrumentedLM, r: &GenerationRecord, b1: &Belief, b2: &Belief) -> (u64, u64, usize) {
    let cfg = bd_metric();
    let window: Vec<usize> = (2..=7).collect();
    let targets: Vec<usize> = (0..=8).step_by(3).collect();
    let colon = r.text.rfind(ANSWER_DELIMITER).unwrap() + ANSWER_DELIMITER.len() - 1;
    let mut end = 0;
    let mut acc = 0;
    for i in 0..r.generated_tokens.len() {
        acc += r.token_str(i).unwrap().len();
        if acc > colon {
            end = i;
            break;
        }
    }
    let carrier = ChatPrompt::carrier();
    let mut grid1 = Vec::new();
    let mut grid2 = Vec::new();
    for p in 0..=end {
        let mut row1 = Vec::new();
        let mut row2 = Vec::new();
        for &l in &window {
            let v = r.trace.read_hidden(p, l).unwrap();
            let (mut s1, mut s2) = (false, false);
            for &t in &targets {
                let s = GenerationSettings::sampled(0.5, derive_seed(cfg.seed, t as u64));
                let text = lm.patched_decode(&carrier, &v, t, &s).unwrap();
                s1 |= mentions(&text, b1.canonical());
                s2 |= mentions(&text, b2.canonical());
            }
            row1.push(s1);
            row2.push(s2);
        }
        grid1.push(row1);
        grid2.push(row2);
    }
    let mut h1 = 0;
    let mut h2 = 0;
    let mut used = 0;
    for p in 0..=end {
        if grid1[p].iter().chain(&grid2[p]).any(|&x| x) {
            used += 1;
            h1 += grid1[p].iter().filter(|&&x| x).count() as u64;
            h2 += grid2[p].iter().filter(|&&x| x).count() as u64;
        }
    }
    (h1, h2, used)
}

fn criterion_bd_oracle(pop: &BdPopulation) -> Outcome {
    let start = Instant::now();
    let cfg = bd_metric();
    let mut compared = 0;
    for (i, (r, b1, b2)) in pop.cases.iter().enumerate() {
        let m = measure(&pop.mock, r, Task::Fk, b1, b2, &cfg).map_err(e2s)?;
        let (h1, h2, used) = recount(&pop.mock, r, b1, b2);
        match (m.bd1, m.bd2) {
            (Some(a), Some(b)) => {
                ensure(a.hits == h1 && b.hits == h2 && a.positions_used == used && a.layers_used == 6, || {
                    format!("query {i}: engine ({}, {}, {}) vs recount ({h1}, {h2}, {used})", a.hits, b.hits, a.positions_used)
                })?;
                compared += 1;
            }
            (None, None) => ensure(used == 0, || format!("query {i}: engine found no signal, recount {used} positions"))?,
            _ => return Err(format!("query {i}: only one BD defined")),
        }
    }
    let took = start.elapsed();
    ensure(took < BD_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{compared}/{} queries with signal match exactly; {took:.1?}", pop.cases.len()))
}

fn criterion_bddiff_algebra(pop: &BdPopulation) -> Outcome {
    let cfg = bd_metric();
    let mut checked = 0;
    for (i, (r, b1, b2)) in pop.cases.iter().enumerate() {
        let m = measure(&pop.mock, r, Task::Fk, b1, b2, &cfg).map_err(e2s)?;
        let (Some(a), Some(b)) = (m.bd1, m.bd2) else { continue };
        let d12 = bd_diff(&a, &b).map_err(e2s)?;
        let d21 = bd_diff(&b, &a).map_err(e2s)?;
        ensure(d12.numerator == -d21.numerator && d12.denominator == d21.denominator, || {
            format!("query {i}: not antisymmetric")
        })?;
        ensure(d12.value() == -d21.value(), || format!("query {i}: float values not antisymmetric"))?;
        ensure((-1.0..=1.0).contains(&d12.value()), || format!("query {i}: {} outside [-1, 1]", d12.value()))?;
        ensure(bd_diff(&a, &a).map_err(e2s)?.numerator == 0, || format!("query {i}: BDDiff(b, b) != 0"))?;
        checked += 1;
    }
    ensure(checked > 0, || "no query had a belief signal".to_owned())?;
    Ok(format!("{checked} queries: antisymmetric, bounded, self-difference zero"))
}

// ---------------------------------------------------------------------------
// Steering update
// ---------------------------------------------------------------------------

fn criterion_steer_update() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0f64;
    let mut singular = 0;
    for draw in 0..1000 {
        let d = rng.random_range(1..=64);
        let sh = 10f64.powf(rng.random_range(-3.0..3.0));
        let sv = 10f64.powf(rng.random_range(-3.0..3.0));
        let h: Vec<f32> = (0..d).map(|_| (rng.random_range(-1.0..1.0) * sh) as f32).collect();
        let v: Vec<f32> = (0..d).map(|_| (rng.random_range(-1.0..1.0) * sv) as f32).collect();
        let alpha: f32 = rng.random_range(-5.0..5.0);
        let norm = |x: &[f32]| x.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
        match steer_update(&h, &v, alpha, draw) {
            Ok(u) => {
                let rel = (norm(&u) - norm(&h)).abs() / norm(&h);
                worst = worst.max(rel);
            }
            Err(Error::Singular { .. }) => singular += 1,
            Err(e) => return Err(e.to_string()),
        }
    }
    ensure(worst <= NORM_REL_TOL, || format!("worst relative norm error {worst:e}"))?;

    // alpha = 0 resumes reproduce the original sampled generation.
    let tiny = small_tiny();
    let mock = common::small_mock();
    let models: [(&str, &dyn InstrumentedLM); 2] = [("tiny", &tiny), ("mock", &mock)];
    let mut runs = 0;
    for (name, lm) in models {
        let p = user("What is the capital of France?");
        for seed in 0..5 {
            let s = GenerationSettings::sampled(0.5, seed).with_max_new_tokens(24);
            let r = lm.generate_with_trace(&p, &s).map_err(e2s)?;
            let pos = 3.min(r.generated_tokens.len() - 1);
            let v: Vec<f32> = (0..lm.config().hidden_dim).map(|i| (i as f32 * 0.3).cos()).collect();
            let site = InjectionSite { position: pos, layer: 1, vector: v };
            let same = lm.steered_generate(&r, &site, 0.0, 3, &s).map_err(e2s)?;
            ensure(same.generated_tokens == r.generated_tokens, || format!("{name} seed {seed}: tokens differ"))?;
            runs += 1;
        }
    }
    Ok(format!("worst norm error {worst:.1e} over 1000 draws ({singular} singular); {runs} alpha=0 runs identical"))
}

// ---------------------------------------------------------------------------
// Steering suite
// ---------------------------------------------------------------------------

fn steering_suite() -> (ScriptedMock, Vec<SteeringItem>) {
    let b = beliefs(20);
    let mut spec = mock_spec(&spec_pairs(&b), 20, Vec::new());
    let reasoning = format!("Step{}.", " step".repeat(34));
    let mut queries = Vec::new();
    for i in 0..50 {
        let pair = i % 10;
        let (base, counter) = (&b[2 * pair], &b[2 * pair + 1]);
        // Even queries: the model answers the base belief; odd: the counter.
        let (winner, loser) = if i % 2 == 0 { (base, counter) } else { (counter, base) };
        let u = 0.08 + 0.0014 * i as f32;
        let mut plan = vec![entry(2, 1, &[(loser.0.as_str(), 1.0)]), entry(5, 3, &[(loser.0.as_str(), 18.0 * u - 1.0)])];
        plan.extend((10..30).map(|p| entry(p, 1, &[(winner.0.as_str(), u)])));
        let trigger = format!("s{i:03}");
        let mut sc = scenario(&trigger, plan);
        sc.reasoning = Some(reasoning.clone());
        spec.scenarios.push(sc);
        queries.push(BeliefQuery {
            id: format!("fk/{i:06}/none"),
            task: Task::Fk,
            question: format!("Which city is {trigger}?"),
            manipulation: Manipulation::None,
            manipulation_text: String::new(),
            b_base: belief_of(&base.1),
            b_counter: None,
            system_placement: None,
        });
    }
    let mock = ScriptedMock::new(spec).unwrap();
    let items = queries
        .into_iter()
        .enumerate()
        .map(|(i, query)| {
            let prompt = assemble_prompt(&query, true).unwrap();
            let record = mock.generate_with_trace(&prompt, &GenerationSettings::greedy()).unwrap();
            let pair = (i % 10) * 2 + 1;
            SteeringItem { query, record, counter: belief_of(NAMES[pair]) }
        })
        .collect();
    (mock, items)
}

fn criterion_steering() -> Outcome {
    let start = Instant::now();
    let (mock, items) = steering_suite();
    let report = evaluate_steering(&mock, &items, &SteeringConfig::default(), &MetricConfig::default()).map_err(e2s)?;
    let took = start.elapsed();
    let tc = report.toward_counter;
    let tb = report.toward_base;
    ensure(report.no_site == 0, || format!("{} queries without a site", report.no_site))?;
    ensure(tc.total + tb.total == items.len(), || format!("only {} of {} scored", tc.total + tb.total, items.len()))?;
    let failed: Vec<&str> = report
        .records
        .iter()
        .filter(|r| !r.margin.as_ref().is_some_and(|m| m.success))
        .map(|r| r.query_id.as_str())
        .collect();
    ensure(failed.is_empty(), || format!("failures: {failed:?}"))?;
    ensure(took < STEERING_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "toward counter {}/{}, toward base {}/{}; {took:.1?}",
        tc.successes, tc.total, tb.successes, tb.total
    ))
}

// ---------------------------------------------------------------------------
// Patched decoding vs nearest code
// ---------------------------------------------------------------------------

fn criterion_psi() -> Outcome {
    let b = beliefs(20);
    let mock = ScriptedMock::new(mock_spec(&spec_pairs(&b), 20, Vec::new())).unwrap();
    let settings = GenerationSettings::sampled(0.5, 0);
    let targets = target_layers(8, 4).map_err(e2s)?;
    let mut vectors: Vec<Vec<f32>> = (0..20).map(|i| unit(20, i)).collect();
    for i in 0..20 {
        for j in 0..20 {
            if i != j {
                vectors.push(unit(20, i).iter().zip(unit(20, j)).map(|(a, c)| a + 0.5 * c).collect());
            }
        }
    }
    let mut cases = 0;
    for v in &vectors {
        let nearest = (0..20).max_by(|&x, &y| v[x].total_cmp(&v[y])).unwrap();
        for (k, (_, name)) in b.iter().enumerate() {
            let got = psi(&mock, v, &belief_of(name), &targets, &settings).map_err(e2s)?;
            ensure(got == u8::from(k == nearest), || format!("vector {v:?}, belief {name}: psi {got}"))?;
            cases += 1;
        }
    }
    ensure(cases >= 400, || format!("only {cases} cases"))?;
    Ok(format!("{cases} (vector, belief) cases agree"))
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Midranks by pairwise comparison, doubled to stay integral.
fn doubled_ranks(xs: &[f64]) -> Vec<i64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as i64;
            let equal = xs.iter().filter(|&&y| y == x).count() as i64;
            2 * below + equal + 1
        })
        .collect()
}

fn wilcoxon_oracle(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let r = doubled_ranks(&abs);
    let obs: i64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| r[i]).sum();
    let total: i64 = r.iter().sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let w: i64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| r[i]).sum();
        le += u64::from(w <= obs);
        ge += u64::from(w >= obs);
    }
    let stat = obs.min(total - obs) as f64 / 2.0;
    let p = (2.0 * le.min(ge) as f64 / f64::from(1u32 << n)).min(1.0);
    (stat, p)
}

fn mwu_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let r = doubled_ranks(&pooled);
    let na = a.len() as i64;
    let u2 = |sum2: i64| sum2 - na * (na + 1);
    let obs = u2(r[..a.len()].iter().sum());
    let n = pooled.len();
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let s: i64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| r[i]).sum();
        let u = u2(s);
        le += u64::from(u <= obs);
        ge += u64::from(u >= obs);
        total += 1;
    }
    let two = (2.0 * le.min(ge) as f64 / total as f64).min(1.0);
    (obs as f64 / 2.0, two, ge as f64 / total as f64)
}

fn criterion_stats() -> Outcome {
    let opts = RankTestOptions::default();
    let wil = [
        vec![1.5, -0.5, 2.0, 2.0, -3.0, 0.75, 1.0, -1.0],
        vec![0.3, 0.1, 0.4, 0.15, 0.9, 0.26, 0.53, 0.58],
        vec![-2.0, -1.0, 1.0, 2.0, 3.0, -3.0, 0.5, -0.5],
    ];
    for d in &wil {
        let pairs: Vec<(f64, f64)> = d.iter().map(|&x| (x, 0.0)).collect();
        let got = wilcoxon_signed_rank(&pairs, opts).map_err(e2s)?;
        let (stat, p) = wilcoxon_oracle(d);
        ensure(got.method == TestMethod::WilcoxonExact, || "Wilcoxon n=8 not exact".to_owned())?;
        ensure(got.statistic == stat, || format!("Wilcoxon statistic {} vs {stat}", got.statistic))?;
        ensure((got.p_value - p).abs() <= EXACT_P_TOL, || format!("Wilcoxon p {} vs {p}", got.p_value))?;
    }
    let mwu = [
        (vec![1.2, 3.4, 2.2, 5.0, 2.2, 0.3], vec![4.1, 2.2, 6.0, 3.3, 7.7, 1.0]),
        (vec![0.9, 0.8, 0.7, 0.95, 0.85, 0.6], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.65]),
        (vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], vec![1.0, 2.0, 3.0, 4.0, 4.0, 1.0]),
    ];
    for (a, b) in &mwu {
        let (u, two, one) = mwu_oracle(a, b);
        let g2 = mann_whitney_u(a, b, true, opts).map_err(e2s)?;
        let g1 = mann_whitney_u(a, b, false, opts).map_err(e2s)?;
        ensure(g2.method == TestMethod::MannWhitneyExact, || "MWU 6x6 not exact".to_owned())?;
        ensure(g2.statistic == u && g1.statistic == u, || format!("U {} vs {u}", g2.statistic))?;
        ensure((g2.p_value - two).abs() <= EXACT_P_TOL, || format!("MWU two-sided p {} vs {two}", g2.p_value))?;
        ensure((g1.p_value - one).abs() <= EXACT_P_TOL, || format!("MWU one-sided p {} vs {one}", g1.p_value))?;
    }
    // Frozen from 50-digit arbitrary-precision evaluation of the regularized
    // incomplete beta function.
    let t_cases: [(&[f64], f64, f64, f64); 4] = [
        (&[0.46, 0.48, 0.50, 0.47, 0.49], 1.0 / 3.0, 20.7417989148054, 1.5960099954712164e-05),
        (&[0.35, 0.34, 0.33, 0.36, 0.32], 1.0 / 3.0, 0.942809041582067, 0.199580808771639),
        (&[1.2, 0.4, 2.9, -0.3, 1.1], 0.0, 1.9869567657695135, 0.05893000130331174),
        (&[0.1, 0.2, 0.15, 0.05, 0.12], 0.5, -15.027982419175713, 0.9999428776598621),
    ];
    for (xs, mu, t, p) in t_cases {
        let got = t_test_one_sided(xs, mu).map_err(e2s)?;
        ensure((got.statistic - t).abs() <= T_TOL * t.abs().max(1.0), || format!("t {} vs {t}", got.statistic))?;
        ensure((got.p_value - p).abs() <= T_TOL, || format!("t-test p {:e} vs {p:e}", got.p_value))?;
    }
    Ok("3 Wilcoxon (n=8), 3 Mann-Whitney (6x6, both tails), 4 t-test (n=5) cases match".to_owned())
}

// ---------------------------------------------------------------------------
// Discretization
// ---------------------------------------------------------------------------

/// Labels from thresholds at the k−1 widest gaps of the sorted values.
fn gap_oracle(xs: &[f64], k: usize) -> Vec<usize> {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let mut gaps: Vec<(f64, f64)> = s.windows(2).map(|w| (w[1] - w[0], (w[0] + w[1]) / 2.0)).collect();
    gaps.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut thresholds: Vec<f64> = gaps[..k - 1].iter().map(|g| g.1).collect();
    thresholds.sort_by(f64::total_cmp);
    xs.iter().map(|x| 1 + thresholds.iter().filter(|&&t| *x > t).count()).collect()
}

fn criterion_discretize() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for set in 0..100 {
        let k = rng.random_range(2..=4);
        let width = rng.random_range(0.002..0.02);
        let gaps: Vec<f64> = (1..k).map(|_| 10.0 * width + rng.random_range(0.0..0.1)).collect();
        let total = k as f64 * width + gaps.iter().sum::<f64>();
        let mut lo = rng.random_range(0.0..(1.0 - total));
        let mut xs = Vec::new();
        for c in 0..k {
            let size = rng.random_range(2..=12);
            xs.extend((0..size).map(|_| lo + rng.random_range(0.0..=width)));
            lo += width + gaps.get(c).copied().unwrap_or(0.0);
        }
        xs.shuffle(&mut rng);
        let got = discretize(&xs, k).map_err(e2s)?;
        ensure(got == gap_oracle(&xs, k), || format!("dataset {set} (k={k}) disagrees"))?;
    }
    Ok("100/100 datasets agree".to_owned())
}

// ---------------------------------------------------------------------------
// Reasoning span
// ---------------------------------------------------------------------------

fn record_of(tokens: &[&str]) -> GenerationRecord {
    let mut offsets = vec![0];
    let mut text = String::new();
    for t in tokens {
        text.push_str(t);
        offsets.push(text.len());
    }
    let n = tokens.len();
    GenerationRecord {
        prompt_tokens: vec![0],
        generated_tokens: (0..n as u32).collect(),
        text,
        token_offsets: offsets,
        trace: ActivationTrace::from_flat(n, 1, 1, vec![0.0; n]).unwrap(),
        settings: GenerationSettings::greedy(),
        hit_length_limit: false,
        answer_logits: None,
        interventions: Vec::new(),
    }
}

struct SpanFixture {
    name: &'static str,
    task: Task,
    tokens: &'static [&'static str],
    candidates: [&'static str; 2],
    include_final: bool,
    expected: Option<Range<usize>>,
}

const FK_C: [&str; 2] = ["Paris", "Rome"];

fn span_fixtures() -> Vec<SpanFixture> {
    let f = |name, task, tokens, candidates, include_final, expected| SpanFixture {
        name,
        task,
        tokens,
        candidates,
        include_final,
        expected,
    };
    let basic: &[&str] = &["Paris", " is", " the", " capital", ".", " Final", " answer", ":", " Paris"];
    let one: &[&str] = &["Ok", " Final answer:", " Kabul"];
    let bird: &[&str] = &["It", " sang", ".", " Final", " answer", ":", " The", " bird"];
    let birds = ["The bird", "The limb"];
    vec![
        f("split delimiter", Task::Fk, basic, FK_C, true, Some(0..8)),
        f("colon inside token", Task::Fk, &["Think", ".", " Final", " answer:", " Rome"], FK_C, true, Some(0..4)),
        f("delimiter in one token", Task::Fk, one, FK_C, true, Some(0..2)),
        f(
            "last delimiter wins",
            Task::Fk,
            &["Final", " answer", ":", " maybe", ".", " Final", " answer", ":", " Kabul"],
            FK_C,
            true,
            Some(0..8),
        ),
        f("delimiter first", Task::Fk, &["Final", " answer", ":", " Kabul"], FK_C, true, Some(0..3)),
        f("nothing after delimiter", Task::Fk, &["x", " Final", " answer", ":"], FK_C, true, Some(0..4)),
        f("missing delimiter", Task::Fk, &["Paris", " it", " is", "."], FK_C, true, None),
        f("lowercase delimiter", Task::Fk, &["so", " final", " answer", ":", " Paris"], FK_C, true, None),
        f("colon merged with answer", Task::Fk, &["So", " Final", " answer", ": Paris"], FK_C, true, Some(0..4)),
        f(
            "newline before delimiter",
            Task::Fk,
            &["Reason", ".", "\n", "Final", " answer", ":", " Paris", "."],
            FK_C,
            true,
            Some(0..6),
        ),
        f("no final token", Task::Fk, basic, FK_C, false, Some(0..7)),
        f("no final token, single delimiter token", Task::Fk, one, FK_C, false, Some(0..1)),
        f("shared prefix", Task::Ws, bird, birds, true, Some(0..7)),
        f("shared prefix, no final token", Task::Ws, bird, birds, false, Some(0..6)),
        f(
            "no shared prefix",
            Task::Ws,
            &["She", " did", ".", " Final", " answer", ":", " Debbie"],
            ["Debbie", "Tina"],
            true,
            Some(0..6),
        ),
        f(
            "whitespace token skipped",
            Task::Ws,
            &["Hmm", " Final", " answer", ":", " ", "The", " limb"],
            birds,
            true,
            Some(0..6),
        ),
        f(
            "multi-token shared prefix",
            Task::Ws,
            &["Hm", " Final", " answer", ":", " Mr", ".", " Smith"],
            ["Mr. Smith", "Mr. Jones"],
            true,
            Some(0..6),
        ),
        f(
            "case-insensitive shared prefix",
            Task::Ws,
            &["Hm", " Final", " answer", ":", " THE", " bee"],
            ["the bee", "The flower"],
            true,
            Some(0..5),
        ),
        f(
            "factual task ignores shared prefix",
            Task::Fk,
            &["Hm", " Final", " answer", ":", " New", " York"],
            ["New York", "New Delhi"],
            true,
            Some(0..4),
        ),
        f(
            "partial-word shared prefix",
            Task::Ws,
            &["Hm", " Final", " answer", ":", " B", "ill"],
            ["Bill", "Bob"],
            true,
            Some(0..5),
        ),
    ]
}

fn criterion_spans() -> Outcome {
    let fixtures = span_fixtures();
    for fx in &fixtures {
        let r = record_of(fx.tokens);
        let cfg = MetricConfig { include_final_token: fx.include_final, ..MetricConfig::default() };
        let got = reasoning_span(&r, fx.task, &cfg, &fx.candidates);
        match (&got, &fx.expected) {
            (Ok(g), Some(e)) if g == e => {}
            (Err(Error::Parse(_)), None) => {}
            _ => return Err(format!("{}: got {got:?}, expected {:?}", fx.name, fx.expected)),
        }
    }
    ensure(fixtures.len() == 20, || format!("{} fixtures", fixtures.len()))?;
    Ok("20/20 fixtures parse to the expected ranges".to_owned())
}

// ---------------------------------------------------------------------------
// Corpus goldens
// ---------------------------------------------------------------------------

#[derive(serde::Deserialize)]
struct Golden {
    id: String,
    system_role: bool,
    system: String,
    user: String,
}

fn criterion_corpus() -> Outcome {
    let goldens: Vec<Golden> = serde_json::from_str(include_str!("golden/prompts.json")).map_err(|e| e.to_string())?;
    let (triplets, templates) = fk_inputs();
    let mut q = build_fk_corpus(&triplets, &templates).map_err(e2s)?;
    q.extend(build_ws_corpus(&ws_inputs(), &[]).map_err(e2s)?);
    let mut pairs = std::collections::BTreeSet::new();
    for g in &goldens {
        let query = q.iter().find(|x| x.id == g.id).ok_or_else(|| format!("no query {}", g.id))?;
        let ChatPrompt::Chat { messages } = assemble_prompt(query, g.system_role).map_err(e2s)? else {
            return Err("not a chat prompt".to_owned());
        };
        ensure(messages[0].content == g.system && messages[1].content == g.user, || {
            format!("{} (system role {}) differs", g.id, g.system_role)
        })?;
        pairs.insert((query.task, query.manipulation));
    }
    let expected = Task::Fk.manipulations().len() + Task::Ws.manipulations().len();
    ensure(pairs.len() == expected, || format!("{} of {expected} pairs covered", pairs.len()))?;
    Ok(format!("{} goldens byte-identical, {expected}/{expected} (task, manipulation) pairs", goldens.len()))
}

// ---------------------------------------------------------------------------
// Directional replication
// ---------------------------------------------------------------------------

fn criterion_directional() -> Outcome {
    let b = beliefs(BD_BELIEFS);
    let mut spec = mock_spec(&spec_pairs(&b), 8, Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut pairs = Vec::new();
    for i in 0..100 {
        let x = rng.random_range(0..BD_BELIEFS);
        let y = (x + rng.random_range(1..BD_BELIEFS)) % BD_BELIEFS;
        let (base, counter) = (b[x].0.as_str(), b[y].0.as_str());
        // Shared background over positions 0..=5, with at least one base cell in the window.
        let mut plan = vec![entry(rng.random_range(0..6), rng.random_range(2..=7), &[(base, 1.0)])];
        for p in 0..6 {
            for l in 0..=8 {
                if rng.random_bool(0.25) {
                    let who = if rng.random_bool(0.5) { base } else { counter };
                    plan.push(entry(p, l, &[(who, rng.random_range(0.2f32..2.0))]));
                }
            }
        }
        // Neutral mention: counter energy outside the window only.
        let mut lexical = plan.clone();
        lexical.push(entry(9, 0, &[(counter, 1.0)]));
        // Assertion: counter energy at fresh positions across the window.
        let mut assertion = plan;
        for p in [7, 8] {
            for l in 2..=7 {
                assertion.push(entry(p, l, &[(counter, 1.5)]));
            }
        }
        spec.scenarios.push(scenario(&format!("p{i:03} lexical"), lexical));
        spec.scenarios.push(scenario(&format!("p{i:03} assertion"), assertion));
        pairs.push((belief_of(&b[x].1), belief_of(&b[y].1)));
    }
    let mock = ScriptedMock::new(spec).unwrap();
    let cfg = bd_metric();
    let mut wins = 0;
    for (i, (base, counter)) in pairs.iter().enumerate() {
        let diff = |kind: &str| -> Result<f64, String> {
            let r = mock
                .generate_with_trace(&user(&format!("p{i:03} {kind}")), &GenerationSettings::greedy())
                .map_err(e2s)?;
            let m = measure(&mock, &r, Task::Fk, base, counter, &cfg).map_err(e2s)?;
            m.diff.map(|d| d.value()).ok_or_else(|| format!("pair {i} {kind}: no belief signal"))
        };
        let (a, l) = (diff("assertion")?, diff("lexical")?);
        if a < l {
            wins += 1;
        }
    }
    ensure(wins == 100, || format!("assertion < lexical in {wins}/100 pairs"))?;
    Ok("assertion-style BDDiff < lexical-style BDDiff in 100/100 pairs".to_owned())
}

// ---------------------------------------------------------------------------
// Full-size reference values
// ---------------------------------------------------------------------------

fn criterion_targets() -> Outcome {
    let t = reference_targets();
    let find = |model: &str, task: &str, kind: TargetKind, cond: &str| {
        t.iter().find(|x| x.model == model && x.task == task && x.kind == kind && x.condition == cond)
    };
    let g = GEMMA_27B.name;
    let l = LLAMA_70B.name;
    let checks: [(&str, &str, TargetKind, &str, f64, Option<f64>); 8] = [
        (g, "fk", TargetKind::MedianBdDiff, "none", 0.45, None),
        (l, "fk", TargetKind::MedianBdDiff, "none", 0.61, None),
        (g, "fk", TargetKind::SteeringSuccess, "toward_counter", 0.854, None),
        (g, "fk", TargetKind::SteeringSuccess, "toward_base", 0.667, None),
        (l, "fk", TargetKind::SteeringSuccess, "toward_counter", 0.755, None),
        (l, "fk", TargetKind::SteeringSuccess, "toward_base", 0.833, None),
        (g, "fk", TargetKind::NeuroAccuracy, "bd_base", 0.48, Some(0.02)),
        (g, "fk", TargetKind::ProbeShare, "bd_counter/high", 0.47, None),
    ];
    for (model, task, kind, cond, value, tol) in checks {
        let x = find(model, task, kind, cond).ok_or_else(|| format!("missing {model}/{task}/{cond}"))?;
        ensure(x.value == value && x.tolerance == tol, || format!("{} = {} ± {:?}", x.name, x.value, x.tolerance))?;
    }
    ensure(t.iter().all(|x| !x.reproducible_at_desk_scale), || "a target claims desk-scale reproducibility".to_owned())?;
    ensure(
        LLAMA_70B.bd_window == LayerWindow::new(54, 73) && GEMMA_27B.bd_window == LayerWindow::new(46, 60),
        || "preset windows".to_owned(),
    )?;
    Ok(format!("{} full-size targets shipped as bridge presets, none reproducible in process", t.len()))
}

fn main() {
    let suite = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let pop = bd_population();
    results.push(("BD equals brute-force recount (200 mock queries)", criterion_bd_oracle(&pop)));
    results.push(("BDDiff antisymmetric and bounded", criterion_bddiff_algebra(&pop)));
    results.push(("Norm-preserving update and alpha=0 identity", criterion_steer_update()));
    results.push(("Steering succeeds on constructed mock suite (50 queries)", criterion_steering()));
    results.push(("Patched decoding agrees with nearest code", criterion_psi()));
    results.push(("Rank and t tests match exact oracles", criterion_stats()));
    results.push(("k-means labels match gap-threshold oracle", criterion_discretize()));
    results.push(("Reasoning-span fixtures", criterion_spans()));
    results.push(("Corpus prompts match goldens", criterion_corpus()));
    results.push(("Assertion lowers BDDiff below lexical mention", criterion_directional()));
    results.push(("Full-size targets shipped, marked not reproducible", criterion_targets()));
    let took = suite.elapsed();
    let budget = if took < SUITE_BUDGET { Ok(format!("{took:.1?}")) } else { Err(format!("{took:?}")) };
    results.push(("Suite runs in process within 5 minutes", budget));

    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let _ = match outcome {
            Ok(detail) => writeln!(out, "PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                writeln!(out, "FAIL {:>2} {name}: {why}", i + 1)
            }
        };
    }
    let _ = writeln!(out, "acceptance: {} passed, {failed} failed", results.len() - failed);
    drop(out);
    if failed > 0 {
        std::process::exit(1);
    }
}
