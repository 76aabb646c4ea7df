// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tables, plots and the content-hash manifest of a run directory.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use beliefscope::corpus::{ActionLabel, Manipulation, Task};
use beliefscope::stats::TestResult;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::plot::{bar_chart, box_chart, Series};
use crate::run::ExperimentReport;
use crate::HarnessError;

/// Manifest file name inside a run directory.
pub const MANIFEST: &str = "manifest.json";

/// Output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    /// Aligned plain-text tables under `tables/*.txt`.
    TableText,
    /// Comma-separated tables with a header row under `tables/*.csv`.
    DelimitedValues,
    /// SVG charts under `plots/*.svg`.
    PlotImage,
}

impl Format {
    /// Every format.
    pub const ALL: [Format; 3] = [Self::TableText, Self::DelimitedValues, Self::PlotImage];

    /// CLI name.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TableText => "table-text",
            Self::DelimitedValues => "delimited-values",
            Self::PlotImage => "plot-image",
        }
    }
}

impl FromStr for Format {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown format {s:?} (table-text, delimited-values, plot-image)")))
    }
}

/// One emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    /// Hex SHA-256 of the content.
    pub sha256: String,
    /// Size in bytes.
    pub bytes: u64,
}

/// Section without content for a format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmittedFile {
    /// Section name.
    pub section: String,
    /// Format name.
    pub format: String,
    /// Why nothing was written.
    pub reason: String,
}

/// Every file of a run directory with its hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Files, sorted by path.
    pub files: Vec<ManifestEntry>,
    /// Empty sections.
    pub omitted: Vec<OmittedFile>,
}

/// A rectangular table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem.
    pub name: &'static str,
    /// Column names.
    pub header: Vec<String>,
    /// Rows, each as long as the header.
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// UTF-8 comma-separated text with a header row.
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| HarnessError::Run(e.to_string());
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Run(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Run(e.to_string()))
    }

    /// Space-aligned text with a rule under the header.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                std::iter::once(&self.header[c]).chain(self.rows.iter().map(|r| &r[c])).map(|s| s.chars().count()).max().unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            padded.join("  ").trim_end().to_owned() + "\n"
        };
        let mut out = line(&self.header);
        out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

/// Fixed-point text; values that round to zero never carry a sign.
fn fixed(x: f64, digits: usize) -> String {
    let s = format!("{x:.digits$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.chars().all(|c| c == '0' || c == '.') => rest.to_owned(),
        _ => s,
    }
}

fn num(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_owned(), |x| fixed(x, digits))
}

fn test_cells(t: Option<&TestResult>) -> [String; 2] {
    match t {
        Some(t) => [fixed(t.statistic, 4), format!("{:.4e}", t.p_value)],
        None => ["-".to_owned(), "-".to_owned()],
    }
}

fn action_name(a: ActionLabel) -> &'static str {
    match a {
        ActionLabel::Base => "base",
        ActionLabel::Counter => "counter",
        ActionLabel::Other => "other",
    }
}

/// Manipulations in reporting order: FK rows, then rows only WS defines.
fn manipulation_rows(tasks: &[Task]) -> Vec<Manipulation> {
    let mut rows: Vec<Manipulation> = Vec::new();
    for t in tasks {
        for m in t.manipulations() {
            if !rows.contains(m) {
                rows.push(*m);
            }
        }
    }
    rows
}

/// Median BDDiff with one row per manipulation and one column per (model, task).
pub fn medians_table(report: &ExperimentReport) -> Table {
    let tasks: Vec<Task> = [Task::Fk, Task::Ws].into_iter().filter(|t| report.medians.iter().any(|r| r.task == *t)).collect();
    let mut header = vec!["manipulation".to_owned()];
    header.extend(tasks.iter().map(|t| format!("{}/{t}", report.model)));
    let rows = manipulation_rows(&tasks)
        .into_iter()
        .filter(|m| report.medians.iter().any(|r| r.manipulation == *m))
        .map(|m| {
            let mut row = vec![m.label().to_owned()];
            for t in &tasks {
                let cell = report.medians.iter().find(|r| r.task == *t && r.manipulation == m);
                row.push(num(cell.and_then(|c| c.median), 2));
            }
            row
        })
        .collect();
    Table { name: "bddiff_medians", header, rows }
}

/// Every table of the report; empty ones have no rows.
pub fn tables(report: &ExperimentReport) -> Vec<Table> {
    let s = |x: &str| x.to_owned();
    let mut out = vec![medians_table(report)];
    out.push(Table {
        name: "bddiff_counts",
        header: vec![s("task"), s("manipulation"), s("n"), s("median"), s("excluded_no_signal"), s("excluded_unparsed")],
        rows: report
            .medians
            .iter()
            .map(|r| {
                vec![
                    r.task.to_string(),
                    r.manipulation.slug().to_owned(),
                    r.n.to_string(),
                    num(r.median, 4),
                    r.excluded_no_signal.to_string(),
                    r.excluded_unparsed.to_string(),
                ]
            })
            .collect(),
    });
    out.push(Table {
        name: "paired_tests",
        header: vec![s("task"), s("manipulation"), s("pairs"), s("wilcoxon_w"), s("p_value"), s("note")],
        rows: report
            .paired_tests
            .iter()
            .map(|t| {
                let [w, p] = test_cells(t.result.as_ref());
                vec![t.task.to_string(), t.manipulation.slug().to_owned(), t.pairs.to_string(), w, p, t.note.clone().unwrap_or_default()]
            })
            .collect(),
    });
    out.push(Table {
        name: "action_split",
        header: vec![
            s("task"),
            s("manipulation"),
            s("action"),
            s("instances"),
            s("n"),
            s("min"),
            s("q1"),
            s("median"),
            s("q3"),
            s("max"),
        ],
        rows: report
            .action_cells
            .iter()
            .map(|c| {
                let b = c.summary;
                vec![
                    c.task.to_string(),
                    c.manipulation.slug().to_owned(),
                    action_name(c.action).to_owned(),
                    c.instances.to_string(),
                    c.query_ids.len().to_string(),
                    fixed(b.min, 4),
                    fixed(b.q1, 4),
                    fixed(b.median, 4),
                    fixed(b.q3, 4),
                    fixed(b.max, 4),
                ]
            })
            .collect(),
    });
    out.push(Table {
        name: "action_tests",
        header: vec![s("task"), s("manipulation"), s("mann_whitney_u"), s("p_value"), s("note")],
        rows: report
            .action_tests
            .iter()
            .map(|t| {
                let [u, p] = test_cells(t.result.as_ref());
                vec![t.task.to_string(), t.manipulation.slug().to_owned(), u, p, t.note.clone().unwrap_or_default()]
            })
            .collect(),
    });
    let mut steering_rows = Vec::new();
    if let Some(st) = &report.steering {
        for (name, r) in [("toward_counter", st.toward_counter), ("toward_base", st.toward_base)] {
            steering_rows.push(vec![name.to_owned(), r.successes.to_string(), r.total.to_string(), num(r.rate(), 3)]);
        }
    }
    out.push(Table {
        name: "steering",
        header: vec![s("direction"), s("successes"), s("total"), s("rate")],
        rows: steering_rows,
    });
    out.push(Table {
        name: "neuro_accuracy",
        header: vec![s("task"), s("stream"), s("samples"), s("mean"), s("std"), s("chance"), s("t"), s("p_value"), s("note")],
        rows: report
            .neuro
            .iter()
            .map(|n| {
                let r = n.report.as_ref();
                let [t, p] = test_cells(r.and_then(|r| r.t_test.as_ref()));
                vec![
                    n.task.to_string(),
                    n.stream.clone(),
                    n.samples.to_string(),
                    num(r.map(|r| r.mean), 3),
                    num(r.map(|r| r.std), 3),
                    num(r.map(|r| r.chance), 3),
                    t,
                    p,
                    n.note.clone().unwrap_or_default(),
                ]
            })
            .collect(),
    });
    let mut probe_rows = Vec::new();
    for p in &report.probe {
        match &p.report {
            Some(r) => {
                for (class, before) in &p.shares_before {
                    let after = p.shares_after.get(class).copied();
                    probe_rows.push(vec![
                        p.task.to_string(),
                        p.stream.clone(),
                        class.to_string(),
                        fixed(*before, 3),
                        num(after, 3),
                        num(r.shifts.get(class - 1).copied(), 3),
                        r.evaluated.to_string(),
                        String::new(),
                    ]);
                }
            }
            None => probe_rows.push(vec![
                p.task.to_string(),
                p.stream.clone(),
                "-".into(),
                "-".into(),
                "-".into(),
                "-".into(),
                "0".into(),
                p.note.clone().unwrap_or_default(),
            ]),
        }
    }
    out.push(Table {
        name: "probe_shares",
        header: vec![
            s("task"),
            s("stream"),
            s("class"),
            s("share_before"),
            s("share_after"),
            s("shift"),
            s("evaluated"),
            s("note"),
        ],
        rows: probe_rows,
    });
    if report.medians.is_empty() {
        out[0].rows.clear();
    }
    out
}

/// Every chart of the report; `None` for empty sections.
pub fn plots(report: &ExperimentReport) -> Vec<(&'static str, Option<String>)> {
    let medians = (!report.medians.is_empty()).then(|| {
        let t = medians_table(report);
        let categories: Vec<String> = t.rows.iter().map(|r| r[0].clone()).collect();
        let series: Vec<Series> = (1..t.header.len())
            .map(|c| Series { name: t.header[c].clone(), values: t.rows.iter().map(|r| r[c].parse().ok()).collect() })
            .collect();
        bar_chart("Median BDDiff by manipulation", "BDDiff", &categories, &series, (-1.0, 1.0))
    });
    let split = (!report.action_cells.is_empty()).then(|| {
        let boxes: Vec<(String, _)> = report
            .action_cells
            .iter()
            .map(|c| (format!("{}/{}/{}", c.task, c.manipulation.slug(), action_name(c.action)), c.summary))
            .collect();
        box_chart("BDDiff by action", "BDDiff", &boxes, (-1.0, 1.0))
    });
    let probes: Vec<_> = report.probe.iter().filter(|p| p.report.is_some()).collect();
    let shifts = (!probes.is_empty()).then(|| {
        let k = probes.iter().map(|p| p.shares_before.len()).max().unwrap_or(0);
        let categories: Vec<String> = probes.iter().map(|p| format!("{}/{}", p.task, p.stream)).collect();
        let series: Vec<Series> = (1..=k)
            .map(|class| Series {
                name: format!("class {class}"),
                values: probes
                    .iter()
                    .map(|p| p.report.as_ref().and_then(|r| r.shifts.get(class - 1).copied()))
                    .collect(),
            })
            .collect();
        bar_chart("Label share shift under injection", "shift", &categories, &series, (-1.0, 1.0))
    });
    vec![("bddiff_medians", medians), ("action_split", split), ("probe_shifts", shifts)]
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<(), HarnessError> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("inside root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST {
            continue;
        }
        let bytes = fs::read(&path)?;
        out.push(ManifestEntry { path: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    Ok(())
}

/// Write the requested formats under `run_dir` and rewrite the manifest.
/// Files of a requested format from an earlier emission are replaced.
pub fn emit_report(report: &ExperimentReport, run_dir: &Path, formats: &[Format]) -> Result<Manifest, HarnessError> {
    let mut omitted = Vec::new();
    let tables_dir = run_dir.join("tables");
    let plots_dir = run_dir.join("plots");
    for f in formats {
        let (dir, ext) = match f {
            Format::TableText => (&tables_dir, "txt"),
            Format::DelimitedValues => (&tables_dir, "csv"),
            Format::PlotImage => (&plots_dir, "svg"),
        };
        fs::create_dir_all(dir)?;
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == ext) {
                fs::remove_file(p)?;
            }
        }
        let mut note = |section: &str| {
            omitted.push(OmittedFile { section: section.to_owned(), format: f.as_str().to_owned(), reason: "empty section".to_owned() });
        };
        match f {
            Format::TableText | Format::DelimitedValues => {
                for t in tables(report) {
                    if t.rows.is_empty() {
                        note(t.name);
                        continue;
                    }
                    let body = if *f == Format::TableText { t.to_text() } else { t.to_csv()? };
                    fs::write(dir.join(format!("{}.{ext}", t.name)), body)?;
                }
            }
            Format::PlotImage => {
                for (name, svg) in plots(report) {
                    match svg {
                        Some(svg) => fs::write(dir.join(format!("{name}.svg")), svg)?,
                        None => note(name),
                    }
                }
            }
        }
    }
    for dir in [&tables_dir, &plots_dir] {
        if dir.is_dir() && fs::read_dir(dir)?.next().is_none() {
            fs::remove_dir(dir)?;
        }
    }
    let mut files = Vec::new();
    collect_files(run_dir, run_dir, &mut files)?;
    let manifest = Manifest { files, omitted };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(run_dir.join(MANIFEST), text)?;
    Ok(manifest)
}

/// Re-emit a finished run from its `report.json`.
pub fn report_run(run_dir: &Path, formats: &[Format]) -> Result<Manifest, HarnessError> {
    let path = run_dir.join("report.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let report: ExperimentReport = serde_json::from_str(&text)?;
    emit_report(&report, run_dir, formats)
}
