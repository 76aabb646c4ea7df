// SPDX-License-Identifier: MIT OR Apache-2.0

//! `beliefscope` command-line interface.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beliefscope::bridge::serve_lm;
use beliefscope::corpus::{
    build_fk_corpus, build_ws_corpus, from_jsonl, to_jsonl, BeliefQuery, FactTriplet, TemplateTable, WsSentence,
};
use beliefscope_harness::config::ModelSpec;
use beliefscope_harness::demo::{demo_mock, demo_tiny};
use beliefscope_harness::report::{report_run, Format};
use beliefscope_harness::run::{execute, open_model};
use beliefscope_harness::HarnessError;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "beliefscope", version, about = "Measure and steer latent belief dominance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Fk,
    Ws,
}

#[derive(Subcommand)]
enum Command {
    /// Build a query corpus (JSON lines) from raw task data.
    BuildCorpus {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// FK: fact triplets; WS: annotated sentences. JSON lines.
        #[arg(long)]
        input: PathBuf,
        /// Relation templates (JSON object); required for fk.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Ids to drop, one per line (WS sentence ids, FK subjects).
        #[arg(long)]
        exclusions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment a config describes.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config: tiny, mock, or bridge:<endpoint>.
        #[arg(long)]
        model: Option<String>,
    },
    /// Re-emit tables and plots of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated: table-text, delimited-values, plot-image.
        #[arg(long, value_delimiter = ',', default_value = "table-text,delimited-values,plot-image")]
        formats: Vec<String>,
    },
    /// Write a random tiny transformer whose vocabulary covers a corpus.
    InitTiny {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a scripted demo mock covering every belief of a corpus.
    InitMock {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Self-report classes.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve an in-process model over the bridge protocol on stdin/stdout.
    Serve {
        /// tiny or mock.
        #[arg(long)]
        model: String,
        #[arg(long)]
        model_path: PathBuf,
    },
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_corpus(path: &Path) -> Result<Vec<BeliefQuery>, HarnessError> {
    Ok(from_jsonl(&read(path)?)?)
}

fn exclusions(path: Option<&Path>) -> Result<Vec<String>, HarnessError> {
    Ok(match path {
        Some(p) => read(p)?.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_owned).collect(),
        None => Vec::new(),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::BuildCorpus { task, input, templates, exclusions: excl, out } => {
            let excluded = exclusions(excl.as_deref())?;
            let text = read(&input)?;
            let queries = match task {
                TaskArg::Fk => {
                    let tpl_path = templates.ok_or_else(|| HarnessError::Config("fk needs --templates".to_owned()))?;
                    let table: TemplateTable = serde_json::from_str(&read(&tpl_path)?)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", tpl_path.display())))?;
                    let drop: BTreeSet<&str> = excluded.iter().map(String::as_str).collect();
                    let all: Vec<FactTriplet> = from_jsonl(&text)?;
                    let kept: Vec<FactTriplet> = all.iter().filter(|t| !drop.contains(t.subject.as_str())).cloned().collect();
                    eprintln!("triplets kept {}, dropped {}", kept.len(), all.len() - kept.len());
                    build_fk_corpus(&kept, &table)?
                }
                TaskArg::Ws => {
                    let sentences: Vec<WsSentence> = from_jsonl(&text)?;
                    let q = build_ws_corpus(&sentences, &excluded)?;
                    let kept = q.len() / beliefscope::corpus::Task::Ws.manipulations().len();
                    eprintln!("sentences kept {kept}, dropped {}", sentences.len() - kept);
                    q
                }
            };
            fs::write(&out, to_jsonl(&queries)?)?;
            eprintln!("wrote {} queries to {}", queries.len(), out.display());
        }
        Command::Run { config, model } => {
            let dir = execute(&config, model.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Report { run, formats } => {
            let formats: Vec<Format> = formats.iter().map(|f| f.parse()).collect::<Result<_, _>>()?;
            let manifest = report_run(&run, &formats)?;
            println!("{} files listed in {}", manifest.files.len(), run.join("manifest.json").display());
        }
        Command::InitTiny { corpus, out, layers, dim, heads, seed } => {
            let model = demo_tiny(&read_corpus(&corpus)?, layers, dim, heads, seed)?;
            model.save(&out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::InitMock { corpus, out, k, seed } => {
            write_json(&out, &demo_mock(&read_corpus(&corpus)?, k, seed)?)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Serve { model, model_path } => {
            let spec: ModelSpec = model.parse()?;
            if matches!(spec, ModelSpec::Bridge(_)) {
                return Err(HarnessError::Config("serve needs an in-process model".to_owned()));
            }
            let lm = open_model(&spec, Some(&model_path))?;
            serve_lm(lm.as_ref(), BufReader::new(io::stdin().lock()), io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
