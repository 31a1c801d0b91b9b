use std::fmt::Write as _;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::Value;

use ask_core::corpus::{parse_records, CurationPolicy};
use ask_core::pipeline::{
    Cell, ExtractionColumn, ReplayEntry, ReplayReport, ReproducibilityRecord, SearchRequest, SearchResponse,
    DEFAULT_SYNTHESIS_N,
};
use ask_core::ragchain::{self, GenerationRecord, ReplayStatus};
use ask_core::vectorstore::{parse_filter, Page};

use crate::config::{Config, ConfigArgs};
use crate::state::AppState;

#[derive(Debug, Parser)]
#[command(name = "ask", version, about = "Scholarly literature search with cited answers")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Curate, store and index a JSONL file of records (`-` reads stdin).
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        min_title: Option<usize>,
        #[arg(long)]
        min_abstract: Option<usize>,
        /// Also write the ingest report as JSON to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve,
    /// One-shot query printed as a table.
    Ask {
        question: String,
        /// Encoded filter expression.
        #[arg(long)]
        filter: Option<String>,
        /// Extra column as `id=instruction`; repeatable.
        #[arg(long = "column", value_parser = parse_column)]
        columns: Vec<ExtractionColumn>,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        #[arg(long, default_value_t = DEFAULT_SYNTHESIS_N)]
        synthesis_n: usize,
        /// Print the full response as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Write the full response (with its reproducibility record) here.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Write a collection in citation-json or bibtex.
    ExportCollection {
        id: String,
        #[arg(long, default_value = "citation-json")]
        format: String,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-run every generation in a saved response or record; exits 1 unless
    /// all reproduce.
    Replay {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn parse_column(s: &str) -> Result<ExtractionColumn, String> {
    let (id, instruction) = s
        .split_once('=')
        .ok_or_else(|| format!("expected id=instruction, got {s:?}"))?;
    let id = id.trim();
    if id.is_empty() || instruction.trim().is_empty() {
        return Err(format!("expected id=instruction, got {s:?}"));
    }
    Ok(ExtractionColumn::new(id, id, instruction.trim()))
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = Config::resolve(&cli.config)?;
    match cli.command {
        Command::Ingest {
            input,
            min_title,
            min_abstract,
            report,
        } => {
            let defaults = CurationPolicy::default();
            let policy = CurationPolicy::new(
                min_title.unwrap_or(defaults.min_title_chars),
                min_abstract.unwrap_or(defaults.min_abstract_chars),
            )?;
            let records = if input.as_os_str() == "-" {
                let mut text = Vec::new();
                std::io::stdin().read_to_end(&mut text)?;
                parse_records(text.as_slice())?
            } else {
                let file = std::fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
                parse_records(std::io::BufReader::new(file))?
            };
            let state = AppState::open(config)?;
            let outcome = state.engine.ingest(records, &policy)?;
            state.save_index()?;
            let json = serde_json::to_string_pretty(&outcome)?;
            if let Some(path) = report {
                std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve => {
            let addr = config.bind_addr;
            let state = Arc::new(AppState::open(config)?);
            // The last reference is dropped here, off the runtime, because
            // remote providers hold blocking HTTP clients.
            tokio::runtime::Runtime::new()?.block_on(crate::api::serve(state.clone(), addr))?;
            drop(state);
            Ok(ExitCode::SUCCESS)
        }
        Command::Ask {
            question,
            filter,
            columns,
            offset,
            limit,
            synthesis_n,
            json,
            record,
        } => {
            let mut request = SearchRequest::new(&question)
                .with_page(Page::new(offset, limit).map_err(anyhow::Error::msg)?)
                .with_columns(columns);
            request.synthesis_n = synthesis_n;
            if let Some(f) = filter {
                request = request.with_filter(parse_filter(&f)?);
            }
            let state = AppState::open(config)?;
            let response = state.engine.ask(request).map_err(|e| anyhow::anyhow!("{} stage: {}", e.stage, e.message))?;
            let full = serde_json::to_string_pretty(&response)?;
            if let Some(path) = record {
                std::fs::write(&path, &full).with_context(|| format!("writing {}", path.display()))?;
            }
            if json {
                println!("{full}");
            } else {
                print!("{}", render_table(&response));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportCollection { id, format, output } => {
            let state = AppState::open(config)?;
            let bytes = state.bibliography.export(&id, format.parse()?)?;
            match output {
                Some(path) => std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?,
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&bytes)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { file, json } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let state = AppState::open(config)?;
            let report = replay_file(&state, &text)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render_replay(&report));
            }
            Ok(if report.all_reproduced {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

/// Accepts a search response, a search fragment, a bare reproducibility
/// record, or a single generation record.
pub fn replay_file(state: &AppState, text: &str) -> anyhow::Result<ReplayReport> {
    let value: Value = serde_json::from_str(text).context("replay file is not JSON")?;
    if let Some(repro) = value.get("repro") {
        let record: ReproducibilityRecord = serde_json::from_value(repro.clone())?;
        return Ok(state.engine.replay(&record));
    }
    if value.get("cells").is_some() {
        let record: ReproducibilityRecord = serde_json::from_value(value)?;
        return Ok(state.engine.replay(&record));
    }
    if value.get("template_id").is_some() {
        let record: GenerationRecord = serde_json::from_value(value)?;
        let outcome = ragchain::replay(&record, state.engine.templates(), state.engine.model());
        let all_reproduced = outcome.status == ReplayStatus::Reproduced;
        return Ok(ReplayReport {
            entries: vec![ReplayEntry {
                doc_id: None,
                column_id: record.template_id.clone(),
                outcome,
            }],
            all_reproduced,
        });
    }
    bail!("replay file holds no reproducibility record")
}

fn render_replay(report: &ReplayReport) -> String {
    let mut out = String::new();
    for e in &report.entries {
        let status = serde_json::to_value(&e.outcome.status).unwrap_or_default();
        let _ = write!(
            out,
            "{:<16} {}/{}",
            status.as_str().unwrap_or("?"),
            e.doc_id.as_deref().unwrap_or("-"),
            e.column_id
        );
        if let Some(err) = &e.outcome.error {
            let _ = write!(out, "  {err}");
        }
        out.push('\n');
    }
    let ok = report
        .entries
        .iter()
        .filter(|e| e.outcome.status == ReplayStatus::Reproduced)
        .count();
    let _ = writeln!(out, "{ok}/{} reproduced", report.entries.len());
    out
}

fn clip(text: &str, width: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= width {
        flat
    } else {
        let mut s: String = flat.chars().take(width.saturating_sub(1)).collect();
        s.push('…');
        s
    }
}

fn cell_text(cell: &Cell) -> String {
    match (&cell.output, &cell.error) {
        (Some(o), _) => o.parsed_text.clone(),
        (None, Some(e)) => format!("<{}: {}>", e.code, e.message),
        (None, None) => String::new(),
    }
}

pub fn render_table(response: &SearchResponse) -> String {
    let mut out = String::new();
    let column_ids: Vec<&str> = {
        let mut ids = Vec::new();
        for c in &response.cells {
            if !ids.contains(&c.column_id.as_str()) {
                ids.push(c.column_id.as_str());
            }
        }
        ids
    };
    for hit in &response.hits {
        let _ = writeln!(out, "{:>3}. [{:.4}] {}  ({})", hit.rank, hit.score, clip(&hit.title, 80), hit.doc_id);
        for id in &column_ids {
            if let Some(cell) = response.cells.iter().find(|c| c.doc_id == hit.doc_id && c.column_id == *id) {
                let _ = writeln!(out, "       {id}: {}", clip(&cell_text(cell), 100));
            }
        }
    }
    if response.hits.is_empty() {
        out.push_str("no results\n");
    }
    out.push('\n');
    match (&response.synthesis, &response.synthesis_error) {
        (Some(s), _) => {
            let _ = writeln!(out, "Answer: {}", s.text);
        }
        (None, Some(e)) => {
            let _ = writeln!(out, "Answer unavailable ({}): {}", e.code, e.message);
        }
        (None, None) => {}
    }
    let _ = writeln!(out, "{}", response.warning);
    let _ = writeln!(out, "question_id: {}", response.question_id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn column_flag_parses() {
        let c = parse_column("methods=List the methods = briefly").unwrap();
        assert_eq!(c.column_id, "methods");
        assert_eq!(c.instruction, "List the methods = briefly");
        assert!(parse_column("nothing").is_err());
        assert!(parse_column("=x").is_err());
    }

    #[test]
    fn clip_shortens_on_characters() {
        assert_eq!(clip("ä ö\nü", 10), "ä ö ü");
        assert_eq!(clip("abcdef", 4), "abc…");
    }
}
