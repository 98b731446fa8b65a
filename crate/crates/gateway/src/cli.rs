//! `fieldcare` command line.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use fieldcare_core::bench::{
    evaluate, load_dataset, render_report, DatasetFormat, DirectRunner, PipelineMode, PipelineRunner, Runner,
};
use fieldcare_core::clock::SystemClock;
use fieldcare_core::config::Settings;
use fieldcare_core::domain::{CaseRecord, LanguageTag, Sex};
use fieldcare_core::pipeline::{Engine, EngineError};

use crate::api::{self, AppState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Agent route used by direct-mode benchmark runs.
pub const BENCH_AGENT: &str = "bench";

#[derive(Debug, Parser)]
#[command(name = "fieldcare", version, about = "Multi-agent triage and advice service for health workers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.port`.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Run one case and print the response.
    Ask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        age: Option<i64>,
        #[arg(long, value_parser = parse_sex)]
        sex: Option<Sex>,
        /// Print the response as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score a benchmark dataset.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: DatasetFormat,
        #[arg(long, value_parser = parse_mode)]
        mode: PipelineMode,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset label used to pick the baseline column; defaults to the format.
        #[arg(long)]
        name: Option<String>,
    },
    /// Load and check a configuration file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_sex(raw: &str) -> Result<Sex, String> {
    serde_json::from_value(serde_json::Value::String(raw.to_ascii_lowercase()))
        .map_err(|_| "expected female, male, other or unknown".to_string())
}

fn parse_format(raw: &str) -> Result<DatasetFormat, String> {
    raw.parse()
}

fn parse_mode(raw: &str) -> Result<PipelineMode, String> {
    raw.parse()
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_RUNTIME;
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {}", err.message());
            err.exit_code()
        }
    }
}

fn load_settings(path: &Path) -> Result<Settings, CliError> {
    Settings::load(path).map_err(|e| CliError::Config(e.to_string()))
}

fn build_engine(settings: Settings) -> Result<Engine, CliError> {
    Engine::from_settings(settings, Arc::new(SystemClock)).map_err(|e| CliError::Config(e.to_string()))
}

async fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Serve { config, port, host } => serve(&config, port, &host).await,
        Command::Ask { config, lang, text, age, sex, json } => ask(&config, &lang, text, age, sex, json).await,
        Command::Bench { config, dataset, format, mode, out, name } => {
            bench(&config, &dataset, format, mode, out.as_deref(), name).await
        }
        Command::ValidateConfig { config } => validate_config(&config),
    }
}

fn api_token(settings: &Settings) -> Result<Option<String>, CliError> {
    let Some(var) = &settings.server.api_token_env else {
        return Ok(None);
    };
    match std::env::var(var) {
        Ok(token) if !token.is_empty() => Ok(Some(token)),
        _ => Err(CliError::Config(format!("server.api_token_env names {var}, which is not set"))),
    }
}

async fn serve(config: &Path, port: Option<u16>, host: &str) -> Result<(), CliError> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let settings = load_settings(config)?;
    let token = api_token(&settings)?;
    let port = port.unwrap_or(settings.server.port);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|_| CliError::Usage(format!("bad listen address {host}:{port}")))?;
    let engine = Arc::new(build_engine(settings)?);
    let app = api::router(AppState { engine, token });
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Runtime(format!("server failed: {e}")))
}

async fn ask(
    config: &Path,
    lang: &str,
    text: String,
    age: Option<i64>,
    sex: Option<Sex>,
    json: bool,
) -> Result<(), CliError> {
    let language = LanguageTag::parse(lang).map_err(|e| CliError::Usage(e.to_string()))?;
    let engine = build_engine(load_settings(config)?)?;
    let mut case = CaseRecord::new(api::new_case_id(), language, text);
    case.patient_age = age;
    case.patient_sex = sex;
    let response = engine.run_case(case).await.map_err(|e| match e {
        EngineError::InvalidCase(report) => CliError::Usage(
            report.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        ),
        other => CliError::Runtime(other.to_string()),
    })?;
    if json {
        let body = serde_json::to_string_pretty(&response).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{body}");
        return Ok(());
    }
    println!("case: {}", response.case_id);
    println!("complexity: {}", response.complexity.as_str());
    if let Some(reason) = &response.referral_reason {
        println!("REFERRAL: {reason}");
    }
    println!();
    println!("{}", response.localized_text);
    Ok(())
}

async fn bench(
    config: &Path,
    dataset: &Path,
    format: DatasetFormat,
    mode: PipelineMode,
    out: Option<&Path>,
    name: Option<String>,
) -> Result<(), CliError> {
    let settings = load_settings(config)?;
    let parallelism = settings.bench_parallelism;
    let data = load_dataset(dataset, format).map_err(|e| CliError::Runtime(e.to_string()))?;
    for bad in &data.malformed {
        eprintln!("skipping line {}: {}", bad.line, bad.reason);
    }
    let engine = Arc::new(build_engine(settings)?);
    let runner: Box<dyn Runner> = match mode {
        PipelineMode::Direct => {
            let backend = engine.settings().routes.backend_for(BENCH_AGENT).to_string();
            Box::new(DirectRunner::new(engine.pool().clone(), backend))
        }
        PipelineMode::Full => Box::new(PipelineRunner::new(engine.clone())),
    };
    let label = name.unwrap_or_else(|| format.as_str().to_string());
    let report = evaluate(&label, &data.items, runner.as_ref(), parallelism)
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{}", render_report(&report));
    if let Some(out) = out {
        let body = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(out, body).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

fn validate_config(config: &Path) -> Result<(), CliError> {
    let settings = load_settings(config)?;
    let pool = settings.build_pool(Arc::new(SystemClock)).map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "config ok: {} backend(s) [{}], team {} x {} rounds, translation {:?}",
        settings.backends.len(),
        pool.names().collect::<Vec<_>>().join(", "),
        settings.council.team_size,
        settings.council.rounds,
        settings.translation_mode,
    );
    Ok(())
}
