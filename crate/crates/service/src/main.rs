use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pilesort_core::features::{load_precomputed_features, ExtractorSpec};
use pilesort_core::fewshot::{write_model_file, TrainConfig, DEFAULT_HIDDEN};
use pilesort_core::session::{create_session, create_session_from_features, SessionConfig};
use pilesort_core::{Control, Exec};
use pilesort_service::config::PartialConfig;
use pilesort_service::ingest::load_image_tree;
use pilesort_service::wire::SCHEMA_VERSION;
use pilesort_service::{api, app, AppState, ServiceError};
use serde_json::json;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "pilesort", version, about = "Interactive image triage service")]
struct Cli {
    /// Optional TOML config file (host, port, data_dir, model, threshold, seed, extractor).
    #[arg(long, global = true, env = "PILESORT_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Pretrain a relation model on a folder-per-class dataset.
    Train(TrainArgs),
    /// Pre-cluster a collection headlessly and write canvas positions as JSON.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "PILESORT_HOST")]
    host: Option<String>,
    #[arg(long, env = "PILESORT_PORT")]
    port: Option<u16>,
    #[arg(long, env = "PILESORT_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Default relation model snapshot.
    #[arg(long, env = "PILESORT_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "PILESORT_THRESHOLD")]
    threshold: Option<f64>,
    #[arg(long, env = "PILESORT_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "PILESORT_EXTRACTOR")]
    extractor: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "PILESORT_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "PILESORT_OUT")]
    out: PathBuf,
    #[arg(long, env = "PILESORT_STEPS", default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, env = "PILESORT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "PILESORT_EXTRACTOR", default_value = "gray16")]
    extractor: ExtractorSpec,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
}

#[derive(Args)]
struct EmbedArgs {
    /// Precomputed feature file.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    features: Option<PathBuf>,
    /// Image directory (searched recursively).
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "PILESORT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "PILESORT_EXTRACTOR", default_value = "gray16")]
    extractor: ExtractorSpec,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Serve(args) => serve(cli.config, args),
        Cmd::Train(args) => train(args),
        Cmd::Embed(args) => embed(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn serve(config_file: Option<PathBuf>, a: ServeArgs) -> Result<(), ServiceError> {
    let file = match config_file {
        Some(p) => PartialConfig::load(&p)?,
        None => PartialConfig::default(),
    };
    let flags = PartialConfig {
        host: a.host,
        port: a.port,
        data_dir: a.data_dir,
        model: a.model,
        threshold: a.threshold,
        seed: a.seed,
        extractor: a.extractor,
    };
    let config = file.overlay(flags).resolve()?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Config(e.to_string()))?;
    rt.block_on(async move {
        let addr: SocketAddr = format!("{}:{}", config.host, config.port)
            .parse()
            .map_err(|e| ServiceError::Config(format!("bad listen address: {e}")))?;
        let state = AppState::open(config)?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ServiceError::Config(format!("cannot bind {addr}: {e}")))?;
        tracing::info!("listening on http://{addr}");
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ServiceError::Config(e.to_string()))
    })
}

fn train(a: TrainArgs) -> Result<(), ServiceError> {
    let cfg = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let ctl = Control::new(Exec::default());
    let (model, (classes, skipped)) = app::pretrain(&a.dataset, a.extractor, a.hidden, &cfg, &ctl)?;
    write_model_file(&model, &a.out)?;
    tracing::info!("wrote {} ({classes} classes, {skipped} unreadable files skipped)", a.out.display());
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<(), ServiceError> {
    let config = SessionConfig {
        seed: a.seed,
        extractor: a.extractor,
        ..SessionConfig::default()
    };
    let ctl = Control::new(Exec::default());
    let session = match (a.features, a.images) {
        (Some(f), _) => {
            let rows = load_precomputed_features(&f)?.into_iter().collect();
            create_session_from_features("embed", rows, config, &ctl)?
        }
        (None, Some(dir)) => {
            let (images, _) = load_image_tree(&dir, ctl.exec)?;
            create_session("embed", &images, config, &ctl)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let positions: Vec<_> = session
        .state()
        .items
        .iter()
        .map(|i| json!({ "image_id": i.image_id, "x": i.position.x, "y": i.position.y }))
        .collect();
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "canvas": session.canvas(),
        "positions": positions,
        "kl_trace": session.initial().kl_trace,
    });
    let text = serde_json::to_string_pretty(&body).map_err(pilesort_core::Error::from)?;
    std::fs::write(&a.out, text).map_err(|e| pilesort_core::Error::Io { path: a.out.clone(), source: e })?;
    Ok(())
}
