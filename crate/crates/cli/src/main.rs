use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use facetalk_core::expression::load_clip_library;
use facetalk_core::{replay_with_config, AppContext, ReplayScript, ServerConfig};

#[derive(Parser)]
#[command(name = "facetalk", version, about = "Talking-face conversational agent server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the WebSocket server until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a blendshape clip library file.
    ValidateClips { path: PathBuf },
    /// Run a scripted conversation against mock providers and print the result.
    Replay {
        script: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::ValidateClips { path } => return validate_clips(&path),
        Command::Serve { config } => runtime().and_then(|rt| rt.block_on(serve(config))),
        Command::Replay { script, config, seed } => runtime().and_then(|rt| rt.block_on(replay(script, config, seed))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")
}

fn validate_clips(path: &std::path::Path) -> ExitCode {
    match load_clip_library(path) {
        Ok(lib) => {
            println!("OK, {} emotions, {} clips", lib.emotion_count(), lib.clip_count());
            ExitCode::SUCCESS
        }
        Err(e) => {
            for issue in &e.issues {
                println!("error: {}: {issue}", issue.kind());
            }
            ExitCode::FAILURE
        }
    }
}

async fn serve(config: PathBuf) -> anyhow::Result<()> {
    let cfg = ServerConfig::load(&config)?;
    let ctx = AppContext::from_config(&cfg)?;
    let handle = facetalk_core::serve(ctx, &cfg.bind).await?;
    println!("listening on ws://{}/ws", handle.local_addr());
    shutdown_signal().await;
    eprintln!("shutting down");
    handle.shutdown().await.context("server task")?;
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn replay(script: PathBuf, config: PathBuf, seed: u64) -> anyhow::Result<()> {
    let script = ReplayScript::load(&script)?;
    let cfg = ServerConfig::load(&config)?;
    let out = replay_with_config(&script, &cfg, seed).await?;
    print!("{out}");
    Ok(())
}
