use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use pointsup::dataset::Dataset;
use pointsup_service::{data_dir_from_env, serve, AppState};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset file; repeat to serve several.
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    /// Directory holding the image files.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Session log directory; overrides POINTSUP_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    let datasets = a
        .dataset
        .iter()
        .map(|p| Dataset::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let data_dir = a.data_dir.clone().unwrap_or_else(data_dir_from_env);
    let ids: Vec<String> = datasets.iter().map(|d| d.id.clone()).collect();
    let state = Arc::new(AppState::open(datasets, &a.root, &data_dir)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        let addr = listener.local_addr()?;
        println!(
            "listening on http://{addr} (datasets: {}, {} sessions restored, logs in {})",
            ids.join(", "),
            state.session_count().await,
            data_dir.display()
        );
        std::io::stdout().flush()?;
        serve(listener, state).await?;
        Ok(())
    })
}
