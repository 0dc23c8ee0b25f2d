use std::sync::Arc;

use haze_service::{bind, serve, AppState, ServiceConfig};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let config = ServiceConfig::from_env()?;
    let port = config.port;
    let state = Arc::new(AppState::new(config)?);
    let listener = bind(port).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    serve(listener, state).await?;
    Ok(())
}
