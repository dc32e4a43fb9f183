use std::io::Write;
use std::path::Path;

use phenoaudit::{Error, Result};
use phenoaudit_review::{Server, ServiceConfig};

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
    tracing::info!("shutting down");
}

fn with_port(bind: &str, port: u16) -> String {
    match bind.rsplit_once(':') {
        Some((host, _)) => format!("{host}:{port}"),
        None => format!("{bind}:{port}"),
    }
}

/// Serve until interrupted. The bound address is printed on stdout as
/// `listening on http://HOST:PORT` once the socket is open.
pub fn serve(config_path: &Path, port: Option<u16>) -> Result<()> {
    let mut config = ServiceConfig::load(config_path)?;
    if let Some(p) = port {
        config.bind = with_port(&config.bind, p);
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    runtime.block_on(async {
        let server = Server::bind(&config).await?;
        println!("listening on http://{}", server.local_addr());
        let _ = std::io::stdout().flush();
        server
            .run(shutdown_signal())
            .await
            .map_err(|e| Error::io(format!("serve {}", config.bind), e))
    })
}
