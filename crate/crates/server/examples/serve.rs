//! Serves a styles directory over HTTP.
//!
//! cargo run --release -p shapematch-server --example serve -- [styles_dir] [port]
//!
//! curl localhost:8080/api/styles

use std::net::SocketAddr;

#[tokio::main]
async fn main() -> std::io::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .or_else(|| std::env::var(shapematch_server::STYLES_DIR_ENV).ok())
        .unwrap_or_else(|| "styles".into());
    let port: u16 = args.next().and_then(|p| p.parse().ok()).unwrap_or(8080);
    shapematch_server::serve(SocketAddr::from(([127, 0, 0, 1], port)), dir).await
}
