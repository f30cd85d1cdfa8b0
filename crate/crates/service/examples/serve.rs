//! Serves the annotation API on 127.0.0.1:8080.
//!
//! `cargo run --release -p boxseg-service --example serve -- [checkpoint]`
//!
//! Then, for example:
//!
//! ```text
//! curl -s -XPOST localhost:8080/api/sessions -H 'content-type: application/json' \
//!      -d '{"synth":{"depth":20}}'
//! curl -s -XPOST localhost:8080/api/sessions/<id>/segment \
//!      -d '{"slice":10,"box":{"x_min":20,"y_min":20,"x_max":44,"y_max":44}}'
//! ```

use std::path::Path;
use std::sync::Arc;

use boxseg::model::{init_params, ModelConfig};
use boxseg_service::{serve, AppState, DEFAULT_CACHE_CAPACITY, DEFAULT_PORT};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let state = match std::env::args().nth(1) {
        Some(p) => AppState::from_checkpoint(Path::new(&p))?,
        None => {
            let cfg = ModelConfig::default();
            AppState::new(init_params(&cfg)?, cfg, DEFAULT_CACHE_CAPACITY)
        }
    };
    eprintln!("checkpoint {}", state.checkpoint_hash());
    serve(Arc::new(state), ([127, 0, 0, 1], DEFAULT_PORT).into()).await?;
    Ok(())
}
