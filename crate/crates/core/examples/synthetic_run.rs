//! Runs the synthetic end-to-end pipeline for a JSON run config and prints
//! the evaluation summary.
//!
//! ```text
//! cargo run --release --example synthetic_run -- configs/desk.json
//! ```

use std::path::Path;
use std::time::Instant;

use humsearch::pipeline::run_synthetic;
use humsearch::{Execution, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/desk.json".into());
    let cfg = RunConfig::load(Path::new(&path))?;
    let start = Instant::now();
    let run = run_synthetic(&cfg, Execution::default())?;
    println!("hums:  {}", run.hum_report.summary_json());
    println!("songs: {}", run.self_report.summary_json());
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
