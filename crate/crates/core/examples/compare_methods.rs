//! Runs vanilla, least-magnitude pruning and the robust mask search on the
//! default synthetic task and prints the comparison table.
//!
//! `cargo run --release --example compare_methods [config]`

use std::path::Path;

use csam::config::ExperimentConfig;
use csam::pipeline::run_experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::parse_file(Path::new(&p))?,
        None => ExperimentConfig::default(),
    };
    let exp = run_experiment(&cfg)?;
    println!("{:<8} {:<13} {:>7} {:>7} {:>7} {:>8}", "method", "mode", "acc", "pca", "ratio", "seconds");
    for o in &exp.outcomes {
        println!(
            "{:<8} {:<13} {:>7.4} {:>7.4} {:>7.4} {:>8.1}",
            o.method,
            o.mode.as_str(),
            o.accuracy,
            o.cert.pca,
            o.ratio,
            o.wall_seconds
        );
    }
    Ok(())
}
