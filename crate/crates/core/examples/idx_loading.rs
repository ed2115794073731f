//! Writes a tiny IDX image/label pair to a temp dir, loads it back and runs
//! a configured experiment on it. Point the `idx_*` config keys at real
//! files to train on MNIST-style data.
//!
//! `cargo run --release --example idx_loading`

use std::fs;

use csam::config::ExperimentConfig;
use csam::data::load_idx;
use csam::pipeline::run_experiment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 6;

/// Class 0 is a bright left half, class 1 a bright right half, with noise.
fn write_pair(dir: &std::path::Path, name: &str, count: usize, rng: &mut ChaCha8Rng) -> std::io::Result<()> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for v in [0x0803u32, count as u32, SIDE as u32, SIDE as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for v in [0x0801u32, count as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..count {
        let y = (i % 2) as u8;
        labels.push(y);
        for _ in 0..SIDE {
            for c in 0..SIDE {
                let lit = (c < SIDE / 2) == (y == 0);
                let base = if lit { 180.0 } else { 40.0 };
                images.push((base + rng.random_range(-40.0..40.0f64)).clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(dir.join(format!("{name}-images.idx")), images)?;
    fs::write(dir.join(format!("{name}-labels.idx")), labels)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("csam-idx-example");
    fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    write_pair(&dir, "train", 200, &mut rng)?;
    write_pair(&dir, "test", 60, &mut rng)?;

    let ds = load_idx(&dir.join("train-images.idx"), &dir.join("train-labels.idx"), 2)?;
    println!("loaded {} images of {} pixels, class counts {:?}", ds.len(), ds.dim(), ds.class_counts());

    let text = format!(
        "dataset = idx\nidx_train_images = train-images.idx\nidx_train_labels = train-labels.idx\n\
         idx_test_images = test-images.idx\nidx_test_labels = test-labels.idx\n\
         transform = haze\nhidden = 16\npretrain_epochs = 10\nsearch_epochs = 5\nfinetune_epochs = 5\n\
         cert_n = 30\ncert_l = 3\ncert_m = 20\nout_dir = {}\n",
        dir.join("out").display()
    );
    fs::write(dir.join("idx.conf"), text)?;
    let cfg = ExperimentConfig::parse_file(&dir.join("idx.conf"))?;
    let exp = run_experiment(&cfg)?;
    for row in exp.rows(cfg.seed) {
        println!("{:<8} acc {:.3} pca {:.3} ratio {:.3}", row.method, row.acc, row.pca, row.ratio);
    }
    Ok(())
}
