//! Certifies a trained classifier sample by sample and prints the flip
//! probability bound next to the margin.
//!
//! `cargo run --release --example certification`

use csam::certify::pca;
use csam::config::ExperimentConfig;
use csam::pipeline::{accuracy, init_model, prepare, stage1_pretrain};

fn main() -> csam::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.pretrain_epochs = 20;
    cfg.cert.m = 20;
    let data = prepare(&cfg)?;
    let mut model = init_model(&cfg, data.train.dim())?;
    stage1_pretrain(&mut model, &data.augmented, &cfg.train, cfg.seed)?;

    let cert = pca(&model, &data.eval, &data.transform, &cfg.cert_config())?;
    println!("{:>4} {:>5} {:>5} {:>8} {:>11} {:>10} {:>9}", "id", "label", "pred", "margin", "eps_hat", "best_t", "certified");
    for r in &cert.rows {
        println!(
            "{:>4} {:>5} {:>5} {:>8.4} {:>11.3e} {:>10.3} {:>9}",
            r.sample_id, r.label, r.predicted, r.d, r.eps_hat, r.best_t, r.certified
        );
    }
    println!(
        "test accuracy {:.4}, certified accuracy {:.4}, confidence {:.3e}",
        accuracy(&model, &data.test)?,
        cert.pca,
        cert.paley_confidence
    );
    Ok(())
}
