//! One evaluation of the compression-aware objective on a pretrained model:
//! per-term values and the gradient norm with respect to the soft mask.
//!
//! `cargo run --release --example composite_loss`

use csam::config::ExperimentConfig;
use csam::mask::init_percentile_scaled;
use csam::objectives::mask_gradient;
use csam::pipeline::{init_model, prepare, stage1_pretrain};

fn main() -> csam::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.pretrain_epochs = 10;
    let data = prepare(&cfg)?;
    let mut model = init_model(&cfg, data.train.dim())?;
    stage1_pretrain(&mut model, &data.augmented, &cfg.train, cfg.seed)?;

    let soft = init_percentile_scaled(&model.unit_magnitudes(), cfg.train.tau)?;
    let idx: Vec<usize> = (0..64).collect();
    let (x, _) = data.pairs.clean.batch(&idx);
    let (xt, _) = data.pairs.transformed.batch(&idx);
    let w = cfg.loss_weights();
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>11} {:>10}", "seed", "stab", "ratio", "consis", "l1", "composite", "|grad|");
    for draw_seed in 0..5 {
        let (r, _) = mask_gradient(&model, &soft, &x, &xt, &w, cfg.train.pruning_ratio, cfg.train.mu, draw_seed)?;
        println!(
            "{draw_seed:>6} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>11.5} {:>10.5}",
            r.stab, r.ratio, r.consis, r.l1, r.composite, r.grad_norm
        );
    }
    Ok(())
}
