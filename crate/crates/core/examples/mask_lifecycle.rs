//! Soft mask from magnitudes, binarization at a pruning ratio, and the
//! effect of deploying the hard mask on a freshly initialised network.
//!
//! `cargo run --example mask_lifecycle`

use csam::mask::{binarize, effective_ratio, init_percentile_scaled};
use csam::model::{mlp_specs, MaskMode, MaskableModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> csam::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [MaskMode::Unstructured, MaskMode::Structured] {
        let model = MaskableModel::init(&mlp_specs(16, &[64, 64], 2), mode, &mut rng)?;
        let soft = init_percentile_scaled(&model.unit_magnitudes(), 30.0)?;
        println!("{} mode: {} mask units, mean C = {:.3}", mode.as_str(), soft.total_units(), soft.mean());
        for pr in [0.3, 0.5, 0.7, 0.9] {
            let hard = binarize(soft.layers(), pr)?;
            let deployed = model.apply_mask(&hard.as_f64())?;
            println!(
                "  pr {pr:.1}: kept per layer {:?}, effective ratio {:.4}, nonzero weights {}/{}",
                hard.kept_per_layer(),
                effective_ratio(&hard, &model)?,
                deployed.nonzero_weights(),
                model.weight_count()
            );
        }
    }
    Ok(())
}
