//! The three semantic transformation families applied to one input at a
//! few magnitudes, plus training-set augmentation.
//!
//! `cargo run --example transforms`

use csam::data::{gen_synthetic, SyntheticSpec};
use csam::transforms::{augment_dataset, Corruption, TransformSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(name: &str, spec: &TransformSpec, x: &[f64]) -> csam::Result<()> {
    println!("{name}");
    for delta in [0.0, 0.25, 0.5, 1.0] {
        let y = spec.apply(x, delta)?;
        let fmt: Vec<String> = y.iter().map(|v| format!("{v:.3}")).collect();
        println!("  delta {delta:.2}: [{}]", fmt.join(", "));
    }
    Ok(())
}

fn main() -> csam::Result<()> {
    let x = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 0.5, 0.1, 0.9];
    show("direction shift along the last axis", &TransformSpec::direction_shift(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])?, &x)?;
    show("haze, a = 0.6", &TransformSpec::interp_corrupt(Corruption::Haze { a: 0.6 })?, &x)?;
    show(
        "3x3 gaussian blur",
        &TransformSpec::interp_corrupt(Corruption::GaussianBlur3 { severity: 1.0, width: 3 })?,
        &x,
    )?;

    let spec = SyntheticSpec::standard(4, 2, 1.5, 1.0, 50, 10, 0)?;
    let (train, _) = gen_synthetic(&spec)?;
    let shift = TransformSpec::direction_shift(vec![0.0, 0.0, 0.0, 1.0])?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (augmented, pairs) = augment_dataset(&train, &shift, train.len(), 1.0, &mut rng)?;
    println!("augmented {} -> {} samples, {} clean/transformed pairs", train.len(), augmented.len(), pairs.len());
    Ok(())
}
