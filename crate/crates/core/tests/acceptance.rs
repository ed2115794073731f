//! Acceptance criteria 1 to 10, one PASS/FAIL line each. Runs without the
//! libtest harness so the lines always reach stdout.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use csam::certify::{log_y, paley_confidence, pca, CertConfig, FnClassifier};
use csam::config::ExperimentConfig;
use csam::data::{gen_synthetic, SyntheticSpec};
use csam::mask::{binarize, ceil_snapped, effective_ratio, init_percentile_scaled, noisy_instance};
use csam::model::{argmax, mlp_specs, MaskMode, MaskableModel};
use csam::objectives::{margin_value, mask_gradient, triangle_bound_check, LossWeights};
use csam::pipeline::run_experiment;
use csam::report::write_summary;
use csam::tensor::Tensor;
use csam::transforms::TransformSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `summary.csv` of the shipped default config, recorded at the first green run.
const DEFAULT_SUMMARY: &str = "\
method,mode,acc,pca,ratio,seed
vanilla,unstructured,0.92,0.95,0,0
lmp,unstructured,0.914,0.94,0.5,0
csam,unstructured,0.914,0.94,0.5,0
";

type Outcome = Result<String, String>;
/// Number, time limit in seconds, check.
type Criterion = (u32, f64, fn() -> Outcome);

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: Outcome) -> Outcome {
    let secs = elapsed.as_secs_f64();
    match detail {
        Ok(m) if secs < limit_s => Ok(format!("{m}; {secs:.2}s < {limit_s}s")),
        Ok(m) => Err(format!("{m}; took {secs:.2}s, limit {limit_s}s")),
        Err(m) => Err(format!("{m}; {secs:.2}s")),
    }
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for case in primitive_cases() {
        for k in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + k);
            let inputs = (case.inputs)(&mut rng);
            let err = fd_check(&*case.build, &inputs, k);
            if err > FD_TOL {
                return Err(format!("{} instance {k}: rel err {err:e}", case.name));
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    for mode in [MaskMode::Unstructured, MaskMode::Structured] {
        for seed in 0..20u64 {
            let model = small_model(seed, mode);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
            let c0 = interior_mask(&model.unit_counts(), &mut rng);
            let x = random_batch(&mut rng, 4, 3);
            let xt = random_batch(&mut rng, 4, 3);
            let w = LossWeights { l1: 0.1, ..LossWeights::default() };
            let draw: u64 = rng.random();
            let (_, analytic) = mask_gradient(&model, &c0, &x, &xt, &w, 0.5, 0.3, draw).map_err(|e| e.to_string())?;
            let numeric = composite_fd(&model, &c0, &x, &xt, &w, 0.5, 0.3, draw);
            let err = analytic.iter().flatten().zip(numeric.iter().flatten()).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max);
            if err > FD_TOL {
                return Err(format!("composite {} seed {seed}: rel err {err:e}", mode.as_str()));
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(format!("{checked} instances, worst rel err {worst:.2e} <= 1e-4"))
}

fn variance_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let model = MaskableModel::init(&mlp_specs(4, &[8], 3), MaskMode::Unstructured, &mut rng).map_err(|e| e.to_string())?;
    let c = interior_mask(&model.unit_counts(), &mut rng);
    let x = Tensor::matrix(1, 4, vec![0.8, -1.1, 0.4, 1.3]);
    let pairs = 10_000;
    let mut all = Vec::with_capacity(2 * pairs);
    let mut lhs = 0.0;
    for _ in 0..pairs {
        let pm = model.forward_masked(&x, &noisy_instance(&c, 0.5, &mut rng)).map_err(|e| e.to_string())?;
        let pn = model.forward_masked(&x, &noisy_instance(&c, 0.5, &mut rng)).map_err(|e| e.to_string())?;
        lhs += pm.data().iter().zip(pn.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        all.push(pm.into_data());
        all.push(pn.into_data());
    }
    lhs /= pairs as f64;
    let k = all[0].len();
    let bar: Vec<f64> = (0..k).map(|j| all.iter().map(|p| p[j]).sum::<f64>() / all.len() as f64).collect();
    let var = all.iter().map(|p| p.iter().zip(&bar).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>()
        / all.len() as f64;
    let rhs = 2.0 * var;
    let rel = (lhs - rhs).abs() / rhs;
    ensure(rel <= 0.02, format!("E|pm-pn|^2 = {lhs:.6e}, 2 Var = {rhs:.6e}, rel diff {rel:.4} <= 0.02"))
}

fn triangle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let archs: [(usize, &[usize], usize); 3] = [(3, &[6], 3), (5, &[8, 4], 2), (4, &[10], 4)];
    let mut slack = f64::INFINITY;
    for i in 0..1000 {
        let (input, hidden, classes) = archs[i % 3];
        let model = MaskableModel::init(&mlp_specs(input, hidden, classes), MaskMode::Unstructured, &mut rng)
            .map_err(|e| e.to_string())?;
        let c = interior_mask(&model.unit_counts(), &mut rng);
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xt: Vec<f64> = x.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let mu = rng.random_range(0.01..1.0);
        let tb = triangle_bound_check(&model, &c, &x, &xt, mu, 16, &mut rng).map_err(|e| format!("tuple {i}: {e}"))?;
        slack = slack.min(tb.bound() + 1e-9 - tb.z_c);
        let tb0 = triangle_bound_check(&model, &c, &x, &xt, 0.0, 4, &mut rng).map_err(|e| e.to_string())?;
        if (tb0.bound() - tb0.z_c).abs() > 1e-12 {
            return Err(format!("tuple {i}: mu = 0 gives Z = {} but bound {}", tb0.z_c, tb0.bound()));
        }
    }
    Ok(format!("1000 tuples hold with min slack {slack:.3e}; equality at mu = 0"))
}

fn label_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut preserved = 0usize;
    let total = 100_000;
    let mut built = 0usize;
    while built < total {
        let k = rng.random_range(2..10);
        let simplex = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..k).map(|_| -rng.random_range(f64::EPSILON..1.0).ln()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let p = simplex(&mut rng);
        let q = simplex(&mut rng);
        let d = margin_value(&p).map_err(|e| e.to_string())?;
        let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if d == 0.0 || gap == 0.0 {
            continue;
        }
        let lambda = (rng.random_range(0.0..1.0) * d / gap).min(1.0);
        let pt: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
        let z = p.iter().zip(&pt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if z >= d {
            continue;
        }
        built += 1;
        preserved += usize::from(argmax(&p) == argmax(&pt));
    }
    ensure(preserved == total, format!("argmax preserved in {preserved}/{total} pairs"))
}

fn chernoff() -> Outcome {
    let grid = CertConfig::default().t_grid();
    // Equal-weight supports: the empirical Y is the exact Y.
    let discrete: [(&str, Vec<f64>, f64); 4] = [
        ("point mass 0.3", vec![0.3], 0.5),
        ("bernoulli 0.2", vec![1.0, 0.0, 0.0, 0.0, 0.0], 0.4),
        ("uniform on 11 points", (0..=10).map(|i| i as f64 / 10.0).collect(), 0.55),
        ("two-point 0.2/0.9", vec![0.2, 0.2, 0.2, 0.9], 0.5),
    ];
    let direct = |z: &[f64], d: f64, t: f64| (z.iter().map(|zi| (t * zi).exp()).sum::<f64>() / z.len() as f64 * (-d * t).exp()).ln();
    let mut worst_gap: f64 = 0.0;
    let mut check_log = |name: &str, z: &[f64], d: f64| -> Result<(), String> {
        for &t in grid.iter().filter(|&&t| t <= 10.0) {
            let (a, b) = (log_y(z, d, t), direct(z, d, t));
            let gap = (a - b).abs() / b.abs().max(1.0);
            worst_gap = worst_gap.max(gap);
            if gap > 1e-12 {
                return Err(format!("{name}: log Y {a} vs direct {b} at t = {t}"));
            }
        }
        let big = log_y(z, d, 1e4);
        if !big.is_finite() {
            return Err(format!("{name}: log Y not finite at t = 1e4"));
        }
        if z.iter().any(|&zi| zi > 0.0) && direct(z, d, 1e4).is_finite() {
            return Err(format!("{name}: direct evaluation unexpectedly finite at 1e4"));
        }
        Ok(())
    };
    for (name, z, d) in &discrete {
        let p = z.iter().filter(|&&v| v >= *d).count() as f64 / z.len() as f64;
        for &t in &grid {
            if log_y(z, *d, t).exp() < p {
                return Err(format!("{name}: Y({t}) below P(Z >= d) = {p}"));
            }
        }
        check_log(name, z, *d)?;
    }
    // Z ~ U[0, 1]: E e^{tZ} = (e^t − 1)/t, P(Z ≥ d) = 1 − d.
    let d = 0.7;
    let exact_log_y = |t: f64| t + (-(-t).exp_m1()).ln() - t.ln() - d * t;
    for &t in &grid {
        if exact_log_y(t).exp() < 1.0 - d {
            return Err(format!("uniform: Y({t}) below {}", 1.0 - d));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let sample: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
    check_log("uniform[0,1]", &sample, d)?;
    Ok(format!("5 distributions, Y >= P on all 500 t, log/direct gap {worst_gap:.1e}, finite at 1e4"))
}

fn paley() -> Outcome {
    let cfg = CertConfig { n: 100, alpha: 0.9, l: 10, c_v: 1.0, ..CertConfig::default() };
    let v = paley_confidence(&cfg);
    let want = 2f64.powi(-10);
    let rel = (v - want).abs() / want;
    ensure(rel <= 1e-15, format!("value {v:e}, 2^-10 = {want:e}, rel err {rel:e}"))
}

fn mask_machinery() -> Outcome {
    let archs: [(usize, &[usize], usize); 3] = [(16, &[64, 64], 2), (8, &[32], 4), (20, &[16, 16, 16], 3)];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for (input, hidden, classes) in archs {
        for mode in [MaskMode::Unstructured, MaskMode::Structured] {
            let model = MaskableModel::init(&mlp_specs(input, hidden, classes), mode, &mut rng).map_err(|e| e.to_string())?;
            let mags = model.unit_magnitudes();
            let per_unit: Vec<usize> = model.layers().iter().map(|l| mode.unit_weight_count(l.spec.in_dim)).collect();
            let masked_weights: usize = mags.iter().zip(&per_unit).map(|(m, w)| m.len() * w).sum();
            let exempt = model.weight_count() - masked_weights;
            for pr in [0.0, 0.3, 0.5, 0.7, 0.9] {
                let hard = binarize(&mags, pr).map_err(|e| e.to_string())?;
                for (layer, kept) in mags.iter().zip(hard.kept_per_layer()) {
                    let want = ceil_snapped((1.0 - pr) * layer.len() as f64);
                    if kept != want {
                        return Err(format!("{hidden:?} pr {pr}: kept {kept}, want {want}"));
                    }
                }
                let ratio = effective_ratio(&hard, &model).map_err(|e| e.to_string())?;
                let total = model.weight_count() as f64;
                let lost = (pr * masked_weights as f64 - ratio * total).max(0.0);
                let slack: f64 = per_unit.iter().take(mags.len()).map(|&w| w as f64).sum::<f64>();
                let target = pr * masked_weights as f64 / total;
                if ratio > target + 1e-12 || lost > slack + 1e-9 {
                    return Err(format!(
                        "{hidden:?} {} pr {pr}: ratio {ratio}, target {target}, exempt {exempt}",
                        mode.as_str()
                    ));
                }
                cases += 1;
            }
            for tau in [10.0, 20.0, 30.0, 40.0] {
                let c = init_percentile_scaled(&mags, tau).map_err(|e| e.to_string())?;
                for (layer, m) in c.layers().iter().zip(&mags) {
                    let ones = layer.iter().filter(|v| **v == 1.0).count();
                    let want = ceil_snapped(tau / 100.0 * m.len() as f64);
                    if ones != want {
                        return Err(format!("{hidden:?} tau {tau}: {ones} ones, want {want}"));
                    }
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (architecture, mode, pr or tau) cases exact"))
}

fn end_to_end() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.conf");
    let cfg = ExperimentConfig::parse_file(&path).map_err(|e| e.to_string())?;
    let exp = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let rows = exp.rows(cfg.seed);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = dir.path().join("summary.csv");
    write_summary(&summary, &rows).map_err(|e| e.to_string())?;
    let body = std::fs::read_to_string(&summary).map_err(|e| e.to_string())?;
    let find = |m: &str| rows.iter().find(|r| r.method.as_str() == m).ok_or(format!("no {m} row"));
    let (vanilla, lmp, csam) = (find("vanilla")?, find("lmp")?, find("csam")?);
    let mut problems = Vec::new();
    if csam.pca < lmp.pca {
        problems.push(format!("PCA csam {} < lmp {}", csam.pca, lmp.pca));
    }
    if (csam.acc - vanilla.acc).abs() > 0.05 {
        problems.push(format!("acc csam {} vs vanilla {}", csam.acc, vanilla.acc));
    }
    if body != DEFAULT_SUMMARY {
        problems.push(format!("summary differs from fixture:\n{body}"));
    }
    let msg = format!(
        "PCA csam {} >= lmp {}; acc csam {} vs vanilla {}; fixture {}",
        csam.pca,
        lmp.pca,
        csam.acc,
        vanilla.acc,
        if body == DEFAULT_SUMMARY { "bit-exact" } else { "MISMATCH" }
    );
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", problems.join("; ")))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_tiny_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = out.to_str().unwrap();
            let codes: Vec<i32> = ["gen-data", "pretrain", "search", "finetune", "certify"]
                .iter()
                .map(|cmd| csam_cli(&[cmd, "--config", c, "--out", o]))
                .chain(std::iter::once(csam_cli(&["compare", "--config", c, "--out", &format!("{o}/cmp")])))
                .chain(std::iter::once(csam_cli(&["run-all", "--config", c, "--out", &format!("{o}/all")])))
                .collect();
            (codes, csv_bodies(&out))
        })
        .collect();
    if runs.iter().any(|(codes, _)| codes.iter().any(|&c| c != 0)) {
        return Err(format!("non-zero exit codes {:?} / {:?}", runs[0].0, runs[1].0));
    }
    let (a, b) = (&runs[0].1, &runs[1].1);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    ensure(
        a.len() == b.len() && differing.is_empty(),
        format!("{} CSV files across 7 commands, {} differ", a.len(), differing.len()),
    )
}

fn sanity_anchors() -> Outcome {
    let spec = SyntheticSpec::standard(4, 2, 1.5, 1.0, 10, 60, 1).map_err(|e| e.to_string())?;
    let (_, test) = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let transform = TransformSpec::direction_shift(vec![0.0, 0.0, 0.0, 1.0])
        .and_then(|t| t.with_delta_range(0.1, 1.0))
        .map_err(|e| e.to_string())?;
    let cfg = CertConfig { seed: 17, ..CertConfig::default() };

    let zeros: Vec<usize> = (0..test.len()).filter(|&i| test.y(i) == 0).collect();
    let subset = test.subset(&zeros);
    let constant = FnClassifier(|_: &[f64]| vec![0.9, 0.1]);
    let good = pca(&constant, &subset, &transform, &cfg).map_err(|e| e.to_string())?;

    let clean: Vec<(Vec<u64>, usize)> =
        (0..test.len()).map(|i| (test.x(i).iter().map(|v| v.to_bits()).collect(), test.y(i))).collect();
    let flipping = FnClassifier(|x: &[f64]| {
        let bits: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let class = match clean.iter().find(|(c, _)| *c == bits) {
            Some((_, y)) => *y,
            None => 1 - clean.iter().map(|(c, y)| (c.iter().zip(x).map(|(a, b)| (f64::from_bits(*a) - b).powi(2)).sum::<f64>(), *y)).min_by(|a, b| a.0.total_cmp(&b.0)).unwrap().1,
        };
        let mut p = vec![0.0; 2];
        p[class] = 1.0;
        p
    });
    let bad = pca(&flipping, &test, &transform, &cfg).map_err(|e| e.to_string())?;
    ensure(
        good.pca == 1.0 && bad.pca == 0.0 && bad.clean_accuracy == 1.0,
        format!(
            "constant-correct PCA {} on {} samples; always-flipping PCA {} (clean acc {})",
            good.pca,
            subset.len(),
            bad.pca,
            bad.clean_accuracy
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, 30.0, gradients),
        (2, 60.0, variance_identity),
        (3, 60.0, triangle),
        (4, 10.0, label_invariance),
        (5, 10.0, chernoff),
        (6, 1.0, paley),
        (7, 5.0, mask_machinery),
        (8, 600.0, end_to_end),
        (9, f64::INFINITY, determinism),
        (10, 30.0, sanity_anchors),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, limit, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let detail = f();
        let outcome = if limit.is_finite() { within(start.elapsed(), limit, detail) } else { detail };
        match outcome {
            Ok(m) => println!("criterion {n}: PASS {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {n}: FAIL {m}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
