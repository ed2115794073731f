//! Drives the command-line entry point stage by stage into a temp dir and
//! lists the artifacts each stage leaves behind. Equivalent shell session:
//!
//! ```text
//! csam gen-data --config small.conf --out run
//! csam pretrain --config small.conf --out run
//! csam search   --config small.conf --out run
//! csam finetune --config small.conf --out run
//! csam certify  --config small.conf --out run
//! ```
//!
//! `cargo run --release --example cli_walkthrough`

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

fn files(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string());
            }
        }
    }
    out
}

fn main() -> std::io::Result<()> {
    let root = std::env::temp_dir().join("csam-cli-walkthrough");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root)?;
    let conf = root.join("small.conf");
    fs::write(
        &conf,
        "dim = 8\nhidden = 16,16\ntrain_per_class = 100\ntest_per_class = 50\n\
         pretrain_epochs = 10\nsearch_epochs = 5\nfinetune_epochs = 5\ncert_n = 30\ncert_l = 3\ncert_m = 20\n",
    )?;
    let out = root.join("run");
    let mut seen = BTreeSet::new();
    for cmd in ["gen-data", "pretrain", "search", "finetune", "certify"] {
        let code = csam::cli::run_from_args(["csam", cmd, "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let now = files(&out);
        let new: Vec<&String> = now.difference(&seen).collect();
        println!("csam {cmd:<9} exit {code}  new: {new:?}");
        seen = now;
    }
    println!("\n{}", fs::read_to_string(out.join("cert/finetune_unstructured.txt"))?.lines().take(6).collect::<Vec<_>>().join("\n"));
    Ok(())
}
