//! Command-line surface. Each stage command reads its prerequisites from
//! the output directory (or `--stage-checkpoint`) and writes its artifacts
//! plus a `status_<command>.txt` file there.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};

use crate::certify::{pca, Classifier};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mask::{binarize, effective_ratio};
use crate::pipeline::{
    accuracy, init_model, prepare, run_experiment, stage1_pretrain, stage2_mask_search, stage3_finetune,
    Experiment, Method, Prepared,
};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "csam", version, about = "Compression-aware mask search with probabilistic certification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct Staged {
    #[command(flatten)]
    pub common: Common,
    /// Input checkpoint instead of the one in the output directory.
    #[arg(long)]
    pub stage_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the train, test and evaluation sets as CSV.
    GenData(Common),
    /// Stage 1: dense pre-training.
    Pretrain(Common),
    /// Stage 2: robust mask search from the pre-trained checkpoint.
    Search(Staged),
    /// Stage 3: binarize the searched mask and fine-tune.
    Finetune(Staged),
    /// Certify a checkpoint on the evaluation subset.
    Certify(Staged),
    /// Every stage plus the baseline comparison.
    RunAll(Common),
    /// Train and certify the configured methods; write the summary table.
    Compare(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Search(_) => "search",
            Command::Finetune(_) => "finetune",
            Command::Certify(_) => "certify",
            Command::RunAll(_) => "run-all",
            Command::Compare(_) => "compare",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::RunAll(c) | Command::Compare(c) => c,
            Command::Search(s) | Command::Finetune(s) | Command::Certify(s) => &s.common,
        }
    }

    fn stage_checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Search(s) | Command::Finetune(s) | Command::Certify(s) => s.stage_checkpoint.as_deref(),
            _ => None,
        }
    }
}

/// Artifact locations inside an output directory.
pub mod layout {
    use std::path::{Path, PathBuf};

    use crate::model::MaskMode;
    use crate::pipeline::Method;

    pub const CONFIG_ECHO: &str = "config.txt";
    pub const PRETRAIN: &str = "pretrain.json";
    pub const SUMMARY: &str = "summary.csv";

    pub fn search(out: &Path, mode: MaskMode) -> PathBuf {
        out.join(format!("search_{}.json", mode.as_str()))
    }

    pub fn finetune(out: &Path, mode: MaskMode) -> PathBuf {
        out.join(format!("finetune_{}.json", mode.as_str()))
    }

    pub fn lmp(out: &Path, mode: MaskMode) -> PathBuf {
        out.join(format!("lmp_{}.json", mode.as_str()))
    }

    pub fn log(out: &Path, name: &str) -> PathBuf {
        out.join("logs").join(format!("{name}.csv"))
    }

    pub fn cert(out: &Path, name: &str) -> (PathBuf, PathBuf) {
        let dir = out.join("cert");
        (dir.join(format!("{name}.csv")), dir.join(format!("{name}.txt")))
    }

    pub fn method_tag(method: Method, mode: MaskMode) -> String {
        format!("{}_{}", method, mode.as_str())
    }
}

/// Parsed config with CLI overrides applied, and the resolved output dir.
pub fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::parse_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(layout::CONFIG_ECHO);
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn certify_into<C: Classifier>(
    clf: &C,
    model_acc: f64,
    ratio: f64,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    out: &Path,
    name: &str,
) -> Result<f64> {
    let cert = pca(clf, &prepared.eval, &prepared.transform, &cfg.cert_config())?;
    let (table, summary) = layout::cert(out, name);
    report::write_cert_table(&table, &cert)?;
    report::write_cert_summary(&summary, &cert, model_acc, ratio, cfg)?;
    Ok(cert.pca)
}

fn write_experiment(exp: &Experiment, cfg: &ExperimentConfig, out: &Path, artifacts: bool) -> Result<()> {
    if artifacts {
        Checkpoint::pretrain(exp.pretrained.clone(), cfg.seed).save(&out.join(layout::PRETRAIN))?;
        report::write_epoch_log(&layout::log(out, "pretrain"), &exp.pretrain_losses)?;
    }
    for o in &exp.outcomes {
        let tag = layout::method_tag(o.method, o.mode);
        let (table, summary) = layout::cert(out, &tag);
        report::write_cert_table(&table, &o.cert)?;
        report::write_cert_summary(&summary, &o.cert, o.accuracy, o.ratio, cfg)?;
        if !artifacts {
            continue;
        }
        let base = exp.pretrained.clone().with_mask_mode(o.mode);
        match o.method {
            Method::Vanilla => {}
            Method::Lmp => {
                let hard = o.hard_mask.clone().expect("lmp produces a mask");
                Checkpoint::finetune(o.model.clone(), hard, cfg.seed).save(&layout::lmp(out, o.mode))?;
                report::write_epoch_log(&layout::log(out, &format!("lmp_{}", o.mode.as_str())), &o.finetune_losses)?;
            }
            Method::Csam => {
                let soft = o.soft_mask.clone().expect("search produces a soft mask");
                let hard = o.hard_mask.clone().expect("fine-tune produces a mask");
                Checkpoint::search(base, soft, cfg.seed).save(&layout::search(out, o.mode))?;
                Checkpoint::finetune(o.model.clone(), hard, cfg.seed).save(&layout::finetune(out, o.mode))?;
                report::write_search_log(&layout::log(out, &format!("search_{}", o.mode.as_str())), &o.search_log)?;
                report::write_epoch_log(
                    &layout::log(out, &format!("finetune_{}", o.mode.as_str())),
                    &o.finetune_losses,
                )?;
            }
        }
    }
    report::write_summary(&out.join(layout::SUMMARY), &exp.rows(cfg.seed))
}

/// Runs one command to completion.
pub fn execute(command: &Command) -> Result<()> {
    let (cfg, out) = load_config(command.common())?;
    echo_config(&cfg, &out)?;
    let input = command.stage_checkpoint();
    match command {
        Command::GenData(_) => {
            let p = prepare(&cfg)?;
            report::write_dataset(&out.join("data/train.csv"), &p.train)?;
            report::write_dataset(&out.join("data/test.csv"), &p.test)?;
            report::write_dataset(&out.join("data/augmented.csv"), &p.augmented)?;
            report::write_dataset(&out.join("data/eval.csv"), &p.eval)?;
        }
        Command::Pretrain(_) => {
            let p = prepare(&cfg)?;
            let mut model = init_model(&cfg, p.train.dim())?;
            let losses = stage1_pretrain(&mut model, &p.augmented, &cfg.train, cfg.seed)?;
            Checkpoint::pretrain(model, cfg.seed).save(&out.join(layout::PRETRAIN))?;
            report::write_epoch_log(&layout::log(&out, "pretrain"), &losses)?;
        }
        Command::Search(_) => {
            let path = input.map_or_else(|| out.join(layout::PRETRAIN), Path::to_path_buf);
            let pre = Checkpoint::load_stage(&path, Stage::Pretrain, "csam pretrain")?;
            let p = prepare(&cfg)?;
            for &mode in &cfg.mask_modes {
                let base = pre.model.clone().with_mask_mode(mode);
                let (soft, log) = stage2_mask_search(&base, &p.pairs, &cfg.train, cfg.seed)?;
                report::write_search_log(&layout::log(&out, &format!("search_{}", mode.as_str())), &log)?;
                Checkpoint::search(base, soft, cfg.seed).save(&layout::search(&out, mode))?;
            }
        }
        Command::Finetune(_) => {
            let p = prepare(&cfg)?;
            let inputs: Vec<PathBuf> = match input {
                Some(path) => vec![path.to_path_buf()],
                None => cfg.mask_modes.iter().map(|&m| layout::search(&out, m)).collect(),
            };
            for path in inputs {
                let ck = Checkpoint::load_stage(&path, Stage::Search, "csam search")?;
                let soft = ck.soft_mask.expect("validated search checkpoint");
                let mode = ck.model.mask_mode();
                let (model, hard, losses) = stage3_finetune(&ck.model, &soft, &p.augmented, &cfg.train, cfg.seed)?;
                report::write_epoch_log(&layout::log(&out, &format!("finetune_{}", mode.as_str())), &losses)?;
                Checkpoint::finetune(model, hard, cfg.seed).save(&layout::finetune(&out, mode))?;
            }
        }
        Command::Certify(_) => {
            let p = prepare(&cfg)?;
            let inputs: Vec<PathBuf> = match input {
                Some(path) => vec![path.to_path_buf()],
                None => cfg.mask_modes.iter().map(|&m| layout::finetune(&out, m)).collect(),
            };
            for path in inputs {
                if !path.exists() {
                    return Err(Error::MissingArtifact {
                        path,
                        hint: "run `csam finetune` first or pass --stage-checkpoint".into(),
                    });
                }
                let ck = Checkpoint::load(&path)?;
                let (model, ratio) = match (&ck.soft_mask, &ck.hard_mask) {
                    (_, Some(hard)) => (ck.model.clone(), effective_ratio(hard, &ck.model)?),
                    (Some(soft), None) => {
                        let hard = binarize(soft.layers(), cfg.train.pruning_ratio)?;
                        let deployed = ck.model.apply_mask(&hard.as_f64())?;
                        let r = effective_ratio(&hard, &deployed)?;
                        (deployed, r)
                    }
                    (None, None) => (ck.model.clone(), 0.0),
                };
                let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
                let acc = accuracy(&model, &p.test)?;
                certify_into(&model, acc, ratio, &cfg, &p, &out, &name)?;
            }
        }
        Command::RunAll(_) => {
            let exp = run_experiment(&cfg)?;
            write_experiment(&exp, &cfg, &out, true)?;
        }
        Command::Compare(_) => {
            let exp = run_experiment(&cfg)?;
            write_experiment(&exp, &cfg, &out, false)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command, writes its status file and returns the
/// process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { crate::error::Category::Config.exit_code() } else { 0 };
        }
    };
    let started = SystemTime::now();
    let result = execute(&cli.command);
    let out_dir = cli.command.common().out.clone().or_else(|| {
        ExperimentConfig::parse_file(&cli.command.common().config).ok().map(|c| c.out_dir)
    });
    if let Some(dir) = out_dir.filter(|d| d.is_dir()) {
        if let Err(e) = report::write_status(&dir, cli.command.name(), &result.as_ref().map(|_| ()), started) {
            eprintln!("warning: could not write status file: {e}");
        }
    }
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.category().exit_code()
        }
    }
}

