use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use unigen_core::config::{GenerationMode, PipelineConfig};
use unigen_core::data::{write_dataset, Stage};
use unigen_core::eval::{evaluate, project_2d, prompting_baseline, write_points_csv, EvalReport};
use unigen_core::pipeline::{self, PipelineOptions};
use unigen_core::relabel::RelabelMode;
use unigen_core::trainer::{write_train_log, Checkpoint};
use unigen_core::weighting::write_trace;

#[derive(Parser)]
#[command(name = "unigen", version, about = "Synthetic dataset generation and small-classifier training")]
struct Cli {
    /// Flat TOML config; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long = "seed", id = "master_seed")]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Read artifacts whose config hash does not match.
    #[arg(long, global = true)]
    allow_hash_mismatch: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Skippable {
    Relabel,
    Weight,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled dataset from prompts.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<GenerationMode>,
        #[arg(long)]
        domain: Option<String>,
    },
    /// Replace seed labels with soft pseudo-labels and drop low-confidence samples.
    Relabel {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<RelabelMode>,
        #[arg(long)]
        tau_re: Option<f64>,
        #[arg(long)]
        t_re: Option<f64>,
    },
    /// Learn sample weights and keep the highest-weighted samples.
    Weight {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        outer_lr: Option<f64>,
        #[arg(long)]
        outer_epochs: Option<usize>,
        #[arg(long)]
        select: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Weight-trace CSV; defaults to `weight_trace.csv` next to `--out`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a classifier on a relabeled or selected dataset.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau_scl: Option<f64>,
        #[arg(long)]
        proj_dim: Option<usize>,
        #[arg(long)]
        bank: Option<usize>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        t_mb: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Cross-entropy only (alpha = 0).
        #[arg(long)]
        no_scl: bool,
        /// Admit every sample to the memory bank.
        #[arg(long)]
        no_bank_denoise: bool,
        /// Training-log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy of one checkpoint per seed on every evaluation domain.
    Evaluate {
        #[arg(long = "ckpt", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Directory of .jsonl/.tsv corpora; the config's choice when omitted.
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot classification by scoring the verbalizer with the generator.
    PromptBaseline {
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2-D principal-component projection of checkpoint representations.
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write all artifacts into one directory.
    Pipeline {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        skip: Vec<Skippable>,
        /// Training seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn print_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    print!("{}", report.table());
    if let Some(out) = out {
        report.save(out)?;
        let txt = out.with_extension("txt");
        std::fs::write(&txt, report.table()).with_context(|| format!("writing {}", txt.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    set(&mut config.seed, cli.seed);
    let allow = cli.allow_hash_mismatch;

    match cli.command {
        Command::Generate { out, n, seed, mode, domain } => {
            set(&mut config.n_samples, n);
            set(&mut config.seed, seed);
            set(&mut config.mode, mode);
            set(&mut config.domain, domain);
            config.validate()?;
            let (manifest, stats) = pipeline::stage_generate(&config)?;
            write_dataset(&manifest, &out)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Relabel { input, out, mode, tau_re, t_re } => {
            set(&mut config.relabel_mode, mode);
            set(&mut config.tau_re, tau_re);
            set(&mut config.t_re, t_re);
            config.validate()?;
            let generated = pipeline::read_stage_input(&input, &config, &[Stage::Generated], allow)?;
            let (relabeled, summary) = pipeline::stage_relabel(&config, &generated)?;
            write_dataset(&relabeled, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Weight { input, out, outer_lr, outer_epochs, select, seed, trace } => {
            set(&mut config.outer_lr, outer_lr);
            set(&mut config.outer_epochs, outer_epochs);
            set(&mut config.select_count, select);
            if seed.is_some() {
                config.weight_seed = seed;
            }
            config.validate()?;
            let relabeled = pipeline::read_stage_input(&input, &config, &[Stage::Relabeled], allow)?;
            let (selected, rows) = pipeline::stage_weight(&config, &relabeled)?;
            write_dataset(&selected, &out)?;
            let trace = trace.unwrap_or_else(|| sibling(&out, pipeline::WEIGHT_TRACE));
            write_trace(&rows, &trace)?;
            log::info!("kept {} of {} records", selected.len(), relabeled.len());
        }
        Command::Train {
            input,
            out,
            alpha,
            tau_scl,
            proj_dim,
            bank,
            momentum,
            t_mb,
            epochs,
            lr,
            seed,
            no_scl,
            no_bank_denoise,
            log,
        } => {
            set(&mut config.alpha, alpha);
            set(&mut config.tau_scl, tau_scl);
            set(&mut config.proj_dim, proj_dim);
            set(&mut config.bank_capacity, bank);
            set(&mut config.momentum, momentum);
            set(&mut config.t_mb, t_mb);
            set(&mut config.epochs, epochs);
            set(&mut config.lr, lr);
            if no_scl {
                config.alpha = 0.0;
            }
            if no_bank_denoise {
                config.bank_denoise = false;
            }
            let seed = seed.unwrap_or(config.seed);
            config.seeds = vec![seed];
            config.validate()?;
            let data = pipeline::read_stage_input(&input, &config, &[Stage::Relabeled, Stage::Weighted, Stage::Selected], allow)?;
            let output = pipeline::stage_train(&config, &data, seed)?;
            output.checkpoint.save(&out)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log.csv"));
            write_train_log(&output.log, &log_path)?;
            if let Some(last) = output.log.last() {
                log::info!("final step {}: ce {:.4} scl {:.4} total {:.4}", last.step, last.ce, last.scl, last.total);
            }
        }
        Command::Evaluate { checkpoints, eval_dir, out } => {
            if let Some(dir) = eval_dir {
                config.eval_dir = dir.display().to_string();
            }
            let mut loaded = Vec::new();
            for path in &checkpoints {
                let ckpt = Checkpoint::load(path)?;
                pipeline::check_checkpoint_hash(&ckpt, &config, path, allow)?;
                loaded.push((ckpt.config.seed, ckpt));
            }
            let mut seen = BTreeMap::new();
            for (seed, _) in &loaded {
                if seen.insert(*seed, ()).is_some() {
                    bail!("two checkpoints were trained with seed {seed}");
                }
            }
            let corpora = pipeline::load_corpora(&config)?;
            let refs: Vec<(u64, &Checkpoint)> = loaded.iter().map(|(s, c)| (*s, c)).collect();
            let mut report = evaluate(&refs, &corpora)?;
            report.config_hash = Some(config.hash());
            print_report(&report, out.as_deref())?;
        }
        Command::PromptBaseline { eval_dir, out } => {
            if let Some(dir) = eval_dir {
                config.eval_dir = dir.display().to_string();
            }
            let corpora = pipeline::load_corpora(&config)?;
            let (gen, template, ls) = (config.generator()?, config.template()?, config.label_space()?);
            let mut accuracies = BTreeMap::new();
            for (domain, corpus) in &corpora {
                accuracies.insert(domain.clone(), prompting_baseline(&gen, &template, &ls, corpus)?);
            }
            let report = EvalReport::from_per_seed(BTreeMap::from([(config.seed, accuracies)]))?;
            print_report(&report, out.as_deref())?;
        }
        Command::Project { ckpt, eval_dir, out } => {
            if let Some(dir) = eval_dir {
                config.eval_dir = dir.display().to_string();
            }
            let checkpoint = Checkpoint::load(&ckpt)?;
            pipeline::check_checkpoint_hash(&checkpoint, &config, &ckpt, allow)?;
            let points = project_2d(&checkpoint, &pipeline::load_corpora(&config)?)?;
            write_points_csv(&points, &out)?;
            log::info!("wrote {} points to {}", points.len(), out.display());
        }
        Command::Pipeline { out_dir, skip, seeds } => {
            set(&mut config.seeds, seeds);
            let options = PipelineOptions {
                skip_relabel: skip.iter().any(|s| matches!(s, Skippable::Relabel)),
                skip_weight: skip.iter().any(|s| matches!(s, Skippable::Weight)),
            };
            let run = pipeline::run_pipeline(&config, &options, &out_dir)?;
            print!("{}", run.report.table());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
