//! End-to-end orchestration: generate, relabel, weight and select, train
//! one TAM per seed, evaluate.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::PipelineConfig;
use crate::data::{read_dataset, write_dataset, DatasetManifest, Stage};
use crate::error::{Error, Result};
use crate::eval::{bundled_fixture, evaluate, load_corpus_dir, Corpus, EvalReport};
use crate::generator::{generate_dataset, GenerationStats};
use crate::relabel::{relabel_dataset, RelabelMode, RelabelSummary};
use crate::trainer::{train, write_train_log, Checkpoint, TrainLogRow, TrainOutput};
use crate::weighting::{learn_weights, select_top, write_trace, TraceRow};

pub const GENERATED: &str = "generated.jsonl";
pub const RELABELED: &str = "relabeled.jsonl";
pub const WEIGHTED: &str = "weighted.jsonl";
pub const WEIGHT_TRACE: &str = "weight_trace.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

pub fn checkpoint_name(seed: u64) -> String {
    format!("tam_seed{seed}.json")
}

pub fn train_log_name(seed: u64) -> String {
    format!("train_log_seed{seed}.csv")
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Run relabeling in pass-through mode (seed labels kept, nothing filtered).
    pub skip_relabel: bool,
    /// Train on the relabeled set without weights; bank admission always passes.
    pub skip_weight: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config_hash: String,
    pub generation: GenerationStats,
    pub relabel: RelabelSummary,
    pub weight_trace: Option<Vec<TraceRow>>,
    pub train_logs: BTreeMap<u64, Vec<TrainLogRow>>,
    pub report: EvalReport,
}

/// Fails unless `manifest` was produced by the stages of `config` or the
/// override is set.
pub fn check_artifact_hash(manifest: &DatasetManifest, config: &PipelineConfig, artifact: &Path, allow_mismatch: bool) -> Result<()> {
    let expected = config.stage_hash(manifest.stage);
    match manifest.check_hash(&expected, &artifact.display().to_string()) {
        Err(e) if allow_mismatch => {
            log::warn!("{e} (continuing: hash mismatch explicitly allowed)");
            Ok(())
        }
        other => other,
    }
}

pub fn stage_generate(config: &PipelineConfig) -> Result<(DatasetManifest, GenerationStats)> {
    generate_dataset(
        &config.generator()?,
        &config.generation_templates()?,
        &config.label_space()?,
        &config.generation_settings(),
        &config.stage_hash(Stage::Generated),
    )
}

pub fn stage_relabel(config: &PipelineConfig, generated: &DatasetManifest) -> Result<(DatasetManifest, RelabelSummary)> {
    let (mut out, summary) = relabel_dataset(
        generated,
        &config.generator()?,
        &config.relabel_template()?,
        &config.relabel_config(),
    )?;
    out.config_hash = config.stage_hash(Stage::Relabeled);
    Ok((out, summary))
}

/// Learns weights and keeps the top `select_count` records (clamped to the
/// dataset size).
pub fn stage_weight(config: &PipelineConfig, relabeled: &DatasetManifest) -> Result<(DatasetManifest, Vec<TraceRow>)> {
    let weight_config = config.weight_config();
    let outcome = learn_weights(relabeled, &weight_config, config.weight_seed())?;
    let count = weight_config.select_count.min(relabeled.len());
    if count < weight_config.select_count {
        log::warn!(
            "select_count {} exceeds the {} relabeled records; keeping all",
            weight_config.select_count,
            relabeled.len()
        );
    }
    let mut selected = select_top(relabeled, &outcome.weights, count)?;
    selected.config_hash = config.stage_hash(Stage::Selected);
    Ok((selected, outcome.trace))
}

pub fn stage_train(config: &PipelineConfig, data: &DatasetManifest, seed: u64) -> Result<TrainOutput> {
    if data.records.iter().all(|r| r.weight.is_none()) {
        log::info!("no learned weights on the training set: denoising bank admits every sample");
    }
    train(data, &config.train_config(seed), &config.hash())
}

pub fn load_corpora(config: &PipelineConfig) -> Result<BTreeMap<String, Corpus>> {
    if config.eval_dir.is_empty() {
        Ok(bundled_fixture(config.fixture_seed))
    } else {
        load_corpus_dir(&config.eval_dir, &config.label_space()?)
    }
}

fn ensure_nonempty(manifest: &DatasetManifest, stage: &str) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::Stage(format!("{stage} produced no records")));
    }
    Ok(())
}

/// Runs every stage in order. Each dataset is stamped with the hash of the
/// settings it depends on; checkpoints and the report carry the full hash.
/// Writes each artifact into `out_dir` as soon
/// as it is produced so a failing stage leaves earlier artifacts in place.
pub fn run_pipeline(config: &PipelineConfig, options: &PipelineOptions, out_dir: impl AsRef<Path>) -> Result<PipelineRun> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut config = config.clone();
    if options.skip_relabel {
        config.relabel_mode = RelabelMode::Off;
    }
    if options.skip_weight {
        config.skip_weight = true;
    }
    let hash = config.hash();
    log::info!("pipeline config hash {hash}");

    let (generated, generation) = stage_generate(&config)?;
    write_dataset(&generated, out_dir.join(GENERATED))?;

    let (relabeled, relabel) = stage_relabel(&config, &generated)?;
    ensure_nonempty(&relabeled, "relabel")?;
    write_dataset(&relabeled, out_dir.join(RELABELED))?;

    let (train_set, weight_trace) = if config.skip_weight {
        log::info!("weighting skipped: t_mb admission degenerates to always-pass");
        (relabeled, None)
    } else {
        let (selected, trace) = stage_weight(&config, &relabeled)?;
        write_dataset(&selected, out_dir.join(WEIGHTED))?;
        write_trace(&trace, out_dir.join(WEIGHT_TRACE))?;
        (selected, Some(trace))
    };

    let corpora = load_corpora(&config)?;
    let mut checkpoints: Vec<(u64, Checkpoint)> = Vec::new();
    let mut train_logs = BTreeMap::new();
    for &seed in &config.seeds {
        let out = stage_train(&config, &train_set, seed)?;
        out.checkpoint.save(out_dir.join(checkpoint_name(seed)))?;
        write_train_log(&out.log, out_dir.join(train_log_name(seed)))?;
        train_logs.insert(seed, out.log);
        checkpoints.push((seed, out.checkpoint));
    }

    let refs: Vec<(u64, &Checkpoint)> = checkpoints.iter().map(|(s, c)| (*s, c)).collect();
    let mut report = evaluate(&refs, &corpora)?;
    report.config_hash = Some(hash.clone());
    report.save(out_dir.join(REPORT_JSON))?;
    let txt = out_dir.join(REPORT_TXT);
    std::fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    log::info!("average accuracy {:.2}", 100.0 * report.average);

    Ok(PipelineRun {
        config_hash: hash,
        generation,
        relabel,
        weight_trace,
        train_logs,
        report,
    })
}

/// Checkpoints carry the full config hash.
pub fn check_checkpoint_hash(ckpt: &Checkpoint, config: &PipelineConfig, artifact: &Path, allow_mismatch: bool) -> Result<()> {
    let expected = config.hash();
    if ckpt.config_hash == expected {
        return Ok(());
    }
    let err = Error::HashMismatch {
        artifact: artifact.display().to_string(),
        expected,
        found: ckpt.config_hash.clone(),
    };
    if allow_mismatch {
        log::warn!("{err} (continuing: hash mismatch explicitly allowed)");
        Ok(())
    } else {
        Err(err)
    }
}

/// Reads a dataset artifact and checks it against the current config.
pub fn read_stage_input(path: &Path, config: &PipelineConfig, allowed: &[Stage], allow_mismatch: bool) -> Result<DatasetManifest> {
    let manifest = read_dataset(path)?;
    manifest.require_stage(allowed)?;
    check_artifact_hash(&manifest, config, path, allow_mismatch)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m_stage(name: &str) -> Stage {
        match name {
            GENERATED => Stage::Generated,
            RELABELED => Stage::Relabeled,
            _ => Stage::Selected,
        }
    }

    fn small() -> PipelineConfig {
        PipelineConfig {
            n_samples: 300,
            outer_epochs: 5,
            outer_val_count: 100,
            select_count: 150,
            epochs: 1,
            seeds: vec![0],
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn writes_every_artifact_stamped_with_one_hash() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        let run = run_pipeline(&config, &PipelineOptions::default(), dir.path()).unwrap();
        assert_eq!(run.config_hash, config.hash());
        for name in [GENERATED, RELABELED, WEIGHTED] {
            let path = dir.path().join(name);
            let m = read_stage_input(&path, &config, &[m_stage(name)], false).unwrap();
            assert_eq!(m.config_hash, config.stage_hash(m.stage), "{name}");
        }
        assert_eq!(read_dataset(dir.path().join(WEIGHTED)).unwrap().len(), 150);
        let ckpt = Checkpoint::load(dir.path().join(checkpoint_name(0))).unwrap();
        assert_eq!(ckpt.config_hash, run.config_hash);
        assert!(dir.path().join(train_log_name(0)).exists());
        assert!(dir.path().join(WEIGHT_TRACE).exists());
        assert!(dir.path().join(REPORT_TXT).exists());
        assert_eq!(run.report.config_hash.as_deref(), Some(run.config_hash.as_str()));
    }

    #[test]
    fn skipping_stages_changes_the_hash_and_omits_weight_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let options = PipelineOptions {
            skip_relabel: true,
            skip_weight: true,
        };
        let run = run_pipeline(&small(), &options, dir.path()).unwrap();
        assert_ne!(run.config_hash, small().hash());
        assert_eq!(run.relabel.n_removed, 0);
        assert!(run.weight_trace.is_none());
        assert!(!dir.path().join(WEIGHTED).exists());
    }

    #[test]
    fn mismatched_artifacts_are_rejected_unless_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        let (generated, _) = stage_generate(&config).unwrap();
        let path = dir.path().join(GENERATED);
        write_dataset(&generated, &path).unwrap();
        let other = PipelineConfig { tau_re: 0.3, ..config.clone() };
        assert!(read_stage_input(&path, &other, &[Stage::Generated], false).is_ok());
        let other = PipelineConfig { n_samples: 301, ..config.clone() };
        let err = read_stage_input(&path, &other, &[Stage::Generated], false).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
        assert!(read_stage_input(&path, &other, &[Stage::Generated], true).is_ok());
        assert!(read_stage_input(&path, &config, &[Stage::Relabeled], false).is_err());
    }
}
