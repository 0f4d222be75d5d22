//! Multi-domain evaluation, the zero-shot prompting baseline and 2-D
//! projections of learned representations.

pub mod fixture;
pub mod pca;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, LabelSpace, PromptTemplate};
use crate::error::{Error, Result};
use crate::generator::TextGenerator;
use crate::relabel::class_logits;
use crate::tensor::Matrix;
use crate::trainer::Checkpoint;

pub use fixture::{bundled_fixture, planted_noise_dataset, FIXTURE_DOMAINS};
pub use pca::Pca2;

/// Labelled texts of one domain.
pub type Corpus = Vec<(String, usize)>;

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    text: String,
    label: serde_json::Value,
}

fn parse_label(raw: &str, label_space: &LabelSpace, line: usize) -> Result<usize> {
    let raw = raw.trim();
    let id = match raw.parse::<usize>() {
        Ok(id) => Some(id),
        Err(_) => label_space.parse_class(raw),
    };
    match id {
        Some(id) if id < label_space.num_classes() => Ok(id),
        _ => Err(Error::Parse {
            line,
            message: format!(
                "label {raw:?} is outside the label space {:?}",
                label_space.names()
            ),
        }),
    }
}

/// Loads `text<TAB>label` lines, or JSON lines `{"text", "label"}` when the
/// file ends in `.jsonl`. Labels may be class ids or class names.
pub fn load_eval_corpus(path: impl AsRef<Path>, label_space: &LabelSpace) -> Result<Corpus> {
    let path = path.as_ref();
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = if jsonl {
            let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n,
                message: e.to_string(),
            })?;
            let raw = match parsed.label {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            (parsed.text, parse_label(&raw, label_space, n)?)
        } else {
            let (text, raw) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: n,
                message: "expected text<TAB>label".into(),
            })?;
            (text.to_string(), parse_label(raw, label_space, n)?)
        };
        out.push((text, label));
    }
    log::info!("loaded {} examples from {}", out.len(), path.display());
    Ok(out)
}

/// Writes a corpus as JSON lines with numeric labels.
pub fn write_eval_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (text, label) in corpus {
        let line = CorpusLine {
            text: text.clone(),
            label: (*label).into(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Validation(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads every `*.jsonl` / `*.tsv` file of a directory, keyed by file stem.
pub fn load_corpus_dir(dir: impl AsRef<Path>, label_space: &LabelSpace) -> Result<BTreeMap<String, Corpus>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "jsonl" && ext != "tsv" {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.insert(stem, load_eval_corpus(&path, label_space)?);
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no .jsonl or .tsv corpora in {}", dir.display())));
    }
    Ok(out)
}

pub fn accuracy(predictions: &[usize], corpus: &Corpus) -> f64 {
    let correct = predictions.iter().zip(corpus).filter(|(p, (_, y))| *p == y).count();
    correct as f64 / corpus.len() as f64
}

/// Accuracy of always predicting the most frequent class (ties to the lowest id).
pub fn majority_baseline(corpus: &Corpus, num_classes: usize) -> f64 {
    let mut counts = vec![0.0; num_classes];
    for (_, y) in corpus {
        counts[*y] += 1.0;
    }
    counts[argmax(&counts)] / corpus.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over seeds, per domain.
    pub per_domain_accuracy: BTreeMap<String, f64>,
    /// Unweighted mean of `per_domain_accuracy`.
    pub average: f64,
    pub seeds: Vec<u64>,
    pub per_seed: BTreeMap<u64, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn from_per_seed(per_seed: BTreeMap<u64, BTreeMap<String, f64>>) -> Result<Self> {
        let seeds: Vec<u64> = per_seed.keys().copied().collect();
        let first = per_seed
            .values()
            .next()
            .ok_or_else(|| Error::Validation("evaluation needs at least one seed".into()))?;
        let mut per_domain_accuracy = BTreeMap::new();
        for domain in first.keys() {
            let sum: f64 = per_seed
                .values()
                .map(|m| {
                    m.get(domain)
                        .copied()
                        .ok_or_else(|| Error::Validation(format!("seed results lack domain {domain}")))
                })
                .sum::<Result<f64>>()?;
            per_domain_accuracy.insert(domain.clone(), sum / seeds.len() as f64);
        }
        let average = mean(per_domain_accuracy.values().copied());
        Ok(Self {
            per_domain_accuracy,
            average,
            seeds,
            per_seed,
            config_hash: None,
        })
    }

    /// Aligned plain-text table: one row per seed plus the mean row.
    pub fn table(&self) -> String {
        let domains: Vec<&String> = self.per_domain_accuracy.keys().collect();
        let width = domains.iter().map(|d| d.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<8}", "seed");
        for d in &domains {
            let _ = write!(s, " {d:>width$}");
        }
        let _ = writeln!(s, " {:>width$}", "average");
        let mut row = |label: &str, values: &BTreeMap<String, f64>| {
            let _ = write!(s, "{label:<8}");
            for d in &domains {
                let _ = write!(s, " {:>width$.2}", 100.0 * values[*d]);
            }
            let _ = writeln!(s, " {:>width$.2}", 100.0 * mean(values.values().copied()));
        };
        for (seed, values) in &self.per_seed {
            row(&seed.to_string(), values);
        }
        row("mean", &self.per_domain_accuracy);
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Accuracy of each checkpoint (one per seed) on each corpus.
pub fn evaluate(checkpoints: &[(u64, &Checkpoint)], corpora: &BTreeMap<String, Corpus>) -> Result<EvalReport> {
    if let Some((name, _)) = corpora.iter().find(|(_, c)| c.is_empty()) {
        return Err(Error::Validation(format!("corpus {name} is empty")));
    }
    let mut per_seed = BTreeMap::new();
    for (seed, ckpt) in checkpoints {
        let accs: BTreeMap<String, f64> = corpora
            .par_iter()
            .map(|(name, corpus)| {
                let texts: Vec<&str> = corpus.iter().map(|(t, _)| t.as_str()).collect();
                (name.clone(), accuracy(&ckpt.predict(&texts), corpus))
            })
            .collect();
        per_seed.insert(*seed, accs);
    }
    EvalReport::from_per_seed(per_seed)
}

/// Zero-shot accuracy from the generator's own verbalizer scores.
pub fn prompting_baseline<G: TextGenerator + ?Sized>(
    gen: &G,
    template: &PromptTemplate,
    label_space: &LabelSpace,
    corpus: &Corpus,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Validation("prompting baseline needs a non-empty corpus".into()));
    }
    let predictions: Vec<usize> = corpus
        .par_iter()
        .map(|(text, _)| class_logits(gen, template, label_space, text).map(|l| argmax(&l)))
        .collect::<Result<_>>()?;
    Ok(accuracy(&predictions, corpus))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub domain: String,
    pub label: usize,
}

/// Projects every text's TAM representation onto its first two principal axes.
pub fn project_2d(ckpt: &Checkpoint, corpora: &BTreeMap<String, Corpus>) -> Result<Vec<ProjectedPoint>> {
    let mut texts = Vec::new();
    let mut meta = Vec::new();
    for (domain, corpus) in corpora {
        for (text, label) in corpus {
            texts.push(text.as_str());
            meta.push((domain.clone(), *label));
        }
    }
    if texts.len() < 3 {
        return Err(Error::Validation(format!("projection needs at least 3 texts, got {}", texts.len())));
    }
    let (_, projections) = ckpt.encode(&texts);
    let pca = Pca2::fit(&projections)?;
    let coords: Matrix = pca.transform(&projections);
    Ok(meta
        .into_iter()
        .enumerate()
        .map(|(i, (domain, label))| ProjectedPoint {
            x: coords.get(i, 0),
            y: coords.get(i, 1),
            domain,
            label,
        })
        .collect())
}

pub fn write_points_csv(points: &[ProjectedPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("x,y,domain,label\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.x, p.y, p.domain, p.label);
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
