//! Shared data model: label spaces, prompt templates, sample records and the
//! JSONL dataset container passed between pipeline stages.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "unigen-dataset/1";

/// Tolerance on `sum(soft_label) == 1` for persisted records.
pub const SOFT_LABEL_SUM_TOL: f64 = 1e-6;

pub const LABEL_SLOT: &str = "<label>";
pub const TEXT_SLOT: &str = "<text>";

/// Ordered class set with display names and verbalizer words.
///
/// Class ids are the positions `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSpace")]
pub struct LabelSpace {
    names: Vec<String>,
    verbalizer: Vec<String>,
}

#[derive(Deserialize)]
struct RawLabelSpace {
    names: Vec<String>,
    verbalizer: Vec<String>,
}

impl TryFrom<RawLabelSpace> for LabelSpace {
    type Error = Error;

    fn try_from(raw: RawLabelSpace) -> Result<Self> {
        LabelSpace::new(raw.names, raw.verbalizer)
    }
}

impl LabelSpace {
    pub fn new(names: Vec<String>, verbalizer: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Validation(format!(
                "label space needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if verbalizer.len() != names.len() {
            return Err(Error::Validation(format!(
                "{} class names but {} verbalizer words",
                names.len(),
                verbalizer.len()
            )));
        }
        for (i, word) in verbalizer.iter().enumerate() {
            if word.trim().is_empty() {
                return Err(Error::Validation(format!("verbalizer word for class {i} is empty")));
            }
            if verbalizer[..i].contains(word) {
                return Err(Error::Validation(format!("duplicate verbalizer word {word:?}")));
            }
        }
        Ok(Self { names, verbalizer })
    }

    /// Verbalizer words default to the class names.
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let verbalizer = names.clone();
        Self::new(names, verbalizer)
    }

    /// Binary sentiment space: class 0 = negative, class 1 = positive.
    pub fn sentiment() -> Self {
        Self::from_names(["negative", "positive"]).expect("static label space is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn verbalizer(&self) -> &[String] {
        &self.verbalizer
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    /// Resolves a class from either its numeric id or its name.
    pub fn parse_class(&self, token: &str) -> Option<usize> {
        let token = token.trim();
        if let Ok(id) = token.parse::<usize>() {
            return (id < self.num_classes()).then_some(id);
        }
        self.names.iter().position(|n| n.eq_ignore_ascii_case(token))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Universal,
    DomainSpecific,
}

/// Prompt with one `<label>` slot and at most one `<text>` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    template: String,
    kind: TemplateKind,
    domain_name: String,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>, kind: TemplateKind, domain_name: impl Into<String>) -> Result<Self> {
        let template = template.into();
        match template.matches(LABEL_SLOT).count() {
            1 => {}
            0 => return Err(Error::Template(format!("template {template:?} has no {LABEL_SLOT} slot"))),
            n => return Err(Error::Template(format!("template {template:?} has {n} {LABEL_SLOT} slots"))),
        }
        if template.matches(TEXT_SLOT).count() > 1 {
            return Err(Error::Template(format!("template {template:?} has more than one {TEXT_SLOT} slot")));
        }
        Ok(Self {
            template,
            kind,
            domain_name: domain_name.into(),
        })
    }

    pub fn universal(template: impl Into<String>) -> Result<Self> {
        Self::new(template, TemplateKind::Universal, "")
    }

    pub fn domain(domain: impl Into<String>, template: impl Into<String>) -> Result<Self> {
        Self::new(template, TemplateKind::DomainSpecific, domain)
    }

    /// "The text in <label> sentiment is: <text>"
    pub fn default_universal() -> Self {
        Self::universal("The text in <label> sentiment is: <text>").expect("static template")
    }

    /// The five domain prompts used by the task-specific baselines.
    pub fn default_domains() -> Vec<Self> {
        [
            ("movie", "movie review"),
            ("products", "product review"),
            ("restaurant", "restaurant review"),
            ("electronics", "electronics product review"),
            ("tweet", "tweet"),
        ]
        .into_iter()
        .map(|(domain, noun)| {
            Self::domain(domain, format!("The {noun} in <label> sentiment is: <text>")).expect("static template")
        })
        .collect()
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn has_text_slot(&self) -> bool {
        self.template.contains(TEXT_SLOT)
    }

    /// Short identifier used in provenance: `universal` or the domain name.
    pub fn id(&self) -> &str {
        match self.kind {
            TemplateKind::Universal => "universal",
            TemplateKind::DomainSpecific => &self.domain_name,
        }
    }
}

/// Where a record came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub generator: String,
    pub prompt: String,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub seed: u64,
}

/// One generated example. Field order here is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub text: String,
    pub seed_label: usize,
    pub soft_label: Vec<f64>,
    pub hard_label: usize,
    pub weight: Option<f64>,
    pub provenance: Provenance,
}

impl SampleRecord {
    /// Record whose soft label is one-hot at `seed_label`.
    pub fn seeded(text: impl Into<String>, seed_label: usize, num_classes: usize, provenance: Provenance) -> Self {
        let mut soft_label = vec![0.0; num_classes];
        soft_label[seed_label] = 1.0;
        Self {
            text: text.into(),
            seed_label,
            soft_label,
            hard_label: seed_label,
            weight: None,
            provenance,
        }
    }

    /// Replaces the soft label and recomputes the hard label.
    pub fn set_soft_label(&mut self, soft_label: Vec<f64>) {
        self.hard_label = argmax(&soft_label);
        self.soft_label = soft_label;
    }

    pub fn validate(&self, num_classes: usize) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        if self.soft_label.len() != num_classes {
            return Err(format!(
                "soft_label has {} entries, label space has {num_classes}",
                self.soft_label.len()
            ));
        }
        if self.seed_label >= num_classes {
            return Err(format!("seed_label {} out of range", self.seed_label));
        }
        if let Some(p) = self.soft_label.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(format!("soft_label entry {p} is not a probability"));
        }
        let sum: f64 = self.soft_label.iter().sum();
        if (sum - 1.0).abs() > SOFT_LABEL_SUM_TOL {
            return Err(format!("soft_label sums to {sum}"));
        }
        let expected = argmax(&self.soft_label);
        if self.hard_label != expected {
            return Err(format!("hard_label {} but argmax(soft_label) is {expected}", self.hard_label));
        }
        if let Some(w) = self.weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(format!("weight {w} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Pipeline stage of a dataset. Ordering follows the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generated,
    Relabeled,
    Weighted,
    Selected,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Generated => "generated",
            Stage::Relabeled => "relabeled",
            Stage::Weighted => "weighted",
            Stage::Selected => "selected",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub label_space: LabelSpace,
    pub stage: Stage,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    label_space: LabelSpace,
    stage: Stage,
    config_hash: String,
}

impl DatasetManifest {
    pub fn new(label_space: LabelSpace, stage: Stage, config_hash: impl Into<String>) -> Self {
        Self {
            records: Vec::new(),
            label_space,
            stage,
            config_hash: config_hash.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Moves the manifest to a later stage. Going backwards is an error.
    pub fn advance(&mut self, stage: Stage) -> Result<()> {
        if stage < self.stage {
            return Err(Error::Stage(format!("cannot move dataset from {} back to {stage}", self.stage)));
        }
        self.stage = stage;
        Ok(())
    }

    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::Stage(format!("dataset is at stage {}, expected one of {allowed:?}", self.stage)))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.label_space.num_classes();
        for (index, record) in self.records.iter().enumerate() {
            record
                .validate(k)
                .map_err(|message| Error::InvalidRecord { index, message })?;
        }
        Ok(())
    }

    /// Fails unless `expected` matches the stamped hash.
    pub fn check_hash(&self, expected: &str, artifact: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::HashMismatch {
                artifact: artifact.to_string(),
                expected: expected.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Writes the header line followed by one JSON object per record.
pub fn write_dataset(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        label_space: manifest.label_space.clone(),
        stage: manifest.stage,
        config_hash: manifest.config_hash.clone(),
    };
    write_json_line(&mut out, &header).map_err(|e| Error::io(path, e))?;
    for record in &manifest.records {
        write_json_line(&mut out, record).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::other)?;
    out.write_all(b"\n")
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match header {
            None => {
                let h: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad header: {e}"),
                })?;
                if h.format != DATASET_FORMAT {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unsupported format {:?}", h.format),
                    });
                }
                header = Some(h);
            }
            Some(ref h) => {
                let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                record
                    .validate(h.label_space.num_classes())
                    .map_err(|message| Error::InvalidRecord {
                        index: records.len(),
                        message: format!("line {line_no}: {message}"),
                    })?;
                records.push(record);
            }
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    Ok(DatasetManifest {
        records,
        label_space: header.label_space,
        stage: header.stage,
        config_hash: header.config_hash,
    })
}
