//! Multi-domain labeled-text corpora: file ingestion, a synthetic task
//! generator, whitespace tokenization, batching with in-batch domain-label
//! corruption, and few-shot subsampling.
//!
//! All corpus reads go through [`CorpusStore`], which records (context,
//! domain, split, kind) tuples so the harness can assert test-split and
//! zero-shot hygiene after a run.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate example id '{id}' in domain '{domain}'")]
    DuplicateId { id: String, domain: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("class {class} would receive 0 samples at rate {rate}")]
    EmptyClass { class: usize, rate: f64 },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DataError>;

/// One labeled text (or text pair; pairs are joined with [SEP] at batch time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text2: Option<String>,
    pub label: usize,
}

/// One domain's train/dev/test splits.
#[derive(Debug, Clone)]
pub struct DomainCorpus {
    pub domain: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl DomainCorpus {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Split ids disjoint, labels in range, every class present in train
    /// (prototypes need a non-empty cell per class).
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for ex in self.train.iter().chain(&self.dev).chain(&self.test) {
            if !seen.insert(ex.id.clone()) {
                return Err(DataError::DuplicateId {
                    id: ex.id.clone(),
                    domain: self.domain.clone(),
                });
            }
            if ex.text.is_empty() {
                return Err(DataError::Invalid(format!(
                    "example '{}' in domain '{}' has empty text",
                    ex.id, self.domain
                )));
            }
            if ex.label >= num_classes {
                return Err(DataError::Invalid(format!(
                    "example '{}' label {} out of range (num_classes {})",
                    ex.id, ex.label, num_classes
                )));
            }
        }
        for class in 0..num_classes {
            if !self.train.iter().any(|e| e.label == class) {
                return Err(DataError::Invalid(format!(
                    "class {class} missing from train split of domain '{}'",
                    self.domain
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

// ---------------------------------------------------------------------------
// File ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Jsonl,
    Tsv,
}

impl FileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Jsonl => "jsonl",
            FileFormat::Tsv => "tsv",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text2: Option<String>,
    label: usize,
    domain: String,
}

/// Read one domain's corpus from `<dir>/{train,dev,test}.<ext>`.
///
/// Every record must carry the same domain name; ids must be unique across
/// splits; examples are ordered by id so ingestion is deterministic.
pub fn ingest(dir: &Path, format: FileFormat) -> Result<DomainCorpus> {
    let mut splits: Vec<Vec<Example>> = Vec::new();
    let mut domain: Option<String> = None;
    for split in Split::ALL {
        let path = dir.join(format!("{}.{}", split.file_stem(), format.extension()));
        let records = read_records(&path, format)?;
        let mut examples = Vec::with_capacity(records.len());
        for rec in records {
            match &domain {
                None => domain = Some(rec.domain.clone()),
                Some(d) if *d != rec.domain => {
                    return Err(DataError::Invalid(format!(
                        "mixed domains '{d}' and '{}' under {}",
                        rec.domain,
                        dir.display()
                    )))
                }
                _ => {}
            }
            examples.push(Example {
                id: rec.id,
                text: rec.text,
                text2: rec.text2,
                label: rec.label,
            });
        }
        examples.sort_by(|a, b| a.id.cmp(&b.id));
        splits.push(examples);
    }
    let domain = domain.ok_or_else(|| {
        DataError::Invalid(format!("no examples found under {}", dir.display()))
    })?;
    let corpus = DomainCorpus {
        domain,
        test: splits.pop().unwrap(),
        dev: splits.pop().unwrap(),
        train: splits.pop().unwrap(),
    };
    // duplicate ids are rejected here
    let num_classes = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(1);
    corpus.validate(num_classes)?;
    Ok(corpus)
}

fn read_records(path: &Path, format: FileFormat) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut lines = reader.lines().enumerate();
    if format == FileFormat::Tsv {
        let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "missing TSV header".into(),
        })?;
        let header = header.map_err(|e| io_line(path, 1, e))?;
        if header.trim() != "id\ttext\ttext2\tlabel\tdomain" {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("unexpected TSV header '{header}'"),
            });
        }
    }
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_line(path, line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = match format {
            FileFormat::Jsonl => {
                serde_json::from_str::<Record>(&line).map_err(|e| DataError::Parse {
                    path: path.display().to_string(),
                    line: line_no,
                    msg: e.to_string(),
                })?
            }
            FileFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 5 {
                    return Err(DataError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
                    });
                }
                Record {
                    id: fields[0].to_string(),
                    text: fields[1].to_string(),
                    text2: if fields[2].is_empty() {
                        None
                    } else {
                        Some(fields[2].to_string())
                    },
                    label: fields[3].parse().map_err(|_| DataError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        msg: format!("bad label '{}'", fields[3]),
                    })?,
                    domain: fields[4].to_string(),
                }
            }
        };
        if record.text.is_empty() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: "empty text".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn io_line(path: &Path, line: usize, e: std::io::Error) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

/// Write one domain's corpus as `<dir>/{train,dev,test}.<ext>`.
pub fn export(corpus: &DomainCorpus, dir: &Path, format: FileFormat) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for split in Split::ALL {
        let path = dir.join(format!("{}.{}", split.file_stem(), format.extension()));
        let mut file = std::fs::File::create(&path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let write = |file: &mut std::fs::File, s: String| {
            file.write_all(s.as_bytes()).map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        if format == FileFormat::Tsv {
            write(&mut file, "id\ttext\ttext2\tlabel\tdomain\n".into())?;
        }
        for ex in corpus.split(split) {
            match format {
                FileFormat::Jsonl => {
                    let rec = Record {
                        id: ex.id.clone(),
                        text: ex.text.clone(),
                        text2: ex.text2.clone(),
                        label: ex.label,
                        domain: corpus.domain.clone(),
                    };
                    write(&mut file, format!("{}\n", serde_json::to_string(&rec).unwrap()))?;
                }
                FileFormat::Tsv => {
                    for piece in [Some(ex.text.as_str()), ex.text2.as_deref()].into_iter().flatten() {
                        if piece.contains('\t') || piece.contains('\n') {
                            return Err(DataError::Invalid(format!(
                                "example '{}' contains tab/newline, not representable in TSV",
                                ex.id
                            )));
                        }
                    }
                    write(
                        &mut file,
                        format!(
                            "{}\t{}\t{}\t{}\t{}\n",
                            ex.id,
                            ex.text,
                            ex.text2.as_deref().unwrap_or(""),
                            ex.label,
                            corpus.domain
                        ),
                    )?;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic multi-domain task
// ---------------------------------------------------------------------------

/// Controls for the synthetic multi-domain classification task.
///
/// Texts are token sequences. Class-indicative tokens come from a vocabulary
/// region shared across domains with probability `shared_signal` and from a
/// domain-private region otherwise. `domain_noise` sets the rate of
/// class-neutral, domain-indicative flavor tokens (what the domain classifier
/// and corruption loss act on). A small `distractor_rate` fraction of
/// examples draws its evidence from a random class, which caps attainable
/// accuracy below 1 and leaves room for soft-label effects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub train_per_domain: usize,
    pub dev_per_domain: usize,
    pub test_per_domain: usize,
    pub shared_signal: f64,
    pub domain_noise: f64,
    pub seed: u64,
    #[serde(default = "default_text_len")]
    pub text_len: usize,
    #[serde(default = "default_distractor_rate")]
    pub distractor_rate: f64,
    /// P(an example carries 0, 1, 2, ... class-evidence tokens). The mass on
    /// zero sets an accuracy ceiling: those examples are unlearnable.
    #[serde(default = "default_evidence_probs")]
    pub evidence_probs: Vec<f64>,
    /// Size of each class's shared vocabulary region. Large enough that one
    /// domain's train split undersamples it, multi-domain training has a
    /// real statistical advantage on the shared signal.
    #[serde(default = "default_shared_types")]
    pub shared_types_per_class: usize,
    /// Size of each (domain, class) private vocabulary region.
    #[serde(default = "default_private_types")]
    pub private_types_per_cell: usize,
}

fn default_text_len() -> usize {
    8
}

fn default_distractor_rate() -> f64 {
    0.05
}

fn default_evidence_probs() -> Vec<f64> {
    vec![0.15, 0.35, 0.30, 0.20]
}

fn default_shared_types() -> usize {
    80
}

fn default_private_types() -> usize {
    12
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_domains: 3,
            num_classes: 2,
            train_per_domain: 600,
            dev_per_domain: 100,
            test_per_domain: 100,
            shared_signal: 0.8,
            domain_noise: 0.5,
            seed: 17,
            text_len: default_text_len(),
            distractor_rate: default_distractor_rate(),
            evidence_probs: default_evidence_probs(),
            shared_types_per_class: default_shared_types(),
            private_types_per_cell: default_private_types(),
        }
    }
}

const FLAVOR_TYPES_PER_DOMAIN: usize = 8;
const NEUTRAL_TYPES: usize = 40;

/// Generate one corpus per domain, seeded and bitwise reproducible.
pub fn synth_multidomain(spec: &GeneratorSpec) -> Result<Vec<DomainCorpus>> {
    if spec.num_domains == 0 || spec.num_classes < 2 {
        return Err(DataError::Invalid(
            "need at least 1 domain and 2 classes".into(),
        ));
    }
    if spec.train_per_domain < spec.num_classes * 5 {
        return Err(DataError::Invalid(format!(
            "train_per_domain {} below {} (5 per class)",
            spec.train_per_domain,
            spec.num_classes * 5
        )));
    }
    if spec.dev_per_domain == 0 || spec.test_per_domain == 0 {
        return Err(DataError::Invalid("dev/test splits must be non-empty".into()));
    }
    for (name, v) in [
        ("shared_signal", spec.shared_signal),
        ("domain_noise", spec.domain_noise),
        ("distractor_rate", spec.distractor_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(DataError::Invalid(format!("{name} {v} outside [0, 1]")));
        }
    }
    if spec.text_len < 4 {
        return Err(DataError::Invalid("text_len must be at least 4".into()));
    }
    if spec.shared_types_per_class == 0 || spec.private_types_per_cell == 0 {
        return Err(DataError::Invalid(
            "token regions must be non-empty".into(),
        ));
    }
    let evidence_mass: f64 = spec.evidence_probs.iter().sum();
    if spec.evidence_probs.is_empty()
        || spec.evidence_probs.iter().any(|p| *p < 0.0)
        || (evidence_mass - 1.0).abs() > 1e-9
    {
        return Err(DataError::Invalid(
            "evidence_probs must be a probability distribution".into(),
        ));
    }
    let mut corpora = Vec::with_capacity(spec.num_domains);
    for k in 0..spec.num_domains {
        let domain = format!("domain{k}");
        let gen_split = |split: Split, count: usize| -> Vec<Example> {
            let mut rng = seeded_rng(spec.seed, &format!("synth/{domain}/{split}"));
            // balanced within +-1: round-robin labels, then shuffled order
            let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
            labels.shuffle(&mut rng);
            labels
                .into_iter()
                .enumerate()
                .map(|(i, label)| Example {
                    id: format!("{domain}-{split}-{i:05}"),
                    text: gen_text(spec, k, label, &mut rng),
                    text2: None,
                    label,
                })
                .collect()
        };
        let corpus = DomainCorpus {
            train: gen_split(Split::Train, spec.train_per_domain),
            dev: gen_split(Split::Dev, spec.dev_per_domain),
            test: gen_split(Split::Test, spec.test_per_domain),
            domain,
        };
        corpus.validate(spec.num_classes)?;
        corpora.push(corpus);
    }
    Ok(corpora)
}

fn gen_text(spec: &GeneratorSpec, domain: usize, label: usize, rng: &mut ChaCha8Rng) -> String {
    // distractor examples draw evidence from a random class
    let evidence_class = if rng.random::<f64>() < spec.distractor_rate {
        rng.random_range(0..spec.num_classes)
    } else {
        label
    };
    let mut tokens: Vec<String> = Vec::with_capacity(spec.text_len);
    let roll = rng.random::<f64>();
    let mut acc = 0.0;
    let mut evidence = spec.evidence_probs.len() - 1;
    for (count, p) in spec.evidence_probs.iter().enumerate() {
        acc += p;
        if roll < acc {
            evidence = count;
            break;
        }
    }
    for _ in 0..evidence.min(spec.text_len - 1) {
        if rng.random::<f64>() < spec.shared_signal {
            let j = rng.random_range(0..spec.shared_types_per_class);
            tokens.push(format!("c{evidence_class}s{j}"));
        } else {
            let j = rng.random_range(0..spec.private_types_per_cell);
            tokens.push(format!("c{evidence_class}d{domain}p{j}"));
        }
    }
    for _ in 0..2 {
        if rng.random::<f64>() < spec.domain_noise && tokens.len() < spec.text_len {
            let j = rng.random_range(0..FLAVOR_TYPES_PER_DOMAIN);
            tokens.push(format!("d{domain}f{j}"));
        }
    }
    while tokens.len() < spec.text_len {
        let j = rng.random_range(0..NEUTRAL_TYPES);
        tokens.push(format!("w{j}"));
    }
    tokens.shuffle(rng);
    tokens.join(" ")
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization
// ---------------------------------------------------------------------------

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const RESERVED: usize = 4;

/// Whitespace token -> id map with fixed reserved ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Frequency-ranked vocabulary over whitespace tokens, capped at
    /// `budget` total ids (including the 4 reserved). Ties break by token
    /// string so construction is a pure function of the corpus.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, budget: usize) -> Result<Vocab> {
        if budget < RESERVED + 1 {
            return Err(DataError::Invalid(format!(
                "vocab budget {budget} leaves no room beyond reserved ids"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for token in text.split_whitespace() {
                *counts.entry(token.to_string()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(budget - RESERVED);
        let token_to_id = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (tok, _))| (tok, (i + RESERVED) as u32))
            .collect();
        Ok(Vocab { token_to_id })
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always exist
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    /// `[CLS] text [SEP]` (pairs: `[CLS] text [SEP] text2 [SEP]`), truncated
    /// to `max_len` while keeping [CLS] and a terminal [SEP].
    pub fn encode(&self, text: &str, text2: Option<&str>, max_len: usize) -> Vec<u32> {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let mut ids = vec![CLS_ID];
        for tok in text.split_whitespace() {
            ids.push(self.id(tok));
        }
        ids.push(SEP_ID);
        if let Some(t2) = text2 {
            for tok in t2.split_whitespace() {
                ids.push(self.id(tok));
            }
            ids.push(SEP_ID);
        }
        if ids.len() > max_len {
            ids.truncate(max_len - 1);
            ids.push(SEP_ID);
        }
        ids
    }
}

// ---------------------------------------------------------------------------
// Instrumented corpus access
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Access {
    Text,
    Label,
}

/// What was read, by whom: (context, domain, split, kind).
pub type AccessEntry = (String, String, Split, Access);

#[derive(Debug, Default, Clone)]
pub struct AccessLog {
    pub entries: BTreeSet<AccessEntry>,
}

impl AccessLog {
    pub fn record(&mut self, ctx: &str, domain: &str, split: Split, access: Access) {
        self.entries
            .insert((ctx.to_string(), domain.to_string(), split, access));
    }
}

/// Read-only corpus collection whose accessors record provenance.
///
/// Derived stores (e.g. few-shot subsamples) share the parent's log.
#[derive(Clone)]
pub struct CorpusStore {
    domains: Rc<Vec<DomainCorpus>>,
    log: Rc<RefCell<AccessLog>>,
}

impl CorpusStore {
    pub fn new(domains: Vec<DomainCorpus>) -> Self {
        CorpusStore {
            domains: Rc::new(domains),
            log: Rc::new(RefCell::new(AccessLog::default())),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.domain.clone()).collect()
    }

    pub fn domain_name(&self, idx: usize) -> &str {
        &self.domains[idx].domain
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.domain == name)
    }

    pub fn split_len(&self, domain: usize, split: Split) -> usize {
        self.domains[domain].split(split).len()
    }

    /// Examples with label access; records both Text and Label reads.
    pub fn examples_labeled(&self, ctx: &str, domain: usize, split: Split) -> &[Example] {
        let mut log = self.log.borrow_mut();
        let name = &self.domains[domain].domain;
        log.record(ctx, name, split, Access::Text);
        log.record(ctx, name, split, Access::Label);
        self.domains[domain].split(split)
    }

    /// Text-only access; the caller must not read labels from the result.
    pub fn examples_text_only(&self, ctx: &str, domain: usize, split: Split) -> &[Example] {
        self.log.borrow_mut().record(
            ctx,
            &self.domains[domain].domain,
            split,
            Access::Text,
        );
        self.domains[domain].split(split)
    }

    pub fn log(&self) -> Ref<'_, AccessLog> {
        self.log.borrow()
    }

    /// New store with `domain`'s train split subsampled, sharing this log.
    pub fn with_subsampled_train(
        &self,
        domain: usize,
        rate: f64,
        seed: u64,
    ) -> Result<CorpusStore> {
        let mut domains: Vec<DomainCorpus> = (*self.domains).clone();
        domains[domain] = subsample(&domains[domain], rate, seed)?;
        Ok(CorpusStore {
            domains: Rc::new(domains),
            log: Rc::clone(&self.log),
        })
    }
}

/// Class-stratified subsample of the train split; dev/test are untouched.
///
/// Takes ceil(rate * |train|) examples, allocating across classes by largest
/// remainder so ratios are preserved within one example per class.
pub fn subsample(corpus: &DomainCorpus, rate: f64, seed: u64) -> Result<DomainCorpus> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(DataError::Invalid(format!("rate {rate} outside (0, 1]")));
    }
    if rate == 1.0 {
        return Ok(corpus.clone());
    }
    let total = corpus.train.len();
    let target = (rate * total as f64).ceil() as usize;
    let num_classes = corpus.train.iter().map(|e| e.label + 1).max().unwrap_or(1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in corpus.train.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    // largest-remainder allocation of `target` across classes
    let mut quotas: Vec<usize> = Vec::with_capacity(num_classes);
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(num_classes);
    let mut assigned = 0usize;
    for (class, members) in by_class.iter().enumerate() {
        let exact = target as f64 * members.len() as f64 / total as f64;
        let base = exact.floor() as usize;
        quotas.push(base.min(members.len()));
        assigned += quotas[class];
        remainders.push((exact - base as f64, class));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut i = 0;
    while assigned < target && i < remainders.len() {
        let class = remainders[i].1;
        if quotas[class] < by_class[class].len() {
            quotas[class] += 1;
            assigned += 1;
        }
        i += 1;
    }
    let mut rng = seeded_rng(seed, &format!("subsample/{}", corpus.domain));
    let mut selected: Vec<usize> = Vec::with_capacity(target);
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if quotas[class] == 0 {
            return Err(DataError::EmptyClass { class, rate });
        }
        let mut pool = members.clone();
        pool.shuffle(&mut rng);
        selected.extend(pool.into_iter().take(quotas[class]));
    }
    selected.sort_unstable();
    Ok(DomainCorpus {
        domain: corpus.domain.clone(),
        train: selected.iter().map(|&i| corpus.train[i].clone()).collect(),
        dev: corpus.dev.clone(),
        test: corpus.test.clone(),
    })
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One mini-batch of encoded sequences, padded to a common width.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Token ids, layout [B * seq_len].
    pub token_ids: Vec<u32>,
    pub seq_len: usize,
    /// 1.0 on real tokens, 0.0 on padding; layout [B * seq_len].
    pub mask: Vec<f64>,
    /// Class labels; empty when the batch was assembled text-only.
    pub class_labels: Vec<usize>,
    /// True domain label d per sample.
    pub domain_labels: Vec<usize>,
    /// In-batch shuffled domain labels z (equals d where corruption is
    /// impossible, e.g. single-domain batches).
    pub corrupted_domains: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    WithLabels,
    /// Class labels are neither read nor stored (zero-shot distillation).
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptMode {
    /// z from a derangement-preferred in-batch shuffle of d.
    Shuffle,
    /// z = d (baselines and evaluation).
    Off,
}

/// Options for one epoch of batch assembly.
pub struct BatchOptions<'a> {
    pub ctx: &'a str,
    /// Domain indices to draw from; one entry gives single-domain batches.
    pub domains: &'a [usize],
    pub split: Split,
    pub batch_size: usize,
    pub pad_to: usize,
    pub label_mode: LabelMode,
    pub corrupt: CorruptMode,
    /// False keeps corpus order (evaluation, prototype building).
    pub shuffle: bool,
}

/// One shuffled epoch over the given domains, chunked into batches.
///
/// Every example appears exactly once; the trailing partial batch is kept.
pub fn make_batches(
    store: &CorpusStore,
    vocab: &Vocab,
    opts: &BatchOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    if opts.batch_size == 0 {
        return Err(DataError::Invalid("batch_size must be positive".into()));
    }
    if opts.batch_size < 2 && opts.corrupt == CorruptMode::Shuffle && opts.domains.len() > 1 {
        return Err(DataError::Invalid(
            "domain corruption needs batch_size >= 2".into(),
        ));
    }
    let mut pool: Vec<(usize, usize)> = Vec::new(); // (domain index, example index)
    for &d in opts.domains {
        let n = store.split_len(d, opts.split);
        pool.extend((0..n).map(|i| (d, i)));
    }
    if opts.shuffle {
        pool.shuffle(rng);
    }
    let mut batches = Vec::with_capacity(pool.len().div_ceil(opts.batch_size));
    for chunk in pool.chunks(opts.batch_size) {
        let b = chunk.len();
        let mut batch = Batch {
            token_ids: vec![PAD_ID; b * opts.pad_to],
            seq_len: opts.pad_to,
            mask: vec![0.0; b * opts.pad_to],
            class_labels: Vec::new(),
            domain_labels: Vec::with_capacity(b),
            corrupted_domains: Vec::new(),
            ids: Vec::with_capacity(b),
        };
        for (row, &(d, i)) in chunk.iter().enumerate() {
            let ex = match opts.label_mode {
                LabelMode::WithLabels => {
                    let ex = &store.examples_labeled(opts.ctx, d, opts.split)[i];
                    batch.class_labels.push(ex.label);
                    ex
                }
                LabelMode::TextOnly => &store.examples_text_only(opts.ctx, d, opts.split)[i],
            };
            let ids = vocab.encode(&ex.text, ex.text2.as_deref(), opts.pad_to);
            batch.token_ids[row * opts.pad_to..row * opts.pad_to + ids.len()]
                .copy_from_slice(&ids);
            for t in 0..ids.len() {
                batch.mask[row * opts.pad_to + t] = 1.0;
            }
            batch.domain_labels.push(d);
            batch.ids.push(ex.id.clone());
        }
        batch.corrupted_domains = match opts.corrupt {
            CorruptMode::Shuffle => corrupt_domain_labels(&batch.domain_labels, rng),
            CorruptMode::Off => batch.domain_labels.clone(),
        };
        batches.push(batch);
    }
    Ok(batches)
}

/// Derangement-preferred in-batch shuffle of the domain labels.
///
/// Samples up to 10 random permutations and accepts the first with no fixed
/// point. If none shows up but a derangement of the multiset exists (max
/// multiplicity <= n/2), a rotation in sorted order builds one outright, so
/// the corrupted fraction is 0 whenever that is achievable; otherwise the
/// last sample is accepted (single-domain batches reduce to z = d).
pub fn corrupt_domain_labels(domains: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = domains.len();
    if n < 2 {
        return domains.to_vec();
    }
    let mut z = domains.to_vec();
    for _ in 0..10 {
        z.shuffle(rng);
        if z.iter().zip(domains.iter()).all(|(a, b)| a != b) {
            return z;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (domains[i], i));
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &d in domains {
        *counts.entry(d).or_insert(0) += 1;
    }
    let max_mult = counts.values().copied().max().unwrap_or(0);
    if max_mult * 2 <= n {
        let mut rotated = domains.to_vec();
        for (pos, &i) in order.iter().enumerate() {
            rotated[i] = domains[order[(pos + max_mult) % n]];
        }
        return rotated;
    }
    z
}
