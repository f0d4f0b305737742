//! Meta-teacher learning: prototype tables, prototype-score weighting, the
//! domain-corruption loss, and the cross-domain training loop, plus the
//! single-domain and mixed-domain baseline teachers.
//!
//! The prototype score of a sample blends its cosine similarity to the
//! in-domain class prototype with its similarity to the same class's
//! prototypes in every other domain, so the teacher weights samples that are
//! prototypical *across* domains. The corruption loss pushes the domain
//! sub-network toward predicting a deliberately false domain label, which
//! drives the transferable-knowledge vector toward domain invariance.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;


use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::data::{
    make_batches, Batch, BatchOptions, CorpusStore, CorruptMode, DataError, LabelMode, Split,
    Vocab,
};
use crate::encoder::{accuracy, argmax, DomainRows, EncoderConfig, EncoderModel, ForwardTrace, Mode};
use crate::tensor::{
    check_finite, cosine_similarity, ensure_grads, seeded_rng, Adam, Tensor, TensorError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} in {context}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        context: String,
    },
    #[error("empty prototype cell: domain '{domain}', class {class}")]
    EmptyPrototypeCell { domain: String, class: usize },
    #[error("no prototype score for example '{id}'")]
    MissingScore { id: String },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Prototype table
// ---------------------------------------------------------------------------

/// Per-(domain, class) prototype vectors and per-example prototype scores.
///
/// Prototypes are arithmetic means of pooled train vectors. Scores follow
/// the in-domain/out-of-domain cosine blend and are clamped to
/// [clamp_floor, 1]: raw cosines can be negative, and a negative weight on
/// the classification loss would reward misclassifying the sample.
#[derive(Debug, Clone)]
pub struct PrototypeTable {
    pub alpha: f64,
    /// Identifies the encoder state the pooled vectors came from.
    pub source: String,
    pub domains: Vec<String>,
    pub clamp_floor: f64,
    /// [domain][class] -> prototype vector.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// Example id -> clamped prototype score.
    pub scores: HashMap<String, f64>,
}

impl PrototypeTable {
    /// Prototype score of a pooled vector for (domain k, class m), before
    /// clamping: alpha * cos(p[k][m], h) + (1-alpha)/(K-1) * sum over other
    /// domains' cos(p[k'][m], h). A single-domain table reduces to the
    /// in-domain cosine.
    pub fn raw_score(&self, pooled: &[f64], domain: usize, class: usize) -> f64 {
        let k = self.prototypes.len();
        let own = cosine_similarity(&self.prototypes[domain][class], pooled);
        if k == 1 {
            return own;
        }
        let mut cross = 0.0;
        for (other, protos) in self.prototypes.iter().enumerate() {
            if other != domain {
                cross += cosine_similarity(&protos[class], pooled);
            }
        }
        self.alpha * own + (1.0 - self.alpha) / (k as f64 - 1.0) * cross
    }

    pub fn score(&self, pooled: &[f64], domain: usize, class: usize) -> f64 {
        self.raw_score(pooled, domain, class).clamp(self.clamp_floor, 1.0)
    }

    /// Clamped scores for a batch, by example id.
    pub fn scores_for(&self, ids: &[String]) -> Result<Vec<f64>> {
        ids.iter()
            .map(|id| {
                self.scores
                    .get(id)
                    .copied()
                    .ok_or_else(|| TrainError::MissingScore { id: id.clone() })
            })
            .collect()
    }

    /// Mean clamped score over all scored examples (zero-shot fallback).
    pub fn mean_score(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.values().sum::<f64>() / self.scores.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    alpha: f64,
    source: String,
    clamp_floor: f64,
    prototypes: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    scores: BTreeMap<String, f64>,
}

impl PrototypeTable {
    pub fn to_json(&self) -> serde_json::Value {
        let mut prototypes = BTreeMap::new();
        for (k, per_class) in self.prototypes.iter().enumerate() {
            let mut classes = BTreeMap::new();
            for (m, proto) in per_class.iter().enumerate() {
                classes.insert(m.to_string(), proto.clone());
            }
            prototypes.insert(self.domains[k].clone(), classes);
        }
        serde_json::to_value(TableFile {
            alpha: self.alpha,
            source: self.source.clone(),
            clamp_floor: self.clamp_floor,
            prototypes,
            scores: self.scores.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        })
        .expect("prototype table serialization")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: TableFile = serde_json::from_value(value)
            .map_err(|e| TrainError::Invalid(format!("prototype table: {e}")))?;
        let domains: Vec<String> = file.prototypes.keys().cloned().collect();
        let mut prototypes = Vec::with_capacity(domains.len());
        for d in &domains {
            let per_class = &file.prototypes[d];
            let mut classes = vec![Vec::new(); per_class.len()];
            for (m, proto) in per_class {
                let idx: usize = m
                    .parse()
                    .map_err(|_| TrainError::Invalid(format!("bad class key '{m}'")))?;
                classes[idx] = proto.clone();
            }
            prototypes.push(classes);
        }
        Ok(PrototypeTable {
            alpha: file.alpha,
            source: file.source,
            domains,
            clamp_floor: file.clamp_floor,
            prototypes,
            scores: file.scores.into_iter().collect(),
        })
    }
}

/// Domain rows for a single-domain batch: the model's own roster index when
/// it has one, the mean embedding otherwise (domains the model never saw).
fn rows_for(model_domain: Option<usize>, len: usize) -> ResolvedRows {
    match model_domain {
        Some(idx) => ResolvedRows::Indices(vec![idx; len]),
        None => ResolvedRows::Mean,
    }
}

/// Pooled train vectors of one domain, in corpus order: (id, label, h(X)).
///
/// Runs the encoder in eval mode; this is also what the independent oracle
/// in the tests recomputes prototypes from. `model_domain` is the domain's
/// index in the model's own roster.
pub fn pooled_train_vectors(
    model: &EncoderModel,
    store: &CorpusStore,
    ctx: &str,
    domain: usize,
    model_domain: Option<usize>,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Vec<(String, usize, Vec<f64>)>> {
    let mut rng = seeded_rng(0, "pooled-vectors"); // unused: no shuffle, eval mode
    let batches = make_batches(
        store,
        vocab,
        &BatchOptions {
            ctx,
            domains: &[domain],
            split: Split::Train,
            batch_size,
            pad_to: model.config.max_seq_len,
            label_mode: LabelMode::WithLabels,
            corrupt: CorruptMode::Off,
            shuffle: false,
        },
        &mut rng,
    )?;
    let h = model.config.hidden_dim;
    let mut out = Vec::new();
    for batch in &batches {
        let rows = rows_for(model_domain, batch.len());
        let trace = model.encode(batch, rows.as_ref_rows(), Mode::Eval, &mut rng)?;
        let pooled = trace.pooled.data();
        for (i, id) in batch.ids.iter().enumerate() {
            out.push((
                id.clone(),
                batch.class_labels[i],
                pooled[i * h..(i + 1) * h].to_vec(),
            ));
        }
    }
    Ok(out)
}

/// Build per-(domain, class) prototypes from pooled train vectors.
///
/// Scores are not assigned yet; call [`assign_scores`] next. Errors if any
/// (domain, class) cell is empty.
pub fn build_prototypes(
    model: &EncoderModel,
    store: &CorpusStore,
    ctx: &str,
    domains: &[usize],
    vocab: &Vocab,
    batch_size: usize,
    alpha: f64,
    clamp_floor: f64,
    source: &str,
) -> Result<PrototypeTable> {
    let m = model.config.num_classes;
    let h = model.config.hidden_dim;
    let mut prototypes = Vec::with_capacity(domains.len());
    let mut names = Vec::with_capacity(domains.len());
    for (k, &d) in domains.iter().enumerate() {
        let mut sums = vec![vec![0.0; h]; m];
        let mut counts = vec![0usize; m];
        for (_, label, pooled) in
            pooled_train_vectors(model, store, ctx, d, Some(k), vocab, batch_size)?
        {
            counts[label] += 1;
            for (s, v) in sums[label].iter_mut().zip(pooled.iter()) {
                *s += v;
            }
        }
        for (class, count) in counts.iter().enumerate() {
            if *count == 0 {
                return Err(TrainError::EmptyPrototypeCell {
                    domain: store.domain_name(d).to_string(),
                    class,
                });
            }
            for s in sums[class].iter_mut() {
                *s /= *count as f64;
            }
        }
        prototypes.push(sums);
        names.push(store.domain_name(d).to_string());
    }
    Ok(PrototypeTable {
        alpha,
        source: source.to_string(),
        domains: names,
        clamp_floor,
        prototypes,
        scores: HashMap::new(),
    })
}

/// Compute and store a clamped prototype score for every train example of
/// the table's domains. `domains[i]` is the store index of `table.domains[i]`.
pub fn assign_scores(
    table: &mut PrototypeTable,
    model: &EncoderModel,
    store: &CorpusStore,
    ctx: &str,
    domains: &[usize],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<()> {
    table.scores.clear();
    for (k, &d) in domains.iter().enumerate() {
        for (id, label, pooled) in
            pooled_train_vectors(model, store, ctx, d, Some(k), vocab, batch_size)?
        {
            let t = table.score(&pooled, k, label);
            table.scores.insert(id, t);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Cross-entropy toward the deliberately false domain labels z, averaged
/// over the rows where z differs from the true label d.
///
/// Rows with z == d (single-domain batches) carry no corruption signal and
/// are excluded; if every row is excluded the loss is a constant 0 and the
/// returned count is 0.
pub fn domain_corruption_loss(
    trace: &ForwardTrace,
    true_domains: &[usize],
    corrupted_domains: &[usize],
) -> Result<(Tensor, usize)> {
    let rows = trace.domain_logits.cross_entropy_rows(corrupted_domains)?;
    let included: Vec<f64> = true_domains
        .iter()
        .zip(corrupted_domains.iter())
        .map(|(d, z)| if d != z { 1.0 } else { 0.0 })
        .collect();
    let count = included.iter().filter(|v| **v > 0.0).count();
    if count == 0 {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let weights: Vec<f64> = included.iter().map(|v| v / count as f64).collect();
    Ok((rows.dot_const(&weights)?, count))
}

/// Total teacher loss over one batch: the per-sample mean of
/// `t_i * CE(class_logits_i, y_i) + gamma1 * DC_i`, where DC_i is the
/// corruption cross-entropy on rows with z != d and 0 elsewhere.
pub fn teacher_loss(
    batch: &Batch,
    trace: &ForwardTrace,
    scores: &[f64],
    gamma1: f64,
) -> Result<Tensor> {
    let b = batch.len();
    assert_eq!(scores.len(), b, "one prototype score per sample");
    let ce_rows = trace.class_logits.cross_entropy_rows(&batch.class_labels)?;
    let ce_weights: Vec<f64> = scores.iter().map(|t| t / b as f64).collect();
    let mut loss = ce_rows.dot_const(&ce_weights)?;
    if gamma1 > 0.0 {
        let dc_rows = trace
            .domain_logits
            .cross_entropy_rows(&batch.corrupted_domains)?;
        let dc_weights: Vec<f64> = batch
            .domain_labels
            .iter()
            .zip(batch.corrupted_domains.iter())
            .map(|(d, z)| if d != z { gamma1 / b as f64 } else { 0.0 })
            .collect();
        loss = loss.add(&dc_rows.dot_const(&dc_weights)?)?;
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Blend between in-domain and out-of-domain prototype cosines.
    pub alpha: f64,
    /// Weight of the domain-corruption loss.
    pub gamma1: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Lower clamp for prototype scores.
    pub clamp_floor: f64,
    /// Recompute the table as the encoder drifts instead of freezing the
    /// init-time table.
    #[serde(default)]
    pub refresh_prototypes_every_epoch: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            alpha: 0.5,
            gamma1: 0.2,
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            clamp_floor: 0.05,
            refresh_prototypes_every_epoch: false,
        }
    }
}

impl TeacherConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.gamma1 < 0.0 {
            return Err(TrainError::Invalid(format!("gamma1 {} negative", self.gamma1)));
        }
        Ok(())
    }
}

/// Per-epoch, per-domain dev accuracy.
pub type DevCurve = Vec<Vec<(String, f64)>>;

pub struct TeacherArtifacts {
    pub bundle: ModelBundle,
    pub dev_accuracy: DevCurve,
}

/// Baseline modes: plain cross-entropy fine-tuning, no prototype weighting,
/// no corruption loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Train on one domain only.
    Single(usize),
    /// Train on the union of all given domains.
    Mix,
}

/// Train the meta-teacher over all given domains.
///
/// The prototype table is computed once from the freshly initialized encoder
/// and frozen (a stationary objective), unless
/// `refresh_prototypes_every_epoch` is set.
pub fn train_meta_teacher(
    store: &CorpusStore,
    domains: &[usize],
    vocab: &Vocab,
    encoder_config: EncoderConfig,
    cfg: &TeacherConfig,
    ctx: &str,
) -> Result<TeacherArtifacts> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(TrainError::Invalid(
            "meta-teacher needs at least 2 domains".into(),
        ));
    }
    let model = EncoderModel::new(encoder_config, cfg.seed)?;
    let mut table = build_prototypes(
        &model,
        store,
        ctx,
        domains,
        vocab,
        cfg.batch_size,
        cfg.alpha,
        cfg.clamp_floor,
        &format!("init-seed-{}", cfg.seed),
    )?;
    assign_scores(&mut table, &model, store, ctx, domains, vocab, cfg.batch_size)?;
    let dev_accuracy = run_training(
        &model,
        store,
        domains,
        vocab,
        TrainObjective::Meta {
            table: &mut table,
            gamma1: cfg.gamma1,
            refresh: cfg.refresh_prototypes_every_epoch,
            alpha: cfg.alpha,
            clamp_floor: cfg.clamp_floor,
        },
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.seed,
        ctx,
    )?;
    Ok(TeacherArtifacts {
        bundle: ModelBundle {
            model,
            domains: domains.iter().map(|&d| store.domain_name(d).to_string()).collect(),
            vocab: vocab.clone(),
            table: Some(table),
        },
        dev_accuracy,
    })
}

/// Train a baseline teacher with plain cross-entropy.
pub fn train_baseline_teacher(
    store: &CorpusStore,
    domains: &[usize],
    mode: BaselineMode,
    vocab: &Vocab,
    encoder_config: EncoderConfig,
    cfg: &TeacherConfig,
    ctx: &str,
) -> Result<TeacherArtifacts> {
    cfg.validate()?;
    let train_domains: Vec<usize> = match mode {
        BaselineMode::Single(k) => vec![k],
        BaselineMode::Mix => domains.to_vec(),
    };
    if train_domains.is_empty() {
        return Err(TrainError::Invalid("no training domains".into()));
    }
    let model = EncoderModel::new(encoder_config, cfg.seed)?;
    let dev_accuracy = run_training(
        &model,
        store,
        &train_domains,
        vocab,
        TrainObjective::PlainCrossEntropy,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.seed,
        ctx,
    )?;
    Ok(TeacherArtifacts {
        bundle: ModelBundle {
            model,
            domains: train_domains
                .iter()
                .map(|&d| store.domain_name(d).to_string())
                .collect(),
            vocab: vocab.clone(),
            table: None,
        },
        dev_accuracy,
    })
}

enum TrainObjective<'a> {
    Meta {
        table: &'a mut PrototypeTable,
        gamma1: f64,
        refresh: bool,
        alpha: f64,
        clamp_floor: f64,
    },
    PlainCrossEntropy,
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    model: &EncoderModel,
    store: &CorpusStore,
    domains: &[usize],
    vocab: &Vocab,
    mut objective: TrainObjective,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    ctx: &str,
) -> Result<DevCurve> {
    let params = model.parameters();
    let mut optimizer = Adam::new(learning_rate);
    let mut batch_rng = seeded_rng(seed, &format!("batches/{ctx}"));
    let mut dropout_rng = seeded_rng(seed, &format!("dropout/{ctx}"));
    let corrupt = match objective {
        TrainObjective::Meta { gamma1, .. } if gamma1 > 0.0 => CorruptMode::Shuffle,
        _ => CorruptMode::Off,
    };
    let mut dev_curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        if let TrainObjective::Meta {
            ref mut table,
            refresh: true,
            alpha,
            clamp_floor,
            ..
        } = objective
        {
            if epoch > 0 {
                **table = build_prototypes(
                    model,
                    store,
                    ctx,
                    domains,
                    vocab,
                    batch_size,
                    alpha,
                    clamp_floor,
                    &format!("epoch-{epoch}"),
                )?;
                assign_scores(table, model, store, ctx, domains, vocab, batch_size)?;
            }
        }
        let mut batches = make_batches(
            store,
            vocab,
            &BatchOptions {
                ctx,
                domains,
                split: Split::Train,
                batch_size,
                pad_to: model.config.max_seq_len,
                label_mode: LabelMode::WithLabels,
                corrupt,
                shuffle: true,
            },
            &mut batch_rng,
        )?;
        // The model's domain-embedding rows are indexed by its own roster
        // (the order of `domains`), not by store indices.
        for batch in &mut batches {
            remap_domains(&mut batch.domain_labels, domains);
            remap_domains(&mut batch.corrupted_domains, domains);
        }
        for (batch_idx, batch) in batches.iter().enumerate() {
            let trace = model.encode(
                batch,
                DomainRows::PerSample(&batch.domain_labels),
                Mode::Train,
                &mut dropout_rng,
            )?;
            let loss = match &objective {
                TrainObjective::Meta { table, gamma1, .. } => {
                    let scores = table.scores_for(&batch.ids)?;
                    teacher_loss(batch, &trace, &scores, *gamma1)?
                }
                TrainObjective::PlainCrossEntropy => {
                    trace.class_logits.cross_entropy(&batch.class_labels)?
                }
            };
            if !loss.item().is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    context: ctx.to_string(),
                });
            }
            loss.backward()?;
            ensure_grads(&params);
            optimizer.step(&params)?;
        }
        check_finite(&params)?;
        let mut per_domain = Vec::with_capacity(domains.len());
        for (model_idx, &d) in domains.iter().enumerate() {
            let acc = evaluate_accuracy(
                model,
                store,
                &format!("eval:dev:{ctx}"),
                d,
                Some(model_idx),
                Split::Dev,
                vocab,
                batch_size,
            )?;
            per_domain.push((store.domain_name(d).to_string(), acc));
        }
        log::debug!("{ctx} epoch {epoch}: dev {per_domain:?}");
        dev_curve.push(per_domain);
    }
    Ok(dev_curve)
}

/// Rewrite store domain indices as positions within the model's roster.
fn remap_domains(labels: &mut [usize], roster: &[usize]) {
    for l in labels.iter_mut() {
        *l = roster
            .iter()
            .position(|d| d == l)
            .expect("batch domain outside the training roster");
    }
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

/// Classification accuracy of a model on one split of one domain.
/// `model_domain` is the domain's index in the model's own roster (None for
/// domains the model never saw).
pub fn evaluate_accuracy(
    model: &EncoderModel,
    store: &CorpusStore,
    ctx: &str,
    domain: usize,
    model_domain: Option<usize>,
    split: Split,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = seeded_rng(0, "eval");
    let batches = make_batches(
        store,
        vocab,
        &BatchOptions {
            ctx,
            domains: &[domain],
            split,
            batch_size,
            pad_to: model.config.max_seq_len,
            label_mode: LabelMode::WithLabels,
            corrupt: CorruptMode::Off,
            shuffle: false,
        },
        &mut rng,
    )?;
    let mut correct = 0.0;
    let mut total = 0usize;
    for batch in &batches {
        let rows = rows_for(model_domain, batch.len());
        let trace = model.encode(batch, rows.as_ref_rows(), Mode::Eval, &mut rng)?;
        correct += accuracy(&trace.class_logits, &batch.class_labels) * batch.len() as f64;
        total += batch.len();
    }
    Ok(correct / total as f64)
}

/// Accuracy of the domain sub-network classifier against true domain labels,
/// over the model's own training roster (`domains` in roster order).
pub fn domain_classifier_accuracy(
    model: &EncoderModel,
    store: &CorpusStore,
    ctx: &str,
    domains: &[usize],
    split: Split,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = seeded_rng(0, "eval-domain");
    let mut batches = make_batches(
        store,
        vocab,
        &BatchOptions {
            ctx,
            domains,
            split,
            batch_size,
            pad_to: model.config.max_seq_len,
            label_mode: LabelMode::WithLabels,
            corrupt: CorruptMode::Off,
            shuffle: false,
        },
        &mut rng,
    )?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in &mut batches {
        remap_domains(&mut batch.domain_labels, domains);
        let trace = model.encode(
            batch,
            DomainRows::PerSample(&batch.domain_labels),
            Mode::Eval,
            &mut rng,
        )?;
        let logits = trace.domain_logits.data();
        let k = model.config.num_domains;
        for (i, &d) in batch.domain_labels.iter().enumerate() {
            if argmax(&logits[i * k..(i + 1) * k]) == d {
                correct += 1;
            }
        }
        total += batch.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Per-example class logits of a model on one split (for ensembling).
pub struct PredictedExample {
    pub id: String,
    pub logits: Vec<f64>,
    pub label: usize,
}

pub fn predict_logits(
    model: &EncoderModel,
    store: &CorpusStore,
    ctx: &str,
    domain: usize,
    model_domain: Option<usize>,
    split: Split,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Vec<PredictedExample>> {
    let mut rng = seeded_rng(0, "predict");
    let batches = make_batches(
        store,
        vocab,
        &BatchOptions {
            ctx,
            domains: &[domain],
            split,
            batch_size,
            pad_to: model.config.max_seq_len,
            label_mode: LabelMode::WithLabels,
            corrupt: CorruptMode::Off,
            shuffle: false,
        },
        &mut rng,
    )?;
    let m = model.config.num_classes;
    let mut out = Vec::new();
    for batch in &batches {
        let rows = rows_for(model_domain, batch.len());
        let trace = model.encode(batch, rows.as_ref_rows(), Mode::Eval, &mut rng)?;
        let logits = trace.class_logits.data();
        for (i, id) in batch.ids.iter().enumerate() {
            out.push(PredictedExample {
                id: id.clone(),
                logits: logits[i * m..(i + 1) * m].to_vec(),
                label: batch.class_labels[i],
            });
        }
    }
    Ok(out)
}

/// Domain rows resolved against a model's own roster.
pub enum ResolvedRows {
    Indices(Vec<usize>),
    Mean,
}

impl ResolvedRows {
    pub fn as_ref_rows(&self) -> DomainRows<'_> {
        match self {
            ResolvedRows::Indices(v) => DomainRows::PerSample(v),
            ResolvedRows::Mean => DomainRows::MeanEmbedding,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint bundles
// ---------------------------------------------------------------------------

/// A model plus everything needed to run it: its domain roster, vocabulary,
/// and (for meta-teachers) the prototype table.
pub struct ModelBundle {
    pub model: EncoderModel,
    /// Domain names this model was trained on, in its own index order.
    pub domains: Vec<String>,
    pub vocab: Vocab,
    pub table: Option<PrototypeTable>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    encoder: EncoderConfig,
    domains: Vec<String>,
    vocab: Vocab,
    has_prototype_table: bool,
}

impl ModelBundle {
    /// Index of a domain name in this model's own roster.
    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    /// Domain rows for running this model on samples from `domain_name`;
    /// falls back to the mean embedding for domains outside the roster.
    pub fn resolved_rows(&self, domain_name: &str, batch_len: usize) -> ResolvedRows {
        rows_for(self.domain_index(domain_name), batch_len)
    }

    /// Accuracy on one split of a store domain, resolving the roster by name.
    pub fn accuracy_on(
        &self,
        store: &CorpusStore,
        ctx: &str,
        domain: usize,
        split: Split,
        batch_size: usize,
    ) -> Result<f64> {
        evaluate_accuracy(
            &self.model,
            store,
            ctx,
            domain,
            self.domain_index(store.domain_name(domain)),
            split,
            &self.vocab,
            batch_size,
        )
    }

    /// Write the checkpoint; the prototype table, when present, goes to a
    /// JSON sidecar `<path>.prototypes.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = BundleManifest {
            encoder: self.model.config.clone(),
            domains: self.domains.clone(),
            vocab: self.vocab.clone(),
            has_prototype_table: self.table.is_some(),
        };
        checkpoint::save_params(
            path,
            serde_json::to_value(&manifest)
                .map_err(|e| TrainError::Invalid(format!("manifest: {e}")))?,
            &self.model.parameters(),
        )?;
        if let Some(table) = &self.table {
            let sidecar = sidecar_path(path);
            std::fs::write(
                &sidecar,
                serde_json::to_string_pretty(&table.to_json())
                    .map_err(|e| TrainError::Invalid(format!("table: {e}")))?,
            )
            .map_err(|e| {
                TrainError::Checkpoint(CheckpointError::Io {
                    path: sidecar.display().to_string(),
                    source: e,
                })
            })?;
        }
        Ok(())
    }

    /// Load a checkpoint saved by [`ModelBundle::save`]. `trainable` controls
    /// whether the parameters track gradients (teachers are loaded frozen).
    pub fn load(path: &Path, trainable: bool) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let manifest: BundleManifest = serde_json::from_value(loaded.model)
            .map_err(|e| TrainError::Invalid(format!("manifest: {e}")))?;
        let model = EncoderModel::new_with_trainable(manifest.encoder, 0, trainable)?;
        for param in model.parameters() {
            let (shape, data) = loaded.tensors.get(&param.name).ok_or_else(|| {
                TrainError::Invalid(format!("checkpoint missing tensor '{}'", param.name))
            })?;
            if shape != param.tensor.shape() {
                return Err(TrainError::Invalid(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    param.name,
                    shape,
                    param.tensor.shape()
                )));
            }
            param.tensor.set_data(data);
        }
        let table = if manifest.has_prototype_table {
            let sidecar = sidecar_path(path);
            let text = std::fs::read_to_string(&sidecar).map_err(|e| {
                TrainError::Checkpoint(CheckpointError::Io {
                    path: sidecar.display().to_string(),
                    source: e,
                })
            })?;
            Some(PrototypeTable::from_json(
                serde_json::from_str(&text)
                    .map_err(|e| TrainError::Invalid(format!("table: {e}")))?,
            )?)
        } else {
            None
        };
        Ok(ModelBundle {
            model,
            domains: manifest.domains,
            vocab: manifest.vocab,
            table,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".prototypes.json");
    std::path::PathBuf::from(os)
}
