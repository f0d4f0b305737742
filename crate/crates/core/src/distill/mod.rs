//! Layer-mapped knowledge distillation and its baselines.
//!
//! The full objective distills five things from a frozen teacher into a
//! per-domain student: input embeddings, mapped hidden states, attention
//! score matrices, softened predictions, and the transferable-knowledge
//! vector (through a learned projection). Every per-sample term is weighted
//! by the teacher's *domain expertise* on that sample — a function of its
//! prototype score and whether the teacher classifies it correctly — while
//! the transferable-knowledge term enters once per batch, scaled by gamma2.
//!
//! Distillation runs in two phases: intermediate-layer matching first
//! (embeddings, hidden states, attention, transferable knowledge), then
//! prediction-layer matching on softened logits. The TinyBERT-style baseline
//! is the same machinery with uniform weights and no transferable-knowledge
//! term; the multi-teacher baseline replaces the phase-2 target with the
//! mean of all teachers' softened output distributions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{
    make_batches, Batch, BatchOptions, CorpusStore, CorruptMode, LabelMode, Split,
};
use crate::encoder::{argmax, EncoderConfig, EncoderModel, Mode};
use crate::teacher::{ModelBundle, PrototypeTable, TrainError};
use crate::tensor::{
    check_finite, ensure_grads, row_softmax, seeded_rng, Adam, Parameter, Tensor,
};

mod losses;
pub use losses::{
    expertise_weight, intermediate_losses, meta_distill_intermediate_loss,
    meta_distill_prediction_loss, prediction_loss, prediction_loss_rows, tk_loss, ErrSquared,
    TeacherTargets,
};

type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Layer mapping and plans
// ---------------------------------------------------------------------------

/// Uniform-stride teacher-to-student layer map (1-indexed): student layer j
/// learns from teacher layer j * (L_T / L_S). (12, 4) gives 3->1, 6->2,
/// 9->3, 12->4.
pub fn map_layers(l_teacher: usize, l_student: usize) -> Result<Vec<(usize, usize)>> {
    if l_student == 0 || l_teacher < l_student {
        return Err(TrainError::Invalid(format!(
            "cannot map {l_teacher} teacher layers onto {l_student} student layers"
        )));
    }
    if l_teacher % l_student != 0 {
        let valid: Vec<usize> = (1..=l_teacher).filter(|d| l_teacher % d == 0).collect();
        return Err(TrainError::Invalid(format!(
            "{l_teacher} teacher layers are not divisible by {l_student} student layers; \
             valid student depths: {valid:?}"
        )));
    }
    let stride = l_teacher / l_student;
    Ok((1..=l_student).map(|j| (j * stride, j)).collect())
}

/// Layer mapping, loss-term weights, and temperature for one distillation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillPlan {
    /// (teacher layer, student layer) pairs, 1-indexed, strictly increasing
    /// on both sides, covering every student layer exactly once.
    pub layer_map: Vec<(usize, usize)>,
    /// Softening temperature for prediction distillation (no T^2 rescaling).
    pub temperature: f64,
    /// Weight of the transferable-knowledge term.
    pub gamma2: f64,
}

impl DistillPlan {
    pub fn uniform(
        l_teacher: usize,
        l_student: usize,
        temperature: f64,
        gamma2: f64,
    ) -> Result<Self> {
        Ok(DistillPlan {
            layer_map: map_layers(l_teacher, l_student)?,
            temperature,
            gamma2,
        })
    }

    pub fn validate(&self, l_teacher: usize, l_student: usize) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(TrainError::Invalid(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.gamma2 < 0.0 {
            return Err(TrainError::Invalid(format!("gamma2 {} negative", self.gamma2)));
        }
        if self.layer_map.len() != l_student {
            return Err(TrainError::Invalid(format!(
                "layer map covers {} student layers, model has {l_student}",
                self.layer_map.len()
            )));
        }
        let mut expected_student = 1;
        let mut last_teacher = 0;
        for &(t, s) in &self.layer_map {
            if s != expected_student {
                return Err(TrainError::Invalid(format!(
                    "layer map must cover every student layer once in order, got student {s}"
                )));
            }
            if t <= last_teacher || t > l_teacher {
                return Err(TrainError::Invalid(format!(
                    "teacher layers must be strictly increasing and within 1..={l_teacher}"
                )));
            }
            expected_student += 1;
            last_teacher = t;
        }
        Ok(())
    }
}

/// The learnable projections of one distillation run: student width to
/// teacher width for the embedding and every mapped hidden state, and
/// teacher width to student width for the transferable-knowledge vector.
/// Trained during the intermediate phase only.
pub struct DistillProjections {
    pub embed: Parameter,        // [H_S, H_T]
    pub hidden: Vec<Parameter>,  // one per mapped pair, [H_S, H_T]
    pub tk: Parameter,           // [H_T, H_S]
}

impl DistillProjections {
    pub fn new(plan: &DistillPlan, h_student: usize, h_teacher: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "distill-projections");
        DistillProjections {
            embed: Parameter::randn("proj.embed", &[h_student, h_teacher], 0.02, true, &mut rng),
            hidden: plan
                .layer_map
                .iter()
                .map(|&(_, s)| {
                    Parameter::randn(
                        format!("proj.hidden{s}"),
                        &[h_student, h_teacher],
                        0.02,
                        true,
                        &mut rng,
                    )
                })
                .collect(),
            tk: Parameter::randn("proj.tk", &[h_teacher, h_student], 0.02, true, &mut rng),
        }
    }

    /// Identity projections for equal-width self-distillation checks.
    pub fn identity(plan: &DistillPlan, h: usize) -> Self {
        let eye = || {
            let mut data = vec![0.0; h * h];
            for i in 0..h {
                data[i * h + i] = 1.0;
            }
            data
        };
        DistillProjections {
            embed: Parameter::new("proj.embed", eye(), &[h, h], true),
            hidden: plan
                .layer_map
                .iter()
                .map(|&(_, s)| Parameter::new(format!("proj.hidden{s}"), eye(), &[h, h], true))
                .collect(),
            tk: Parameter::new("proj.tk", eye(), &[h, h], true),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.embed];
        out.extend(self.hidden.iter());
        out.push(&self.tk);
        out
    }
}

// ---------------------------------------------------------------------------
// Cached teacher supervision
// ---------------------------------------------------------------------------

/// One example's teacher-side supervision, at the batch pad width.
pub struct CachedTrace {
    pub embedding: Vec<f64>,       // [N * H_T]
    pub hidden: Vec<Vec<f64>>,     // per mapped pair, [N * H_T]
    pub attention: Vec<Vec<f64>>,  // per mapped pair, [A * N * N]
    pub transfer: Vec<f64>,        // [H_T]
    pub logits: Vec<f64>,          // [M]
}

/// Frozen-teacher traces for one (teacher, domain, split), keyed by example
/// id. The teacher runs in eval mode, so one pass per example suffices for
/// every epoch.
pub struct TeacherCache {
    pub traces: HashMap<String, CachedTrace>,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_classes: usize,
}

/// Run the teacher over a split once and record everything the distillation
/// losses will need. Reads text only; labels are never touched here.
pub fn cache_teacher_traces(
    teacher: &ModelBundle,
    store: &CorpusStore,
    ctx: &str,
    domain: usize,
    split: Split,
    plan: &DistillPlan,
    batch_size: usize,
) -> Result<TeacherCache> {
    let cfg = &teacher.model.config;
    let (n, h, a, m) = (cfg.max_seq_len, cfg.hidden_dim, cfg.num_heads, cfg.num_classes);
    let mut rng = seeded_rng(0, "teacher-cache");
    let batches = make_batches(
        store,
        &teacher.vocab,
        &BatchOptions {
            ctx,
            domains: &[domain],
            split,
            batch_size,
            pad_to: n,
            label_mode: LabelMode::TextOnly,
            corrupt: CorruptMode::Off,
            shuffle: false,
        },
        &mut rng,
    )?;
    let mut traces = HashMap::new();
    let domain_name = store.domain_name(domain).to_string();
    for batch in &batches {
        let rows = teacher.resolved_rows(&domain_name, batch.len());
        let trace = teacher
            .model
            .encode(batch, rows.as_ref_rows(), Mode::Eval, &mut rng)?;
        let emb = trace.embedding_out.data();
        let transfer = trace.transfer_vec.data();
        let logits = trace.class_logits.data();
        for (i, id) in batch.ids.iter().enumerate() {
            let hidden = plan
                .layer_map
                .iter()
                .map(|&(t, _)| {
                    trace.hidden_states[t - 1].data()[i * n * h..(i + 1) * n * h].to_vec()
                })
                .collect();
            let attention = plan
                .layer_map
                .iter()
                .map(|&(t, _)| {
                    trace.attention_scores[t - 1].data()[i * a * n * n..(i + 1) * a * n * n]
                        .to_vec()
                })
                .collect();
            traces.insert(
                id.clone(),
                CachedTrace {
                    embedding: emb[i * n * h..(i + 1) * n * h].to_vec(),
                    hidden,
                    attention,
                    transfer: transfer[i * h..(i + 1) * h].to_vec(),
                    logits: logits[i * m..(i + 1) * m].to_vec(),
                },
            );
        }
    }
    Ok(TeacherCache {
        traces,
        seq_len: n,
        hidden_dim: h,
        num_heads: a,
        num_classes: m,
    })
}

impl TeacherCache {
    /// Assemble the batch-shaped constant targets for a batch of ids.
    pub fn targets_for(&self, batch: &Batch, plan: &DistillPlan) -> Result<TeacherTargets> {
        let b = batch.len();
        let (n, h, a, m) = (self.seq_len, self.hidden_dim, self.num_heads, self.num_classes);
        if batch.seq_len != n {
            return Err(TrainError::Invalid(format!(
                "batch width {} does not match cached teacher width {n}",
                batch.seq_len
            )));
        }
        let mut embedding = vec![0.0; b * n * h];
        let mut hidden = vec![vec![0.0; b * n * h]; plan.layer_map.len()];
        let mut attention = vec![vec![0.0; b * a * n * n]; plan.layer_map.len()];
        let mut transfer = vec![0.0; b * h];
        let mut logits = vec![0.0; b * m];
        for (i, id) in batch.ids.iter().enumerate() {
            let cached = self
                .traces
                .get(id)
                .ok_or_else(|| TrainError::Invalid(format!("no cached trace for '{id}'")))?;
            embedding[i * n * h..(i + 1) * n * h].copy_from_slice(&cached.embedding);
            for (pair, data) in cached.hidden.iter().enumerate() {
                hidden[pair][i * n * h..(i + 1) * n * h].copy_from_slice(data);
            }
            for (pair, data) in cached.attention.iter().enumerate() {
                attention[pair][i * a * n * n..(i + 1) * a * n * n].copy_from_slice(data);
            }
            transfer[i * h..(i + 1) * h].copy_from_slice(&cached.transfer);
            logits[i * m..(i + 1) * m].copy_from_slice(&cached.logits);
        }
        Ok(TeacherTargets {
            embedding: Tensor::from_vec(embedding, &[b, n, h]),
            hidden: hidden
                .into_iter()
                .map(|d| Tensor::from_vec(d, &[b, n, h]))
                .collect(),
            attention: attention
                .into_iter()
                .map(|d| Tensor::from_vec(d, &[b, a, n, n]))
                .collect(),
            transfer: Tensor::from_vec(transfer, &[b, h]),
            logits,
        })
    }
}

// ---------------------------------------------------------------------------
// Expertise weights
// ---------------------------------------------------------------------------

/// How per-sample expertise weights are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertiseMode {
    /// lambda = (1 + t) / (exp(err^2) + 1), with t from the teacher's frozen
    /// prototype table and err from its cached prediction vs the gold label.
    Labeled(ErrSquared),
    /// No gold labels (zero-shot): t falls back to the mean prototype score
    /// over seen domains and err^2 = 0, so lambda = (1 + t_bar) / 2.
    TeacherOnly,
    /// Zero-shot comparison flag: t still falls back to the table mean (the
    /// held-out domain has no scores) but the error term uses gold labels.
    MeanScoreWithLabels(ErrSquared),
}

/// Per-example expertise weights for every cached example.
pub fn expertise_weights(
    cache: &TeacherCache,
    table: &PrototypeTable,
    labels: Option<&HashMap<String, usize>>,
    mode: ExpertiseMode,
) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::with_capacity(cache.traces.len());
    let labeled = |out: &mut HashMap<String, f64>,
                   err_mode: ErrSquared,
                   score: &dyn Fn(&str) -> Result<f64>|
     -> Result<()> {
        let labels = labels.ok_or_else(|| {
            TrainError::Invalid("labeled expertise weighting needs gold labels".into())
        })?;
        for (id, trace) in &cache.traces {
            let label = *labels
                .get(id)
                .ok_or_else(|| TrainError::Invalid(format!("no label for '{id}'")))?;
            let predicted = argmax(&trace.logits);
            out.insert(
                id.clone(),
                expertise_weight(score(id)?, predicted, label, err_mode),
            );
        }
        Ok(())
    };
    match mode {
        ExpertiseMode::Labeled(err_mode) => {
            labeled(&mut out, err_mode, &|id: &str| {
                table
                    .scores
                    .get(id)
                    .copied()
                    .ok_or_else(|| TrainError::MissingScore { id: id.to_string() })
            })?;
        }
        ExpertiseMode::MeanScoreWithLabels(err_mode) => {
            let t_bar = table.mean_score();
            labeled(&mut out, err_mode, &|_| Ok(t_bar))?;
        }
        ExpertiseMode::TeacherOnly => {
            let t_bar = table.mean_score();
            let lambda = (1.0 + t_bar) / 2.0;
            for id in cache.traces.keys() {
                out.insert(id.clone(), lambda);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Distillation runner
// ---------------------------------------------------------------------------

/// Which distillation objective to run.
pub enum DistillMethod {
    /// Intermediate + prediction losses, uniform weights, no
    /// transferable-knowledge term.
    TinyBert,
    /// Expertise-weighted losses plus the transferable-knowledge term.
    MetaDistill(ExpertiseMode),
    /// Phase 1 from the in-domain teacher (`teachers[0]`), phase 2 against
    /// the mean of all teachers' softened outputs. Uniform weights.
    MtnKd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Intermediate-phase epochs.
    pub int_epochs: usize,
    /// Prediction-phase epochs.
    pub pred_epochs: usize,
    pub int_lr: f64,
    pub pred_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            int_epochs: 10,
            pred_epochs: 3,
            int_lr: 1e-3,
            pred_lr: 5e-4,
            batch_size: 16,
            seed: 0,
        }
    }
}

pub struct StudentArtifacts {
    pub bundle: ModelBundle,
    /// Mean phase-1 loss per epoch.
    pub intermediate_losses: Vec<f64>,
    /// Mean phase-2 loss per epoch.
    pub prediction_losses: Vec<f64>,
    /// Per-teacher agreement with the ensemble target (multi-teacher mode).
    pub teacher_agreement: Option<Vec<f64>>,
}

/// Distill a fresh student for one domain from one or more frozen teachers.
///
/// `label_mode` controls whether gold labels may be read at all; zero-shot
/// runs pass `TextOnly` together with `ExpertiseMode::TeacherOnly`.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    teachers: &[&ModelBundle],
    method: &DistillMethod,
    student_config: EncoderConfig,
    plan: &DistillPlan,
    cfg: &DistillConfig,
    store: &CorpusStore,
    ctx: &str,
    domain: usize,
    label_mode: LabelMode,
) -> Result<StudentArtifacts> {
    let primary = *teachers.first().ok_or_else(|| {
        TrainError::Invalid("distillation needs at least one teacher".into())
    })?;
    match method {
        DistillMethod::MtnKd => {
            if teachers.len() < 2 {
                return Err(TrainError::Invalid(
                    "multi-teacher distillation needs at least 2 teachers".into(),
                ));
            }
        }
        _ => {
            if teachers.len() != 1 {
                return Err(TrainError::Invalid(
                    "single-teacher methods take exactly one teacher".into(),
                ));
            }
        }
    }
    let tcfg = &primary.model.config;
    for t in teachers {
        if t.model.config.num_classes != student_config.num_classes {
            return Err(TrainError::Invalid(format!(
                "teacher has {} classes, student {}",
                t.model.config.num_classes, student_config.num_classes
            )));
        }
    }
    if tcfg.num_heads != student_config.num_heads {
        return Err(TrainError::Invalid(format!(
            "attention distillation needs equal head counts (teacher {}, student {})",
            tcfg.num_heads, student_config.num_heads
        )));
    }
    if tcfg.max_seq_len != student_config.max_seq_len {
        return Err(TrainError::Invalid(
            "teacher and student must share max_seq_len".into(),
        ));
    }
    plan.validate(tcfg.num_layers, student_config.num_layers)?;

    let student = EncoderModel::new(student_config.clone(), cfg.seed)?;
    let projections = DistillProjections::new(
        plan,
        student_config.hidden_dim,
        tcfg.hidden_dim,
        cfg.seed,
    );
    distill_into(
        teachers, method, &student, &projections, plan, cfg, store, ctx, domain, label_mode,
    )
}

/// Same as [`distill`] but with a caller-provided student and projections
/// (self-distillation checks and warm starts).
#[allow(clippy::too_many_arguments)]
pub fn distill_into(
    teachers: &[&ModelBundle],
    method: &DistillMethod,
    student: &EncoderModel,
    projections: &DistillProjections,
    plan: &DistillPlan,
    cfg: &DistillConfig,
    store: &CorpusStore,
    ctx: &str,
    domain: usize,
    label_mode: LabelMode,
) -> Result<StudentArtifacts> {
    let primary = teachers[0];
    let domain_name = store.domain_name(domain).to_string();

    // one teacher pass per example covers every epoch
    let cache = cache_teacher_traces(primary, store, ctx, domain, Split::Train, plan, cfg.batch_size)?;
    let aux_logits: Vec<HashMap<String, Vec<f64>>> = teachers[1..]
        .iter()
        .map(|t| {
            let c = cache_teacher_traces(t, store, ctx, domain, Split::Train, plan, cfg.batch_size)?;
            Ok(c.traces
                .into_iter()
                .map(|(id, tr)| (id, tr.logits))
                .collect())
        })
        .collect::<Result<_>>()?;

    let lambdas: HashMap<String, f64> = match method {
        DistillMethod::MetaDistill(mode) => {
            let table = primary.table.as_ref().ok_or_else(|| {
                TrainError::Invalid("meta-distillation needs the teacher's prototype table".into())
            })?;
            let labels = match mode {
                ExpertiseMode::Labeled(_) | ExpertiseMode::MeanScoreWithLabels(_) => {
                    if label_mode != LabelMode::WithLabels {
                        return Err(TrainError::Invalid(
                            "labeled expertise weighting under a text-only corpus".into(),
                        ));
                    }
                    Some(
                        store
                            .examples_labeled(ctx, domain, Split::Train)
                            .iter()
                            .map(|e| (e.id.clone(), e.label))
                            .collect::<HashMap<_, _>>(),
                    )
                }
                ExpertiseMode::TeacherOnly => None,
            };
            expertise_weights(&cache, table, labels.as_ref(), *mode)?
        }
        _ => cache.traces.keys().map(|id| (id.clone(), 1.0)).collect(),
    };

    let use_tk = matches!(method, DistillMethod::MetaDistill(_)) && plan.gamma2 > 0.0;
    let mut phase1_params = student.body_and_subnet_params();
    if !use_tk {
        phase1_params = student
            .body_and_subnet_params()
            .into_iter()
            .filter(|p| !p.name.starts_with("subnet."))
            .collect();
    } else {
        // the domain classifier on top of the transfer vector is unused here
        phase1_params.retain(|p| !p.name.starts_with("subnet.classifier"));
    }
    let mut proj_params = vec![&projections.embed];
    proj_params.extend(projections.hidden.iter());
    if use_tk {
        proj_params.push(&projections.tk);
    }
    phase1_params.extend(proj_params);

    let student_rows: Vec<usize> = vec![store.domain_index(&domain_name).unwrap()];
    let student_domain = student_rows[0];

    let mut batch_rng = seeded_rng(cfg.seed, &format!("distill-batches/{ctx}"));
    let mut dropout_rng = seeded_rng(cfg.seed, &format!("distill-dropout/{ctx}"));
    let mut phase1_opt = Adam::new(cfg.int_lr);
    let mut intermediate_curve = Vec::with_capacity(cfg.int_epochs);
    for epoch in 0..cfg.int_epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let epoch_batches = make_batches(
            store,
            &primary.vocab,
            &BatchOptions {
                ctx,
                domains: &[domain],
                split: Split::Train,
                batch_size: cfg.batch_size,
                pad_to: student.config.max_seq_len,
                label_mode,
                corrupt: CorruptMode::Off,
                shuffle: true,
            },
            &mut batch_rng,
        )?;
        for (batch_idx, batch) in epoch_batches.iter().enumerate() {
            let targets = cache.targets_for(batch, plan)?;
            let rows = vec![student_domain; batch.len()];
            let trace = student.encode(
                batch,
                crate::encoder::DomainRows::PerSample(&rows),
                Mode::Train,
                &mut dropout_rng,
            )?;
            let (l_embd, l_hidn, l_attn) =
                intermediate_losses(&targets, &trace, plan, projections, &batch.mask)?;
            let weights = batch_lambdas(&lambdas, batch)?;
            let tk = if use_tk {
                Some(tk_loss(&targets.transfer, &projections.tk.tensor, &trace.transfer_vec)?)
            } else {
                None
            };
            let loss = meta_distill_intermediate_loss(
                &l_embd,
                &l_hidn,
                &l_attn,
                &weights,
                if use_tk { plan.gamma2 } else { 0.0 },
                tk.as_ref(),
            )?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    context: format!("{ctx} (intermediate)"),
                });
            }
            epoch_loss += value;
            batches += 1;
            loss.backward()?;
            ensure_grads(&phase1_params);
            phase1_opt.step(&phase1_params)?;
        }
        check_finite(&phase1_params)?;
        intermediate_curve.push(epoch_loss / batches.max(1) as f64);
    }

    // phase 2: prediction-layer distillation; projections stay frozen
    let phase2_params = student.body_and_classifier_params();
    let mut phase2_opt = Adam::new(cfg.pred_lr);
    let mut prediction_curve = Vec::with_capacity(cfg.pred_epochs);
    for epoch in 0..cfg.pred_epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let epoch_batches = make_batches(
            store,
            &primary.vocab,
            &BatchOptions {
                ctx,
                domains: &[domain],
                split: Split::Train,
                batch_size: cfg.batch_size,
                pad_to: student.config.max_seq_len,
                label_mode,
                corrupt: CorruptMode::Off,
                shuffle: true,
            },
            &mut batch_rng,
        )?;
        for (batch_idx, batch) in epoch_batches.iter().enumerate() {
            let target_probs = phase2_targets(batch, &cache, &aux_logits, plan.temperature)?;
            let rows = vec![student_domain; batch.len()];
            let trace = student.encode(
                batch,
                crate::encoder::DomainRows::PerSample(&rows),
                Mode::Train,
                &mut dropout_rng,
            )?;
            let l_pred = prediction_loss_rows(&trace.class_logits, &target_probs, plan.temperature)?;
            let weights = batch_lambdas(&lambdas, batch)?;
            let loss = meta_distill_prediction_loss(&l_pred, &weights)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    context: format!("{ctx} (prediction)"),
                });
            }
            epoch_loss += value;
            batches += 1;
            loss.backward()?;
            ensure_grads(&phase2_params);
            phase2_opt.step(&phase2_params)?;
        }
        check_finite(&phase2_params)?;
        prediction_curve.push(epoch_loss / batches.max(1) as f64);
    }

    let teacher_agreement = if matches!(method, DistillMethod::MtnKd) {
        Some(ensemble_agreement(teachers, &cache, &aux_logits, plan.temperature))
    } else {
        None
    };

    Ok(StudentArtifacts {
        bundle: ModelBundle {
            model: clone_model(student)?,
            domains: store.domain_names(),
            vocab: primary.vocab.clone(),
            table: None,
        },
        intermediate_losses: intermediate_curve,
        prediction_losses: prediction_curve,
        teacher_agreement,
    })
}

/// Per-sample weights aligned with a batch.
fn batch_lambdas(lambdas: &HashMap<String, f64>, batch: &Batch) -> Result<Vec<f64>> {
    batch
        .ids
        .iter()
        .map(|id| {
            lambdas
                .get(id)
                .copied()
                .ok_or_else(|| TrainError::Invalid(format!("no expertise weight for '{id}'")))
        })
        .collect()
}

/// Softened target rows for phase 2: the primary teacher's distribution, or
/// the mean over every teacher's softened distribution for MTN-KD.
fn phase2_targets(
    batch: &Batch,
    cache: &TeacherCache,
    aux_logits: &[HashMap<String, Vec<f64>>],
    temperature: f64,
) -> Result<Vec<f64>> {
    let m = cache.num_classes;
    let b = batch.len();
    let mut out = vec![0.0; b * m];
    let teachers = 1 + aux_logits.len();
    for (i, id) in batch.ids.iter().enumerate() {
        let mut acc = vec![0.0; m];
        let primary = &cache
            .traces
            .get(id)
            .ok_or_else(|| TrainError::Invalid(format!("no cached trace for '{id}'")))?
            .logits;
        add_softened(&mut acc, primary, temperature);
        for aux in aux_logits {
            let logits = aux
                .get(id)
                .ok_or_else(|| TrainError::Invalid(format!("no cached logits for '{id}'")))?;
            add_softened(&mut acc, logits, temperature);
        }
        for (o, v) in out[i * m..(i + 1) * m].iter_mut().zip(acc.iter()) {
            *o = v / teachers as f64;
        }
    }
    Ok(out)
}

fn add_softened(acc: &mut [f64], logits: &[f64], temperature: f64) {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let p = row_softmax(&scaled, 1, scaled.len());
    for (a, v) in acc.iter_mut().zip(p.iter()) {
        *a += v;
    }
}

/// Fraction of examples on which each teacher's argmax matches the ensemble
/// target's argmax.
fn ensemble_agreement(
    teachers: &[&ModelBundle],
    cache: &TeacherCache,
    aux_logits: &[HashMap<String, Vec<f64>>],
    temperature: f64,
) -> Vec<f64> {
    let mut agree = vec![0usize; teachers.len()];
    let mut total = 0usize;
    for (id, trace) in &cache.traces {
        let m = trace.logits.len();
        let mut acc = vec![0.0; m];
        add_softened(&mut acc, &trace.logits, temperature);
        let mut per_teacher = vec![argmax(&trace.logits)];
        for aux in aux_logits {
            let logits = &aux[id];
            add_softened(&mut acc, logits, temperature);
            per_teacher.push(argmax(logits));
        }
        let ensemble = argmax(&acc);
        for (j, &pred) in per_teacher.iter().enumerate() {
            if pred == ensemble {
                agree[j] += 1;
            }
        }
        total += 1;
    }
    let rates: Vec<f64> = agree.iter().map(|&a| a as f64 / total.max(1) as f64).collect();
    log::info!("per-teacher ensemble agreement: {rates:?}");
    rates
}

/// Deep copy of a model's parameters into a fresh, trainable instance.
fn clone_model(model: &EncoderModel) -> Result<EncoderModel> {
    let copy = EncoderModel::new_with_trainable(model.config.clone(), 0, true)?;
    for (src, dst) in model.parameters().iter().zip(copy.parameters().iter()) {
        debug_assert_eq!(src.name, dst.name);
        dst.tensor.set_data(&src.tensor.to_vec());
    }
    Ok(copy)
}
