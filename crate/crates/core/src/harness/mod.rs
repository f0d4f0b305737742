//! Experiment orchestration: the main teacher/student comparison, few-shot
//! sweeps, zero-shot domain holdout, the gamma2 ablation, and report files.
//!
//! Every (condition, domain, seed) produces exactly one [`ResultRecord`];
//! duplicate keys are rejected. Seeds can run on parallel worker threads
//! (bounded by `MKD_THREADS`), each against its own corpus store, so records
//! for one seed are independent of the roster of other seeds. After each
//! protocol the access log is checked: no training or model-selection path
//! may read a test split, and in the zero-shot protocol the held-out
//! domain's train labels are readable only by the skyline teacher.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    ingest, synth_multidomain, AccessLog, CorpusStore, DomainCorpus, FileFormat, GeneratorSpec,
    LabelMode, Split, Vocab,
};
use crate::distill::{
    distill, DistillConfig, DistillMethod, DistillPlan, ErrSquared, ExpertiseMode,
};
use crate::encoder::{argmax, ClassifierInput, EncoderConfig, Pooling};
use crate::teacher::{
    predict_logits, train_baseline_teacher, train_meta_teacher, BaselineMode, ModelBundle,
    TeacherConfig, TrainError,
};
use crate::tensor::{fnv1a, row_softmax};

mod report;
pub use report::{emit_report, read_records_csv, render_markdown, write_records_csv};

type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Encoder dimensions without the data-dependent fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

/// Where the corpus comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Generate the synthetic multi-domain task.
    Synthetic { spec: GeneratorSpec },
    /// Ingest `<dir>/<domain>/{train,dev,test}.jsonl|tsv` for each domain.
    Files {
        dir: String,
        domains: Vec<String>,
        #[serde(default)]
        tsv: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Main,
    Fewshot,
    Zeroshot,
    AblationG2,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Protocol::Main => "main",
            Protocol::Fewshot => "fewshot",
            Protocol::Zeroshot => "zeroshot",
            Protocol::AblationG2 => "ablation-g2",
        };
        f.write_str(s)
    }
}

/// Parameters specific to one protocol; only the relevant fields are read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Few-shot sample rates.
    #[serde(default = "default_sample_rates")]
    pub sample_rates: Vec<f64>,
    /// Retrain the in-domain teacher on the subsample as well (the default
    /// subsamples distillation data only).
    #[serde(default)]
    pub fewshot_retrain_teacher: bool,
    /// Zero-shot held-out domain name.
    #[serde(default)]
    pub held_out_domain: Option<String>,
    /// Let zero-shot expertise weights use gold labels for the error term
    /// (the default never reads held-out labels outside the skyline).
    #[serde(default)]
    pub zeroshot_use_gold_labels: bool,
    /// Gamma2 ablation grid.
    #[serde(default = "default_gamma2_grid")]
    pub gamma2_grid: Vec<f64>,
    /// Dev-selection grid for gamma2 in the main protocol's
    /// meta-distillation condition (model selection on the development
    /// split). Empty disables selection and uses the configured gamma2.
    #[serde(default = "default_gamma2_select")]
    pub gamma2_select: Vec<f64>,
}

fn default_gamma2_select() -> Vec<f64> {
    vec![0.1, 0.3]
}

fn default_sample_rates() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.5]
}

fn default_gamma2_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            sample_rates: default_sample_rates(),
            fewshot_retrain_teacher: false,
            held_out_domain: None,
            zeroshot_use_gold_labels: false,
            gamma2_grid: default_gamma2_grid(),
            gamma2_select: default_gamma2_select(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub vocab_budget: usize,
    pub max_seq_len: usize,
    pub teacher_model: ModelShape,
    pub student_model: ModelShape,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    /// Softening temperature for prediction distillation.
    pub temperature: f64,
    /// Weight of the transferable-knowledge term in meta-distillation.
    pub gamma2: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub protocol: ProtocolParams,
}

impl Default for ExperimentConfig {
    /// The desk-scale default experiment: 3 synthetic domains, 2 classes,
    /// 600/100/100 examples per domain at shared-signal 0.8, 5 seeds.
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::Synthetic {
                spec: GeneratorSpec::default(),
            },
            vocab_budget: 512,
            max_seq_len: 12,
            teacher_model: ModelShape {
                num_layers: 4,
                hidden_dim: 64,
                num_heads: 4,
                ffn_dim: 128,
                dropout_rate: 0.1,
            },
            student_model: ModelShape {
                num_layers: 2,
                hidden_dim: 32,
                num_heads: 4,
                ffn_dim: 64,
                dropout_rate: 0.1,
            },
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            temperature: 1.0,
            gamma2: 0.3,
            seeds: vec![1, 2, 3, 4, 5],
            protocol: ProtocolParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TrainError::Invalid(format!("config: {e}")))
    }

    /// Stable hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }

    fn encoder_config(
        &self,
        shape: &ModelShape,
        vocab_size: usize,
        num_classes: usize,
        num_domains: usize,
    ) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_seq_len: self.max_seq_len,
            num_layers: shape.num_layers,
            hidden_dim: shape.hidden_dim,
            num_heads: shape.num_heads,
            ffn_dim: shape.ffn_dim,
            num_classes,
            num_domains,
            dropout_rate: shape.dropout_rate,
            pooling: Pooling::Mean,
            classifier_input: ClassifierInput::Pooled,
        }
    }

    fn plan(&self) -> Result<DistillPlan> {
        DistillPlan::uniform(
            self.teacher_model.num_layers,
            self.student_model.num_layers,
            self.temperature,
            self.gamma2,
        )
    }
}

/// Load the corpora described by the config.
pub fn load_corpora(data: &DataConfig) -> Result<Vec<DomainCorpus>> {
    match data {
        DataConfig::Synthetic { spec } => Ok(synth_multidomain(spec)?),
        DataConfig::Files { dir, domains, tsv } => {
            let format = if *tsv { FileFormat::Tsv } else { FileFormat::Jsonl };
            domains
                .iter()
                .map(|d| Ok(ingest(&Path::new(dir).join(d), format)?))
                .collect()
        }
    }
}

fn num_classes_of(corpora: &[DomainCorpus]) -> Result<usize> {
    let n = corpora
        .iter()
        .flat_map(|c| c.train.iter().chain(&c.dev).chain(&c.test))
        .map(|e| e.label + 1)
        .max()
        .ok_or_else(|| TrainError::Invalid("empty corpus".into()))?;
    for c in corpora {
        c.validate(n)?;
    }
    Ok(n)
}

/// Vocabulary over the union of all train-split texts. Tokenization is
/// label-free plumbing (the fixed-subword analogue), so it may see every
/// domain's text, including a zero-shot held-out domain.
pub fn build_vocab(corpora: &[DomainCorpus], budget: usize) -> Result<Vocab> {
    Ok(Vocab::build(
        corpora.iter().flat_map(|c| {
            c.train
                .iter()
                .flat_map(|e| [Some(e.text.as_str()), e.text2.as_deref()])
                .flatten()
        }),
        budget,
    )?)
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub protocol: String,
    pub condition: String,
    pub domain: String,
    pub seed: u64,
    /// Accuracy on the untouched test split.
    pub accuracy: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
}

/// Append-only record collection; a duplicate (condition, domain, seed) key
/// is an error, never a silent overwrite.
#[derive(Debug, Default)]
pub struct RecordSet {
    records: Vec<ResultRecord>,
    keys: BTreeSet<(String, String, u64)>,
}

impl RecordSet {
    pub fn push(&mut self, record: ResultRecord) -> Result<()> {
        let key = (
            record.condition.clone(),
            record.domain.clone(),
            record.seed,
        );
        if !self.keys.insert(key) {
            return Err(TrainError::Invalid(format!(
                "duplicate record for ({}, {}, seed {})",
                record.condition, record.domain, record.seed
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, records: Vec<ResultRecord>) -> Result<()> {
        for r in records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[ResultRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ResultRecord> {
        self.records
    }
}

/// One few-shot sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub rate: f64,
    pub domain: String,
    pub seed: u64,
    pub accuracy_single_kd: f64,
    pub accuracy_meta_distill: f64,
    /// (meta - single) / single.
    pub improvement_rate: f64,
}

/// One gamma2 ablation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPoint {
    pub gamma2: f64,
    pub domain: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Everything a protocol run produces.
#[derive(Debug, Default)]
pub struct ProtocolOutput {
    pub records: Vec<ResultRecord>,
    pub fewshot_curve: Vec<FewShotPoint>,
    pub ablation_curve: Vec<AblationPoint>,
}

// ---------------------------------------------------------------------------
// Protocol execution
// ---------------------------------------------------------------------------

/// Shared read-only inputs for one seed's work.
struct SeedEnv {
    config: ExperimentConfig,
    corpora: Arc<Vec<DomainCorpus>>,
    vocab: Arc<Vocab>,
    num_classes: usize,
    hash: String,
    protocol: Protocol,
}

struct SeedOutput {
    records: Vec<ResultRecord>,
    fewshot: Vec<FewShotPoint>,
    ablation: Vec<AblationPoint>,
}

/// Run a protocol over every configured seed and return the merged records.
///
/// Seeds are distributed over at most `MKD_THREADS` worker threads (default:
/// available parallelism); each seed's work is self-contained and
/// deterministic given (config, seed).
pub fn run_protocol(config: &ExperimentConfig, protocol: Protocol) -> Result<ProtocolOutput> {
    if config.seeds.is_empty() {
        return Err(TrainError::Invalid("no seeds configured".into()));
    }
    if protocol == Protocol::Zeroshot && config.protocol.held_out_domain.is_none() {
        return Err(TrainError::Invalid(
            "zero-shot protocol needs protocol.held_out_domain".into(),
        ));
    }
    let corpora = Arc::new(load_corpora(&config.data)?);
    let num_classes = num_classes_of(&corpora)?;
    let vocab = Arc::new(build_vocab(&corpora, config.vocab_budget)?);
    let hash = config.hash();

    let threads = max_threads().min(config.seeds.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SeedOutput>>>> =
        Mutex::new((0..config.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= config.seeds.len() {
                    break;
                }
                let env = SeedEnv {
                    config: config.clone(),
                    corpora: Arc::clone(&corpora),
                    vocab: Arc::clone(&vocab),
                    num_classes,
                    hash: hash.clone(),
                    protocol,
                };
                let out = run_seed(&env, config.seeds[idx]);
                slots.lock().unwrap()[idx] = Some(out);
            });
        }
    });

    let mut records = RecordSet::default();
    let mut output = ProtocolOutput::default();
    for slot in slots.into_inner().unwrap() {
        let seed_out = slot.expect("worker filled every slot")?;
        records.extend(seed_out.records)?;
        output.fewshot_curve.extend(seed_out.fewshot);
        output.ablation_curve.extend(seed_out.ablation);
    }
    output.records = records.into_records();
    Ok(output)
}

fn max_threads() -> usize {
    if let Ok(v) = std::env::var("MKD_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn run_seed(env: &SeedEnv, seed: u64) -> Result<SeedOutput> {
    let store = CorpusStore::new((*env.corpora).clone());
    let mut out = SeedOutput {
        records: Vec::new(),
        fewshot: Vec::new(),
        ablation: Vec::new(),
    };
    match env.protocol {
        Protocol::Main => run_main_seed(env, seed, &store, &mut out)?,
        Protocol::Fewshot => run_fewshot_seed(env, seed, &store, &mut out)?,
        Protocol::Zeroshot => run_zeroshot_seed(env, seed, &store, &mut out)?,
        Protocol::AblationG2 => run_ablation_seed(env, seed, &store, &mut out)?,
    }
    let violations = hygiene_violations(&store.log(), env.protocol, &env.config.protocol);
    if !violations.is_empty() {
        return Err(TrainError::Invalid(format!(
            "hygiene violations: {}",
            violations.join("; ")
        )));
    }
    Ok(out)
}

/// The trained teachers a seed's student conditions draw from.
struct Teachers {
    meta: ModelBundle,
    mix: Option<ModelBundle>,
    singles: Vec<ModelBundle>, // aligned with roster
}

impl SeedEnv {
    fn teacher_cfg(&self, seed: u64) -> TeacherConfig {
        TeacherConfig {
            seed,
            ..self.config.teacher.clone()
        }
    }

    fn distill_cfg(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            seed,
            ..self.config.distill.clone()
        }
    }

    fn teacher_encoder(&self, num_domains: usize) -> EncoderConfig {
        self.config.encoder_config(
            &self.config.teacher_model,
            self.vocab.len(),
            self.num_classes,
            num_domains,
        )
    }

    fn student_encoder(&self, num_domains: usize) -> EncoderConfig {
        self.config.encoder_config(
            &self.config.student_model,
            self.vocab.len(),
            self.num_classes,
            num_domains,
        )
    }
}

fn train_teachers(
    env: &SeedEnv,
    seed: u64,
    store: &CorpusStore,
    domains: &[usize],
    with_mix: bool,
    tag: &str,
) -> Result<Teachers> {
    let tcfg = env.teacher_cfg(seed);
    let meta = train_meta_teacher(
        store,
        domains,
        &env.vocab,
        env.teacher_encoder(domains.len()),
        &tcfg,
        &format!("teacher:{tag}meta:s{seed}"),
    )?
    .bundle;
    let mix = if with_mix {
        Some(
            train_baseline_teacher(
                store,
                domains,
                BaselineMode::Mix,
                &env.vocab,
                env.teacher_encoder(domains.len()),
                &tcfg,
                &format!("teacher:{tag}mix:s{seed}"),
            )?
            .bundle,
        )
    } else {
        None
    };
    let mut singles = Vec::with_capacity(domains.len());
    for &k in domains {
        singles.push(
            train_baseline_teacher(
                store,
                domains,
                BaselineMode::Single(k),
                &env.vocab,
                env.teacher_encoder(1),
                &tcfg,
                &format!("teacher:{tag}single:{}:s{seed}", store.domain_name(k)),
            )?
            .bundle,
        );
    }
    Ok(Teachers { meta, mix, singles })
}

fn record(
    env: &SeedEnv,
    out: &mut SeedOutput,
    condition: &str,
    domain: &str,
    seed: u64,
    accuracy: f64,
    started: Instant,
) {
    out.records.push(ResultRecord {
        protocol: env.protocol.to_string(),
        condition: condition.to_string(),
        domain: domain.to_string(),
        seed,
        accuracy,
        wall_time_s: started.elapsed().as_secs_f64(),
        config_hash: env.hash.clone(),
    });
}

/// Accuracy of the mean softened distribution of several teachers.
fn ensemble_accuracy(
    teachers: &[&ModelBundle],
    store: &CorpusStore,
    ctx: &str,
    domain: usize,
    batch_size: usize,
) -> Result<f64> {
    let mut per_teacher = Vec::new();
    for t in teachers {
        let model_domain = t.domain_index(store.domain_name(domain));
        per_teacher.push(predict_logits(
            &t.model,
            store,
            ctx,
            domain,
            model_domain,
            Split::Test,
            &t.vocab,
            batch_size,
        )?);
    }
    let n = per_teacher[0].len();
    let m = per_teacher[0][0].logits.len();
    let mut correct = 0usize;
    for i in 0..n {
        let mut acc = vec![0.0; m];
        for preds in &per_teacher {
            let p = row_softmax(&preds[i].logits, 1, m);
            for (a, v) in acc.iter_mut().zip(p.iter()) {
                *a += v;
            }
        }
        if argmax(&acc) == per_teacher[0][i].label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Main protocol
// ---------------------------------------------------------------------------

fn run_main_seed(
    env: &SeedEnv,
    seed: u64,
    store: &CorpusStore,
    out: &mut SeedOutput,
) -> Result<()> {
    let domains: Vec<usize> = (0..store.num_domains()).collect();
    let plan = env.config.plan()?;
    let dcfg = env.distill_cfg(seed);

    let teacher_clock = Instant::now();
    let teachers = train_teachers(env, seed, store, &domains, true, "")?;
    let mix = teachers.mix.as_ref().expect("mix trained in main protocol");

    // teacher-side conditions
    for &k in &domains {
        let name = store.domain_name(k).to_string();
        let eval = |bundle: &ModelBundle, condition: &str| -> Result<f64> {
            bundle.accuracy_on(
                store,
                &format!("final-eval:{condition}:{name}:s{seed}"),
                k,
                Split::Test,
                dcfg.batch_size,
            )
        };
        let acc = eval(&teachers.singles[k], "teacher-single")?;
        record(env, out, "teacher-single", &name, seed, acc, teacher_clock);
        let acc = eval(mix, "teacher-mix")?;
        record(env, out, "teacher-mix", &name, seed, acc, teacher_clock);
        let acc = eval(&teachers.meta, "teacher-meta")?;
        record(env, out, "teacher-meta", &name, seed, acc, teacher_clock);
        let refs: Vec<&ModelBundle> = teachers.singles.iter().collect();
        let acc = ensemble_accuracy(
            &refs,
            store,
            &format!("final-eval:teacher-ensemble:{name}:s{seed}"),
            k,
            dcfg.batch_size,
        )?;
        record(env, out, "teacher-ensemble", &name, seed, acc, teacher_clock);
    }

    // student-side conditions
    for &k in &domains {
        let name = store.domain_name(k).to_string();
        let student_cfg = env.student_encoder(domains.len());
        let mut run_student = |condition: &str,
                               teacher_refs: Vec<&ModelBundle>,
                               method: DistillMethod|
         -> Result<()> {
            let clock = Instant::now();
            let artifacts = distill(
                &teacher_refs,
                &method,
                student_cfg.clone(),
                &plan,
                &dcfg,
                store,
                &format!("distill:{condition}:{name}:s{seed}"),
                k,
                LabelMode::WithLabels,
            )?;
            let acc = artifacts.bundle.accuracy_on(
                store,
                &format!("final-eval:{condition}:{name}:s{seed}"),
                k,
                Split::Test,
                dcfg.batch_size,
            )?;
            record(env, out, condition, &name, seed, acc, clock);
            Ok(())
        };
        run_student("single->kd", vec![&teachers.singles[k]], DistillMethod::TinyBert)?;
        run_student("mix->kd", vec![mix], DistillMethod::TinyBert)?;
        run_student("meta->kd", vec![&teachers.meta], DistillMethod::TinyBert)?;
        let mut mtn: Vec<&ModelBundle> = vec![&teachers.singles[k]];
        mtn.extend(domains.iter().filter(|&&j| j != k).map(|&j| &teachers.singles[j]));
        run_student("multi->mtn-kd", mtn, DistillMethod::MtnKd)?;

        // meta-distillation with gamma2 selected on the dev split, per the
        // development-set tuning the hyperparameter ranges call for
        let clock = Instant::now();
        let grid: Vec<f64> = if env.config.protocol.gamma2_select.is_empty() {
            vec![env.config.gamma2]
        } else {
            env.config.protocol.gamma2_select.clone()
        };
        let condition = "meta->meta-distill";
        let mut best: Option<(f64, crate::distill::StudentArtifacts)> = None;
        for &gamma2 in &grid {
            let mut plan = plan.clone();
            plan.gamma2 = gamma2;
            let artifacts = distill(
                &[&teachers.meta],
                &DistillMethod::MetaDistill(ExpertiseMode::Labeled(ErrSquared::Indicator)),
                student_cfg.clone(),
                &plan,
                &dcfg,
                store,
                &format!("distill:{condition}@g{gamma2}:{name}:s{seed}"),
                k,
                LabelMode::WithLabels,
            )?;
            let dev = artifacts.bundle.accuracy_on(
                store,
                &format!("eval:dev:{condition}@g{gamma2}:{name}:s{seed}"),
                k,
                Split::Dev,
                dcfg.batch_size,
            )?;
            if best.as_ref().map_or(true, |(d, _)| dev > *d) {
                best = Some((dev, artifacts));
            }
        }
        let (_, chosen) = best.expect("non-empty gamma2 grid");
        let acc = chosen.bundle.accuracy_on(
            store,
            &format!("final-eval:{condition}:{name}:s{seed}"),
            k,
            Split::Test,
            dcfg.batch_size,
        )?;
        record(env, out, condition, &name, seed, acc, clock);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Few-shot protocol
// ---------------------------------------------------------------------------

fn run_fewshot_seed(
    env: &SeedEnv,
    seed: u64,
    store: &CorpusStore,
    out: &mut SeedOutput,
) -> Result<()> {
    let domains: Vec<usize> = (0..store.num_domains()).collect();
    let plan = env.config.plan()?;
    // teachers see the full data; only distillation data is subsampled
    let teachers = train_teachers(env, seed, store, &domains, false, "fs-")?;

    for &rate in &env.config.protocol.sample_rates {
        // fixed optimization budget: a subsample shrinks the epoch size, so
        // epochs scale with 1/rate (students would otherwise be starved of
        // update steps at small rates, not of data)
        let scale = (1.0 / rate).ceil() as usize;
        let dcfg = DistillConfig {
            int_epochs: (env.config.distill.int_epochs * scale).min(240),
            pred_epochs: (env.config.distill.pred_epochs * scale).min(72),
            ..env.distill_cfg(seed)
        };
        for &k in &domains {
            let name = store.domain_name(k).to_string();
            let sub = match store.with_subsampled_train(k, rate, seed) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("skipping rate {rate} on {name}: {e}");
                    continue;
                }
            };
            let single_teacher = if env.config.protocol.fewshot_retrain_teacher {
                Some(
                    train_baseline_teacher(
                        &sub,
                        &domains,
                        BaselineMode::Single(k),
                        &env.vocab,
                        env.teacher_encoder(1),
                        &env.teacher_cfg(seed),
                        &format!("teacher:fs-single-sub:{name}:r{rate}:s{seed}"),
                    )?
                    .bundle,
                )
            } else {
                None
            };
            let single_ref = single_teacher.as_ref().unwrap_or(&teachers.singles[k]);

            let student_cfg = env.student_encoder(domains.len());
            let clock = Instant::now();
            let cond_a = format!("fs-single->kd@{rate}");
            let a = distill(
                &[single_ref],
                &DistillMethod::TinyBert,
                student_cfg.clone(),
                &plan,
                &dcfg,
                &sub,
                &format!("distill:{cond_a}:{name}:s{seed}"),
                k,
                LabelMode::WithLabels,
            )?;
            let acc_a = a.bundle.accuracy_on(
                &sub,
                &format!("final-eval:{cond_a}:{name}:s{seed}"),
                k,
                Split::Test,
                dcfg.batch_size,
            )?;
            record(env, out, &cond_a, &name, seed, acc_a, clock);

            let clock = Instant::now();
            let cond_b = format!("fs-meta->meta-distill@{rate}");
            let b = distill(
                &[&teachers.meta],
                &DistillMethod::MetaDistill(ExpertiseMode::Labeled(ErrSquared::Indicator)),
                student_cfg,
                &plan,
                &dcfg,
                &sub,
                &format!("distill:{cond_b}:{name}:s{seed}"),
                k,
                LabelMode::WithLabels,
            )?;
            let acc_b = b.bundle.accuracy_on(
                &sub,
                &format!("final-eval:{cond_b}:{name}:s{seed}"),
                k,
                Split::Test,
                dcfg.batch_size,
            )?;
            record(env, out, &cond_b, &name, seed, acc_b, clock);

            out.fewshot.push(FewShotPoint {
                rate,
                domain: name,
                seed,
                accuracy_single_kd: acc_a,
                accuracy_meta_distill: acc_b,
                improvement_rate: if acc_a > 0.0 { (acc_b - acc_a) / acc_a } else { 0.0 },
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Zero-shot protocol
// ---------------------------------------------------------------------------

fn run_zeroshot_seed(
    env: &SeedEnv,
    seed: u64,
    store: &CorpusStore,
    out: &mut SeedOutput,
) -> Result<()> {
    let held_name = env
        .config
        .protocol
        .held_out_domain
        .clone()
        .expect("checked by run_protocol");
    let held = store
        .domain_index(&held_name)
        .ok_or_else(|| TrainError::Invalid(format!("unknown held-out domain '{held_name}'")))?;
    let all: Vec<usize> = (0..store.num_domains()).collect();
    let seen: Vec<usize> = all.iter().copied().filter(|&k| k != held).collect();
    if seen.len() < 2 {
        return Err(TrainError::Invalid(
            "zero-shot needs at least 2 non-held-out domains".into(),
        ));
    }
    let plan = env.config.plan()?;
    let dcfg = env.distill_cfg(seed);
    let tcfg = env.teacher_cfg(seed);

    // meta-teacher over the seen domains only
    let meta = train_meta_teacher(
        store,
        &seen,
        &env.vocab,
        env.teacher_encoder(seen.len()),
        &tcfg,
        &format!("teacher:zs-meta:s{seed}"),
    )?
    .bundle;
    // out-domain single teachers
    let mut singles = Vec::new();
    for &k in &seen {
        singles.push((
            k,
            train_baseline_teacher(
                store,
                &all,
                BaselineMode::Single(k),
                &env.vocab,
                env.teacher_encoder(1),
                &tcfg,
                &format!("teacher:zs-single:{}:s{seed}", store.domain_name(k)),
            )?
            .bundle,
        ));
    }
    // the skyline: the in-domain teacher, the only reader of held-out labels
    let skyline = train_baseline_teacher(
        store,
        &all,
        BaselineMode::Single(held),
        &env.vocab,
        env.teacher_encoder(1),
        &tcfg,
        &format!("teacher:zs-skyline:{held_name}:s{seed}"),
    )?
    .bundle;

    let student_cfg = env.student_encoder(all.len());
    let expertise = if env.config.protocol.zeroshot_use_gold_labels {
        ExpertiseMode::MeanScoreWithLabels(ErrSquared::Indicator)
    } else {
        ExpertiseMode::TeacherOnly
    };
    let label_mode = if env.config.protocol.zeroshot_use_gold_labels {
        LabelMode::WithLabels
    } else {
        LabelMode::TextOnly
    };
    let mut run_student = |condition: &str,
                           teacher: &ModelBundle,
                           method: DistillMethod,
                           label_mode: LabelMode|
     -> Result<()> {
        let clock = Instant::now();
        let artifacts = distill(
            &[teacher],
            &method,
            student_cfg.clone(),
            &plan,
            &dcfg,
            store,
            &format!("distill:{condition}:{held_name}:s{seed}"),
            held,
            label_mode,
        )?;
        let acc = artifacts.bundle.accuracy_on(
            store,
            &format!("final-eval:{condition}:{held_name}:s{seed}"),
            held,
            Split::Test,
            dcfg.batch_size,
        )?;
        record(env, out, condition, &held_name, seed, acc, clock);
        Ok(())
    };

    run_student(
        "zs-meta->meta-distill",
        &meta,
        DistillMethod::MetaDistill(expertise),
        label_mode,
    )?;
    for (k, bundle) in &singles {
        run_student(
            &format!("zs-out-single({})->kd", store.domain_name(*k)),
            bundle,
            DistillMethod::TinyBert,
            LabelMode::TextOnly,
        )?;
    }
    run_student(
        "zs-skyline-single->kd",
        &skyline,
        DistillMethod::TinyBert,
        LabelMode::TextOnly,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gamma2 ablation
// ---------------------------------------------------------------------------

fn run_ablation_seed(
    env: &SeedEnv,
    seed: u64,
    store: &CorpusStore,
    out: &mut SeedOutput,
) -> Result<()> {
    if env.config.protocol.gamma2_grid.is_empty() {
        return Err(TrainError::Invalid("empty gamma2 grid".into()));
    }
    let domains: Vec<usize> = (0..store.num_domains()).collect();
    let dcfg = env.distill_cfg(seed);
    let meta = train_meta_teacher(
        store,
        &domains,
        &env.vocab,
        env.teacher_encoder(domains.len()),
        &env.teacher_cfg(seed),
        &format!("teacher:ab-meta:s{seed}"),
    )?
    .bundle;
    for &gamma2 in &env.config.protocol.gamma2_grid {
        let mut plan = env.config.plan()?;
        plan.gamma2 = gamma2;
        for &k in &domains {
            let name = store.domain_name(k).to_string();
            let condition = format!("ablation-g2={gamma2}");
            let clock = Instant::now();
            let artifacts = distill(
                &[&meta],
                &DistillMethod::MetaDistill(ExpertiseMode::Labeled(ErrSquared::Indicator)),
                env.student_encoder(domains.len()),
                &plan,
                &dcfg,
                store,
                &format!("distill:{condition}:{name}:s{seed}"),
                k,
                LabelMode::WithLabels,
            )?;
            let acc = artifacts.bundle.accuracy_on(
                store,
                &format!("final-eval:{condition}:{name}:s{seed}"),
                k,
                Split::Test,
                dcfg.batch_size,
            )?;
            record(env, out, &condition, &name, seed, acc, clock);
            out.ablation.push(AblationPoint {
                gamma2,
                domain: name,
                seed,
                accuracy: acc,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Hygiene
// ---------------------------------------------------------------------------

/// Scan an access log for protocol violations. Empty means clean.
///
/// Rules: (1) test splits are only readable under a `final-eval:` context;
/// (2) a `teacher:...single:<domain>` context only touches that domain;
/// (3) in the zero-shot protocol, held-out train labels are only readable by
/// the skyline teacher (or anywhere when the gold-label flag is set).
pub fn hygiene_violations(
    log: &AccessLog,
    protocol: Protocol,
    params: &ProtocolParams,
) -> Vec<String> {
    let mut violations = Vec::new();
    for (ctx, domain, split, access) in &log.entries {
        if *split == Split::Test && !ctx.starts_with("final-eval:") {
            violations.push(format!("test split of '{domain}' read by '{ctx}'"));
        }
        if let Some(rest) = ctx
            .strip_prefix("teacher:single:")
            .or_else(|| ctx.strip_prefix("teacher:fs-single:"))
            .or_else(|| ctx.strip_prefix("teacher:fs-single-sub:"))
            .or_else(|| ctx.strip_prefix("teacher:zs-single:"))
            .or_else(|| ctx.strip_prefix("teacher:zs-skyline:"))
        {
            let owner = rest.split(':').next().unwrap_or("");
            if owner != domain {
                violations.push(format!(
                    "single-domain teacher '{ctx}' read domain '{domain}'"
                ));
            }
        }
        if protocol == Protocol::Zeroshot
            && !params.zeroshot_use_gold_labels
            && *access == crate::data::Access::Label
            && *split == Split::Train
        {
            if let Some(held) = &params.held_out_domain {
                if domain == held && !ctx.starts_with("teacher:zs-skyline:") {
                    violations.push(format!(
                        "held-out train labels of '{domain}' read by '{ctx}'"
                    ));
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests;
