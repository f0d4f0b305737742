//! `meta-kd`: generate corpora, train teachers, distill students, run the
//! experiment protocols, and render reports.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use meta_kd_core::data::{export, CorpusStore, FileFormat, LabelMode};
use meta_kd_core::distill::{
    distill, DistillMethod, DistillPlan, ErrSquared, ExpertiseMode,
};
use meta_kd_core::harness::{
    build_vocab, emit_report, load_corpora, read_records_csv, run_protocol, DataConfig,
    ExperimentConfig, Protocol, ProtocolOutput,
};
use meta_kd_core::teacher::{
    train_baseline_teacher, train_meta_teacher, BaselineMode, ModelBundle,
};

#[derive(Parser)]
#[command(name = "meta-kd", version, about = "Cross-domain meta-teacher distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherMode {
    Meta,
    Single,
    Mix,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// TinyBERT-style intermediate + prediction distillation.
    Kd,
    /// Expertise-weighted distillation with the transferable-knowledge term.
    Meta,
    /// Multi-teacher averaged softened outputs.
    Mtn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Main,
    Fewshot,
    Zeroshot,
    #[value(name = "ablation-g2")]
    AblationG2,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Protocol {
        match p {
            ProtocolArg::Main => Protocol::Main,
            ProtocolArg::Fewshot => Protocol::Fewshot,
            ProtocolArg::Zeroshot => Protocol::Zeroshot,
            ProtocolArg::AblationG2 => Protocol::AblationG2,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain corpus directory.
    GenData {
        /// Experiment config JSON (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (one subdirectory per domain plus a manifest).
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a teacher model and write its checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: TeacherMode,
        /// Domain name (required for --mode single).
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill a student from one or more teacher checkpoints.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Teacher checkpoint(s); several (comma-separated) select MTN-KD.
        #[arg(long, value_delimiter = ',', required = true)]
        teacher: Vec<PathBuf>,
        /// Target domain name.
        #[arg(long)]
        domain: String,
        /// Plan JSON (layer_map / temperature / gamma2); defaults derived
        /// from the config when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment protocol over all configured seeds.
    Run {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for records and reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render the Markdown report from a records directory.
    Report {
        /// Directory containing records.csv.
        records_dir: PathBuf,
        /// Output directory (defaults to the records directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(ExperimentConfig::from_json(&text)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

/// Optional plan file: any omitted field falls back to the config-derived
/// plan.
#[derive(Deserialize)]
struct PlanFile {
    layer_map: Option<Vec<(usize, usize)>>,
    temperature: Option<f64>,
    gamma2: Option<f64>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { config, out, seed } => gen_data(&load_config(&config)?, &out, seed),
        Command::TrainTeacher {
            config,
            mode,
            domain,
            out,
            seed,
        } => train_teacher(&load_config(&config)?, mode, domain, &out, seed),
        Command::Distill {
            config,
            teacher,
            domain,
            plan,
            method,
            out,
            seed,
        } => run_distill(&load_config(&config)?, &teacher, &domain, plan, method, &out, seed),
        Command::Run {
            protocol,
            config,
            out,
        } => run_cmd(&load_config(&config)?, protocol.into(), &out),
        Command::Report { records_dir, out } => report_cmd(&records_dir, out),
    }
}

fn gen_data(config: &ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut data = config.data.clone();
    if let (Some(s), DataConfig::Synthetic { spec }) = (seed, &mut data) {
        spec.seed = s;
    }
    let corpora = load_corpora(&data)?;
    for corpus in &corpora {
        export(corpus, &out.join(&corpus.domain), FileFormat::Jsonl)?;
    }
    let manifest = serde_json::json!({
        "data": data,
        "domains": corpora.iter().map(|c| c.domain.clone()).collect::<Vec<_>>(),
        "sizes": corpora.iter().map(|c| {
            serde_json::json!({"train": c.train.len(), "dev": c.dev.len(), "test": c.test.len()})
        }).collect::<Vec<_>>(),
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "wrote {} domains under {}",
        corpora.len(),
        out.display()
    );
    Ok(())
}

fn train_teacher(
    config: &ExperimentConfig,
    mode: TeacherMode,
    domain: Option<String>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let corpora = load_corpora(&config.data)?;
    let num_classes = corpora
        .iter()
        .flat_map(|c| c.train.iter())
        .map(|e| e.label + 1)
        .max()
        .context("empty corpus")?;
    let vocab = build_vocab(&corpora, config.vocab_budget)?;
    let store = CorpusStore::new(corpora);
    let domains: Vec<usize> = (0..store.num_domains()).collect();
    let mut tcfg = config.teacher.clone();
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let shape = &config.teacher_model;
    let encoder = |num_domains: usize| meta_kd_core::encoder::EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: config.max_seq_len,
        num_layers: shape.num_layers,
        hidden_dim: shape.hidden_dim,
        num_heads: shape.num_heads,
        ffn_dim: shape.ffn_dim,
        num_classes,
        num_domains,
        dropout_rate: shape.dropout_rate,
        pooling: Default::default(),
        classifier_input: Default::default(),
    };
    let artifacts = match mode {
        TeacherMode::Meta => train_meta_teacher(
            &store,
            &domains,
            &vocab,
            encoder(domains.len()),
            &tcfg,
            "teacher:meta:cli",
        )?,
        TeacherMode::Mix => train_baseline_teacher(
            &store,
            &domains,
            BaselineMode::Mix,
            &vocab,
            encoder(domains.len()),
            &tcfg,
            "teacher:mix:cli",
        )?,
        TeacherMode::Single => {
            let name = domain.context("--mode single requires --domain")?;
            let k = store
                .domain_index(&name)
                .with_context(|| format!("unknown domain '{name}'"))?;
            train_baseline_teacher(
                &store,
                &domains,
                BaselineMode::Single(k),
                &vocab,
                encoder(1),
                &tcfg,
                &format!("teacher:single:{name}:cli"),
            )?
        }
    };
    artifacts.bundle.save(out)?;
    for (epoch, accs) in artifacts.dev_accuracy.iter().enumerate() {
        log::info!("epoch {epoch}: dev {accs:?}");
    }
    println!("teacher checkpoint written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_distill(
    config: &ExperimentConfig,
    teacher_paths: &[PathBuf],
    domain: &str,
    plan_path: Option<PathBuf>,
    method: Option<Method>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let teachers: Vec<ModelBundle> = teacher_paths
        .iter()
        .map(|p| Ok(ModelBundle::load(p, false)?))
        .collect::<Result<_>>()?;
    let teacher_refs: Vec<&ModelBundle> = teachers.iter().collect();
    let corpora = load_corpora(&config.data)?;
    let num_classes = teachers[0].model.config.num_classes;
    let store = CorpusStore::new(corpora);
    let k = store
        .domain_index(domain)
        .with_context(|| format!("unknown domain '{domain}'"))?;

    let mut plan = DistillPlan::uniform(
        teachers[0].model.config.num_layers,
        config.student_model.num_layers,
        config.temperature,
        config.gamma2,
    )?;
    if let Some(path) = plan_path {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading plan {}", path.display()))?;
        let file: PlanFile = serde_json::from_str(&text)?;
        if let Some(map) = file.layer_map {
            plan.layer_map = map;
        }
        if let Some(t) = file.temperature {
            plan.temperature = t;
        }
        if let Some(g) = file.gamma2 {
            plan.gamma2 = g;
        }
    }

    let method = match method {
        Some(Method::Kd) => DistillMethod::TinyBert,
        Some(Method::Meta) => {
            DistillMethod::MetaDistill(ExpertiseMode::Labeled(ErrSquared::Indicator))
        }
        Some(Method::Mtn) => DistillMethod::MtnKd,
        None if teachers.len() > 1 => DistillMethod::MtnKd,
        None if teachers[0].table.is_some() => {
            DistillMethod::MetaDistill(ExpertiseMode::Labeled(ErrSquared::Indicator))
        }
        None => DistillMethod::TinyBert,
    };

    let mut dcfg = config.distill.clone();
    if let Some(s) = seed {
        dcfg.seed = s;
    }
    let shape = &config.student_model;
    let student_cfg = meta_kd_core::encoder::EncoderConfig {
        vocab_size: teachers[0].vocab.len(),
        max_seq_len: teachers[0].model.config.max_seq_len,
        num_layers: shape.num_layers,
        hidden_dim: shape.hidden_dim,
        num_heads: shape.num_heads,
        ffn_dim: shape.ffn_dim,
        num_classes,
        num_domains: store.num_domains(),
        dropout_rate: shape.dropout_rate,
        pooling: Default::default(),
        classifier_input: Default::default(),
    };
    let artifacts = distill(
        &teacher_refs,
        &method,
        student_cfg,
        &plan,
        &dcfg,
        &store,
        &format!("distill:cli:{domain}"),
        k,
        LabelMode::WithLabels,
    )?;
    artifacts.bundle.save(out)?;
    if let Some(agreement) = &artifacts.teacher_agreement {
        log::info!("per-teacher ensemble agreement: {agreement:?}");
    }
    let dev = artifacts.bundle.accuracy_on(
        &store,
        &format!("eval:dev:distill:cli:{domain}"),
        k,
        meta_kd_core::data::Split::Dev,
        dcfg.batch_size,
    )?;
    println!(
        "student checkpoint written to {} (dev accuracy {dev:.3})",
        out.display()
    );
    Ok(())
}

fn run_cmd(config: &ExperimentConfig, protocol: Protocol, out: &Path) -> Result<()> {
    let output = run_protocol(config, protocol)?;
    emit_report(&output, config, out)?;
    println!(
        "{} records written to {}",
        output.records.len(),
        out.display()
    );
    Ok(())
}

fn report_cmd(records_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let records = read_records_csv(&records_dir.join("records.csv"))?;
    if records.is_empty() {
        bail!("no records in {}", records_dir.display());
    }
    let hashes: BTreeSet<&str> = records.iter().map(|r| r.config_hash.as_str()).collect();
    let hash = hashes.iter().copied().collect::<Vec<_>>().join(", ");
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let md = meta_kd_core::harness::render_markdown(&records, &hash, &seeds);
    let out_dir = out.unwrap_or_else(|| records_dir.to_path_buf());
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("report.md"), md)?;
    println!("report written to {}", out_dir.join("report.md").display());
    let _ = ProtocolOutput::default();
    Ok(())
}
