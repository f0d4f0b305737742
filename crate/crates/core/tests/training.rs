//! End-to-end training behavior on small synthetic tasks: cross-domain
//! transfer as a function of the shared-signal strength, the effect of the
//! domain-corruption loss, and teacher-to-student accuracy retention.

use meta_kd_core::data::{synth_multidomain, CorpusStore, GeneratorSpec, Split, Vocab};
use meta_kd_core::distill::{
    distill, DistillConfig, DistillMethod, DistillPlan, ErrSquared, ExpertiseMode,
};
use meta_kd_core::encoder::EncoderConfig;
use meta_kd_core::harness::build_vocab;
use meta_kd_core::teacher::{
    domain_classifier_accuracy, train_baseline_teacher, train_meta_teacher, BaselineMode,
    TeacherConfig,
};

fn task(shared_signal: f64, domains: usize, train: usize, seed: u64) -> (CorpusStore, Vocab) {
    let corpora = synth_multidomain(&GeneratorSpec {
        num_domains: domains,
        num_classes: 2,
        train_per_domain: train,
        dev_per_domain: 50,
        test_per_domain: 50,
        shared_signal,
        domain_noise: 0.5,
        seed,
        text_len: 8,
        distractor_rate: 0.0,
        // every example carries evidence, so the ceiling is ~1
        evidence_probs: vec![0.0, 0.3, 0.4, 0.3],
        // small regions: these tests probe the shared-signal mechanism, not
        // vocabulary coverage
        shared_types_per_class: 24,
        private_types_per_cell: 12,
    })
    .unwrap();
    let vocab = build_vocab(&corpora, 512).unwrap();
    (CorpusStore::new(corpora), vocab)
}

fn small_encoder(vocab: &Vocab, num_domains: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: 12,
        num_layers: 2,
        hidden_dim: 32,
        num_heads: 4,
        ffn_dim: 64,
        num_classes: 2,
        num_domains,
        dropout_rate: 0.1,
        pooling: Default::default(),
        classifier_input: Default::default(),
    }
}

fn teacher_cfg(seed: u64, epochs: usize) -> TeacherConfig {
    TeacherConfig {
        epochs,
        batch_size: 16,
        seed,
        ..TeacherConfig::default()
    }
}

/// Fully shared signal: a teacher trained on one domain transfers to the
/// other almost perfectly.
#[test]
fn full_shared_signal_transfers_across_domains() {
    let (store, vocab) = task(1.0, 2, 300, 3);
    let artifacts = train_baseline_teacher(
        &store,
        &[0, 1],
        BaselineMode::Single(0),
        &vocab,
        small_encoder(&vocab, 1),
        &teacher_cfg(1, 4),
        "teacher:single:domain0:xfer",
    )
    .unwrap();
    let cross = artifacts
        .bundle
        .accuracy_on(&store, "final-eval:xfer", 1, Split::Test, 16)
        .unwrap();
    assert!(cross > 0.9, "cross-domain accuracy {cross} at s=1");
}

/// Disjoint signal: the same setup transfers nothing beyond chance.
#[test]
fn disjoint_signal_gives_chance_level_transfer() {
    let (store, vocab) = task(0.0, 2, 300, 4);
    let artifacts = train_baseline_teacher(
        &store,
        &[0, 1],
        BaselineMode::Single(0),
        &vocab,
        small_encoder(&vocab, 1),
        &teacher_cfg(1, 4),
        "teacher:single:domain0:xfer0",
    )
    .unwrap();
    let own = artifacts
        .bundle
        .accuracy_on(&store, "final-eval:own", 0, Split::Test, 16)
        .unwrap();
    let cross = artifacts
        .bundle
        .accuracy_on(&store, "final-eval:cross", 1, Split::Test, 16)
        .unwrap();
    assert!(own > 0.85, "in-domain accuracy {own} at s=0");
    assert!(
        (cross - 0.5).abs() <= 0.1,
        "cross-domain accuracy {cross} should be chance at s=0"
    );
}

/// The corruption loss pushes the domain classifier off the true labels.
#[test]
fn domain_corruption_reduces_domain_classifier_accuracy() {
    let (store, vocab) = task(0.8, 3, 120, 5);
    let domains = [0, 1, 2];
    let run = |gamma1: f64| {
        let artifacts = train_meta_teacher(
            &store,
            &domains,
            &vocab,
            small_encoder(&vocab, 3),
            &TeacherConfig {
                gamma1,
                ..teacher_cfg(2, 3)
            },
            &format!("teacher:meta:g{gamma1}"),
        )
        .unwrap();
        domain_classifier_accuracy(
            &artifacts.bundle.model,
            &store,
            &format!("eval:dev:domacc:g{gamma1}"),
            &domains,
            Split::Dev,
            &vocab,
            16,
        )
        .unwrap()
    };
    let without = run(0.0);
    let with = run(0.2);
    assert!(
        with < without,
        "domain-classifier accuracy did not drop: {without} -> {with}"
    );
}

/// Mixed-domain fine-tuning lands close to the meta-teacher at full sharing.
#[test]
fn mix_teacher_tracks_meta_teacher_on_shared_task() {
    let (store, vocab) = task(1.0, 2, 250, 6);
    let meta = train_meta_teacher(
        &store,
        &[0, 1],
        &vocab,
        small_encoder(&vocab, 2),
        &teacher_cfg(3, 3),
        "teacher:meta:mixcmp",
    )
    .unwrap();
    let mix = train_baseline_teacher(
        &store,
        &[0, 1],
        BaselineMode::Mix,
        &vocab,
        small_encoder(&vocab, 2),
        &teacher_cfg(3, 3),
        "teacher:mix:mixcmp",
    )
    .unwrap();
    for k in [0usize, 1] {
        let a = meta
            .bundle
            .accuracy_on(&store, "final-eval:meta", k, Split::Test, 16)
            .unwrap();
        let b = mix
            .bundle
            .accuracy_on(&store, "final-eval:mix", k, Split::Test, 16)
            .unwrap();
        assert!((a - b).abs() <= 0.05, "domain {k}: meta {a} vs mix {b}");
    }
}

/// Students stay within 0.1 of their teacher's accuracy, over 5 seeds.
#[test]
fn distilled_students_stay_close_to_their_teacher() {
    let (store, vocab) = task(0.8, 2, 300, 7);
    let plan = DistillPlan::uniform(2, 1, 1.0, 0.3).unwrap();
    for seed in 1..=5u64 {
        let teacher = train_meta_teacher(
            &store,
            &[0, 1],
            &vocab,
            small_encoder(&vocab, 2),
            &teacher_cfg(seed, 3),
            &format!("teacher:meta:close:s{seed}"),
        )
        .unwrap()
        .bundle;
        let student_cfg = EncoderConfig {
            num_layers: 1,
            hidden_dim: 24,
            ffn_dim: 48,
            num_heads: 4,
            num_domains: 2,
            ..small_encoder(&vocab, 2)
        };
        let student = distill(
            &[&teacher],
            &DistillMethod::MetaDistill(ExpertiseMode::Labeled(ErrSquared::Indicator)),
            student_cfg,
            &plan,
            &DistillConfig {
                int_epochs: 8,
                pred_epochs: 3,
                batch_size: 16,
                seed,
                ..DistillConfig::default()
            },
            &store,
            &format!("distill:close:s{seed}"),
            0,
            meta_kd_core::data::LabelMode::WithLabels,
        )
        .unwrap();
        let t_acc = teacher
            .accuracy_on(&store, "final-eval:t", 0, Split::Test, 16)
            .unwrap();
        let s_acc = student
            .bundle
            .accuracy_on(&store, "final-eval:s", 0, Split::Test, 16)
            .unwrap();
        assert!(
            t_acc - s_acc <= 0.1,
            "seed {seed}: student {s_acc} fell more than 0.1 below teacher {t_acc}"
        );
    }
}
