use super::report::{mean_std, render_markdown};
use super::*;
use crate::data::GeneratorSpec;

/// A micro experiment that runs in seconds: 3 tiny domains, tiny models.
fn micro_config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig::Synthetic {
            spec: GeneratorSpec {
                num_domains: 3,
                num_classes: 2,
                train_per_domain: 24,
                dev_per_domain: 8,
                test_per_domain: 8,
                shared_signal: 0.8,
                domain_noise: 0.5,
                seed: 91,
                text_len: 6,
                distractor_rate: 0.05,
                evidence_probs: vec![0.15, 0.35, 0.30, 0.20],
        shared_types_per_class: 24,
        private_types_per_cell: 12,
            },
        },
        vocab_budget: 256,
        max_seq_len: 8,
        teacher_model: ModelShape {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            dropout_rate: 0.1,
        },
        student_model: ModelShape {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            dropout_rate: 0.1,
        },
        teacher: TeacherConfig {
            epochs: 1,
            batch_size: 8,
            ..TeacherConfig::default()
        },
        distill: DistillConfig {
            int_epochs: 1,
            pred_epochs: 1,
            batch_size: 8,
            ..DistillConfig::default()
        },
        temperature: 1.0,
        gamma2: 0.3,
        seeds,
        protocol: ProtocolParams::default(),
    }
}

#[test]
fn record_set_rejects_duplicate_keys() {
    let mut set = RecordSet::default();
    let record = ResultRecord {
        protocol: "main".into(),
        condition: "teacher-meta".into(),
        domain: "d0".into(),
        seed: 1,
        accuracy: 0.8,
        wall_time_s: 1.0,
        config_hash: "h".into(),
    };
    set.push(record.clone()).unwrap();
    let err = set.push(record).unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

#[test]
fn config_hash_is_stable_and_sensitive() {
    let a = micro_config(vec![1]);
    let b = micro_config(vec![1]);
    assert_eq!(a.hash(), b.hash());
    let mut c = micro_config(vec![1]);
    c.gamma2 = 0.4;
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn mean_std_matches_independent_recomputation() {
    let values = [0.81, 0.79, 0.85, 0.8, 0.77];
    let (mean, std) = mean_std(&values);
    // spreadsheet-style recomputation
    let m: f64 = values.iter().sum::<f64>() / 5.0;
    let var: f64 = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
    assert!((mean - m).abs() < 1e-15);
    assert!((std - var.sqrt()).abs() < 1e-15);
    let (single, zero) = mean_std(&[0.5]);
    assert_eq!((single, zero), (0.5, 0.0));
}

#[test]
fn markdown_report_shapes_and_embeds_metadata() {
    // 2 domains x 2 conditions x 1 seed -> 4 accuracy cells
    let mut records = Vec::new();
    for condition in ["teacher-meta", "meta->meta-distill"] {
        for domain in ["alpha", "beta"] {
            records.push(ResultRecord {
                protocol: "main".into(),
                condition: condition.into(),
                domain: domain.into(),
                seed: 7,
                accuracy: 0.5,
                wall_time_s: 0.1,
                config_hash: "cafebabe".into(),
            });
        }
    }
    let md = render_markdown(&records, "cafebabe", &[7]);
    assert!(md.contains("`cafebabe`"));
    assert!(md.contains("seeds: 7"));
    assert_eq!(md.matches("0.500 ± 0.000").count(), 4 + 2); // cells + averages
    assert!(md.contains("| teacher-meta |"));
    assert!(md.contains("| alpha | beta |"));
}

#[test]
fn records_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    let records = vec![
        ResultRecord {
            protocol: "main".into(),
            condition: "multi->mtn-kd".into(),
            domain: "books, movies".into(), // comma forces quoting
            seed: 3,
            accuracy: 0.8125,
            wall_time_s: 2.0,
            config_hash: "ff00".into(),
        },
        ResultRecord {
            protocol: "zeroshot".into(),
            condition: "zs-meta->meta-distill".into(),
            domain: "fiction".into(),
            seed: 4,
            accuracy: 0.75,
            wall_time_s: 1.0,
            config_hash: "ff00".into(),
        },
    ];
    write_records_csv(&records, &path).unwrap();
    let back = read_records_csv(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].domain, "books, movies");
    assert_eq!(back[0].accuracy, 0.8125);
    assert_eq!(back[1].condition, "zs-meta->meta-distill");
}

#[test]
fn hygiene_rules_catch_violations() {
    let params = ProtocolParams {
        held_out_domain: Some("fiction".into()),
        ..ProtocolParams::default()
    };
    let mut log = AccessLog::default();
    // clean entries
    log.record("teacher:meta:s1", "gov", Split::Train, crate::data::Access::Label);
    log.record("final-eval:teacher-meta:gov:s1", "gov", Split::Test, crate::data::Access::Label);
    assert!(hygiene_violations(&log, Protocol::Main, &params).is_empty());
    // a training path reading a test split
    log.record("teacher:meta:s1", "gov", Split::Test, crate::data::Access::Text);
    let v = hygiene_violations(&log, Protocol::Main, &params);
    assert_eq!(v.len(), 1);
    assert!(v[0].contains("test split"), "{}", v[0]);
    // a single-domain teacher touching a foreign domain
    let mut log = AccessLog::default();
    log.record("teacher:single:gov:s1", "travel", Split::Train, crate::data::Access::Text);
    let v = hygiene_violations(&log, Protocol::Main, &params);
    assert_eq!(v.len(), 1);
    assert!(v[0].contains("foreign") || v[0].contains("read domain"), "{}", v[0]);
    // held-out train labels outside the skyline (zero-shot only)
    let mut log = AccessLog::default();
    log.record("distill:zs-meta->meta-distill:fiction:s1", "fiction", Split::Train, crate::data::Access::Label);
    assert!(hygiene_violations(&log, Protocol::Main, &params).is_empty());
    let v = hygiene_violations(&log, Protocol::Zeroshot, &params);
    assert_eq!(v.len(), 1);
    assert!(v[0].contains("held-out"), "{}", v[0]);
    // the skyline teacher is allowed to
    let mut log = AccessLog::default();
    log.record("teacher:zs-skyline:fiction:s1", "fiction", Split::Train, crate::data::Access::Label);
    assert!(hygiene_violations(&log, Protocol::Zeroshot, &params).is_empty());
}

#[test]
fn main_protocol_produces_the_full_condition_grid() {
    let config = micro_config(vec![11]);
    let output = run_protocol(&config, Protocol::Main).unwrap();
    // 4 teacher conditions + 5 student conditions, over 3 domains, 1 seed
    assert_eq!(output.records.len(), 9 * 3);
    let conditions: BTreeSet<&str> =
        output.records.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(
        conditions,
        BTreeSet::from([
            "teacher-single",
            "teacher-mix",
            "teacher-meta",
            "teacher-ensemble",
            "single->kd",
            "mix->kd",
            "meta->kd",
            "multi->mtn-kd",
            "meta->meta-distill",
        ])
    );
    let hash = config.hash();
    assert!(output.records.iter().all(|r| r.config_hash == hash));
    assert!(output
        .records
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn protocol_reruns_and_added_seeds_leave_metrics_unchanged() {
    let config = micro_config(vec![11]);
    let a = run_protocol(&config, Protocol::Main).unwrap();
    let b = run_protocol(&config, Protocol::Main).unwrap();
    let key = |r: &ResultRecord| (r.condition.clone(), r.domain.clone(), r.seed);
    let metrics =
        |o: &ProtocolOutput| -> Vec<_> { o.records.iter().map(|r| (key(r), r.accuracy)).collect() };
    assert_eq!(metrics(&a), metrics(&b), "rerun changed a metric");
    // seed isolation: adding a seed must not disturb seed 11's records
    let two = run_protocol(&micro_config(vec![11, 12]), Protocol::Main).unwrap();
    let first: Vec<_> = metrics(&two)
        .into_iter()
        .filter(|((_, _, s), _)| *s == 11)
        .collect();
    assert_eq!(metrics(&a), first, "adding a seed changed seed 11's records");
}

#[test]
fn zeroshot_protocol_produces_held_out_records_only() {
    let mut config = micro_config(vec![5]);
    config.protocol.held_out_domain = Some("domain0".into());
    let output = run_protocol(&config, Protocol::Zeroshot).unwrap();
    // 1 meta + 2 out-domain singles + 1 skyline
    assert_eq!(output.records.len(), 4);
    assert!(output.records.iter().all(|r| r.domain == "domain0"));
    let conditions: BTreeSet<&str> =
        output.records.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(
        conditions,
        BTreeSet::from([
            "zs-meta->meta-distill",
            "zs-out-single(domain1)->kd",
            "zs-out-single(domain2)->kd",
            "zs-skyline-single->kd",
        ])
    );
}

#[test]
fn zeroshot_requires_a_held_out_domain_and_enough_others() {
    let config = micro_config(vec![5]);
    assert!(run_protocol(&config, Protocol::Zeroshot).is_err());
}

#[test]
fn fewshot_protocol_emits_one_curve_row_per_rate_domain_seed() {
    let mut config = micro_config(vec![5]);
    config.protocol.sample_rates = vec![0.5, 1.0];
    let output = run_protocol(&config, Protocol::Fewshot).unwrap();
    assert_eq!(output.fewshot_curve.len(), 2 * 3);
    let mut keys: Vec<(String, String, u64)> = output
        .fewshot_curve
        .iter()
        .map(|p| (format!("{}", p.rate), p.domain.clone(), p.seed))
        .collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 6, "duplicate curve rows");
    // two conditions per (rate, domain)
    assert_eq!(output.records.len(), 2 * 2 * 3);
    for p in &output.fewshot_curve {
        let expect = (p.accuracy_meta_distill - p.accuracy_single_kd) / p.accuracy_single_kd;
        assert!((p.improvement_rate - expect).abs() < 1e-12);
    }
}

#[test]
fn ablation_protocol_covers_the_grid_and_gamma0_drops_the_tk_term() {
    let mut config = micro_config(vec![5]);
    config.protocol.gamma2_grid = vec![0.0, 0.3];
    let output = run_protocol(&config, Protocol::AblationG2).unwrap();
    assert_eq!(output.ablation_curve.len(), 2 * 3);
    assert_eq!(output.records.len(), 2 * 3);
    for g in [0.0, 0.3] {
        for domain in ["domain0", "domain1", "domain2"] {
            assert!(
                output
                    .ablation_curve
                    .iter()
                    .any(|p| p.gamma2 == g && p.domain == domain),
                "missing curve point ({g}, {domain})"
            );
        }
    }
}

#[test]
fn emit_report_writes_all_files() {
    let mut config = micro_config(vec![5]);
    config.protocol.sample_rates = vec![0.5];
    let output = run_protocol(&config, Protocol::Fewshot).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&output, &config, dir.path()).unwrap();
    assert!(dir.path().join("records.csv").exists());
    assert!(dir.path().join("report.md").exists());
    assert!(dir.path().join("fewshot_curve.csv").exists());
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains(&config.hash()));
    let curve = std::fs::read_to_string(dir.path().join("fewshot_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3); // header + one row per domain
}
