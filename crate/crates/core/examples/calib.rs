//! Scratch calibration sweep (not part of the deliverable).
use meta_kd_core::harness::*;

fn main() {
    let config = ExperimentConfig::default();
    let out = run_protocol(&config, Protocol::Main).unwrap();
    let mut by_cond = std::collections::BTreeMap::<String, std::collections::BTreeMap<u64, (f64, usize)>>::new();
    for r in &out.records {
        let e = by_cond.entry(r.condition.clone()).or_default().entry(r.seed).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    println!("=== main (per-seed domain means) ===");
    for (cond, seeds) in &by_cond {
        let per_seed: Vec<f64> = seeds.values().map(|(s, n)| s / *n as f64).collect();
        let mean: f64 = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        println!("{cond}: mean {mean:.4}  per-seed {:?}", per_seed.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }

    let out = run_protocol(&config, Protocol::Fewshot).unwrap();
    let mut by_rate = std::collections::BTreeMap::<String, (f64, f64, f64, usize)>::new();
    for p in &out.fewshot_curve {
        let e = by_rate.entry(format!("{}", p.rate)).or_default();
        e.0 += p.improvement_rate; e.1 += p.accuracy_single_kd; e.2 += p.accuracy_meta_distill; e.3 += 1;
    }
    println!("=== fewshot ===");
    for (rate, (imp, a, b, n)) in by_rate {
        println!("rate {rate}: improvement {:.4}  single {:.4}  meta {:.4}", imp / n as f64, a / n as f64, b / n as f64);
    }
}
