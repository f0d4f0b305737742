//! Result files: a raw-record CSV, plot-ready curve CSVs, and a Markdown
//! table of mean ± std accuracy per (condition, domain) over seeds.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::teacher::TrainError;

use super::{ExperimentConfig, ProtocolOutput, ResultRecord};

type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Invalid(format!("{}: {e}", path.display()))
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write raw records as CSV.
pub fn write_records_csv(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut out = String::from("protocol,condition,domain,seed,accuracy,wall_time_s,config_hash\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{}\n",
            csv_field(&r.protocol),
            csv_field(&r.condition),
            csv_field(&r.domain),
            r.seed,
            r.accuracy,
            r.wall_time_s,
            r.config_hash
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Read records back from [`write_records_csv`] output.
pub fn read_records_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(line);
        if fields.len() != 7 {
            return Err(TrainError::Invalid(format!(
                "{}:{}: expected 7 fields, got {}",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| TrainError::Invalid(format!("bad {what} '{s}'")))
        };
        records.push(ResultRecord {
            protocol: fields[0].clone(),
            condition: fields[1].clone(),
            domain: fields[2].clone(),
            seed: fields[3]
                .parse()
                .map_err(|_| TrainError::Invalid(format!("bad seed '{}'", fields[3])))?,
            accuracy: parse_f(&fields[4], "accuracy")?,
            wall_time_s: parse_f(&fields[5], "wall_time_s")?,
            config_hash: fields[6].clone(),
        });
    }
    Ok(records)
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Sample mean and (n-1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Render the Markdown report: one table per protocol with conditions as
/// rows (in first-appearance order), domains as columns, mean ± std over
/// seeds in each cell, and a per-seed domain-average column.
pub fn render_markdown(records: &[ResultRecord], config_hash: &str, seeds: &[u64]) -> String {
    let mut out = String::from("# Experiment report\n\n");
    out.push_str(&format!("- config hash: `{config_hash}`\n"));
    out.push_str(&format!(
        "- seeds: {}\n\n",
        seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    let mut protocols: Vec<String> = Vec::new();
    for r in records {
        if !protocols.contains(&r.protocol) {
            protocols.push(r.protocol.clone());
        }
    }
    for protocol in &protocols {
        let subset: Vec<&ResultRecord> =
            records.iter().filter(|r| &r.protocol == protocol).collect();
        let mut domains: Vec<String> = Vec::new();
        let mut conditions: Vec<String> = Vec::new();
        for r in &subset {
            if !domains.contains(&r.domain) {
                domains.push(r.domain.clone());
            }
            if !conditions.contains(&r.condition) {
                conditions.push(r.condition.clone());
            }
        }
        domains.sort();
        out.push_str(&format!("## Protocol: {protocol}\n\n"));
        out.push_str(&format!("| condition | {} | average |\n", domains.join(" | ")));
        out.push_str(&format!("|---{}|---|\n", "|---".repeat(domains.len())));
        for condition in &conditions {
            let mut row = format!("| {condition} |");
            let seed_set: BTreeSet<u64> = subset
                .iter()
                .filter(|r| &r.condition == condition)
                .map(|r| r.seed)
                .collect();
            for domain in &domains {
                let values: Vec<f64> = subset
                    .iter()
                    .filter(|r| &r.condition == condition && &r.domain == domain)
                    .map(|r| r.accuracy)
                    .collect();
                if values.is_empty() {
                    row.push_str(" - |");
                } else {
                    let (mean, std) = mean_std(&values);
                    row.push_str(&format!(" {mean:.3} ± {std:.3} |"));
                }
            }
            // per-seed average over the domains this condition covers
            let mut per_seed: Vec<f64> = Vec::new();
            for &seed in &seed_set {
                let values: Vec<f64> = subset
                    .iter()
                    .filter(|r| &r.condition == condition && r.seed == seed)
                    .map(|r| r.accuracy)
                    .collect();
                if !values.is_empty() {
                    per_seed.push(values.iter().sum::<f64>() / values.len() as f64);
                }
            }
            let (mean, std) = mean_std(&per_seed);
            row.push_str(&format!(" {mean:.3} ± {std:.3} |"));
            out.push_str(&row);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Write every output file for one protocol run into `dir`:
/// `records.csv`, `report.md`, and the plot-ready curve CSVs when present.
pub fn emit_report(output: &ProtocolOutput, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    if output.records.is_empty() {
        return Err(TrainError::Invalid("no records to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_records_csv(&output.records, &dir.join("records.csv"))?;
    let md = render_markdown(&output.records, &config.hash(), &config.seeds);
    std::fs::write(dir.join("report.md"), md).map_err(io_err(dir))?;
    if !output.fewshot_curve.is_empty() {
        let path = dir.join("fewshot_curve.csv");
        let mut file = std::fs::File::create(&path).map_err(io_err(&path))?;
        writeln!(
            file,
            "rate,domain,seed,accuracy_single_kd,accuracy_meta_distill,improvement_rate"
        )
        .map_err(io_err(&path))?;
        for p in &output.fewshot_curve {
            writeln!(
                file,
                "{},{},{},{},{},{}",
                p.rate,
                csv_field(&p.domain),
                p.seed,
                p.accuracy_single_kd,
                p.accuracy_meta_distill,
                p.improvement_rate
            )
            .map_err(io_err(&path))?;
        }
    }
    if !output.ablation_curve.is_empty() {
        let path = dir.join("ablation_curve.csv");
        let mut file = std::fs::File::create(&path).map_err(io_err(&path))?;
        writeln!(file, "gamma2,domain,seed,accuracy").map_err(io_err(&path))?;
        for p in &output.ablation_curve {
            writeln!(
                file,
                "{},{},{},{}",
                p.gamma2,
                csv_field(&p.domain),
                p.seed,
                p.accuracy
            )
            .map_err(io_err(&path))?;
        }
    }
    Ok(())
}
