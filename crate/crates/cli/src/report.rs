use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use aclrec_core::evaluation::{EvalProtocol, EvalReport, Weighting};
use aclrec_core::models::ModelKind;
use aclrec_core::training::TrainMode;

use crate::commands::{EVAL_DIR, RESOLVED_CONFIG, TRAIN_DIR};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    mode: String,
    f_kind: ModelKind,
    g_kind: Option<ModelKind>,
    weighting: Weighting,
}

struct Loaded {
    run: PathBuf,
    key: GroupKey,
    report: EvalReport,
}

fn read_run(run: &Path) -> Result<Vec<Loaded>, CliError> {
    let cfg_path = [TRAIN_DIR, EVAL_DIR]
        .iter()
        .map(|d| run.join(d).join(RESOLVED_CONFIG))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::Data(format!("{}: no resolved config found", run.display())))?;
    let text = fs::read_to_string(&cfg_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg_path.display())))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg_path.display())))?;
    let train = &config.train.config;

    let eval_dir = run.join(EVAL_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&eval_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", eval_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no evaluation reports; run `aclrec evaluate` first",
            eval_dir.display()
        )));
    }
    files
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let report: EvalReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok(Loaded {
                run: run.to_path_buf(),
                key: GroupKey {
                    mode: train.mode.to_string(),
                    f_kind: train.f_kind,
                    g_kind: (train.mode != TrainMode::Erm).then_some(train.g_kind),
                    weighting: report.weighting,
                },
                report,
            })
        })
        .collect()
}

fn protocol_diff(a: &EvalProtocol, b: &EvalProtocol) -> Vec<String> {
    let mut diff = Vec::new();
    if a.n_eval_negatives != b.n_eval_negatives {
        diff.push(format!(
            "n_eval_negatives: {} vs {}",
            a.n_eval_negatives, b.n_eval_negatives
        ));
    }
    if a.cutoffs != b.cutoffs {
        diff.push(format!("cutoffs: {:?} vs {:?}", a.cutoffs, b.cutoffs));
    }
    if a.self_normalize != b.self_normalize {
        diff.push(format!(
            "self_normalize: {} vs {}",
            a.self_normalize, b.self_normalize
        ));
    }
    if a.mu != b.mu {
        diff.push(format!("mu: {} vs {}", a.mu, b.mu));
    }
    if a.full_catalog != b.full_catalog {
        diff.push(format!(
            "full_catalog: {} vs {}",
            a.full_catalog, b.full_catalog
        ));
    }
    diff
}

/// Mean and sample standard deviation (`None` for a single value).
fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Aggregates reports into one row per (mode, f, g, weighting) with mean and
/// std of every Hit@K and NDCG@K over runs.
pub fn aggregate(runs: &[PathBuf]) -> Result<(Table, String), CliError> {
    let mut all = Vec::new();
    for run in runs {
        all.extend(read_run(run)?);
    }
    let first = &all[0];
    for other in &all[1..] {
        let diff = protocol_diff(&first.report.protocol, &other.report.protocol);
        if !diff.is_empty() {
            return Err(CliError::Config(format!(
                "evaluation protocols differ between {} and {}:\n  {}",
                first.run.display(),
                other.run.display(),
                diff.join("\n  ")
            )));
        }
    }
    let cutoffs = first.report.protocol.cutoffs.clone();
    let mut groups: BTreeMap<GroupKey, Vec<&EvalReport>> = BTreeMap::new();
    for l in &all {
        groups.entry(l.key.clone()).or_default().push(&l.report);
    }

    let mut header: Vec<String> = ["mode", "f_kind", "g_kind", "weighting", "runs"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in &cutoffs {
        for m in ["hit", "ndcg"] {
            header.push(format!("{m}@{k}_mean"));
            header.push(format!("{m}@{k}_std"));
        }
    }
    let mut rows = Vec::new();
    let mut text_rows = Vec::new();
    for (key, reports) in &groups {
        let mut row = vec![
            key.mode.clone(),
            key.f_kind.to_string(),
            key.g_kind.map_or(String::new(), |g| g.to_string()),
            key.weighting.to_string(),
            reports.len().to_string(),
        ];
        let mut cells = row.clone();
        for &k in &cutoffs {
            for metric in [EvalReport::hit, EvalReport::ndcg] {
                let values: Vec<f64> = reports
                    .iter()
                    .map(|r| metric(r, k).unwrap_or(f64::NAN))
                    .collect();
                let (mean, std) = mean_std(&values);
                row.push(format!("{mean:.4}"));
                row.push(std.map_or(String::new(), |s| format!("{s:.4}")));
                cells.push(match std {
                    Some(s) => format!("{:.2} ({:.2})", 100.0 * mean, 100.0 * s),
                    None => format!("{:.2}", 100.0 * mean),
                });
            }
        }
        rows.push(row);
        text_rows.push(cells);
    }

    let mut text_header: Vec<String> = header[..5].to_vec();
    for k in &cutoffs {
        text_header.push(format!("Hit@{k}"));
        text_header.push(format!("NDCG@{k}"));
    }
    let widths: Vec<usize> = (0..text_header.len())
        .map(|c| {
            text_rows
                .iter()
                .map(|r| r[c].len())
                .chain([text_header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut text = String::new();
    for line in std::iter::once(&text_header).chain(&text_rows) {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(text, "{}", cells.join("  ").trim_end());
    }
    let _ = writeln!(text, "values in %, mean (std) over runs");
    Ok((Table { header, rows }, text))
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let (table, text) = aggregate(runs)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let mut csv = table.header.join(",");
    csv.push('\n');
    for row in &table.rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    let txt_path = out.join("report.txt");
    fs::write(&txt_path, &text)
        .map_err(|e| CliError::Data(format!("{}: {e}", txt_path.display())))?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, None));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn protocol_differences_are_listed() {
        let a = EvalProtocol::default();
        let b = EvalProtocol {
            cutoffs: vec![5, 10],
            ..EvalProtocol::default()
        };
        let diff = protocol_diff(&a, &b);
        assert_eq!(diff.len(), 1);
        assert!(diff[0].starts_with("cutoffs"));
        assert!(protocol_diff(&a, &a).is_empty());
    }
}
