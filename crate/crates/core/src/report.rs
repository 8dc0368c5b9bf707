//! Comparison table across run directories.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::parse_key_values;
use crate::pipeline::{coref_name, BIAS_CSV, COREF, FORGETTING};
use crate::trainer::Mode;

/// Preferred column order; other run directories follow alphabetically.
const RUN_ORDER: [&str; 7] = ["base", "sppa", "geep", "sppa-npe", "sppa-no-gn", "geep-no-gn", "sppa-npe-no-gn"];

pub const METRICS: [&str; 7] = [
    "avg_abs_bias",
    "coref_accuracy",
    "coref_accuracy_25",
    "coref_accuracy_50",
    "coref_ties",
    "max_abs_logit_diff",
    "perplexity_ratio",
];

fn is_run_dir(dir: &Path) -> bool {
    [BIAS_CSV, COREF, FORGETTING, "ckpt-100.bin"]
        .iter()
        .any(|f| dir.join(f).is_file())
}

/// Run directories under `runs`, or `runs` itself when it is one.
pub fn run_dirs(runs: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    if !runs.is_dir() {
        return Err(Error::Input(format!("{} is not a directory", runs.display())));
    }
    let name_of = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if is_run_dir(runs) {
        return Ok(vec![(name_of(runs), runs.to_path_buf())]);
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(runs).map_err(|e| Error::io(runs, e))? {
        let path = entry.map_err(|e| Error::io(runs, e))?.path();
        if path.is_dir() && is_run_dir(&path) {
            dirs.push((name_of(&path), path));
        }
    }
    dirs.sort_by_key(|(name, _)| {
        let rank = RUN_ORDER.iter().position(|r| r == name).unwrap_or(RUN_ORDER.len());
        (rank, name.clone())
    });
    Ok(dirs)
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Mean |score| over the rows of a bias CSV.
pub fn avg_abs_from_csv(text: &str) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let score: f64 = line
            .split(',')
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Input(format!("malformed bias row {line:?}")))?;
        total += score.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("bias report has no rows".into()));
    }
    Ok(total / n as f64)
}

fn run_column(dir: &Path) -> Result<Vec<String>> {
    let na = || "NA".to_string();
    let kv = |name: &str| -> Result<Option<std::collections::BTreeMap<String, String>>> {
        Ok(read_optional(&dir.join(name))?.map(|t| parse_key_values(&t)))
    };
    let coref = kv(COREF)?;
    let coref_25 = kv(&coref_name(25))?;
    let coref_50 = kv(&coref_name(50))?;
    let forgetting = kv(FORGETTING)?;
    let get = |m: &Option<std::collections::BTreeMap<String, String>>, key: &str| {
        m.as_ref().and_then(|m| m.get(key).cloned()).unwrap_or_else(na)
    };
    let bias = match read_optional(&dir.join(BIAS_CSV))? {
        Some(text) => avg_abs_from_csv(&text)?.to_string(),
        None => na(),
    };
    Ok(vec![
        bias,
        get(&coref, "accuracy"),
        get(&coref_25, "accuracy"),
        get(&coref_50, "accuracy"),
        get(&coref, "ties"),
        get(&forgetting, "max_abs_logit_diff"),
        get(&forgetting, "perplexity_ratio"),
    ])
}

/// Tab-separated table: one row per metric, one column per run. Missing
/// report files leave `NA` cells.
pub fn build_report(runs: &Path) -> Result<String> {
    let dirs = run_dirs(runs)?;
    if dirs.is_empty() {
        return Err(Error::Input(format!("no run directories under {}", runs.display())));
    }
    let columns: Vec<Vec<String>> = dirs.iter().map(|(_, d)| run_column(d)).collect::<Result<_>>()?;
    let mut out = String::from("metric");
    for (name, _) in &dirs {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for (i, metric) in METRICS.iter().enumerate() {
        out.push_str(metric);
        for col in &columns {
            out.push('\t');
            out.push_str(&col[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Whether a run name follows the mode naming scheme.
pub fn is_known_run(name: &str) -> bool {
    let base = name.strip_suffix("-no-gn").unwrap_or(name);
    base.parse::<Mode>().is_ok()
}
