use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ExperimentError, Result, RunRecord};
use crate::metrics::{render_csv, render_text, report_cells, Scores, REPORT_HEADER};
use crate::model::Variant;

const NOTE: &str = "Every model below is the same small transformer trained from scratch on the same data; \
rows differ only in the fusion block (or its insertion layer). The comparison isolates the fusion effect and \
says nothing about pretrained-model quality.";

const EXTRA: [&str; 3] = ["Action", "Target", "Exact"];

/// Rendered tables and the aggregates behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
    pub groups: Vec<GroupSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub group: String,
    pub label: String,
    pub seeds: Vec<u64>,
    /// Nine metric columns then action, target and exact-match accuracy.
    pub mean: [f64; 12],
    /// Sample standard deviation; `None` for a single run.
    pub std: Option<[f64; 12]>,
}

impl GroupSummary {
    pub fn scores(&self) -> Scores {
        Scores::from_values(self.mean[..9].try_into().expect("nine metric columns"))
    }

    pub fn action_acc(&self) -> f64 {
        self.mean[9]
    }

    pub fn target_acc(&self) -> f64 {
        self.mean[10]
    }

    pub fn exact_match(&self) -> f64 {
        self.mean[11]
    }
}

fn values(r: &RunRecord) -> [f64; 12] {
    let mut v = [0.0; 12];
    v[..9].copy_from_slice(&r.outcome.scores.values());
    v[9] = r.outcome.action_acc;
    v[10] = r.outcome.target_acc;
    v[11] = r.outcome.exact_match;
    v
}

fn variant_rank(v: Variant) -> usize {
    Variant::ALL
        .iter()
        .position(|x| *x == v)
        .unwrap_or(usize::MAX)
}

pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs_dir = dir.join("runs");
    let mut paths: Vec<_> = match fs::read_dir(&runs_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if paths.is_empty() {
        return Err(ExperimentError::Runtime(format!(
            "nothing to report: no run files under {}",
            runs_dir.display()
        )));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)
                .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn fmt(x: f64) -> String {
    format!("{x:.2}")
}

fn group_hash(runs: &[&RunRecord]) -> String {
    let joined: Vec<&str> = runs.iter().map(|r| r.config_hash.as_str()).collect();
    hex::encode(Sha256::digest(joined.join(",").as_bytes()))
}

fn full_row(
    group: &str,
    label: &str,
    seed: &str,
    hash: &str,
    version: &str,
    cells: [String; 12],
) -> Vec<String> {
    let [a, b, c, d, e, f, g, h, i, act, tgt, ex] = cells;
    let mut row = vec![group.to_string()];
    row.extend(report_cells(label, [a, b, c, d, e, f, g, h, i]));
    row.splice(
        2..2,
        [seed.to_string(), hash.to_string(), version.to_string()],
    );
    row.extend([act, tgt, ex]);
    row
}

/// Aggregates `dir/runs/*.json` into per-label mean ± sample std tables.
pub fn render_report(dir: &Path) -> Result<Report> {
    let mut runs = load_runs(dir)?;
    runs.sort_by(|a, b| {
        (
            &a.group,
            variant_rank(a.variant),
            a.fusion_layer_index,
            &a.label,
            a.seed,
        )
            .cmp(&(
                &b.group,
                variant_rank(b.variant),
                b.fusion_layer_index,
                &b.label,
                b.seed,
            ))
    });
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_key: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in &runs {
        let key = (r.group.clone(), r.label.clone());
        if !by_key.contains_key(&key) {
            order.push(key.clone());
        }
        by_key.entry(key).or_default().push(r);
    }

    let mut groups = Vec::new();
    let mut csv_rows = Vec::new();
    let mut text = format!("Note: {NOTE}\n");
    let mut current_group: Option<String> = None;
    let mut mean_rows: Vec<Vec<String>> = Vec::new();
    let mut seed_rows: Vec<Vec<String>> = Vec::new();
    let flush = |text: &mut String,
                 group: &str,
                 mean_rows: &mut Vec<Vec<String>>,
                 seed_rows: &mut Vec<Vec<String>>| {
        let mut header: Vec<&str> = vec!["label", "n"];
        header.extend(&REPORT_HEADER[1..]);
        header.extend(EXTRA);
        text.push_str(&format!("\n[{group}] mean ± sample std over seeds\n"));
        text.push_str(&render_text(&header, mean_rows));
        let mut header: Vec<&str> = vec!["label", "seed", "config"];
        header.extend(&REPORT_HEADER[1..]);
        header.extend(EXTRA);
        text.push_str(&format!("\n[{group}] per seed\n"));
        text.push_str(&render_text(&header, seed_rows));
        mean_rows.clear();
        seed_rows.clear();
    };

    for key in &order {
        let members = &by_key[key];
        let (group, label) = key;
        if current_group.as_deref() != Some(group) {
            if let Some(g) = current_group.take() {
                flush(&mut text, &g, &mut mean_rows, &mut seed_rows);
            }
            current_group = Some(group.clone());
        }
        let vals: Vec<[f64; 12]> = members.iter().map(|r| values(r)).collect();
        let n = vals.len() as f64;
        let mut mean = [0.0; 12];
        for v in &vals {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let std = (vals.len() > 1).then(|| {
            let mut s = [0.0; 12];
            for v in &vals {
                for i in 0..12 {
                    s[i] += (v[i] - mean[i]).powi(2);
                }
            }
            s.map(|x| (x / (n - 1.0)).sqrt())
        });

        for (r, v) in members.iter().zip(&vals) {
            let cells = v.map(fmt);
            csv_rows.push(full_row(
                group,
                label,
                &r.seed.to_string(),
                &r.config_hash,
                &r.version,
                cells.clone(),
            ));
            let mut row = vec![
                label.clone(),
                r.seed.to_string(),
                r.config_hash[..12].to_string(),
            ];
            row.extend(full_row("", "", "", "", "", cells).into_iter().skip(5));
            seed_rows.push(row);
        }
        let hash = group_hash(members);
        let version = &members[0].version;
        csv_rows.push(full_row(
            group,
            label,
            "mean",
            &hash,
            version,
            mean.map(fmt),
        ));
        let std_cells =
            std.map_or_else(|| std::array::from_fn(|_| "-".to_string()), |s| s.map(fmt));
        csv_rows.push(full_row(group, label, "std", &hash, version, std_cells));

        let pm = |i: usize| match std {
            Some(s) => format!("{} ± {}", fmt(mean[i]), fmt(s[i])),
            None => fmt(mean[i]),
        };
        let mut row = vec![label.clone(), members.len().to_string()];
        row.extend(
            full_row("", "", "", "", "", std::array::from_fn(pm))
                .into_iter()
                .skip(5),
        );
        mean_rows.push(row);

        groups.push(GroupSummary {
            group: group.clone(),
            label: label.clone(),
            seeds: members.iter().map(|r| r.seed).collect(),
            mean,
            std,
        });
    }
    if let Some(g) = current_group {
        flush(&mut text, &g, &mut mean_rows, &mut seed_rows);
    }

    let mut header = vec!["group", "label", "seed", "config_hash", "version"];
    header.extend(&REPORT_HEADER[1..]);
    header.extend(EXTRA);
    Ok(Report {
        text,
        csv: render_csv(&header, &csv_rows),
        groups,
    })
}

/// Renders the report and writes `report.txt` and `report.csv` into `dir`.
pub fn write_report(dir: &Path) -> Result<Report> {
    let report = render_report(dir)?;
    for (name, body) in [("report.txt", &report.text), ("report.csv", &report.csv)] {
        let p = dir.join(name);
        fs::write(&p, body)
            .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(report)
}
