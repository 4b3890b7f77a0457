//! Multi-seed aggregation of evaluation reports into mean ± std tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::eval::{EvalReport, SubsetReport};
use crate::screen::MAX_TURNS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single run.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(MeanStd { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `agent/mode[/user]`, plus `/unmasked` when masking was off.
    pub group: String,
    pub subset: String,
    pub runs: usize,
    pub f1: Vec<Option<MeanStd>>,
    pub gamma: Option<MeanStd>,
}

fn group_key(r: &EvalReport) -> String {
    let mode = serde_json::to_value(r.mode).expect("mode serializes");
    let mut key = format!("{}/{}", r.agent, mode.as_str().unwrap_or("?"));
    if let Some(u) = r.user {
        key.push('/');
        key.push_str(u.name());
    }
    if !r.masked {
        key.push_str("/unmasked");
    }
    key
}

/// Groups reports that differ only in seed and averages every cell over the
/// runs in which the subset was non-empty.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<String, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(group_key(r)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (group, rs) in groups {
        for (subset, pick) in [("all", (|r: &EvalReport| &r.all) as fn(&EvalReport) -> &SubsetReport), ("challenging", |r| &r.challenging)] {
            let subs: Vec<&SubsetReport> = rs.iter().map(|r| pick(r)).filter(|s| s.count > 0).collect();
            let f1 = (0..MAX_TURNS)
                .map(|t| mean_std(&subs.iter().filter_map(|s| s.f1.map(|f| f[t])).collect::<Vec<_>>()))
                .collect();
            let gamma = mean_std(&subs.iter().filter_map(|s| s.gamma).collect::<Vec<_>>());
            rows.push(AggregateRow { group: group.clone(), subset: subset.into(), runs: subs.len(), f1, gamma });
        }
    }
    rows
}

fn cell(c: &Option<MeanStd>) -> String {
    match c {
        Some(c) => format!("{:.1}±{:.1}", 100.0 * c.mean, 100.0 * c.std),
        None => "-".into(),
    }
}

/// Fixed-width text table, values in percent.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut header = vec!["group".to_owned(), "subset".into(), "runs".into()];
    header.extend((0..MAX_TURNS).map(|t| format!("F1@{t}")));
    header.push("Γ".into());
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![r.group.clone(), r.subset.clone(), r.runs.to_string()];
        line.extend(r.f1.iter().map(cell));
        line.push(cell(&r.gamma));
        table.push(line);
    }
    let widths: Vec<usize> =
        (0..table[0].len()).map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> =
            line.iter().zip(&widths).map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count()))).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// One row per group and subset; mean and std columns per cell.
pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("group,subset,runs");
    for t in 0..MAX_TURNS {
        s.push_str(&format!(",f1_{t}_mean,f1_{t}_std"));
    }
    s.push_str(",gamma_mean,gamma_std\n");
    let fmt = |c: &Option<MeanStd>| c.map(|c| format!("{},{}", c.mean, c.std)).unwrap_or_else(|| ",".into());
    for r in rows {
        s.push_str(&format!("{},{},{}", r.group, r.subset, r.runs));
        for c in &r.f1 {
            s.push(',');
            s.push_str(&fmt(c));
        }
        s.push(',');
        s.push_str(&fmt(&r.gamma));
        s.push('\n');
    }
    s
}
