//! Text, JSON and CSV renderings of comparison results and curves.

use std::fmt::Write as _;

use crate::arch_map::ProjectionKind;
use crate::canonical;
use crate::compare::{ComparisonReport, CorrelationMatrix};
use crate::error::Result;
use crate::fingerprint::{normalize_values, Fingerprint};

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn compare_json(report: &ComparisonReport) -> String {
    canonical::to_string(report, true)
}

/// One row per kind, then an `aggregate` row carrying the verdict.
pub fn compare_csv(report: &ComparisonReport) -> String {
    let mut rows = vec![[
        "model_a",
        "model_b",
        "kind",
        "r",
        "p_value",
        "n",
        "interpolated_side",
        "verdict",
    ]
    .map(String::from)
    .to_vec()];
    for k in &report.per_kind {
        rows.push(vec![
            report.model_a.clone(),
            report.model_b.clone(),
            k.kind.to_string(),
            k.r.to_string(),
            k.p_value.to_string(),
            k.n.to_string(),
            k.interpolated_side.to_string(),
            String::new(),
        ]);
    }
    rows.push(vec![
        report.model_a.clone(),
        report.model_b.clone(),
        "aggregate".into(),
        report.aggregate.to_string(),
        String::new(),
        String::new(),
        String::new(),
        report.verdict.to_string(),
    ]);
    csv_string(rows)
}

pub fn compare_text(report: &ComparisonReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "A: {}  ({})", report.model_a, report.hash_a);
    let _ = writeln!(s, "B: {}  ({})", report.model_b, report.hash_b);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<6} {:>10} {:>12} {:>5}  interpolated",
        "kind", "r", "p", "n"
    );
    for k in &report.per_kind {
        let _ = writeln!(
            s,
            "{:<6} {:>10.6} {:>12.4e} {:>5}  {}",
            k.kind.as_str(),
            k.r,
            k.p_value,
            k.n,
            k.interpolated_side
        );
    }
    let kinds: Vec<&str> = report.aggregate_kinds.iter().map(|k| k.as_str()).collect();
    let _ = writeln!(s);
    let _ = writeln!(s, "aggregate ({}): {:.6}", kinds.join(","), report.aggregate);
    let _ = writeln!(
        s,
        "verdict: {}  (t_high {}, t_low {})",
        report.verdict, report.thresholds_used.t_high, report.thresholds_used.t_low
    );
    s
}

/// N x N grid with a `model_id` header row and first column; failed cells
/// are empty.
pub fn grid_csv(ids: &[String], grid: &[Vec<Option<f64>>]) -> String {
    let mut header = vec!["model_id".to_string()];
    header.extend(ids.iter().cloned());
    let mut rows = vec![header];
    for (id, row) in ids.iter().zip(grid) {
        let mut r = vec![id.clone()];
        r.extend(row.iter().map(|v| cell(*v)));
        rows.push(r);
    }
    csv_string(rows)
}

pub fn matrix_json(matrix: &CorrelationMatrix) -> String {
    canonical::to_string(matrix, true)
}

/// Long-format per-layer curves: `model_id,kind,layer,value`. With
/// `kinds` unset each fingerprint contributes all of its kinds.
pub fn curves_csv(fps: &[Fingerprint], kinds: Option<&[ProjectionKind]>, normalize: bool) -> Result<String> {
    let mut rows = vec![["model_id", "kind", "layer", "value"].map(String::from).to_vec()];
    for fp in fps {
        let wanted = match kinds {
            Some(k) => k.to_vec(),
            None => fp.kind_list(),
        };
        for kind in wanted {
            let raw = fp.sequence(kind)?.values;
            let values = if normalize {
                normalize_values(&raw, &format!("{} {kind}", fp.model_id))?
            } else {
                raw
            };
            for (layer, v) in values.iter().enumerate() {
                rows.push(vec![
                    fp.model_id.clone(),
                    kind.to_string(),
                    layer.to_string(),
                    v.to_string(),
                ]);
            }
        }
    }
    Ok(csv_string(rows))
}
