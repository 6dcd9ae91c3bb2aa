use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One row of results. Cost fields are only filled by benchmarking runs,
/// since wall-clock numbers would break run-to-run reproducibility of the
/// other reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub run_id: String,
    pub label: String,
    pub generator: String,
    pub k: usize,
    pub n_requests: usize,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub hr_at_1: Option<f64>,
    pub mean_cost_ms: Option<f64>,
    pub p99_cost_ms: Option<f64>,
    pub config: serde_json::Value,
}

/// First 12 hex digits of SHA-256 over the given byte strings.
pub fn run_id(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned plain-text table: one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let header = ["Model", "Generator", "K", "AUC", "LogLoss", "HR@1", "Cost(ms)", "p99(ms)"];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.generator.clone(),
                r.k.to_string(),
                cell(r.auc, 4),
                cell(r.logloss, 4),
                cell(r.hr_at_1, 4),
                cell(r.mean_cost_ms, 3),
                cell(r.p99_cost_ms, 3),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in &rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label: &str) -> MetricsReport {
        MetricsReport {
            run_id: run_id(&[label.as_bytes()]),
            label: label.into(),
            generator: "fpsm".into(),
            k: 100,
            n_requests: 10,
            auc: Some(0.7123456),
            logloss: None,
            hr_at_1: Some(0.5),
            mean_cost_ms: None,
            p99_cost_ms: None,
            config: serde_json::json!({"alpha": 0.1}),
        }
    }

    #[test]
    fn run_id_is_stable_hex() {
        let a = run_id(&[b"abc", b"d"]);
        assert_eq!(a.len(), 12);
        assert_eq!(a, run_id(&[b"abc", b"d"]));
        assert_ne!(a, run_id(&[b"ab", b"cd"]));
    }

    #[test]
    fn table_layout() {
        let t = format_table(&[report("PIER"), report("OCPM-only")]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("Model"));
        assert!(lines[2].contains("0.7123") && lines[2].contains("  -  "));
    }

    #[test]
    fn json_schema_is_fixed() {
        let v = serde_json::to_value(report("x")).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 11);
        let mut extra = v.clone();
        extra["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<MetricsReport>(extra).is_err());
    }
}
