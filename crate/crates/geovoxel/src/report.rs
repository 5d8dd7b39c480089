//! Stats-stage output types and the tidy long-format CSV report.
//!
//! CSV schema: `subject,roi,model,layer,metric,value` with metrics from
//! {r, r2, nc, r2_nc, t, p}. Rows are sorted by (subject, roi, model,
//! layer, metric) so reruns are byte-identical. Missing values never emit
//! rows; non-finite values render as an empty field.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// ROI means of test metrics for one (subject, roi, model, layer).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerMeanRow {
    pub subject: String,
    pub roi: String,
    pub model: String,
    pub layer: String,
    pub r: Option<f64>,
    pub r2: Option<f64>,
    pub r2_nc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NcRow {
    pub subject: String,
    pub roi: String,
    pub nc: f64,
}

/// Best-layer selection for one (subject, roi, model): the layer picked on
/// training-side cross-validated scores, plus the layer that happens to win
/// on the test metric (reported for comparison, never used for selection).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BestLayerRow {
    pub subject: String,
    pub roi: String,
    pub model: String,
    pub cv_layer: String,
    pub test_layer: String,
    pub r: Option<f64>,
    pub r2: Option<f64>,
    pub r2_nc: Option<f64>,
    pub r2_nc_test_selected: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TestRow {
    pub roi: String,
    pub model_a: String,
    pub model_b: String,
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct StatsReport {
    pub subjects: Vec<String>,
    pub rois: Vec<String>,
    pub models: Vec<String>,
    pub layer_means: Vec<LayerMeanRow>,
    pub nc_means: Vec<NcRow>,
    pub best_layers: Vec<BestLayerRow>,
    pub tests: Vec<TestRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct CsvRow {
    subject: String,
    roi: String,
    model: String,
    layer: String,
    metric: &'static str,
    value: f64,
}

/// Renders the report CSV. Deterministic: rows are fully sorted and floats
/// print with Rust's shortest round-trip formatting.
pub fn render_csv(stats: &StatsReport) -> String {
    let mut rows: Vec<CsvRow> = Vec::new();
    let mut push = |subject: &str, roi: &str, model: &str, layer: &str, metric: &'static str, value: Option<f64>| {
        if let Some(v) = value {
            rows.push(CsvRow {
                subject: subject.to_string(),
                roi: roi.to_string(),
                model: model.to_string(),
                layer: layer.to_string(),
                metric,
                value: v,
            });
        }
    };

    for m in &stats.layer_means {
        push(&m.subject, &m.roi, &m.model, &m.layer, "r", m.r);
        push(&m.subject, &m.roi, &m.model, &m.layer, "r2", m.r2);
        push(&m.subject, &m.roi, &m.model, &m.layer, "r2_nc", m.r2_nc);
    }
    for n in &stats.nc_means {
        push(&n.subject, &n.roi, "-", "-", "nc", Some(n.nc));
    }
    for b in &stats.best_layers {
        push(&b.subject, &b.roi, &b.model, "best", "r", b.r);
        push(&b.subject, &b.roi, &b.model, "best", "r2", b.r2);
        push(&b.subject, &b.roi, &b.model, "best", "r2_nc", b.r2_nc);
        push(
            &b.subject,
            &b.roi,
            &b.model,
            "best_test",
            "r2_nc",
            b.r2_nc_test_selected,
        );
    }
    for t in &stats.tests {
        let pair = format!("{}_vs_{}", t.model_a, t.model_b);
        push("all", &t.roi, &pair, "best", "t", Some(t.t));
        push("all", &t.roi, &pair, "best", "p", Some(t.p));
    }

    rows.sort_by(|a, b| {
        (&a.subject, &a.roi, &a.model, &a.layer, a.metric)
            .cmp(&(&b.subject, &b.roi, &b.model, &b.layer, b.metric))
    });

    let mut out = String::from("subject,roi,model,layer,metric,value\n");
    for row in rows {
        let value = if row.value.is_finite() {
            format!("{}", row.value)
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.subject, row.roi, row.model, row.layer, row.metric, value
        );
    }
    out
}
