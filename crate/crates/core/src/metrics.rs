//! Confusion counts, per-tag metrics and report rendering.
//!
//! Positive class = generated/inpainted. With `P = tp + fn` and `R = tn + fp`:
//! Acc = (tp + tn) / total, F1 = 2tp / (2tp + fp + fn), F-Acc = tp / P,
//! R-Acc = tn / R.
//!
//! Degenerate cases: F1 is 1.0 when tp = fp = fn = 0 (nothing to find and
//! nothing falsely flagged) and follows the formula otherwise, so a tag with
//! no positives but some false positives scores 0. F-Acc (R-Acc) is `None`
//! when the tag has no generated (real) records; such tags are skipped when
//! averaging that column.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::feature_store::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, label: Label, predicted_positive: bool) {
        match (label.is_positive(), predicted_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let f1_den = 2 * self.tp + self.fp + self.fn_;
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()).unwrap_or(0.0),
            f1: ratio(2 * self.tp, f1_den).unwrap_or(1.0),
            f_acc: ratio(self.tp, self.positives()),
            r_acc: ratio(self.tn, self.negatives()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub f_acc: Option<f64>,
    pub r_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub tag: String,
    pub n: u64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

impl TagReport {
    fn new(tag: String, counts: ConfusionCounts) -> Self {
        TagReport {
            tag,
            n: counts.total(),
            metrics: counts.metrics(),
            counts,
        }
    }
}

/// Unweighted average over tags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub f1: f64,
    pub accuracy: f64,
    pub f_acc: Option<f64>,
    pub r_acc: Option<f64>,
}

type Getter = fn(&Metrics) -> Option<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub tags: Vec<TagReport>,
    pub overall: TagReport,
    pub mean: MeanRow,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    /// Builds a report from per-tag counts, keeping the given tag order.
    pub fn from_counts(threshold: f64, per_tag: Vec<(String, ConfusionCounts)>) -> Self {
        let mut total = ConfusionCounts::default();
        for (_, c) in &per_tag {
            total.add(c);
        }
        let tags: Vec<TagReport> = per_tag
            .into_iter()
            .map(|(tag, counts)| TagReport::new(tag, counts))
            .collect();
        let mean = MeanRow {
            f1: mean_of(tags.iter().map(|t| Some(t.metrics.f1))).unwrap_or(0.0),
            accuracy: mean_of(tags.iter().map(|t| Some(t.metrics.accuracy))).unwrap_or(0.0),
            f_acc: mean_of(tags.iter().map(|t| t.metrics.f_acc)),
            r_acc: mean_of(tags.iter().map(|t| t.metrics.r_acc)),
        };
        MetricsReport {
            threshold,
            tags,
            overall: TagReport::new("all".into(), total),
            mean,
        }
    }

    /// Sums counts tag-wise across reports; tags keep first-appearance order.
    pub fn merge(reports: &[MetricsReport]) -> Self {
        let mut per_tag: Vec<(String, ConfusionCounts)> = Vec::new();
        for r in reports {
            for t in &r.tags {
                match per_tag.iter_mut().find(|(tag, _)| *tag == t.tag) {
                    Some((_, c)) => c.add(&t.counts),
                    None => per_tag.push((t.tag.clone(), t.counts)),
                }
            }
        }
        let threshold = reports.first().map_or(0.5, |r| r.threshold);
        MetricsReport::from_counts(threshold, per_tag)
    }

    pub fn tag(&self, tag: &str) -> Option<&TagReport> {
        self.tags.iter().find(|t| t.tag == tag)
    }

    /// Columns: tag, f1, acc, f_acc, r_acc, n; a final `mean` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("tag,f1,acc,f_acc,r_acc,n\n");
        for t in &self.tags {
            let m = &t.metrics;
            writeln!(
                out,
                "{},{:.6},{:.6},{},{},{}",
                csv_field(&t.tag),
                m.f1,
                m.accuracy,
                opt(m.f_acc),
                opt(m.r_acc),
                t.n
            )
            .unwrap();
        }
        writeln!(
            out,
            "mean,{:.6},{:.6},{},{},{}",
            self.mean.f1,
            self.mean.accuracy,
            opt(self.mean.f_acc),
            opt(self.mean.r_acc),
            self.overall.n
        )
        .unwrap();
        out
    }

    /// Tags as columns, metrics (in percent) as rows, plus a Mean column.
    pub fn to_markdown(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
        let mut out = String::from("| Metric |");
        for t in &self.tags {
            write!(out, " {} |", t.tag.replace('|', "\\|")).unwrap();
        }
        out.push_str(" Mean |\n|---|");
        for _ in 0..=self.tags.len() {
            out.push_str("---:|");
        }
        out.push('\n');
        let rows: [(&str, Getter, Option<f64>); 4] = [
            ("F1", |m| Some(m.f1), Some(self.mean.f1)),
            ("Acc", |m| Some(m.accuracy), Some(self.mean.accuracy)),
            ("F-Acc", |m| m.f_acc, self.mean.f_acc),
            ("R-Acc", |m| m.r_acc, self.mean.r_acc),
        ];
        for (name, get, mean) in rows.iter() {
            write!(out, "| {name} |").unwrap();
            for t in &self.tags {
                write!(out, " {} |", pct(get(&t.metrics))).unwrap();
            }
            writeln!(out, " {} |", pct(*mean)).unwrap();
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
