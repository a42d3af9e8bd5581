//! Stratified confusion matrices and the audit metric suite.
//!
//! The positive class is "bail granted". Every derived metric is `None`
//! exactly when its denominator is zero; no NaN or infinity is produced.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairing::{Group, Pair};
use crate::prompting::{Confidence, Configuration, Decision};

pub const REPORT_SCHEMA: &str = "bailaudit.report/v1";
pub const METRICS_SCHEMA: &str = "bailaudit.metrics/v1";
/// Placeholder for an undefined cell in rendered tables.
pub const UNDEFINED_CELL: &str = "—";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRef {
    pub image_id: String,
    pub case_id: String,
}

impl PairRef {
    pub fn of(pair: &Pair) -> Self {
        PairRef {
            image_id: pair.image_id.clone(),
            case_id: pair.case_id.clone(),
        }
    }
}

/// One model decision for one pair under one configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pair_ref: PairRef,
    pub group: Group,
    pub configuration: Configuration,
    pub decision: Decision,
    pub confidence: Confidence,
    pub ground_truth: bool,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub(crate) fn unanswered(pair: &Pair, configuration: Configuration, ground_truth: bool) -> Self {
        PredictionRecord {
            pair_ref: PairRef::of(pair),
            group: pair.group,
            configuration,
            decision: Decision::Unparseable,
            confidence: Confidence::Absent,
            ground_truth,
            response: String::new(),
            attempts: 0,
            error: None,
        }
    }

    pub(crate) fn with_error(mut self, error: String, attempts: u32) -> Self {
        self.error = Some(error);
        self.attempts = attempts;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted_grant: bool, truly_granted: bool) {
        match (predicted_grant, truly_granted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// (TP + TN) / total.
pub fn accuracy(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp + cm.tn, cm.total())
}

/// FNR / TNR with FNR = FN / (TP + FN) and TNR = TN / (TN + FP).
pub fn lr_minus(cm: &ConfusionMatrix) -> Option<f64> {
    let fnr = ratio(cm.fn_, cm.tp + cm.fn_)?;
    let tnr = ratio(cm.tn, cm.tn + cm.fp)?;
    if tnr == 0.0 {
        return None;
    }
    Some(fnr / tnr)
}

/// TN / (TN + FN).
pub fn npv(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tn, cm.tn + cm.fn_)
}

/// What to do with unparseable decisions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    #[default]
    Exclude,
    CountAsDeny,
}

fn effective_decision(record: &PredictionRecord, policy: UnparseablePolicy) -> Option<bool> {
    if record.error.is_some() {
        return None;
    }
    match (record.decision, policy) {
        (Decision::Yes, _) => Some(true),
        (Decision::No, _) => Some(false),
        (Decision::Unparseable, UnparseablePolicy::CountAsDeny) => Some(false),
        (Decision::Unparseable, UnparseablePolicy::Exclude) => None,
    }
}

fn single_configuration(records: &[PredictionRecord]) -> Result<Option<Configuration>> {
    let mut configs = records.iter().map(|r| r.configuration);
    let first = configs.next();
    if let Some(first) = first {
        if let Some(other) = configs.find(|c| *c != first) {
            return Err(Error::Aggregation(format!(
                "records mix configurations {first} and {other}"
            )));
        }
    }
    Ok(first)
}

/// Per-group matrices (all four groups always present) plus the pooled one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedConfusion {
    pub groups: BTreeMap<Group, ConfusionMatrix>,
    pub pooled: ConfusionMatrix,
}

pub fn confusion_by_group(
    records: &[PredictionRecord],
    policy: UnparseablePolicy,
) -> Result<GroupedConfusion> {
    single_configuration(records)?;
    let mut groups: BTreeMap<Group, ConfusionMatrix> =
        Group::ALL.iter().map(|g| (*g, ConfusionMatrix::default())).collect();
    for record in records {
        if let Some(predicted) = effective_decision(record, policy) {
            groups
                .get_mut(&record.group)
                .expect("all groups present")
                .record(predicted, record.ground_truth);
        }
    }
    let mut pooled = ConfusionMatrix::default();
    for cm in groups.values() {
        pooled.add(cm);
    }
    Ok(GroupedConfusion { groups, pooled })
}

/// Share of false negatives stated with high confidence, among false
/// negatives that carry any parsed confidence.
pub fn high_conf_fn_share<'r>(
    records: impl IntoIterator<Item = &'r PredictionRecord>,
    policy: UnparseablePolicy,
) -> Option<f64> {
    let mut high = 0;
    let mut with_confidence = 0;
    for record in records {
        let is_fn = record.ground_truth && effective_decision(record, policy) == Some(false);
        if !is_fn || record.confidence == Confidence::Absent {
            continue;
        }
        with_confidence += 1;
        if record.confidence == Confidence::High {
            high += 1;
        }
    }
    ratio(high, with_confidence)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub cm: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub lr_minus: Option<f64>,
    pub npv: Option<f64>,
    pub high_conf_fn_share: Option<f64>,
}

impl GroupMetrics {
    fn from_parts(cm: ConfusionMatrix, high_conf_fn_share: Option<f64>) -> Self {
        GroupMetrics {
            accuracy: accuracy(&cm),
            lr_minus: lr_minus(&cm),
            npv: npv(&cm),
            cm,
            high_conf_fn_share,
        }
    }
}

/// Full metric set for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationMetrics {
    pub schema: String,
    pub configuration: Configuration,
    pub unparseable_policy: UnparseablePolicy,
    pub records: usize,
    pub excluded_unparseable: usize,
    pub excluded_errors: usize,
    pub overall: GroupMetrics,
    pub groups: BTreeMap<Group, GroupMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_manifest_id: Option<String>,
}

pub fn evaluate(records: &[PredictionRecord], policy: UnparseablePolicy) -> Result<ConfigurationMetrics> {
    let configuration = single_configuration(records)?
        .ok_or_else(|| Error::Aggregation("no prediction records".into()))?;
    let grouped = confusion_by_group(records, policy)?;
    let groups = grouped
        .groups
        .iter()
        .map(|(group, cm)| {
            let share = high_conf_fn_share(records.iter().filter(|r| r.group == *group), policy);
            (*group, GroupMetrics::from_parts(*cm, share))
        })
        .collect();
    let excluded_errors = records.iter().filter(|r| r.error.is_some()).count();
    let excluded_unparseable = match policy {
        UnparseablePolicy::Exclude => records
            .iter()
            .filter(|r| r.error.is_none() && r.decision == Decision::Unparseable)
            .count(),
        UnparseablePolicy::CountAsDeny => 0,
    };
    Ok(ConfigurationMetrics {
        schema: METRICS_SCHEMA.to_string(),
        configuration,
        unparseable_policy: policy,
        records: records.len(),
        excluded_unparseable,
        excluded_errors,
        overall: GroupMetrics::from_parts(grouped.pooled, high_conf_fn_share(records, policy)),
        groups,
        source_manifest_id: None,
    })
}

/// Which metric a report row shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMetric {
    OverallAccuracy,
    LrMinus,
    Npv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: RowMetric,
    pub group: Option<Group>,
    /// One value per column, in column order.
    pub values: Vec<Option<f64>>,
}

/// Results table: overall accuracy, then LR− and NPV for each group;
/// one column per configuration in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_id: Option<String>,
    pub columns: Vec<Configuration>,
    pub rows: Vec<ReportRow>,
    pub metrics: Vec<ConfigurationMetrics>,
}

pub fn build_report(mut metrics: Vec<ConfigurationMetrics>) -> Result<Report> {
    if metrics.is_empty() {
        return Err(Error::Aggregation("a report needs at least one configuration".into()));
    }
    metrics.sort_by_key(|m| m.configuration);
    if let Some(w) = metrics.windows(2).find(|w| w[0].configuration == w[1].configuration) {
        return Err(Error::Aggregation(format!(
            "configuration {} given twice",
            w[0].configuration
        )));
    }
    let columns: Vec<Configuration> = metrics.iter().map(|m| m.configuration).collect();
    let mut rows = vec![ReportRow {
        metric: RowMetric::OverallAccuracy,
        group: None,
        values: metrics.iter().map(|m| m.overall.accuracy).collect(),
    }];
    for (metric, pick) in [
        (RowMetric::LrMinus, (|g: &GroupMetrics| g.lr_minus) as fn(&GroupMetrics) -> Option<f64>),
        (RowMetric::Npv, |g: &GroupMetrics| g.npv),
    ] {
        for group in Group::ALL {
            rows.push(ReportRow {
                metric,
                group: Some(group),
                values: metrics.iter().map(|m| pick(&m.groups[&group])).collect(),
            });
        }
    }
    Ok(Report {
        schema: REPORT_SCHEMA.to_string(),
        manifest_id: None,
        columns,
        rows,
        metrics,
    })
}

fn render_cell(metric: RowMetric, value: Option<f64>) -> String {
    match value {
        None => UNDEFINED_CELL.to_string(),
        Some(v) => match metric {
            RowMetric::OverallAccuracy | RowMetric::Npv => format!("{:.2}%", v * 100.0),
            RowMetric::LrMinus => format!("{v:.2}"),
        },
    }
}

impl Report {
    /// Tab-delimited table with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("metric\tgroup");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c.as_str());
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(match row.metric {
                RowMetric::OverallAccuracy => "Overall accuracy",
                RowMetric::LrMinus => "LR-",
                RowMetric::Npv => "NPV",
            });
            out.push('\t');
            if let Some(g) = row.group {
                out.push_str(g.as_str());
            }
            for v in &row.values {
                out.push('\t');
                out.push_str(&render_cell(row.metric, *v));
            }
            out.push('\n');
        }
        out
    }
}
