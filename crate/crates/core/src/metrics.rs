//! Binary classification metrics, per-center evaluation and mean ± SD
//! summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, FederationLayout, Sample, Split};
use crate::error::{Error, Result};
use crate::model::forward;
use crate::param::ParameterSet;

/// Decision threshold used for F1.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// F1 = 2TP / (2TP + FP + FN); 0 when there are no positives at all.
pub fn f1_score(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("F1 of an empty set".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    })
}

/// Area under the ROC curve via the Mann-Whitney rank statistic: the chance a
/// random positive scores above a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes (got {n_pos} positive, {n_neg} negative)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid_rank * tied_pos as f64;
        i = j;
    }
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalGroup {
    LocalTest,
    Independent,
}

impl EvalGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalGroup::LocalTest => "local_test",
            EvalGroup::Independent => "independent",
        }
    }
}

impl fmt::Display for EvalGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub center_id: String,
    pub group: EvalGroup,
    pub n_pos: usize,
    pub n_neg: usize,
    pub f1: f64,
    /// `None` when the evaluation set holds a single class.
    pub auroc: Option<f64>,
    pub threshold: f64,
}

/// F1 and AUROC of `model` on one evaluation set.
pub fn evaluate_samples(
    model: &ParameterSet,
    samples: &[&Sample],
    center_id: &str,
    group: EvalGroup,
    threshold: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "center {center_id}: empty evaluation set"
        )));
    }
    let scores = samples
        .iter()
        .map(|s| forward(model, &s.features))
        .collect::<Result<Vec<f64>>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let preds: Vec<u8> = scores.iter().map(|&p| u8::from(p >= threshold)).collect();
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    let auroc = if n_pos > 0 && n_neg > 0 {
        Some(auroc(&scores, &labels)?)
    } else {
        None
    };
    Ok(EvalReport {
        center_id: center_id.to_string(),
        group,
        n_pos,
        n_neg,
        f1: f1_score(&preds, &labels)?,
        auroc,
        threshold,
    })
}

fn evaluation_sets<'a>(
    datasets: &'a BTreeMap<String, ClientDataset>,
    layout: &FederationLayout,
) -> Result<Vec<(&'a str, EvalGroup, Vec<&'a Sample>)>> {
    let lookup = |id: &String| {
        datasets
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown center {id}")))
    };
    let mut sets = Vec::new();
    for id in &layout.training_centers {
        let ds = lookup(id)?;
        sets.push((
            ds.center_id.as_str(),
            EvalGroup::LocalTest,
            ds.split(Split::Test),
        ));
    }
    for id in &layout.independent_centers {
        let ds = lookup(id)?;
        sets.push((ds.center_id.as_str(), EvalGroup::Independent, ds.all()));
    }
    Ok(sets)
}

/// One report per training center (its test split) and per independent center
/// (all of its samples), in layout order.
pub fn evaluate_model(
    model: &ParameterSet,
    datasets: &BTreeMap<String, ClientDataset>,
    layout: &FederationLayout,
    threshold: f64,
) -> Result<Vec<EvalReport>> {
    evaluation_sets(datasets, layout)?
        .into_iter()
        .map(|(id, group, samples)| evaluate_samples(model, &samples, id, group, threshold))
        .collect()
}

/// One cell of the local-model × evaluation-center matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCell {
    pub model_center: String,
    pub report: EvalReport,
}

/// Evaluate every local model on every evaluation set. Returns the full matrix
/// and, per evaluation set, a report whose F1/AUROC are the mean over the
/// local models.
pub fn evaluate_local_models(
    models: &BTreeMap<String, ParameterSet>,
    datasets: &BTreeMap<String, ClientDataset>,
    layout: &FederationLayout,
    threshold: f64,
) -> Result<(Vec<EvalReport>, Vec<LocalCell>)> {
    if models.is_empty() {
        return Err(Error::Data("no local models".into()));
    }
    let sets = evaluation_sets(datasets, layout)?;
    let mut averaged = Vec::with_capacity(sets.len());
    let mut cells = Vec::new();
    for (id, group, samples) in &sets {
        let reports = models
            .iter()
            .map(|(owner, m)| {
                let r = evaluate_samples(m, samples, id, *group, threshold)?;
                cells.push(LocalCell {
                    model_center: owner.clone(),
                    report: r.clone(),
                });
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = reports.len() as f64;
        let auroc = reports
            .iter()
            .map(|r| r.auroc)
            .sum::<Option<f64>>()
            .map(|s| s / n);
        averaged.push(EvalReport {
            f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
            auroc,
            ..reports[0].clone()
        });
    }
    Ok((averaged, cells))
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub group: EvalGroup,
    pub n_centers: usize,
    pub mean_f1: f64,
    pub sd_f1: f64,
    /// Over the centers where AUROC is defined.
    pub mean_auroc: Option<f64>,
    pub sd_auroc: Option<f64>,
}

/// Unweighted mean and sample (n − 1) standard deviation per method × group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn get(&self, method: &str, group: EvalGroup) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.group == group)
    }
}

/// Summarize `(method, reports)` pairs. Rows come out in input method order,
/// independent group first; groups without reports are omitted. A single
/// report per group gives SD 0. A method with no reports at all is an error.
pub fn summarize(methods: &[(String, Vec<EvalReport>)]) -> Result<SummaryTable> {
    let mut rows = Vec::new();
    for (method, reports) in methods {
        if reports.is_empty() {
            return Err(Error::Data(format!("method {method} has no reports")));
        }
        for group in [EvalGroup::Independent, EvalGroup::LocalTest] {
            let in_group: Vec<&EvalReport> = reports.iter().filter(|r| r.group == group).collect();
            if in_group.is_empty() {
                continue;
            }
            let f1s: Vec<f64> = in_group.iter().map(|r| r.f1).collect();
            let aurocs: Vec<f64> = in_group.iter().filter_map(|r| r.auroc).collect();
            let (mean_f1, sd_f1) = mean_sd(&f1s);
            let (mean_auroc, sd_auroc) = if aurocs.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_sd(&aurocs);
                (Some(m), Some(s))
            };
            rows.push(SummaryRow {
                method: method.clone(),
                group,
                n_centers: in_group.len(),
                mean_f1,
                sd_f1,
                mean_auroc,
                sd_auroc,
            });
        }
    }
    Ok(SummaryTable { rows })
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:<12} {:>3} {:>15} {:>15}",
            "method", "group", "n", "F1", "AUROC"
        )?;
        for r in &self.rows {
            let auroc = match (r.mean_auroc, r.sd_auroc) {
                (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
                _ => "n/a".to_string(),
            };
            writeln!(
                f,
                "{:<16} {:<12} {:>3} {:>15} {:>15}",
                r.method,
                r.group.as_str(),
                r.n_centers,
                format!("{:.3} ± {:.3}", r.mean_f1, r.sd_f1),
                auroc
            )?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `method,center_id,group,n_pos,n_neg,f1,auroc`
pub fn write_reports_csv(path: &Path, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "center_id",
        "group",
        "n_pos",
        "n_neg",
        "f1",
        "auroc",
    ])?;
    for (method, r) in rows {
        w.write_record([
            method.clone(),
            r.center_id.clone(),
            r.group.to_string(),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
            r.f1.to_string(),
            opt(r.auroc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a file written by [`write_reports_csv`].
pub fn read_reports_csv(path: &Path) -> Result<Vec<(String, EvalReport)>> {
    #[derive(Deserialize)]
    struct Row {
        method: String,
        center_id: String,
        group: EvalGroup,
        n_pos: usize,
        n_neg: usize,
        f1: f64,
        auroc: Option<f64>,
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok((
                row.method,
                EvalReport {
                    center_id: row.center_id,
                    group: row.group,
                    n_pos: row.n_pos,
                    n_neg: row.n_neg,
                    f1: row.f1,
                    auroc: row.auroc,
                    threshold: DEFAULT_THRESHOLD,
                },
            ))
        })
        .collect()
}

/// `method,group,n_centers,mean_f1,sd_f1,mean_auroc,sd_auroc`
pub fn write_summary_csv(path: &Path, table: &SummaryTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "group",
        "n_centers",
        "mean_f1",
        "sd_f1",
        "mean_auroc",
        "sd_auroc",
    ])?;
    for row in &table.rows {
        w.write_record([
            row.method.clone(),
            row.group.to_string(),
            row.n_centers.to_string(),
            row.mean_f1.to_string(),
            row.sd_f1.to_string(),
            opt(row.mean_auroc),
            opt(row.sd_auroc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Group `(method, report)` rows back into per-method lists, keeping the
/// first-seen method order.
pub fn group_by_method(rows: Vec<(String, EvalReport)>) -> Vec<(String, Vec<EvalReport>)> {
    let mut out: Vec<(String, Vec<EvalReport>)> = Vec::new();
    for (method, report) in rows {
        match out.iter_mut().find(|(m, _)| *m == method) {
            Some((_, list)) => list.push(report),
            None => out.push((method, vec![report])),
        }
    }
    out
}
