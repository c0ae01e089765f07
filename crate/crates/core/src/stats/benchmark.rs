//! Metric meta-evaluation against human scores, cross-model comparison
//! grids, and cohort shift reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    bootstrap_ci_named, exceedance_from_counts, fill_indices, mean, paired_exceedance_test, spearman_rho, trial_rng, BootstrapConfig,
    ExceedanceResult, StatsError, Verdict,
};
use crate::metrics::MetricTable;

/// One reader's 1-5 quality scores keyed by report id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanScoreSet {
    pub reader_id: String,
    pub scores: BTreeMap<String, u8>,
}

impl HumanScoreSet {
    pub fn new(reader_id: &str, scores: BTreeMap<String, u8>) -> Result<Self, StatsError> {
        if let Some((id, &s)) = scores.iter().find(|(_, s)| !(1..=5).contains(*s)) {
            return Err(StatsError::ScoreOutOfRange {
                report_id: id.clone(),
                score: s,
            });
        }
        Ok(HumanScoreSet {
            reader_id: reader_id.to_string(),
            scores,
        })
    }

    /// Reads `report_id,score` rows (header required).
    pub fn read_csv<R: std::io::Read>(reader_id: &str, r: R) -> Result<Self, StatsError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut scores = BTreeMap::new();
        for rec in rdr.records().flatten() {
            let score: u8 = rec.get(1).and_then(|v| v.trim().parse().ok()).unwrap_or(0);
            scores.insert(rec[0].to_string(), score);
        }
        Self::new(reader_id, scores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub metric: String,
    pub rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    /// Bootstrap p-value of the difference to the top-ranked metric's rho.
    pub p_vs_top: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRanking {
    /// Descending rho.
    pub rows: Vec<CorrelationResult>,
    pub inter_reader: Option<CorrelationResult>,
    pub excluded: Vec<(String, String)>,
}

impl MetricRanking {
    /// `metric,rho,ci_low,ci_high,n,p_vs_top` with the inter-reader row first.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["metric", "rho", "ci_low", "ci_high", "n", "p_vs_top"])?;
        for r in self.inter_reader.iter().chain(&self.rows) {
            wtr.write_record([
                r.metric.clone(),
                r.rho.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.n.to_string(),
                r.p_vs_top.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        wtr.flush()
    }
}

fn correlation_with_ci(name: &str, pairs: &[(f64, f64)], config: BootstrapConfig) -> Result<CorrelationResult, StatsError> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let rho = spearman_rho(&x, &y)?;
    let stat = |s: &[(f64, f64)]| {
        let (a, b): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
        spearman_rho(&a, &b).unwrap_or(f64::NAN)
    };
    let ci = bootstrap_ci_named(name, pairs, stat, config)?;
    Ok(CorrelationResult {
        metric: name.to_string(),
        rho,
        ci_low: ci.ci_low,
        ci_high: ci.ci_high,
        n: pairs.len(),
        p_vs_top: None,
    })
}

/// Paired bootstrap over cases of `rho(first, human) - rho(second, human)`.
pub fn correlation_difference_test(
    first: &[f64],
    second: &[f64],
    human: &[f64],
    config: BootstrapConfig,
) -> Result<ExceedanceResult, StatsError> {
    if first.len() != human.len() || second.len() != human.len() {
        return Err(StatsError::LengthMismatch(first.len(), human.len()));
    }
    let observed = spearman_rho(first, human)? - spearman_rho(second, human)?;
    let n = human.len();
    let (greater, ties, valid) = (0..config.trials)
        .into_par_iter()
        .map_init(
            || {
                (
                    Vec::with_capacity(n),
                    [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)],
                )
            },
            |(idx, bufs), t| {
                let mut rng = trial_rng(config.seed, t);
                fill_indices(&mut rng, n, idx);
                for (buf, src) in bufs.iter_mut().zip([first, second, human]) {
                    buf.clear();
                    buf.extend(idx.iter().map(|&i| src[i]));
                }
                match (spearman_rho(&bufs[0], &bufs[2]), spearman_rho(&bufs[1], &bufs[2])) {
                    (Ok(a), Ok(b)) => ((a > b) as usize, (a == b) as usize, 1usize),
                    _ => (0, 0, 0),
                }
            },
        )
        .reduce(|| (0, 0, 0), |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2));
    if valid == 0 {
        return Err(StatsError::NoValidTrials);
    }
    Ok(exceedance_from_counts(greater, ties, valid, observed))
}

/// Correlates every metric in `table` with one reader's scores.
///
/// Metrics with a gap on any scored case (or with constant values) are
/// excluded and reported rather than ranked. When a second reader is
/// given, their agreement on the overlapping cases is reported as
/// `inter_reader`.
pub fn rank_metrics(
    table: &MetricTable,
    human: &HumanScoreSet,
    second: Option<&HumanScoreSet>,
    config: BootstrapConfig,
) -> Result<MetricRanking, StatsError> {
    if let Some(id) = human.scores.keys().find(|id| !table.case_ids.contains(id)) {
        return Err(StatsError::UnknownCase(id.clone()));
    }
    let case_pos: Vec<(usize, f64)> = table
        .case_ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| human.scores.get(id).map(|s| (i, *s as f64)))
        .collect();
    let human_values: Vec<f64> = case_pos.iter().map(|(_, s)| *s).collect();

    let mut rows = Vec::new();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for (m, col) in table.metrics.iter().zip(&table.values) {
        let values: Option<Vec<f64>> = case_pos.iter().map(|(i, _)| col[*i]).collect();
        let Some(mut values) = values else {
            tracing::warn!(metric = %m.name, "excluded from ranking: coverage gap on a scored case");
            excluded.push((m.name.clone(), "coverage gap on a human-scored case".to_string()));
            continue;
        };
        if !m.higher_is_better {
            values.iter_mut().for_each(|v| *v = -*v);
        }
        let pairs: Vec<(f64, f64)> = values.iter().copied().zip(human_values.iter().copied()).collect();
        match correlation_with_ci(&m.name, &pairs, config) {
            Ok(r) => {
                rows.push(r);
                columns.insert(m.name.clone(), values);
            }
            Err(e) => {
                tracing::warn!(metric = %m.name, error = %e, "excluded from ranking");
                excluded.push((m.name.clone(), e.to_string()));
            }
        }
    }
    rows.sort_by(|a, b| b.rho.total_cmp(&a.rho).then(a.metric.cmp(&b.metric)));
    if let Some(top) = rows.first().map(|r| r.metric.clone()) {
        let top_values = columns[&top].clone();
        for r in rows.iter_mut().skip(1) {
            r.p_vs_top = correlation_difference_test(&top_values, &columns[&r.metric], &human_values, config)
                .ok()
                .map(|t| t.p_value);
        }
    }

    let inter_reader = match second {
        Some(other) => {
            let pairs: Vec<(f64, f64)> = human
                .scores
                .iter()
                .filter_map(|(id, s)| other.scores.get(id).map(|o| (*s as f64, *o as f64)))
                .collect();
            let name = format!("inter_reader:{}~{}", human.reader_id, other.reader_id);
            Some(correlation_with_ci(&name, &pairs, config)?)
        }
        None => None,
    };
    Ok(MetricRanking {
        rows,
        inter_reader,
        excluded,
    })
}

/// Per-case metric values of one model: metric → report id → value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ModelScores {
    pub fn from_table(model: &str, table: &MetricTable) -> Self {
        ModelScores {
            model: model.to_string(),
            metrics: table.metrics.iter().map(|m| (m.name.clone(), table.by_case(&m.name))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Star,
    Circle,
    None,
}

/// Models x metrics comparison. Indexing is `[metric][model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonGrid {
    pub metrics: Vec<String>,
    pub models: Vec<String>,
    pub means: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    pub best: Vec<usize>,
    pub markers: Vec<Vec<Marker>>,
    /// Exceedance of the best model over each model (None for the best).
    pub exceedance_vs_best: Vec<Vec<Option<f64>>>,
}

impl ComparisonGrid {
    /// Plot-ready long format: `metric,model,mean,normalized,marker,exceedance_vs_best`.
    pub fn write_long_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["metric", "model", "mean", "normalized", "marker", "exceedance_vs_best"])?;
        for (mi, metric) in self.metrics.iter().enumerate() {
            for (k, model) in self.models.iter().enumerate() {
                let marker = match self.markers[mi][k] {
                    Marker::Star => "star",
                    Marker::Circle => "circle",
                    Marker::None => "",
                };
                wtr.write_record([
                    metric.clone(),
                    model.clone(),
                    self.means[mi][k].to_string(),
                    self.normalized[mi][k].to_string(),
                    marker.to_string(),
                    self.exceedance_vs_best[mi][k].map(|e| e.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        wtr.flush()
    }
}

/// Min-max normalization to [0, 1]; all-equal input maps to 0.5.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo == 0.0 || !(hi - lo).is_finite() {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Index of the best model: highest (or lowest) mean, exact ties broken by
/// the lexicographically smallest model name.
pub fn best_model(means: &[f64], names: &[String], higher_is_better: bool) -> usize {
    let mut best = 0;
    for k in 1..means.len() {
        let better = if higher_is_better {
            means[k] > means[best]
        } else {
            means[k] < means[best]
        };
        if better || (means[k] == means[best] && names[k] < names[best]) {
            best = k;
        }
    }
    best
}

/// Builds the normalized grid. Means and the paired tests use the cases
/// every model has a value for. A metric missing from `higher_is_better`
/// is treated as higher-is-better.
pub fn compare_models(
    models: &[ModelScores],
    higher_is_better: &BTreeMap<String, bool>,
    config: BootstrapConfig,
) -> Result<ComparisonGrid, StatsError> {
    if models.len() < 2 {
        return Err(StatsError::NotEnoughModels(2));
    }
    let metrics: Vec<String> = models[0].metrics.keys().cloned().collect();
    for m in models {
        for metric in &metrics {
            if !m.metrics.contains_key(metric) {
                return Err(StatsError::MissingMetric {
                    metric: metric.clone(),
                    whom: m.model.clone(),
                });
            }
        }
    }
    let names: Vec<String> = models.iter().map(|m| m.model.clone()).collect();
    let mut grid = ComparisonGrid {
        metrics: metrics.clone(),
        models: names.clone(),
        means: vec![],
        normalized: vec![],
        best: vec![],
        markers: vec![],
        exceedance_vs_best: vec![],
    };
    for metric in &metrics {
        let common: BTreeSet<&String> = models
            .iter()
            .map(|m| m.metrics[metric].keys().collect::<BTreeSet<_>>())
            .reduce(|a, b| a.intersection(&b).copied().collect())
            .unwrap_or_default();
        if common.is_empty() {
            return Err(StatsError::Empty);
        }
        let columns: Vec<Vec<f64>> = models
            .iter()
            .map(|m| common.iter().map(|id| m.metrics[metric][*id]).collect())
            .collect();
        let means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
        let hib = higher_is_better.get(metric).copied().unwrap_or(true);
        let best = best_model(&means, &names, hib);
        let mut markers = vec![Marker::None; models.len()];
        let mut exceed = vec![None; models.len()];
        markers[best] = Marker::Star;
        for k in 0..models.len() {
            if k == best {
                continue;
            }
            let (a, b) = if hib {
                (&columns[best], &columns[k])
            } else {
                (&columns[k], &columns[best])
            };
            let t = paired_exceedance_test(a, b, config)?;
            exceed[k] = Some(t.exceedance);
            if t.verdict == Verdict::NotSignificant {
                markers[k] = Marker::Circle;
            }
        }
        grid.normalized.push(min_max_normalize(&means));
        grid.means.push(means);
        grid.best.push(best);
        grid.markers.push(markers);
        grid.exceedance_vs_best.push(exceed);
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleShift {
    pub metric: String,
    pub internal_mean: f64,
    pub external_mean: f64,
    /// `100 * (external - internal) / |internal|`.
    pub percent_change: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn percent_change(internal: f64, external: f64) -> f64 {
    if internal == 0.0 {
        if external == 0.0 {
            0.0
        } else {
            f64::NAN
        }
    } else {
        100.0 * (external - internal) / internal.abs()
    }
}

/// Relative change of each metric's cohort mean, with a bootstrap interval
/// from resampling both cohorts independently.
pub fn style_transfer_report(
    internal: &BTreeMap<String, Vec<f64>>,
    external: &BTreeMap<String, Vec<f64>>,
    config: BootstrapConfig,
) -> Result<Vec<StyleShift>, StatsError> {
    let mut out = Vec::new();
    for (metric, int_values) in internal {
        let ext_values = external.get(metric).ok_or_else(|| StatsError::MissingMetric {
            metric: metric.clone(),
            whom: "external cohort".into(),
        })?;
        if int_values.is_empty() || ext_values.is_empty() {
            return Err(StatsError::Empty);
        }
        let (mi, me) = (mean(int_values), mean(ext_values));
        let mut dist: Vec<f64> = (0..config.trials)
            .into_par_iter()
            .map(|t| {
                use rand::Rng;
                let mut rng = trial_rng(config.seed, t);
                let ri = (0..int_values.len())
                    .map(|_| int_values[rng.random_range(0..int_values.len())])
                    .sum::<f64>()
                    / int_values.len() as f64;
                let re = (0..ext_values.len())
                    .map(|_| ext_values[rng.random_range(0..ext_values.len())])
                    .sum::<f64>()
                    / ext_values.len() as f64;
                percent_change(ri, re)
            })
            .filter(|v| v.is_finite())
            .collect();
        if dist.is_empty() {
            return Err(StatsError::NoValidTrials);
        }
        dist.sort_by(f64::total_cmp);
        let (ci_low, ci_high) = super::percentile_interval(&dist, config.level);
        out.push(StyleShift {
            metric: metric.clone(),
            internal_mean: mi,
            external_mean: me,
            percent_change: percent_change(mi, me),
            ci_low,
            ci_high,
        });
    }
    Ok(out)
}
