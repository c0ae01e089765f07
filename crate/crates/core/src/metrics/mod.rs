//! Per-case quality metrics behind one registry.
//!
//! Every metric carries a [`MetricDescriptor`]; [`score_corpus`] evaluates a
//! selection over a set of cases and returns a rectangular [`MetricTable`]
//! in which anything that could not be computed is an explicit gap.

pub mod embedding;
pub mod lexical;
pub mod likelihood;
pub mod reference_free;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{embedding_metric, greedy_match, HashedTokenEncoder, TokenEncoder};
pub use lexical::{lexical_metrics, normalize, rouge_l, CiderContext, Prf};
pub use likelihood::{gen_score, gen_score_with, FCombination, GenDirection, SequenceScorer};
pub use reference_free::{reference_free_scores, ReferenceFreeScores};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric {0:?} is not available in this build")]
    Unavailable(String),
    #[error("metric {metric:?} needs a {input}")]
    MissingInput { metric: String, input: &'static str },
    #[error("score undefined: {0}")]
    Undefined(String),
    #[error("encoder failure: {0}")]
    Encoder(String),
    #[error("scorer failure: {0}")]
    Scorer(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("metric {0:?} registered twice")]
    DuplicateMetric(String),
    #[error("table i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFamily {
    Lexical,
    Embedding,
    GenerationLikelihood,
    Learned,
    ReferenceFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub name: String,
    pub family: MetricFamily,
    pub needs_reference: bool,
    pub needs_source: bool,
    pub higher_is_better: bool,
    /// Documented value range on the raw scale, when bounded.
    pub range: Option<(f64, f64)>,
    /// Multiplier applied in emitted tables (ROUGE is reported x100).
    #[serde(default = "one")]
    pub display_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl MetricDescriptor {
    fn new(name: &str, family: MetricFamily) -> Self {
        let reference_free = family == MetricFamily::ReferenceFree;
        MetricDescriptor {
            name: name.to_string(),
            family,
            needs_reference: !reference_free,
            needs_source: reference_free,
            higher_is_better: true,
            range: None,
            display_scale: 1.0,
        }
    }

    fn bounded(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some((lo, hi));
        self
    }

    fn lower_is_better(mut self) -> Self {
        self.higher_is_better = false;
        self
    }
}

/// One evaluation case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub report_id: String,
    pub source: String,
    pub hypothesis: String,
    pub reference: Option<String>,
}

pub trait Metric: Send + Sync {
    fn descriptor(&self) -> &MetricDescriptor;

    fn score(&self, case: &Case) -> Result<f64, MetricError>;

    /// Scores many cases at once; metrics that need corpus statistics
    /// (document frequencies) override this.
    fn score_batch(&self, cases: &[Case]) -> Vec<Result<f64, MetricError>> {
        cases.par_iter().map(|c| self.score(c)).collect()
    }
}

fn reference<'a>(d: &MetricDescriptor, case: &'a Case) -> Result<&'a str, MetricError> {
    case.reference.as_deref().ok_or_else(|| MetricError::MissingInput {
        metric: d.name.clone(),
        input: "reference",
    })
}

type PairFn = fn(&[String], &[String]) -> f64;

/// A metric that is a pure function of normalized (hypothesis, reference)
/// or (hypothesis, source) tokens.
pub struct TokenPairMetric {
    descriptor: MetricDescriptor,
    f: PairFn,
}

impl Metric for TokenPairMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, case: &Case) -> Result<f64, MetricError> {
        let other = if self.descriptor.needs_reference {
            reference(&self.descriptor, case)?
        } else {
            case.source.as_str()
        };
        Ok((self.f)(&normalize(&case.hypothesis), &normalize(other)))
    }
}

/// TF-IDF n-gram cosine with document frequencies taken from the
/// references of the batch being scored.
pub struct CiderMetric {
    descriptor: MetricDescriptor,
}

impl Metric for CiderMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, case: &Case) -> Result<f64, MetricError> {
        self.score_batch(std::slice::from_ref(case)).remove(0)
    }

    fn score_batch(&self, cases: &[Case]) -> Vec<Result<f64, MetricError>> {
        let refs: Vec<Option<Vec<String>>> = cases.iter().map(|c| c.reference.as_deref().map(normalize)).collect();
        let ctx = CiderContext::from_references(refs.iter().flatten());
        cases
            .iter()
            .zip(&refs)
            .map(|(c, r)| match r {
                Some(r) => Ok(ctx.score(&normalize(&c.hypothesis), r)),
                None => Err(MetricError::MissingInput {
                    metric: self.descriptor.name.clone(),
                    input: "reference",
                }),
            })
            .collect()
    }
}

pub struct EmbeddingMetric {
    descriptor: MetricDescriptor,
    encoder: Arc<dyn TokenEncoder>,
}

impl EmbeddingMetric {
    pub fn new(name: &str, encoder: Arc<dyn TokenEncoder>) -> Self {
        EmbeddingMetric {
            descriptor: MetricDescriptor::new(name, MetricFamily::Embedding).bounded(-1.0, 1.0),
            encoder,
        }
    }
}

impl Metric for EmbeddingMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, case: &Case) -> Result<f64, MetricError> {
        let r = reference(&self.descriptor, case)?;
        Ok(embedding_metric(&case.hypothesis, r, self.encoder.as_ref())?.f)
    }
}

/// Mean token log-likelihood under a seq2seq scorer in one direction.
pub struct GenScoreMetric {
    descriptor: MetricDescriptor,
    scorer: Arc<dyn SequenceScorer>,
    direction: GenDirection,
    combination: FCombination,
}

impl GenScoreMetric {
    pub fn new(prefix: &str, scorer: Arc<dyn SequenceScorer>, direction: GenDirection) -> Self {
        let family = if direction == GenDirection::SrcToHyp {
            MetricFamily::ReferenceFree
        } else {
            MetricFamily::GenerationLikelihood
        };
        let mut descriptor = MetricDescriptor::new(&format!("{prefix}_{}", direction.suffix()), family);
        descriptor.range = Some((f64::NEG_INFINITY, 0.0));
        GenScoreMetric {
            descriptor,
            scorer,
            direction,
            combination: FCombination::Arithmetic,
        }
    }

    pub fn with_combination(mut self, combination: FCombination) -> Self {
        self.combination = combination;
        self
    }
}

impl Metric for GenScoreMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, case: &Case) -> Result<f64, MetricError> {
        let s = self.scorer.as_ref();
        let (cond, scored) = match self.direction {
            GenDirection::SrcToHyp => (case.source.as_str(), case.hypothesis.as_str()),
            GenDirection::RefToHyp | GenDirection::BidirectionalF => (reference(&self.descriptor, case)?, case.hypothesis.as_str()),
            GenDirection::HypToRef => (case.hypothesis.as_str(), reference(&self.descriptor, case)?),
        };
        if cond.trim().is_empty() {
            return Err(MetricError::Undefined("conditioning text is empty".into()));
        }
        gen_score_with(s, cond, scored, self.direction, self.combination)
    }

    fn score_batch(&self, cases: &[Case]) -> Vec<Result<f64, MetricError>> {
        // model-backed; the scorer decides its own parallelism
        cases.iter().map(|c| self.score(c)).collect()
    }
}

/// A registry slot for a metric whose implementation is not shipped
/// (e.g. entity-graph scores that need an external extraction model).
pub struct UnavailableMetric {
    descriptor: MetricDescriptor,
}

impl Metric for UnavailableMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, _case: &Case) -> Result<f64, MetricError> {
        Err(MetricError::Unavailable(self.descriptor.name.clone()))
    }
}

#[derive(Default)]
pub struct MetricRegistry {
    metrics: Vec<Box<dyn Metric>>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Lexical, hashed-embedding and reference-free statistics, plus the
    /// unavailable entity-graph slot.
    pub fn standard() -> Self {
        use MetricFamily::*;
        let mut reg = MetricRegistry::new();
        let rouge = |name: &str, f: PairFn| TokenPairMetric {
            descriptor: MetricDescriptor {
                display_scale: 100.0,
                ..MetricDescriptor::new(name, Lexical).bounded(0.0, 1.0)
            },
            f,
        };
        let pair = |name: &str, family: MetricFamily, f: PairFn| TokenPairMetric {
            descriptor: MetricDescriptor::new(name, family),
            f,
        };
        let bounded = |m: TokenPairMetric| TokenPairMetric {
            descriptor: m.descriptor.bounded(0.0, 1.0),
            f: m.f,
        };
        let metrics: Vec<Box<dyn Metric>> = vec![
            Box::new(rouge("rouge1", |h, r| lexical::rouge_n(h, r, 1).f)),
            Box::new(rouge("rouge2", |h, r| lexical::rouge_n(h, r, 2).f)),
            Box::new(rouge("rougeL", |h, r| lexical::rouge_l(h, r).f)),
            Box::new(bounded(pair("bleu", Lexical, lexical::bleu))),
            Box::new(bounded(pair("chrf", Lexical, lexical::chrf))),
            Box::new(bounded(pair("meteor", Lexical, lexical::meteor))),
            Box::new(CiderMetric {
                descriptor: MetricDescriptor::new("cider", Lexical).bounded(0.0, 1.0),
            }),
            Box::new(EmbeddingMetric::new("bertscore_hashed", Arc::new(HashedTokenEncoder::default()))),
            Box::new(pair("compression", ReferenceFree, |h, s| {
                reference_free::reference_free_stat("compression", s, h).unwrap_or(0.0)
            })),
            Box::new(bounded(pair("coverage", ReferenceFree, |h, s| {
                reference_free::reference_free_stat("coverage", s, h).unwrap_or(0.0)
            }))),
            Box::new(pair("density", ReferenceFree, |h, s| {
                reference_free::reference_free_stat("density", s, h).unwrap_or(0.0)
            })),
            Box::new(TokenPairMetric {
                descriptor: MetricDescriptor::new("novel_bigrams", ReferenceFree)
                    .bounded(0.0, 1.0)
                    .lower_is_better(),
                f: |h, s| reference_free::reference_free_stat("novel_bigrams", s, h).unwrap_or(0.0),
            }),
            Box::new(bounded(pair("source_overlap", ReferenceFree, |h, s| {
                reference_free::reference_free_stat("source_overlap", s, h).unwrap_or(0.0)
            }))),
            Box::new(UnavailableMetric {
                descriptor: MetricDescriptor::new("radgraph_f1", Learned).bounded(0.0, 1.0),
            }),
        ];
        for m in metrics {
            reg.register(m).expect("standard metric names are unique");
        }
        reg
    }

    pub fn register(&mut self, metric: Box<dyn Metric>) -> Result<(), MetricError> {
        let name = &metric.descriptor().name;
        if self.get(name).is_some() {
            return Err(MetricError::DuplicateMetric(name.clone()));
        }
        self.metrics.push(metric);
        Ok(())
    }

    /// Adds the four likelihood variants of one scorer, named
    /// `<prefix>_src_hyp`, `<prefix>_ref_hyp`, `<prefix>_hyp_ref`, `<prefix>_f`.
    pub fn register_scorer(&mut self, prefix: &str, scorer: Arc<dyn SequenceScorer>) -> Result<(), MetricError> {
        for d in [
            GenDirection::SrcToHyp,
            GenDirection::RefToHyp,
            GenDirection::HypToRef,
            GenDirection::BidirectionalF,
        ] {
            self.register(Box::new(GenScoreMetric::new(prefix, scorer.clone(), d)))?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn Metric> {
        self.metrics.iter().find(|m| m.descriptor().name == name).map(|m| m.as_ref())
    }

    pub fn descriptors(&self) -> Vec<&MetricDescriptor> {
        self.metrics.iter().map(|m| m.descriptor()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.metrics.iter().map(|m| m.descriptor().name.as_str()).collect()
    }
}

/// A single computed score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: String,
    pub report_id: String,
    pub value: f64,
    pub higher_is_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricGap {
    pub metric: String,
    pub report_id: String,
    pub reason: String,
}

/// Metric x case grid of raw (unscaled) values; `None` cells are listed in
/// `gaps` with their reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub case_ids: Vec<String>,
    pub metrics: Vec<MetricDescriptor>,
    pub values: Vec<Vec<Option<f64>>>,
    pub gaps: Vec<MetricGap>,
}

impl MetricTable {
    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.metric_index(name).map(|i| self.values[i].as_slice())
    }

    /// Values of a metric keyed by report id, skipping gaps.
    pub fn by_case(&self, name: &str) -> BTreeMap<String, f64> {
        self.column(name)
            .map(|col| {
                self.case_ids
                    .iter()
                    .zip(col)
                    .filter_map(|(id, v)| v.map(|v| (id.clone(), v)))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn results(&self) -> Vec<MetricResult> {
        let mut out = Vec::new();
        for (m, col) in self.metrics.iter().zip(&self.values) {
            for (id, v) in self.case_ids.iter().zip(col) {
                if let Some(v) = v {
                    out.push(MetricResult {
                        metric: m.name.clone(),
                        report_id: id.clone(),
                        value: *v,
                        higher_is_better: m.higher_is_better,
                    });
                }
            }
        }
        out
    }

    /// Fraction of non-gap cells per metric.
    pub fn coverage(&self) -> BTreeMap<String, f64> {
        self.metrics
            .iter()
            .zip(&self.values)
            .map(|(m, col)| {
                let present = col.iter().filter(|v| v.is_some()).count();
                let frac = if col.is_empty() { 0.0 } else { present as f64 / col.len() as f64 };
                (m.name.clone(), frac)
            })
            .collect()
    }

    /// Long format `metric,report_id,value` at display scale; gaps have an
    /// empty value.
    pub fn write_long_csv<W: Write>(&self, w: W) -> Result<(), MetricError> {
        let mut wtr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| MetricError::Io(e.to_string());
        wtr.write_record(["metric", "report_id", "value"]).map_err(io)?;
        for (m, col) in self.metrics.iter().zip(&self.values) {
            for (id, v) in self.case_ids.iter().zip(col) {
                let cell = v.map(|v| format_value(v * m.display_scale)).unwrap_or_default();
                wtr.write_record([m.name.as_str(), id.as_str(), cell.as_str()]).map_err(io)?;
            }
        }
        wtr.flush().map_err(|e| MetricError::Io(e.to_string()))
    }

    /// Wide format: one row per case, one column per metric.
    pub fn write_wide_csv<W: Write>(&self, w: W) -> Result<(), MetricError> {
        let mut wtr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| MetricError::Io(e.to_string());
        let mut header = vec!["report_id".to_string()];
        header.extend(self.metrics.iter().map(|m| m.name.clone()));
        wtr.write_record(&header).map_err(io)?;
        for (i, id) in self.case_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            for (m, col) in self.metrics.iter().zip(&self.values) {
                row.push(col[i].map(|v| format_value(v * m.display_scale)).unwrap_or_default());
            }
            wtr.write_record(&row).map_err(io)?;
        }
        wtr.flush().map_err(|e| MetricError::Io(e.to_string()))
    }

    /// Reads a long-format table. Values stay at the scale they were
    /// written in; descriptors are reconstructed as generic entries unless
    /// a registry is given to look them up.
    pub fn read_long_csv<R: Read>(r: R, registry: Option<&MetricRegistry>) -> Result<MetricTable, MetricError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut metrics: Vec<String> = Vec::new();
        let mut case_ids: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(String, String), Option<f64>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| MetricError::Io(e.to_string()))?;
            let (metric, id, value) = (&rec[0], &rec[1], rec.get(2).unwrap_or(""));
            if !metrics.iter().any(|m| m == metric) {
                metrics.push(metric.to_string());
            }
            if !case_ids.iter().any(|c| c == id) {
                case_ids.push(id.to_string());
            }
            let v = if value.is_empty() {
                None
            } else {
                Some(value.parse::<f64>().map_err(|e| MetricError::Io(format!("{metric}/{id}: {e}")))?)
            };
            cells.insert((metric.to_string(), id.to_string()), v);
        }
        let mut gaps = Vec::new();
        let values = metrics
            .iter()
            .map(|m| {
                case_ids
                    .iter()
                    .map(|id| {
                        let v = cells.get(&(m.clone(), id.clone())).copied().flatten();
                        if v.is_none() {
                            gaps.push(MetricGap {
                                metric: m.clone(),
                                report_id: id.clone(),
                                reason: "missing in input table".into(),
                            });
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        let metrics = metrics
            .iter()
            .map(|m| {
                registry
                    .and_then(|r| r.get(m))
                    .map(|x| MetricDescriptor {
                        display_scale: 1.0,
                        ..x.descriptor().clone()
                    })
                    .unwrap_or_else(|| MetricDescriptor {
                        needs_reference: false,
                        needs_source: false,
                        ..MetricDescriptor::new(m, MetricFamily::Learned)
                    })
            })
            .collect();
        Ok(MetricTable {
            case_ids,
            metrics,
            values,
            gaps,
        })
    }
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Evaluates `selection` (all registered metrics when empty) on every case.
pub fn score_corpus(registry: &MetricRegistry, selection: &[&str], cases: &[Case]) -> Result<MetricTable, MetricError> {
    let chosen: Vec<&dyn Metric> = if selection.is_empty() {
        registry.metrics.iter().map(|m| m.as_ref()).collect()
    } else {
        selection
            .iter()
            .map(|n| registry.get(n).ok_or_else(|| MetricError::UnknownMetric(n.to_string())))
            .collect::<Result<_, _>>()?
    };
    let mut table = MetricTable {
        case_ids: cases.iter().map(|c| c.report_id.clone()).collect(),
        metrics: Vec::with_capacity(chosen.len()),
        values: Vec::with_capacity(chosen.len()),
        gaps: Vec::new(),
    };
    for metric in chosen {
        let d = metric.descriptor().clone();
        let mut column = Vec::with_capacity(cases.len());
        for (case, result) in cases.iter().zip(metric.score_batch(cases)) {
            match result {
                Ok(v) if v.is_finite() => column.push(Some(v)),
                Ok(v) => {
                    column.push(None);
                    table.gaps.push(MetricGap {
                        metric: d.name.clone(),
                        report_id: case.report_id.clone(),
                        reason: format!("non-finite value {v}"),
                    });
                }
                Err(e) => {
                    column.push(None);
                    table.gaps.push(MetricGap {
                        metric: d.name.clone(),
                        report_id: case.report_id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        let missing = column.iter().filter(|v| v.is_none()).count();
        if missing > 0 {
            tracing::warn!(metric = %d.name, missing, "metric has gaps");
        }
        table.metrics.push(d);
        table.values.push(column);
    }
    Ok(table)
}
