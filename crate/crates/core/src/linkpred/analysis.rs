use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    evaluate, id_triples, improvement, train, Direction, EvalError, FeatureError, FeatureSet, FilterMode, Fingerprint,
    HyperParams, IdTriple, ImageFeatureRow, KnownTriples, Metrics, MetricsReport, Modality, ModalitySetting, Model,
    QueryRank, RankRow, Scorer, TrainError, TrainLog,
};
use crate::fusion::{FusedSummary, Variant};
use crate::kgdata::Dataset;

/// Improvement in percent per metric; `None` where the baseline is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub mrr: Option<f64>,
    pub hits: BTreeMap<u32, Option<f64>>,
}

pub fn improvement_row(enriched: &Metrics, baseline: &Metrics) -> ImprovementRow {
    ImprovementRow {
        mrr: improvement(enriched.mrr, baseline.mrr).ok(),
        hits: baseline
            .hits
            .iter()
            .filter_map(|(k, b)| enriched.hits.get(k).map(|f| (*k, improvement(*f, *b).ok())))
            .collect(),
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One training and evaluation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub modality: ModalitySetting,
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default)]
    pub filter: FilterMode,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
}

fn default_text_dim() -> usize {
    super::DEFAULT_TEXT_DIM
}

impl ExperimentConfig {
    pub fn new(modality: ModalitySetting, variant: Option<Variant>) -> Self {
        Self {
            modality,
            variant,
            filter: FilterMode::Filtered,
            hyper: HyperParams::default(),
            text_dim: default_text_dim(),
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            modality: self.modality.to_string(),
            variant: self.variant.map(|v| v.to_string()),
            filter: self.filter,
            seed: self.hyper.seed,
            d: self.hyper.dim,
            epochs: self.hyper.epochs,
        }
    }
}

pub struct ExperimentOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub report: MetricsReport,
    pub ranks: Vec<QueryRank>,
}

/// Features for `config`; image rows are attached only when the setting uses them.
pub fn build_features(
    dataset: &Dataset,
    summaries: &[FusedSummary],
    image_features: Option<&[ImageFeatureRow]>,
    config: &ExperimentConfig,
) -> Result<FeatureSet, FeatureError> {
    let variant = if config.modality.is_active(Modality::Generated) { config.variant } else { None };
    let features = FeatureSet::build(dataset, summaries, variant, config.text_dim)?;
    match image_features {
        Some(rows) if config.modality.is_active(Modality::Image) => features.with_image_features(dataset, rows),
        _ => Ok(features),
    }
}

/// Trains on the train split and evaluates on test.
pub fn run_experiment(
    dataset: &Dataset,
    summaries: &[FusedSummary],
    image_features: Option<&[ImageFeatureRow]>,
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome, ExperimentError> {
    let features = build_features(dataset, summaries, image_features, config)?;
    let (model, log) = train(dataset, &features, &config.modality, &config.hyper)?;
    let emb = model.embed(&features);
    let test = id_triples(dataset, &dataset.test);
    let known = KnownTriples::from_dataset(dataset);
    let (report, ranks) = evaluate(&emb, &test, config.filter, &known, Some(config.fingerprint()))?;
    Ok(ExperimentOutcome { model, log, report, ranks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: ExperimentConfig,
    pub fingerprint: Fingerprint,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// One row per config, in order. Configs whose inputs are unavailable or whose
/// training fails are kept with a note and no report.
pub fn run_ablation(
    dataset: &Dataset,
    summaries: &[FusedSummary],
    image_features: Option<&[ImageFeatureRow]>,
    configs: &[ExperimentConfig],
) -> Vec<AblationRow> {
    run_ablation_with(dataset, summaries, image_features, configs, |_, _| {})
}

/// [`run_ablation`], handing each successful outcome to `sink` with its config index.
pub fn run_ablation_with(
    dataset: &Dataset,
    summaries: &[FusedSummary],
    image_features: Option<&[ImageFeatureRow]>,
    configs: &[ExperimentConfig],
    mut sink: impl FnMut(usize, &ExperimentOutcome),
) -> Vec<AblationRow> {
    configs
        .iter()
        .enumerate()
        .map(|(i, config)| {
            let missing = if config.modality.is_active(Modality::Generated) && config.variant.is_none() {
                Some("setting uses generated text but names no variant".to_owned())
            } else if config.modality.is_active(Modality::Image) && image_features.is_none_or(<[_]>::is_empty) {
                Some("setting uses images but no image feature file was supplied".to_owned())
            } else {
                None
            };
            let outcome = match missing {
                Some(note) => Err(note),
                None => run_experiment(dataset, summaries, image_features, config).map_err(|e| e.to_string()),
            };
            let (report, note) = match outcome {
                Ok(o) => {
                    sink(i, &o);
                    (Some(o.report), None)
                }
                Err(note) => {
                    tracing::warn!(modality = %config.modality, note, "ablation config skipped");
                    (None, Some(note))
                }
            };
            AblationRow { config: config.clone(), fingerprint: config.fingerprint(), report, note }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub triple_count: usize,
    pub baseline: MetricsReport,
    pub enriched: MetricsReport,
    pub improvement: ImprovementRow,
}

/// Test triples whose head or tail is in `subset`.
pub fn subset_triples(test: &[IdTriple], subset: &HashSet<u32>) -> Vec<IdTriple> {
    test.iter().copied().filter(|t| subset.contains(&t.h) || subset.contains(&t.t)).collect()
}

/// Both scorers on the test triples touching `subset`, with per-metric gains.
pub fn subset_evaluate(
    baseline: &dyn Scorer,
    enriched: &dyn Scorer,
    subset: &HashSet<u32>,
    test: &[IdTriple],
    filter: FilterMode,
    known: &KnownTriples,
) -> Result<SubsetReport, EvalError> {
    if subset.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    let triples = subset_triples(test, subset);
    if triples.is_empty() {
        return Err(EvalError::NoMatchingTriples);
    }
    let (b, _) = evaluate(baseline, &triples, filter, known, None)?;
    let (e, _) = evaluate(enriched, &triples, filter, known, None)?;
    let improvement = improvement_row(&e.overall(), &b.overall());
    Ok(SubsetReport { triple_count: triples.len(), baseline: b, enriched: e, improvement })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankDelta {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub direction: Direction,
    pub rank_before: u64,
    pub rank_after: u64,
    /// `rank_before - rank_after`; positive when the enriched model ranks higher.
    pub improvement: i64,
}

/// Pairs two rank lists over the same queries, largest improvement first;
/// equal improvements keep query order.
pub fn rank_delta_report(before: &[RankRow], after: &[RankRow]) -> Result<Vec<RankDelta>, EvalError> {
    if before.len() != after.len() {
        return Err(EvalError::MismatchedQueries(before.len().min(after.len())));
    }
    let mut rows = Vec::with_capacity(before.len());
    for (i, (b, a)) in before.iter().zip(after).enumerate() {
        if (&b.head, &b.relation, &b.tail, b.direction) != (&a.head, &a.relation, &a.tail, a.direction) {
            return Err(EvalError::MismatchedQueries(i));
        }
        rows.push(RankDelta {
            head: b.head.clone(),
            relation: b.relation.clone(),
            tail: b.tail.clone(),
            direction: b.direction,
            rank_before: b.rank,
            rank_after: a.rank,
            improvement: b.rank as i64 - a.rank as i64,
        });
    }
    rows.sort_by_key(|r| std::cmp::Reverse(r.improvement));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(h: &str, d: Direction, rank: u64) -> RankRow {
        RankRow { head: h.into(), relation: "r".into(), tail: "t".into(), direction: d, rank }
    }

    #[test]
    fn deltas_sort_stably() {
        let before = [row("a", Direction::Head, 4), row("b", Direction::Tail, 2), row("c", Direction::Head, 5)];
        let after = [row("a", Direction::Head, 1), row("b", Direction::Tail, 2), row("c", Direction::Head, 2)];
        let d = rank_delta_report(&before, &after).unwrap();
        assert_eq!(
            d.iter().map(|r| (r.head.as_str(), r.improvement)).collect::<Vec<_>>(),
            [("a", 3), ("c", 3), ("b", 0)]
        );
    }

    #[test]
    fn deltas_reject_mismatch() {
        let before = [row("a", Direction::Head, 4)];
        assert_eq!(rank_delta_report(&before, &[row("a", Direction::Tail, 4)]), Err(EvalError::MismatchedQueries(0)));
        assert_eq!(rank_delta_report(&before, &[]), Err(EvalError::MismatchedQueries(0)));
    }

    #[test]
    fn improvement_row_per_metric() {
        let m = |mrr, h1, h3, h10| Metrics {
            mrr,
            hits: [(1, h1), (3, h3), (10, h10)].into_iter().collect(),
            query_count: 40,
        };
        let row = improvement_row(&m(41.87, 32.50, 47.50, 57.50), &m(13.89, 7.50, 15.00, 27.50));
        assert_eq!(row.mrr, Some(201.44));
        assert_eq!(row.hits[&1], Some(333.33));
        assert_eq!(row.hits[&3], Some(216.67));
        assert_eq!(row.hits[&10], Some(109.09));
    }
}
