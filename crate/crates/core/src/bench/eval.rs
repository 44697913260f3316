//! Running items through the pipeline and summarizing the traces.
//!
//! Evaluation first produces one [`TraceRecord`] per item and trial; every
//! report is then computed from those records by [`summarize`], so a
//! report can always be rebuilt from a trace file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::extract::Presentation;
use super::{BenchError, BenchItem};
use crate::embed::term_hash;
use crate::pipeline::{GateOutcome, Pipeline, PipelineConfig, PipelineResult};

/// Choice shuffling: each item is asked `shuffle_trials` times with its
/// options reordered, and the mapped-back answers are put to a vote. Trial
/// 0 always uses the original order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ensemble {
    pub shuffle_trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub workers: usize,
    pub ensemble: Option<Ensemble>,
    /// Leave errored items out of the accuracy denominator instead of
    /// counting them wrong.
    pub exclude_errored: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            ensemble: None,
            exclude_errored: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: PipelineConfig,
}

/// The five module combinations compared in an ablation, from `base` to
/// all three modules on.
pub fn ablation_variants(base: &PipelineConfig) -> Vec<Variant> {
    let v = |name: &str, gate: bool, dag: bool, rag: bool| Variant {
        name: name.to_string(),
        config: PipelineConfig {
            enable_gate: gate,
            enable_dag: dag,
            enable_rag: rag,
            ..base.clone()
        },
    };
    vec![
        v("base", false, false, false),
        v("+rag", false, false, true),
        v("+gate+rag", true, false, true),
        v("+gate+dag", true, true, false),
        v("+gate+dag+rag", true, true, true),
    ]
}

/// One pipeline run on one presentation of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub dataset: String,
    pub variant: String,
    pub retrieve_n: usize,
    pub item_id: String,
    pub trial: usize,
    /// Original option index shown at each position.
    pub order: Vec<usize>,
    pub gold: String,
    /// Extracted answer mapped back to the item's own labels.
    pub extracted: Option<String>,
    pub error: Option<String>,
    pub result: Option<PipelineResult>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateStats {
    pub know: usize,
    /// Includes ambiguous outputs, which the pipeline treats as unknow.
    pub unknow: usize,
    pub ambiguous: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub unparsed: bool,
    pub errored: bool,
    pub votes: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dataset: String,
    pub variant: String,
    pub retrieve_n: usize,
    pub n_items: usize,
    pub correct: usize,
    pub unparsed: usize,
    pub errored: usize,
    /// Items counted in the accuracy denominator.
    pub scored: usize,
    /// `correct / scored`.
    pub accuracy: f64,
    /// From the base-question gate of each item's first trial.
    pub gate: GateStats,
    pub items_with_graph: usize,
    pub total_subquestions: usize,
    pub mean_subquestions: Option<f64>,
    pub retrieval_calls: usize,
    pub model_calls: usize,
    pub items: Vec<ItemRecord>,
}

const LABEL_ORDER: [&str; 7] = ["A", "B", "C", "D", "Yes", "No", "Maybe"];

fn label_rank(label: &str) -> (usize, &str) {
    (LABEL_ORDER.iter().position(|l| *l == label).unwrap_or(LABEL_ORDER.len()), label)
}

/// Majority label; ties go to the label listed first among the options.
pub fn vote<'a>(labels: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(x, _)| *x == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .into_iter()
        .min_by(|(a, ca), (b, cb)| cb.cmp(ca).then_with(|| label_rank(a).cmp(&label_rank(b))))
        .map(|(l, _)| l.to_string())
}

fn orders(item: &BenchItem, ensemble: Option<Ensemble>) -> Vec<Vec<usize>> {
    let n = item.options.len();
    let identity: Vec<usize> = (0..n).collect();
    let Some(e) = ensemble else {
        return vec![identity];
    };
    let mut rng = ChaCha8Rng::seed_from_u64(term_hash(e.seed, &item.id));
    let mut out = vec![identity.clone()];
    for _ in 1..e.shuffle_trials.max(1) {
        let mut o = identity.clone();
        o.shuffle(&mut rng);
        out.push(o);
    }
    out
}

fn run_item(pipeline: &Pipeline, dataset: &str, variant: &str, item: &BenchItem, ensemble: Option<Ensemble>) -> Vec<TraceRecord> {
    orders(item, ensemble)
        .into_iter()
        .enumerate()
        .map(|(trial, order)| {
            let p = Presentation::permuted(item, order);
            let (extracted, error, result) = match pipeline.answer(&p.render()) {
                Ok(r) => (p.extract(&r.final_answer).label().map(str::to_string), None, Some(r)),
                Err(e) => (None, Some(e.to_string()), None),
            };
            TraceRecord {
                dataset: dataset.to_string(),
                variant: variant.to_string(),
                retrieve_n: pipeline.config().retrieve_n,
                item_id: item.id.clone(),
                trial,
                order: p.order().to_vec(),
                gold: item.gold.clone(),
                extracted,
                error,
                result,
            }
        })
        .collect()
}

/// Runs every item and returns the report with the traces it came from.
pub fn evaluate(
    pipeline: &Pipeline,
    dataset: &str,
    variant: &str,
    items: &[BenchItem],
    cfg: &EvalConfig,
) -> Result<(BenchReport, Vec<TraceRecord>), BenchError> {
    let traces: Vec<TraceRecord> = if cfg.workers <= 1 {
        items
            .iter()
            .flat_map(|item| run_item(pipeline, dataset, variant, item, cfg.ensemble))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            items
                .par_iter()
                .map(|item| run_item(pipeline, dataset, variant, item, cfg.ensemble))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    };
    let report = summarize(&traces, cfg.exclude_errored)
        .pop()
        .unwrap_or_else(|| empty_report(dataset, variant, pipeline.config().retrieve_n));
    Ok((report, traces))
}

fn empty_report(dataset: &str, variant: &str, retrieve_n: usize) -> BenchReport {
    BenchReport {
        dataset: dataset.to_string(),
        variant: variant.to_string(),
        retrieve_n,
        n_items: 0,
        correct: 0,
        unparsed: 0,
        errored: 0,
        scored: 0,
        accuracy: 0.0,
        gate: GateStats::default(),
        items_with_graph: 0,
        total_subquestions: 0,
        mean_subquestions: None,
        retrieval_calls: 0,
        model_calls: 0,
        items: Vec::new(),
    }
}

/// One report per (dataset, variant, retrieve_n) group, in order of first
/// appearance.
pub fn summarize(traces: &[TraceRecord], exclude_errored: bool) -> Vec<BenchReport> {
    type Key<'a> = (&'a str, &'a str, usize);
    let mut groups: Vec<(Key, Vec<&TraceRecord>)> = Vec::new();
    for t in traces {
        let key = (t.dataset.as_str(), t.variant.as_str(), t.retrieve_n);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(t),
            None => groups.push((key, vec![t])),
        }
    }
    groups
        .into_iter()
        .map(|((dataset, variant, retrieve_n), group)| summarize_group(dataset, variant, retrieve_n, &group, exclude_errored))
        .collect()
}

fn summarize_group(dataset: &str, variant: &str, retrieve_n: usize, traces: &[&TraceRecord], exclude_errored: bool) -> BenchReport {
    let mut report = empty_report(dataset, variant, retrieve_n);
    let mut by_item: Vec<(&str, Vec<&TraceRecord>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for t in traces {
        let i = *slot.entry(t.item_id.as_str()).or_insert_with(|| {
            by_item.push((t.item_id.as_str(), Vec::new()));
            by_item.len() - 1
        });
        by_item[i].1.push(t);
    }
    let mut subq_items = 0;
    for (id, mut trials) in by_item {
        trials.sort_by_key(|t| t.trial);
        for t in &trials {
            if let Some(r) = &t.result {
                report.retrieval_calls += r.retrieval_calls;
                report.model_calls += r.calls.len();
            }
        }
        if let Some(r) = &trials[0].result {
            match r.base_gate().map(|g| g.outcome) {
                Some(GateOutcome::Know) => report.gate.know += 1,
                Some(GateOutcome::Unknow) => report.gate.unknow += 1,
                Some(GateOutcome::AmbiguousFallback) => {
                    report.gate.unknow += 1;
                    report.gate.ambiguous += 1;
                }
                None => {}
            }
            if let Some(n) = r.subquestion_count() {
                subq_items += 1;
                report.total_subquestions += n;
            }
        }
        let errored = trials.iter().all(|t| t.error.is_some());
        let predicted = vote(trials.iter().filter_map(|t| t.extracted.as_deref()));
        let gold = trials[0].gold.clone();
        let correct = predicted.as_deref() == Some(gold.as_str());
        report.n_items += 1;
        report.correct += usize::from(correct);
        report.errored += usize::from(errored);
        report.unparsed += usize::from(!errored && predicted.is_none());
        report.items.push(ItemRecord {
            unparsed: !errored && predicted.is_none(),
            id: id.to_string(),
            gold,
            predicted,
            correct,
            errored,
            votes: trials.iter().map(|t| t.extracted.clone()).collect(),
        });
    }
    report.items_with_graph = subq_items;
    report.mean_subquestions = (subq_items > 0).then(|| report.total_subquestions as f64 / subq_items as f64);
    report.scored = if exclude_errored {
        report.n_items - report.errored
    } else {
        report.n_items
    };
    report.accuracy = if report.scored == 0 {
        0.0
    } else {
        report.correct as f64 / report.scored as f64
    };
    report
}

/// One evaluation per variant, same items, same backends.
pub fn ablate(
    pipeline: &Pipeline,
    dataset: &str,
    items: &[BenchItem],
    variants: &[Variant],
    cfg: &EvalConfig,
) -> Result<(Vec<BenchReport>, Vec<TraceRecord>), BenchError> {
    let mut reports = Vec::with_capacity(variants.len());
    let mut traces = Vec::new();
    for v in variants {
        let p = pipeline.reconfigured(v.config.clone())?;
        let (r, t) = evaluate(&p, dataset, &v.name, items, cfg)?;
        reports.push(r);
        traces.extend(t);
    }
    Ok((reports, traces))
}

/// One evaluation per retrieved-document count with everything else fixed.
pub fn sweep_docs(
    pipeline: &Pipeline,
    dataset: &str,
    variant: &str,
    items: &[BenchItem],
    n_values: &[usize],
    cfg: &EvalConfig,
) -> Result<(Vec<BenchReport>, Vec<TraceRecord>), BenchError> {
    if !pipeline.config().enable_rag {
        return Err(BenchError::SweepWithoutRag);
    }
    let mut reports = Vec::with_capacity(n_values.len());
    let mut traces = Vec::new();
    for &n in n_values {
        let p = pipeline.reconfigured(PipelineConfig {
            retrieve_n: n,
            ..pipeline.config().clone()
        })?;
        let (r, t) = evaluate(&p, dataset, variant, items, cfg)?;
        reports.push(r);
        traces.extend(t);
    }
    Ok((reports, traces))
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[TraceRecord]) -> Result<(), BenchError> {
    let path = path.as_ref();
    let io = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for t in traces {
        serde_json::to_writer(&mut w, t).expect("traces serialize");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, BenchError> {
    let path = path.as_ref();
    let io = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
