//! Report assembly from run artifacts, gold judgements and external
//! scores, and rendering as JSON, plain-text tables or CSV.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{usage_report, UsageReport};
use crate::corpus::{GoldSet, ScoreTable};
use crate::error::{Error, Result};
use crate::metaeval::{
    error_distribution, perm_both_test, seg_acc_star_eq, system_pairwise_accuracy, verifier_consistency,
    win_tie_lose, AlignmentThresholds, ConsistencyReport, DistributionReport, SegmentSpans, SignificanceResult,
    SpanPrecisionReport, TieCalibrationResult, WinTieLose, DEFAULT_RESAMPLES,
};
use crate::mqm::SegmentKey;
use crate::pipeline::{EvaluationRecord, Mode, RunArtifact, ScoreVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "text" | "txt" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaEvalOptions {
    pub n_resamples: usize,
    pub seed: u64,
    pub top_k: usize,
    /// Count contrastive verdicts as positive in verifier consistency.
    pub contrastive_positive: bool,
}

impl Default for MetaEvalOptions {
    fn default() -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
            top_k: 3,
            contrastive_positive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub model: Option<String>,
    pub corpus_digest: String,
    pub seed: u64,
    pub segments: usize,
    pub evaluated: usize,
    pub failed: usize,
}

/// Mean segment score of one system, next to the gold mean over the same
/// segments when gold scores are available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScoreRow {
    pub lp: String,
    pub system: String,
    pub segments: usize,
    pub score: f64,
    pub gold_segments: usize,
    pub gold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TieCalibration {
    #[serde(flatten)]
    pub result: TieCalibrationResult,
    /// The threshold was fit on the data it scores.
    pub in_sample: bool,
}

/// Statistics of a baseline run on the segments both runs evaluated, with
/// the significance of the main run's advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub mode: Mode,
    pub shared_segments: usize,
    pub system_accuracy: Option<f64>,
    pub seg_acc_eq_star: Option<f64>,
    pub sp: Option<f64>,
    pub mp: Option<f64>,
    pub system_significance: Option<SignificanceResult>,
    pub seg_significance: Option<SignificanceResult>,
    pub sp_significance: Option<SignificanceResult>,
    pub mp_significance: Option<SignificanceResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpMetaEval {
    pub lp: String,
    pub systems: usize,
    /// Segments with both an evaluation and a gold score.
    pub scored_segments: usize,
    pub system_accuracy: Option<f64>,
    pub seg_accuracy: Option<TieCalibration>,
    pub sp: Option<f64>,
    pub mp: Option<f64>,
    pub baseline: Option<BaselineComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEvalReport {
    pub per_lp: Vec<LpMetaEval>,
    pub span_precision: SpanPrecisionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostEditMetric {
    pub metric: String,
    /// Post-edits with both an original and a post-edit score.
    pub post_edits: usize,
    /// Mean of post-edit score minus original score.
    pub mean_delta: f64,
    pub threshold: Option<f64>,
    pub aligned: Option<bool>,
    pub consistency: Option<ConsistencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinTieLoseRow {
    pub metric_a: String,
    pub metric_b: String,
    #[serde(flatten)]
    pub counts: WinTieLose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostEditReport {
    pub post_edits: usize,
    pub metrics: Vec<PostEditMetric>,
    pub win_tie_lose: Option<WinTieLoseRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub key: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTally {
    pub failed: usize,
    pub rows: Vec<FailureRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run: RunSummary,
    pub system_scores: Vec<SystemScoreRow>,
    pub metaeval: Option<MetaEvalReport>,
    pub usage: Option<UsageReport>,
    pub distribution: Option<DistributionReport>,
    pub post_edit: Option<PostEditReport>,
    pub failures: FailureTally,
}

/// Inputs to [`build_report`]; only the run is required.
#[derive(Clone, Copy)]
pub struct ReportInputs<'a> {
    pub run: &'a RunArtifact,
    pub gold: Option<&'a GoldSet>,
    pub scores: Option<&'a ScoreTable>,
    pub baseline: Option<&'a RunArtifact>,
}

impl<'a> ReportInputs<'a> {
    pub fn new(run: &'a RunArtifact) -> Self {
        Self {
            run,
            gold: None,
            scores: None,
            baseline: None,
        }
    }
}

pub fn build_report(inputs: ReportInputs<'_>, options: &MetaEvalOptions) -> Result<Report> {
    let run = inputs.run;
    let records: Vec<&EvaluationRecord> = run.records().collect();
    let failures: Vec<FailureRow> = run
        .failures()
        .map(|f| FailureRow {
            key: f.key.to_string(),
            cause: f.cause.clone(),
        })
        .collect();
    if inputs.baseline.is_some() && inputs.gold.is_none() {
        return Err(Error::invalid("a baseline comparison needs gold judgements"));
    }
    let metaeval = inputs
        .gold
        .map(|gold| meta_evaluate(run, gold, inputs.baseline, options))
        .transpose()?;
    let post_edit = match inputs.scores {
        Some(scores) => post_edit_report(&records, scores, options)?,
        None => None,
    };
    Ok(Report {
        run: RunSummary {
            mode: run.header.config.mode,
            model: run.header.model.clone(),
            corpus_digest: run.header.corpus_digest.clone(),
            seed: run.header.config.seed,
            segments: run.header.segments,
            evaluated: records.len(),
            failed: failures.len(),
        },
        system_scores: system_score_table(&records, inputs.gold),
        metaeval,
        usage: (run.header.segments > 0)
            .then(|| usage_report(&run.usage_totals(), run.header.segments))
            .transpose()?,
        distribution: (!records.is_empty())
            .then(|| error_distribution(records.iter().copied(), options.top_k))
            .transpose()?,
        post_edit,
        failures: FailureTally {
            failed: failures.len(),
            rows: failures,
        },
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn gold_score(gold: Option<&GoldSet>, key: &SegmentKey) -> Option<f64> {
    gold.and_then(|g| g.get(key)).and_then(|r| r.gold_score)
}

/// Per-system mean scores; the gold mean covers the segments that have a
/// gold score.
pub fn system_score_table(records: &[&EvaluationRecord], gold: Option<&GoldSet>) -> Vec<SystemScoreRow> {
    let mut by_system: BTreeMap<(String, String), Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in records {
        by_system
            .entry((r.key.lp.to_string(), r.key.system_id.clone()))
            .or_default()
            .push(r);
    }
    by_system
        .into_iter()
        .map(|((lp, system), rs)| {
            let scores: Vec<f64> = rs.iter().map(|r| r.score()).collect();
            let golds: Vec<f64> = rs.iter().filter_map(|r| gold_score(gold, &r.key)).collect();
            SystemScoreRow {
                lp,
                system,
                segments: rs.len(),
                score: mean(&scores),
                gold_segments: golds.len(),
                gold: (!golds.is_empty()).then(|| mean(&golds)),
            }
        })
        .collect()
}

/// Segments scored by a run on one language pair, aligned with gold.
struct ScoredSegments<'a> {
    keys: Vec<&'a SegmentKey>,
    gold: Vec<f64>,
}

impl ScoredSegments<'_> {
    fn system_accuracy(&self, metric: &[f64]) -> Option<f64> {
        let mut m: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        let mut g: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for ((key, &ms), &gs) in self.keys.iter().zip(metric).zip(&self.gold) {
            let e = m.entry(&key.system_id).or_default();
            e.0 += ms;
            e.1 += 1;
            let e = g.entry(&key.system_id).or_default();
            e.0 += gs;
            e.1 += 1;
        }
        let means = |map: BTreeMap<&str, (f64, usize)>| -> BTreeMap<String, f64> {
            map.into_iter().map(|(k, (sum, n))| (k.to_string(), sum / n as f64)).collect()
        };
        system_pairwise_accuracy(&means(m), &means(g)).ok()
    }

    fn items(&self, metric: &[f64]) -> Vec<Vec<(f64, f64)>> {
        let mut items: BTreeMap<(&str, &str), Vec<(f64, f64)>> = BTreeMap::new();
        for ((key, &ms), &gs) in self.keys.iter().zip(metric).zip(&self.gold) {
            items.entry((&key.doc_id, &key.seg_id)).or_default().push((ms, gs));
        }
        items.into_values().filter(|v| v.len() >= 2).collect()
    }

    fn seg_accuracy(&self, metric: &[f64]) -> Option<TieCalibrationResult> {
        seg_acc_star_eq(&self.items(metric)).ok()
    }
}

fn nan_if_none(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Paired test, skipped when the statistic is undefined for either run.
/// Resamples with an undefined statistic never count as at least as extreme.
fn significance<T, F>(a: &[T], b: &[T], stat: F, options: &MetaEvalOptions) -> Result<Option<SignificanceResult>>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    if a.is_empty() || stat(a).is_nan() || stat(b).is_nan() {
        return Ok(None);
    }
    perm_both_test(a, b, stat, options.n_resamples, options.seed).map(Some)
}

fn lp_spans<'a>(records: &[&'a EvaluationRecord], gold: &'a GoldSet) -> Vec<(&'a EvaluationRecord, SegmentSpans)> {
    records
        .iter()
        .filter_map(|r| {
            let g = gold.get(&r.key)?;
            let pred = r.retained.iter().map(|w| &w.error);
            Some((*r, SegmentSpans::new(&r.translation, pred, &g.gold_errors)))
        })
        .collect()
}

fn pooled_precision(spans: &[&SegmentSpans], major: bool) -> f64 {
    let (mut overlap, mut predicted) = (0usize, 0usize);
    for s in spans {
        let (pred, gold) = if major { (&s.pred_major, &s.gold_major) } else { (&s.pred, &s.gold) };
        overlap += pred.intersection(gold).count();
        predicted += pred.len();
    }
    if predicted == 0 {
        f64::NAN
    } else {
        overlap as f64 / predicted as f64
    }
}

/// Correlation and span statistics per language pair, with significance
/// against `baseline` on the segments both runs evaluated.
pub fn meta_evaluate(
    run: &RunArtifact,
    gold: &GoldSet,
    baseline: Option<&RunArtifact>,
    options: &MetaEvalOptions,
) -> Result<MetaEvalReport> {
    let mut by_lp: BTreeMap<String, Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in run.records() {
        by_lp.entry(r.key.lp.to_string()).or_default().push(r);
    }
    let baseline_records: Option<HashMap<&SegmentKey, &EvaluationRecord>> =
        baseline.map(|b| b.records().map(|r| (&r.key, r)).collect());

    let mut per_lp = Vec::new();
    let mut all_spans: Vec<(String, SegmentSpans)> = Vec::new();
    for (lp, records) in by_lp {
        let scored: Vec<&EvaluationRecord> = records
            .iter()
            .copied()
            .filter(|r| gold_score(Some(gold), &r.key).is_some())
            .collect();
        let segments = ScoredSegments {
            keys: scored.iter().map(|r| &r.key).collect(),
            gold: scored.iter().filter_map(|r| gold_score(Some(gold), &r.key)).collect(),
        };
        let metric: Vec<f64> = scored.iter().map(|r| r.score()).collect();
        let spans = lp_spans(&records, gold);
        let span_report = SpanPrecisionReport::from_segments(spans.iter().map(|(_, s)| (lp.as_str(), s)));
        let systems = records
            .iter()
            .map(|r| r.key.system_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();

        let comparison = match (&baseline_records, baseline) {
            (Some(base), Some(base_run)) => Some(compare_on_shared(&scored, &spans, base, base_run.header.config.mode, gold, options)?),
            _ => None,
        };
        per_lp.push(LpMetaEval {
            lp: lp.clone(),
            systems,
            scored_segments: scored.len(),
            system_accuracy: segments.system_accuracy(&metric),
            seg_accuracy: segments.seg_accuracy(&metric).map(|result| TieCalibration {
                result,
                in_sample: true,
            }),
            sp: span_report.sp(),
            mp: span_report.mp(),
            baseline: comparison,
        });
        all_spans.extend(spans.into_iter().map(|(_, s)| (lp.clone(), s)));
    }
    Ok(MetaEvalReport {
        per_lp,
        span_precision: SpanPrecisionReport::from_segments(all_spans.iter().map(|(lp, s)| (lp.as_str(), s))),
    })
}

fn compare_on_shared(
    scored: &[&EvaluationRecord],
    spans: &[(&EvaluationRecord, SegmentSpans)],
    base: &HashMap<&SegmentKey, &EvaluationRecord>,
    base_mode: Mode,
    gold: &GoldSet,
    options: &MetaEvalOptions,
) -> Result<BaselineComparison> {
    let shared: Vec<(&EvaluationRecord, &EvaluationRecord)> = scored
        .iter()
        .filter_map(|r| base.get(&r.key).map(|b| (*r, *b)))
        .collect();
    let segments = ScoredSegments {
        keys: shared.iter().map(|(r, _)| &r.key).collect(),
        gold: shared.iter().filter_map(|(r, _)| gold_score(Some(gold), &r.key)).collect(),
    };
    let a: Vec<f64> = shared.iter().map(|(r, _)| r.score()).collect();
    let b: Vec<f64> = shared.iter().map(|(_, r)| r.score()).collect();
    let system_stat = |xs: &[f64]| nan_if_none(segments.system_accuracy(xs));
    let seg_stat = |xs: &[f64]| nan_if_none(segments.seg_accuracy(xs).map(|t| t.acc_eq_star));

    let span_pairs: Vec<(SegmentSpans, SegmentSpans)> = spans
        .iter()
        .filter_map(|(r, s)| {
            let b = base.get(&r.key)?;
            let g = gold.get(&r.key)?;
            let pred = b.retained.iter().map(|w| &w.error);
            Some((s.clone(), SegmentSpans::new(&b.translation, pred, &g.gold_errors)))
        })
        .collect();
    let sa: Vec<&SegmentSpans> = span_pairs.iter().map(|(a, _)| a).collect();
    let sb: Vec<&SegmentSpans> = span_pairs.iter().map(|(_, b)| b).collect();
    let sp_stat = |xs: &[&SegmentSpans]| pooled_precision(xs, false);
    let mp_stat = |xs: &[&SegmentSpans]| pooled_precision(xs, true);
    let defined = |v: f64| (!v.is_nan()).then_some(v);

    Ok(BaselineComparison {
        mode: base_mode,
        shared_segments: shared.len(),
        system_accuracy: segments.system_accuracy(&b),
        seg_acc_eq_star: segments.seg_accuracy(&b).map(|t| t.acc_eq_star),
        sp: defined(sp_stat(&sb)),
        mp: defined(mp_stat(&sb)),
        system_significance: significance(&a, &b, system_stat, options)?,
        seg_significance: significance(&a, &b, seg_stat, options)?,
        sp_significance: significance(&sa, &sb, sp_stat, options)?,
        mp_significance: significance(&sa, &sb, mp_stat, options)?,
    })
}

/// Score deltas of post-edits under external metrics: threshold alignment,
/// verifier consistency and win/tie/lose. `None` when no post-edit has
/// scores.
pub fn post_edit_report(
    records: &[&EvaluationRecord],
    scores: &ScoreTable,
    options: &MetaEvalOptions,
) -> Result<Option<PostEditReport>> {
    // (record index, error index) -> delta per metric, in run order.
    let metrics = scores.metrics();
    let mut deltas: BTreeMap<&str, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    let mut post_edits = 0usize;
    for (ri, r) in records.iter().enumerate() {
        for (ei, ape) in r.ape_translations.iter().enumerate() {
            if ape.is_none() {
                continue;
            }
            post_edits += 1;
            for m in &metrics {
                let tgt = scores.get(&r.key, ScoreVariant::Tgt, m);
                let edited = scores.get(&r.key, ScoreVariant::Ape(ei), m);
                if let (Some(t), Some(e)) = (tgt, edited) {
                    deltas.entry(m).or_default().insert((ri, ei), e - t);
                }
            }
        }
    }
    if deltas.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for (metric, by_edit) in &deltas {
        let values: Vec<f64> = by_edit.values().copied().collect();
        let mean_delta = mean(&values);
        let threshold = AlignmentThresholds::for_metric(metric).ok();
        let (outcomes, truth): (Vec<_>, Vec<_>) = by_edit
            .iter()
            .filter_map(|(&(ri, ei), &d)| records[ri].verdicts[ei].map(|v| (v.outcome, d > 0.0)))
            .unzip();
        let consistency = if outcomes.is_empty() {
            None
        } else {
            Some(verifier_consistency(&outcomes, &truth, options.contrastive_positive)?)
        };
        rows.push(PostEditMetric {
            metric: metric.to_string(),
            post_edits: values.len(),
            mean_delta,
            threshold,
            aligned: threshold.map(|t| mean_delta >= t),
            consistency,
        });
    }
    Ok(Some(PostEditReport {
        post_edits,
        metrics: rows,
        win_tie_lose: win_tie_lose_row(&deltas)?,
    }))
}

/// Uses the two metrics with alignment thresholds when both are present,
/// else the first two by name.
fn win_tie_lose_row(deltas: &BTreeMap<&str, BTreeMap<(usize, usize), f64>>) -> Result<Option<WinTieLoseRow>> {
    let names: Vec<&str> = deltas.keys().copied().collect();
    let known = |t: f64| {
        names
            .iter()
            .copied()
            .find(|n| AlignmentThresholds::for_metric(n).ok() == Some(t))
    };
    let pair = match (known(AlignmentThresholds::COMETKIWI_QE), known(AlignmentThresholds::BLEURT20)) {
        (Some(a), Some(b)) => (a, b),
        _ if names.len() >= 2 => (names[0], names[1]),
        _ => return Ok(None),
    };
    let (da, db) = (&deltas[pair.0], &deltas[pair.1]);
    let (a, b): (Vec<f64>, Vec<f64>) = da
        .iter()
        .filter_map(|(k, &x)| db.get(k).map(|&y| (x, y)))
        .unzip();
    if a.is_empty() {
        return Ok(None);
    }
    Ok(Some(WinTieLoseRow {
        metric_a: pair.0.to_string(),
        metric_b: pair.1.to_string(),
        counts: win_tie_lose(&a, &b)?,
    }))
}

/// One output file of a rendered report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// JSON and text render to a single file; CSV renders one file per table.
pub fn render_report(report: &Report, format: ReportFormat) -> Result<Vec<RenderedFile>> {
    Ok(match format {
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(report)?;
            bytes.push(b'\n');
            vec![RenderedFile {
                name: "report.json".into(),
                bytes,
            }]
        }
        ReportFormat::Text => vec![RenderedFile {
            name: "report.txt".into(),
            bytes: render_text(report).into_bytes(),
        }],
        ReportFormat::Csv => csv_tables(report)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn opt_p(s: &Option<SignificanceResult>) -> String {
    s.map_or_else(
        || "-".to_string(),
        |s| format!("{:.4}{}", s.p_value, if s.significant { "*" } else { "" }),
    )
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |out: &mut String, cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "  {}", padded.join("  ").trim_end());
    };
    line(out, header.to_vec());
    line(out, widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for row in rows {
        line(out, row.iter().map(String::as_str).collect());
    }
    out.push('\n');
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let run = &report.run;
    let _ = writeln!(out, "Run");
    let _ = writeln!(
        out,
        "  mode {}  model {}  seed {}  corpus {}",
        run.mode,
        run.model.as_deref().unwrap_or("-"),
        run.seed,
        &run.corpus_digest[..run.corpus_digest.len().min(12)]
    );
    let _ = writeln!(out, "  segments {}  evaluated {}  failed {}\n", run.segments, run.evaluated, run.failed);

    if !report.system_scores.is_empty() {
        let _ = writeln!(out, "System scores");
        let rows: Vec<Vec<String>> = report
            .system_scores
            .iter()
            .map(|r| {
                vec![
                    r.lp.clone(),
                    r.system.clone(),
                    r.segments.to_string(),
                    format!("{:.4}", r.score),
                    opt(r.gold),
                ]
            })
            .collect();
        table(&mut out, &["LP", "System", "Segments", "MQM", "Gold"], &rows);
    }

    if let Some(meta) = &report.metaeval {
        let _ = writeln!(out, "Meta-evaluation (acc*_eq threshold fit in-sample)");
        let rows: Vec<Vec<String>> = meta
            .per_lp
            .iter()
            .map(|m| {
                vec![
                    m.lp.clone(),
                    m.systems.to_string(),
                    opt(m.system_accuracy),
                    opt(m.seg_accuracy.map(|t| t.result.acc_eq_star)),
                    opt(m.seg_accuracy.map(|t| t.result.epsilon)),
                    opt(m.sp),
                    opt(m.mp),
                ]
            })
            .collect();
        table(&mut out, &["LP", "Systems", "Acc", "acc*_eq", "epsilon", "SP", "MP"], &rows);
        let sp = &meta.span_precision;
        let _ = writeln!(
            out,
            "  pooled SP {}  MP {}  unlocated spans {}\n",
            opt(sp.sp()),
            opt(sp.mp()),
            sp.unlocated_spans
        );
        let baselines: Vec<Vec<String>> = meta
            .per_lp
            .iter()
            .filter_map(|m| {
                let b = m.baseline.as_ref()?;
                Some(vec![
                    m.lp.clone(),
                    b.mode.to_string(),
                    b.shared_segments.to_string(),
                    opt(b.system_accuracy),
                    opt_p(&b.system_significance),
                    opt(b.seg_acc_eq_star),
                    opt_p(&b.seg_significance),
                    opt(b.sp),
                    opt_p(&b.sp_significance),
                    opt(b.mp),
                    opt_p(&b.mp_significance),
                ])
            })
            .collect();
        if !baselines.is_empty() {
            let _ = writeln!(out, "Baseline comparison (p-values, * = significant at 0.05)");
            table(
                &mut out,
                &["LP", "Baseline", "Shared", "Acc", "p", "acc*_eq", "p", "SP", "p", "MP", "p"],
                &baselines,
            );
        }
    }

    if let Some(usage) = &report.usage {
        let _ = writeln!(out, "Token usage per segment ({} segments)", usage.segments);
        let rows: Vec<Vec<String>> = usage
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.role.to_string(),
                    if r.extra_module { "yes" } else { "no" }.into(),
                    r.requests.to_string(),
                    format!("{:.2}", r.avg_prompt_tokens),
                    format!("{:.2}", r.avg_completion_tokens),
                ]
            })
            .collect();
        table(&mut out, &["Module", "Extra", "Requests", "Prompt", "Completion"], &rows);
    }

    if let Some(dist) = &report.distribution {
        let _ = writeln!(out, "Errors per segment");
        let rows: Vec<Vec<String>> = dist
            .severities
            .iter()
            .map(|s| vec![s.severity.to_string(), format!("{:.3}", s.origin), format!("{:.3}", s.remain)])
            .collect();
        table(&mut out, &["Severity", "Origin", "Remain"], &rows);
        let ranked = |list: &[crate::metaeval::RankedCategory]| -> Vec<String> {
            list.iter().map(|c| format!("{} ({:.1}%)", c.category, c.share)).collect()
        };
        let columns = [
            ranked(&dist.top_original),
            ranked(&dist.top_retained),
            ranked(&dist.top_discarded),
        ];
        let depth = columns.iter().map(Vec::len).max().unwrap_or(0);
        if depth > 0 {
            let _ = writeln!(out, "Top categories");
            let rows: Vec<Vec<String>> = (0..depth)
                .map(|i| {
                    let mut row = vec![(i + 1).to_string()];
                    row.extend(columns.iter().map(|c| c.get(i).cloned().unwrap_or_default()));
                    row
                })
                .collect();
            table(&mut out, &["Rank", "Original", "Retained", "Discarded"], &rows);
        }
    }

    if let Some(pe) = &report.post_edit {
        let _ = writeln!(out, "Post-edit quality ({} post-edits)", pe.post_edits);
        let rows: Vec<Vec<String>> = pe
            .metrics
            .iter()
            .map(|m| {
                let c = m.consistency.as_ref();
                vec![
                    m.metric.clone(),
                    m.post_edits.to_string(),
                    format!("{:.4}", m.mean_delta),
                    m.threshold.map_or("-".into(), |t| format!("{t:.2}")),
                    m.aligned.map_or("-".into(), |a| a.to_string()),
                    opt(c.and_then(|c| c.precision)),
                    opt(c.and_then(|c| c.recall)),
                    opt(c.and_then(|c| c.f1)),
                ]
            })
            .collect();
        table(
            &mut out,
            &["Metric", "Edits", "Mean delta", "Threshold", "Aligned", "P", "R", "F1"],
            &rows,
        );
        if let Some(w) = &pe.win_tie_lose {
            let _ = writeln!(out, "Win/tie/lose ({} and {})", w.metric_a, w.metric_b);
            let c = &w.counts;
            let rows = vec![vec![
                format!("{:.1}", c.win_pct),
                format!("{:.1}", c.tie_pct),
                format!("{:.1}", c.lose_pct),
                opt(c.win_lose_ratio),
            ]];
            table(&mut out, &["Win%", "Tie%", "Lose%", "Win/Lose"], &rows);
        }
    }

    let _ = writeln!(out, "Failures: {}", report.failures.failed);
    for f in &report.failures.rows {
        let _ = writeln!(out, "  {}: {}", f.key, f.cause);
    }
    out
}

fn csv_file(name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<RenderedFile> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv export: {e}"));
    writer.write_record(header).map_err(csv_err)?;
    for row in rows {
        writer.write_record(&row).map_err(csv_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv export: {e}")))?;
    Ok(RenderedFile {
        name: format!("{name}.csv"),
        bytes,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_tables(report: &Report) -> Result<Vec<RenderedFile>> {
    let mut files = vec![csv_file(
        "system_scores",
        &["lp", "system", "segments", "score", "gold_segments", "gold"],
        report
            .system_scores
            .iter()
            .map(|r| {
                vec![
                    r.lp.clone(),
                    r.system.clone(),
                    r.segments.to_string(),
                    r.score.to_string(),
                    r.gold_segments.to_string(),
                    cell(r.gold),
                ]
            })
            .collect(),
    )?];
    if let Some(meta) = &report.metaeval {
        files.push(csv_file(
            "metaeval",
            &["lp", "systems", "scored_segments", "acc", "acc_eq_star", "epsilon", "in_sample", "sp", "mp"],
            meta.per_lp
                .iter()
                .map(|m| {
                    vec![
                        m.lp.clone(),
                        m.systems.to_string(),
                        m.scored_segments.to_string(),
                        cell(m.system_accuracy),
                        cell(m.seg_accuracy.map(|t| t.result.acc_eq_star)),
                        cell(m.seg_accuracy.map(|t| t.result.epsilon)),
                        m.seg_accuracy.map(|t| t.in_sample.to_string()).unwrap_or_default(),
                        cell(m.sp),
                        cell(m.mp),
                    ]
                })
                .collect(),
        )?);
        let p = |s: &Option<SignificanceResult>| cell(s.map(|s| s.p_value));
        let rows: Vec<Vec<String>> = meta
            .per_lp
            .iter()
            .filter_map(|m| {
                let b = m.baseline.as_ref()?;
                Some(vec![
                    m.lp.clone(),
                    b.mode.to_string(),
                    b.shared_segments.to_string(),
                    cell(b.system_accuracy),
                    p(&b.system_significance),
                    cell(b.seg_acc_eq_star),
                    p(&b.seg_significance),
                    cell(b.sp),
                    p(&b.sp_significance),
                    cell(b.mp),
                    p(&b.mp_significance),
                ])
            })
            .collect();
        if !rows.is_empty() {
            files.push(csv_file(
                "baseline",
                &["lp", "baseline_mode", "shared_segments", "acc", "acc_p", "acc_eq_star", "acc_eq_star_p", "sp", "sp_p", "mp", "mp_p"],
                rows,
            )?);
        }
    }
    if let Some(usage) = &report.usage {
        files.push(csv_file(
            "usage",
            &["role", "extra_module", "requests", "avg_prompt_tokens", "avg_completion_tokens"],
            usage
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.role.to_string(),
                        r.extra_module.to_string(),
                        r.requests.to_string(),
                        r.avg_prompt_tokens.to_string(),
                        r.avg_completion_tokens.to_string(),
                    ]
                })
                .collect(),
        )?);
    }
    if let Some(dist) = &report.distribution {
        files.push(csv_file(
            "severity",
            &["severity", "origin", "remain", "origin_count", "remain_count"],
            dist.severities
                .iter()
                .map(|s| {
                    vec![
                        s.severity.to_string(),
                        s.origin.to_string(),
                        s.remain.to_string(),
                        s.origin_count.to_string(),
                        s.remain_count.to_string(),
                    ]
                })
                .collect(),
        )?);
        files.push(csv_file(
            "categories",
            &["category", "original", "retained", "discarded", "original_share", "retained_share", "discarded_share"],
            dist.categories
                .iter()
                .map(|c| {
                    vec![
                        c.category.clone(),
                        c.original.to_string(),
                        c.retained.to_string(),
                        c.discarded.to_string(),
                        c.original_share.to_string(),
                        c.retained_share.to_string(),
                        c.discarded_share.to_string(),
                    ]
                })
                .collect(),
        )?);
    }
    if let Some(pe) = &report.post_edit {
        files.push(csv_file(
            "post_edit",
            &["metric", "post_edits", "mean_delta", "threshold", "aligned", "precision", "recall", "f1"],
            pe.metrics
                .iter()
                .map(|m| {
                    let c = m.consistency.as_ref();
                    vec![
                        m.metric.clone(),
                        m.post_edits.to_string(),
                        m.mean_delta.to_string(),
                        cell(m.threshold),
                        m.aligned.map(|a| a.to_string()).unwrap_or_default(),
                        cell(c.and_then(|c| c.precision)),
                        cell(c.and_then(|c| c.recall)),
                        cell(c.and_then(|c| c.f1)),
                    ]
                })
                .collect(),
        )?);
    }
    files.push(csv_file(
        "failures",
        &["key", "cause"],
        report
            .failures
            .rows
            .iter()
            .map(|f| vec![f.key.clone(), f.cause.clone()])
            .collect(),
    )?);
    Ok(files)
}
