//! Meta-evaluation: agreement of metric scores with human judgements,
//! error-span precision, significance testing, and the post-edit and
//! error-distribution statistics.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mqm::{char_slice, ErrorAnnotation, Severity};
use crate::pipeline::{EvaluationRecord, VerdictOutcome};

/// Significance level used throughout.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Default number of permutation resamples.
pub const DEFAULT_RESAMPLES: usize = 1000;

/// Fraction of system pairs ordered the same way by metric and gold.
///
/// Pairs tied in gold are skipped; a metric tie on a pair that gold
/// separates counts as a disagreement.
pub fn system_pairwise_accuracy(metric: &BTreeMap<String, f64>, gold: &BTreeMap<String, f64>) -> Result<f64> {
    if metric.len() < 2 {
        return Err(Error::invalid("system-level accuracy needs at least 2 systems"));
    }
    if metric.keys().ne(gold.keys()) {
        return Err(Error::invalid("metric and gold cover different systems"));
    }
    let systems: Vec<(&f64, &f64)> = metric.values().zip(gold.values()).collect();
    let mut agree = 0usize;
    let mut total = 0usize;
    for (i, (mi, gi)) in systems.iter().enumerate() {
        for (mj, gj) in &systems[i + 1..] {
            let gold_diff = *gi - *gj;
            if gold_diff == 0.0 {
                continue;
            }
            total += 1;
            let metric_diff = *mi - *mj;
            if metric_diff != 0.0 && metric_diff.signum() == gold_diff.signum() {
                agree += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("every system pair is tied in gold"));
    }
    Ok(agree as f64 / total as f64)
}

/// Result of tie calibration for group-by-item pairwise accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TieCalibrationResult {
    /// Metric differences up to and including this value count as ties.
    pub epsilon: f64,
    pub acc_eq_star: f64,
    pub pair_count: usize,
}

/// How a within-item pair's correctness depends on the tie threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PairKind {
    /// Gold tie: correct once the metric difference counts as a tie.
    GoldTie,
    /// Gold and metric agree on the order: correct while not a metric tie.
    Agree,
    /// Correct for no threshold.
    Never,
}

fn item_pairs(items: &[Vec<(f64, f64)>]) -> Vec<(f64, PairKind)> {
    let mut pairs = Vec::new();
    for item in items {
        for (i, &(mi, gi)) in item.iter().enumerate() {
            for &(mj, gj) in &item[i + 1..] {
                let d = (mi - mj).abs();
                let kind = if gi == gj {
                    PairKind::GoldTie
                } else if mi != mj && (mi - mj).signum() == (gi - gj).signum() {
                    PairKind::Agree
                } else {
                    PairKind::Never
                };
                pairs.push((d, kind));
            }
        }
    }
    pairs
}

/// acc_eq at a fixed threshold: `(correct, total)` over within-item pairs.
pub fn acc_eq_at(items: &[Vec<(f64, f64)>], epsilon: f64) -> (usize, usize) {
    let pairs = item_pairs(items);
    let correct = pairs
        .iter()
        .filter(|(d, kind)| match kind {
            PairKind::GoldTie => *d <= epsilon,
            PairKind::Agree => *d > epsilon,
            PairKind::Never => false,
        })
        .count();
    (correct, pairs.len())
}

/// Group-by-item pairwise accuracy with tie calibration.
///
/// Each item lists `(metric, gold)` scores of the systems that translated
/// one source segment; pairs are formed within items only. Candidate
/// thresholds are 0 and every observed within-item metric difference; the
/// best one is returned, preferring the smallest on ties. The threshold is
/// fit on the same data it is scored on.
pub fn seg_acc_star_eq(items: &[Vec<(f64, f64)>]) -> Result<TieCalibrationResult> {
    let pairs = item_pairs(items);
    if pairs.is_empty() {
        return Err(Error::invalid("no within-item pairs to score"));
    }
    let mut tie_d: Vec<f64> = pairs.iter().filter(|p| p.1 == PairKind::GoldTie).map(|p| p.0).collect();
    let mut agree_d: Vec<f64> = pairs.iter().filter(|p| p.1 == PairKind::Agree).map(|p| p.0).collect();
    tie_d.sort_by(f64::total_cmp);
    agree_d.sort_by(f64::total_cmp);

    let mut candidates: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best = (0usize, 0.0f64);
    let mut first = true;
    for eps in candidates {
        let ties_correct = tie_d.partition_point(|&d| d <= eps);
        let agree_correct = agree_d.len() - agree_d.partition_point(|&d| d <= eps);
        let correct = ties_correct + agree_correct;
        if first || correct > best.0 {
            best = (correct, eps);
            first = false;
        }
    }
    Ok(TieCalibrationResult {
        epsilon: best.1,
        acc_eq_star: best.0 as f64 / pairs.len() as f64,
        pair_count: pairs.len(),
    })
}

/// Token positions covered by error spans.
pub type PositionSet = BTreeSet<usize>;

/// Positions of a translation's whitespace tokens covered by the given
/// annotations, and the number of spans that could not be located.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpanPositions {
    pub positions: PositionSet,
    pub unlocated: usize,
}

fn token_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = None;
    for (idx, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                ranges.push((s, idx));
                start = None;
            }
            (false, None) => start = Some(idx),
            _ => {}
        }
    }
    if let Some(s) = start {
        ranges.push((s, text.len()));
    }
    ranges
}

fn find_case_insensitive(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    let folded: Vec<char> = needle.chars().flat_map(char::to_lowercase).collect();
    if folded.is_empty() {
        return None;
    }
    for (start, _) in haystack.char_indices() {
        let mut want = folded.iter();
        let mut end = start;
        let mut matched = true;
        'scan: for (offset, ch) in haystack[start..].char_indices() {
            for lower in ch.to_lowercase() {
                match want.next() {
                    Some(&w) if w == lower => {}
                    Some(_) => {
                        matched = false;
                        break 'scan;
                    }
                    None => break 'scan,
                }
            }
            end = start + offset + ch.len_utf8();
            if want.len() == 0 {
                break;
            }
        }
        if matched && want.len() == 0 {
            return Some((start, end));
        }
    }
    None
}

/// Byte range of an annotation in `translation`: character offsets when
/// they are present and valid, else the first exact occurrence of the span,
/// else the first case-insensitive occurrence.
pub fn locate_span(translation: &str, annotation: &ErrorAnnotation) -> Option<(usize, usize)> {
    if let (Some(start), Some(end)) = (annotation.char_start, annotation.char_end) {
        if let Some(slice) = char_slice(translation, start, end) {
            if !slice.is_empty() {
                let offset = slice.as_ptr() as usize - translation.as_ptr() as usize;
                return Some((offset, offset + slice.len()));
            }
        }
    }
    if annotation.span.is_empty() {
        return None;
    }
    if let Some(pos) = translation.find(&annotation.span) {
        return Some((pos, pos + annotation.span.len()));
    }
    find_case_insensitive(translation, &annotation.span)
}

/// Union of the token positions of every annotation.
pub fn span_positions<'a>(translation: &str, annotations: impl IntoIterator<Item = &'a ErrorAnnotation>) -> SpanPositions {
    let tokens = token_ranges(translation);
    let mut out = SpanPositions::default();
    for annotation in annotations {
        if annotation.category.is_no_error() {
            continue;
        }
        match locate_span(translation, annotation) {
            Some((start, end)) => out.positions.extend(
                tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, &(ts, te))| ts < end && start < te)
                    .map(|(i, _)| i),
            ),
            None => out.unlocated += 1,
        }
    }
    out
}

/// Position sets of one segment, for all errors and for critical+major only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentSpans {
    pub pred: PositionSet,
    pub gold: PositionSet,
    pub pred_major: PositionSet,
    pub gold_major: PositionSet,
    pub unlocated: usize,
}

impl SegmentSpans {
    pub fn new<'p, 'g>(
        translation: &str,
        predicted: impl IntoIterator<Item = &'p ErrorAnnotation> + Clone,
        gold: impl IntoIterator<Item = &'g ErrorAnnotation> + Clone,
    ) -> Self {
        let major = |e: &&ErrorAnnotation| e.severity.is_major_or_worse();
        let pred = span_positions(translation, predicted.clone());
        let gold_all = span_positions(translation, gold.clone());
        let pred_major = span_positions(translation, predicted.into_iter().filter(major));
        let gold_major = span_positions(translation, gold.into_iter().filter(major));
        Self {
            pred: pred.positions,
            gold: gold_all.positions,
            pred_major: pred_major.positions,
            gold_major: gold_major.positions,
            unlocated: pred.unlocated + gold_all.unlocated,
        }
    }
}

/// Pooled counts behind a precision value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionCounts {
    pub overlap: usize,
    pub predicted: usize,
}

impl PrecisionCounts {
    pub fn add(&mut self, pred: &PositionSet, gold: &PositionSet) {
        self.overlap += pred.intersection(gold).count();
        self.predicted += pred.len();
    }

    /// `None` when nothing was predicted.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.overlap as f64 / self.predicted as f64)
    }
}

/// Micro-averaged precision of predicted positions against gold positions.
pub fn span_precision<'a>(pairs: impl IntoIterator<Item = (&'a PositionSet, &'a PositionSet)>) -> Option<f64> {
    let mut counts = PrecisionCounts::default();
    for (pred, gold) in pairs {
        counts.add(pred, gold);
    }
    counts.precision()
}

/// Pooled SP and MP for one group of segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanPrecisionSummary {
    pub sp: Option<f64>,
    pub mp: Option<f64>,
    pub all: PrecisionCounts,
    pub major: PrecisionCounts,
    pub segments: usize,
}

impl SpanPrecisionSummary {
    fn add(&mut self, spans: &SegmentSpans) {
        self.all.add(&spans.pred, &spans.gold);
        self.major.add(&spans.pred_major, &spans.gold_major);
        self.segments += 1;
        self.sp = self.all.precision();
        self.mp = self.major.precision();
    }
}

/// SP over all errors and MP over critical+major errors, pooled over the
/// corpus and broken down by language pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanPrecisionReport {
    #[serde(flatten)]
    pub pooled: SpanPrecisionSummary,
    pub unlocated_spans: usize,
    pub per_language: BTreeMap<String, SpanPrecisionSummary>,
}

impl SpanPrecisionReport {
    /// Segments are labelled with their language pair.
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = (&'a str, &'a SegmentSpans)>) -> Self {
        let mut report = Self::default();
        for (lp, spans) in segments {
            report.pooled.add(spans);
            report.per_language.entry(lp.to_string()).or_default().add(spans);
            report.unlocated_spans += spans.unlocated;
        }
        report
    }

    pub fn sp(&self) -> Option<f64> {
        self.pooled.sp
    }

    pub fn mp(&self) -> Option<f64> {
        self.pooled.mp
    }
}

/// Outcome of a paired permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// `stat(A) - stat(B)`.
    pub delta: f64,
    pub p_value: f64,
    pub n_resamples: usize,
    pub significant: bool,
}

/// One-sided PERM-BOTH test of `stat(A) > stat(B)`.
///
/// Each resample swaps the paired elements of A and B independently with
/// probability 0.5 and recomputes the difference. Resample `i` draws from
/// ChaCha stream `i` of `seed`, so results do not depend on scheduling.
/// `p = (1 + #{delta* >= delta}) / (n + 1)`.
pub fn perm_both_test<T, F>(a: &[T], b: &[T], stat: F, n_resamples: usize, seed: u64) -> Result<SignificanceResult>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired test over {} and {} segments",
            a.len(),
            b.len()
        )));
    }
    if n_resamples == 0 {
        return Err(Error::invalid("permutation test needs at least one resample"));
    }
    let delta = stat(a) - stat(b);
    let at_least: usize = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut sa = a.to_vec();
            let mut sb = b.to_vec();
            for (x, y) in sa.iter_mut().zip(sb.iter_mut()) {
                if rng.random_bool(0.5) {
                    std::mem::swap(x, y);
                }
            }
            usize::from(stat(&sa) - stat(&sb) >= delta)
        })
        .sum();
    let p_value = (1 + at_least) as f64 / (n_resamples + 1) as f64;
    Ok(SignificanceResult {
        delta,
        p_value,
        n_resamples,
        significant: p_value < SIGNIFICANCE_LEVEL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOutcome {
    Win,
    Tie,
    Lose,
}

/// Win when both metrics prefer the post-edit, lose when both prefer the
/// original, tie otherwise.
pub fn classify_pair(delta_a: f64, delta_b: f64) -> PairOutcome {
    if delta_a > 0.0 && delta_b > 0.0 {
        PairOutcome::Win
    } else if delta_a < 0.0 && delta_b < 0.0 {
        PairOutcome::Lose
    } else {
        PairOutcome::Tie
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinTieLose {
    pub n: usize,
    pub win_pct: f64,
    pub tie_pct: f64,
    pub lose_pct: f64,
    /// `win% / lose%`; `None` when nothing was lost.
    pub win_lose_ratio: Option<f64>,
}

/// Aggregates per-post-edit deltas (post-edit score minus original score)
/// under two metrics.
pub fn win_tie_lose(deltas_a: &[f64], deltas_b: &[f64]) -> Result<WinTieLose> {
    if deltas_a.is_empty() {
        return Err(Error::invalid("win/tie/lose over no post-edits"));
    }
    if deltas_a.len() != deltas_b.len() {
        return Err(Error::invalid("metric deltas are not aligned"));
    }
    let (mut win, mut tie, mut lose) = (0usize, 0usize, 0usize);
    for (&a, &b) in deltas_a.iter().zip(deltas_b) {
        match classify_pair(a, b) {
            PairOutcome::Win => win += 1,
            PairOutcome::Tie => tie += 1,
            PairOutcome::Lose => lose += 1,
        }
    }
    let n = deltas_a.len();
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(WinTieLose {
        n,
        win_pct: pct(win),
        tie_pct: pct(tie),
        lose_pct: pct(lose),
        win_lose_ratio: (lose > 0).then(|| pct(win) / pct(lose)),
    })
}

/// Minimum metric improvements that agree with human judgements at 95%
/// estimated accuracy.
pub struct AlignmentThresholds;

impl AlignmentThresholds {
    pub const COMETKIWI_QE: f64 = 1.18;
    pub const BLEURT20: f64 = 2.44;

    pub fn for_metric(metric: &str) -> Result<f64> {
        match metric.to_ascii_lowercase().as_str() {
            "cometkiwi_qe" | "cometkiwi" | "cometkiwi22" | "cometkiwi22_qe" => Ok(Self::COMETKIWI_QE),
            "bleurt20" | "bleurt" | "bleurt-20" => Ok(Self::BLEURT20),
            other => Err(Error::invalid(format!("no alignment threshold for metric `{other}`"))),
        }
    }
}

/// Whether a metric improvement reaches the metric's alignment threshold.
pub fn threshold_alignment(metric: &str, delta: f64) -> Result<bool> {
    Ok(delta >= AlignmentThresholds::for_metric(metric)?)
}

/// Agreement of verifier verdicts with a metric's judgement that the
/// post-edit is strictly better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Precision/recall/F1 of "improved" verdicts. Contrastive verdicts count
/// as negative unless `contrastive_positive` is set.
pub fn verifier_consistency(
    outcomes: &[VerdictOutcome],
    metric_truth: &[bool],
    contrastive_positive: bool,
) -> Result<ConsistencyReport> {
    if outcomes.is_empty() {
        return Err(Error::invalid("no verdicts to compare"));
    }
    if outcomes.len() != metric_truth.len() {
        return Err(Error::invalid("verdicts and metric judgements are not aligned"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&outcome, &truth) in outcomes.iter().zip(metric_truth) {
        let predicted = match outcome {
            VerdictOutcome::Improved => true,
            VerdictOutcome::Contrastive => contrastive_positive,
            VerdictOutcome::NotImproved => false,
        };
        match (predicted, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ConsistencyReport {
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        true_negative: tn,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub severity: Severity,
    pub origin_count: usize,
    pub remain_count: usize,
    /// Mean errors per segment before filtering.
    pub origin: f64,
    /// Mean errors per segment with non-zero weight after filtering.
    pub remain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub original: usize,
    pub retained: usize,
    pub discarded: usize,
    /// Percentage of all original errors.
    pub original_share: f64,
    pub retained_share: f64,
    pub discarded_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCategory {
    pub category: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub segments: usize,
    pub severities: Vec<SeverityRow>,
    pub categories: Vec<CategoryRow>,
    pub top_original: Vec<RankedCategory>,
    pub top_retained: Vec<RankedCategory>,
    pub top_discarded: Vec<RankedCategory>,
}

/// Severity and category distributions of the errors before and after
/// filtering.
pub fn error_distribution<'a>(
    records: impl IntoIterator<Item = &'a EvaluationRecord>,
    top_k: usize,
) -> Result<DistributionReport> {
    let mut segments = 0usize;
    let mut severity_counts: BTreeMap<Severity, (usize, usize)> = BTreeMap::new();
    let mut category_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for record in records {
        segments += 1;
        for (error, weight) in record.errors.iter().zip(&record.weights) {
            let kept = usize::from(weight.is_retained());
            let s = severity_counts.entry(error.severity).or_default();
            s.0 += 1;
            s.1 += kept;
            let c = category_counts.entry(error.category.to_string()).or_default();
            c.0 += 1;
            c.1 += kept;
        }
    }
    if segments == 0 {
        return Err(Error::invalid("error distribution of an empty run"));
    }
    let n = segments as f64;
    let severities = Severity::ALL
        .iter()
        .map(|&severity| {
            let (origin_count, remain_count) = severity_counts.get(&severity).copied().unwrap_or_default();
            SeverityRow {
                severity,
                origin_count,
                remain_count,
                origin: origin_count as f64 / n,
                remain: remain_count as f64 / n,
            }
        })
        .collect();

    let totals = category_counts
        .values()
        .fold((0usize, 0usize), |acc, &(o, r)| (acc.0 + o, acc.1 + r));
    let share = |count: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * count as f64 / total as f64
        }
    };
    let discarded_total = totals.0 - totals.1;
    let mut categories: Vec<CategoryRow> = category_counts
        .into_iter()
        .map(|(category, (original, retained))| CategoryRow {
            category,
            original,
            retained,
            discarded: original - retained,
            original_share: share(original, totals.0),
            retained_share: share(retained, totals.1),
            discarded_share: share(original - retained, discarded_total),
        })
        .collect();
    categories.sort_by(|a, b| b.original.cmp(&a.original).then_with(|| a.category.cmp(&b.category)));

    let top = |count: fn(&CategoryRow) -> usize, pct: fn(&CategoryRow) -> f64| {
        let mut ranked: Vec<&CategoryRow> = categories.iter().filter(|c| count(c) > 0).collect();
        ranked.sort_by(|a, b| count(b).cmp(&count(a)).then_with(|| a.category.cmp(&b.category)));
        ranked
            .into_iter()
            .take(top_k)
            .map(|c| RankedCategory {
                category: c.category.clone(),
                share: pct(c),
            })
            .collect::<Vec<_>>()
    };
    let top_original = top(|c| c.original, |c| c.original_share);
    let top_retained = top(|c| c.retained, |c| c.retained_share);
    let top_discarded = top(|c| c.discarded, |c| c.discarded_share);
    Ok(DistributionReport {
        segments,
        severities,
        categories,
        top_original,
        top_retained,
        top_discarded,
    })
}
