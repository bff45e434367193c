//! Per-segment orchestration: evaluate, post-edit each error, verify each
//! post-edit in both label orders, filter, score. Also the random-filter
//! and metric-filter variants used as baselines.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, LlmClient, MaxTokens, RetryPolicy, RoleUsage, UsageTotals, Validated};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::mqm::{mqm_score, ErrorAnnotation, ScoreBreakdown, Segment, SegmentKey, Severity, Weight, WeightedError};
use crate::prompting::{
    build_ape_prompt, build_evaluator_prompt, build_verifier_prompt, default_few_shots, parse_ape_response,
    parse_evaluator_response, parse_verifier_response, FewShotExample, RoleTag, VerifierChoice,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictOutcome {
    Improved,
    NotImproved,
    Contrastive,
}

impl VerdictOutcome {
    pub fn weight(self) -> Weight {
        match self {
            VerdictOutcome::Improved => Weight::Full,
            VerdictOutcome::NotImproved => Weight::Zero,
            VerdictOutcome::Contrastive => Weight::Half,
        }
    }
}

/// Both verifier passes for one post-edit. In `pass1` A is the original
/// translation and B the post-edit; `pass2` swaps the labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierVerdict {
    pub pass1: VerifierChoice,
    pub pass2: VerifierChoice,
    pub outcome: VerdictOutcome,
    pub weight: Weight,
}

pub fn resolve_verdict(pass1: VerifierChoice, pass2: VerifierChoice) -> VerifierVerdict {
    let outcome = match (pass1, pass2) {
        (VerifierChoice::B, VerifierChoice::A) => VerdictOutcome::Improved,
        (VerifierChoice::A, VerifierChoice::B) => VerdictOutcome::NotImproved,
        _ => VerdictOutcome::Contrastive,
    };
    VerifierVerdict {
        pass1,
        pass2,
        outcome,
        weight: outcome.weight(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Evaluator only; every error counts at full weight.
    GembaMqm,
    MqmApe,
    /// Errors dropped at random instead of by verification.
    RandomFilter,
    /// Verifier replaced by an external segment metric.
    MetricFilter,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::GembaMqm => "gemba-mqm",
            Mode::MqmApe => "mqm-ape",
            Mode::RandomFilter => "random-filter",
            Mode::MetricFilter => "metric-filter",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gemba-mqm" => Ok(Mode::GembaMqm),
            "mqm-ape" => Ok(Mode::MqmApe),
            "random-filter" => Ok(Mode::RandomFilter),
            "metric-filter" => Ok(Mode::MetricFilter),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Only used in random-filter mode.
    pub keep_probability: f64,
    /// Execution detail; not recorded in run artifacts.
    #[serde(skip, default = "default_concurrency")]
    pub concurrency_limit: usize,
    pub retry: RetryPolicy,
    pub max_tokens: MaxTokens,
    /// Post-edit and verify only minor errors; others are kept at full weight.
    pub minor_only_ape: bool,
    /// External metric used in metric-filter mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_metric: Option<String>,
}

fn default_concurrency() -> usize {
    4
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::MqmApe,
            seed: 0,
            keep_probability: 0.5,
            concurrency_limit: default_concurrency(),
            retry: RetryPolicy::default(),
            max_tokens: MaxTokens::default(),
            minor_only_ape: false,
            filter_metric: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.keep_probability) {
            return Err(Error::invalid(format!(
                "keep probability {} outside [0, 1]",
                self.keep_probability
            )));
        }
        if self.concurrency_limit == 0 {
            return Err(Error::invalid("concurrency limit must be positive"));
        }
        self.retry.validate()
    }
}

/// Which translation of a segment an external score refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreVariant {
    /// The original translation.
    Tgt,
    /// Post-edit for the error at this index.
    Ape(usize),
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreVariant::Tgt => f.write_str("tgt"),
            ScoreVariant::Ape(i) => write!(f, "ape:{i}"),
        }
    }
}

impl FromStr for ScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "tgt" {
            return Ok(ScoreVariant::Tgt);
        }
        s.strip_prefix("ape:")
            .and_then(|i| i.parse().ok())
            .map(ScoreVariant::Ape)
            .ok_or_else(|| Error::invalid(format!("score variant `{s}` is neither `tgt` nor `ape:<index>`")))
    }
}

impl Serialize for ScoreVariant {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScoreVariant {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// External segment-level quality scorer (a QE metric, for example).
pub trait SegmentScorer: Send + Sync {
    fn metric_name(&self) -> &str;

    /// Score of `text`, which is the translation of `segment` identified by
    /// `variant`.
    fn score(&self, segment: &Segment, variant: ScoreVariant, text: &str) -> Result<f64>;
}

/// Keeps error `i` iff the metric scores its post-edit strictly above the
/// original translation.
pub fn metric_filter(errors: &[ErrorAnnotation], tgt_score: f64, ape_scores: &[Option<f64>]) -> Result<Vec<Weight>> {
    if ape_scores.len() != errors.len() {
        return Err(Error::invalid(format!(
            "{} post-edit scores for {} errors",
            ape_scores.len(),
            errors.len()
        )));
    }
    ape_scores
        .iter()
        .enumerate()
        .map(|(i, score)| match score {
            Some(s) if *s > tgt_score => Ok(Weight::Full),
            Some(_) => Ok(Weight::Zero),
            None => Err(Error::invalid(format!("missing metric score for error {i}"))),
        })
        .collect()
}

/// Keeps each error independently with probability `keep_probability`.
pub fn random_filter<R: Rng + ?Sized>(errors: &[ErrorAnnotation], keep_probability: f64, rng: &mut R) -> Vec<Weight> {
    errors
        .iter()
        .map(|_| {
            if rng.random_bool(keep_probability.clamp(0.0, 1.0)) {
                Weight::Full
            } else {
                Weight::Zero
            }
        })
        .collect()
}

/// RNG stream for one segment, derived from the run seed and the segment key.
pub fn segment_rng(seed: u64, key: &SegmentKey) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.to_string().as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Metric scores used by metric-filter mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub tgt: f64,
    pub ape: Vec<Option<f64>>,
}

/// Full per-segment trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub key: SegmentKey,
    pub mode: Mode,
    /// The evaluated translation, kept for span-overlap metrics.
    pub translation: String,
    pub errors: Vec<ErrorAnnotation>,
    /// Aligned with `errors`; `None` where no post-edit was requested.
    pub ape_translations: Vec<Option<String>>,
    /// Aligned with `errors`; `None` where no verification ran.
    pub verdicts: Vec<Option<VerifierVerdict>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_scores: Option<MetricComparison>,
    /// Final weight of every error, aligned with `errors`.
    pub weights: Vec<Weight>,
    /// Errors with non-zero weight.
    pub retained: Vec<WeightedError>,
    pub breakdown: ScoreBreakdown,
    pub usage: UsageTotals,
}

impl EvaluationRecord {
    pub fn score(&self) -> f64 {
        self.breakdown.score
    }

    pub fn discarded(&self) -> impl Iterator<Item = &ErrorAnnotation> {
        self.errors
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| !w.is_retained())
            .map(|(e, _)| e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFailure {
    pub key: SegmentKey,
    pub cause: String,
    pub usage: UsageTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SegmentOutcome {
    Evaluated(EvaluationRecord),
    Failed(SegmentFailure),
}

impl SegmentOutcome {
    pub fn key(&self) -> &SegmentKey {
        match self {
            SegmentOutcome::Evaluated(r) => &r.key,
            SegmentOutcome::Failed(f) => &f.key,
        }
    }

    pub fn usage(&self) -> &UsageTotals {
        match self {
            SegmentOutcome::Evaluated(r) => &r.usage,
            SegmentOutcome::Failed(f) => &f.usage,
        }
    }

    pub fn record(&self) -> Option<&EvaluationRecord> {
        match self {
            SegmentOutcome::Evaluated(r) => Some(r),
            SegmentOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: RunConfig,
    pub corpus_digest: String,
    pub segments: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub header: RunHeader,
    pub outcomes: Vec<SegmentOutcome>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ArtifactLine {
    Header(RunHeader),
    Segment(SegmentOutcome),
}

impl RunArtifact {
    pub fn records(&self) -> impl Iterator<Item = &EvaluationRecord> {
        self.outcomes.iter().filter_map(SegmentOutcome::record)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SegmentFailure> {
        self.outcomes.iter().filter_map(|o| match o {
            SegmentOutcome::Failed(f) => Some(f),
            SegmentOutcome::Evaluated(_) => None,
        })
    }

    /// Token usage summed over every segment, including failed ones.
    pub fn usage_totals(&self) -> UsageTotals {
        let mut totals = UsageTotals::new();
        for outcome in &self.outcomes {
            for (role, usage) in outcome.usage() {
                totals.entry(*role).or_default().merge(usage);
            }
        }
        totals
    }

    /// Line-delimited JSON: one header line, then one line per segment.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &ArtifactLine::Header(self.header.clone()))?;
        out.push(b'\n');
        for outcome in &self.outcomes {
            serde_json::to_writer(&mut out, &ArtifactLine::Segment(outcome.clone()))?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_jsonl()?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut outcomes = Vec::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ingest = |message: String| Error::Ingest {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            match serde_json::from_str(&line).map_err(|e| ingest(e.to_string()))? {
                ArtifactLine::Header(h) if header.is_none() && outcomes.is_empty() => header = Some(h),
                ArtifactLine::Header(_) => return Err(ingest("unexpected header record".into())),
                ArtifactLine::Segment(o) => outcomes.push(o),
            }
        }
        let header = header.ok_or_else(|| Error::Ingest {
            path: path.to_path_buf(),
            line: 1,
            message: "run artifact has no header record".into(),
        })?;
        Ok(Self { header, outcomes })
    }
}

/// Ties the configuration, LLM client, evaluator examples and optional
/// external scorer together.
pub struct Pipeline {
    config: RunConfig,
    client: Arc<LlmClient>,
    shots: Vec<FewShotExample>,
    scorer: Option<Arc<dyn SegmentScorer>>,
    model: Option<String>,
}

/// Usage accumulated while evaluating one segment.
#[derive(Default)]
struct SegmentUsage(UsageTotals);

impl SegmentUsage {
    fn add(&mut self, role: RoleTag, usage: &RoleUsage) {
        self.0.entry(role).or_default().merge(usage);
    }

    fn take<T>(&mut self, role: RoleTag, outcome: std::result::Result<Validated<T>, BackendError>) -> std::result::Result<T, BackendError> {
        match outcome {
            Ok(v) => {
                self.add(role, &v.usage);
                Ok(v.value)
            }
            Err(e) => {
                if let BackendError::InvalidResponse { usage, .. } = &e {
                    self.add(role, usage);
                }
                Err(e)
            }
        }
    }
}

impl Pipeline {
    pub fn new(config: RunConfig, client: Arc<LlmClient>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            client,
            shots: default_few_shots(),
            scorer: None,
            model: None,
        })
    }

    pub fn with_shots(mut self, shots: Vec<FewShotExample>) -> Result<Self> {
        if shots.len() != 3 {
            return Err(Error::invalid("evaluator needs exactly 3 examples"));
        }
        self.shots = shots;
        Ok(self)
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn SegmentScorer>) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn with_model_name(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn wants_ape(&self, error: &ErrorAnnotation) -> bool {
        !self.config.minor_only_ape || error.severity == Severity::Minor
    }

    pub fn evaluate_segment(&self, segment: &Segment) -> SegmentOutcome {
        let mut usage = SegmentUsage::default();
        match self.evaluate_inner(segment, &mut usage) {
            Ok(record) => SegmentOutcome::Evaluated(record),
            Err(e) => SegmentOutcome::Failed(SegmentFailure {
                key: segment.key.clone(),
                cause: e.to_string(),
                usage: usage.0,
            }),
        }
    }

    fn evaluate_inner(&self, segment: &Segment, usage: &mut SegmentUsage) -> Result<EvaluationRecord> {
        segment.validate()?;
        let client = &self.client;
        let prompt = build_evaluator_prompt(segment, &self.shots)?;
        let errors = usage.take(
            RoleTag::Evaluator,
            client.complete_validated(&prompt, parse_evaluator_response),
        )?;
        let n = errors.len();
        let mut ape_translations = vec![None; n];
        let mut verdicts = vec![None; n];
        let mut metric_scores = None;

        let weights = match self.config.mode {
            // An empty error list also lands here: nothing to post-edit or verify.
            _ if errors.is_empty() => Vec::new(),
            Mode::GembaMqm => vec![Weight::Full; n],
            Mode::RandomFilter => {
                let mut rng = segment_rng(self.config.seed, &segment.key);
                random_filter(&errors, self.config.keep_probability, &mut rng)
            }
            Mode::MqmApe => {
                let mut weights = vec![Weight::Full; n];
                for (i, error) in errors.iter().enumerate() {
                    if !self.wants_ape(error) {
                        continue;
                    }
                    let edited = self.post_edit(segment, error, usage)?;
                    let verdict = self.verify(segment, &edited, usage)?;
                    weights[i] = verdict.weight;
                    ape_translations[i] = Some(edited);
                    verdicts[i] = Some(verdict);
                }
                weights
            }
            Mode::MetricFilter => {
                let scorer = self
                    .scorer
                    .as_ref()
                    .ok_or_else(|| Error::invalid("metric-filter mode needs an external scorer"))?;
                let tgt = scorer.score(segment, ScoreVariant::Tgt, &segment.translation)?;
                let mut ape_scores = vec![None; n];
                for (i, error) in errors.iter().enumerate() {
                    if !self.wants_ape(error) {
                        continue;
                    }
                    let edited = self.post_edit(segment, error, usage)?;
                    ape_scores[i] = Some(scorer.score(segment, ScoreVariant::Ape(i), &edited).map_err(|e| {
                        Error::invalid(format!("segment {}, error {i}: {e}", segment.key))
                    })?);
                    ape_translations[i] = Some(edited);
                }
                // Errors that were not post-edited keep full weight.
                let mut weights = vec![Weight::Full; n];
                let edited: Vec<usize> = (0..n).filter(|&i| ape_scores[i].is_some()).collect();
                let edited_errors: Vec<_> = edited.iter().map(|&i| errors[i].clone()).collect();
                let edited_scores: Vec<_> = edited.iter().map(|&i| ape_scores[i]).collect();
                for (&i, w) in edited.iter().zip(metric_filter(&edited_errors, tgt, &edited_scores)?) {
                    weights[i] = w;
                }
                metric_scores = Some(MetricComparison {
                    metric: scorer.metric_name().to_string(),
                    tgt,
                    ape: ape_scores,
                });
                weights
            }
        };

        let retained: Vec<WeightedError> = errors
            .iter()
            .zip(&weights)
            .filter(|(_, w)| w.is_retained())
            .map(|(e, &weight)| WeightedError {
                error: e.clone(),
                weight,
            })
            .collect();
        let breakdown = mqm_score(&retained);
        Ok(EvaluationRecord {
            key: segment.key.clone(),
            mode: self.config.mode,
            translation: segment.translation.clone(),
            errors,
            ape_translations,
            verdicts,
            metric_scores,
            weights,
            retained,
            breakdown,
            usage: std::mem::take(&mut usage.0),
        })
    }

    fn post_edit(&self, segment: &Segment, error: &ErrorAnnotation, usage: &mut SegmentUsage) -> Result<String> {
        let prompt = build_ape_prompt(segment, error)?;
        Ok(usage.take(RoleTag::Editor, self.client.complete_validated(&prompt, parse_ape_response))?)
    }

    /// Runs both verifier passes; the second always runs, even when the
    /// first already prefers the original.
    fn verify(&self, segment: &Segment, edited: &str, usage: &mut SegmentUsage) -> Result<VerifierVerdict> {
        let lp = &segment.key.lp;
        let forward = build_verifier_prompt(&segment.source, &segment.translation, edited, lp)?;
        let pass1 = usage.take(
            RoleTag::Verifier,
            self.client.complete_validated(&forward, parse_verifier_response),
        )?;
        let swapped = build_verifier_prompt(&segment.source, edited, &segment.translation, lp)?;
        let pass2 = usage.take(
            RoleTag::Verifier,
            self.client.complete_validated(&swapped, parse_verifier_response),
        )?;
        Ok(resolve_verdict(pass1, pass2))
    }

    /// Evaluates every segment with at most `concurrency_limit` segments in
    /// flight. Outcomes are returned in corpus order.
    pub fn run_corpus(&self, corpus: &Corpus) -> Result<RunArtifact> {
        if corpus.segments.is_empty() {
            return Err(Error::invalid("corpus is empty"));
        }
        if self.config.mode == Mode::MetricFilter && self.scorer.is_none() {
            return Err(Error::invalid("metric-filter mode needs an external scorer"));
        }
        let segments = &corpus.segments;
        let workers = self.config.concurrency_limit.min(segments.len());
        let next = AtomicUsize::new(0);
        let mut indexed: Vec<(usize, SegmentOutcome)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let idx = next.fetch_add(1, Ordering::SeqCst);
                            let Some(segment) = segments.get(idx) else { break };
                            done.push((idx, self.evaluate_segment(segment)));
                        }
                        done
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("segment worker panicked"))
                .collect()
        });
        indexed.sort_by_key(|(idx, _)| *idx);
        Ok(RunArtifact {
            header: RunHeader {
                config: self.config.clone(),
                corpus_digest: corpus.digest.clone(),
                segments: segments.len(),
                model: self.model.clone(),
            },
            outcomes: indexed.into_iter().map(|(_, o)| o).collect(),
        })
    }
}
