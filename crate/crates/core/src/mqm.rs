//! MQM domain types: segments, the error taxonomy, and error-based scoring.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Lower bound applied to segment scores.
pub const SCORE_FLOOR: f64 = -25.0;

/// Source/target language codes, rendered as `src-tgt` (e.g. `zh-en`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguagePair {
    source: String,
    target: String,
}

impl LanguagePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let source = source.into().trim().to_ascii_lowercase();
        let target = target.into().trim().to_ascii_lowercase();
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid("language codes must be non-empty"));
        }
        if source == target {
            return Err(Error::invalid(format!(
                "source and target language are both `{source}`"
            )));
        }
        Ok(Self { source, target })
    }

    pub fn source_lang(&self) -> &str {
        &self.source
    }

    pub fn target_lang(&self) -> &str {
        &self.target
    }

    /// English display name of the source language, used in prompts.
    pub fn source_name(&self) -> &str {
        language_name(&self.source)
    }

    pub fn target_name(&self) -> &str {
        language_name(&self.target)
    }
}

/// Maps a language code to the English name used in prompt templates.
/// Unknown codes are returned unchanged.
pub fn language_name(code: &str) -> &str {
    let primary = code.split(['-', '_']).next().unwrap_or(code);
    match primary {
        "en" => "English",
        "de" => "German",
        "ru" => "Russian",
        "zh" => "Chinese",
        "cs" => "Czech",
        "ja" => "Japanese",
        "uk" => "Ukrainian",
        "fr" => "French",
        "es" => "Spanish",
        "he" => "Hebrew",
        "hr" => "Croatian",
        "liv" => "Livonian",
        "sah" => "Yakut",
        "as" => "Assamese",
        "mai" => "Maithili",
        "kn" => "Kannada",
        "pa" => "Punjabi",
        "hi" => "Hindi",
        _ => code,
    }
}

impl fmt::Display for LanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

impl FromStr for LanguagePair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (src, tgt) = s
            .split_once('-')
            .ok_or_else(|| Error::invalid(format!("language pair `{s}` is not of the form src-tgt")))?;
        Self::new(src, tgt)
    }
}

impl Serialize for LanguagePair {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LanguagePair {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Identity of a segment within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentKey {
    pub lp: LanguagePair,
    #[serde(rename = "system", alias = "system_id")]
    pub system_id: String,
    #[serde(deserialize_with = "string_or_number")]
    pub doc_id: String,
    #[serde(deserialize_with = "string_or_number")]
    pub seg_id: String,
}

fn string_or_number<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<String, D::Error> {
    match serde_json::Value::deserialize(deserializer)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("expected string or number, found {other}"))),
    }
}

impl SegmentKey {
    /// Key of the source item this translation belongs to: all systems'
    /// translations of one source segment share it.
    pub fn item(&self) -> (LanguagePair, String, String) {
        (self.lp.clone(), self.doc_id.clone(), self.seg_id.clone())
    }
}

impl fmt::Display for SegmentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.lp, self.system_id, self.doc_id, self.seg_id)
    }
}

/// One source/translation unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(flatten)]
    pub key: SegmentKey,
    pub source: String,
    pub translation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_errors: Option<Vec<ErrorAnnotation>>,
}

impl Segment {
    pub fn new(key: SegmentKey, source: impl Into<String>, translation: impl Into<String>) -> Result<Self> {
        let segment = Self {
            key,
            source: source.into(),
            translation: translation.into(),
            reference: None,
            gold_score: None,
            gold_errors: None,
        };
        segment.validate()?;
        Ok(segment)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.trim().is_empty() {
            return Err(Error::invalid(format!("segment {}: empty source", self.key)));
        }
        if self.translation.trim().is_empty() {
            return Err(Error::invalid(format!("segment {}: empty translation", self.key)));
        }
        if let Some(errors) = &self.gold_errors {
            for e in errors {
                e.validate_against(&self.translation)
                    .map_err(|err| Error::invalid(format!("segment {}: {err}", self.key)))?;
            }
        }
        Ok(())
    }
}

/// MQM error severity. Ordered `Minor < Major < Critical`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Critical,
    Major,
    Minor,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Critical, Severity::Major, Severity::Minor];

    /// Penalty of one error at full weight.
    pub fn penalty(self) -> f64 {
        match self {
            Severity::Critical => 25.0,
            Severity::Major => 5.0,
            Severity::Minor => 1.0,
        }
    }

    fn rank(self) -> u8 {
        match self {
            Severity::Minor => 0,
            Severity::Major => 1,
            Severity::Critical => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Critical => "critical",
            Severity::Major => "major",
            Severity::Minor => "minor",
        }
    }

    /// Critical and major errors form the "major" subset used by major precision.
    pub fn is_major_or_worse(self) -> bool {
        self >= Severity::Major
    }
}

impl PartialOrd for Severity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Severity {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "critical" => Ok(Severity::Critical),
            "major" => Ok(Severity::Major),
            "minor" => Ok(Severity::Minor),
            other => Err(Error::invalid(format!("unknown severity `{other}`"))),
        }
    }
}

impl<'de> Deserialize<'de> for Severity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Top level of the evaluator's error taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TopCategory {
    Accuracy,
    Fluency,
    Style,
    Terminology,
    NonTranslation,
    Other,
    NoError,
}

impl TopCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            TopCategory::Accuracy => "accuracy",
            TopCategory::Fluency => "fluency",
            TopCategory::Style => "style",
            TopCategory::Terminology => "terminology",
            TopCategory::NonTranslation => "non-translation",
            TopCategory::Other => "other",
            TopCategory::NoError => "no-error",
        }
    }

    /// Whether a subcategory is meaningful for this top-level category.
    pub fn takes_sub(self) -> bool {
        matches!(
            self,
            TopCategory::Accuracy
                | TopCategory::Fluency
                | TopCategory::Style
                | TopCategory::Terminology
                | TopCategory::Other
        )
    }

    fn from_compact(compact: &str) -> Option<Self> {
        Some(match compact {
            "accuracy" => TopCategory::Accuracy,
            "fluency" => TopCategory::Fluency,
            "style" => TopCategory::Style,
            "terminology" => TopCategory::Terminology,
            "nontranslation" => TopCategory::NonTranslation,
            "other" => TopCategory::Other,
            "noerror" | "noerrors" => TopCategory::NoError,
            _ => return None,
        })
    }
}

/// Error category: a top-level class plus an optional subcategory.
///
/// `Other` may also carry a subcategory; unknown categories returned by a
/// model are kept there instead of being dropped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ErrorCategory {
    pub top: TopCategory,
    pub sub: Option<String>,
}

impl ErrorCategory {
    pub fn new(top: TopCategory, sub: Option<&str>) -> Self {
        let sub = sub
            .map(normalize_sub)
            .filter(|s| !s.is_empty() && top.takes_sub());
        Self { top, sub }
    }

    pub fn no_error() -> Self {
        Self { top: TopCategory::NoError, sub: None }
    }

    pub fn is_no_error(&self) -> bool {
        self.top == TopCategory::NoError
    }

    /// Most specific label with the first letter capitalised, e.g.
    /// `Mistranslation` for `accuracy/mistranslation`.
    pub fn display_label(&self) -> String {
        let label = self.sub.as_deref().unwrap_or(self.top.as_str());
        let mut chars = label.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.sub {
            Some(sub) => write!(f, "{}/{}", self.top.as_str(), sub),
            None => f.write_str(self.top.as_str()),
        }
    }
}

impl Serialize for ErrorCategory {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ErrorCategory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        if raw.trim().is_empty() {
            return Err(serde::de::Error::custom("empty error category"));
        }
        Ok(canonicalize_category(&raw))
    }
}

fn normalize_sub(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn compact(raw: &str) -> String {
    raw.chars()
        .filter(|c| !c.is_whitespace() && *c != '-' && *c != '_')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Normalises a category string produced by a model or an annotation file.
///
/// Accepts `top/sub` and bare `top` forms in any case, with whitespace,
/// hyphen, or underscore variants of the top-level name. Strings whose top
/// level is not recognised become `other` with the whole string as sub.
pub fn canonicalize_category(raw: &str) -> ErrorCategory {
    let raw = raw.trim();
    let (top_raw, sub_raw) = match raw.split_once('/') {
        Some((top, sub)) => (top, Some(sub)),
        None => (raw, None),
    };
    match TopCategory::from_compact(&compact(top_raw)) {
        Some(top) => ErrorCategory::new(top, sub_raw),
        None => ErrorCategory::new(TopCategory::Other, Some(raw)),
    }
}

/// One predicted or gold error.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub span: String,
    pub category: ErrorCategory,
    pub severity: Severity,
    /// Character (not byte) offsets into the translation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_end: Option<usize>,
}

impl ErrorAnnotation {
    pub fn new(span: impl Into<String>, category: ErrorCategory, severity: Severity) -> Self {
        Self {
            span: span.into(),
            category,
            severity,
            char_start: None,
            char_end: None,
        }
    }

    pub fn with_offsets(mut self, start: usize, end: usize) -> Self {
        self.char_start = Some(start);
        self.char_end = Some(end);
        self
    }

    /// Checks the span/offset invariants against the translation it annotates.
    pub fn validate_against(&self, translation: &str) -> Result<()> {
        if self.span.is_empty() && !self.category.is_no_error() {
            return Err(Error::invalid("error annotation with empty span"));
        }
        match (self.char_start, self.char_end) {
            (None, None) => Ok(()),
            (Some(start), Some(end)) => {
                let covered = char_slice(translation, start, end).ok_or_else(|| {
                    Error::invalid(format!("offsets {start}..{end} out of range for translation"))
                })?;
                if covered != self.span {
                    return Err(Error::invalid(format!(
                        "offsets {start}..{end} cover `{covered}`, not span `{}`",
                        self.span
                    )));
                }
                Ok(())
            }
            _ => Err(Error::invalid("char_start and char_end must be given together")),
        }
    }
}

/// Slice by character offsets; `None` when out of range or reversed.
pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let byte_at = |idx: usize| {
        if idx == text.chars().count() {
            Some(text.len())
        } else {
            text.char_indices().nth(idx).map(|(b, _)| b)
        }
    };
    Some(&text[byte_at(start)?..byte_at(end)?])
}

/// Weight given to an error after verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Weight {
    /// Discarded.
    Zero,
    /// Contrastive verdict.
    Half,
    Full,
}

impl Weight {
    pub fn value(self) -> f64 {
        match self {
            Weight::Zero => 0.0,
            Weight::Half => 0.5,
            Weight::Full => 1.0,
        }
    }

    pub fn is_retained(self) -> bool {
        self != Weight::Zero
    }
}

impl TryFrom<f64> for Weight {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        if value == 0.0 {
            Ok(Weight::Zero)
        } else if value == 0.5 {
            Ok(Weight::Half)
        } else if value == 1.0 {
            Ok(Weight::Full)
        } else {
            Err(Error::invalid(format!("error weight {value} not in {{0, 0.5, 1}}")))
        }
    }
}

impl Serialize for Weight {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = f64::deserialize(deserializer)?;
        Weight::try_from(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightedError {
    pub error: ErrorAnnotation,
    pub weight: Weight,
}

impl WeightedError {
    pub fn full(error: ErrorAnnotation) -> Self {
        Self { error, weight: Weight::Full }
    }
}

/// Weighted error counts per severity and the resulting segment score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub n_critical: f64,
    pub n_major: f64,
    pub n_minor: f64,
    pub score: f64,
}

impl ScoreBreakdown {
    pub fn count(&self, severity: Severity) -> f64 {
        match severity {
            Severity::Critical => self.n_critical,
            Severity::Major => self.n_major,
            Severity::Minor => self.n_minor,
        }
    }
}

/// MQM score of a set of weighted errors: `max(-25, -25 C - 5 M - m)` where
/// the counts are sums of weights. `no-error` annotations count for nothing.
pub fn mqm_score(errors: &[WeightedError]) -> ScoreBreakdown {
    let mut breakdown = ScoreBreakdown::default();
    for WeightedError { error, weight } in errors {
        if error.category.is_no_error() {
            continue;
        }
        let w = weight.value();
        match error.severity {
            Severity::Critical => breakdown.n_critical += w,
            Severity::Major => breakdown.n_major += w,
            Severity::Minor => breakdown.n_minor += w,
        }
    }
    let penalty = Severity::ALL
        .iter()
        .map(|&s| s.penalty() * breakdown.count(s))
        .sum::<f64>();
    // `0.0 - 0.0` keeps the empty score at +0.0 rather than -0.0.
    breakdown.score = (0.0 - penalty).max(SCORE_FLOOR);
    breakdown
}

/// System-level score: mean of its segment scores.
pub fn system_score(segment_scores: &[f64]) -> Result<f64> {
    if segment_scores.is_empty() {
        return Err(Error::invalid("no segments for system"));
    }
    Ok(segment_scores.iter().sum::<f64>() / segment_scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn err(sev: Severity, w: Weight) -> WeightedError {
        WeightedError {
            error: ErrorAnnotation::new("x", canonicalize_category("accuracy/mistranslation"), sev),
            weight: w,
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(mqm_score(&[]).score, 0.0);
        assert!(mqm_score(&[]).score.is_sign_positive());
        let s = mqm_score(&[err(Severity::Major, Weight::Full), err(Severity::Minor, Weight::Full)]);
        assert_eq!(s.score, -6.0);
        assert_eq!((s.n_major, s.n_minor), (1.0, 1.0));
        let s = mqm_score(&[err(Severity::Critical, Weight::Full), err(Severity::Critical, Weight::Full)]);
        assert_eq!(s.score, -25.0);
        assert_eq!(s.n_critical, 2.0);
        let s = mqm_score(&[err(Severity::Major, Weight::Half), err(Severity::Minor, Weight::Full)]);
        assert_eq!(s.score, -3.5);
    }

    #[test]
    fn no_error_annotations_score_zero() {
        let e = WeightedError::full(ErrorAnnotation::new("", ErrorCategory::no_error(), Severity::Critical));
        let s = mqm_score(&[e]);
        assert_eq!(s.score, 0.0);
        assert_eq!(s.n_critical, 0.0);
    }

    #[test]
    fn category_examples() {
        let c = canonicalize_category("Accuracy/Mistranslation");
        assert_eq!(c.top, TopCategory::Accuracy);
        assert_eq!(c.sub.as_deref(), Some("mistranslation"));
        assert_eq!(c.to_string(), "accuracy/mistranslation");

        assert_eq!(canonicalize_category("no-error"), ErrorCategory::no_error());
        assert_eq!(canonicalize_category("No Error"), ErrorCategory::no_error());
        assert_eq!(canonicalize_category("Non_Translation").top, TopCategory::NonTranslation);

        let c = canonicalize_category("weird-new-type");
        assert_eq!(c.top, TopCategory::Other);
        assert_eq!(c.sub.as_deref(), Some("weird-new-type"));
    }

    #[test]
    fn category_sub_whitespace_normalised() {
        let c = canonicalize_category(" Accuracy / Untranslated   Text ");
        assert_eq!(c.to_string(), "accuracy/untranslated text");
        assert_eq!(canonicalize_category("non-translation/foo").sub, None);
    }

    #[test]
    fn display_label_uses_most_specific_name() {
        assert_eq!(canonicalize_category("accuracy/mistranslation").display_label(), "Mistranslation");
        assert_eq!(canonicalize_category("non-translation").display_label(), "Non-translation");
    }

    #[test]
    fn system_score_mean() {
        assert_eq!(system_score(&[0.0, -6.0]).unwrap(), -3.0);
        assert_eq!(system_score(&[-25.0, -25.0]).unwrap(), -25.0);
        assert_eq!(system_score(&[0.0]).unwrap(), 0.0);
        let e = system_score(&[]).unwrap_err();
        assert!(e.to_string().contains("no segments for system"));
    }

    #[test]
    fn severity_order_and_parse() {
        assert!(Severity::Critical > Severity::Major && Severity::Major > Severity::Minor);
        assert_eq!("MAJOR".parse::<Severity>().unwrap(), Severity::Major);
        assert!("severe".parse::<Severity>().is_err());
    }

    #[test]
    fn language_pair_invariants() {
        let lp: LanguagePair = "zh-en".parse().unwrap();
        assert_eq!(lp.source_name(), "Chinese");
        assert_eq!(lp.target_name(), "English");
        assert!("en-en".parse::<LanguagePair>().is_err());
        assert!("-en".parse::<LanguagePair>().is_err());
        assert!("english".parse::<LanguagePair>().is_err());
    }

    #[test]
    fn offsets_must_cover_span() {
        let t = "Please ask, what is the order situation now?";
        let cat = canonicalize_category("style/awkward");
        let ok = ErrorAnnotation::new("situation", cat.clone(), Severity::Minor).with_offsets(30, 39);
        ok.validate_against(t).unwrap();
        let bad = ErrorAnnotation::new("situation", cat, Severity::Minor).with_offsets(29, 39);
        assert!(bad.validate_against(t).is_err());
        let unicode = ErrorAnnotation::new("情况", canonicalize_category("accuracy"), Severity::Minor)
            .with_offsets(4, 6);
        unicode.validate_against("请问订单情况").unwrap();
    }

    #[test]
    fn weight_rejects_other_values() {
        assert!(Weight::try_from(0.25).is_err());
        let w: Weight = serde_json::from_str("0.5").unwrap();
        assert_eq!(w, Weight::Half);
    }

    fn arb_weight() -> impl Strategy<Value = Weight> {
        prop_oneof![Just(Weight::Zero), Just(Weight::Half), Just(Weight::Full)]
    }

    fn arb_severity() -> impl Strategy<Value = Severity> {
        prop_oneof![Just(Severity::Critical), Just(Severity::Major), Just(Severity::Minor)]
    }

    proptest! {
        #[test]
        fn score_in_range_and_monotone(
            errs in proptest::collection::vec((arb_severity(), arb_weight()), 0..12),
            extra in (arb_severity(), prop_oneof![Just(Weight::Half), Just(Weight::Full)]),
        ) {
            let list: Vec<_> = errs.iter().map(|&(s, w)| err(s, w)).collect();
            let base = mqm_score(&list).score;
            prop_assert!((SCORE_FLOOR..=0.0).contains(&base));
            let mut more = list.clone();
            more.push(err(extra.0, extra.1));
            prop_assert!(mqm_score(&more).score <= base);
        }

        #[test]
        fn canonicalize_is_idempotent(raw in "[A-Za-z /_-]{1,24}") {
            prop_assume!(!raw.trim().is_empty());
            let once = canonicalize_category(&raw);
            let twice = canonicalize_category(&once.to_string());
            prop_assert_eq!(once, twice);
        }
    }
}
