//! Corpus, gold-annotation and external-score ingestion.
//!
//! Corpora come as JSON lines or as TSV with a header row. Both carry the
//! required columns `lp`, `system`, `doc_id`, `seg_id`, `source`,
//! `translation` and the optional `reference`, `gold_score`, `gold_errors`
//! (in TSV, `gold_errors` holds a JSON array).

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mqm::{ErrorAnnotation, LanguagePair, Segment, SegmentKey};
use crate::pipeline::{ScoreVariant, SegmentScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => Ok(CorpusFormat::Jsonl),
            Some("tsv") | Some("tab") => Ok(CorpusFormat::Tsv),
            _ => Err(Error::invalid(format!(
                "cannot infer corpus format of {}; pass it explicitly",
                path.display()
            ))),
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::invalid(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Ordered segments with a content digest.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub segments: Vec<Segment>,
    pub digest: String,
    pub source_path: Option<PathBuf>,
}

impl Corpus {
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut seen = HashSet::new();
        for segment in &segments {
            segment.validate()?;
            if !seen.insert(&segment.key) {
                return Err(Error::invalid(format!("duplicate segment key {}", segment.key)));
            }
        }
        let digest = hex::encode(Sha256::digest(canonical_jsonl(&segments)?));
        Ok(Self {
            segments,
            digest,
            source_path: None,
        })
    }

    /// Canonical JSON-lines serialization (also the digest input).
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        canonical_jsonl(&self.segments)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

fn canonical_jsonl(segments: &[Segment]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for segment in segments {
        serde_json::to_writer(&mut out, segment)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// A skipped line in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestWarning {
    pub line: usize,
    pub message: String,
}

/// Reads a corpus. In strict mode the first malformed line is an error; in
/// lenient mode malformed lines are skipped and returned as warnings.
/// Duplicate keys are always an error.
pub fn ingest_corpus(path: &Path, format: CorpusFormat, strict: bool) -> Result<(Corpus, Vec<IngestWarning>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = match format {
        CorpusFormat::Jsonl => jsonl_rows(&text),
        CorpusFormat::Tsv => tsv_rows(&text).map_err(|(line, message)| Error::Ingest {
            path: path.to_path_buf(),
            line,
            message,
        })?,
    };
    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashMap::new();
    for (line, row) in rows {
        match row.and_then(segment_from_row) {
            Ok(segment) => {
                if let Some(first) = seen.insert(segment.key.clone(), line) {
                    return Err(Error::Ingest {
                        path: path.to_path_buf(),
                        line,
                        message: format!("duplicate segment {} (first seen on line {first})", segment.key),
                    });
                }
                segments.push(segment);
            }
            Err(message) if strict => {
                return Err(Error::Ingest {
                    path: path.to_path_buf(),
                    line,
                    message,
                })
            }
            Err(message) => warnings.push(IngestWarning { line, message }),
        }
    }
    let mut corpus = Corpus::from_segments(segments)?;
    corpus.source_path = Some(path.to_path_buf());
    Ok((corpus, warnings))
}

type Row = std::result::Result<serde_json::Map<String, Value>, String>;

fn jsonl_rows(text: &str) -> Vec<(usize, Row)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, line)| {
            let row = match serde_json::from_str::<Value>(line) {
                Ok(Value::Object(map)) => Ok(map),
                Ok(_) => Err("record is not a JSON object".to_string()),
                Err(e) => Err(format!("malformed JSON: {e}")),
            };
            (idx + 1, row)
        })
        .collect()
}

fn tsv_rows(text: &str) -> std::result::Result<Vec<(usize, Row)>, (usize, String)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or((1, "TSV file has no header row".to_string()))?;
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    Ok(lines
        .map(|(idx, line)| {
            let cells: Vec<&str> = line.split('\t').collect();
            let row = if cells.len() != columns.len() {
                Err(format!("expected {} columns, found {}", columns.len(), cells.len()))
            } else {
                columns
                    .iter()
                    .zip(cells)
                    .filter(|(_, cell)| !cell.is_empty())
                    .map(|(&col, cell)| {
                        let value = match col {
                            "gold_errors" => serde_json::from_str(cell)
                                .map_err(|e| format!("gold_errors is not a JSON array: {e}"))?,
                            "gold_score" => cell
                                .trim()
                                .parse::<f64>()
                                .map(Value::from)
                                .map_err(|_| format!("gold_score `{cell}` is not a number"))?,
                            _ => Value::String(cell.to_string()),
                        };
                        Ok((col.to_string(), value))
                    })
                    .collect()
            };
            (idx + 1, row)
        })
        .collect())
}

fn take_string(row: &mut serde_json::Map<String, Value>, names: &[&str]) -> std::result::Result<Option<String>, String> {
    for name in names {
        match row.remove(*name) {
            None | Some(Value::Null) => continue,
            Some(Value::String(s)) => return Ok(Some(s)),
            Some(Value::Number(n)) => return Ok(Some(n.to_string())),
            Some(other) => return Err(format!("field `{name}` has unexpected value {other}")),
        }
    }
    Ok(None)
}

fn required(row: &mut serde_json::Map<String, Value>, names: &[&str]) -> std::result::Result<String, String> {
    take_string(row, names)?.ok_or_else(|| format!("missing required field `{}`", names[0]))
}

fn key_from_row(row: &mut serde_json::Map<String, Value>) -> std::result::Result<SegmentKey, String> {
    let lp: LanguagePair = required(row, &["lp"])?.parse().map_err(|e: Error| e.to_string())?;
    Ok(SegmentKey {
        lp,
        system_id: required(row, &["system", "system_id"])?,
        doc_id: required(row, &["doc_id", "doc"])?,
        seg_id: required(row, &["seg_id", "seg"])?,
    })
}

fn gold_from_row(
    row: &mut serde_json::Map<String, Value>,
) -> std::result::Result<(Option<f64>, Option<Vec<ErrorAnnotation>>), String> {
    let gold_score = match row.remove("gold_score") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => n.as_f64(),
        Some(other) => return Err(format!("gold_score has unexpected value {other}")),
    };
    let gold_errors = match row.remove("gold_errors") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v).map_err(|e| format!("bad gold_errors: {e}"))?),
    };
    Ok((gold_score, gold_errors))
}

fn segment_from_row(mut row: serde_json::Map<String, Value>) -> std::result::Result<Segment, String> {
    let key = key_from_row(&mut row)?;
    let source = required(&mut row, &["source", "src"])?;
    let translation = required(&mut row, &["translation", "mt", "target"])?;
    let reference = take_string(&mut row, &["reference", "ref"])?;
    let (gold_score, gold_errors) = gold_from_row(&mut row)?;
    let segment = Segment {
        key,
        source,
        translation,
        reference,
        gold_score,
        gold_errors,
    };
    segment.validate().map_err(|e| e.to_string())?;
    Ok(segment)
}

/// Human judgements for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    #[serde(flatten)]
    pub key: SegmentKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_score: Option<f64>,
    #[serde(default)]
    pub gold_errors: Vec<ErrorAnnotation>,
}

pub type GoldSet = HashMap<SegmentKey, GoldRecord>;

/// Reads a gold file: JSON lines with `lp`, `system`, `doc_id`, `seg_id`,
/// `gold_score` and `gold_errors`.
pub fn load_gold(path: &Path) -> Result<GoldSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut gold = GoldSet::new();
    for (line, row) in jsonl_rows(&text) {
        let ingest = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut row = row.map_err(ingest)?;
        let key = key_from_row(&mut row).map_err(ingest)?;
        let (gold_score, gold_errors) = gold_from_row(&mut row).map_err(ingest)?;
        let record = GoldRecord {
            key: key.clone(),
            gold_score,
            gold_errors: gold_errors.unwrap_or_default(),
        };
        if gold.insert(key.clone(), record).is_some() {
            return Err(ingest(format!("duplicate gold record for {key}")));
        }
    }
    Ok(gold)
}

/// Gold judgements carried inline by corpus segments.
pub fn gold_from_corpus(corpus: &Corpus) -> GoldSet {
    corpus
        .segments
        .iter()
        .filter(|s| s.gold_score.is_some() || s.gold_errors.is_some())
        .map(|s| {
            (
                s.key.clone(),
                GoldRecord {
                    key: s.key.clone(),
                    gold_score: s.gold_score,
                    gold_errors: s.gold_errors.clone().unwrap_or_default(),
                },
            )
        })
        .collect()
}

/// One line of an external-scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(flatten)]
    pub key: SegmentKey,
    pub variant: ScoreVariant,
    pub metric: String,
    pub score: f64,
}

/// Scores from an external segment-level metric, keyed by segment,
/// variant and metric name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: HashMap<(SegmentKey, ScoreVariant, String), f64>,
}

impl ScoreTable {
    pub fn insert(&mut self, record: ScoreRecord) -> Option<f64> {
        self.scores
            .insert((record.key, record.variant, record.metric), record.score)
    }

    pub fn get(&self, key: &SegmentKey, variant: ScoreVariant, metric: &str) -> Option<f64> {
        self.scores
            .get(&(key.clone(), variant, metric.to_string()))
            .copied()
    }

    pub fn metrics(&self) -> Vec<String> {
        let mut names: Vec<_> = self
            .scores
            .keys()
            .map(|(_, _, m)| m.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        names.sort();
        names
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ingest = |message: String| Error::Ingest {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let record: ScoreRecord = serde_json::from_str(line).map_err(|e| ingest(e.to_string()))?;
            let label = format!("{} {} {}", record.key, record.variant, record.metric);
            if table.insert(record).is_some() {
                return Err(ingest(format!("duplicate score for {label}")));
            }
        }
        Ok(table)
    }
}

/// [`SegmentScorer`] that looks scores up in a [`ScoreTable`].
pub struct TableScorer {
    table: Arc<ScoreTable>,
    metric: String,
}

impl TableScorer {
    pub fn new(table: Arc<ScoreTable>, metric: impl Into<String>) -> Self {
        Self {
            table,
            metric: metric.into(),
        }
    }
}

impl SegmentScorer for TableScorer {
    fn metric_name(&self) -> &str {
        &self.metric
    }

    fn score(&self, segment: &Segment, variant: ScoreVariant, _text: &str) -> Result<f64> {
        self.table
            .get(&segment.key, variant, &self.metric)
            .ok_or_else(|| Error::invalid(format!("no {} score for {} {variant}", self.metric, segment.key)))
    }
}

/// [`SegmentScorer`] backed by an HTTP service. Posts
/// `{"metric", "source", "translation", "reference"}` and reads `{"score"}`.
pub struct HttpScorer {
    url: String,
    metric: String,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(url: impl Into<String>, metric: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            url: url.into(),
            metric: metric.into(),
            agent,
        }
    }
}

impl SegmentScorer for HttpScorer {
    fn metric_name(&self) -> &str {
        &self.metric
    }

    fn score(&self, segment: &Segment, _variant: ScoreVariant, text: &str) -> Result<f64> {
        #[derive(Serialize)]
        struct Request<'a> {
            metric: &'a str,
            source: &'a str,
            translation: &'a str,
            reference: Option<&'a str>,
        }
        #[derive(Deserialize)]
        struct Response {
            score: f64,
        }
        let body = Request {
            metric: &self.metric,
            source: &segment.source,
            translation: text,
            reference: segment.reference.as_deref(),
        };
        let response: Response = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::invalid(format!("scorer request to {} failed: {e}", self.url)))?;
        Ok(response.score)
    }
}
