//! Prompt construction for the evaluator, post-editor and verifier roles,
//! and parsers for their responses.
//!
//! The templates are language-agnostic: only the language names and the
//! texts are interpolated. Every builder is deterministic, so identical
//! inputs produce byte-identical prompts (and therefore identical replay
//! digests).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::mqm::{canonicalize_category, language_name, ErrorAnnotation, LanguagePair, Segment, Severity};

const EVALUATOR_SYSTEM: &str = "You are an annotator for the quality of machine translation. \
Your task is to identify errors and assess the quality of the translation.";

const EVALUATOR_USER: &str = "{source_language} source:\n\
```{source_segment}```\n\
{target_language} translation:\n\
```{target_segment}```\n\
\n\
Based on the source segment and machine translation surrounded with triple backticks, \
identify error types in the translation and classify them. The categories of errors are: \
accuracy (addition, mistranslation, omission, untranslated text), fluency (character encoding, \
grammar, inconsistency, punctuation, register, spelling), style (awkward), terminology \
(inappropriate for context, inconsistent use), non-translation, other, or no-error.\n\
Each error is classified as one of three categories: critical, major, and minor. Critical \
errors inhibit comprehension of the text. Major errors disrupt the flow, but what the text is \
trying to say is still understandable. Minor errors are technically errors, but do not disrupt \
the flow or hinder comprehension.";

const EDITOR_USER: &str = "{source_language} source: \"{source_segment}\"\n\
{target_language} translation: \"{target_segment}\"\n\
\n\
Please post-edit the translation to address the identified error: \
\"{error_category} - {error_content}\". Provide only the corrected {target_language} \
translation after \"Corrected Translation:\" without adding any additional explanations or \
translation information.";

const VERIFIER_USER: &str = "{source_language} source: \"{source_segment}\"\n\
\n\
Evaluating the following translations:\n\
{target_language} translation A: \"{target_segment_a}\"\n\
{target_language} translation B: \"{target_segment_b}\"\n\
\n\
Which translation is better? Please output either \"A\" or \"B\" only, without any additional \
explanation.\n\
\n\
Answer:";

/// Marker after which the post-editor writes its output.
pub const CORRECTED_MARKER: &str = "Corrected Translation:";

const DEFAULT_SHOTS: &str = include_str!("../fixtures/few_shot.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    fn new(role: Role, content: String) -> Self {
        debug_assert!(!content.is_empty());
        Self { role, content }
    }
}

/// Which pipeline module a prompt belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleTag {
    Evaluator,
    Editor,
    Verifier,
}

impl RoleTag {
    pub const ALL: [RoleTag; 3] = [RoleTag::Evaluator, RoleTag::Editor, RoleTag::Verifier];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Evaluator => "evaluator",
            RoleTag::Editor => "editor",
            RoleTag::Verifier => "verifier",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role_tag: RoleTag,
    pub messages: Vec<ChatMessage>,
}

/// Answer of one verifier pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerifierChoice {
    A,
    B,
}

/// A worked example shown to the evaluator before the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub source_lang: String,
    pub target_lang: String,
    pub source: String,
    pub translation: String,
    pub response: String,
}

/// Loads few-shot examples from a JSON-lines file (one example per line).
pub fn load_few_shots(path: &Path) -> Result<Vec<FewShotExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_few_shots(&text).map_err(|(line, message)| Error::Ingest {
        path: path.to_path_buf(),
        line,
        message,
    })
}

fn parse_few_shots(text: &str) -> std::result::Result<Vec<FewShotExample>, (usize, String)> {
    let mut shots = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let shot: FewShotExample =
            serde_json::from_str(line).map_err(|e| (idx + 1, e.to_string()))?;
        if let Err(e) = parse_evaluator_response(&shot.response) {
            return Err((idx + 1, format!("example response does not parse: {e}")));
        }
        shots.push(shot);
    }
    if shots.len() != 3 {
        return Err((0, format!("expected 3 few-shot examples, found {}", shots.len())));
    }
    Ok(shots)
}

/// The three shipped evaluator examples.
pub fn default_few_shots() -> Vec<FewShotExample> {
    parse_few_shots(DEFAULT_SHOTS).expect("bundled few-shot fixture is valid")
}

/// Single-pass `{name}` substitution; values are never re-scanned.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let value = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match value {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn evaluator_user(src_lang: &str, tgt_lang: &str, source: &str, translation: &str) -> String {
    render(
        EVALUATOR_USER,
        &[
            ("source_language", src_lang),
            ("target_language", tgt_lang),
            ("source_segment", source),
            ("target_segment", translation),
        ],
    )
}

fn require_text(what: &str, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::invalid(format!("{what} must be non-empty")));
    }
    Ok(())
}

/// Three-shot evaluator prompt: system message, three (user, assistant)
/// example pairs, then the query.
pub fn build_evaluator_prompt(segment: &Segment, shots: &[FewShotExample]) -> Result<PromptBundle> {
    if shots.len() != 3 {
        return Err(Error::invalid(format!(
            "evaluator prompt needs exactly 3 examples, got {}",
            shots.len()
        )));
    }
    require_text("source", &segment.source)?;
    require_text("translation", &segment.translation)?;

    let mut messages = vec![ChatMessage::new(Role::System, EVALUATOR_SYSTEM.to_string())];
    for shot in shots {
        messages.push(ChatMessage::new(
            Role::User,
            evaluator_user(
                language_name(&shot.source_lang),
                language_name(&shot.target_lang),
                &shot.source,
                &shot.translation,
            ),
        ));
        messages.push(ChatMessage::new(Role::Assistant, shot.response.clone()));
    }
    let lp = &segment.key.lp;
    messages.push(ChatMessage::new(
        Role::User,
        evaluator_user(lp.source_name(), lp.target_name(), &segment.source, &segment.translation),
    ));
    Ok(PromptBundle {
        role_tag: RoleTag::Evaluator,
        messages,
    })
}

/// Zero-shot post-editing prompt targeting a single error.
pub fn build_ape_prompt(segment: &Segment, error: &ErrorAnnotation) -> Result<PromptBundle> {
    if error.category.is_no_error() {
        return Err(Error::invalid("cannot post-edit a no-error annotation"));
    }
    require_text("source", &segment.source)?;
    require_text("translation", &segment.translation)?;
    let lp = &segment.key.lp;
    let label = error.category.display_label();
    let content = render(
        EDITOR_USER,
        &[
            ("source_language", lp.source_name()),
            ("target_language", lp.target_name()),
            ("source_segment", &segment.source),
            ("target_segment", &segment.translation),
            ("error_category", &label),
            ("error_content", &error.span),
        ],
    );
    Ok(PromptBundle {
        role_tag: RoleTag::Editor,
        messages: vec![ChatMessage::new(Role::User, content)],
    })
}

/// Zero-shot pairwise prompt. Argument order defines the A/B labels.
pub fn build_verifier_prompt(
    source: &str,
    translation_a: &str,
    translation_b: &str,
    lp: &LanguagePair,
) -> Result<PromptBundle> {
    require_text("source", source)?;
    require_text("translation A", translation_a)?;
    require_text("translation B", translation_b)?;
    let content = render(
        VERIFIER_USER,
        &[
            ("source_language", lp.source_name()),
            ("target_language", lp.target_name()),
            ("source_segment", source),
            ("target_segment_a", translation_a),
            ("target_segment_b", translation_b),
        ],
    );
    Ok(PromptBundle {
        role_tag: RoleTag::Verifier,
        messages: vec![ChatMessage::new(Role::User, content)],
    })
}

/// A response that does not follow the requested format. The backend
/// retries on these.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no severity header (critical:/major:/minor:) found")]
    NoSeverityHeader,
    #[error("post-edited translation is empty")]
    EmptyPostEdit,
    #[error("verifier answer `{0}` is neither A nor B")]
    InvalidChoice(String),
}

const QUOTES: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '\u{ab}', '\u{bb}'];

fn strip_quotes(text: &str) -> &str {
    text.trim()
        .trim_start_matches(QUOTES)
        .trim_end_matches(QUOTES)
        .trim()
}

fn severity_header(line: &str) -> Option<(Severity, &str)> {
    let (head, rest) = line.split_once(':')?;
    let severity = head.trim().parse::<Severity>().ok()?;
    Some((severity, rest.trim()))
}

fn is_no_error_line(line: &str) -> bool {
    let compact: String = strip_quotes(line)
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    matches!(compact.as_str(), "noerror" | "noerrors" | "none" | "na")
}

fn parse_error_line(line: &str, severity: Severity) -> Option<ErrorAnnotation> {
    let line = line
        .trim()
        .trim_start_matches(['-', '*', '\u{2022}'])
        .trim();
    if line.is_empty() || is_no_error_line(line) {
        return None;
    }
    let (category, span) = line.split_once(" - ")?;
    let category = canonicalize_category(category.trim().trim_matches(QUOTES));
    if category.is_no_error() {
        return None;
    }
    let span = strip_quotes(span);
    if span.is_empty() {
        return None;
    }
    Some(ErrorAnnotation::new(span, category, severity))
}

/// Parses an evaluator response.
///
/// The expected shape is a sequence of `critical:` / `major:` / `minor:`
/// headers (any case), each followed by `category - span` lines. Lines
/// outside that grammar are ignored. An empty list means the evaluator
/// found no errors.
pub fn parse_evaluator_response(text: &str) -> std::result::Result<Vec<ErrorAnnotation>, ParseError> {
    let mut current = None;
    let mut seen_header = false;
    let mut errors = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((severity, rest)) = severity_header(line) {
            seen_header = true;
            current = Some(severity);
            errors.extend(parse_error_line(rest, severity));
            continue;
        }
        if let Some(severity) = current {
            errors.extend(parse_error_line(line, severity));
        }
    }
    if !seen_header {
        return Err(ParseError::NoSeverityHeader);
    }
    Ok(errors)
}

/// Renders annotations in the grammar accepted by [`parse_evaluator_response`].
pub fn render_evaluator_response(errors: &[ErrorAnnotation]) -> String {
    let mut out = String::new();
    for severity in Severity::ALL {
        out.push_str(severity.as_str());
        out.push_str(":\n");
        let mut any = false;
        for e in errors.iter().filter(|e| e.severity == severity) {
            out.push_str(&format!("{} - \"{}\"\n", e.category, e.span));
            any = true;
        }
        if !any {
            out.push_str("no-error\n");
        }
    }
    out
}

/// Extracts the post-edited translation: the text after the last
/// `Corrected Translation:` marker, or the whole response if there is none.
pub fn parse_ape_response(text: &str) -> std::result::Result<String, ParseError> {
    // ASCII lowercasing keeps byte offsets aligned with the original text.
    let lowered = text.to_ascii_lowercase();
    let marker = CORRECTED_MARKER.to_ascii_lowercase();
    let body = match lowered.rfind(&marker) {
        Some(pos) => &text[pos + marker.len()..],
        None => text,
    };
    let edited = strip_quote_pair(body.trim());
    if edited.is_empty() {
        return Err(ParseError::EmptyPostEdit);
    }
    Ok(edited.to_string())
}

fn strip_quote_pair(text: &str) -> &str {
    const PAIRS: &[(char, char)] = &[('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{ab}', '\u{bb}')];
    for &(open, close) in PAIRS {
        if let Some(inner) = text.strip_prefix(open).and_then(|t| t.strip_suffix(close)) {
            return inner.trim();
        }
    }
    text
}

/// Parses a verifier answer. The first token, stripped of quotes,
/// periods and emphasis, must be exactly `A` or `B`. A leading `Answer:`
/// echo is tolerated.
pub fn parse_verifier_response(text: &str) -> std::result::Result<VerifierChoice, ParseError> {
    let mut body = text.trim();
    if body.get(..7).is_some_and(|head| head.eq_ignore_ascii_case("answer:")) {
        body = &body[7..];
    }
    let token = body
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| QUOTES.contains(&c) || matches!(c, '.' | '*' | '(' | ')' | ':' | ','));
    match token {
        "A" | "a" => Ok(VerifierChoice::A),
        "B" | "b" => Ok(VerifierChoice::B),
        _ => Err(ParseError::InvalidChoice(text.trim().chars().take(80).collect())),
    }
}
