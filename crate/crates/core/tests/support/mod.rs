//! Shared test data: the bundled 20-segment corpus and a simulated LLM
//! that answers evaluator, editor and verifier prompts from a script.

#![allow(dead_code)]

use std::path::PathBuf;

use mqm_ape::backend::{CompletionRequest, CompletionResult, ProviderError};
use mqm_ape::mqm::{canonicalize_category, ErrorAnnotation, Segment, SegmentKey, Severity};
use mqm_ape::prompting::{parse_evaluator_response, Role, RoleTag};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixture_dir().join(name)
}

type Gold = &'static [(&'static str, &'static str, &'static str)];
type Passes = (&'static [&'static str], &'static [&'static str]);

/// One scripted segment. `evaluator` lists the evaluator's answer per
/// attempt; `verifier` lists, per predicted error, the answers of the
/// forward and swapped passes per attempt.
pub struct FixtureSegment {
    pub lp: &'static str,
    pub system: &'static str,
    pub doc: &'static str,
    pub source: &'static str,
    pub translation: &'static str,
    pub gold_score: f64,
    pub gold_errors: Gold,
    pub evaluator: &'static [&'static str],
    pub verifier: &'static [Passes],
}

const NO_ERROR: &str = "critical:\nno-error\nmajor:\nno-error\nminor:\nno-error";

pub const FIXTURE: &[FixtureSegment] = &[
    FixtureSegment {
        lp: "en-de",
        system: "sysA",
        doc: "d1",
        source: "The cat sat on the mat near the window.",
        translation: "Die Katze saß auf der Matte am Fenster.",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &[NO_ERROR],
        verifier: &[],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysB",
        doc: "d1",
        source: "The cat sat on the mat near the window.",
        translation: "Die Katze saß auf dem Teppich am Fenster.",
        gold_score: -1.0,
        gold_errors: &[("Teppich", "accuracy/mistranslation", "minor")],
        evaluator: &["critical:\nno-error\nmajor:\nno-error\nminor:\naccuracy/mistranslation - \"Teppich\""],
        verifier: &[(&["B"], &["A"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysC",
        doc: "d1",
        source: "The cat sat on the mat near the window.",
        translation: "Der Hund saß auf der Matte neben dem Fenster.",
        gold_score: -5.0,
        gold_errors: &[("Hund", "accuracy/mistranslation", "major")],
        evaluator: &["critical:\nno-error\nmajor:\naccuracy/mistranslation - \"Hund\"\nminor:\nstyle/awkward - \"neben dem Fenster\""],
        verifier: &[(&["B"], &["A"]), (&["A"], &["B"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysA",
        doc: "d2",
        source: "Please ask what the order situation is now.",
        translation: "Bitte fragen Sie, wie der Stand der Bestellung ist.",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &["critical:\nno-error\nmajor:\nno-error\nminor:\nfluency/punctuation - \"Sie,\""],
        verifier: &[(&["A"], &["A"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysB",
        doc: "d2",
        source: "Please ask what the order situation is now.",
        translation: "Bitte fragen, was ist die Bestellung Situation jetzt?",
        gold_score: -2.0,
        gold_errors: &[
            ("Bestellung Situation", "fluency/grammar", "minor"),
            ("was ist", "fluency/grammar", "minor"),
        ],
        evaluator: &[
            "The translation looks mostly fine.",
            "critical:\nno-error\nmajor:\nno-error\nminor:\nfluency/grammar - \"Bestellung Situation\"\nfluency/grammar - was ist",
        ],
        verifier: &[(&["B"], &["A"]), (&["C", "B"], &["A"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysC",
        doc: "d2",
        source: "Please ask what the order situation is now.",
        translation: "Frag mal nach der Bestellung.",
        gold_score: -6.0,
        gold_errors: &[
            ("Frag mal", "fluency/register", "major"),
            ("nach der Bestellung", "accuracy/omission", "minor"),
        ],
        evaluator: &["critical:\nno-error\nmajor:\nfluency/register - \"Frag mal\"\nminor:\naccuracy/omission - \"nach der Bestellung\""],
        verifier: &[(&["Answer: B"], &["A"]), (&["B"], &["B"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysA",
        doc: "d3",
        source: "The meeting was moved to Friday afternoon.",
        translation: "Das Treffen wurde auf Freitagnachmittag verschoben.",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &[NO_ERROR],
        verifier: &[],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysB",
        doc: "d3",
        source: "The meeting was moved to Friday afternoon.",
        translation: "Das Treffen wurde auf Freitag verschoben.",
        gold_score: -5.0,
        gold_errors: &[("Freitag", "accuracy/omission", "major")],
        evaluator: &["critical:\nno-error\nmajor:\naccuracy/omission - \"Freitag\"\nminor:\nno-error"],
        verifier: &[(&["B"], &["A"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysC",
        doc: "d3",
        source: "The meeting was moved to Friday afternoon.",
        translation: "Die Sitzung wurde abgesagt.",
        gold_score: -25.0,
        gold_errors: &[("abgesagt", "accuracy/mistranslation", "critical")],
        evaluator: &["critical:\naccuracy/mistranslation - \"abgesagt\"\nmajor:\naccuracy/omission - \"Sitzung\"\nminor:\nno-error"],
        verifier: &[(&["B"], &["A"]), (&["A"], &["B"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysA",
        doc: "d4",
        source: "We will ship your package within two days.",
        translation: "Wir versenden Ihr Paket innerhalb von zwei Tagen.",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &["critical:\nno-error\nmajor:\nno-error\nminor:\nstyle/awkward - \"versenden\""],
        verifier: &[(&["A"], &["B"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysB",
        doc: "d4",
        source: "We will ship your package within two days.",
        translation: "Wir werden Ihr Paket in zwei Tagen schicken.",
        gold_score: -1.0,
        gold_errors: &[("in zwei Tagen", "accuracy/mistranslation", "minor")],
        evaluator: &["critical:\nno-error\nmajor:\nno-error\nminor:\naccuracy/mistranslation - \"in zwei Tagen\""],
        verifier: &[(&["b"], &["a"])],
    },
    FixtureSegment {
        lp: "en-de",
        system: "sysC",
        doc: "d4",
        source: "We will ship your package within two days.",
        translation: "Wir werden Ihre Packung innerhalb zwei Tage versenden.",
        gold_score: -6.0,
        gold_errors: &[
            ("Packung", "terminology/inappropriate for context", "major"),
            ("zwei Tage", "fluency/grammar", "minor"),
        ],
        evaluator: &["critical:\nno-error\nmajor:\nterminology/inappropriate for context - \"Packung\"\nminor:\nfluency/grammar - \"zwei Tage\"\nfluency/spelling - \"versenden\""],
        verifier: &[(&["B"], &["A"]), (&["B."], &["A"]), (&["maybe", "A"], &["B"])],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysA",
        doc: "z1",
        source: "请问现在订单情况如何？",
        translation: "May I ask what the order status is now?",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &[NO_ERROR],
        verifier: &[],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysB",
        doc: "z1",
        source: "请问现在订单情况如何？",
        translation: "Please ask, what is the order situation now?",
        gold_score: -6.0,
        gold_errors: &[
            ("Please ask", "accuracy/mistranslation", "major"),
            ("situation", "style/awkward", "minor"),
        ],
        evaluator: &["critical:\nno-error\nmajor:\naccuracy/mistranslation - \"Please ask\"\nminor:\nstyle/awkward - \"situation\""],
        verifier: &[(&["B"], &["A"]), (&["A"], &["A"])],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysA",
        doc: "z2",
        source: "他的新书下个月出版。",
        translation: "His new book will be published next month.",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &["critical:\nno-error\nmajor:\nno-error\nminor:\nfluency/punctuation - \"month.\""],
        verifier: &[(&["A"], &["B"])],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysB",
        doc: "z2",
        source: "他的新书下个月出版。",
        translation: "His new book next month publish.",
        gold_score: -5.0,
        gold_errors: &[("next month publish", "fluency/grammar", "major")],
        evaluator: &[
            "I am unable to evaluate this translation.",
            "Sorry.",
            "Quality: poor",
        ],
        verifier: &[],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysA",
        doc: "z3",
        source: "会议推迟到星期五。",
        translation: "The meeting was postponed to Friday.",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &[NO_ERROR],
        verifier: &[],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysB",
        doc: "z3",
        source: "会议推迟到星期五。",
        translation: "The meeting was cancelled on Friday.",
        gold_score: -25.0,
        gold_errors: &[("cancelled", "accuracy/mistranslation", "critical")],
        evaluator: &["critical:\naccuracy/mistranslation - \"cancelled\"\nmajor:\nno-error\nminor:\nno-error"],
        verifier: &[(&["B"], &["A"])],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysA",
        doc: "z4",
        source: "我们两天内发货。",
        translation: "We ship within two days.",
        gold_score: 0.0,
        gold_errors: &[],
        evaluator: &["critical:\nno-error\nmajor:\nno-error\nminor:\nstyle/awkward - \"ship\""],
        verifier: &[(&["B"], &["A"])],
    },
    FixtureSegment {
        lp: "zh-en",
        system: "sysB",
        doc: "z4",
        source: "我们两天内发货。",
        translation: "We deliver goods in two day.",
        gold_score: -2.0,
        gold_errors: &[
            ("deliver goods", "style/awkward", "minor"),
            ("two day", "fluency/grammar", "minor"),
        ],
        evaluator: &["critical:\nno-error\nmajor:\nno-error\nminor:\nfluency/grammar - \"two day\""],
        verifier: &[(&["B"], &["A"])],
    },
];

impl FixtureSegment {
    pub fn key(&self) -> SegmentKey {
        SegmentKey {
            lp: self.lp.parse().unwrap(),
            system_id: self.system.into(),
            doc_id: self.doc.into(),
            seg_id: "1".into(),
        }
    }

    pub fn gold(&self) -> Vec<ErrorAnnotation> {
        self.gold_errors
            .iter()
            .map(|(span, cat, sev)| ErrorAnnotation::new(*span, canonicalize_category(cat), sev.parse::<Severity>().unwrap()))
            .collect()
    }

    pub fn segment(&self) -> Segment {
        let mut s = Segment::new(self.key(), self.source, self.translation).unwrap();
        s.gold_score = Some(self.gold_score);
        s.gold_errors = Some(self.gold());
        s
    }

    /// Errors the evaluator eventually reports, if any answer parses.
    pub fn predicted(&self) -> Option<Vec<ErrorAnnotation>> {
        self.evaluator.iter().find_map(|t| parse_evaluator_response(t).ok())
    }
}

/// The scripted post-edit for an error: its span wrapped in brackets.
pub fn post_edit_of(translation: &str, span: &str) -> String {
    translation.replacen(span, &format!("[{span}]"), 1)
}

fn pick<'a>(answers: &[&'a str], attempt: u32) -> &'a str {
    answers[(attempt as usize - 1).min(answers.len() - 1)]
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let from = text.find(start).unwrap_or_else(|| panic!("`{start}` not in prompt")) + start.len();
    let len = text[from..].find(end).unwrap_or_else(|| panic!("`{end}` not in prompt"));
    &text[from..from + len]
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count().max(1) as u64
}

/// Token counts are whitespace word counts, so they can be recomputed by
/// hand from the replay file.
pub fn respond(script: &[FixtureSegment], request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
    let prompt = &request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .expect("user message")
        .content;
    let text = match request.role_tag {
        RoleTag::Evaluator => {
            let translation = between(prompt, "translation:\n```", "```");
            let seg = script
                .iter()
                .find(|s| s.translation == translation)
                .ok_or_else(|| ProviderError::decode(format!("unscripted translation {translation}")))?;
            pick(seg.evaluator, request.attempt).to_string()
        }
        RoleTag::Editor => {
            let translation = between(prompt, "translation: \"", "\"\n");
            let content = between(prompt, "identified error: \"", "\". Provide");
            let span = content.split_once(" - ").map_or(content, |(_, s)| s);
            let edited = post_edit_of(translation, span);
            // Alternate answer shapes to exercise the parser.
            if span.len() % 2 == 0 {
                format!("Corrected Translation: {edited}")
            } else {
                format!("Corrected Translation:\n\"{edited}\"")
            }
        }
        RoleTag::Verifier => {
            let a = between(prompt, "translation A: \"", "\"\n");
            let b = between(prompt, "translation B: \"", "\"\n");
            let (seg, edited, pass) = script
                .iter()
                .find_map(|s| {
                    if s.translation == a {
                        Some((s, b, 0))
                    } else if s.translation == b {
                        Some((s, a, 1))
                    } else {
                        None
                    }
                })
                .ok_or_else(|| ProviderError::decode("unscripted verifier prompt"))?;
            let errors = seg.predicted().expect("verifier only runs after a valid evaluation");
            let idx = errors
                .iter()
                .position(|e| post_edit_of(seg.translation, &e.span) == edited)
                .expect("post-edit belongs to a predicted error");
            let passes = seg.verifier[idx];
            pick(if pass == 0 { passes.0 } else { passes.1 }, request.attempt).to_string()
        }
    };
    let prompt_tokens = request.messages.iter().map(|m| word_count(&m.content)).sum();
    Ok(CompletionResult {
        completion_tokens: word_count(&text),
        prompt_tokens,
        text,
    })
}

/// One parser golden case: a raw response and its expected parse.
#[derive(Debug, serde::Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub role: RoleTag,
    pub text: String,
    pub expect: serde_json::Value,
}

impl GoldenCase {
    pub fn is_valid(&self) -> bool {
        self.expect.get("ok").is_some()
    }

    /// Compares the parser's output with the expectation.
    pub fn check(&self) -> Result<(), String> {
        use mqm_ape::prompting::{parse_ape_response, parse_verifier_response, ParseError};
        let kind = |e: &ParseError| match e {
            ParseError::NoSeverityHeader => "no_severity_header",
            ParseError::EmptyPostEdit => "empty_post_edit",
            ParseError::InvalidChoice(_) => "invalid_choice",
        };
        let actual: Result<serde_json::Value, &str> = match self.role {
            RoleTag::Evaluator => parse_evaluator_response(&self.text)
                .map(|v| serde_json::to_value(v).unwrap())
                .map_err(|e| kind(&e)),
            RoleTag::Editor => parse_ape_response(&self.text)
                .map(serde_json::Value::from)
                .map_err(|e| kind(&e)),
            RoleTag::Verifier => parse_verifier_response(&self.text)
                .map(|c| serde_json::to_value(c).unwrap())
                .map_err(|e| kind(&e)),
        };
        let expected = match (self.expect.get("ok"), self.expect.get("err")) {
            (Some(ok), _) if self.role == RoleTag::Evaluator => {
                // Round-trip through the typed form to canonicalise categories.
                let typed: Vec<ErrorAnnotation> = serde_json::from_value(ok.clone()).map_err(|e| e.to_string())?;
                Ok(serde_json::to_value(typed).unwrap())
            }
            (Some(ok), _) => Ok(ok.clone()),
            (None, Some(err)) => Err(err.as_str().unwrap_or_default()),
            _ => return Err(format!("{}: malformed expectation", self.name)),
        };
        if actual == expected {
            Ok(())
        } else {
            Err(format!("{}: expected {expected:?}, got {actual:?}", self.name))
        }
    }
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let text = std::fs::read_to_string(fixture("parser_golden.jsonl")).unwrap();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// A request seen by [`MockServer`].
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl SeenRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Minimal HTTP/1.1 server answering every request with `handler`.
pub struct MockServer {
    pub url: String,
    pub seen: std::sync::Arc<std::sync::Mutex<Vec<SeenRequest>>>,
}

impl MockServer {
    pub fn start<H>(handler: H) -> Self
    where
        H: Fn(&SeenRequest) -> (u16, String) + Send + Sync + 'static,
    {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = seen.clone();
        let handler = std::sync::Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let log = log.clone();
                let handler = handler.clone();
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
                    let mut headers = Vec::new();
                    loop {
                        let mut h = String::new();
                        reader.read_line(&mut h).unwrap();
                        let h = h.trim_end();
                        if h.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = h.split_once(':') {
                            headers.push((k.trim().to_string(), v.trim().to_string()));
                        }
                    }
                    let len: usize = headers
                        .iter()
                        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                        .and_then(|(_, v)| v.parse().ok())
                        .unwrap_or(0);
                    let mut body = vec![0u8; len];
                    reader.read_exact(&mut body).unwrap();
                    let request = SeenRequest {
                        path,
                        headers,
                        body: String::from_utf8(body).unwrap(),
                    };
                    let (status, reply) = handler(&request);
                    log.lock().unwrap().push(request);
                    let mut stream = stream;
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                        reply.len()
                    );
                    let _ = stream.flush();
                });
            }
        });
        Self { url, seen }
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

/// Chat-completions reply body carrying `text` and token counts.
pub fn chat_reply(text: &str, prompt_tokens: u64, completion_tokens: u64) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens, "total_tokens": prompt_tokens + completion_tokens}
    })
    .to_string()
}

/// Mock chat-completions handler answering like [`respond`].
pub fn scripted_http(request: &SeenRequest) -> (u16, String) {
    #[derive(serde::Deserialize)]
    struct Body {
        messages: Vec<mqm_ape::prompting::ChatMessage>,
        temperature: f64,
        max_tokens: u32,
    }
    let body: Body = serde_json::from_str(&request.body).unwrap();
    // The role and attempt are not on the wire; infer them from the prompt
    // and the temperature schedule.
    let last = &body.messages.last().unwrap().content;
    let role_tag = if body.messages.len() > 1 {
        RoleTag::Evaluator
    } else if last.contains("Which translation is better?") {
        RoleTag::Verifier
    } else {
        RoleTag::Editor
    };
    let attempt = (body.temperature * 10.0).round() as u32 + 1;
    let req = CompletionRequest {
        role_tag,
        messages: body.messages,
        temperature: body.temperature,
        max_tokens: body.max_tokens,
        attempt,
    };
    let result = respond(FIXTURE, &req).unwrap();
    (200, chat_reply(&result.text, result.prompt_tokens, result.completion_tokens))
}
