//! Regenerates the bundled corpus, gold, replay and external-score
//! fixtures from the scripted segments in `tests/support`.
//!
//! cargo run --example gen_fixtures

#[path = "../tests/support/mod.rs"]
mod support;

use std::io::Write;
use std::sync::Arc;

use mqm_ape::backend::{LlmClient, RecordingProvider, RetryPolicy, ScriptedProvider};
use mqm_ape::corpus::{Corpus, GoldRecord, ScoreRecord};
use mqm_ape::pipeline::{Pipeline, RunConfig, ScoreVariant, VerdictOutcome};

fn write_lines<T: serde::Serialize>(name: &str, rows: &[T]) -> mqm_ape::Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    let path = support::fixture(name);
    std::fs::File::create(&path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| mqm_ape::Error::Io { path, source: e })
}

fn main() -> mqm_ape::Result<()> {
    let segments: Vec<_> = support::FIXTURE.iter().map(|s| s.segment()).collect();
    let corpus = Corpus::from_segments(segments.clone())?;

    let recorder = Arc::new(RecordingProvider::new(ScriptedProvider::new(|req: &_| {
        support::respond(support::FIXTURE, req)
    })));
    let client = Arc::new(LlmClient::new(recorder.clone(), RetryPolicy::default()));
    let config = RunConfig {
        concurrency_limit: 1,
        ..RunConfig::default()
    };
    let run = Pipeline::new(config, client)?.run_corpus(&corpus)?;

    std::fs::write(support::fixture("corpus20.jsonl"), corpus.to_jsonl()?)
        .map_err(|e| mqm_ape::Error::Io { path: support::fixture("corpus20.jsonl"), source: e })?;
    recorder.write(&support::fixture("replay20.jsonl"))?;
    let gold: Vec<GoldRecord> = segments
        .iter()
        .map(|s| GoldRecord {
            key: s.key.clone(),
            gold_score: s.gold_score,
            gold_errors: s.gold_errors.clone().unwrap_or_default(),
        })
        .collect();
    write_lines("gold20.jsonl", &gold)?;

    // Synthetic metric scores that mostly agree with the verifier.
    let mut scores = Vec::new();
    for (i, record) in run.records().enumerate() {
        let gold_score = segments.iter().find(|s| s.key == record.key).and_then(|s| s.gold_score).unwrap();
        let tgt = [80.0 + gold_score, 70.0 + 0.8 * gold_score];
        for (metric, base) in ["cometkiwi_qe", "bleurt20"].iter().zip(tgt) {
            scores.push(ScoreRecord {
                key: record.key.clone(),
                variant: ScoreVariant::Tgt,
                metric: metric.to_string(),
                score: base,
            });
        }
        for (e, verdict) in record.verdicts.iter().enumerate() {
            let Some(v) = verdict else { continue };
            let wobble = ((i + e) % 3) as f64 * 0.25;
            let deltas = match v.outcome {
                VerdictOutcome::Improved => [1.5 + wobble, 3.0 - wobble],
                VerdictOutcome::Contrastive => [0.5, -0.5 + wobble],
                VerdictOutcome::NotImproved => [-1.0 + wobble, -0.75],
            };
            for ((metric, base), d) in ["cometkiwi_qe", "bleurt20"].iter().zip(tgt).zip(deltas) {
                scores.push(ScoreRecord {
                    key: record.key.clone(),
                    variant: ScoreVariant::Ape(e),
                    metric: metric.to_string(),
                    score: base + d,
                });
            }
        }
    }
    write_lines("scores20.jsonl", &scores)?;

    println!(
        "{} segments, {} evaluated, {} replay entries, {} scores",
        corpus.len(),
        run.records().count(),
        recorder.entries().len(),
        scores.len()
    );
    Ok(())
}
