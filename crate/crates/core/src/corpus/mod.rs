//! Dialogue records, persona segmentation, tokenization, IDF statistics and
//! the synthetic persona-dialogue generator.
//!
//! Corpus files hold one JSON object per line:
//!
//! ```text
//! {"persona": ["i like hiking."], "history": [["bob", "hi !"]], "response": "hello", "responder": "ann"}
//! ```

mod idf;
mod segment;
mod synth;
mod vocab;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{MorpheusError, Result};

pub use idf::{IdfTable, ScaledIdf, TokenWeights};
pub use segment::{fit_segments, split_persona};
pub use synth::{generate_synthetic, SlotSpec, SyntheticCorpus, SyntheticSpec};
pub use vocab::{
    normalize, words, Vocab, BOR_ID, EOR_ID, PAD_ID, RESERVED, SPEAKER_A_ID, SPEAKER_B_ID, UNK_ID,
};

/// One turn of a dialogue history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: String,
    pub utterance: String,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, utterance: impl Into<String>) -> Self {
        Turn {
            speaker: speaker.into(),
            utterance: utterance.into(),
        }
    }
}

/// One training record: who is answering, what they are like, what was said
/// so far, and what they said next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSample {
    pub persona_sentences: Vec<String>,
    pub history: Vec<Turn>,
    pub response: String,
    pub responder_id: String,
}

impl DialogueSample {
    /// Checks the record invariants. `line` is only used for error reporting.
    pub fn validate(&self, line: usize) -> Result<()> {
        let schema = |field: String, reason: &str| MorpheusError::Schema {
            line,
            field,
            reason: reason.to_string(),
        };
        if self.history.is_empty() {
            return Err(schema("history".into(), "must contain at least one turn"));
        }
        for (i, turn) in self.history.iter().enumerate() {
            if turn.speaker.trim().is_empty() {
                return Err(schema(format!("history[{i}][0]"), "speaker is empty"));
            }
            if turn.utterance.trim().is_empty() {
                return Err(schema(format!("history[{i}][1]"), "utterance is empty"));
            }
        }
        if self.responder_id.trim().is_empty() {
            return Err(schema("responder".into(), "responder is empty"));
        }
        if self.history.last().map(|t| t.speaker.as_str()) == Some(self.responder_id.as_str()) {
            return Err(schema(
                format!("history[{}][0]", self.history.len() - 1),
                "last turn must not be spoken by the responder",
            ));
        }
        if self.response.trim().is_empty() {
            return Err(schema("response".into(), "response is empty"));
        }
        Ok(())
    }

    /// The persona text split into segments on periods.
    pub fn persona_segments(&self) -> Vec<String> {
        split_persona(&self.persona_sentences.join(" "))
    }

    /// The same record with the persona removed, as seen at inference time.
    pub fn masked(&self) -> DialogueSample {
        DialogueSample {
            persona_sentences: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "persona": self.persona_sentences,
            "history": self
                .history
                .iter()
                .map(|t| json!([t.speaker, t.utterance]))
                .collect::<Vec<_>>(),
            "response": self.response,
            "responder": self.responder_id,
        })
    }

    pub fn from_json(value: &Value, line: usize) -> Result<Self> {
        let schema = |field: &str, reason: &str| MorpheusError::Schema {
            line,
            field: field.to_string(),
            reason: reason.to_string(),
        };
        let obj = value
            .as_object()
            .ok_or_else(|| schema("$", "record must be an object"))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "persona" | "history" | "response" | "responder") {
                return Err(schema(key, "unknown key"));
            }
        }

        let persona = obj
            .get("persona")
            .ok_or_else(|| schema("persona", "missing"))?
            .as_array()
            .ok_or_else(|| schema("persona", "must be an array of strings"))?;
        let mut persona_sentences = Vec::with_capacity(persona.len());
        for (i, item) in persona.iter().enumerate() {
            let s = item
                .as_str()
                .ok_or_else(|| schema(&format!("persona[{i}]"), "must be a string"))?;
            persona_sentences.push(s.to_string());
        }

        let history_value = obj
            .get("history")
            .ok_or_else(|| schema("history", "missing"))?
            .as_array()
            .ok_or_else(|| schema("history", "must be an array of [speaker, utterance] pairs"))?;
        let mut history = Vec::with_capacity(history_value.len());
        for (i, pair) in history_value.iter().enumerate() {
            let field = format!("history[{i}]");
            let pair = pair
                .as_array()
                .filter(|p| p.len() == 2)
                .ok_or_else(|| schema(&field, "must be a [speaker, utterance] pair"))?;
            let speaker = pair[0]
                .as_str()
                .ok_or_else(|| schema(&format!("{field}[0]"), "must be a string"))?;
            let utterance = pair[1]
                .as_str()
                .ok_or_else(|| schema(&format!("{field}[1]"), "must be a string"))?;
            history.push(Turn::new(speaker, utterance));
        }

        let response = obj
            .get("response")
            .ok_or_else(|| schema("response", "missing"))?
            .as_str()
            .ok_or_else(|| schema("response", "must be a string"))?;
        let responder = obj
            .get("responder")
            .ok_or_else(|| schema("responder", "missing"))?
            .as_str()
            .ok_or_else(|| schema("responder", "must be a string"))?;

        let sample = DialogueSample {
            persona_sentences,
            history,
            response: response.to_string(),
            responder_id: responder.to_string(),
        };
        sample.validate(line)?;
        Ok(sample)
    }
}

/// Result of a fail-soft corpus read.
#[derive(Debug)]
pub struct LoadReport {
    pub samples: Vec<DialogueSample>,
    pub rejected: Vec<MorpheusError>,
}

fn parse_line(raw: &str, line: usize) -> Result<DialogueSample> {
    let value: Value = serde_json::from_str(raw).map_err(|e| MorpheusError::Schema {
        line,
        field: "$".into(),
        reason: e.to_string(),
    })?;
    DialogueSample::from_json(&value, line)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MorpheusError::io(path, e))
}

/// Strict corpus read: the first malformed record aborts with its line number.
pub fn load_corpus(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Vec<DialogueSample>> {
    let text = read_text(path.as_ref())?;
    let mut samples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if limit.is_some_and(|l| samples.len() >= l) {
            break;
        }
        if raw.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(raw, idx + 1)?);
    }
    if samples.is_empty() {
        return Err(MorpheusError::EmptyCorpus);
    }
    Ok(samples)
}

/// Fail-soft corpus read: malformed records are skipped and collected in
/// [`LoadReport::rejected`]. Fails only when nothing valid remains.
pub fn load_corpus_lenient(path: impl AsRef<Path>, limit: Option<usize>) -> Result<LoadReport> {
    let text = read_text(path.as_ref())?;
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if limit.is_some_and(|l| samples.len() >= l) {
            break;
        }
        if raw.trim().is_empty() {
            continue;
        }
        match parse_line(raw, idx + 1) {
            Ok(s) => samples.push(s),
            Err(e) => rejected.push(e),
        }
    }
    if samples.is_empty() {
        return Err(rejected.into_iter().next().unwrap_or(MorpheusError::EmptyCorpus));
    }
    Ok(LoadReport { samples, rejected })
}

pub fn write_corpus(path: impl AsRef<Path>, samples: &[DialogueSample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, &s.to_json()).expect("json values always serialize");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| MorpheusError::io(path, e))?;
    file.write_all(&out).map_err(|e| MorpheusError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DialogueSample {
        DialogueSample {
            persona_sentences: vec!["i like hiking.".into()],
            history: vec![Turn::new("bob", "what do you do for fun ?")],
            response: "i love hiking .".into(),
            responder_id: "ann".into(),
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn one_record_round_trip() {
        let f = write_lines(&[sample().to_json().to_string()]);
        let loaded = load_corpus(f.path(), None).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].persona_sentences, vec!["i like hiking.".to_string()]);
        assert_eq!(loaded[0], sample());
    }

    #[test]
    fn empty_history_is_rejected() {
        let line = r#"{"persona": [], "history": [], "response": "x", "responder": "a"}"#;
        let f = write_lines(&[line.to_string()]);
        match load_corpus(f.path(), None) {
            Err(MorpheusError::Schema { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "history");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn limit_takes_first_records_in_order() {
        let lines: Vec<String> = (0..50)
            .map(|i| {
                let mut s = sample();
                s.response = format!("answer {i}");
                s.to_json().to_string()
            })
            .collect();
        let f = write_lines(&lines);
        let loaded = load_corpus(f.path(), Some(10)).unwrap();
        assert_eq!(loaded.len(), 10);
        for (i, s) in loaded.iter().enumerate() {
            assert_eq!(s.response, format!("answer {i}"));
        }
    }

    #[test]
    fn lenient_load_skips_bad_records() {
        let good = sample().to_json().to_string();
        let bad = r#"{"persona": ["x"], "history": [["ann", "hi"]], "response": "y", "responder": "ann"}"#;
        let f = write_lines(&[good.clone(), bad.to_string(), "not json".into(), good]);
        let report = load_corpus_lenient(f.path(), None).unwrap();
        assert_eq!(report.samples.len(), 2);
        assert_eq!(report.rejected.len(), 2);
        match &report.rejected[0] {
            MorpheusError::Schema { line, field, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(field, "history[0][0]");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_empty_file() {
        assert!(matches!(
            load_corpus("/definitely/not/here.jsonl", None),
            Err(MorpheusError::Io { .. })
        ));
        let f = write_lines(&[]);
        assert!(matches!(load_corpus(f.path(), None), Err(MorpheusError::EmptyCorpus)));
    }

    #[test]
    fn schema_reports_field_path() {
        let line =
            r#"{"persona": ["a", 3], "history": [["b", "hi"]], "response": "x", "responder": "a"}"#;
        let f = write_lines(&[line.to_string()]);
        match load_corpus(f.path(), None) {
            Err(MorpheusError::Schema { field, .. }) => assert_eq!(field, "persona[1]"),
            other => panic!("{other:?}"),
        }
    }
}
