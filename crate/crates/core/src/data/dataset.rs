use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permute::MAX_OPTIONS;

/// One multiple-choice question. `answer` is a 0-based index into
/// `options` in dataset order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqInstance {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
}

impl McqInstance {
    pub fn n(&self) -> usize {
        self.options.len()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.options.len();
        if !(2..=MAX_OPTIONS).contains(&n) {
            return Err(format!("option count {n} outside 2..={MAX_OPTIONS}"));
        }
        if let Some(i) = self.options.iter().position(|o| o.is_empty()) {
            return Err(format!("option {i} is empty"));
        }
        if let Some(a) = self.answer {
            if a >= n {
                return Err(format!("answer {a} out of range for {n} options"));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    question: Option<String>,
    context: Option<String>,
    options: Option<Vec<String>>,
    answer: Option<i64>,
}

/// Parses JSON Lines text. Blank lines are skipped; line numbers in errors
/// are 1-based and count blank lines.
pub fn parse_dataset(text: &str) -> Result<Vec<McqInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let invalid = |message: String| Error::Validation { line: line_no, message };
        let id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(invalid(format!("id must be a string or number, got {other}"))),
            None => return Err(invalid("missing field `id`".into())),
        };
        let question = raw.question.ok_or_else(|| invalid("missing field `question`".into()))?;
        let options = raw.options.ok_or_else(|| invalid("missing field `options`".into()))?;
        let answer = match raw.answer {
            Some(a) if a < 0 => return Err(invalid(format!("answer {a} out of range"))),
            Some(a) => Some(a as usize),
            None => None,
        };
        let inst = McqInstance { id, question, context: raw.context, options, answer };
        inst.validate().map_err(invalid)?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<McqInstance>> {
    parse_dataset(&fs::read_to_string(path)?)
}

/// Serializes instances as JSON Lines.
pub fn to_jsonl(instances: &[McqInstance]) -> String {
    let mut s = String::new();
    for inst in instances {
        s.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"a","question":"q?","options":["x","y","z"],"answer":2}"#;

    #[test]
    fn valid_lines_in_order() {
        let text = format!(
            "{LINE}\n{}\n\n{}\n",
            LINE.replace("\"a\"", "\"b\""),
            r#"{"id":7,"question":"q","context":"c","options":["x","y"]}"#
        );
        let ds = parse_dataset(&text).unwrap();
        assert_eq!(ds.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["a", "b", "7"]);
        assert_eq!(ds[2].answer, None);
        assert_eq!(ds[2].context.as_deref(), Some("c"));
        assert_eq!(parse_dataset(&to_jsonl(&ds)).unwrap(), ds);
    }

    #[test]
    fn single_option_names_the_line() {
        let text = format!("{LINE}\n{}", r#"{"id":"b","question":"q","options":["x"]}"#);
        let err = parse_dataset(&text).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn answer_equal_to_n_is_rejected() {
        let err = parse_dataset(&LINE.replace("\"answer\":2", "\"answer\":3")).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 1, .. }));
        assert!(parse_dataset(&LINE.replace("\"answer\":2", "\"answer\":-1")).is_err());
    }

    #[test]
    fn missing_field_and_malformed_json() {
        let err = parse_dataset(r#"{"id":"a","options":["x","y"]}"#).unwrap_err();
        assert!(err.to_string().contains("question"), "{err}");
        let err = parse_dataset(&format!("{LINE}\n{{not json")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_dataset(r#"{"id":"a","question":"q","options":["x",""]}"#).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }
}
