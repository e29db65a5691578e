use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::Span;

pub const NONE_LABEL: &str = "None";

/// A gold entity with 1-based, end-inclusive token offsets.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Entity {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self { start, end, label: label.into() }
    }

    /// Zero-based span of the entity.
    pub fn span(&self) -> Span {
        Span::new(self.start - 1, self.end - 1)
    }

    pub fn from_span(span: Span, label: impl Into<String>) -> Self {
        Self::new(span.start + 1, span.end + 1, label)
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A tokenized sentence with its (possibly nested or overlapping) entities.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<Entity>,
}

impl Example {
    /// Returns the offending field and a message on the first violation.
    pub fn check(&self) -> std::result::Result<(), (String, String)> {
        if self.tokens.is_empty() {
            return Err(("tokens".into(), "sentence has no tokens".into()));
        }
        let n = self.tokens.len();
        let mut seen = HashSet::new();
        for (k, e) in self.entities.iter().enumerate() {
            let field = |f: &str| format!("entities[{k}].{f}");
            if e.start < 1 {
                return Err((field("start"), format!("start {} must be at least 1", e.start)));
            }
            if e.end < e.start {
                return Err((field("end"), format!("end {} precedes start {}", e.end, e.start)));
            }
            if e.end > n {
                return Err((field("end"), format!("end {} exceeds sentence length {n}", e.end)));
            }
            if e.label.is_empty() || e.label == NONE_LABEL {
                return Err((field("label"), format!("label '{}' is reserved", e.label)));
            }
            if !seen.insert((e.start, e.end, e.label.as_str())) {
                return Err((field("label"), format!("duplicate entity ({}, {}, {})", e.start, e.end, e.label)));
            }
        }
        Ok(())
    }
}

/// Parses one JSON record per non-empty line.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |field: String, msg: String| Error::Load { path: path.to_path_buf(), line: k + 1, field, msg };
        let ex: Example = serde_json::from_str(line).map_err(|e| load_err("record".into(), e.to_string()))?;
        ex.check().map_err(|(field, msg)| load_err(field, msg))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Example>> {
    parse_corpus(&fs::read_to_string(path)?, path)
}

pub fn corpus_to_string(corpus: &[Example]) -> Result<String> {
    let mut text = String::new();
    for ex in corpus {
        text.push_str(&serde_json::to_string(ex)?);
        text.push('\n');
    }
    Ok(text)
}

pub fn save_corpus(path: &Path, corpus: &[Example]) -> Result<()> {
    fs::write(path, corpus_to_string(corpus)?)?;
    Ok(())
}

/// Entity labels with `None` reserved at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    /// `None` followed by `entity_labels` in the given order.
    pub fn new<S: AsRef<str>>(entity_labels: &[S]) -> Result<Self> {
        let mut labels = vec![NONE_LABEL.to_string()];
        for l in entity_labels {
            let l = l.as_ref();
            if l == NONE_LABEL || l.is_empty() || labels.iter().any(|x| x == l) {
                return Err(Error::Config(format!("invalid or repeated label '{l}'")));
            }
            labels.push(l.to_string());
        }
        Ok(Self { labels })
    }

    /// Sorted labels occurring in `corpus`.
    pub fn from_corpus(corpus: &[Example]) -> Self {
        let mut set: Vec<&str> = corpus.iter().flat_map(|e| e.entities.iter().map(|x| x.label.as_str())).collect();
        set.sort_unstable();
        set.dedup();
        Self::new(&set).expect("labels validated on load")
    }

    /// Label count including `None`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex() -> Example {
        Example {
            tokens: vec!["a".into(), "b".into(), "c".into()],
            entities: vec![Entity::new(1, 3, "X"), Entity::new(2, 2, "Y")],
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn reversed_entity_reports_line_and_field() {
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&ex()).unwrap(),
            r#"{"tokens":["a","b"],"entities":[{"start":2,"end":1,"label":"X"}]}"#
        );
        match parse_corpus(&text, Path::new("c.jsonl")) {
            Err(Error::Load { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "entities[0].end");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations() {
        let mut e = ex();
        e.entities[0].end = 4;
        assert!(e.check().is_err());
        let mut e = ex();
        e.entities[1].label = "None".into();
        assert!(e.check().is_err());
        let mut e = ex();
        e.entities.push(Entity::new(1, 3, "X"));
        assert!(e.check().is_err());
        let mut e = ex();
        e.entities[0].start = 0;
        assert!(e.check().is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let corpus = vec![ex(), Example { tokens: vec!["z".into()], entities: vec![] }];
        save_corpus(&p, &corpus).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), corpus);
    }

    #[test]
    fn label_set_reserves_none() {
        let ls = LabelSet::from_corpus(&[ex()]);
        assert_eq!(ls.labels(), &["None", "X", "Y"]);
        assert_eq!(ls.id("Y"), Some(2));
        assert!(LabelSet::new(&["None"]).is_err());
    }
}
