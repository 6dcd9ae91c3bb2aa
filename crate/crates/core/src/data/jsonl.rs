use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{PierError, Result};
use crate::permgen::{Behavior, BehaviorSequence, CandidateSet, Item, Permutation};
use crate::training::TrainingExample;

/// One logged request, one JSONL line. Field order here is the line's key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub request_id: u64,
    pub user_id: u64,
    pub items: Vec<Item>,
    pub displayed: Vec<usize>,
    pub clicks: Vec<u8>,
    pub behaviors: Vec<Behavior>,
}

const KEYS: [&str; 6] = ["request_id", "user_id", "items", "displayed", "clicks", "behaviors"];

/// What a record must conform to beyond its JSON shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub vocab_sizes: Vec<usize>,
    pub n_d: usize,
}

impl LogRecord {
    pub fn to_example(&self) -> Result<TrainingExample> {
        TrainingExample::new(
            self.request_id,
            CandidateSet::new(self.items.clone())?,
            Permutation::new(self.displayed.clone())?,
            self.clicks.clone(),
            BehaviorSequence(self.behaviors.clone()),
        )
    }

    pub fn candidate_set(&self) -> Result<CandidateSet> {
        CandidateSet::new(self.items.clone())
    }

    /// Checks everything serde cannot: lengths, vocabularies, index ranges.
    /// Errors name the offending field; the caller adds the line number.
    fn check(&self, schema: &Schema) -> std::result::Result<(), (String, String)> {
        let err = |f: &str, d: String| Err((f.to_string(), d));
        let n_f = schema.vocab_sizes.len();
        let check_features = |field: &str, feats: &[u32]| -> std::result::Result<(), (String, String)> {
            if feats.len() != n_f {
                return err(field, format!("expected {n_f} feature ids, found {}", feats.len()));
            }
            for (j, (&id, &vocab)) in feats.iter().zip(&schema.vocab_sizes).enumerate() {
                if id as usize >= vocab {
                    return err(field, format!("feature id {id} out of vocabulary for field {j} (size {vocab})"));
                }
            }
            Ok(())
        };
        for (i, item) in self.items.iter().enumerate() {
            check_features(&format!("items[{i}].features"), &item.features)?;
            if !(item.point_pctr > 0.0 && item.point_pctr < 1.0) {
                return err(&format!("items[{i}].point_pctr"), format!("{} outside (0, 1)", item.point_pctr));
            }
        }
        if self.displayed.len() != schema.n_d {
            return err("displayed", format!("expected {} slots, found {}", schema.n_d, self.displayed.len()));
        }
        let mut seen = vec![false; self.items.len()];
        for &d in &self.displayed {
            if d >= self.items.len() {
                return err("displayed", format!("index {d} beyond {} candidates", self.items.len()));
            }
            if std::mem::replace(&mut seen[d], true) {
                return err("displayed", format!("index {d} repeated"));
            }
        }
        if self.clicks.len() != self.displayed.len() {
            return err("clicks", format!("expected {} labels, found {}", self.displayed.len(), self.clicks.len()));
        }
        if let Some(c) = self.clicks.iter().find(|&&c| c > 1) {
            return err("clicks", format!("label {c} is not 0 or 1"));
        }
        for (b, behavior) in self.behaviors.iter().enumerate() {
            if behavior.items_features.len() != schema.n_d {
                return err(
                    &format!("behaviors[{b}].items_features"),
                    format!("expected {} items, found {}", schema.n_d, behavior.items_features.len()),
                );
            }
            for feats in &behavior.items_features {
                check_features(&format!("behaviors[{b}].items_features"), feats)?;
            }
            if behavior.recency_rank != b {
                return err(&format!("behaviors[{b}].recency_rank"), format!("expected {b}, found {}", behavior.recency_rank));
            }
        }
        Ok(())
    }
}

fn field<T: DeserializeOwned>(obj: &mut Map<String, Value>, key: &str, line: usize) -> Result<T> {
    let v = obj.remove(key).ok_or_else(|| PierError::Parse {
        line,
        field: key.into(),
        detail: "missing".into(),
    })?;
    serde_json::from_value(v).map_err(|e| PierError::Parse {
        line,
        field: key.into(),
        detail: e.to_string(),
    })
}

/// Parses one line; `line` is 1-based and only used for errors.
pub fn parse_record(text: &str, line: usize, schema: &Schema) -> Result<LogRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| PierError::Parse {
        line,
        field: "<record>".into(),
        detail: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(PierError::Parse {
            line,
            field: "<record>".into(),
            detail: "not a JSON object".into(),
        });
    };
    if let Some(extra) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(PierError::Parse {
            line,
            field: extra.clone(),
            detail: "unknown field".into(),
        });
    }
    let record = LogRecord {
        request_id: field(&mut obj, "request_id", line)?,
        user_id: field(&mut obj, "user_id", line)?,
        items: field(&mut obj, "items", line)?,
        displayed: field(&mut obj, "displayed", line)?,
        clicks: field(&mut obj, "clicks", line)?,
        behaviors: field(&mut obj, "behaviors", line)?,
    };
    record
        .check(schema)
        .map_err(|(field, detail)| PierError::Parse { line, field, detail })?;
    Ok(record)
}

pub fn to_jsonl(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str, schema: &Schema) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| parse_record(l, i + 1, schema))
        .collect()
}

pub fn write_jsonl(records: &[LogRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PierError::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| PierError::io(path, e))
}

pub fn load_jsonl(path: &Path, schema: &Schema) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| PierError::io(path, e))?;
    from_jsonl(&text, schema)
}
