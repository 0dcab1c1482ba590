//! Script events, script instances and the line-delimited corpus format.

mod generator;

pub use generator::{generate_corpus, generate_with_provenance, GeneratedInstance, GeneratorConfig};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal marking an absent argument in corpus records.
pub const NULL_ARGUMENT: &str = "NULL";

/// Surface token an absent argument is rendered as.
pub const NULL_TOKEN: &str = "[NULL]";

/// A verb-centric event `verb(subject, object, indirect_object)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub subject: String,
    pub verb: String,
    pub object: String,
    pub indirect_object: String,
}

impl Event {
    pub fn new(
        subject: impl Into<String>,
        verb: impl Into<String>,
        object: impl Into<String>,
        indirect_object: impl Into<String>,
    ) -> Result<Self> {
        let event = Self {
            subject: subject.into(),
            verb: verb.into(),
            object: object.into(),
            indirect_object: indirect_object.into(),
        };
        event.validate()?;
        Ok(event)
    }

    pub fn validate(&self) -> Result<()> {
        for field in self.fields() {
            if field.is_empty() {
                return Err(Error::InvalidEvent("empty argument".into()));
            }
            if field.chars().any(char::is_whitespace) {
                return Err(Error::InvalidEvent(format!("argument {field:?} contains whitespace")));
            }
        }
        if self.verb == NULL_ARGUMENT {
            return Err(Error::InvalidEvent("verb must not be NULL".into()));
        }
        Ok(())
    }

    /// Arguments in subject, verb, object, indirect-object order.
    pub fn fields(&self) -> [&str; 4] {
        [&self.subject, &self.verb, &self.object, &self.indirect_object]
    }

    fn from_array(raw: [String; 4]) -> Result<Self> {
        let [subject, verb, object, indirect_object] = raw;
        Self::new(subject, verb, object, indirect_object)
    }

    fn to_array(&self) -> [String; 4] {
        self.fields().map(str::to_owned)
    }
}

/// The four surface tokens of an event; `NULL` becomes [`NULL_TOKEN`].
pub fn event_to_tokens(event: &Event) -> [&str; 4] {
    event.fields().map(|f| if f == NULL_ARGUMENT { NULL_TOKEN } else { f })
}

/// An event chain, its candidate continuations and the index of the correct one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptInstance {
    pub chain: Vec<Event>,
    pub candidates: Vec<Event>,
    pub gold: usize,
}

impl ScriptInstance {
    pub fn new(chain: Vec<Event>, candidates: Vec<Event>, gold: usize) -> Result<Self> {
        let instance = Self { chain, candidates, gold };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chain.is_empty() {
            return Err(Error::InvalidInstance("empty chain".into()));
        }
        if self.candidates.is_empty() {
            return Err(Error::InvalidInstance("no candidates".into()));
        }
        if self.gold >= self.candidates.len() {
            return Err(Error::GoldOutOfRange { gold: self.gold, count: self.candidates.len() });
        }
        self.chain.iter().chain(&self.candidates).try_for_each(Event::validate)
    }

    pub fn chain_len(&self) -> usize {
        self.chain.len()
    }

    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    chain: Vec<[String; 4]>,
    candidates: Vec<[String; 4]>,
    gold: i64,
}

/// Expected record arity, checked when parsing a whole corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arity {
    pub chain_len: usize,
    pub candidate_count: usize,
}

/// Parses one corpus record. `line_no` is 1-based and only used in errors.
pub fn parse_instance(line: &str, line_no: usize) -> Result<ScriptInstance> {
    parse_with_arity(line, line_no, None)
}

fn parse_with_arity(line: &str, line_no: usize, arity: Option<Arity>) -> Result<ScriptInstance> {
    let err = |message: String| Error::Parse { line: line_no, message };
    let record: Record =
        serde_json::from_str(line).map_err(|e| err(format!("malformed record: {e}")))?;
    if let Some(a) = arity {
        if record.chain.len() != a.chain_len {
            return Err(err(format!(
                "wrong arity: chain has {} events, expected {}",
                record.chain.len(),
                a.chain_len
            )));
        }
        if record.candidates.len() != a.candidate_count {
            return Err(err(format!(
                "wrong arity: {} candidates, expected {}",
                record.candidates.len(),
                a.candidate_count
            )));
        }
    }
    let convert = |events: Vec<[String; 4]>| -> Result<Vec<Event>> {
        events.into_iter().map(Event::from_array).collect()
    };
    let chain = convert(record.chain).map_err(|e| err(e.to_string()))?;
    let candidates = convert(record.candidates).map_err(|e| err(e.to_string()))?;
    if record.gold < 0 || record.gold as usize >= candidates.len() {
        return Err(err(format!(
            "gold out of range: index {} with {} candidates",
            record.gold,
            candidates.len()
        )));
    }
    ScriptInstance::new(chain, candidates, record.gold as usize).map_err(|e| err(e.to_string()))
}

/// Canonical single-line JSON rendering of an instance.
pub fn serialize_instance(instance: &ScriptInstance) -> String {
    let record = Record {
        chain: instance.chain.iter().map(Event::to_array).collect(),
        candidates: instance.candidates.iter().map(Event::to_array).collect(),
        gold: instance.gold as i64,
    };
    serde_json::to_string(&record).expect("records always serialize")
}

/// Parses a whole corpus. Every record must match the first record's arity.
/// Blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<ScriptInstance>> {
    let mut arity = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let instance = parse_with_arity(line, i + 1, arity)?;
        arity.get_or_insert(Arity {
            chain_len: instance.chain_len(),
            candidate_count: instance.candidate_count(),
        });
        out.push(instance);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<ScriptInstance>> {
    let file = File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_corpus(&text)
}

pub fn write_corpus(path: &Path, instances: &[ScriptInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for instance in instances {
        writeln!(w, "{}", serialize_instance(instance))?;
    }
    w.flush()?;
    Ok(())
}
