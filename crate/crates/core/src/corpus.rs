//! Documents, passages, questions, and the text file formats.
//!
//! Documents are split into disjoint fixed-width word blocks which become
//! the retrieval unit everywhere else in the engine. Answer matching uses
//! SQuAD-style string normalization (lowercase, strip punctuation, drop
//! articles, collapse whitespace) so that "The Villain, Sauron" and
//! "villain sauron" compare equal.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::tokenize;

/// Separator token inserted between a passage's title and body tokens when
/// building encoder input. It is an encoding artifact, not corpus text: the
/// sparse index skips it and it never counts toward document length.
pub const SEP_TOKEN: &str = "[SEP]";

/// Source document before passage splitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub body: String,
}

/// A fixed-width block of document words; the unit of retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub doc_id: String,
    pub title: String,
    pub words: Vec<String>,
}

impl Passage {
    /// The passage body as stored in the TSV `text` column.
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// A question with its acceptable answer strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub answers: Vec<String>,
}

/// One line of a question/answer file: the question plus optional
/// pre-assigned positive and negative passage ids.
#[derive(Debug, Clone)]
pub struct QaRecord {
    pub question: Question,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
}

/// A question paired with one positive passage and zero or more mined
/// negatives; the unit the trainer consumes.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub question: Question,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Splits a document body into disjoint blocks of at most `window` words.
///
/// Words are maximal runs of non-whitespace (Unicode). Block `i` of document
/// `d` gets id `d:i`. The final block may be shorter; an empty body yields no
/// passages. `window` must be positive.
pub fn split_document(doc: &Document, window: usize) -> Result<Vec<Passage>> {
    if window == 0 {
        return Err(Error::InvalidArgument(
            "split window must be positive".into(),
        ));
    }
    let words: Vec<&str> = doc.body.split_whitespace().collect();
    Ok(words
        .chunks(window)
        .enumerate()
        .map(|(i, chunk)| Passage {
            id: format!("{}:{}", doc.id, i),
            doc_id: doc.id.clone(),
            title: doc.title.clone(),
            words: chunk.iter().map(|w| w.to_string()).collect(),
        })
        .collect())
}

/// Token sequence fed to the passage encoder: the tokenized title, the
/// separator, then the passage words verbatim.
pub fn passage_text_for_encoding(p: &Passage) -> Vec<String> {
    let mut tokens = tokenize(&p.title);
    tokens.push(SEP_TOKEN.to_string());
    tokens.extend(p.words.iter().cloned());
    tokens
}

/// SQuAD-style answer normalization: lowercase, strip punctuation, remove
/// the articles `a`/`an`/`the` as whole words, collapse whitespace.
///
/// Idempotent: `normalize_answer(normalize_answer(s)) == normalize_answer(s)`.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when the normalized text contains any normalized answer as a
/// substring. Answers that normalize to the empty string are ignored rather
/// than matching everything.
pub fn contains_answer(text: &str, answers: &[String]) -> bool {
    let norm_text = normalize_answer(text);
    answers.iter().any(|a| {
        let na = normalize_answer(a);
        !na.is_empty() && norm_text.contains(&na)
    })
}

/// Picks the distant-supervision positive for a question: the highest-ranked
/// passage among the top `depth` of `ranked` whose text contains one of the
/// answers. Returns `None` when no ranked passage qualifies; callers discard
/// such questions.
pub fn select_positive<'a>(
    question: &Question,
    ranked: &[String],
    collection: &'a PassageCollection,
    depth: usize,
) -> Option<&'a Passage> {
    ranked.iter().take(depth).find_map(|id| {
        let p = collection.get(id)?;
        contains_answer(&p.text(), &question.answers).then_some(p)
    })
}

/// Passages plus an id lookup, shared by the trainer, miners, and rankers.
#[derive(Debug, Clone)]
pub struct PassageCollection {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl PassageCollection {
    /// Wraps a passage list, rejecting duplicate ids.
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicatePassageId(p.id.clone()));
            }
        }
        Ok(PassageCollection { passages, by_id })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn by_ordinal(&self, i: usize) -> &Passage {
        &self.passages[i]
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }
}

/// Writes passages as headerless TSV: `id<TAB>text<TAB>title`, one per line,
/// UTF-8 with `\n` endings. Titles and ids must not contain tabs or
/// newlines; body words cannot (they are whitespace-split).
pub fn write_passages_tsv(path: &Path, passages: &[Passage]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for p in passages {
        for (field, name) in [(&p.id, "id"), (&p.title, "title")] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::format(
                    "passage tsv",
                    path.display().to_string(),
                    format!("{name} {:?} contains tab or newline", field),
                ));
            }
        }
        writeln!(w, "{}\t{}\t{}", p.id, p.text(), p.title)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a passage TSV written by [`write_passages_tsv`].
///
/// The document id is recovered from the passage id (everything before the
/// last `:`); standalone ids double as their own document id.
pub fn read_passages_tsv(path: &Path) -> Result<Vec<Passage>> {
    let loc = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
    let mut passages = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&loc, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                "passage tsv",
                format!("{loc}:{}", lineno + 1),
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(Error::format(
                "passage tsv",
                format!("{loc}:{}", lineno + 1),
                "empty passage id".to_string(),
            ));
        }
        let doc_id = match id.rsplit_once(':') {
            Some((doc, _)) => doc.to_string(),
            None => id.clone(),
        };
        passages.push(Passage {
            id,
            doc_id,
            title: fields[2].to_string(),
            words: fields[1].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(passages)
}

#[derive(Serialize, Deserialize)]
struct QaLine {
    question: String,
    answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    positive_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    negative_ids: Vec<String>,
}

/// Reads a question/answer JSONL file. Question ids are assigned by line
/// position (`q0`, `q1`, ...) so that every stage of a pipeline derives the
/// same ids from the same file.
pub fn read_qa_jsonl(path: &Path) -> Result<Vec<QaRecord>> {
    let loc = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&loc, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: QaLine = serde_json::from_str(&line).map_err(|e| {
            Error::format("qa jsonl", format!("{loc}:{}", lineno + 1), e.to_string())
        })?;
        records.push(QaRecord {
            question: Question {
                id: format!("q{}", records.len()),
                text: parsed.question,
                answers: parsed.answers,
            },
            positive_ids: parsed.positive_ids,
            negative_ids: parsed.negative_ids,
        });
    }
    Ok(records)
}

/// Writes question/answer records in the JSONL format read back by
/// [`read_qa_jsonl`].
pub fn write_qa_jsonl(path: &Path, records: &[QaRecord]) -> Result<()> {
    let loc = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&loc, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&QaLine {
            question: r.question.text.clone(),
            answers: r.question.answers.clone(),
            positive_ids: r.positive_ids.clone(),
            negative_ids: r.negative_ids.clone(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(&loc, e))?;
    }
    w.flush().map_err(|e| Error::io(&loc, e))
}

/// Reads source documents from JSONL: `{"id": ..., "title": ..., "body": ...}`.
pub fn read_documents_jsonl(path: &Path) -> Result<Vec<Document>> {
    let loc = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&loc, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| {
            Error::format("docs jsonl", format!("{loc}:{}", lineno + 1), e.to_string())
        })?;
        docs.push(doc);
    }
    Ok(docs)
}
