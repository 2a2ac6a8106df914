//! Inverted index with Lucene-style BM25 scoring.
//!
//! Terms come from the same token sequence the passage encoder sees (title
//! tokens, separator, body words), except that the separator is excluded
//! from both the postings and the document length. Scores follow the Lucene
//! variant of BM25:
//!
//! ```text
//! idf(t)     = ln(1 + (N - df + 0.5) / (df + 0.5))
//! tfpart(t)  = tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avglen))
//! score(q,d) = sum over query term occurrences of idf(t) * tfpart(t)
//! ```
//!
//! with `k1 = 0.9` and `b = 0.4` as defaults.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio;
use crate::corpus::{passage_text_for_encoding, Passage, SEP_TOKEN};
use crate::error::{Error, Result};
use crate::Scalar;

/// Lowercases and splits text on non-alphanumeric characters, dropping
/// empty pieces. `"Dark-Lord's"` becomes `["dark", "lord", "s"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// BM25 tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Config<T> {
    /// Term-frequency saturation.
    pub k1: T,
    /// Document-length normalization strength.
    pub b: T,
}

impl<T: Scalar> Default for Bm25Config<T> {
    fn default() -> Self {
        Bm25Config {
            k1: T::from_f64_lossy(0.9),
            b: T::from_f64_lossy(0.4),
        }
    }
}

/// One posting: which passage a term occurs in and how often.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

/// A scored passage returned by [`sparse_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct Hit<T> {
    pub ordinal: usize,
    pub score: T,
}

/// Immutable inverted index over a passage collection.
///
/// Postings live in a `BTreeMap` so iteration (and therefore serialization)
/// is deterministic for a given input.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    passage_ids: Vec<String>,
    avg_doc_length: f64,
}

const MAGIC: [u8; 4] = *b"DSPX";
const VERSION: u32 = 1;

impl SparseIndex {
    /// Number of indexed passages.
    pub fn num_passages(&self) -> usize {
        self.passage_ids.len()
    }

    /// Passage id for an ordinal.
    pub fn passage_id(&self, ordinal: usize) -> &str {
        &self.passage_ids[ordinal]
    }

    /// Ordered passage ids (index order equals build order).
    pub fn passage_ids(&self) -> &[String] {
        &self.passage_ids
    }

    /// Indexed length of a passage (separator excluded).
    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    /// Mean indexed passage length; 0 for an empty index.
    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    /// Number of passages containing `term`.
    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn term_frequency(&self, term: &str, ordinal: u32) -> u32 {
        let Some(list) = self.postings.get(term) else {
            return 0;
        };
        match list.binary_search_by_key(&ordinal, |p| p.ordinal) {
            Ok(i) => list[i].tf,
            Err(_) => 0,
        }
    }
}

/// Builds the inverted index for a passage collection.
///
/// Terms are the encoder token sequence minus the separator, so titles are
/// searchable but the separator never influences scores or lengths.
pub fn build_sparse_index(passages: &[Passage]) -> Result<SparseIndex> {
    let mut seen = std::collections::HashSet::with_capacity(passages.len());
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(passages.len());
    let mut passage_ids = Vec::with_capacity(passages.len());

    for (ordinal, p) in passages.iter().enumerate() {
        if !seen.insert(p.id.clone()) {
            return Err(Error::DuplicatePassageId(p.id.clone()));
        }
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        let mut length = 0u32;
        for token in passage_text_for_encoding(p) {
            if token == SEP_TOKEN {
                continue;
            }
            *counts.entry(token).or_insert(0) += 1;
            length += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push(Posting {
                ordinal: ordinal as u32,
                tf,
            });
        }
        doc_lengths.push(length);
        passage_ids.push(p.id.clone());
    }

    let avg_doc_length = if doc_lengths.is_empty() {
        0.0
    } else {
        doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
    };

    Ok(SparseIndex {
        postings,
        doc_lengths,
        passage_ids,
        avg_doc_length,
    })
}

/// BM25 score of one passage for a tokenized query.
///
/// Query terms are treated as a sequence: a term appearing twice in the
/// query contributes twice. Terms missing from the passage contribute 0.
pub fn bm25_score<T: Scalar>(
    index: &SparseIndex,
    config: &Bm25Config<T>,
    query_terms: &[String],
    ordinal: usize,
) -> T {
    let n = index.num_passages() as f64;
    let len = T::from_f64_lossy(index.doc_lengths[ordinal] as f64);
    let avglen = T::from_f64_lossy(index.avg_doc_length);
    let one = T::one();

    let mut score = T::zero();
    for term in query_terms {
        let tf = index.term_frequency(term, ordinal as u32);
        if tf == 0 {
            continue;
        }
        let df = index.doc_frequency(term) as f64;
        let idf = T::from_f64_lossy((1.0 + (n - df + 0.5) / (df + 0.5)).ln());
        let tf = T::from_f64_lossy(tf as f64);
        let norm = one - config.b + config.b * len / avglen;
        score += idf * (tf * (config.k1 + one)) / (tf + config.k1 * norm);
    }
    score
}

/// Ranks passages for a question text by BM25.
///
/// Only passages sharing at least one term with the query are scored;
/// results are sorted by descending score with ties broken by ascending
/// passage id, and truncated to `k`. The prefix property holds: the top `k`
/// list is a prefix of the top `k'` list for any `k' > k`.
pub fn sparse_search<T: Scalar>(
    index: &SparseIndex,
    config: &Bm25Config<T>,
    question_text: &str,
    k: usize,
) -> Vec<Hit<T>> {
    let terms = tokenize(question_text);
    if terms.is_empty() || k == 0 {
        return Vec::new();
    }

    let mut candidates: Vec<usize> = Vec::new();
    {
        let mut seen_terms = std::collections::HashSet::new();
        let mut seen_docs = vec![false; index.num_passages()];
        for term in &terms {
            if !seen_terms.insert(term.as_str()) {
                continue;
            }
            if let Some(list) = index.postings.get(term) {
                for p in list {
                    if !seen_docs[p.ordinal as usize] {
                        seen_docs[p.ordinal as usize] = true;
                        candidates.push(p.ordinal as usize);
                    }
                }
            }
        }
    }

    let mut hits: Vec<Hit<T>> = candidates
        .into_iter()
        .map(|ordinal| Hit {
            ordinal,
            score: bm25_score(index, config, &terms, ordinal),
        })
        .filter(|h| h.score > T::zero())
        .collect();

    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| index.passage_id(a.ordinal).cmp(index.passage_id(b.ordinal)))
    });
    hits.truncate(k);
    hits
}

impl SparseIndex {
    /// Serializes the index: magic `DSPX`, version, then length-prefixed
    /// sections for the id table, document lengths, and postings. All values
    /// little-endian; strings length-prefixed UTF-8.
    pub fn save(&self, path: &Path) -> Result<()> {
        let loc = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&loc, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(&loc, e);

        binio::write_header(&mut w, MAGIC, VERSION).map_err(io_err)?;

        let mut ids = Vec::new();
        binio::write_u64(&mut ids, self.passage_ids.len() as u64).map_err(io_err)?;
        for id in &self.passage_ids {
            binio::write_str(&mut ids, id).map_err(io_err)?;
        }
        write_section(&mut w, &ids, &loc)?;

        let mut lengths = Vec::new();
        binio::write_u64(&mut lengths, self.doc_lengths.len() as u64).map_err(io_err)?;
        for &l in &self.doc_lengths {
            binio::write_u32(&mut lengths, l).map_err(io_err)?;
        }
        write_section(&mut w, &lengths, &loc)?;

        let mut postings = Vec::new();
        binio::write_u64(&mut postings, self.postings.len() as u64).map_err(io_err)?;
        for (term, list) in &self.postings {
            binio::write_str(&mut postings, term).map_err(io_err)?;
            binio::write_u64(&mut postings, list.len() as u64).map_err(io_err)?;
            for p in list {
                binio::write_u32(&mut postings, p.ordinal).map_err(io_err)?;
                binio::write_u32(&mut postings, p.tf).map_err(io_err)?;
            }
        }
        write_section(&mut w, &postings, &loc)?;

        w.flush().map_err(io_err)
    }

    /// Loads an index written by [`SparseIndex::save`]. The average document
    /// length is recomputed from the stored lengths.
    pub fn load(path: &Path) -> Result<SparseIndex> {
        let loc = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
        let mut r = BufReader::new(file);

        let version = binio::read_header(&mut r, &loc, MAGIC)?;
        binio::expect_version("sparse index", &loc, version, VERSION)?;

        let ids = read_section(&mut r, &loc)?;
        let mut ir = ids.as_slice();
        let count = binio::read_u64(&mut ir, &loc)? as usize;
        let mut passage_ids = Vec::with_capacity(count);
        for _ in 0..count {
            passage_ids.push(binio::read_str(&mut ir, &loc)?);
        }

        let lengths = read_section(&mut r, &loc)?;
        let mut lr = lengths.as_slice();
        let lcount = binio::read_u64(&mut lr, &loc)? as usize;
        if lcount != count {
            return Err(Error::format(
                "sparse index",
                &loc,
                format!("{count} ids but {lcount} doc lengths"),
            ));
        }
        let mut doc_lengths = Vec::with_capacity(lcount);
        for _ in 0..lcount {
            doc_lengths.push(binio::read_u32(&mut lr, &loc)?);
        }

        let section = read_section(&mut r, &loc)?;
        let mut pr = section.as_slice();
        let term_count = binio::read_u64(&mut pr, &loc)? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..term_count {
            let term = binio::read_str(&mut pr, &loc)?;
            let n = binio::read_u64(&mut pr, &loc)? as usize;
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                let ordinal = binio::read_u32(&mut pr, &loc)?;
                let tf = binio::read_u32(&mut pr, &loc)?;
                if ordinal as usize >= count {
                    return Err(Error::format(
                        "sparse index",
                        &loc,
                        format!("posting ordinal {ordinal} out of range"),
                    ));
                }
                list.push(Posting { ordinal, tf });
            }
            postings.insert(term, list);
        }

        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };

        Ok(SparseIndex {
            postings,
            doc_lengths,
            passage_ids,
            avg_doc_length,
        })
    }
}

fn write_section<W: Write>(w: &mut W, bytes: &[u8], loc: &str) -> Result<()> {
    binio::write_u64(w, bytes.len() as u64).map_err(|e| Error::io(loc, e))?;
    w.write_all(bytes).map_err(|e| Error::io(loc, e))
}

fn read_section<R: std::io::Read>(r: &mut R, loc: &str) -> Result<Vec<u8>> {
    let len = binio::read_u64(r, loc)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(loc, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn passage(id: &str, title: &str, text: &str) -> Passage {
        Passage {
            id: id.into(),
            doc_id: id.into(),
            title: title.into(),
            words: text.split_whitespace().map(str::to_string).collect(),
        }
    }

    fn cat_dog_index() -> SparseIndex {
        build_sparse_index(&[passage("d1", "", "cat cat"), passage("d2", "", "dog")]).unwrap()
    }

    #[test]
    fn tokenize_lowercases_and_splits_on_non_alphanumeric() {
        assert_eq!(
            tokenize("The Dark-Lord's 2nd army!"),
            vec!["the", "dark", "lord", "s", "2nd", "army"]
        );
        assert_eq!(tokenize("Ænglisc über-Fuß"), vec!["ænglisc", "über", "fuß"]);
        assert!(tokenize("  ...  ").is_empty());
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn build_counts_lengths_without_separator() {
        let index = cat_dog_index();
        assert_eq!(index.num_passages(), 2);
        assert_eq!(index.doc_length(0), 2);
        assert_eq!(index.doc_length(1), 1);
        assert_eq!(index.avg_doc_length(), 1.5);
        assert_eq!(index.doc_frequency("cat"), 1);
        assert_eq!(index.doc_frequency(SEP_TOKEN), 0);
    }

    #[test]
    fn build_indexes_title_tokens() {
        let index = build_sparse_index(&[passage("d", "Sauron", "dark lord")]).unwrap();
        assert_eq!(index.doc_length(0), 3);
        assert_eq!(index.doc_frequency("sauron"), 1);
    }

    #[test]
    fn build_rejects_duplicate_ids() {
        let err =
            build_sparse_index(&[passage("x", "", "a"), passage("x", "", "b")]).unwrap_err();
        assert!(matches!(err, Error::DuplicatePassageId(_)));
    }

    #[test]
    fn bm25_matches_hand_derivation() {
        // corpus {d1: "cat cat", d2: "dog"}, query "cat", k1=0.9, b=0.4:
        //   idf    = ln(1 + (2 - 1 + 0.5) / (1 + 0.5)) = ln 2
        //   tfpart = 2 * 1.9 / (2 + 0.9 * (1 - 0.4 + 0.4 * 2 / 1.5)) = 3.8 / 3.02
        let expected = 2.0f64.ln() * (3.8 / 3.02);
        assert!((expected - 0.8722).abs() < 1e-4);

        let index = cat_dog_index();
        let config = Bm25Config::<f64>::default();
        let got = bm25_score(&index, &config, &tokenize("cat"), 0);
        assert!((got - expected).abs() <= 1e-12, "got {got}, want {expected}");
        assert_eq!(bm25_score(&index, &config, &tokenize("cat"), 1), 0.0);
    }

    #[test]
    fn idf_stays_positive_when_term_is_everywhere() {
        let index =
            build_sparse_index(&[passage("a", "", "cat"), passage("b", "", "cat dog")]).unwrap();
        let config = Bm25Config::<f64>::default();
        let score = bm25_score(&index, &config, &tokenize("cat"), 0);
        assert!(score > 0.0, "df == N must still produce a positive score");
    }

    #[test]
    fn duplicate_query_terms_score_twice() {
        let index = cat_dog_index();
        let config = Bm25Config::<f64>::default();
        let once = bm25_score(&index, &config, &tokenize("cat"), 0);
        let twice = bm25_score(&index, &config, &tokenize("cat cat"), 0);
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn search_omits_non_matching_passages() {
        let index = cat_dog_index();
        let hits = sparse_search(&index, &Bm25Config::<f64>::default(), "cat", 10);
        assert_eq!(hits.len(), 1);
        assert_eq!(index.passage_id(hits[0].ordinal), "d1");
    }

    #[test]
    fn search_breaks_ties_by_ascending_id() {
        // identical content, ids intentionally unsorted in build order
        let index = build_sparse_index(&[
            passage("p2", "", "cat"),
            passage("p1", "", "cat"),
            passage("p10", "", "cat"),
        ])
        .unwrap();
        let hits = sparse_search(&index, &Bm25Config::<f64>::default(), "cat", 10);
        let ids: Vec<&str> = hits.iter().map(|h| index.passage_id(h.ordinal)).collect();
        assert_eq!(ids, vec!["p1", "p10", "p2"]);
    }

    #[test]
    fn search_empty_query_or_zero_k_is_empty() {
        let index = cat_dog_index();
        let config = Bm25Config::<f64>::default();
        assert!(sparse_search(&index, &config, "…!?", 10).is_empty());
        assert!(sparse_search(&index, &config, "cat", 0).is_empty());
    }

    #[test]
    fn save_load_round_trip_and_rebuild_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let passages = vec![
            passage("a:0", "Alpha", "cat dog bird"),
            passage("a:1", "Beta", "dog dog"),
            passage("b:0", "", "fish"),
        ];
        let index = build_sparse_index(&passages).unwrap();

        let p1 = dir.path().join("one.dspx");
        let p2 = dir.path().join("two.dspx");
        index.save(&p1).unwrap();
        build_sparse_index(&passages).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = SparseIndex::load(&p1).unwrap();
        assert_eq!(loaded, index);
        assert_eq!(loaded.avg_doc_length(), index.avg_doc_length());
    }

    #[test]
    fn load_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.dspx");
        cat_dog_index().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(SparseIndex::load(&path).is_err());
    }

    #[test]
    fn load_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.dspx");
        cat_dog_index().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            SparseIndex::load(&path).unwrap_err(),
            Error::UnsupportedVersion { version: 9, .. }
        ));
    }

    proptest! {
        /// Search results are sorted, positive, and k-prefix consistent on
        /// random corpora.
        #[test]
        fn search_order_and_prefix_property(
            docs in proptest::collection::vec("[a-d]{1,3}( [a-d]{1,3}){0,6}", 1..12),
            query in "[a-d]{1,3}( [a-d]{1,3}){0,3}",
            k in 1usize..6,
        ) {
            let passages: Vec<Passage> = docs
                .iter()
                .enumerate()
                .map(|(i, text)| passage(&format!("p{i}"), "", text))
                .collect();
            let index = build_sparse_index(&passages).unwrap();
            let config = Bm25Config::<f64>::default();

            let full = sparse_search(&index, &config, &query, usize::MAX);
            for w in full.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                prop_assert!(
                    a.score > b.score
                        || (a.score == b.score
                            && index.passage_id(a.ordinal) < index.passage_id(b.ordinal))
                );
            }
            for h in &full {
                prop_assert!(h.score > 0.0);
            }
            let top_k = sparse_search(&index, &config, &query, k);
            prop_assert_eq!(&full[..k.min(full.len())], &top_k[..]);
        }
    }
}
