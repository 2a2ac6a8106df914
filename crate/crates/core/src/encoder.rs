//! Dual bag-of-embeddings encoders mapping questions and passages into a
//! shared d-dimensional space.
//!
//! Each encoder owns an embedding table, a square projection, and a bias:
//!
//! ```text
//! v = projection * mean(embedding[token ids]) + bias
//! ```
//!
//! Question and passage encoders share one vocabulary but have independent
//! parameters. Retrieval relevance is the inner product of the two encodings
//! (cosine and negative L2 are available as training-time alternatives).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::binio;
use crate::corpus::{passage_text_for_encoding, Passage, SEP_TOKEN};
use crate::dense_index::EmbeddingStore;
use crate::error::{Error, Result};
use crate::mat::{dot, norm, Matrix};
use crate::Scalar;

/// Vocabulary id of the unknown-token bucket.
pub const UNK_ID: u32 = 0;
/// Vocabulary id of the title/body separator.
pub const SEP_ID: u32 = 1;

/// Reserved display form of the unknown token.
pub const UNK_TOKEN: &str = "[UNK]";

/// Term-to-id mapping with two reserved entries: `[UNK]` at 0 and the
/// separator at 1. Remaining terms are assigned ids in sorted order, so a
/// vocabulary is a pure function of the term set.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    by_term: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from an iterator of corpus tokens.
    pub fn build<I, S>(tokens: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut unique: std::collections::BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .collect();
        unique.remove(UNK_TOKEN);
        unique.remove(SEP_TOKEN);

        let mut terms = Vec::with_capacity(unique.len() + 2);
        terms.push(UNK_TOKEN.to_string());
        terms.push(SEP_TOKEN.to_string());
        terms.extend(unique);

        let by_term = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { terms, by_term }
    }

    /// Reconstructs a vocabulary from an id-ordered term list (checkpoint
    /// loading). The reserved entries must be in place.
    fn from_terms(terms: Vec<String>, loc: &str) -> Result<Vocabulary> {
        if terms.len() < 2 || terms[0] != UNK_TOKEN || terms[1] != SEP_TOKEN {
            return Err(Error::format(
                "checkpoint",
                loc,
                "vocabulary must start with the reserved unknown and separator tokens",
            ));
        }
        let mut by_term = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if by_term.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(
                    "checkpoint",
                    loc,
                    format!("duplicate vocabulary term {t:?}"),
                ));
            }
        }
        Ok(Vocabulary { terms, by_term })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always present
    }

    /// Id for a term; unknown terms map to [`UNK_ID`].
    pub fn id(&self, term: &str) -> u32 {
        self.by_term.get(term).copied().unwrap_or(UNK_ID)
    }

    pub fn term(&self, id: u32) -> &str {
        &self.terms[id as usize]
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// Maps a token sequence to ids; an empty sequence becomes `[UNK]` so
    /// every input has a well-defined encoding.
    pub fn token_ids(&self, tokens: &[String]) -> Vec<u32> {
        if tokens.is_empty() {
            return vec![UNK_ID];
        }
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Parameters of one encoder tower.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// `|V| x d` token embedding table.
    pub embedding: Matrix<T>,
    /// `d x d` output projection.
    pub projection: Matrix<T>,
    /// Length-`d` output bias.
    pub bias: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Embeddings uniform in `(-0.5/sqrt(d), 0.5/sqrt(d))`, identity
    /// projection, zero bias.
    fn init(vocab_size: usize, dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let scale = 0.5 / (dim as f64).sqrt();
        let mut embedding = Matrix::zeros(vocab_size, dim);
        for v in embedding.as_mut_slice() {
            *v = T::from_f64_lossy((rng.gen::<f64>() * 2.0 - 1.0) * scale);
        }
        EncoderParams {
            embedding,
            projection: Matrix::identity(dim),
            bias: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }
}

/// The question/passage encoder pair plus the shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T> {
    pub vocab: Vocabulary,
    pub question: EncoderParams<T>,
    pub passage: EncoderParams<T>,
}

const MAGIC: [u8; 4] = *b"DENC";
const VERSION: u32 = 1;

impl<T: Scalar> DualEncoder<T> {
    /// Fresh seeded parameters over a vocabulary.
    pub fn init(vocab: Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("encoder dim must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let question = EncoderParams::init(vocab.len(), dim, &mut rng);
        let passage = EncoderParams::init(vocab.len(), dim, &mut rng);
        Ok(DualEncoder {
            vocab,
            question,
            passage,
        })
    }

    pub fn dim(&self) -> usize {
        self.question.dim()
    }

    /// Encodes a question token sequence.
    pub fn encode_question(&self, tokens: &[String]) -> Vec<T> {
        encode(&self.question, &self.vocab, tokens)
    }

    /// Encodes a passage's encoder token sequence.
    pub fn encode_passage(&self, passage: &Passage) -> Vec<T> {
        encode(&self.passage, &self.vocab, &passage_text_for_encoding(passage))
    }

    /// Writes the `DENC` checkpoint: dimension, vocabulary size, question
    /// then passage parameters as `f32`, then the id-ordered vocabulary.
    pub fn save(&self, path: &Path) -> Result<()> {
        let loc = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&loc, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(&loc, e);

        binio::write_header(&mut w, MAGIC, VERSION).map_err(io_err)?;
        binio::write_u32(&mut w, self.dim() as u32).map_err(io_err)?;
        binio::write_u64(&mut w, self.vocab.len() as u64).map_err(io_err)?;
        for params in [&self.question, &self.passage] {
            for &v in params.embedding.as_slice() {
                binio::write_f32(&mut w, v.to_f64_lossy() as f32).map_err(io_err)?;
            }
            for &v in params.projection.as_slice() {
                binio::write_f32(&mut w, v.to_f64_lossy() as f32).map_err(io_err)?;
            }
            for &v in &params.bias {
                binio::write_f32(&mut w, v.to_f64_lossy() as f32).map_err(io_err)?;
            }
        }
        for term in self.vocab.terms() {
            binio::write_str(&mut w, term).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Loads a checkpoint written by [`DualEncoder::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let loc = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
        let mut r = BufReader::new(file);

        let version = binio::read_header(&mut r, &loc, MAGIC)?;
        binio::expect_version("checkpoint", &loc, version, VERSION)?;

        let dim = binio::read_u32(&mut r, &loc)? as usize;
        let vocab_size = binio::read_u64(&mut r, &loc)? as usize;

        let read_params = |r: &mut BufReader<File>| -> Result<EncoderParams<T>> {
            let mut embedding = Vec::with_capacity(vocab_size * dim);
            for _ in 0..vocab_size * dim {
                embedding.push(T::from_f64_lossy(binio::read_f32(r, &loc)? as f64));
            }
            let mut projection = Vec::with_capacity(dim * dim);
            for _ in 0..dim * dim {
                projection.push(T::from_f64_lossy(binio::read_f32(r, &loc)? as f64));
            }
            let mut bias = Vec::with_capacity(dim);
            for _ in 0..dim {
                bias.push(T::from_f64_lossy(binio::read_f32(r, &loc)? as f64));
            }
            Ok(EncoderParams {
                embedding: Matrix::from_vec(vocab_size, dim, embedding),
                projection: Matrix::from_vec(dim, dim, projection),
                bias,
            })
        };
        let question = read_params(&mut r)?;
        let passage = read_params(&mut r)?;

        let mut terms = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            terms.push(binio::read_str(&mut r, &loc)?);
        }
        let vocab = Vocabulary::from_terms(terms, &loc)?;

        Ok(DualEncoder {
            vocab,
            question,
            passage,
        })
    }
}

/// Encodes a token sequence with one tower.
///
/// Token ids are sorted before summation so the floating-point reduction
/// order, and therefore the output, is invariant under permutation of the
/// input tokens. Duplicates count once per occurrence.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, vocab: &Vocabulary, tokens: &[String]) -> Vec<T> {
    let mut ids = vocab.token_ids(tokens);
    ids.sort_unstable();

    let dim = params.dim();
    let mut mean = vec![T::zero(); dim];
    for &id in &ids {
        for (m, &e) in mean.iter_mut().zip(params.embedding.row(id as usize)) {
            *m += e;
        }
    }
    let inv = T::one() / T::from_f64_lossy(ids.len() as f64);
    for m in &mut mean {
        *m *= inv;
    }

    let mut out = params.projection.matvec(&mean);
    for (o, &b) in out.iter_mut().zip(&params.bias) {
        *o += b;
    }
    out
}

/// Similarity function applied to encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    /// Inner product; what the dense indexes serve.
    Dot,
    /// Inner product of L2-normalized vectors; 0 when either norm is 0.
    Cosine,
    /// Negated Euclidean distance, so that larger is still better.
    NegL2,
}

impl SimilarityKind {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Dot => "dot",
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::NegL2 => "neg_l2",
        }
    }
}

impl std::str::FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(SimilarityKind::Dot),
            "cosine" => Ok(SimilarityKind::Cosine),
            "neg_l2" => Ok(SimilarityKind::NegL2),
            other => Err(Error::InvalidArgument(format!(
                "unknown similarity kind {other:?} (expected dot, cosine, or neg_l2)"
            ))),
        }
    }
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scores a question/passage vector pair.
pub fn similarity<T: Scalar>(vq: &[T], vp: &[T], kind: SimilarityKind) -> Result<T> {
    if vq.len() != vp.len() {
        return Err(Error::DimensionMismatch {
            expected: vq.len(),
            got: vp.len(),
        });
    }
    Ok(match kind {
        SimilarityKind::Dot => dot(vq, vp),
        SimilarityKind::Cosine => {
            let nq = norm(vq);
            let np = norm(vp);
            if nq == T::zero() || np == T::zero() {
                T::zero()
            } else {
                dot(vq, vp) / (nq * np)
            }
        }
        SimilarityKind::NegL2 => {
            let mut sq = T::zero();
            for (&a, &b) in vq.iter().zip(vp) {
                let d = a - b;
                sq += d * d;
            }
            -sq.sqrt()
        }
    })
}

/// Encodes every passage with the passage tower, preserving input order.
///
/// Work is partitioned into `batch_size` chunks that may run on different
/// threads; each vector depends only on its own passage, so the result is
/// bit-identical for every batch size and thread count.
pub fn encode_corpus<T: Scalar>(
    enc: &DualEncoder<T>,
    passages: &[Passage],
    batch_size: usize,
) -> Result<EmbeddingStore<T>> {
    let batch = batch_size.max(1);
    let vectors: Vec<Vec<T>> = passages
        .par_chunks(batch)
        .flat_map_iter(|chunk| chunk.iter().map(|p| enc.encode_passage(p)))
        .collect();

    let mut store = EmbeddingStore::new(enc.dim());
    for (p, v) in passages.iter().zip(vectors) {
        store.push(p.id.clone(), &v)?;
    }
    Ok(store)
}
