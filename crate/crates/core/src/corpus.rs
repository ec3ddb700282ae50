//! Corpora, query sets and the token vocabulary.
//!
//! Corpus files are line-delimited JSON records:
//!
//! ```text
//! {"id":0,"input":"t03 t07","output":"t04 t04 t09","topic":0}
//! ```
//!
//! Token strings are split per character when every vocabulary token is a
//! single character, otherwise on whitespace. The vocabulary file holds one
//! token per line; the line index is the token id.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type TokenId = usize;

/// Reserved end-of-sequence token.
pub const EOS_TOKEN: &str = "<eos>";

/// Probability that a planted token is drawn from its topic's subset.
pub const TOPIC_MASS: f64 = 0.9;

/// Geometric decay of token weights inside a topic subset.
pub const WITHIN_TOPIC_DECAY: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Splitting {
    Chars,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    splitting: Splitting,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Vocab(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocab(format!("empty token at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        let eos = *index
            .get(EOS_TOKEN)
            .ok_or_else(|| Error::Vocab(format!("missing reserved token {EOS_TOKEN}")))?;
        let splitting = if tokens
            .iter()
            .filter(|t| t.as_str() != EOS_TOKEN)
            .all(|t| t.chars().count() == 1)
        {
            Splitting::Chars
        } else {
            Splitting::Whitespace
        };
        Ok(Vocab {
            tokens,
            index,
            eos,
            splitting,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn splitting(&self) -> Splitting {
        self.splitting
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Splits `text` and maps every piece to its id. On failure returns the
    /// offending token string.
    pub fn encode(&self, text: &str) -> std::result::Result<Vec<TokenId>, String> {
        match self.splitting {
            Splitting::Chars => {
                let mut out = Vec::new();
                let mut rest = text;
                while !rest.is_empty() {
                    if let Some(tail) = rest.strip_prefix(EOS_TOKEN) {
                        out.push(self.eos);
                        rest = tail;
                        continue;
                    }
                    let c = rest.chars().next().expect("nonempty");
                    let mut buf = [0u8; 4];
                    let s: &str = c.encode_utf8(&mut buf);
                    out.push(self.id(s).ok_or_else(|| s.to_string())?);
                    rest = &rest[c.len_utf8()..];
                }
                Ok(out)
            }
            Splitting::Whitespace => text
                .split_whitespace()
                .map(|t| self.id(t).ok_or_else(|| t.to_string()))
                .collect(),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let sep = match self.splitting {
            Splitting::Chars => "",
            Splitting::Whitespace => " ",
        };
        ids.iter()
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(sep)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(str::to_string).collect();
        Vocab::new(tokens)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// `<eos>` followed by `size - 1` whitespace-split tokens `t00`, `t01`, ...
    pub fn synthetic(size: usize) -> Result<Self> {
        let width = format!("{}", size.saturating_sub(2)).len().max(2);
        let mut tokens = vec![EOS_TOKEN.to_string()];
        tokens.extend((0..size.saturating_sub(1)).map(|i| format!("t{i:0width$}")));
        Vocab::new(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub input: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub topic: Option<usize>,
}

impl Example {
    pub fn check(&self, vocab: &Vocab) -> Result<()> {
        if self.output.is_empty() {
            return Err(Error::Input(format!(
                "example {} has an empty output",
                self.id
            )));
        }
        if let Some(&bad) = self
            .input
            .iter()
            .chain(&self.output)
            .find(|&&t| t >= vocab.len())
        {
            return Err(Error::Input(format!(
                "example {} has token id {bad} outside vocabulary of size {}",
                self.id,
                vocab.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    input: String,
    output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topic: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

impl Corpus {
    /// Examples must carry ids `0..N` in order.
    pub fn new(vocab: Vocab, examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.id != i {
                return Err(Error::Input(format!(
                    "corpus ids must be 0..N in order; found {} at position {i}",
                    ex.id
                )));
            }
            ex.check(&vocab)?;
        }
        Ok(Corpus { vocab, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_topics(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.topic.is_some())
    }

    pub fn subset(&self, ids: &[usize]) -> Vec<Example> {
        ids.iter().map(|&i| self.examples[i].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub vocab: Vocab,
    pub queries: Vec<Example>,
}

impl QuerySet {
    pub fn new(vocab: Vocab, queries: Vec<Example>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Size("query set must hold at least one query".into()));
        }
        let mut seen = BTreeSet::new();
        for q in &queries {
            if !seen.insert(q.id) {
                return Err(Error::Input(format!("duplicate query id {}", q.id)));
            }
            q.check(&vocab)?;
        }
        Ok(QuerySet { vocab, queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Reads line-delimited records. Missing ids are assigned the record's
/// ordinal position, and records are returned sorted by id.
pub fn load_examples(path: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_examples(&text, vocab)
}

pub fn parse_examples(text: &str, vocab: &Vocab) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let encode = |s: &str| {
            vocab.encode(s).map_err(|token| Error::UnknownToken {
                token,
                line: line_no,
            })
        };
        let ex = Example {
            id: rec.id.unwrap_or(examples.len()),
            input: encode(&rec.input)?,
            output: encode(&rec.output)?,
            topic: rec.topic,
        };
        if ex.output.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty output".into(),
            });
        }
        examples.push(ex);
    }
    examples.sort_by_key(|e| e.id);
    if let Some(w) = examples.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Input(format!("duplicate example id {}", w[0].id)));
    }
    Ok(examples)
}

pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Corpus> {
    Corpus::new(vocab.clone(), load_examples(path, vocab)?)
}

pub fn load_query_set(path: &Path, vocab: &Vocab) -> Result<QuerySet> {
    QuerySet::new(vocab.clone(), load_examples(path, vocab)?)
}

pub fn render_examples(examples: &[Example], vocab: &Vocab) -> String {
    let mut out = String::new();
    for ex in examples {
        let rec = Record {
            id: Some(ex.id),
            input: vocab.decode(&ex.input),
            output: vocab.decode(&ex.output),
            topic: ex.topic,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_examples(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(render_examples(examples, vocab).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_examples(path, &corpus.examples, &corpus.vocab)
}

/// Parameters of a planted-topic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_topics: usize,
    pub n_per_topic: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Token ids preferred by `topic`. Subsets are disjoint, equally sized and
/// never contain `<eos>` (id 0 in a synthetic vocabulary).
pub fn topic_tokens(n_topics: usize, vocab_size: usize, topic: usize) -> std::ops::Range<TokenId> {
    let width = (vocab_size - 1) / n_topics;
    1 + topic * width..1 + (topic + 1) * width
}

/// Generates a corpus where examples of topic `t` draw each input and output
/// token from topic `t`'s subset with probability [`TOPIC_MASS`] and
/// uniformly over the non-reserved vocabulary otherwise. Inside a subset the
/// weights decay geometrically so every topic has a clear mode.
pub fn synthesize_planted_corpus(spec: &PlantedSpec) -> Result<Corpus> {
    let examples = planted_examples(spec, 0)?;
    Corpus::new(Vocab::synthetic(spec.vocab_size)?, examples)
}

/// Planted examples with ids starting at `first_id`; used for both corpora
/// and held-out prompt sets.
pub fn planted_examples(spec: &PlantedSpec, first_id: usize) -> Result<Vec<Example>> {
    if spec.n_topics < 2 {
        return Err(Error::Config(format!(
            "planted corpus needs at least 2 topics, got {}",
            spec.n_topics
        )));
    }
    if spec.vocab_size < 2 * spec.n_topics {
        return Err(Error::Config(format!(
            "vocab_size {} is too small for {} disjoint topic subsets (need >= {})",
            spec.vocab_size,
            spec.n_topics,
            2 * spec.n_topics
        )));
    }
    if spec.seq_len == 0 {
        return Err(Error::Config("seq_len must be at least 1".into()));
    }
    let subsets: Vec<_> = (0..spec.n_topics)
        .map(|t| topic_tokens(spec.n_topics, spec.vocab_size, t))
        .collect();
    let width = subsets[0].len();
    let weights: Vec<f64> = (0..width)
        .map(|i| WITHIN_TOPIC_DECAY.powi(i as i32))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(width);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }

    let mut rng = seed::rng(spec.seed);
    let draw = |topic: usize, rng: &mut rand_chacha::ChaCha8Rng| -> TokenId {
        if rng.random::<f64>() < TOPIC_MASS {
            let u: f64 = rng.random();
            let pos = cdf.iter().position(|&c| u < c).unwrap_or(width - 1);
            subsets[topic].start + pos
        } else {
            rng.random_range(1..spec.vocab_size)
        }
    };
    let n = spec.n_topics * spec.n_per_topic;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let topic = i % spec.n_topics;
        let input = (0..spec.seq_len).map(|_| draw(topic, &mut rng)).collect();
        let output = (0..spec.seq_len).map(|_| draw(topic, &mut rng)).collect();
        examples.push(Example {
            id: first_id + i,
            input,
            output,
            topic: Some(topic),
        });
    }
    Ok(examples)
}

/// Holds out `n_candidates` examples as test queries: one per planted topic
/// (when topics exist), then uniform draws from the remainder. Returns the
/// reduced training corpus (ids renumbered densely) and the query set, whose
/// ids continue after the last training id.
pub fn synthesize_query_set(
    corpus: &Corpus,
    n_candidates: usize,
    seed_value: u64,
) -> Result<(Corpus, QuerySet)> {
    let n = corpus.len();
    if n_candidates == 0 {
        return Err(Error::Size("n_candidates must be at least 1".into()));
    }
    if n_candidates > n {
        return Err(Error::Size(format!(
            "cannot hold out {n_candidates} queries from a corpus of {n}"
        )));
    }
    let mut rng = seed::rng(seed_value);
    let mut picked: Vec<usize> = Vec::with_capacity(n_candidates);
    if corpus.has_topics() {
        let topics: BTreeSet<usize> = corpus.examples.iter().filter_map(|e| e.topic).collect();
        if n_candidates < topics.len() {
            return Err(Error::Config(format!(
                "n_candidates {n_candidates} is below the number of topics {}",
                topics.len()
            )));
        }
        for t in topics {
            let members: Vec<usize> = corpus
                .examples
                .iter()
                .filter(|e| e.topic == Some(t))
                .map(|e| e.id)
                .collect();
            picked.push(*members.choose(&mut rng).expect("topic has members"));
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|i| !picked.contains(i)).collect();
    rest.shuffle(&mut rng);
    picked.extend(rest.into_iter().take(n_candidates - picked.len()));

    let held: BTreeSet<usize> = picked.iter().copied().collect();
    let train: Vec<Example> = corpus
        .examples
        .iter()
        .filter(|e| !held.contains(&e.id))
        .enumerate()
        .map(|(i, e)| Example { id: i, ..e.clone() })
        .collect();
    let offset = train.len();
    let queries = picked
        .iter()
        .enumerate()
        .map(|(j, &i)| Example {
            id: offset + j,
            ..corpus.examples[i].clone()
        })
        .collect();
    Ok((
        Corpus::new(corpus.vocab.clone(), train)?,
        QuerySet::new(corpus.vocab.clone(), queries)?,
    ))
}
