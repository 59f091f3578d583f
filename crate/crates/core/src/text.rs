//! Tokenization, vocabulary construction, encoding, and length-based
//! corpus splitting for noisy user-written descriptions.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

pub const START_ID: usize = 0;
pub const END_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// Emoticons kept verbatim as single tokens. Fixed inventory; matching is
/// case-sensitive against the whitespace-delimited chunk.
pub const EMOTICONS: &[&str] = &[
    ":-)", ":-(", ":-P", ":-p", ":-D", ":-/", ":-|", ":)", ":(", ":P", ":D", ";-)", ";)", "<3",
];

/// Sentence punctuation emitted as standalone tokens.
const SENTENCE_PUNCT: &[char] = &[',', '.', '!', '?'];

/// Lowercase and split into tokens. Intra-word apostrophes and hyphens are
/// preserved ("macy's", "sight-seeing"), alphanumerics survive ("5th"),
/// `, . ! ?` become standalone tokens, listed emoticons stay whole, and
/// exaggerated spellings pass through verbatim.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if EMOTICONS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        tokenize_chunk(&chunk.to_lowercase(), &mut out);
    }
    out
}

fn tokenize_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            word.push(c);
        } else if (c == '\'' || c == '-')
            && !word.is_empty()
            && i + 1 < chars.len()
            && chars[i + 1].is_alphanumeric()
        {
            // intra-word only; leading/trailing are stripped
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if SENTENCE_PUNCT.contains(&c) {
                out.push(c.to_string());
            }
            // any other punctuation is dropped
        }
        i += 1;
    }
    if !word.is_empty() {
        out.push(word);
    }
}

/// One description: raw text, its token list, and the raw whitespace word
/// count used for the short/long split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Caption {
    pub raw: String,
    pub tokens: Vec<String>,
    /// Whitespace-delimited words of the raw text, counted before
    /// punctuation isolation. This is the quantity the split threshold
    /// compares against.
    pub word_count: usize,
}

impl Caption {
    pub fn new(raw: &str) -> Self {
        Self {
            raw: raw.to_string(),
            tokens: tokenize(raw),
            word_count: raw.split_whitespace().count(),
        }
    }
}

/// One corpus record: image id, path to its feature file, caption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub feature_path: String,
    pub caption: Caption,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

/// Raw on-disk record: one JSON object per line with these exact fields.
#[derive(Debug, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub caption: String,
    pub feature_path: String,
}

/// Ordered regex scrub rules, one `pattern<TAB>replacement` per line.
/// Lines starting with `#` and blank lines are skipped.
pub struct ScrubRules {
    rules: Vec<(Regex, String)>,
}

impl ScrubRules {
    pub fn empty() -> Self {
        Self { rules: Vec::new() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (pat, repl) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected pattern<TAB>replacement".into(),
            })?;
            let re = Regex::new(pat).map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad pattern: {e}"),
            })?;
            rules.push((re, repl.to_string()));
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply(&self, text: &str) -> String {
        let mut s = text.to_string();
        for (re, repl) in &self.rules {
            s = re.replace_all(&s, repl.as_str()).into_owned();
        }
        s
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct IngestStats {
    pub read: usize,
    pub kept: usize,
    pub dropped_invalid_caption: usize,
    pub malformed_lines: Vec<usize>,
    pub duplicate_ids: Vec<String>,
}

/// Read a line-delimited corpus file, apply scrub rules, and drop records
/// whose description is empty after cleaning. Duplicate ids are rejected.
pub fn ingest<R: BufRead>(reader: R, rules: &ScrubRules) -> Result<(Corpus, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut seen = HashMap::new();
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.read += 1;
        let rec: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                stats.malformed_lines.push(i + 1);
                continue;
            }
        };
        if seen.insert(rec.id.clone(), ()).is_some() {
            stats.duplicate_ids.push(rec.id.clone());
            continue;
        }
        let cleaned = rules.apply(&rec.caption);
        let caption = Caption::new(&cleaned);
        if caption.tokens.is_empty() {
            stats.dropped_invalid_caption += 1;
            continue;
        }
        stats.kept += 1;
        samples.push(Sample {
            id: rec.id,
            feature_path: rec.feature_path,
            caption,
        });
    }
    Ok((Corpus { samples }, stats))
}

pub fn ingest_file(path: &Path, rules: &ScrubRules) -> Result<(Corpus, IngestStats)> {
    let file = std::fs::File::open(path)?;
    ingest(std::io::BufReader::new(file), rules)
}

/// Write a corpus back out in the line-delimited record format.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &corpus.samples {
        let rec = RawRecord {
            id: s.id.clone(),
            caption: s.caption.raw.clone(),
            feature_path: s.feature_path.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Bidirectional token↔id map with training counts and the three reserved
/// tokens at fixed ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
    min_count: u64,
}

impl Vocabulary {
    /// Tokens appearing at least `min_count` times in the corpus, ids
    /// assigned by descending count with lexicographic tie-break after the
    /// reserved ids.
    pub fn build(corpus: &Corpus, min_count: u64) -> Result<Self> {
        if corpus.samples.is_empty() {
            return Err(Error::Data("build_vocab: empty corpus".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in &corpus.samples {
            for t in &s.caption.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = vec![
            START_TOKEN.to_string(),
            END_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        let mut count_list = vec![0, 0, 0];
        for (t, c) in kept {
            id_to_token.push(t.to_string());
            count_list.push(c);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            counts: count_list,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn count(&self, token: &str) -> u64 {
        self.id(token).map(|i| self.counts[i]).unwrap_or(0)
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    /// Non-reserved tokens in id order.
    pub fn content_tokens(&self) -> impl Iterator<Item = &str> {
        self.id_to_token[3..].iter().map(|s| s.as_str())
    }

    /// Stable 64-bit digest of the id assignment, used to bind checkpoints
    /// and caches to the vocabulary that produced them.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.id_to_token {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(b'\n');
        }
        fnv1a64(&bytes)
    }

    /// Map tokens to ids, wrapping with the start and end ids; OOV tokens
    /// become the unknown id.
    pub fn encode(&self, caption: &Caption) -> Vec<usize> {
        let mut ids = Vec::with_capacity(caption.tokens.len() + 2);
        ids.push(START_ID);
        for t in &caption.tokens {
            ids.push(self.id(t).unwrap_or(UNK_ID));
        }
        ids.push(END_ID);
        ids
    }

    /// Join ids back into text, stripping reserved tokens; punctuation
    /// tokens attach without a preceding space.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self
                .token(id)
                .ok_or_else(|| Error::Data(format!("decode: unknown id {id}")))?;
            if id == START_ID || id == END_ID || id == UNK_ID {
                continue;
            }
            let is_punct = token.len() == 1 && SENTENCE_PUNCT.contains(&token.chars().next().unwrap());
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(token);
        }
        Ok(out)
    }

    /// Tokens (id order, reserved first) — used for checkpoint sidecars.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuild from an id-ordered token list with counts.
    pub fn from_parts(id_to_token: Vec<String>, counts: Vec<u64>, min_count: u64) -> Result<Self> {
        if id_to_token.len() != counts.len() || id_to_token.len() < 3 {
            return Err(Error::Data("vocabulary parts inconsistent".into()));
        }
        if id_to_token[START_ID] != START_TOKEN
            || id_to_token[END_ID] != END_TOKEN
            || id_to_token[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Data("vocabulary reserved tokens out of place".into()));
        }
        let token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            counts,
            min_count,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (t, c) in self.id_to_token.iter().zip(&self.counts) {
            out.push_str(&format!("{t}\t{c}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, min_count: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (t, c) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected token<TAB>count".into(),
            })?;
            tokens.push(t.to_string());
            counts.push(c.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: "bad count".into(),
            })?);
        }
        Self::from_parts(tokens, counts, min_count)
    }
}

/// Partition by raw word count: `< threshold` goes short, the rest long.
pub fn split_corpus(corpus: &Corpus, threshold: usize) -> (Corpus, Corpus) {
    let mut short = Corpus::default();
    let mut long = Corpus::default();
    for s in &corpus.samples {
        if s.caption.word_count < threshold {
            short.samples.push(s.clone());
        } else {
            long.samples.push(s.clone());
        }
    }
    (short, long)
}

/// Description-length buckets: 1–5, 6–10, 11–15, 16–25, ≥26 words.
pub const LENGTH_BUCKETS: &[&str] = &["1-5", "6-10", "11-15", "16-25", ">=26"];

pub fn length_stats(corpus: &Corpus) -> [usize; 5] {
    let mut buckets = [0usize; 5];
    for s in &corpus.samples {
        let n = s.caption.word_count;
        let b = match n {
            0..=5 => 0,
            6..=10 => 1,
            11..=15 => 2,
            16..=25 => 3,
            _ => 4,
        };
        buckets[b] += 1;
    }
    buckets
}
