//! Guiding-textual-feature extraction: generate a short description with
//! the base model, then vectorize it with one of the word-vector sources
//! crossed with average or TF-IDF fusion.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use crate::decoding::{top1_sentence, DecodeConfig};
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::SeededRng;
use crate::text::{Corpus, Vocabulary};

/// Where a word-vector table came from. Each source has a fixed dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordSource {
    /// Pretrained global vectors loaded from a text file; 50-dim variant.
    Pretrained50,
    /// Pretrained global vectors, 300-dim variant.
    Pretrained300,
    /// Skip-gram vectors trained locally on the corpus text, 128-dim.
    Local128,
    /// The base model's embedding columns reused directly, 1,024-dim.
    Embedding1024,
}

impl WordSource {
    pub fn dim(self) -> usize {
        match self {
            WordSource::Pretrained50 => 50,
            WordSource::Pretrained300 => 300,
            WordSource::Local128 => 128,
            WordSource::Embedding1024 => 1024,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WordSource::Pretrained50 => "pretrained-50",
            WordSource::Pretrained300 => "pretrained-300",
            WordSource::Local128 => "local-128",
            WordSource::Embedding1024 => "embedding-1024",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Average,
    Tfidf,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Average => "average",
            Fusion::Tfidf => "tfidf",
        }
    }
}

/// One of the eight vectorization schemes (4 sources × 2 fusions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorScheme {
    pub source: WordSource,
    pub fusion: Fusion,
}

impl VectorScheme {
    pub fn dim(self) -> usize {
        self.source.dim()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (src, fus) = s
            .split_once('+')
            .ok_or_else(|| Error::Config(format!("scheme '{s}': expected source+fusion")))?;
        let source = match src {
            "pretrained-50" => WordSource::Pretrained50,
            "pretrained-300" => WordSource::Pretrained300,
            "local-128" => WordSource::Local128,
            "embedding-1024" => WordSource::Embedding1024,
            other => return Err(Error::Config(format!("unknown word-vector source '{other}'"))),
        };
        let fusion = match fus {
            "average" => Fusion::Average,
            "tfidf" => Fusion::Tfidf,
            other => return Err(Error::Config(format!("unknown fusion '{other}'"))),
        };
        Ok(Self { source, fusion })
    }
}

impl fmt::Display for VectorScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.source.name(), self.fusion.name())
    }
}

/// token → vector map with a uniform dimension.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    vectors: BTreeMap<String, Vec<f32>>,
    dim: usize,
    pub source: WordSource,
}

impl WordVectorTable {
    pub fn new(dim: usize, source: WordSource) -> Self {
        Self {
            vectors: BTreeMap::new(),
            dim,
            source,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.vectors.get(token).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, token: String, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension(format!(
                "vector for '{token}' has {} dims, table expects {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token, vector);
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(|s| s.as_str())
    }
}

/// Parse the common plain-text vector format: one row per token,
/// `token v1 v2 … vd`, single-space separated.
pub fn load_pretrained_vectors(path: &Path, expect_dim: usize, source: WordSource) -> Result<WordVectorTable> {
    parse_pretrained_vectors(&std::fs::read_to_string(path)?, expect_dim, source)
}

pub fn parse_pretrained_vectors(
    text: &str,
    expect_dim: usize,
    source: WordSource,
) -> Result<WordVectorTable> {
    let mut table = WordVectorTable::new(expect_dim, source);
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let token = parts.next().unwrap().to_string();
        let values: std::result::Result<Vec<f32>, _> = parts.map(|p| p.parse::<f32>()).collect();
        let values = values.map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("non-numeric vector component for token '{token}'"),
        })?;
        if values.len() != expect_dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!(
                    "token '{token}' has {} components, expected {expect_dim}",
                    values.len()
                ),
            });
        }
        if table.get(&token).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate token '{token}'"),
            });
        }
        table.insert(token, values)?;
    }
    Ok(table)
}

/// Skip-gram with negative sampling configuration.
#[derive(Debug, Clone)]
pub struct Word2vecConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_count: u64,
    pub seed: u64,
}

impl Default for Word2vecConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_count: 3,
            seed: 1,
        }
    }
}

/// Train skip-gram-with-negative-sampling vectors on the corpus captions.
/// Single-threaded and deterministic per seed.
pub fn train_local_vectors(corpus: &Corpus, config: &Word2vecConfig) -> Result<WordVectorTable> {
    if corpus.samples.is_empty() {
        return Err(Error::Data("train_local_vectors: empty corpus".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in &corpus.samples {
        for t in &s.caption.tokens {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= config.min_count)
        .collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if vocab.is_empty() {
        return Err(Error::Data(
            "train_local_vectors: no token meets the minimum count".into(),
        ));
    }
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, &(t, _))| (t, i)).collect();
    let n = vocab.len();
    let d = config.dim;

    // unigram^0.75 negative-sampling table (cumulative weights)
    let mut cumulative = Vec::with_capacity(n);
    let mut total = 0.0f64;
    for &(_, c) in &vocab {
        total += (c as f64).powf(0.75);
        cumulative.push(total);
    }

    let mut rng = SeededRng::new(config.seed);
    let scale = 0.5 / d as f64;
    let mut input: Vec<f32> = (0..n * d)
        .map(|_| ((rng.next_unit() * 2.0 - 1.0) * scale) as f32)
        .collect();
    let mut output: Vec<f32> = vec![0.0; n * d];

    let sentences: Vec<Vec<usize>> = corpus
        .samples
        .iter()
        .map(|s| {
            s.caption
                .tokens
                .iter()
                .filter_map(|t| index.get(t.as_str()).copied())
                .collect()
        })
        .collect();

    let lr = config.learning_rate as f32;
    let mut grad = vec![0.0f32; d];
    for _epoch in 0..config.epochs {
        for sent in &sentences {
            for (pos, &center) in sent.iter().enumerate() {
                let b = 1 + rng.next_below(config.window as u64) as usize;
                let lo = pos.saturating_sub(b);
                let hi = (pos + b + 1).min(sent.len());
                for ctx_pos in lo..hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = sent[ctx_pos];
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    // positive pair plus sampled negatives
                    for neg in 0..=config.negatives {
                        let (target, label) = if neg == 0 {
                            (context, 1.0f32)
                        } else {
                            let r = rng.next_unit() * total;
                            let idx = cumulative.partition_point(|&c| c < r).min(n - 1);
                            if idx == context {
                                continue;
                            }
                            (idx, 0.0)
                        };
                        let vi = &input[center * d..(center + 1) * d];
                        let uo = &output[target * d..(target + 1) * d];
                        let dot: f32 = vi.iter().zip(uo).map(|(a, b)| a * b).sum();
                        let g = (1.0 / (1.0 + (-dot).exp()) - label) * lr;
                        for k in 0..d {
                            grad[k] += g * uo[k];
                        }
                        let vi_copy: Vec<f32> = vi.to_vec();
                        let uo = &mut output[target * d..(target + 1) * d];
                        for k in 0..d {
                            uo[k] -= g * vi_copy[k];
                        }
                    }
                    let vi = &mut input[center * d..(center + 1) * d];
                    for k in 0..d {
                        vi[k] -= grad[k];
                    }
                }
            }
        }
    }

    let mut table = WordVectorTable::new(d, WordSource::Local128);
    for (i, &(t, _)) in vocab.iter().enumerate() {
        table.insert(t.to_string(), input[i * d..(i + 1) * d].to_vec())?;
    }
    Ok(table)
}

/// Reuse the trained embedding columns as word vectors. Reserved tokens
/// are excluded.
pub fn embedding_vectors(params: &ModelParams<f32>, vocab: &Vocabulary) -> Result<WordVectorTable> {
    let d = params.dims.embed;
    let mut table = WordVectorTable::new(d, WordSource::Embedding1024);
    let mut column = vec![0.0f32; d];
    for (id, token) in vocab.tokens().iter().enumerate().skip(3) {
        params.w_embed.column(id, &mut column);
        table.insert(token.clone(), column.clone())?;
    }
    Ok(table)
}

/// token → smoothed inverse document frequency over a reference corpus,
/// with each caption treated as one document.
#[derive(Debug, Clone)]
pub struct IdfTable {
    idf: HashMap<String, f64>,
    num_docs: usize,
}

impl IdfTable {
    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// idf(w) = ln((1+N)/(1+df(w))) + 1; unseen tokens take df = 0.
    pub fn get(&self, token: &str) -> f64 {
        self.idf
            .get(token)
            .copied()
            .unwrap_or_else(|| ((1.0 + self.num_docs as f64) / 1.0).ln() + 1.0)
    }
}

pub fn compute_idf(corpus: &Corpus) -> IdfTable {
    let n = corpus.samples.len();
    let mut df: HashMap<String, usize> = HashMap::new();
    for s in &corpus.samples {
        let mut seen: Vec<&str> = s.caption.tokens.iter().map(|t| t.as_str()).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t.to_string()).or_default() += 1;
        }
    }
    let idf = df
        .into_iter()
        .map(|(t, d)| (t, ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0))
        .collect();
    IdfTable { idf, num_docs: n }
}

/// Unweighted mean of the in-table token vectors. Out-of-table tokens are
/// skipped, not zero-filled; their count is returned for diagnostics.
pub fn fuse_average(tokens: &[String], table: &WordVectorTable) -> Result<(Vec<f32>, usize)> {
    // accumulate in f64 so the result does not depend on visit order
    let mut sum = vec![0.0f64; table.dim()];
    let mut hits = 0usize;
    let mut skipped = 0usize;
    for t in tokens {
        match table.get(t) {
            Some(v) => {
                hits += 1;
                for (s, &x) in sum.iter_mut().zip(v) {
                    *s += x as f64;
                }
            }
            None => skipped += 1,
        }
    }
    if hits == 0 {
        return Err(Error::Degenerate(
            "fuse_average: no token found in the vector table".into(),
        ));
    }
    let inv = 1.0 / hits as f64;
    Ok((sum.iter().map(|s| (s * inv) as f32).collect(), skipped))
}

/// Σ tf(w)·idf(w)·vec(w) / Σ tf(w)·idf(w) with raw in-sentence counts.
pub fn fuse_tfidf(
    tokens: &[String],
    table: &WordVectorTable,
    idf: &IdfTable,
) -> Result<(Vec<f32>, usize)> {
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    let mut skipped = 0usize;
    for t in tokens {
        if table.get(t).is_some() {
            *tf.entry(t.as_str()).or_default() += 1;
        } else {
            skipped += 1;
        }
    }
    let mut sum = vec![0.0f64; table.dim()];
    let mut total_weight = 0.0f64;
    for (token, count) in tf {
        let w = count as f64 * idf.get(token);
        total_weight += w;
        let v = table.get(token).unwrap();
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += w * x as f64;
        }
    }
    if total_weight <= 0.0 {
        return Err(Error::Degenerate(
            "fuse_tfidf: zero total weight".into(),
        ));
    }
    Ok((
        sum.iter().map(|s| (s / total_weight) as f32).collect(),
        skipped,
    ))
}

/// A fixed-length vector encoding the top-1 generated short description.
#[derive(Debug, Clone)]
pub struct GuidingFeature {
    pub vector: Vec<f32>,
    pub scheme: String,
    pub tokens: Vec<String>,
    /// Set when the generated sentence was empty or had no in-table token;
    /// the vector is all zeros in that case.
    pub degenerate: bool,
}

/// Everything needed to vectorize a generated sentence under one scheme.
pub struct SchemeContext<'a> {
    pub scheme: VectorScheme,
    pub table: &'a WordVectorTable,
    /// Required for TF-IDF fusion.
    pub idf: Option<&'a IdfTable>,
}

impl<'a> SchemeContext<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.table.dim() != self.scheme.dim() {
            return Err(Error::Config(format!(
                "scheme {} expects {}-dim vectors, table has {}",
                self.scheme,
                self.scheme.dim(),
                self.table.dim()
            )));
        }
        if self.scheme.fusion == Fusion::Tfidf && self.idf.is_none() {
            return Err(Error::Config("TF-IDF fusion requires an IDF table".into()));
        }
        Ok(())
    }

    pub fn fuse(&self, tokens: &[String]) -> Result<(Vec<f32>, usize)> {
        match self.scheme.fusion {
            Fusion::Average => fuse_average(tokens, self.table),
            Fusion::Tfidf => fuse_tfidf(tokens, self.table, self.idf.expect("validated")),
        }
    }
}

/// Generate the top-1 sentence for an image with the base model and
/// vectorize it. Degenerate sentences yield a zero vector with a flag.
pub fn extract_gtf(
    mlstm: &ModelParams<f32>,
    image: &[f32],
    vocab: &Vocabulary,
    ctx: &SchemeContext<'_>,
    decode: &DecodeConfig,
) -> Result<GuidingFeature> {
    ctx.validate()?;
    let tokens = top1_sentence(mlstm, image, vocab, decode)?;
    let (vector, degenerate) = if tokens.is_empty() {
        (vec![0.0; ctx.scheme.dim()], true)
    } else {
        match ctx.fuse(&tokens) {
            Ok((v, _skipped)) => (v, false),
            Err(Error::Degenerate(_)) => (vec![0.0; ctx.scheme.dim()], true),
            Err(e) => return Err(e),
        }
    };
    Ok(GuidingFeature {
        vector,
        scheme: ctx.scheme.to_string(),
        tokens,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// guiding-feature cache

const CACHE_MAGIC: &[u8; 4] = b"SGTF";

/// Persisted guiding features, one per image id, in input order.
#[derive(Debug, Clone)]
pub struct GtfCache {
    pub scheme: String,
    pub dim: usize,
    pub records: Vec<(String, Vec<f32>)>,
}

impl GtfCache {
    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.records
            .iter()
            .find(|(rid, _)| rid == id)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_guide_map(&self) -> HashMap<String, Vec<f32>> {
        self.records.iter().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(self.scheme.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.scheme.as_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, v) in &self.records {
            if v.len() != self.dim {
                return Err(Error::Dimension(format!(
                    "cache record {id}: {} dims, cache expects {}",
                    v.len(),
                    self.dim
                )));
            }
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Data(format!(
                    "guiding-feature cache truncated reading {what} at offset {pos}",
                    pos = *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4, "magic")? != CACHE_MAGIC {
            return Err(Error::Data("not a guiding-feature cache (bad magic)".into()));
        }
        let scheme_len =
            u32::from_le_bytes(take(&mut pos, 4, "scheme length")?.try_into().unwrap()) as usize;
        let scheme = String::from_utf8(take(&mut pos, scheme_len, "scheme")?.to_vec())
            .map_err(|_| Error::Data("cache scheme descriptor is not UTF-8".into()))?;
        let dim = u32::from_le_bytes(take(&mut pos, 4, "dimension")?.try_into().unwrap()) as usize;
        let mut records = Vec::new();
        while pos < bytes.len() {
            let last_id = records
                .last()
                .map(|(id, _): &(String, Vec<f32>)| id.clone())
                .unwrap_or_else(|| "<none>".into());
            let id_len = u32::from_le_bytes(
                take(&mut pos, 4, "record id length")?
                    .try_into()
                    .unwrap(),
            ) as usize;
            let id = String::from_utf8(
                take(&mut pos, id_len, "record id")
                    .map_err(|_| {
                        Error::Data(format!(
                            "cache corrupt after record for image {last_id}"
                        ))
                    })?
                    .to_vec(),
            )
            .map_err(|_| Error::Data(format!("cache id after {last_id} is not UTF-8")))?;
            let raw = take(&mut pos, dim * 4, "record floats").map_err(|_| {
                Error::Data(format!("cache corrupt in record for image {id}"))
            })?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((id, v));
        }
        Ok(Self {
            scheme,
            dim,
            records,
        })
    }
}

/// Compute a guiding feature for every sample in the long-description
/// corpus and persist them. Any per-record failure refuses the whole
/// cache; the error list names each failing image.
pub fn build_gtf_cache<G>(
    mlstm: &ModelParams<f32>,
    corpus_l: &Corpus,
    vocab: &Vocabulary,
    ctx: &SchemeContext<'_>,
    decode: &DecodeConfig,
    mut load_feature: G,
    path: &Path,
) -> Result<GtfCache>
where
    G: FnMut(&str) -> Result<Vec<f32>>,
{
    ctx.validate()?;
    let mut records = Vec::with_capacity(corpus_l.samples.len());
    let mut failures = Vec::new();
    for s in &corpus_l.samples {
        let feature = match load_feature(&s.feature_path) {
            Ok(f) => f,
            Err(e) => {
                failures.push(format!("{}: {e}", s.id));
                continue;
            }
        };
        match extract_gtf(mlstm, &feature, vocab, ctx, decode) {
            Ok(g) => records.push((s.id.clone(), g.vector)),
            Err(e) => failures.push(format!("{}: {e}", s.id)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Data(format!(
            "guiding-feature extraction failed for {} image(s): {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    let cache = GtfCache {
        scheme: ctx.scheme.to_string(),
        dim: ctx.scheme.dim(),
        records,
    };
    cache.save(path)?;
    Ok(cache)
}
