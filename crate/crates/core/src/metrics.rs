//! Corpus-level caption evaluation: BLEU-1..4, ROUGE-L, CIDEr.

use std::collections::HashMap;

use crate::decoding::{beam_search, DecodeConfig};
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::text::{Corpus, Vocabulary, END_ID};

/// One candidate caption scored against its reference set.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn validate(&self) -> Result<()> {
        if self.candidate.is_empty() {
            return Err(Error::Data(format!("pair {}: empty candidate", self.id)));
        }
        if self.references.is_empty() || self.references.iter().any(|r| r.is_empty()) {
            return Err(Error::Data(format!("pair {}: empty reference", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    /// BLEU-1 through BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub pairs: usize,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn summary(&self) -> String {
        format!(
            "pairs\t{}\nBLEU-1\t{:.4}\nBLEU-2\t{:.4}\nBLEU-3\t{:.4}\nBLEU-4\t{:.4}\nROUGE-L\t{:.4}\nCIDEr\t{:.4}",
            self.pairs,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            self.cider
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped modified precisions and brevity penalty,
/// no smoothing. Returns BLEU-1 through BLEU-max_n.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Data("bleu: empty pair list".into()));
    }
    for p in pairs {
        p.validate()?;
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for pair in pairs {
        cand_len += pair.candidate.len();
        // effective reference length: closest to the candidate, shorter on ties
        ref_len += pair
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let d = (l as i64 - pair.candidate.len() as i64).unsigned_abs();
                (d, l)
            })
            .unwrap();
        for n in 1..=max_n {
            let cand = ngram_counts(&pair.candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &pair.references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand {
                total[n - 1] += c;
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    let bp = if cand_len > ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut log_sum = 0.0;
        let mut zero = false;
        for k in 0..n {
            if matched[k] == 0 || total[k] == 0 {
                zero = true;
                break;
            }
            log_sum += (matched[k] as f64 / total[k] as f64).ln();
        }
        scores.push(if zero { 0.0 } else { bp * (log_sum / n as f64).exp() });
    }
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_pair(pair: &EvalPair, beta: f64) -> f64 {
    pair.references
        .iter()
        .map(|r| {
            let l = lcs_len(&pair.candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let recall = l / r.len() as f64;
            let precision = l / pair.candidate.len() as f64;
            (1.0 + beta * beta) * recall * precision / (recall + beta * beta * precision)
        })
        .fold(0.0, f64::max)
}

/// Mean per-pair LCS F-measure with recall-weighted beta.
pub fn rouge_l(pairs: &[EvalPair], beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("rouge_l: empty pair list".into()));
    }
    for p in pairs {
        p.validate()?;
    }
    let sum: f64 = pairs.iter().map(|p| rouge_l_pair(p, beta)).sum();
    Ok(sum / pairs.len() as f64)
}

type NgramKey = Vec<String>;

fn tfidf_vector(tokens: &[String], n: usize, idf: &HashMap<NgramKey, f64>) -> HashMap<NgramKey, f64> {
    let mut tf: HashMap<NgramKey, f64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *tf.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    let total: f64 = tf.values().sum();
    if total > 0.0 {
        for (g, v) in tf.iter_mut() {
            *v = (*v / total) * idf.get(g).copied().unwrap_or(0.0);
        }
    }
    tf
}

fn cosine(a: &HashMap<NgramKey, f64>, b: &HashMap<NgramKey, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Original CIDEr: TF-IDF n-gram cosine averaged over n = 1..max_n and
/// over reference sets, scaled by 10. IDF comes from the reference side
/// of the evaluation corpus itself. Returns per-pair scores; the corpus
/// score is their mean.
pub fn cider_per_pair(pairs: &[EvalPair], max_n: usize) -> Result<(Vec<f64>, Vec<String>)> {
    if pairs.is_empty() {
        return Err(Error::Data("cider: empty pair list".into()));
    }
    for p in pairs {
        p.validate()?;
    }
    let mut warnings = Vec::new();
    if pairs.len() < 2 {
        warnings.push(
            "CIDEr: single-pair corpus gives all-zero IDF weights; score defined as 0".into(),
        );
        return Ok((vec![0.0; pairs.len()], warnings));
    }
    // document frequency counts images whose reference set contains the n-gram
    let mut idf_by_n: Vec<HashMap<NgramKey, f64>> = Vec::with_capacity(max_n);
    let num_images = pairs.len() as f64;
    for n in 1..=max_n {
        let mut df: HashMap<NgramKey, usize> = HashMap::new();
        for pair in pairs {
            let mut seen: Vec<NgramKey> = Vec::new();
            for r in &pair.references {
                if r.len() >= n {
                    for w in r.windows(n) {
                        seen.push(w.to_vec());
                    }
                }
            }
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        idf_by_n.push(
            df.into_iter()
                .map(|(g, d)| (g, (num_images / d as f64).ln()))
                .collect(),
        );
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut acc = 0.0;
        for n in 1..=max_n {
            let idf = &idf_by_n[n - 1];
            let cand = tfidf_vector(&pair.candidate, n, idf);
            let ref_sum: f64 = pair
                .references
                .iter()
                .map(|r| cosine(&cand, &tfidf_vector(r, n, idf)))
                .sum();
            acc += ref_sum / pair.references.len() as f64;
        }
        scores.push(10.0 * acc / max_n as f64);
    }
    Ok((scores, warnings))
}

pub fn cider(pairs: &[EvalPair], max_n: usize) -> Result<(f64, Vec<String>)> {
    let (scores, warnings) = cider_per_pair(pairs, max_n)?;
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, warnings))
}

/// Score a fixed pair set with the full battery.
pub fn score_pairs(pairs: &[EvalPair]) -> Result<MetricReport> {
    let b = bleu(pairs, 4)?;
    let r = rouge_l(pairs, 1.2)?;
    let (c, warnings) = cider(pairs, 4)?;
    Ok(MetricReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: r,
        cider: c,
        pairs: pairs.len(),
        warnings,
    })
}

/// Evaluation output: corpus report plus a per-image breakdown, one
/// tab-separated line per scored image.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub breakdown: Vec<String>,
    /// Images skipped because their features failed to load.
    pub failed: Vec<String>,
}

/// Decode every test image and score the generated captions against the
/// corpus references. Images whose features cannot be loaded are skipped
/// and listed; the report covers the scored subset.
pub fn evaluate<G, H>(
    params: &ModelParams<f32>,
    test: &Corpus,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    mut load_feature: G,
    mut lookup_guide: H,
) -> Result<Evaluation>
where
    G: FnMut(&str) -> Result<Vec<f32>>,
    H: FnMut(&str) -> Result<Option<Vec<f32>>>,
{
    let mut pairs = Vec::new();
    let mut failed = Vec::new();
    for s in &test.samples {
        let feature = match load_feature(&s.feature_path) {
            Ok(f) => f,
            Err(e) => {
                failed.push(format!("{}: {e}", s.id));
                continue;
            }
        };
        let guide = lookup_guide(&s.id)?;
        let ranked = beam_search(params, &feature, guide.as_deref(), decode)?;
        let mut candidate = Vec::new();
        for &id in &ranked[0].0 {
            if id == END_ID {
                break;
            }
            let t = vocab
                .token(id)
                .ok_or_else(|| Error::Data(format!("decoded id {id} not in vocabulary")))?;
            candidate.push(t.to_string());
        }
        if candidate.is_empty() {
            // score an empty generation as a single unmatched placeholder
            candidate.push(crate::text::UNK_TOKEN.to_string());
        }
        pairs.push(EvalPair {
            id: s.id.clone(),
            candidate,
            references: vec![s.caption.tokens.clone()],
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "evaluate: no image could be scored ({} feature failures)",
            failed.len()
        )));
    }
    let mut report = score_pairs(&pairs)?;
    if !failed.is_empty() {
        report
            .warnings
            .push(format!("{} image(s) skipped for missing features", failed.len()));
    }
    let (cider_each, _) = cider_per_pair(&pairs, 4)?;
    let mut breakdown = Vec::with_capacity(pairs.len());
    for (pair, cid) in pairs.iter().zip(&cider_each) {
        let one = std::slice::from_ref(pair);
        let b = bleu(one, 4)?;
        let r = rouge_l(one, 1.2)?;
        breakdown.push(format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            pair.id,
            pair.candidate.join(" "),
            b[0],
            b[1],
            b[2],
            b[3],
            r,
            cid
        ));
    }
    Ok(Evaluation {
        report,
        breakdown,
        failed,
    })
}
