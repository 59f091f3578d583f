//! Bundled 20-sample toy fixture: ten short and ten long captions over a
//! small closed vocabulary, synthetic image features, and a matching
//! 50-dim toy word-vector file. Everything here is deterministic so the
//! shipped files can be regenerated and verified byte for byte.

use std::path::Path;

use crate::error::Result;
use crate::features::write_feature;
use crate::tensor::SeededRng;
use crate::text::{Caption, Corpus, Sample};

pub const FEATURE_DIM: usize = 2048;
pub const VECTOR_DIM: usize = 50;
pub const FEATURE_SEED: u64 = 0x46495854;
pub const VECTOR_SEED: u64 = 0x56454354;

const COLORS: [&str; 3] = ["red", "blue", "green"];
const ANIMALS: [&str; 3] = ["bird", "cat", "dog"];
const SHORT_PLACES: [&str; 3] = ["park", "garden", "harbor"];
const LONG_PLACES: [&str; 3] = ["bridge", "tower", "station"];

// (color, animal, place) index triples; chosen so every word occurs at
// least three times across the corpus
const SHORT_COMBOS: [(usize, usize, usize); 10] = [
    (0, 0, 0),
    (1, 1, 0),
    (2, 2, 0),
    (0, 1, 1),
    (1, 2, 1),
    (2, 0, 1),
    (0, 2, 2),
    (1, 0, 2),
    (2, 1, 2),
    (0, 0, 1),
];
const LONG_COMBOS: [(usize, usize, usize); 10] = [
    (0, 0, 0),
    (1, 1, 0),
    (2, 2, 0),
    (0, 1, 1),
    (1, 2, 1),
    (2, 0, 1),
    (0, 2, 2),
    (1, 0, 2),
    (2, 1, 2),
    (0, 0, 1),
];

/// Caption texts in fixture order: ten short (5 words), ten long (12 words).
pub fn caption_texts() -> Vec<String> {
    let mut out = Vec::with_capacity(20);
    for &(c, a, p) in &SHORT_COMBOS {
        out.push(format!(
            "{} {} in the {}",
            COLORS[c], ANIMALS[a], SHORT_PLACES[p]
        ));
    }
    for &(c, a, p) in &LONG_COMBOS {
        out.push(format!(
            "the {} {} walks near the old {} while people watch quietly",
            COLORS[c], ANIMALS[a], LONG_PLACES[p]
        ));
    }
    out
}

pub fn sample_id(index: usize) -> String {
    format!("toy{index:03}")
}

/// In-memory fixture corpus; feature paths are relative file names.
pub fn corpus() -> Corpus {
    let samples = caption_texts()
        .iter()
        .enumerate()
        .map(|(i, text)| Sample {
            id: sample_id(i),
            feature_path: format!("features/{}.feat", sample_id(i)),
            caption: Caption::new(text),
        })
        .collect();
    Corpus { samples }
}

/// Synthetic image feature for one sample: fixed random uniform values in
/// [-1, 1), seeded by the sample index.
pub fn feature_for(index: usize, dim: usize) -> Vec<f32> {
    let mut rng = SeededRng::new(FEATURE_SEED ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15));
    (0..dim)
        .map(|_| (rng.next_unit() * 2.0 - 1.0) as f32)
        .collect()
}

/// All distinct corpus words, sorted, for the toy vector file.
pub fn word_list() -> Vec<String> {
    let mut words: Vec<String> = caption_texts()
        .iter()
        .flat_map(|t| t.split(' ').map(|w| w.to_string()))
        .collect();
    words.sort();
    words.dedup();
    words
}

/// Toy pretrained-vector file body: one 50-dim row per corpus word,
/// fixed-precision text so regeneration is byte-stable.
pub fn vector_file_text() -> String {
    let mut rng = SeededRng::new(VECTOR_SEED);
    let mut out = String::new();
    for word in word_list() {
        out.push_str(&word);
        for _ in 0..VECTOR_DIM {
            out.push_str(&format!(" {:.6}", rng.next_unit() * 2.0 - 1.0));
        }
        out.push('\n');
    }
    out
}

pub fn corpus_jsonl_text() -> String {
    let mut out = String::new();
    for (i, text) in caption_texts().iter().enumerate() {
        out.push_str(&format!(
            "{{\"id\":\"{id}\",\"caption\":\"{text}\",\"feature_path\":\"features/{id}.feat\"}}\n",
            id = sample_id(i)
        ));
    }
    out
}

pub fn scrub_rules_text() -> String {
    "# pattern<TAB>replacement, applied in order\n\
     https?://\\S+\t\n\
     @\\w+\t\n\
     #(\\w+)\t$1\n"
        .to_string()
}

/// Write the complete fixture tree: corpus.jsonl, features/*.feat,
/// vectors_50d.txt, scrub_rules.tsv.
pub fn generate(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("features"))?;
    std::fs::write(dir.join("corpus.jsonl"), corpus_jsonl_text())?;
    std::fs::write(dir.join("vectors_50d.txt"), vector_file_text())?;
    std::fs::write(dir.join("scrub_rules.tsv"), scrub_rules_text())?;
    for i in 0..20 {
        let path = dir.join("features").join(format!("{}.feat", sample_id(i)));
        write_feature(&path, &feature_for(i, FEATURE_DIM))?;
    }
    Ok(())
}
