//! Stage implementations behind the subcommands.

use std::path::{Path, PathBuf};

use sgcap_core::decoding::beam_search;
use sgcap_core::error::{Error, Result};
use sgcap_core::features::{read_feature_checked, write_feature};
use sgcap_core::guidance::{
    build_gtf_cache, compute_idf, embedding_vectors, load_pretrained_vectors, train_local_vectors,
    Fusion, GtfCache, SchemeContext, VectorScheme, WordSource, Word2vecConfig,
};
use sgcap_core::network::{Dims, ModelParams};
use sgcap_core::tensor::SeededRng;
use sgcap_core::text::{
    ingest_file, length_stats, split_corpus, write_corpus, Corpus, ScrubRules, Vocabulary,
};
use sgcap_core::training::{
    batch_cost, train, write_cost_log, Checkpoint, EncodedSample, OptimizerState,
};

use crate::config::PipelineConfig;
use crate::manifest::{verify_chain, StageRun};

const CLEAN_CORPUS: &str = "corpus_clean.jsonl";
const SHORT_CORPUS: &str = "corpus_short.jsonl";
const LONG_CORPUS: &str = "corpus_long.jsonl";
const VOCAB_FILE: &str = "vocab.tsv";
const MLSTM_CKPT: &str = "mlstm.ckpt";
const SGLSTM_CKPT: &str = "sglstm.ckpt";
const GTF_CACHE: &str = "gtf.cache";

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "missing {}; run `sgcap {producer}` first",
            path.display()
        )))
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let (corpus, stats) = ingest_file(path, &ScrubRules::empty())?;
    if !stats.malformed_lines.is_empty() {
        return Err(Error::Data(format!(
            "{}: {} malformed line(s)",
            path.display(),
            stats.malformed_lines.len()
        )));
    }
    Ok(corpus)
}

fn encode_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
    features_dir: &Path,
    img_dim: usize,
) -> Result<Vec<EncodedSample<f32>>> {
    corpus
        .samples
        .iter()
        .map(|s| {
            let feature = read_feature_checked(&features_dir.join(&s.feature_path), img_dim)?;
            Ok(EncodedSample {
                id: s.id.clone(),
                feature,
                ids: vocab.encode(&s.caption),
            })
        })
        .collect()
}

pub fn cmd_ingest(config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let mut run = StageRun::begin("ingest", config.seed);
    run.input(&config.corpus)?;
    let rules = match &config.scrub_rules {
        Some(path) => {
            run.input(path)?;
            ScrubRules::load(path)?
        }
        None => ScrubRules::empty(),
    };
    let (corpus, stats) = ingest_file(&config.corpus, &rules)?;
    if corpus.samples.is_empty() {
        return Err(Error::Data("ingest: no valid records survived".into()));
    }
    let clean = config.out_dir.join(CLEAN_CORPUS);
    write_corpus(&corpus, &clean)?;
    run.output(&clean)?;

    let hist = length_stats(&corpus);
    let hist_path = config.out_dir.join("length_hist.tsv");
    let labels = ["1-5", "6-10", "11-15", "16-25", "26+"];
    let body: String = labels
        .iter()
        .zip(&hist)
        .map(|(l, n)| format!("{l}\t{n}\n"))
        .collect();
    std::fs::write(&hist_path, body)?;
    run.output(&hist_path)?;
    run.finish(&config.out_dir)?;

    println!(
        "ingest: read {}, kept {}, dropped {} invalid caption(s), {} malformed line(s)",
        stats.read,
        stats.kept,
        stats.dropped_invalid_caption,
        stats.malformed_lines.len()
    );
    for (l, n) in labels.iter().zip(&hist) {
        println!("  words {l}: {n}");
    }
    Ok(())
}

pub fn cmd_split(config: &PipelineConfig) -> Result<()> {
    let clean = config.out_dir.join(CLEAN_CORPUS);
    require(&clean, "ingest")?;
    let mut run = StageRun::begin("split", config.seed);
    run.input(&clean)?;
    let corpus = load_corpus(&clean)?;
    let (short, long) = split_corpus(&corpus, config.split_threshold);
    let short_path = config.out_dir.join(SHORT_CORPUS);
    let long_path = config.out_dir.join(LONG_CORPUS);
    write_corpus(&short, &short_path)?;
    write_corpus(&long, &long_path)?;
    run.output(&short_path)?;
    run.output(&long_path)?;
    run.finish(&config.out_dir)?;
    println!(
        "split: {} short (< {} words), {} long",
        short.samples.len(),
        config.split_threshold,
        long.samples.len()
    );
    Ok(())
}

pub fn cmd_vocab(config: &PipelineConfig) -> Result<()> {
    let clean = config.out_dir.join(CLEAN_CORPUS);
    require(&clean, "ingest")?;
    let mut run = StageRun::begin("vocab", config.seed);
    run.input(&clean)?;
    let corpus = load_corpus(&clean)?;
    let vocab = Vocabulary::build(&corpus, config.min_count)?;
    let path = config.out_dir.join(VOCAB_FILE);
    vocab.save(&path)?;
    run.output(&path)?;
    run.finish(&config.out_dir)?;
    println!(
        "vocab: {} tokens (min_count {}), hash {:016x}",
        vocab.len(),
        config.min_count,
        vocab.hash()
    );
    Ok(())
}

fn base_dims(config: &PipelineConfig, vocab: &Vocabulary, guide: Option<usize>) -> Dims {
    Dims {
        vocab: vocab.len(),
        embed: config.embed_dim,
        lstm: config.lstm_dim,
        mm: config.mm_dim,
        img: config.img_dim,
        guide,
    }
}

fn run_training(
    config: &PipelineConfig,
    stage: &str,
    corpus_file: &str,
    corpus_producer: &str,
    guide: Option<(&GtfCache, usize)>,
    ckpt_file: &str,
    cost_file: &str,
) -> Result<()> {
    let corpus_path = config.out_dir.join(corpus_file);
    let vocab_path = config.out_dir.join(VOCAB_FILE);
    require(&corpus_path, corpus_producer)?;
    require(&vocab_path, "vocab")?;
    let mut run = StageRun::begin(stage, config.seed);
    run.input(&corpus_path)?;
    run.input(&vocab_path)?;

    let corpus = load_corpus(&corpus_path)?;
    let vocab = Vocabulary::load(&vocab_path, config.min_count)?;
    let samples = encode_corpus(&corpus, &vocab, &config.features_dir, config.img_dim)?;

    let dims = base_dims(config, &vocab, guide.map(|(_, d)| d));
    let mut params = ModelParams::<f32>::init_random(
        dims,
        config.init_half_range,
        &mut SeededRng::new(config.seed),
    )?;
    let mut opt = OptimizerState::new(&params);
    let training = config.training();
    let guides = guide.map(|(cache, _)| cache.to_guide_map());
    let report = train(&mut params, &mut opt, &samples, &training, guides.as_ref())?;

    let bits = batch_cost(&params, &samples, guides.as_ref(), 0.0)?;
    let ckpt_path = config.out_dir.join(ckpt_file);
    Checkpoint {
        params,
        opt,
        config: training,
        vocab_hash: vocab.hash(),
        epoch: report.log.len(),
        seed: config.seed,
    }
    .save(&ckpt_path)?;
    let cost_path = config.out_dir.join(cost_file);
    write_cost_log(&report.log, &cost_path)?;
    run.output(&ckpt_path)?;
    run.output(&cost_path)?;
    run.finish(&config.out_dir)?;

    println!(
        "{stage}: {} epochs, train perplexity {:.4}, {} skipped long sentence(s), {} floored probability(ies)",
        report.log.len(),
        bits.exp2(),
        report.skipped_long_sentences,
        report.floored_probabilities
    );
    Ok(())
}

pub fn cmd_train_mlstm(config: &PipelineConfig) -> Result<()> {
    run_training(
        config,
        "train-mlstm",
        SHORT_CORPUS,
        "split",
        None,
        MLSTM_CKPT,
        "mlstm_cost.tsv",
    )
}

fn build_table(
    config: &PipelineConfig,
    scheme: VectorScheme,
    mlstm: &ModelParams<f32>,
    full_corpus: &Corpus,
    vocab: &Vocabulary,
    run: &mut StageRun,
) -> Result<sgcap_core::guidance::WordVectorTable> {
    match scheme.source {
        WordSource::Pretrained50 | WordSource::Pretrained300 => {
            let path = config.vectors_file.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "scheme {scheme} needs vectors_file in the configuration"
                ))
            })?;
            run.input(path)?;
            load_pretrained_vectors(path, scheme.dim(), scheme.source)
        }
        WordSource::Local128 => {
            let w2v = Word2vecConfig {
                min_count: config.min_count,
                seed: config.seed,
                ..Default::default()
            };
            train_local_vectors(full_corpus, &w2v)
        }
        WordSource::Embedding1024 => {
            let table = embedding_vectors(mlstm, vocab)?;
            if table.dim() != scheme.dim() {
                return Err(Error::Config(format!(
                    "scheme {scheme} expects {}-dim vectors but the model embeds {} dims",
                    scheme.dim(),
                    table.dim()
                )));
            }
            Ok(table)
        }
    }
}

pub fn cmd_gtf(config: &PipelineConfig) -> Result<()> {
    let ckpt_path = config.out_dir.join(MLSTM_CKPT);
    let long_path = config.out_dir.join(LONG_CORPUS);
    let clean_path = config.out_dir.join(CLEAN_CORPUS);
    let vocab_path = config.out_dir.join(VOCAB_FILE);
    require(&ckpt_path, "train-mlstm")?;
    require(&long_path, "split")?;
    require(&vocab_path, "vocab")?;
    let mut run = StageRun::begin("gtf", config.seed);
    run.input(&ckpt_path)?;
    run.input(&long_path)?;
    run.input(&vocab_path)?;

    let scheme = VectorScheme::parse(&config.scheme)?;
    let ckpt = Checkpoint::<f32>::load(&ckpt_path)?;
    let vocab = Vocabulary::load(&vocab_path, config.min_count)?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(Error::Config(
            "base checkpoint was trained against a different vocabulary".into(),
        ));
    }
    let long_corpus = load_corpus(&long_path)?;
    let full_corpus = load_corpus(&clean_path)?;
    let table = build_table(config, scheme, &ckpt.params, &full_corpus, &vocab, &mut run)?;
    // IDF reference corpus is the short-description half the base model saw
    let short_corpus = load_corpus(&config.out_dir.join(SHORT_CORPUS))?;
    let idf = compute_idf(&short_corpus);
    let ctx = SchemeContext {
        scheme,
        table: &table,
        idf: if scheme.fusion == Fusion::Tfidf {
            Some(&idf)
        } else {
            None
        },
    };
    let cache_path = config.out_dir.join(GTF_CACHE);
    let features_dir = config.features_dir.clone();
    let img_dim = config.img_dim;
    let cache = build_gtf_cache(
        &ckpt.params,
        &long_corpus,
        &vocab,
        &ctx,
        &config.decode(),
        |path| read_feature_checked(&features_dir.join(path), img_dim),
        &cache_path,
    )?;
    run.output(&cache_path)?;
    run.finish(&config.out_dir)?;
    println!(
        "gtf: cached {} guiding feature(s), scheme {}, dim {}",
        cache.records.len(),
        cache.scheme,
        cache.dim
    );
    Ok(())
}

pub fn cmd_train_sglstm(config: &PipelineConfig) -> Result<()> {
    let cache_path = config.out_dir.join(GTF_CACHE);
    require(&cache_path, "gtf")?;
    let cache = GtfCache::load(&cache_path)?;
    let scheme = VectorScheme::parse(&config.scheme)?;
    if cache.dim != scheme.dim() || cache.scheme != config.scheme {
        return Err(Error::Config(format!(
            "guiding cache holds scheme {} ({} dims) but the configuration asks for {} ({} dims)",
            cache.scheme,
            cache.dim,
            config.scheme,
            scheme.dim()
        )));
    }
    let dim = cache.dim;
    run_training(
        config,
        "train-sglstm",
        LONG_CORPUS,
        "split",
        Some((&cache, dim)),
        SGLSTM_CKPT,
        "sglstm_cost.tsv",
    )
}

pub struct CaptionArgs {
    pub model: Option<PathBuf>,
    pub feature: PathBuf,
    pub image_id: Option<String>,
}

pub fn cmd_caption(config: &PipelineConfig, args: &CaptionArgs) -> Result<()> {
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| config.out_dir.join(SGLSTM_CKPT));
    require(&model_path, "train-sglstm")?;
    let vocab_path = config.out_dir.join(VOCAB_FILE);
    require(&vocab_path, "vocab")?;
    let ckpt = Checkpoint::<f32>::load(&model_path)?;
    let vocab = Vocabulary::load(&vocab_path, config.min_count)?;
    let feature = read_feature_checked(&args.feature, ckpt.params.dims.img)?;

    let guide;
    let guide_ref: Option<&[f32]> = if ckpt.params.is_guided() {
        let cache = GtfCache::load(&config.out_dir.join(GTF_CACHE))?;
        let id = args.image_id.as_ref().ok_or_else(|| {
            Error::Config("guided model: pass --id to select the cached guiding feature".into())
        })?;
        guide = cache
            .get(id)
            .ok_or_else(|| Error::Data(format!("no cached guiding feature for image {id}")))?
            .to_vec();
        Some(&guide[..])
    } else {
        None
    };

    let ranked = beam_search(&ckpt.params, &feature, guide_ref, &config.decode())?;
    for (ids, score) in ranked.iter().take(config.top_k) {
        let text = vocab.decode(ids)?;
        println!("{score:.4}\t{text}");
    }
    Ok(())
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<()> {
    verify_chain(
        &config.out_dir,
        &["ingest", "split", "vocab", "train-mlstm", "gtf", "train-sglstm"],
    )?;
    let ckpt_path = config.out_dir.join(SGLSTM_CKPT);
    let long_path = config.out_dir.join(LONG_CORPUS);
    let vocab_path = config.out_dir.join(VOCAB_FILE);
    let cache_path = config.out_dir.join(GTF_CACHE);
    let mut run = StageRun::begin("evaluate", config.seed);
    for p in [&ckpt_path, &long_path, &vocab_path, &cache_path] {
        run.input(p)?;
    }

    let ckpt = Checkpoint::<f32>::load(&ckpt_path)?;
    let vocab = Vocabulary::load(&vocab_path, config.min_count)?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(Error::Config(
            "checkpoint was trained against a different vocabulary".into(),
        ));
    }
    let corpus = load_corpus(&long_path)?;
    let cache = GtfCache::load(&cache_path)?;
    let guides = cache.to_guide_map();
    let features_dir = config.features_dir.clone();
    let img_dim = ckpt.params.dims.img;
    let evaluation = sgcap_core::metrics::evaluate(
        &ckpt.params,
        &corpus,
        &vocab,
        &config.decode(),
        |path| read_feature_checked(&features_dir.join(path), img_dim),
        |id| {
            guides
                .get(id)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::Data(format!("no cached guiding feature for image {id}")))
        },
    )?;

    let report_path = config.out_dir.join("report.tsv");
    std::fs::write(&report_path, evaluation.report.summary() + "\n")?;
    let breakdown_path = config.out_dir.join("breakdown.tsv");
    std::fs::write(&breakdown_path, evaluation.breakdown.join("\n") + "\n")?;
    run.output(&report_path)?;
    run.output(&breakdown_path)?;
    run.finish(&config.out_dir)?;

    println!("{}", evaluation.report.summary());
    for w in &evaluation.report.warnings {
        println!("warning: {w}");
    }
    for f in &evaluation.failed {
        println!("skipped: {f}");
    }
    Ok(())
}

pub struct FeaturePackArgs {
    pub input_dir: PathBuf,
}

/// Convert plain-text vectors (whitespace-separated floats, one file per
/// image) into the binary feature format, enforcing the configured
/// dimension.
pub fn cmd_feature_pack(config: &PipelineConfig, args: &FeaturePackArgs) -> Result<()> {
    std::fs::create_dir_all(&config.features_dir)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.input_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "feature-pack: no .txt vector files in {}",
            args.input_dir.display()
        )));
    }
    let mut packed = 0usize;
    for path in &entries {
        let text = std::fs::read_to_string(path)?;
        let values: std::result::Result<Vec<f32>, _> =
            text.split_whitespace().map(|t| t.parse::<f32>()).collect();
        let values = values.map_err(|_| {
            Error::Data(format!("{}: non-numeric vector component", path.display()))
        })?;
        if values.len() != config.img_dim {
            return Err(Error::Dimension(format!(
                "{}: {} values, expected {}",
                path.display(),
                values.len(),
                config.img_dim
            )));
        }
        let stem = path.file_stem().unwrap().to_string_lossy();
        write_feature(&config.features_dir.join(format!("{stem}.feat")), &values)?;
        packed += 1;
    }
    println!(
        "feature-pack: wrote {packed} feature file(s) of dimension {}",
        config.img_dim
    );
    Ok(())
}
