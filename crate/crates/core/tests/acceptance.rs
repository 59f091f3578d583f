//! End-to-end acceptance battery. Each test prints a single pass/fail
//! line for its criterion and asserts it.

use std::collections::HashMap;
use std::time::Instant;

use sgcap_core::decoding::{beam_search, exhaustive_argmax, DecodeConfig};
use sgcap_core::fixture;
use sgcap_core::guidance::{
    compute_idf, parse_pretrained_vectors, Fusion, IdfTable, SchemeContext, VectorScheme,
    WordSource, WordVectorTable,
};
use sgcap_core::metrics::{bleu, cider, rouge_l, EvalPair};
use sgcap_core::network::{decode_step, Dims, LstmState, ModelParams};
use sgcap_core::tensor::{init_uniform, SeededRng};
use sgcap_core::text::{split_corpus, Vocabulary, END_ID, START_ID};
use sgcap_core::training::{
    batch_cost, gradient_check, train, Checkpoint, EncodedSample, OptimizerState, TrainingConfig,
};

fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!(
        "acceptance {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let dims = Dims {
        vocab: 10,
        embed: 8,
        lstm: 12,
        mm: 12,
        img: 6,
        guide: Some(4),
    };
    let mut rng = SeededRng::new(11);
    let params = ModelParams::<f64>::init_random(dims, 0.4, &mut rng).unwrap();
    let sample = EncodedSample {
        id: "gc".into(),
        feature: init_uniform::<f64>(&[6], 1.0, &mut rng).unwrap().data().to_vec(),
        ids: vec![START_ID, 3, 7, 4, 9, END_ID],
    };
    let guide = init_uniform::<f64>(&[4], 1.0, &mut rng).unwrap();
    let report = gradient_check(&params, &sample, Some(guide.data()), 1e-4).unwrap();
    let worst = report
        .entries
        .iter()
        .map(|e| e.max_rel_error)
        .fold(0.0f64, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        1,
        report.pass() && elapsed < 30.0,
        &format!("max rel error {worst:.2e} over {} tensors in {elapsed:.1}s", report.entries.len()),
    );
}

#[test]
fn criterion_2_guided_model_reduces_to_base() {
    let start = Instant::now();
    let base_dims = Dims {
        vocab: 9,
        embed: 6,
        lstm: 7,
        mm: 8,
        img: 5,
        guide: None,
    };
    let mut rng = SeededRng::new(22);
    let base = ModelParams::<f32>::init_random(base_dims.clone(), 0.4, &mut rng).unwrap();
    // guided twin: identical weights, zero guide matrix
    let mut guided = ModelParams::<f32>::zeros(Dims {
        guide: Some(5),
        ..base_dims
    });
    for name in base.tensor_names() {
        *guided.tensor_mut(&name) = base.tensor(&name).clone();
    }

    let mut mismatches = 0usize;
    for case in 0..100u64 {
        let mut rng = SeededRng::new(1000 + case);
        let image = init_uniform::<f32>(&[5], 1.0, &mut rng).unwrap();
        let guide = init_uniform::<f32>(&[5], 1.0, &mut rng).unwrap();
        let state = LstmState {
            c: init_uniform::<f32>(&[7], 0.5, &mut rng).unwrap().data().to_vec(),
            h: init_uniform::<f32>(&[7], 0.5, &mut rng).unwrap().data().to_vec(),
        };
        let input = (rng.next_below(9)) as usize;
        let (p_base, _) = decode_step(&base, input, &state, image.data(), None).unwrap();
        let (p_guided, _) =
            decode_step(&guided, input, &state, image.data(), Some(guide.data())).unwrap();
        if p_base
            .iter()
            .zip(&p_guided)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        2,
        mismatches == 0 && elapsed < 5.0,
        &format!("{mismatches}/100 probability rows differed bitwise in {elapsed:.1}s"),
    );
}

struct FixtureData {
    vocab: Vocabulary,
    shorts: Vec<EncodedSample<f32>>,
    longs: Vec<EncodedSample<f32>>,
    table: WordVectorTable,
    idf: IdfTable,
}

fn load_fixture() -> FixtureData {
    let corpus = fixture::corpus();
    let vocab = Vocabulary::build(&corpus, 3).unwrap();
    let (short_c, long_c) = split_corpus(&corpus, 10);
    let encode = |c: &sgcap_core::text::Corpus| {
        c.samples
            .iter()
            .map(|s| {
                let idx: usize = s.id[3..].parse().unwrap();
                EncodedSample {
                    id: s.id.clone(),
                    feature: fixture::feature_for(idx, fixture::FEATURE_DIM),
                    ids: vocab.encode(&s.caption),
                }
            })
            .collect::<Vec<_>>()
    };
    let shorts = encode(&short_c);
    let longs = encode(&long_c);
    let table = parse_pretrained_vectors(
        &fixture::vector_file_text(),
        fixture::VECTOR_DIM,
        WordSource::Pretrained50,
    )
    .unwrap();
    let idf = compute_idf(&short_c);
    FixtureData {
        vocab,
        shorts,
        longs,
        table,
        idf,
    }
}

fn fixture_dims(guide: Option<usize>) -> Dims {
    Dims {
        vocab: 24,
        embed: 32,
        lstm: 64,
        mm: 64,
        img: fixture::FEATURE_DIM,
        guide,
    }
}

fn fixture_train_config(seed: u64, max_epochs: usize) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 2e-3,
        batch_size: 10,
        l2: 0.0,
        dropout: 0.0,
        max_epochs,
        seed,
        heldout_fraction: 0.0,
        stop_at_perplexity: Some(1.05),
        ..Default::default()
    }
}

fn guide_map(
    mlstm: &ModelParams<f32>,
    data: &FixtureData,
) -> HashMap<String, Vec<f32>> {
    let scheme = VectorScheme {
        source: WordSource::Pretrained50,
        fusion: Fusion::Tfidf,
    };
    let ctx = SchemeContext {
        scheme,
        table: &data.table,
        idf: Some(&data.idf),
    };
    let decode = DecodeConfig::default();
    data.longs
        .iter()
        .map(|s| {
            let g = sgcap_core::guidance::extract_gtf(
                mlstm,
                &s.feature,
                &data.vocab,
                &ctx,
                &decode,
            )
            .unwrap();
            (s.id.clone(), g.vector)
        })
        .collect()
}

#[test]
fn criterion_3_two_stage_overfit_reproduction() {
    let start = Instant::now();
    let data = load_fixture();
    assert!(data.vocab.len() <= 50);

    // stage 1: base model on the short half
    let mut mlstm = ModelParams::<f32>::init_random(
        fixture_dims(None),
        0.08,
        &mut SeededRng::new(301),
    )
    .unwrap();
    let mut opt = OptimizerState::new(&mlstm);
    let config = fixture_train_config(302, 2000);
    let report = train(&mut mlstm, &mut opt, &data.shorts, &config, None).unwrap();
    let iterations = report.log.len();
    let bits = batch_cost(&mlstm, &data.shorts, None, 0.0).unwrap();
    let perplexity = bits.exp2();

    // stage 2: guiding features from stage 1, then the guided model
    let guides = guide_map(&mlstm, &data);
    let mut sglstm = ModelParams::<f32>::init_random(
        fixture_dims(Some(fixture::VECTOR_DIM)),
        0.08,
        &mut SeededRng::new(303),
    )
    .unwrap();
    let mut opt2 = OptimizerState::new(&sglstm);
    let config2 = fixture_train_config(304, 2000);
    train(&mut sglstm, &mut opt2, &data.longs, &config2, Some(&guides)).unwrap();

    // decode every fixture image with the model that owns its half
    let decode = DecodeConfig::default();
    let mut exact = 0usize;
    for s in &data.shorts {
        let ranked = beam_search(&mlstm, &s.feature, None, &decode).unwrap();
        if ranked[0].0 == s.ids[1..] {
            exact += 1;
        }
    }
    for s in &data.longs {
        let guide = &guides[&s.id];
        let ranked = beam_search(&sglstm, &s.feature, Some(guide), &decode).unwrap();
        if ranked[0].0 == s.ids[1..] {
            exact += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        3,
        perplexity < 1.2 && iterations <= 2000 && exact >= 18 && elapsed < 300.0,
        &format!(
            "perplexity {perplexity:.4} after {iterations} iterations, {exact}/20 captions reproduced, {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_4_beam_matches_exhaustive_argmax() {
    let start = Instant::now();
    let mut failures = 0usize;
    for seed in 0..50u64 {
        let dims = Dims {
            vocab: 4,
            embed: 3,
            lstm: 3,
            mm: 3,
            img: 2,
            guide: None,
        };
        let mut rng = SeededRng::new(400 + seed);
        let params = ModelParams::<f64>::init_random(dims, 0.6, &mut rng).unwrap();
        let image = init_uniform::<f64>(&[2], 1.0, &mut rng).unwrap();
        let config = DecodeConfig {
            beam_size: 64,
            max_len: 4,
            normalize_score: true,
        };
        let ranked = beam_search(&params, image.data(), None, &config).unwrap();
        let (best_ids, best_score) =
            exhaustive_argmax(&params, image.data(), None, 4, true).unwrap();
        if ranked[0].0 != best_ids || (ranked[0].1 - best_score).abs() > 1e-12 {
            failures += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        4,
        failures == 0 && elapsed < 10.0,
        &format!("{failures}/50 models diverged from the exhaustive oracle in {elapsed:.1}s"),
    );
}

#[test]
fn criterion_5_metric_oracles() {
    let toks = |s: &str| -> Vec<String> { s.split(' ').map(|t| t.to_string()).collect() };
    let pair = |id: &str, c: &str, r: &str| EvalPair {
        id: id.into(),
        candidate: toks(c),
        references: vec![toks(r)],
    };

    let b = bleu(&[pair("a", "the cat", "the cat on the mat")], 1).unwrap()[0];
    let bleu_ok = (b - 0.2231).abs() < 1e-4;

    let r = rouge_l(&[pair("a", "the cat", "the cat sat")], 1.2).unwrap();
    let rouge_ok = (r - 0.7722).abs() < 1e-4;

    let identity_pairs = [
        pair("a", "red bird in park", "red bird in park"),
        pair("b", "old tower by night", "old tower by night"),
    ];
    let (c, _) = cider(&identity_pairs, 4).unwrap();
    let cider_ok = (c - 10.0).abs() < 1e-9;

    let self_b = bleu(&identity_pairs, 4).unwrap();
    let self_r = rouge_l(&identity_pairs, 1.2).unwrap();
    let self_ok = self_b.iter().all(|&x| (x - 1.0).abs() < 1e-9) && (self_r - 1.0).abs() < 1e-9;

    verdict(
        5,
        bleu_ok && rouge_ok && cider_ok && self_ok,
        &format!("BLEU-1 {b:.4}, ROUGE-L {r:.4}, CIDEr identity {c:.4}, self-scoring at 1.0"),
    );
}

#[test]
fn criterion_6_loss_closed_forms() {
    // V = 2: zero-weight model emits p = 0.5 everywhere → 1 bit/word
    let half = ModelParams::<f64>::zeros(Dims {
        vocab: 2,
        embed: 3,
        lstm: 3,
        mm: 3,
        img: 2,
        guide: None,
    });
    let make = |n: usize| -> Vec<EncodedSample<f64>> {
        (0..n)
            .map(|i| EncodedSample {
                id: format!("s{i}"),
                feature: vec![0.1 * i as f64, -0.2],
                ids: vec![START_ID, END_ID],
            })
            .collect()
    };
    let mut half_ok = true;
    let mut worst_half: f64 = 0.0;
    for n in [1, 3, 7] {
        let cost = batch_cost(&half, &make(n), None, 0.0).unwrap();
        worst_half = worst_half.max((cost - 1.0).abs());
        half_ok &= (cost - 1.0).abs() < 1e-6;
    }

    // zero-weight model over V = 6 → log₂6 bits/word on any batch
    let uni = ModelParams::<f64>::zeros(Dims {
        vocab: 6,
        embed: 3,
        lstm: 3,
        mm: 3,
        img: 2,
        guide: None,
    });
    let batches: Vec<Vec<EncodedSample<f64>>> = vec![
        vec![EncodedSample {
            id: "a".into(),
            feature: vec![0.3, 0.4],
            ids: vec![START_ID, 3, 4, END_ID],
        }],
        vec![
            EncodedSample {
                id: "b".into(),
                feature: vec![-0.1, 0.9],
                ids: vec![START_ID, 5, END_ID],
            },
            EncodedSample {
                id: "c".into(),
                feature: vec![0.0, 0.0],
                ids: vec![START_ID, 2, 3, 4, 5, END_ID],
            },
        ],
    ];
    let mut uni_ok = true;
    let mut worst_uni: f64 = 0.0;
    for batch in &batches {
        let cost = batch_cost(&uni, batch, None, 0.0).unwrap();
        worst_uni = worst_uni.max((cost - 6.0f64.log2()).abs());
        uni_ok &= (cost - 6.0f64.log2()).abs() < 1e-6;
    }
    verdict(
        6,
        half_ok && uni_ok,
        &format!("p=0.5 off by {worst_half:.1e}, uniform off by {worst_uni:.1e}"),
    );
}

#[test]
fn criterion_7_pipeline_determinism() {
    let data = load_fixture();
    let run = |dir: &std::path::Path| {
        let mut mlstm = ModelParams::<f32>::init_random(
            fixture_dims(None),
            0.08,
            &mut SeededRng::new(701),
        )
        .unwrap();
        let mut opt = OptimizerState::new(&mlstm);
        let config = TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            dropout: 0.5,
            max_epochs: 5,
            seed: 702,
            heldout_fraction: 0.0,
            ..Default::default()
        };
        train(&mut mlstm, &mut opt, &data.shorts, &config, None).unwrap();
        Checkpoint {
            params: mlstm.clone(),
            opt,
            config: config.clone(),
            vocab_hash: data.vocab.hash(),
            epoch: 5,
            seed: 702,
        }
        .save(&dir.join("mlstm.ckpt"))
        .unwrap();

        let scheme = VectorScheme {
            source: WordSource::Pretrained50,
            fusion: Fusion::Tfidf,
        };
        let ctx = SchemeContext {
            scheme,
            table: &data.table,
            idf: Some(&data.idf),
        };
        let long_corpus = sgcap_core::text::Corpus {
            samples: fixture::corpus()
                .samples
                .into_iter()
                .filter(|s| s.caption.word_count >= 10)
                .collect(),
        };
        let cache = sgcap_core::guidance::build_gtf_cache(
            &mlstm,
            &long_corpus,
            &data.vocab,
            &ctx,
            &DecodeConfig::default(),
            |path| {
                let idx: usize = path[12..15].parse().unwrap();
                Ok(fixture::feature_for(idx, fixture::FEATURE_DIM))
            },
            &dir.join("gtf.cache"),
        )
        .unwrap();

        let mut sglstm = ModelParams::<f32>::init_random(
            fixture_dims(Some(fixture::VECTOR_DIM)),
            0.08,
            &mut SeededRng::new(703),
        )
        .unwrap();
        let mut opt2 = OptimizerState::new(&sglstm);
        let config2 = TrainingConfig {
            seed: 704,
            ..config
        };
        let guides = cache.to_guide_map();
        train(&mut sglstm, &mut opt2, &data.longs, &config2, Some(&guides)).unwrap();
        Checkpoint {
            params: sglstm.clone(),
            opt: opt2,
            config: config2,
            vocab_hash: data.vocab.hash(),
            epoch: 5,
            seed: 704,
        }
        .save(&dir.join("sglstm.ckpt"))
        .unwrap();

        let by_id: HashMap<&str, &EncodedSample<f32>> =
            data.longs.iter().map(|s| (s.id.as_str(), s)).collect();
        let eval = sgcap_core::metrics::evaluate(
            &sglstm,
            &long_corpus,
            &data.vocab,
            &DecodeConfig::default(),
            |path| {
                let idx: usize = path[12..15].parse().unwrap();
                Ok(fixture::feature_for(idx, fixture::FEATURE_DIM))
            },
            |id| {
                Ok(Some(
                    guides
                        .get(by_id[id].id.as_str())
                        .cloned()
                        .unwrap(),
                ))
            },
        )
        .unwrap();
        let mut report = eval.report.summary();
        report.push('\n');
        report.push_str(&eval.breakdown.join("\n"));
        std::fs::write(dir.join("report.tsv"), report).unwrap();
    };

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run(d1.path());
    run(d2.path());
    let mut all_equal = true;
    let mut detail = Vec::new();
    for artifact in ["mlstm.ckpt", "gtf.cache", "sglstm.ckpt", "report.tsv"] {
        let a = std::fs::read(d1.path().join(artifact)).unwrap();
        let b = std::fs::read(d2.path().join(artifact)).unwrap();
        let eq = a == b;
        all_equal &= eq;
        detail.push(format!("{artifact} {}", if eq { "identical" } else { "DIFFERS" }));
    }
    verdict(7, all_equal, &detail.join(", "));
}

#[test]
fn criterion_8_fusion_equivalence() {
    // one-document corpus containing every token once → idf ≡ 1
    let tokens: Vec<String> = (0..20).map(|i| format!("w{i:02}")).collect();
    let one_doc = sgcap_core::text::Corpus {
        samples: vec![sgcap_core::text::Sample {
            id: "d".into(),
            feature_path: String::new(),
            caption: sgcap_core::text::Caption::new(&tokens.join(" ")),
        }],
    };
    let idf = compute_idf(&one_doc);
    let mut table = WordVectorTable::new(16, WordSource::Local128);
    let mut rng = SeededRng::new(800);
    for t in &tokens {
        let v: Vec<f32> = (0..16)
            .map(|_| (rng.next_unit() * 2.0 - 1.0) as f32)
            .collect();
        table.insert(t.clone(), v).unwrap();
    }
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let len = 1 + rng.next_below(12) as usize;
        let sentence: Vec<String> = (0..len)
            .map(|_| tokens[rng.next_below(20) as usize].clone())
            .collect();
        let (avg, _) = sgcap_core::guidance::fuse_average(&sentence, &table).unwrap();
        let (tfidf, _) = sgcap_core::guidance::fuse_tfidf(&sentence, &table, &idf).unwrap();
        for (a, b) in avg.iter().zip(&tfidf) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        8,
        worst < 1e-7,
        &format!("max elementwise gap {worst:.2e} over 1000 sentences"),
    );
}
