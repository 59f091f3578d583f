//! Beam-search caption generation.

use crate::error::{Error, Result};
use crate::network::{decode_step, LstmState, ModelParams};
use crate::tensor::Scalar;
use crate::text::{Vocabulary, END_ID, START_ID};

/// One partial or finished decoding path.
#[derive(Debug, Clone)]
pub struct BeamHypothesis<F: Scalar> {
    /// Generated token ids (start excluded; includes the end id once finished).
    pub ids: Vec<usize>,
    /// Cumulative log₂ probability of the generated tokens.
    pub log2_prob: f64,
    pub state: LstmState<F>,
    pub finished: bool,
}

impl<F: Scalar> BeamHypothesis<F> {
    /// Ranking score; per-word normalization by default.
    fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.ids.is_empty() {
            self.log2_prob / self.ids.len() as f64
        } else {
            self.log2_prob
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank by cumulative log₂ prob divided by generated length. Raw-sum
    /// ranking is available by turning this off.
    pub normalize_score: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            max_len: 20,
            normalize_score: true,
        }
    }
}

/// Ranked captions with scores, best first. Hypotheses emitting the end
/// token retire to a finished pool; the search stops once the pool holds
/// `beam_size` entries or `max_len` steps have run. Ties break on the
/// lexicographic order of the token-id sequences.
pub fn beam_search<F: Scalar>(
    params: &ModelParams<F>,
    image: &[F],
    guide: Option<&[F]>,
    config: &DecodeConfig,
) -> Result<Vec<(Vec<usize>, f64)>> {
    if config.beam_size < 1 {
        return Err(Error::Parameter("beam_size must be >= 1".into()));
    }
    if config.max_len < 1 {
        return Err(Error::Parameter("max_len must be >= 1".into()));
    }

    let mut live: Vec<BeamHypothesis<F>> = vec![BeamHypothesis {
        ids: Vec::new(),
        log2_prob: 0.0,
        state: LstmState::zeros(params.dims.lstm),
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis<F>> = Vec::new();

    for _step in 0..config.max_len {
        let mut candidates: Vec<BeamHypothesis<F>> = Vec::new();
        for hyp in &live {
            let input = *hyp.ids.last().unwrap_or(&START_ID);
            let (probs, state) = decode_step(params, input, &hyp.state, image, guide)?;
            for (id, &p) in probs.iter().enumerate() {
                if id == START_ID {
                    continue;
                }
                // expansions below the probability floor are pruned outright
                let p = p.as_f64();
                if p < crate::training::PROB_FLOOR {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(id);
                candidates.push(BeamHypothesis {
                    ids,
                    log2_prob: hyp.log2_prob + p.log2(),
                    state: state.clone(),
                    finished: id == END_ID,
                });
            }
        }
        // keep the top beam_size expansions by cumulative probability
        candidates.sort_by(|a, b| {
            b.log2_prob
                .partial_cmp(&a.log2_prob)
                .unwrap()
                .then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(config.beam_size);
        live = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if finished.len() >= config.beam_size || live.is_empty() {
            live.clear();
            break;
        }
    }
    // unfinished survivors (length exactly max_len) compete with the pool
    finished.extend(live);
    if finished.is_empty() {
        return Err(Error::Degenerate(
            "beam search produced no hypotheses".into(),
        ));
    }
    finished.sort_by(|a, b| {
        let sa = a.score(config.normalize_score);
        let sb = b.score(config.normalize_score);
        sb.partial_cmp(&sa).unwrap().then_with(|| a.ids.cmp(&b.ids))
    });
    Ok(finished
        .into_iter()
        .map(|h| {
            let s = h.score(config.normalize_score);
            (h.ids, s)
        })
        .collect())
}

/// Exhaustive enumeration of every admissible sequence up to `max_len`,
/// scored like `beam_search`. Only feasible on tiny models; serves as an
/// optimality oracle for the beam.
pub fn exhaustive_argmax<F: Scalar>(
    params: &ModelParams<F>,
    image: &[F],
    guide: Option<&[F]>,
    max_len: usize,
    normalize_score: bool,
) -> Result<(Vec<usize>, f64)> {
    if max_len < 1 {
        return Err(Error::Parameter("max_len must be >= 1".into()));
    }
    fn recurse<F: Scalar>(
        params: &ModelParams<F>,
        image: &[F],
        guide: Option<&[F]>,
        max_len: usize,
        normalize: bool,
        prefix: &mut Vec<usize>,
        log2_prob: f64,
        state: &LstmState<F>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) -> Result<()> {
        let input = *prefix.last().unwrap_or(&START_ID);
        let (probs, next) = decode_step(params, input, state, image, guide)?;
        for (id, &p) in probs.iter().enumerate() {
            if id == START_ID {
                continue;
            }
            let p = p.as_f64();
            if p < crate::training::PROB_FLOOR {
                continue;
            }
            prefix.push(id);
            let lp = log2_prob + p.log2();
            if id == END_ID || prefix.len() == max_len {
                let score = if normalize {
                    lp / prefix.len() as f64
                } else {
                    lp
                };
                let better = match best {
                    None => true,
                    Some((ids, s)) => {
                        score > *s || (score == *s && prefix.as_slice() < ids.as_slice())
                    }
                };
                if better {
                    *best = Some((prefix.clone(), score));
                }
            } else {
                recurse(
                    params, image, guide, max_len, normalize, prefix, lp, &next, best,
                )?;
            }
            prefix.pop();
        }
        Ok(())
    }
    let mut best = None;
    let mut prefix = Vec::new();
    recurse(
        params,
        image,
        guide,
        max_len,
        normalize_score,
        &mut prefix,
        0.0,
        &LstmState::zeros(params.dims.lstm),
        &mut best,
    )?;
    best.ok_or_else(|| Error::Degenerate("exhaustive search produced no sequences".into()))
}

/// Decoded tokens of the best-ranked caption, start/end stripped.
pub fn top1_sentence<F: Scalar>(
    params: &ModelParams<F>,
    image: &[F],
    vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<Vec<String>> {
    let ranked = beam_search(params, image, None, config)?;
    let (ids, _) = &ranked[0];
    let mut tokens = Vec::new();
    for &id in ids {
        if id == END_ID {
            break;
        }
        let t = vocab
            .token(id)
            .ok_or_else(|| Error::Data(format!("decoded id {id} not in vocabulary")))?;
        tokens.push(t.to_string());
    }
    Ok(tokens)
}
