//! Perplexity-based cost, RMSProp mini-batch training, gradient checking,
//! and checkpointing.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{backward_sentence, forward_sentence, DropoutMasks, ModelParams};
use crate::tensor::{Scalar, SeededRng};
use crate::util::fnv1a64;

/// Probability floor applied inside the loss so a degenerate batch cannot
/// produce an infinite cost. Occurrences are counted and surfaced.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// RMSProp squared-gradient decay ρ.
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub batch_size: usize,
    /// L2 coefficient λ over weight matrices (biases excluded).
    pub l2: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Sentences with more prediction steps than this are excluded from
    /// training (memory bound for BPTT over full sentences).
    pub max_sentence_len: usize,
    /// Elementwise gradient clip; off by default.
    pub grad_clip: Option<f64>,
    /// Fraction of the corpus held out for the per-epoch cost log. Zero
    /// means the training set itself is logged.
    pub heldout_fraction: f64,
    /// Stop early once train perplexity drops below this value.
    pub stop_at_perplexity: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            batch_size: 64,
            l2: 1e-5,
            dropout: 0.5,
            max_epochs: 10,
            seed: 1,
            max_sentence_len: 60,
            grad_clip: None,
            heldout_fraction: 0.1,
            stop_at_perplexity: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::Parameter("rms_decay must be in [0, 1)".into()));
        }
        if self.rms_epsilon <= 0.0 {
            return Err(Error::Parameter("rms_epsilon must be > 0".into()));
        }
        if self.l2 < 0.0 {
            return Err(Error::Parameter("l2 must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One sentence ready for training: id, image feature, encoded token ids.
#[derive(Debug, Clone)]
pub struct EncodedSample<F: Scalar> {
    pub id: String,
    pub feature: Vec<F>,
    pub ids: Vec<usize>,
}

/// Per-parameter squared-gradient accumulators.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar> {
    pub acc: ModelParams<F>,
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self {
            acc: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SentenceNll {
    /// −Σₜ log₂ p(targetₜ)
    pub bits: f64,
    /// Number of predicted tokens (the sentence length Lᵢ).
    pub words: usize,
    /// How many targets hit the probability floor.
    pub floored: usize,
}

/// Summed negative log₂-likelihood of the targets under the per-step rows.
pub fn sentence_nll<F: Scalar>(prob_rows: &[Vec<F>], target_ids: &[usize]) -> Result<SentenceNll> {
    if prob_rows.len() != target_ids.len() {
        return Err(Error::Data(format!(
            "sentence_nll: {} rows for {} targets",
            prob_rows.len(),
            target_ids.len()
        )));
    }
    let mut bits = 0.0;
    let mut floored = 0;
    for (row, &t) in prob_rows.iter().zip(target_ids) {
        let p = row
            .get(t)
            .ok_or_else(|| Error::Data(format!("sentence_nll: target id {t} out of range")))?
            .as_f64();
        let p = if p < PROB_FLOOR {
            floored += 1;
            PROB_FLOOR
        } else {
            p
        };
        bits -= p.log2();
    }
    Ok(SentenceNll {
        bits,
        words: target_ids.len(),
        floored,
    })
}

/// L2 term Σ‖W‖² over weight matrices, biases excluded.
pub fn weight_squared_norm<F: Scalar>(params: &ModelParams<F>) -> f64 {
    params
        .tensor_names()
        .iter()
        .filter(|n| !ModelParams::<F>::is_bias(n))
        .map(|n| params.tensor(n).squared_norm())
        .sum()
}

/// Mean per-word bits over the batch plus λ‖θ‖². Per-word normalization is
/// over the summed word count, so the value is order-invariant.
pub fn batch_cost<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[EncodedSample<F>],
    guides: Option<&HashMap<String, Vec<F>>>,
    l2: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("batch_cost: empty batch".into()));
    }
    let mut bits = 0.0;
    let mut words = 0usize;
    for s in batch {
        let guide = lookup_guide(guides, &s.id, params.is_guided())?;
        let trace = forward_sentence(params, &s.feature, &s.ids, guide, None)?;
        let nll = sentence_nll(&trace.prob_rows(), &s.ids[1..])?;
        bits += nll.bits;
        words += nll.words;
    }
    Ok(bits / words as f64 + l2 * weight_squared_norm(params))
}

fn lookup_guide<'a, F: Scalar>(
    guides: Option<&'a HashMap<String, Vec<F>>>,
    id: &str,
    guided: bool,
) -> Result<Option<&'a [F]>> {
    match (guided, guides) {
        (false, None) => Ok(None),
        (true, Some(table)) => table
            .get(id)
            .map(|v| Some(v.as_slice()))
            .ok_or_else(|| Error::Config(format!("no guiding feature for image {id}"))),
        (true, None) => Err(Error::Config(
            "guided model trained without a guide table".into(),
        )),
        (false, Some(_)) => Err(Error::Config(
            "guide table supplied for an unguided model".into(),
        )),
    }
}

/// acc ← ρ·acc + (1−ρ)·g²; θ ← θ − lr·g/(√acc + ε), elementwise.
pub fn rmsprop_update<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimizerState<F>,
    config: &TrainingConfig,
) -> Result<()> {
    let rho = F::from_f64(config.rms_decay);
    let one_minus = F::from_f64(1.0 - config.rms_decay);
    let eps = F::from_f64(config.rms_epsilon);
    let lr = F::from_f64(config.learning_rate);
    for name in params.tensor_names() {
        let g = grads.tensor(name);
        if !g.is_finite() {
            return Err(Error::Data(format!(
                "non-finite gradient in tensor {name} at step {}",
                state.step
            )));
        }
        let acc = state.acc.tensor_mut(name);
        let theta = params.tensor_mut(name);
        let clip = config.grad_clip.map(F::from_f64);
        for k in 0..g.data().len() {
            let mut gv = g.data()[k];
            if let Some(c) = clip {
                gv = gv.max(-c).min(c);
            }
            let a = rho * acc.data()[k] + one_minus * gv * gv;
            acc.data_mut()[k] = a;
            theta.data_mut()[k] = theta.data()[k] - lr * gv / (a.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochCost {
    pub epoch: usize,
    pub train_cost: f64,
    pub heldout_cost: f64,
}

#[derive(Debug, Default, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochCost>,
    pub skipped_long_sentences: usize,
    pub floored_probabilities: usize,
}

/// Mini-batch RMSProp training with a seeded per-epoch shuffle. The cost
/// log records mean per-word bits (+ L2) on the training set and on the
/// held-out slice per epoch.
pub fn train<F: Scalar>(
    params: &mut ModelParams<F>,
    opt: &mut OptimizerState<F>,
    corpus: &[EncodedSample<F>],
    config: &TrainingConfig,
    guides: Option<&HashMap<String, Vec<F>>>,
) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("train: empty corpus".into()));
    }
    for s in corpus {
        // fail fast on guide/model mismatch
        lookup_guide(guides, &s.id, params.is_guided())?;
    }

    let mut report = TrainReport::default();
    let usable: Vec<&EncodedSample<F>> = corpus
        .iter()
        .filter(|s| {
            let ok = s.ids.len() - 1 <= config.max_sentence_len;
            if !ok {
                report.skipped_long_sentences += 1;
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Data(
            "train: every sentence exceeds the length cap".into(),
        ));
    }

    let heldout_n = ((usable.len() as f64) * config.heldout_fraction).floor() as usize;
    let train_set = &usable[..usable.len() - heldout_n];
    let heldout: Vec<EncodedSample<F>> = if heldout_n == 0 {
        train_set.iter().map(|s| (*s).clone()).collect()
    } else {
        usable[usable.len() - heldout_n..]
            .iter()
            .map(|s| (*s).clone())
            .collect()
    };

    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        rng.shuffle(&mut order);
        let mut epoch_bits = 0.0;
        let mut epoch_words = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            let mut batch_words = 0usize;
            for &i in batch_idx {
                let s = train_set[i];
                let guide = lookup_guide(guides, &s.id, params.is_guided())?;
                let steps = s.ids.len() - 1;
                let masks = if config.dropout > 0.0 {
                    Some(DropoutMasks::generate(
                        steps,
                        &params.dims,
                        config.dropout,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                let trace = forward_sentence(params, &s.feature, &s.ids, guide, masks.as_ref())?;
                let nll = sentence_nll(&trace.prob_rows(), &s.ids[1..])?;
                epoch_bits += nll.bits;
                epoch_words += nll.words;
                batch_words += nll.words;
                report.floored_probabilities += nll.floored;
                let sample_grads = backward_sentence(params, &trace, &s.ids[1..], F::one())?;
                for name in grads.tensor_names() {
                    let dst = grads.tensor_mut(name);
                    let src = sample_grads.tensor(name);
                    for k in 0..dst.data().len() {
                        dst.data_mut()[k] = dst.data()[k] + src.data()[k];
                    }
                }
            }
            // finalize: per-word normalization + L2 on weights
            let inv_words = F::from_f64(1.0 / batch_words as f64);
            let two_l2 = F::from_f64(2.0 * config.l2);
            for name in grads.tensor_names() {
                let is_bias = ModelParams::<F>::is_bias(name);
                let theta = params.tensor(name).data().to_vec();
                let g = grads.tensor_mut(name);
                for k in 0..g.data().len() {
                    let mut v = g.data()[k] * inv_words;
                    if !is_bias && config.l2 > 0.0 {
                        v = v + two_l2 * theta[k];
                    }
                    g.data_mut()[k] = v;
                }
            }
            rmsprop_update(params, &grads, opt, config)?;
        }

        let train_cost =
            epoch_bits / epoch_words as f64 + config.l2 * weight_squared_norm(params);
        let heldout_cost = batch_cost(params, &heldout, guides, config.l2)?;
        report.log.push(EpochCost {
            epoch,
            train_cost,
            heldout_cost,
        });
        if let Some(target) = config.stop_at_perplexity {
            let perplexity = (epoch_bits / epoch_words as f64).exp2();
            if perplexity < target {
                break;
            }
        }
    }
    Ok(report)
}

/// One line per epoch: `epoch<TAB>train_cost<TAB>heldout_cost`.
pub fn write_cost_log(log: &[EpochCost], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in log {
        out.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_cost, e.heldout_cost));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient checking

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }

    pub fn failing(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_error >= self.tolerance)
            .collect()
    }
}

fn sentence_bits(
    params: &ModelParams<f64>,
    sample: &EncodedSample<f64>,
    guide: Option<&[f64]>,
) -> Result<f64> {
    let trace = forward_sentence(params, &sample.feature, &sample.ids, guide, None)?;
    Ok(sentence_nll(&trace.prob_rows(), &sample.ids[1..])?.bits)
}

/// Compare analytic gradients of the sentence bits against 64-bit central
/// finite differences, per named tensor.
pub fn gradient_check(
    params: &ModelParams<f64>,
    sample: &EncodedSample<f64>,
    guide: Option<&[f64]>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    const STEP: f64 = 1e-4;
    let trace = forward_sentence(params, &sample.feature, &sample.ids, guide, None)?;
    let analytic = backward_sentence(params, &trace, &sample.ids[1..], 1.0)?;

    let mut work = params.clone();
    let mut entries = Vec::new();
    for name in params.tensor_names() {
        let len = params.tensor(name).data().len();
        let mut max_rel = 0.0f64;
        for k in 0..len {
            let orig = work.tensor(name).data()[k];
            work.tensor_mut(name).data_mut()[k] = orig + STEP;
            let up = sentence_bits(&work, sample, guide)?;
            work.tensor_mut(name).data_mut()[k] = orig - STEP;
            let down = sentence_bits(&work, sample, guide)?;
            work.tensor_mut(name).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.tensor(name).data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        entries.push(GradCheckEntry {
            tensor: name.to_string(),
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}

// ---------------------------------------------------------------------------
// checkpointing

const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainingConfig,
    vocab_hash: u64,
    epoch: usize,
    seed: u64,
    dims: crate::network::Dims,
    cell_output_tanh: bool,
    opt_step: u64,
    element_width: u8,
}

/// A full training snapshot: model, optimizer accumulators, config, and
/// the hash of the vocabulary the model was encoded against.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub params: ModelParams<F>,
    pub opt: OptimizerState<F>,
    pub config: TrainingConfig,
    pub vocab_hash: u64,
    pub epoch: usize,
    pub seed: u64,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash,
            epoch: self.epoch,
            seed: self.seed,
            dims: self.params.dims.clone(),
            cell_output_tanh: self.params.cell_output_tanh,
            opt_step: self.opt.step,
            element_width: F::WIDTH,
        };
        let meta_bytes = serde_json::to_vec(&meta).expect("meta serializes");
        buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_bytes);

        let names = self.params.tensor_names();
        buf.extend_from_slice(&(2 * names.len() as u32).to_le_bytes());
        // manifest: model tensors then optimizer accumulators
        for (prefix, container) in [("", &self.params), ("opt.", &self.opt.acc)] {
            for name in &names {
                let t = container.tensor(name);
                let full = format!("{prefix}{name}");
                buf.extend_from_slice(&(full.len() as u16).to_le_bytes());
                buf.extend_from_slice(full.as_bytes());
                buf.push(t.shape().len() as u8);
                for &d in t.shape() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                buf.push(F::WIDTH);
            }
        }
        for container in [&self.params, &self.opt.acc] {
            for name in &names {
                for &v in container.tensor(name).data() {
                    v.write_le(&mut buf);
                }
            }
        }
        buf.extend_from_slice(&fnv1a64(&buf).to_le_bytes());
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::CheckpointTruncated("missing checksum".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::CheckpointChecksum);
        }

        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        if meta.element_width != F::WIDTH {
            return Err(Error::Config(format!(
                "checkpoint element width {} does not match requested {}",
                meta.element_width,
                F::WIDTH
            )));
        }
        let mut params = ModelParams::<F>::zeros(meta.dims.clone());
        params.cell_output_tanh = meta.cell_output_tanh;
        let mut opt = OptimizerState::new(&params);
        opt.step = meta.opt_step;

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Data("checkpoint manifest: bad tensor name".into()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let width = r.u8()?;
            if width != F::WIDTH {
                return Err(Error::Config(format!(
                    "tensor {name}: element width {width} does not match requested {}",
                    F::WIDTH
                )));
            }
            manifest.push((name, shape));
        }
        for (name, shape) in &manifest {
            let (container, bare): (&mut ModelParams<F>, &str) = match name.strip_prefix("opt.") {
                Some(bare) => (&mut opt.acc, bare),
                None => (&mut params, name),
            };
            let t = container.tensor_mut(bare);
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "tensor {name}: shape {:?} does not match model dims {:?}",
                    shape,
                    t.shape()
                )));
            }
            let n = t.data().len();
            let raw = r.take(n * F::WIDTH as usize)?;
            for (k, chunk) in raw.chunks_exact(F::WIDTH as usize).enumerate() {
                t.data_mut()[k] = F::read_le(chunk);
            }
        }

        Ok(Self {
            params,
            opt,
            config: meta.config,
            vocab_hash: meta.vocab_hash,
            epoch: meta.epoch,
            seed: meta.seed,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Dims;
    use crate::tensor::init_uniform;
    use crate::text::{END_ID, START_ID};

    fn dims(guided: bool) -> Dims {
        Dims {
            vocab: 6,
            embed: 4,
            lstm: 5,
            mm: 5,
            img: 3,
            guide: if guided { Some(2) } else { None },
        }
    }

    fn sample(seed: u64, ids: Vec<usize>) -> EncodedSample<f64> {
        let feature = init_uniform::<f64>(&[3], 1.0, &mut SeededRng::new(seed))
            .unwrap()
            .data()
            .to_vec();
        EncodedSample {
            id: format!("img-{seed}"),
            feature,
            ids,
        }
    }

    fn uniform_rows(steps: usize, v: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0 / v as f64; v]; steps]
    }

    #[test]
    fn nll_perfect_model_is_zero_bits() {
        let mut rows = vec![vec![0.0; 4]; 3];
        for (t, row) in rows.iter_mut().enumerate() {
            row[t] = 1.0;
        }
        let nll = sentence_nll(&rows, &[0, 1, 2]).unwrap();
        assert_eq!(nll.bits, 0.0);
        assert_eq!(nll.words, 3);
    }

    #[test]
    fn nll_closed_forms() {
        // p = 0.5 on each of 4 targets → 4 bits
        let rows = vec![vec![0.5, 0.5]; 4];
        let nll = sentence_nll(&rows, &[0, 1, 0, 1]).unwrap();
        assert!((nll.bits - 4.0).abs() < 1e-12);
        // uniform over V=8, 2 targets → 6 bits
        let nll = sentence_nll(&uniform_rows(2, 8), &[3, 5]).unwrap();
        assert!((nll.bits - 6.0).abs() < 1e-12);
    }

    #[test]
    fn nll_floors_zero_probabilities() {
        let rows = vec![vec![0.0, 1.0]];
        let nll = sentence_nll(&rows, &[0]).unwrap();
        assert_eq!(nll.floored, 1);
        assert!(nll.bits.is_finite());
    }

    #[test]
    fn batch_cost_closed_forms() {
        // zero-weight model: b_softmax = 0 → uniform over V=6
        let params = ModelParams::<f64>::zeros(dims(false));
        let batch = vec![
            sample(1, vec![START_ID, 3, END_ID]),
            sample(2, vec![START_ID, 4, 5, 3, END_ID]),
        ];
        let cost = batch_cost(&params, &batch, None, 0.0).unwrap();
        assert!((cost - 6.0f64.log2()).abs() < 1e-9);
        // regularizer isolation: zero weights, so cost unchanged by l2
        let cost_l2 = batch_cost(&params, &batch, None, 1.0).unwrap();
        assert_eq!(cost, cost_l2);
    }

    #[test]
    fn batch_cost_order_invariant() {
        let params =
            ModelParams::<f64>::init_random(dims(false), 0.3, &mut SeededRng::new(3)).unwrap();
        let mut batch = vec![
            sample(1, vec![START_ID, 3, END_ID]),
            sample(2, vec![START_ID, 4, 5, 3, END_ID]),
            sample(3, vec![START_ID, 5, END_ID]),
        ];
        let a = batch_cost(&params, &batch, None, 0.0).unwrap();
        batch.reverse();
        let b = batch_cost(&params, &batch, None, 0.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_first_step_magnitude() {
        let mut params = ModelParams::<f64>::zeros(dims(false));
        let mut grads = params.zeros_like();
        grads.w_img.fill(0.2);
        let mut state = OptimizerState::new(&params);
        let config = TrainingConfig {
            learning_rate: 0.01,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            ..Default::default()
        };
        rmsprop_update(&mut params, &grads, &mut state, &config).unwrap();
        // first step: update ≈ lr·g/√(0.1·g²) = lr/√0.1
        let expected = 0.01 / 0.1f64.sqrt();
        for &v in params.w_img.data() {
            assert!((v.abs() - expected).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn rmsprop_zero_gradient_is_identity() {
        let mut params =
            ModelParams::<f64>::init_random(dims(false), 0.3, &mut SeededRng::new(5)).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        rmsprop_update(&mut params, &grads, &mut state, &TrainingConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn rmsprop_rejects_non_finite_gradients() {
        let mut params = ModelParams::<f64>::zeros(dims(false));
        let mut grads = params.zeros_like();
        grads.w_hidden.data_mut()[0] = f64::NAN;
        let mut state = OptimizerState::new(&params);
        let err =
            rmsprop_update(&mut params, &grads, &mut state, &TrainingConfig::default()).unwrap_err();
        assert!(err.to_string().contains("w_hidden"));
    }

    fn toy_corpus(n: usize) -> Vec<EncodedSample<f64>> {
        (0..n)
            .map(|i| sample(i as u64 + 10, vec![START_ID, 3 + (i % 3), 3 + ((i + 1) % 3), END_ID]))
            .collect()
    }

    #[test]
    fn train_zero_learning_rate_is_identity() {
        let mut params =
            ModelParams::<f64>::init_random(dims(false), 0.3, &mut SeededRng::new(5)).unwrap();
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let config = TrainingConfig {
            learning_rate: 0.0,
            dropout: 0.0,
            max_epochs: 3,
            heldout_fraction: 0.0,
            l2: 0.0,
            ..Default::default()
        };
        train(&mut params, &mut opt, &toy_corpus(4), &config, None).unwrap();
        for name in params.tensor_names() {
            assert_eq!(params.tensor(name).data(), before.tensor(name).data());
        }
    }

    #[test]
    fn train_identical_seeds_identical_logs() {
        let config = TrainingConfig {
            learning_rate: 1e-3,
            dropout: 0.5,
            max_epochs: 4,
            heldout_fraction: 0.0,
            seed: 77,
            ..Default::default()
        };
        let run = || {
            let mut params =
                ModelParams::<f64>::init_random(dims(false), 0.3, &mut SeededRng::new(5)).unwrap();
            let mut opt = OptimizerState::new(&params);
            let report = train(&mut params, &mut opt, &toy_corpus(6), &config, None).unwrap();
            (params, report)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        for (a, b) in r1.log.iter().zip(&r2.log) {
            assert_eq!(a.train_cost, b.train_cost);
            assert_eq!(a.heldout_cost, b.heldout_cost);
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn train_guide_mismatch_is_config_error() {
        let mut params =
            ModelParams::<f64>::init_random(dims(true), 0.3, &mut SeededRng::new(5)).unwrap();
        let mut opt = OptimizerState::new(&params);
        let err = train(
            &mut params,
            &mut opt,
            &toy_corpus(2),
            &TrainingConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn gradient_check_passes_on_fresh_model() {
        let params =
            ModelParams::<f64>::init_random(dims(true), 0.4, &mut SeededRng::new(9)).unwrap();
        let s = sample(20, vec![START_ID, 3, 4, 5, END_ID]);
        let guide = init_uniform::<f64>(&[2], 1.0, &mut SeededRng::new(21)).unwrap();
        let report = gradient_check(&params, &s, Some(guide.data()), 1e-4).unwrap();
        assert!(report.pass(), "failures: {:?}", report.failing());
        assert!(report.entries.iter().any(|e| e.tensor == "w_guide"));
    }

    #[test]
    fn gradient_check_harness_detects_corruption() {
        // double the analytic w_hidden gradient by doubling the loss scale
        // on one tensor via a doctored comparison: simulate by checking a
        // model where w_hidden's gradient is replaced with 2× itself.
        let params =
            ModelParams::<f64>::init_random(dims(false), 0.4, &mut SeededRng::new(9)).unwrap();
        let s = sample(22, vec![START_ID, 3, 4, END_ID]);
        let trace = forward_sentence(&params, &s.feature, &s.ids, None, None).unwrap();
        let mut corrupted = backward_sentence(&params, &trace, &s.ids[1..], 1.0).unwrap();
        for v in corrupted.w_hidden.data_mut() {
            *v = *v * 2.0;
        }
        // re-run the comparison manually against finite differences
        let mut work = params.clone();
        let mut max_rel = 0.0f64;
        for k in 0..work.w_hidden.data().len() {
            let orig = work.w_hidden.data()[k];
            work.w_hidden.data_mut()[k] = orig + 1e-4;
            let up = sentence_bits(&work, &s, None).unwrap();
            work.w_hidden.data_mut()[k] = orig - 1e-4;
            let down = sentence_bits(&work, &s, None).unwrap();
            work.w_hidden.data_mut()[k] = orig;
            let numeric = (up - down) / 2e-4;
            let a = corrupted.w_hidden.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        assert!(max_rel > 1e-2, "corruption not detected: {max_rel}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params =
            ModelParams::<f32>::init_random(dims(true), 0.3, &mut SeededRng::new(14)).unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.step = 42;
        opt.acc.w_img.fill(0.125);
        let ck = Checkpoint {
            params,
            opt,
            config: TrainingConfig::default(),
            vocab_hash: 0xdeadbeef,
            epoch: 7,
            seed: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(ck.params, loaded.params);
        assert_eq!(ck.opt.acc, loaded.opt.acc);
        assert_eq!(ck.opt.step, loaded.opt.step);
        assert_eq!(ck.vocab_hash, loaded.vocab_hash);
        assert_eq!(ck.epoch, loaded.epoch);
    }

    #[test]
    fn checkpoint_truncation_and_corruption_errors() {
        let params = ModelParams::<f32>::zeros(dims(false));
        let opt = OptimizerState::new(&params);
        let ck = Checkpoint {
            params,
            opt,
            config: TrainingConfig::default(),
            vocab_hash: 1,
            epoch: 0,
            seed: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::load(&trunc).unwrap_err(),
            Error::CheckpointTruncated(_) | Error::CheckpointChecksum
        ));

        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0xff;
        let cpath = dir.path().join("corrupt.ckpt");
        std::fs::write(&cpath, &corrupt).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::load(&cpath).unwrap_err(),
            Error::CheckpointChecksum
        ));

        let mut versioned = bytes.clone();
        versioned[4..8].copy_from_slice(&99u32.to_le_bytes());
        // fix up checksum so the version check is what fires
        let body_len = versioned.len() - 8;
        let sum = fnv1a64(&versioned[..body_len]);
        versioned[body_len..].copy_from_slice(&sum.to_le_bytes());
        let vpath = dir.path().join("version.ckpt");
        std::fs::write(&vpath, &versioned).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::load(&vpath).unwrap_err(),
            Error::CheckpointVersion { found: 99, .. }
        ));
    }
}
