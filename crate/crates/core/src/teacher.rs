//! Autoregressive encoder–decoder teacher.
//!
//! The encoder always uses sinusoidal positions; the decoder uses either
//! sinusoidal positions or the (perturbed) length-difference encoding, in
//! which case decoding needs a target-length constraint.

use std::cmp::Ordering;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, TokenId, TokenSequence, BOS, EOS, NUM_RESERVED, PAD};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointHeader};
use crate::nn::layers::{embed_tokens, ArchConfig, Decoder, Encoder, LayerCache, Regularizer};
use crate::nn::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Reduction, Tensor, Var};
use crate::pe::{build_pe_table, PeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub arch: ArchConfig,
    pub decoder_pe: PeKind,
    /// How far past the length constraint decoding may run.
    pub max_len_margin: usize,
    pub label_smoothing: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            decoder_pe: PeKind::Sinusoidal,
            max_len_margin: 10,
            label_smoothing: 0.1,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub(crate) fn config_hash<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serialises");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// Positional rows `0..n` for one sequence.
pub(crate) fn position_rows(kind: PeKind, n: usize, len: usize, per: i64, d: usize) -> Result<Tensor> {
    let table = build_pe_table(kind, len, per, n.max(1), d)?;
    let mut data = table.data().to_vec();
    data.truncate(n * d);
    Tensor::matrix(n, d, data)
}

/// Positional row for a single position.
fn position_row(kind: PeKind, pos: usize, len: usize, d: usize) -> Result<Tensor> {
    let v = match kind {
        PeKind::Sinusoidal => crate::pe::sinusoidal_pe(pos, d)?,
        _ => crate::pe::perldpe(pos, len, 0, d)?,
    };
    Ok(Tensor::row_vector(v))
}

#[derive(Clone, Debug)]
pub struct TeacherModel {
    config: TeacherConfig,
    vocab_size: usize,
    store: ParamStore,
    embed: ParamId,
    encoder: Encoder,
    decoder: Decoder,
}

/// A decoded hypothesis without BOS/EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities including the final EOS.
    pub log_prob: f64,
    /// `log_prob / (len + 1)`.
    pub score: f64,
}

impl TeacherModel {
    pub fn new(config: TeacherConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= NUM_RESERVED {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.arch.d_model;
        let embed = store.add_uniform("embed", vocab_size, d, (3.0 / d as f64).sqrt(), &mut rng);
        let encoder = Encoder::new(&mut store, "encoder", &config.arch, &mut rng);
        let decoder = Decoder::new(&mut store, "decoder", &config.arch, &mut rng);
        Ok(Self {
            config,
            vocab_size,
            store,
            embed,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        TokenSequence::new(ids.to_vec()).validate(self.vocab_size)
    }

    /// Encoder states for `src · EOS`.
    pub fn encode_graph<R: Rng>(&self, g: &mut Graph, src: &[TokenId], rng: Option<&mut R>) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::Invalid("cannot encode an empty source".into()));
        }
        self.check_tokens(src)?;
        let mut ids = src.to_vec();
        ids.push(EOS);
        let d = self.config.arch.d_model;
        let pos = position_rows(PeKind::Sinusoidal, ids.len(), 0, 0, d)?;
        let x = embed_tokens(g, self.embed, &ids, &pos)?;
        let reg = rng.map(|rng| Regularizer {
            p: self.config.arch.dropout,
            rng,
        });
        self.encoder.forward(g, x, reg)
    }

    /// Memory `[|src|+1 × d_model]`.
    pub fn encode(&self, src: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let m = self.encode_graph::<ChaCha8Rng>(&mut g, &src.ids, None)?;
        Ok(g.value(m).clone())
    }

    /// Teacher-forced logits `[|tgt|+1 × V]` for inputs `BOS · tgt`.
    pub fn decoder_logits<R: Rng>(
        &self,
        g: &mut Graph,
        memory: Var,
        tgt: &[TokenId],
        len_constraint: usize,
        per: i64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        self.check_tokens(tgt)?;
        let mut input = Vec::with_capacity(tgt.len() + 1);
        input.push(BOS);
        input.extend_from_slice(tgt);
        let d = self.config.arch.d_model;
        let pos = position_rows(self.config.decoder_pe, input.len(), len_constraint, per, d)?;
        let x = embed_tokens(g, self.embed, &input, &pos)?;
        let reg = rng.as_deref_mut().map(|rng| Regularizer {
            p: self.config.arch.dropout,
            rng,
        });
        let h = self.decoder.forward(g, x, memory, true, reg)?;
        let e = g.param(self.embed);
        g.matmul_bt(h, e)
    }

    /// Summed token cross-entropy of one pair and its token count.
    pub fn sentence_loss<R: Rng>(
        &self,
        g: &mut Graph,
        src: &[TokenId],
        tgt: &[TokenId],
        len_constraint: usize,
        per: i64,
        mut rng: Option<&mut R>,
    ) -> Result<(Var, usize)> {
        let memory = self.encode_graph(g, src, rng.as_deref_mut())?;
        let logits = self.decoder_logits(g, memory, tgt, len_constraint, per, rng)?;
        let mut targets = tgt.to_vec();
        targets.push(EOS);
        let loss = g.cross_entropy(logits, &targets, self.config.label_smoothing, Some(PAD), Reduction::Sum)?;
        Ok((loss, targets.len()))
    }

    /// One optimiser step on `batch`; returns the per-token loss.
    ///
    /// The decoder constraint is the reference length plus a fresh
    /// perturbation per sentence. Pairs with an empty target are skipped.
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[(TokenSequence, TokenSequence)],
        adam: &mut AdamState,
        rng: &mut R,
    ) -> Result<f64> {
        let range = self.config.decoder_pe.perturbation();
        let dropout = self.config.arch.dropout > 0.0;
        let (loss_value, grads) = {
            let mut g = Graph::new(&self.store);
            let mut losses = Vec::with_capacity(batch.len());
            let mut tokens = 0;
            for (src, tgt) in batch {
                if tgt.is_empty() {
                    warn!("skipping pair with an empty reference");
                    continue;
                }
                let per = range.sample(rng);
                let r = if dropout { Some(&mut *rng) } else { None };
                let (l, n) = self.sentence_loss(&mut g, &src.ids, &tgt.ids, tgt.len(), per, r)?;
                losses.push(l);
                tokens += n;
            }
            let Some(&first) = losses.first() else {
                return Err(Error::Invalid("batch has no usable pairs".into()));
            };
            let mut total = first;
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let mean = g.scale(total, 1.0 / tokens as f64);
            (g.value(mean).item(), g.backward(mean)?)
        };
        adam.update(&mut self.store, &grads)?;
        Ok(loss_value)
    }

    fn step_log_probs(&self, memory: &Tensor, cache: &mut [LayerCache], token: TokenId, pos: usize, len: usize) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let row = position_row(self.config.decoder_pe, pos, len, self.config.arch.d_model)?;
        let x = embed_tokens(&mut g, self.embed, &[token], &row)?;
        let h = self.decoder.forward_cached(&mut g, x, memory, cache)?;
        let e = g.param(self.embed);
        let logits = g.matmul_bt(h, e)?;
        Ok(log_softmax(g.value(logits).row(0)))
    }

    fn decode_limit(&self, src: &TokenSequence, len_constraint: Option<usize>, max_len: Option<usize>) -> Result<(usize, usize)> {
        if self.config.decoder_pe.is_length_aware() {
            let len = len_constraint.ok_or_else(|| {
                Error::Invalid("length-aware decoder needs a length constraint".into())
            })?;
            Ok((len, len + self.config.max_len_margin))
        } else {
            Ok((0, max_len.unwrap_or(2 * src.len() + self.config.max_len_margin)))
        }
    }

    /// Greedy left-to-right decoding.
    pub fn greedy_decode(&self, src: &TokenSequence, len_constraint: Option<usize>, max_len: Option<usize>) -> Result<Hypothesis> {
        let (len, limit) = self.decode_limit(src, len_constraint, max_len)?;
        let memory = self.encode(src)?;
        let mut cache = self.decoder.new_cache();
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        let mut last = BOS;
        for pos in 0..=limit {
            let lp = self.step_log_probs(&memory, &mut cache, last, pos, len)?;
            let next = if pos == limit { EOS } else { best_token(&lp) };
            log_prob += lp[next];
            if next == EOS {
                break;
            }
            tokens.push(next);
            last = next;
        }
        let score = log_prob / (tokens.len() + 1) as f64;
        Ok(Hypothesis { tokens, log_prob, score })
    }

    /// Length-normalised beam search.
    ///
    /// Decoding stops at EOS or after `len_constraint + max_len_margin`
    /// tokens for length-aware decoders (`max_len` otherwise), where EOS is
    /// forced. The perturbation is always zero here.
    pub fn beam_decode(
        &self,
        src: &TokenSequence,
        len_constraint: Option<usize>,
        beam: usize,
        max_len: Option<usize>,
    ) -> Result<Hypothesis> {
        if beam < 1 {
            return Err(Error::Config("beam size must be >= 1".into()));
        }
        let (len, limit) = self.decode_limit(src, len_constraint, max_len)?;
        let memory = self.encode(src)?;

        struct Live {
            tokens: Vec<TokenId>,
            log_prob: f64,
            cache: Vec<LayerCache>,
        }
        let mut live = vec![Live {
            tokens: Vec::new(),
            log_prob: 0.0,
            cache: self.decoder.new_cache(),
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for pos in 0..=limit {
            let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
            for (i, h) in live.iter_mut().enumerate() {
                let last = h.tokens.last().copied().unwrap_or(BOS);
                let lp = self.step_log_probs(&memory, &mut h.cache, last, pos, len)?;
                if pos == limit {
                    candidates.push((i, EOS, h.log_prob + lp[EOS]));
                } else {
                    for t in top_tokens(&lp, 2 * beam) {
                        candidates.push((i, t, h.log_prob + lp[t]));
                    }
                }
            }
            candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

            let mut next = Vec::with_capacity(beam);
            for (rank, (i, t, lp)) in candidates.into_iter().enumerate() {
                if t == EOS {
                    // Only EOS among the top `beam` candidates finalises.
                    if rank < beam && finished.len() < beam {
                        let tokens = live[i].tokens.clone();
                        let score = lp / (tokens.len() + 1) as f64;
                        finished.push(Hypothesis { tokens, log_prob: lp, score });
                    }
                } else if next.len() < beam {
                    let mut tokens = live[i].tokens.clone();
                    tokens.push(t);
                    next.push(Live {
                        tokens,
                        log_prob: lp,
                        cache: live[i].cache.clone(),
                    });
                }
                if next.len() == beam && finished.len() >= beam {
                    break;
                }
            }
            if finished.len() >= beam || next.is_empty() {
                break;
            }
            live = next;
        }
        finished
            .into_iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal))
            .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
    }

    /// Most probable non-EOS first token.
    pub fn first_token(&self, src: &TokenSequence, len_constraint: Option<usize>) -> Result<TokenId> {
        let (len, _) = self.decode_limit(src, len_constraint, None)?;
        let memory = self.encode(src)?;
        let mut cache = self.decoder.new_cache();
        let lp = self.step_log_probs(&memory, &mut cache, BOS, 0, len)?;
        let mut best = NUM_RESERVED;
        for t in NUM_RESERVED..lp.len() {
            if lp[t] > lp[best] {
                best = t;
            }
        }
        Ok(best)
    }

    /// Total log-probability of `tgt · EOS` under the model with `per = 0`.
    pub fn score(&self, src: &TokenSequence, tgt: &[TokenId], len_constraint: usize) -> Result<f64> {
        let mut g = Graph::inference(&self.store);
        let memory = self.encode_graph::<ChaCha8Rng>(&mut g, &src.ids, None)?;
        let logits = self.decoder_logits::<ChaCha8Rng>(&mut g, memory, tgt, len_constraint, 0, None)?;
        let lv = g.value(logits);
        let mut total = 0.0;
        for (r, &t) in tgt.iter().chain(std::iter::once(&EOS)).enumerate() {
            total += log_softmax(lv.row(r))[t];
        }
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model: "teacher".into(),
            config_hash: self.config.hash(),
            config: serde_json::json!({ "teacher": self.config, "vocab_size": self.vocab_size }),
            tensors: checkpoint::tensor_entries(&self.store),
            extra: serde_json::Value::Null,
        };
        checkpoint::save(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = checkpoint::load(path)?;
        if header.model != "teacher" {
            return Err(Error::Checkpoint(format!("expected a teacher checkpoint, found `{}`", header.model)));
        }
        let config: TeacherConfig = serde_json::from_value(header.config["teacher"].clone())?;
        let vocab_size = header.config["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing vocab_size".into()))? as usize;
        let mut model = Self::new(config, vocab_size, 0)?;
        model.store.load_from(&store)?;
        Ok(model)
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Tokens that may be generated: everything but PAD, BOS, UNK and PLH.
fn generable(t: TokenId) -> bool {
    t == EOS || t >= NUM_RESERVED
}

fn best_token(lp: &[f64]) -> TokenId {
    top_tokens(lp, 1)[0]
}

fn top_tokens(lp: &[f64], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..lp.len()).filter(|&t| generable(t)).collect();
    ids.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 1,
            log_every: 100,
        }
    }
}

/// Mean loss per logging window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Epoch-shuffled mini-batches drawn deterministically from `seed`.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub fn train_teacher(model: &mut TeacherModel, corpus: &ParallelCorpus, opts: &TrainOptions) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let mut adam = AdamState::new(model.store(), opts.adam);
    let mut sampler = BatchSampler::new(corpus.len(), ChaCha8Rng::seed_from_u64(opts.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut log = TrainLog::default();
    let mut window = Vec::new();
    for step in 1..=opts.steps {
        let batch: Vec<_> = sampler
            .next_batch(opts.batch_size)
            .into_iter()
            .map(|i| corpus.pairs[i].clone())
            .collect();
        let loss = model.train_step(&batch, &mut adam, &mut rng)?;
        window.push(loss);
        log.final_loss = loss;
        if step % opts.log_every.max(1) == 0 || step == opts.steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            log::info!("teacher step {step}: loss {mean:.4}");
            log.steps.push(step);
            log.losses.push(mean);
            window.clear();
        }
    }
    Ok(log)
}

/// Beam-decodes every source in parallel; output order matches input order.
pub fn decode_corpus(
    model: &TeacherModel,
    sources: &[TokenSequence],
    constraints: Option<&[usize]>,
    beam: usize,
) -> Result<Vec<Hypothesis>> {
    if let Some(c) = constraints {
        if c.len() != sources.len() {
            return Err(Error::Invalid("one length constraint per source is required".into()));
        }
    }
    sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| model.beam_decode(s, constraints.map(|c| c[i]), beam, None))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::PerturbationRange;

    fn tiny(pe: PeKind) -> TeacherConfig {
        TeacherConfig {
            arch: ArchConfig {
                layers: 1,
                heads: 2,
                d_model: 16,
                d_ff: 32,
                dropout: 0.0,
            },
            decoder_pe: pe,
            max_len_margin: 4,
            label_smoothing: 0.0,
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec())
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = TeacherModel::new(tiny(PeKind::Sinusoidal), 12, 3).unwrap();
        let a = m.encode(&seq(&[6])).unwrap();
        assert_eq!(a.shape(), &[2, 16]);
        assert_eq!(m.encode(&seq(&[6, 7, 8])).unwrap(), m.encode(&seq(&[6, 7, 8])).unwrap());
        assert_ne!(m.encode(&seq(&[6, 7, 8])).unwrap(), m.encode(&seq(&[7, 6, 8])).unwrap());
        assert!(m.encode(&seq(&[])).is_err());
        assert!(m.encode(&seq(&[12])).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let m = TeacherModel::new(tiny(PeKind::Sinusoidal), 12, 4).unwrap();
        let logits = |tgt: &[usize]| {
            let mut g = Graph::inference(m.store());
            let mem = m.encode_graph::<ChaCha8Rng>(&mut g, &[5, 6, 7], None).unwrap();
            let l = m.decoder_logits::<ChaCha8Rng>(&mut g, mem, tgt, tgt.len(), 0, None).unwrap();
            g.value(l).clone()
        };
        let a = logits(&[5, 6, 7, 8]);
        let b = logits(&[5, 6, 9, 10]);
        // rows 0..=2 see BOS,5,6 only
        assert_eq!(&a.data()[..3 * 12], &b.data()[..3 * 12]);
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn sinusoidal_loss_ignores_length_constraint() {
        let m = TeacherModel::new(tiny(PeKind::Sinusoidal), 12, 5).unwrap();
        let loss = |len| {
            let mut g = Graph::inference(m.store());
            let (l, _) = m.sentence_loss::<ChaCha8Rng>(&mut g, &[5, 6], &[7, 8, 9], len, 0, None).unwrap();
            g.value(l).item()
        };
        assert_eq!(loss(3), loss(11));

        let range = PerturbationRange::new(-4, 4).unwrap();
        let m = TeacherModel::new(tiny(PeKind::PerLdpe { range }), 12, 5).unwrap();
        let loss = |len| {
            let mut g = Graph::inference(m.store());
            let (l, _) = m.sentence_loss::<ChaCha8Rng>(&mut g, &[5, 6], &[7, 8, 9], len, 0, None).unwrap();
            g.value(l).item()
        };
        assert_ne!(loss(3), loss(11));
    }

    #[test]
    fn zero_range_training_is_plain_ldpe() {
        let run = |pe| {
            let mut m = TeacherModel::new(tiny(pe), 12, 6).unwrap();
            let mut adam = AdamState::new(m.store(), AdamConfig::default());
            let batch = vec![(seq(&[5, 6]), seq(&[7, 8, 9]))];
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            m.train_step(&batch, &mut adam, &mut rng).unwrap()
        };
        let zero = PeKind::PerLdpe {
            range: PerturbationRange::zero(),
        };
        assert_eq!(run(zero), run(PeKind::Ldpe));
    }

    #[test]
    fn beam_one_is_greedy_and_deterministic() {
        let m = TeacherModel::new(tiny(PeKind::Sinusoidal), 12, 7).unwrap();
        for src in [seq(&[5]), seq(&[6, 7, 8]), seq(&[11, 10, 9, 8])] {
            let g = m.greedy_decode(&src, None, Some(6)).unwrap();
            let b = m.beam_decode(&src, None, 1, Some(6)).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert!((g.log_prob - b.log_prob).abs() < 1e-12);
            assert_eq!(b, m.beam_decode(&src, None, 1, Some(6)).unwrap());
            assert!(b.tokens.len() <= 6);
            let rescored = m.score(&src, &b.tokens, 0).unwrap();
            assert!((rescored - b.log_prob).abs() < 1e-9);
        }
        assert!(m.beam_decode(&seq(&[5]), None, 0, None).is_err());
    }

    #[test]
    fn length_aware_decoder_requires_constraint() {
        let m = TeacherModel::new(tiny(PeKind::Ldpe), 12, 8).unwrap();
        assert!(m.beam_decode(&seq(&[5, 6]), None, 2, None).is_err());
        let h = m.beam_decode(&seq(&[5, 6]), Some(2), 2, None).unwrap();
        assert!(h.tokens.len() <= 2 + 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = TeacherModel::new(tiny(PeKind::Ldpe), 12, 9).unwrap();
        let p = dir.path().join("t.ckpt");
        m.save(&p).unwrap();
        let back = TeacherModel::load(&p).unwrap();
        assert_eq!(back.config(), m.config());
        let src = seq(&[5, 6, 7]);
        assert_eq!(back.encode(&src).unwrap(), m.encode(&src).unwrap());
    }
}
