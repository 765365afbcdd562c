use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS, NUM_RESERVED, PLH};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointHeader};
use crate::nn::layers::{embed_tokens, ArchConfig, Decoder, Encoder, Linear, Regularizer};
use crate::nn::{softmax_rows, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pe::{PeKind, PerturbationRange};
use crate::teacher::{config_hash, position_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// One token table for the encoder, every head and the fill projection.
    Shared,
    /// The placeholder head gets its own token table.
    Independent,
}

impl EmbeddingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Self::Shared),
            "independent" => Ok(Self::Independent),
            _ => Err(Error::Config(format!("unknown embedding mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub arch: ArchConfig,
    pub embedding_mode: EmbeddingMode,
    /// Positional encoding of the placeholder head only.
    pub placeholder_pe: PeKind,
    /// Maximum placeholders per slot (`K`).
    pub max_placeholders: usize,
    pub max_refine_iters: usize,
    pub label_smoothing: f64,
    pub roll_in: RollInConfig,
}

/// Corruptions of the distilled target used as training states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollInConfig {
    /// Upper bound of the per-sentence deletion rate, drawn uniformly from
    /// `[0, max_delete_rate]`.
    pub max_delete_rate: f64,
    /// Number of random tokens inserted for deletion supervision is uniform
    /// in `insert_min..=insert_max`.
    pub insert_min: usize,
    pub insert_max: usize,
    /// Probability of replacing the deletion-corrupted state by a state
    /// reached from the empty hypothesis through chunked oracle rounds.
    pub trajectory_rate: f64,
}

impl Default for RollInConfig {
    fn default() -> Self {
        Self {
            max_delete_rate: 1.0,
            insert_min: 1,
            insert_max: 3,
            trajectory_rate: 0.5,
        }
    }
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            embedding_mode: EmbeddingMode::Shared,
            placeholder_pe: PeKind::PerLdpe {
                range: PerturbationRange::new(0, 2).expect("valid"),
            },
            max_placeholders: 8,
            max_refine_iters: 10,
            label_smoothing: 0.1,
            roll_in: RollInConfig::default(),
        }
    }
}

impl StudentConfig {
    /// Plain LevT: sinusoidal positions in every head.
    pub fn baseline() -> Self {
        Self {
            placeholder_pe: PeKind::Sinusoidal,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.placeholder_pe.perturbation().lo() < 0 {
            return Err(Error::Config(format!(
                "student perturbation {} must not be negative",
                self.placeholder_pe.perturbation()
            )));
        }
        if self.max_placeholders == 0 {
            return Err(Error::Config("max_placeholders must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must be in [0,1)".into()));
        }
        let r = &self.roll_in;
        if !(0.0..=1.0).contains(&r.max_delete_rate)
            || !(0.0..=1.0).contains(&r.trajectory_rate)
            || r.insert_min > r.insert_max
        {
            return Err(Error::Config("invalid roll-in configuration".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Which parameter tensor each consumer of token embeddings reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub heads: Vec<String>,
    pub encoder_embedding: String,
    pub deletion_embedding: String,
    pub placeholder_embedding: String,
    pub fill_embedding: String,
    pub fill_output: String,
}

#[derive(Clone, Debug)]
pub struct StudentModel {
    config: StudentConfig,
    vocab_size: usize,
    store: ParamStore,
    embed: ParamId,
    plh_embed: ParamId,
    encoder: Encoder,
    decoder: Decoder,
    deletion_out: Linear,
    placeholder_out: Linear,
}

/// Which head a decoder pass serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Deletion,
    Placeholder,
    Fill,
}

impl StudentModel {
    pub fn new(config: StudentConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= NUM_RESERVED {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.arch.d_model;
        let bound = (3.0 / d as f64).sqrt();
        let embed = store.add_uniform("embed", vocab_size, d, bound, &mut rng);
        let plh_embed = match config.embedding_mode {
            EmbeddingMode::Shared => embed,
            EmbeddingMode::Independent => store.add_uniform("placeholder.embed", vocab_size, d, bound, &mut rng),
        };
        let encoder = Encoder::new(&mut store, "encoder", &config.arch, &mut rng);
        let decoder = Decoder::new(&mut store, "decoder", &config.arch, &mut rng);
        let deletion_out = Linear::new(&mut store, "deletion.out", d, 2, &mut rng);
        let placeholder_out = Linear::new(&mut store, "placeholder.out", 2 * d, config.max_placeholders + 1, &mut rng);
        Ok(Self {
            config,
            vocab_size,
            store,
            embed,
            plh_embed,
            encoder,
            decoder,
            deletion_out,
            placeholder_out,
        })
    }

    pub fn config(&self) -> &StudentConfig {
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

    /// Token-embedding parameter read by each consumer.
    pub fn embedding_param(&self, head: Option<Head>) -> ParamId {
        match head {
            Some(Head::Placeholder) => self.plh_embed,
            _ => self.embed,
        }
    }

    pub fn deletion_head(&self) -> &Linear {
        &self.deletion_out
    }

    pub fn head_manifest(&self) -> HeadManifest {
        let name = |id| self.store.name(id).to_string();
        HeadManifest {
            heads: vec!["deletion".into(), "placeholder".into(), "fill".into()],
            encoder_embedding: name(self.embed),
            deletion_embedding: name(self.embed),
            placeholder_embedding: name(self.plh_embed),
            fill_embedding: name(self.embed),
            fill_output: name(self.embed),
        }
    }

    pub fn encode_graph(&self, g: &mut Graph, src: &[TokenId], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::Invalid("cannot encode an empty source".into()));
        }
        let mut ids = src.to_vec();
        ids.push(EOS);
        let pos = position_rows(PeKind::Sinusoidal, ids.len(), 0, 0, self.config.arch.d_model)?;
        let x = embed_tokens(g, self.embed, &ids, &pos)?;
        let reg = rng.map(|rng| Regularizer {
            p: self.config.arch.dropout,
            rng,
        });
        self.encoder.forward(g, x, reg)
    }

    /// Positional rows the placeholder head adds to its token embeddings.
    pub fn placeholder_positions(&self, n: usize, len_constraint: usize, per: i64) -> Result<Tensor> {
        let d = self.config.arch.d_model;
        match self.config.placeholder_pe {
            PeKind::Sinusoidal => position_rows(PeKind::Sinusoidal, n, 0, 0, d),
            kind => position_rows(kind, n, len_constraint, per, d),
        }
    }

    fn decoder_pass(
        &self,
        g: &mut Graph,
        memory: Var,
        tokens: &[TokenId],
        table: ParamId,
        positions: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let x = embed_tokens(g, table, tokens, positions)?;
        let reg = rng.map(|rng| Regularizer {
            p: self.config.arch.dropout,
            rng,
        });
        self.decoder.forward(g, x, memory, false, reg)
    }

    fn check_state(&self, tokens: &[TokenId]) -> Result<()> {
        if !super::oracle::is_framed(tokens) {
            return Err(Error::Invalid("refinement state must be BOS/EOS framed".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: t,
                size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Keep/delete logits `[n × 2]` (column 1 = delete) for a framed state.
    pub fn deletion_logits(&self, g: &mut Graph, memory: Var, tokens: &[TokenId], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.check_state(tokens)?;
        let pos = position_rows(PeKind::Sinusoidal, tokens.len(), 0, 0, self.config.arch.d_model)?;
        let h = self.decoder_pass(g, memory, tokens, self.embed, &pos, rng)?;
        self.deletion_out.forward(g, h)
    }

    /// Placeholder-count logits `[(n-1) × (K+1)]`, one row per adjacent pair.
    pub fn placeholder_logits(
        &self,
        g: &mut Graph,
        memory: Var,
        tokens: &[TokenId],
        len_constraint: usize,
        per: i64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_state(tokens)?;
        if len_constraint == 0 {
            return Err(Error::Invalid("length constraint must be >= 1".into()));
        }
        let pos = self.placeholder_positions(tokens.len(), len_constraint, per)?;
        let h = self.decoder_pass(g, memory, tokens, self.plh_embed, &pos, rng)?;
        let n = tokens.len();
        let left: Vec<usize> = (0..n - 1).collect();
        let right: Vec<usize> = (1..n).collect();
        let l = g.gather_rows(h, &left)?;
        let r = g.gather_rows(h, &right)?;
        let pair = g.concat_cols(&[l, r])?;
        self.placeholder_out.forward(g, pair)
    }

    /// Token logits `[#PLH × V]` at the placeholder positions, or `None`.
    pub fn fill_logits(&self, g: &mut Graph, memory: Var, tokens: &[TokenId], rng: Option<&mut ChaCha8Rng>) -> Result<Option<Var>> {
        self.check_state(tokens)?;
        let slots: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == PLH)
            .map(|(i, _)| i)
            .collect();
        if slots.is_empty() {
            return Ok(None);
        }
        let pos = position_rows(PeKind::Sinusoidal, tokens.len(), 0, 0, self.config.arch.d_model)?;
        let h = self.decoder_pass(g, memory, tokens, self.embed, &pos, rng)?;
        let h = g.gather_rows(h, &slots)?;
        let e = g.param(self.embed);
        Ok(Some(g.matmul_bt(h, e)?))
    }

    fn encode(&self, src: &[TokenId]) -> Result<(Graph<'_>, Var)> {
        let mut g = Graph::inference(&self.store);
        let m = self.encode_graph(&mut g, src, None)?;
        Ok((g, m))
    }

    /// Encoder states `[|src|+1 × d_model]` for `src · EOS`.
    pub fn encode_memory(&self, src: &[TokenId]) -> Result<Tensor> {
        let (g, m) = self.encode(src)?;
        Ok(g.value(m).clone())
    }

    /// Per-token deletion probabilities; BOS and EOS are pinned to 0.
    pub fn delete_forward(&self, src: &[TokenId], tokens: &[TokenId]) -> Result<Vec<f64>> {
        let (mut g, m) = self.encode(src)?;
        self.delete_probs(&mut g, m, tokens)
    }

    pub(crate) fn delete_probs(&self, g: &mut Graph, memory: Var, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let l = self.deletion_logits(g, memory, tokens, None)?;
        let p = softmax_rows(g.value(l));
        let n = tokens.len();
        Ok((0..n)
            .map(|i| if i == 0 || i == n - 1 { 0.0 } else { p.get(i, 1) })
            .collect())
    }

    /// Distribution over `0..=K` placeholders for each slot.
    pub fn placeholder_forward(&self, src: &[TokenId], tokens: &[TokenId], len_constraint: usize, per: i64) -> Result<Tensor> {
        let (mut g, m) = self.encode(src)?;
        self.placeholder_probs(&mut g, m, tokens, len_constraint, per)
    }

    pub(crate) fn placeholder_probs(&self, g: &mut Graph, memory: Var, tokens: &[TokenId], len_constraint: usize, per: i64) -> Result<Tensor> {
        let l = self.placeholder_logits(g, memory, tokens, len_constraint, per, None)?;
        Ok(softmax_rows(g.value(l)))
    }

    /// Vocabulary distribution per placeholder; empty without placeholders.
    pub fn fill_forward(&self, src: &[TokenId], tokens: &[TokenId]) -> Result<Tensor> {
        let (mut g, m) = self.encode(src)?;
        self.fill_probs(&mut g, m, tokens)
    }

    pub(crate) fn fill_probs(&self, g: &mut Graph, memory: Var, tokens: &[TokenId]) -> Result<Tensor> {
        match self.fill_logits(g, memory, tokens, None)? {
            Some(l) => Ok(softmax_rows(g.value(l))),
            None => Ok(Tensor::zeros(0, self.vocab_size)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model: "student".into(),
            config_hash: self.config.hash(),
            config: serde_json::json!({ "student": self.config, "vocab_size": self.vocab_size }),
            tensors: checkpoint::tensor_entries(&self.store),
            extra: serde_json::to_value(self.head_manifest())?,
        };
        checkpoint::save(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = checkpoint::load(path)?;
        if header.model != "student" {
            return Err(Error::Checkpoint(format!("expected a student checkpoint, found `{}`", header.model)));
        }
        let config: StudentConfig = serde_json::from_value(header.config["student"].clone())?;
        let vocab_size = header.config["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing vocab_size".into()))? as usize;
        let mut model = Self::new(config, vocab_size, 0)?;
        let manifest: HeadManifest = serde_json::from_value(header.extra.clone())?;
        if manifest != model.head_manifest() {
            return Err(Error::Checkpoint("head manifest does not match the configuration".into()));
        }
        model.store.load_from(&store)?;
        Ok(model)
    }
}
