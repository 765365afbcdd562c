use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::StudentModel;
use super::oracle::oracle_actions;
use crate::corpus::{ParallelCorpus, TokenId, TokenSequence, NUM_RESERVED, PLH};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Graph, Reduction, Var};
use crate::teacher::{BatchSampler, TrainLog, TrainOptions};

/// Per-head mean losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentLoss {
    pub deletion: f64,
    pub placeholder: f64,
    pub fill: f64,
}

impl StudentLoss {
    pub fn total(&self) -> f64 {
        self.deletion + self.placeholder + self.fill
    }
}

/// Training states and labels derived from one target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RollIn {
    /// Target with random tokens inserted.
    pub noisy: Vec<TokenId>,
    /// 1 for tokens to delete, 0 to keep, 2 for the frame.
    pub deletion_labels: Vec<usize>,
    /// Target with random tokens removed.
    pub partial: Vec<TokenId>,
    pub placeholder_labels: Vec<usize>,
    /// `partial` with placeholders inserted.
    pub masked: Vec<TokenId>,
    pub fill_labels: Vec<TokenId>,
}

const FRAME_LABEL: usize = 2;

fn framed(ids: &[TokenId]) -> Vec<TokenId> {
    TokenSequence::new(ids.to_vec()).framed()
}

/// Builds the corrupted states for a framed reference `tgt`.
pub fn roll_in<R: Rng>(model: &StudentModel, tgt: &[TokenId], rng: &mut R) -> RollIn {
    let cfg = model.config();
    let k = cfg.max_placeholders;
    let content = &tgt[1..tgt.len() - 1];

    let partial = if rng.gen_bool(cfg.roll_in.trajectory_rate) {
        trajectory_state(tgt, k, rng)
    } else {
        let rate = rng.gen_range(0.0..=cfg.roll_in.max_delete_rate);
        let kept: Vec<TokenId> = content.iter().copied().filter(|_| !rng.gen_bool(rate)).collect();
        framed(&kept)
    };
    let script = oracle_actions(&partial, tgt, k);
    let masked = script.with_placeholders(&partial, PLH);
    let fill_labels = script.fill_tokens.concat();

    let mut noisy_content = content.to_vec();
    let extra = rng.gen_range(cfg.roll_in.insert_min..=cfg.roll_in.insert_max);
    for _ in 0..extra {
        let at = rng.gen_range(0..=noisy_content.len());
        noisy_content.insert(at, rng.gen_range(NUM_RESERVED..model.vocab_size()));
    }
    let noisy = framed(&noisy_content);
    let del = oracle_actions(&noisy, tgt, k);
    let mut deletion_labels = vec![0; noisy.len()];
    for &i in &del.deletions {
        deletion_labels[i] = 1;
    }
    deletion_labels[0] = FRAME_LABEL;
    *deletion_labels.last_mut().expect("framed") = FRAME_LABEL;

    RollIn {
        noisy,
        deletion_labels,
        partial,
        placeholder_labels: script.insert_counts,
        masked,
        fill_labels,
    }
}

/// A uniformly chosen incomplete state on the chunked oracle path from the
/// empty hypothesis to `tgt`.
fn trajectory_state<R: Rng>(tgt: &[TokenId], k: usize, rng: &mut R) -> Vec<TokenId> {
    let mut path = vec![framed(&[])];
    loop {
        let last = path.last().expect("non-empty");
        let script = oracle_actions(last, tgt, k);
        if script.cost() == 0 {
            break;
        }
        let next = script.apply(last);
        if next == tgt {
            break;
        }
        path.push(next);
    }
    let i = rng.gen_range(0..path.len());
    path.swap_remove(i)
}

struct HeadSums {
    losses: Vec<Var>,
    count: usize,
}

impl HeadSums {
    fn new() -> Self {
        Self {
            losses: Vec::new(),
            count: 0,
        }
    }

    fn mean(&self, g: &mut Graph) -> Result<Option<Var>> {
        let Some((&first, rest)) = self.losses.split_first() else {
            return Ok(None);
        };
        let mut total = first;
        for &l in rest {
            total = g.add(total, l)?;
        }
        Ok(Some(g.scale(total, 1.0 / self.count as f64)))
    }
}

/// One optimiser step over `batch` of (source, distilled target) pairs.
///
/// The placeholder head sees the target length plus a fresh perturbation
/// per sentence.
pub fn student_train_step(
    model: &mut StudentModel,
    batch: &[(TokenSequence, TokenSequence)],
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<StudentLoss> {
    let cfg = model.config().clone();
    let smoothing = cfg.label_smoothing;
    let range = cfg.placeholder_pe.perturbation();
    let dropout = cfg.arch.dropout > 0.0;
    let (loss, grads) = {
        let mut g = Graph::new(model.store());
        let mut del = HeadSums::new();
        let mut plh = HeadSums::new();
        let mut fill = HeadSums::new();
        for (src, tgt) in batch {
            if tgt.is_empty() {
                warn!("skipping pair with an empty target");
                continue;
            }
            tgt.validate(model.vocab_size())?;
            let r = roll_in(model, &tgt.framed(), rng);
            let per = range.sample(rng);
            let mut drop_rng = dropout.then(|| ChaCha8Rng::seed_from_u64(rng.gen()));
            let memory = model.encode_graph(&mut g, &src.ids, drop_rng.as_mut())?;

            let logits = model.deletion_logits(&mut g, memory, &r.noisy, drop_rng.as_mut())?;
            if r.deletion_labels.iter().any(|&l| l != FRAME_LABEL) {
                del.losses.push(g.cross_entropy(logits, &r.deletion_labels, smoothing, Some(FRAME_LABEL), Reduction::Sum)?);
                del.count += r.noisy.len() - 2;
            }

            let logits = model.placeholder_logits(&mut g, memory, &r.partial, tgt.len(), per, drop_rng.as_mut())?;
            plh.losses.push(g.cross_entropy(logits, &r.placeholder_labels, smoothing, None, Reduction::Sum)?);
            plh.count += r.placeholder_labels.len();

            if let Some(logits) = model.fill_logits(&mut g, memory, &r.masked, drop_rng.as_mut())? {
                fill.losses.push(g.cross_entropy(logits, &r.fill_labels, smoothing, None, Reduction::Sum)?);
                fill.count += r.fill_labels.len();
            }
        }
        let parts = [del.mean(&mut g)?, plh.mean(&mut g)?, fill.mean(&mut g)?];
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let loss = StudentLoss {
            deletion: value(parts[0]),
            placeholder: value(parts[1]),
            fill: value(parts[2]),
        };
        let mut present = parts.iter().flatten().copied();
        let Some(mut total) = present.next() else {
            return Err(Error::Invalid("batch has no usable pairs".into()));
        };
        for v in present {
            total = g.add(total, v)?;
        }
        (loss, g.backward(total)?)
    };
    adam.update(model.store_mut(), &grads)?;
    Ok(loss)
}

pub fn train_student(model: &mut StudentModel, corpus: &ParallelCorpus, opts: &TrainOptions) -> Result<TrainLog> {
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
        let loss = student_train_step(model, &batch, &mut adam, &mut rng)?;
        window.push(loss);
        log.final_loss = loss.total();
        if step % opts.log_every.max(1) == 0 || step == opts.steps {
            let n = window.len() as f64;
            let del = window.iter().map(|l| l.deletion).sum::<f64>() / n;
            let plh = window.iter().map(|l| l.placeholder).sum::<f64>() / n;
            let fill = window.iter().map(|l| l.fill).sum::<f64>() / n;
            info!("student step {step}: del {del:.4} plh {plh:.4} fill {fill:.4}");
            log.steps.push(step);
            log.losses.push(del + plh + fill);
            window.clear();
        }
    }
    Ok(log)
}
