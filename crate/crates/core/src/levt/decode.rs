use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::StudentModel;
use crate::corpus::{TokenId, TokenSequence, BOS, EOS, NUM_RESERVED, PLH};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    /// Content tokens of the final state.
    pub tokens: Vec<TokenId>,
    pub iterations: usize,
    /// The last round left the state unchanged.
    pub converged: bool,
}

fn argmax_from(row: &[f64], start: usize) -> usize {
    let mut best = start;
    for i in start..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Content length past which no more placeholders are inserted.
pub fn output_cap(src_len: usize, len_constraint: usize) -> usize {
    2 * src_len.max(len_constraint) + 10
}

/// Iterative delete, insert-placeholder, fill refinement from an empty
/// hypothesis. `len_constraint` is held fixed across rounds.
pub fn refine_decode(model: &StudentModel, src: &[TokenId], len_constraint: usize, max_iters: usize) -> Result<Refinement> {
    let memory = model.encode_memory(src)?;
    let cap = output_cap(src.len(), len_constraint);
    let mut state = vec![BOS, EOS];
    for it in 1..=max_iters {
        let prev = state.clone();
        state = delete_round(model, &memory, state)?;
        state = insert_round(model, &memory, state, len_constraint, cap)?;
        state = fill_round(model, &memory, state)?;
        if state == prev {
            return Ok(finish(state, it, true));
        }
    }
    Ok(finish(state, max_iters, false))
}

fn finish(state: Vec<TokenId>, iterations: usize, converged: bool) -> Refinement {
    Refinement {
        tokens: state[1..state.len() - 1].to_vec(),
        iterations,
        converged,
    }
}

fn delete_round(model: &StudentModel, memory: &Tensor, state: Vec<TokenId>) -> Result<Vec<TokenId>> {
    if state.len() <= 2 {
        return Ok(state);
    }
    let mut g = Graph::inference(model.store());
    let m = g.input(memory.clone());
    let p = model.delete_probs(&mut g, m, &state)?;
    Ok(state.into_iter().zip(p).filter(|(_, p)| *p <= 0.5).map(|(t, _)| t).collect())
}

fn insert_round(model: &StudentModel, memory: &Tensor, state: Vec<TokenId>, len_constraint: usize, cap: usize) -> Result<Vec<TokenId>> {
    let mut g = Graph::inference(model.store());
    let m = g.input(memory.clone());
    let probs = model.placeholder_probs(&mut g, m, &state, len_constraint, 0)?;
    let mut room = (cap + 2).saturating_sub(state.len());
    let mut out = Vec::with_capacity(state.len());
    for (i, &t) in state.iter().enumerate() {
        out.push(t);
        if i + 1 < state.len() {
            let n = argmax_from(probs.row(i), 0).min(room);
            room -= n;
            out.extend(std::iter::repeat(PLH).take(n));
        }
    }
    Ok(out)
}

fn fill_round(model: &StudentModel, memory: &Tensor, mut state: Vec<TokenId>) -> Result<Vec<TokenId>> {
    let mut g = Graph::inference(model.store());
    let m = g.input(memory.clone());
    let probs = model.fill_probs(&mut g, m, &state)?;
    let mut row = 0;
    for t in state.iter_mut().filter(|t| **t == PLH) {
        *t = argmax_from(probs.row(row), NUM_RESERVED);
        row += 1;
    }
    Ok(state)
}

/// Refines every source in parallel; output order matches input order.
///
/// Constraints are required when the placeholder head is length-aware.
pub fn refine_corpus(
    model: &StudentModel,
    sources: &[TokenSequence],
    constraints: Option<&[usize]>,
    max_iters: usize,
) -> Result<Vec<Refinement>> {
    match constraints {
        Some(c) if c.len() != sources.len() => {
            return Err(Error::Invalid("one length constraint per source is required".into()));
        }
        None if model.config().placeholder_pe.is_length_aware() => {
            return Err(Error::Invalid("length-aware student needs length constraints".into()));
        }
        _ => {}
    }
    sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| refine_decode(model, &s.ids, constraints.map_or(1, |c| c[i]), max_iters))
        .collect()
}
