//! Corpus BLEU and length ratio on token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    None,
    /// Zero-match orders get `1 / (2^k · total)` for the k-th such order.
    Exp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    /// Clipped n-gram precisions as fractions, orders 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRatioReport {
    pub lr: f64,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
}

/// Flat record written as one JSON line per evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub bp: f64,
    pub lr: f64,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
}

impl EvalReport {
    pub fn new(bleu: &BleuReport, lr: &LengthRatioReport) -> Self {
        Self {
            bleu: bleu.bleu,
            p1: bleu.precisions[0],
            p2: bleu.precisions[1],
            p3: bleu.precisions[2],
            p4: bleu.precisions[3],
            bp: bleu.bp,
            lr: lr.lr,
            hyp_tokens: lr.hyp_tokens,
            ref_tokens: lr.ref_tokens,
        }
    }
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_counts(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Invalid(format!(
            "{hyps} hypotheses but {refs} references"
        )));
    }
    Ok(())
}

/// Unsmoothed corpus BLEU: clipped counts are summed over the corpus
/// before the geometric mean.
pub fn corpus_bleu<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    corpus_bleu_with(hyps, refs, Smoothing::None)
}

pub fn corpus_bleu_with<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(
    hyps: &[H],
    refs: &[R],
    smoothing: Smoothing,
) -> Result<BleuReport> {
    check_counts(hyps.len(), refs.len())?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(bleu_from_counts(matches, totals, hyp_len, ref_len, smoothing))
}

/// Sentence-level BLEU (defaults to exponential smoothing).
pub fn sentence_bleu(hyp: &[TokenId], reference: &[TokenId], smoothing: Smoothing) -> BleuReport {
    corpus_bleu_with(&[hyp], &[reference], smoothing).expect("one pair")
}

pub fn bleu_from_counts(
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
    smoothing: Smoothing,
) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        precisions[n] = if matches[n] == 0 && smoothing == Smoothing::Exp {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let bp = brevity_penalty(hyp_len, ref_len);
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * bp * log_mean.exp()
    } else {
        0.0
    };
    BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        bp,
        hyp_len,
        ref_len,
    }
}

/// `min(1, exp(1 - r/c))`, zero for an empty hypothesis side.
pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus-total length ratio `Σ|hyp| / Σ|ref|`.
pub fn length_ratio<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(hyps: &[H], refs: &[R]) -> Result<LengthRatioReport> {
    check_counts(hyps.len(), refs.len())?;
    let hyp_tokens: usize = hyps.iter().map(|h| h.as_ref().len()).sum();
    let ref_tokens: usize = refs.iter().map(|r| r.as_ref().len()).sum();
    if ref_tokens == 0 {
        return Err(Error::Invalid("reference side has no tokens".into()));
    }
    Ok(LengthRatioReport {
        lr: hyp_tokens as f64 / ref_tokens as f64,
        hyp_tokens,
        ref_tokens,
    })
}

pub fn evaluate<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(hyps: &[H], refs: &[R]) -> Result<EvalReport> {
    Ok(EvalReport::new(&corpus_bleu(hyps, refs)?, &length_ratio(hyps, refs)?))
}
