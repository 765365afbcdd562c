//! Minimal insert/delete edit scripts between framed token sequences.

use crate::corpus::{TokenId, BOS, EOS};

/// One refinement round of edits turning a hypothesis into a reference.
///
/// Slots sit between consecutive surviving tokens (BOS and EOS always
/// survive), so there are `survivors - 1` of them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditScript {
    /// Indices into the framed hypothesis, ascending.
    pub deletions: Vec<usize>,
    /// Placeholders per slot, at most `K`.
    pub insert_counts: Vec<usize>,
    /// Tokens for the placeholders of each slot.
    pub fill_tokens: Vec<Vec<TokenId>>,
    /// Insertions withheld because a slot needed more than `K`.
    pub deferred: usize,
}

impl EditScript {
    pub fn is_complete(&self) -> bool {
        self.deferred == 0
    }

    pub fn insertions(&self) -> usize {
        self.insert_counts.iter().sum()
    }

    /// Deletions plus insertions of this round.
    pub fn cost(&self) -> usize {
        self.deletions.len() + self.insertions()
    }

    /// Keep-mask over the framed hypothesis.
    pub fn keep_mask(&self, hyp_len: usize) -> Vec<bool> {
        let mut keep = vec![true; hyp_len];
        for &d in &self.deletions {
            keep[d] = false;
        }
        keep
    }

    /// Hypothesis after deletions, before insertions.
    pub fn after_deletion(&self, hyp: &[TokenId]) -> Vec<TokenId> {
        let keep = self.keep_mask(hyp.len());
        hyp.iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| *t).collect()
    }

    /// Hypothesis after deletions with `placeholder` tokens inserted.
    pub fn with_placeholders(&self, hyp: &[TokenId], placeholder: TokenId) -> Vec<TokenId> {
        let kept = self.after_deletion(hyp);
        let mut out = Vec::with_capacity(kept.len() + self.insertions());
        for (i, &t) in kept.iter().enumerate() {
            out.push(t);
            if let Some(&n) = self.insert_counts.get(i) {
                out.extend(std::iter::repeat(placeholder).take(n));
            }
        }
        out
    }

    /// Applies deletions, then insertions with their fill tokens.
    pub fn apply(&self, hyp: &[TokenId]) -> Vec<TokenId> {
        let kept = self.after_deletion(hyp);
        let mut out = Vec::with_capacity(kept.len() + self.insertions());
        for (i, &t) in kept.iter().enumerate() {
            out.push(t);
            if let Some(fill) = self.fill_tokens.get(i) {
                out.extend_from_slice(fill);
            }
        }
        out
    }
}

/// Longest-common-subsequence lengths of all suffix pairs.
fn suffix_lcs(h: &[TokenId], r: &[TokenId]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; r.len() + 1]; h.len() + 1];
    for i in (0..h.len()).rev() {
        for j in (0..r.len()).rev() {
            t[i][j] = if h[i] == r[j] {
                1 + t[i + 1][j + 1]
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t
}

/// Minimal insert/delete script from `hyp` to `reference`.
///
/// Both sequences must be framed by BOS and EOS. Matches are taken as early
/// as possible, deletions are preferred over insertions when both are
/// optimal, and a slot needing more than `k` insertions receives its first
/// `k` tokens, leaving the rest for a later round.
pub fn oracle_actions(hyp: &[TokenId], reference: &[TokenId], k: usize) -> EditScript {
    assert!(is_framed(hyp) && is_framed(reference), "sequences must be BOS/EOS framed");
    assert!(k >= 1, "K must be at least 1");
    let h = &hyp[1..hyp.len() - 1];
    let r = &reference[1..reference.len() - 1];
    let lcs = suffix_lcs(h, r);

    let mut deletions = Vec::new();
    let mut slots: Vec<Vec<TokenId>> = vec![Vec::new()];
    let (mut i, mut j) = (0, 0);
    while i < h.len() || j < r.len() {
        if i < h.len() && j < r.len() && h[i] == r[j] {
            slots.push(Vec::new());
            i += 1;
            j += 1;
        } else if i < h.len() && (j == r.len() || lcs[i][j] == lcs[i + 1][j]) {
            deletions.push(i + 1);
            i += 1;
        } else {
            slots.last_mut().expect("non-empty").push(r[j]);
            j += 1;
        }
    }
    let mut deferred = 0;
    let mut insert_counts = Vec::with_capacity(slots.len());
    let mut fill_tokens = Vec::with_capacity(slots.len());
    for mut s in slots {
        if s.len() > k {
            deferred += s.len() - k;
            s.truncate(k);
        }
        insert_counts.push(s.len());
        fill_tokens.push(s);
    }
    EditScript {
        deletions,
        insert_counts,
        fill_tokens,
        deferred,
    }
}

pub fn is_framed(seq: &[TokenId]) -> bool {
    seq.len() >= 2 && seq[0] == BOS && seq[seq.len() - 1] == EOS
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = 10;
    const B: TokenId = 11;
    const C: TokenId = 12;
    const X: TokenId = 13;

    fn framed(ids: &[TokenId]) -> Vec<TokenId> {
        let mut v = vec![BOS];
        v.extend_from_slice(ids);
        v.push(EOS);
        v
    }

    #[test]
    fn empty_hypothesis() {
        let s = oracle_actions(&framed(&[]), &framed(&[A, B]), 8);
        assert!(s.deletions.is_empty());
        assert_eq!(s.insert_counts, vec![2]);
        assert_eq!(s.fill_tokens, vec![vec![A, B]]);
    }

    #[test]
    fn spurious_token_is_deleted() {
        let s = oracle_actions(&framed(&[A, X, B]), &framed(&[A, B]), 8);
        assert_eq!(s.deletions, vec![2]);
        assert_eq!(s.insertions(), 0);
        assert_eq!(s.apply(&framed(&[A, X, B])), framed(&[A, B]));
    }

    #[test]
    fn missing_token_is_inserted() {
        let s = oracle_actions(&framed(&[A, C]), &framed(&[A, B, C]), 8);
        assert!(s.deletions.is_empty());
        assert_eq!(s.insert_counts, vec![0, 1, 0]);
        assert_eq!(s.fill_tokens[1], vec![B]);
        assert_eq!(s.with_placeholders(&framed(&[A, C]), 4), framed(&[A, 4, C]));
    }

    #[test]
    fn substitution_costs_two() {
        let s = oracle_actions(&framed(&[A, X, C]), &framed(&[A, B, C]), 8);
        assert_eq!(s.cost(), 2);
        assert_eq!(s.apply(&framed(&[A, X, C])), framed(&[A, B, C]));
    }

    #[test]
    fn matches_are_leftmost() {
        let s = oracle_actions(&framed(&[A, A]), &framed(&[A]), 8);
        assert_eq!(s.deletions, vec![2]);
    }

    #[test]
    fn long_slots_are_chunked() {
        let reference = framed(&[A, B, C, A, B, C, A]);
        let mut hyp = framed(&[]);
        let mut rounds = 0;
        loop {
            let s = oracle_actions(&hyp, &reference, 3);
            assert!(s.insert_counts.iter().all(|&c| c <= 3));
            if s.cost() == 0 {
                break;
            }
            hyp = s.apply(&hyp);
            rounds += 1;
        }
        assert_eq!(hyp, reference);
        assert_eq!(rounds, 3);
        let first = oracle_actions(&framed(&[]), &reference, 3);
        assert_eq!(first.fill_tokens, vec![vec![A, B, C]]);
        assert_eq!(first.deferred, 4);
    }
}
