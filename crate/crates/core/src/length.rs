//! Target-length constraints for distillation and decoding.

use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, TokenSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ConstraintMode {
    /// True target length (oracle).
    Reference,
    /// `round(alpha · |src|)`.
    Proxy { alpha: f64 },
    /// Proxy whose ratio is fitted on the training corpus.
    Fitted,
}

impl ConstraintMode {
    pub fn validate(&self) -> Result<()> {
        if let ConstraintMode::Proxy { alpha } = self {
            if !(alpha.is_finite() && *alpha > 0.0) {
                return Err(Error::Config(format!("proxy ratio must be > 0, got {alpha}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintMode::Reference => "reference",
            ConstraintMode::Proxy { .. } => "proxy",
            ConstraintMode::Fitted => "fitted",
        }
    }
}

/// Content-token count of a reference.
pub fn reference_length(reference: &TokenSequence) -> Result<usize> {
    if reference.is_empty() {
        return Err(Error::Invalid("reference length of an empty sentence".into()));
    }
    Ok(reference.len())
}

/// `max(1, round(alpha · |src|))`, rounding half away from zero.
pub fn source_proxy(src: &TokenSequence, alpha: f64) -> usize {
    ((alpha * src.len() as f64).round() as usize).max(1)
}

/// `Σ|tgt| / Σ|src|` over the corpus.
pub fn fit_ratio(corpus: &ParallelCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot fit a length ratio on an empty corpus".into()));
    }
    let src: usize = corpus.sources().map(TokenSequence::len).sum();
    let tgt: usize = corpus.targets().map(TokenSequence::len).sum();
    if src == 0 {
        return Err(Error::Invalid("source side has zero total length".into()));
    }
    Ok(tgt as f64 / src as f64)
}

/// A constraint mode with its ratio resolved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthConstrainer {
    pub mode: ConstraintMode,
    /// Ratio used by the proxy modes.
    pub alpha: Option<f64>,
}

impl LengthConstrainer {
    /// Resolves `mode`, fitting the ratio on `train` for [`ConstraintMode::Fitted`].
    pub fn resolve(mode: ConstraintMode, train: Option<&ParallelCorpus>) -> Result<Self> {
        mode.validate()?;
        let alpha = match mode {
            ConstraintMode::Reference => None,
            ConstraintMode::Proxy { alpha } => Some(alpha),
            ConstraintMode::Fitted => {
                let corpus = train.ok_or_else(|| {
                    Error::Config("fitted length ratio needs a training corpus".into())
                })?;
                Some(fit_ratio(corpus)?)
            }
        };
        Ok(Self { mode, alpha })
    }

    pub fn constraint(&self, src: &TokenSequence, reference: Option<&TokenSequence>) -> Result<usize> {
        match (self.mode, self.alpha) {
            (ConstraintMode::Reference, _) => reference_length(
                reference.ok_or_else(|| Error::Invalid("reference constraint without a reference".into()))?,
            ),
            (_, Some(alpha)) => Ok(source_proxy(src, alpha)),
            (_, None) => Err(Error::Config("length ratio not resolved".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SyntheticTask};

    fn seq(n: usize) -> TokenSequence {
        TokenSequence::new(vec![7; n])
    }

    #[test]
    fn reference_lengths() {
        assert_eq!(reference_length(&seq(3)).unwrap(), 3);
        assert!(reference_length(&seq(0)).is_err());
    }

    #[test]
    fn proxy_examples() {
        assert_eq!(source_proxy(&seq(7), 1.0), 7);
        assert_eq!(source_proxy(&seq(1), 0.5), 1);
        assert_eq!(source_proxy(&seq(10), 1.2), 12);
        assert_eq!(source_proxy(&seq(5), 0.5), 3);
    }

    #[test]
    fn proxy_is_monotone() {
        for alpha in [0.3, 1.0, 1.7, 2.0] {
            let lens: Vec<_> = (1..40).map(|n| source_proxy(&seq(n), alpha)).collect();
            assert!(lens.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn fitted_ratios() {
        let copy = gen_synthetic(SyntheticTask::Copy, 30, 9, 5, 0).unwrap();
        assert_eq!(fit_ratio(&copy).unwrap(), 1.0);
        let exp = gen_synthetic(SyntheticTask::Expand(2), 30, 9, 5, 0).unwrap();
        assert_eq!(fit_ratio(&exp).unwrap(), 2.0);
        let c = ParallelCorpus::new("t", "x", vec![(seq(2), seq(3)), (seq(4), seq(5))]).unwrap();
        assert!((fit_ratio(&c).unwrap() - 8.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn constrainer_modes() {
        let exp = gen_synthetic(SyntheticTask::Expand(3), 10, 5, 5, 1).unwrap();
        let fitted = LengthConstrainer::resolve(ConstraintMode::Fitted, Some(&exp)).unwrap();
        assert_eq!(fitted.alpha, Some(3.0));
        assert_eq!(fitted.constraint(&seq(4), None).unwrap(), 12);
        let r = LengthConstrainer::resolve(ConstraintMode::Reference, None).unwrap();
        assert_eq!(r.constraint(&seq(4), Some(&seq(9))).unwrap(), 9);
        assert!(r.constraint(&seq(4), None).is_err());
        assert!(LengthConstrainer::resolve(ConstraintMode::Proxy { alpha: 0.0 }, None).is_err());
        assert!(LengthConstrainer::resolve(ConstraintMode::Fitted, None).is_err());
    }
}
