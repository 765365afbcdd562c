//! Sinusoidal and length-difference positional encodings.
//!
//! The length-difference variants encode the *remaining* length
//! `len - pos + per` instead of the absolute position, so the final content
//! token of a sequence whose length matches the constraint sees argument 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BASE: f64 = 10000.0;

/// Inclusive integer range for perturbation draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRange")]
pub struct PerturbationRange {
    lo: i64,
    hi: i64,
}

#[derive(Deserialize)]
struct RawRange {
    lo: i64,
    hi: i64,
}

impl TryFrom<RawRange> for PerturbationRange {
    type Error = Error;

    fn try_from(r: RawRange) -> Result<Self> {
        Self::new(r.lo, r.hi)
    }
}

impl PerturbationRange {
    pub fn new(lo: i64, hi: i64) -> Result<Self> {
        if lo > hi {
            return Err(Error::Config(format!(
                "perturbation range [{lo},{hi}] has lo > hi"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// The degenerate range `[0, 0]`.
    pub const fn zero() -> Self {
        Self { lo: 0, hi: 0 }
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.hi
    }

    /// Draws a uniform integer in `[lo, hi]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        sample_perturbation(*self, rng)
    }

    /// Parses `"lo,hi"`.
    pub fn parse(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("expected `lo,hi`, got `{s}`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<i64>()
                .map_err(|e| Error::Config(format!("bad perturbation bound `{v}`: {e}")))
        };
        Self::new(parse(lo)?, parse(hi)?)
    }
}

impl std::fmt::Display for PerturbationRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PeKind {
    Sinusoidal,
    Ldpe,
    PerLdpe { range: PerturbationRange },
}

impl PeKind {
    pub fn is_length_aware(&self) -> bool {
        !matches!(self, PeKind::Sinusoidal)
    }

    /// Perturbation range used during training; `[0,0]` for the
    /// unperturbed kinds.
    pub fn perturbation(&self) -> PerturbationRange {
        match self {
            PeKind::PerLdpe { range } => *range,
            _ => PerturbationRange::zero(),
        }
    }
}

/// One scalar evaluation point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeQuery {
    pub pos: usize,
    pub len: usize,
    pub per: i64,
    pub d: usize,
}

impl PeQuery {
    pub fn eval(&self) -> Result<Vec<f64>> {
        perldpe(self.pos, self.len, self.per, self.d)
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dimension must be even and >= 2, got {d}"
        )));
    }
    Ok(())
}

fn encode(arg: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = arg / BASE.powf((2 * i) as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

pub fn sinusoidal_pe(pos: usize, d: usize) -> Result<Vec<f64>> {
    check_dim(d)?;
    Ok(encode(pos as f64, d))
}

/// Perturbed length-difference encoding of `len - pos + per`.
///
/// Negative arguments (decoding past the constraint) are evaluated as-is.
pub fn perldpe(pos: usize, len: usize, per: i64, d: usize) -> Result<Vec<f64>> {
    check_dim(d)?;
    let arg = len as i64 - pos as i64 + per;
    Ok(encode(arg as f64, d))
}

pub fn ldpe(pos: usize, len: usize, d: usize) -> Result<Vec<f64>> {
    perldpe(pos, len, 0, d)
}

pub fn sample_perturbation<R: Rng + ?Sized>(range: PerturbationRange, rng: &mut R) -> i64 {
    rng.gen_range(range.lo..=range.hi)
}

/// Precomputed encoding rows for positions `0..max_pos`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeTable {
    kind: PeKind,
    d: usize,
    rows: Vec<f64>,
    len_used: usize,
    per_used: i64,
}

impl PeTable {
    pub fn kind(&self) -> PeKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn max_pos(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn len_used(&self) -> usize {
        self.len_used
    }

    pub fn per_used(&self) -> i64 {
        self.per_used
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.rows[pos * self.d..(pos + 1) * self.d]
    }

    /// Row-major `[max_pos × d]` data.
    pub fn data(&self) -> &[f64] {
        &self.rows
    }
}

/// Builds a table of `max_pos` rows.
///
/// `len` and `per` are ignored for [`PeKind::Sinusoidal`]; `per` is ignored
/// for [`PeKind::Ldpe`].
pub fn build_pe_table(
    kind: PeKind,
    len: usize,
    per: i64,
    max_pos: usize,
    d: usize,
) -> Result<PeTable> {
    check_dim(d)?;
    if max_pos == 0 {
        return Err(Error::Config("PE table needs max_pos >= 1".into()));
    }
    let (len_used, per_used) = match kind {
        PeKind::Sinusoidal => (0, 0),
        PeKind::Ldpe => (len, 0),
        PeKind::PerLdpe { .. } => (len, per),
    };
    let mut rows = Vec::with_capacity(max_pos * d);
    for pos in 0..max_pos {
        let row = match kind {
            PeKind::Sinusoidal => encode(pos as f64, d),
            _ => encode((len_used as i64 - pos as i64 + per_used) as f64, d),
        };
        rows.extend(row);
    }
    Ok(PeTable {
        kind,
        d,
        rows,
        len_used,
        per_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn sinusoidal_examples() {
        assert_eq!(sinusoidal_pe(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        close(&sinusoidal_pe(1, 2).unwrap(), &[1f64.sin(), 1f64.cos()]);
        close(
            &sinusoidal_pe(3, 4).unwrap(),
            &[3f64.sin(), 3f64.cos(), 0.03f64.sin(), 0.03f64.cos()],
        );
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(sinusoidal_pe(0, 3), Err(Error::Config(_))));
        assert!(matches!(perldpe(0, 1, 0, 5), Err(Error::Config(_))));
        assert!(build_pe_table(PeKind::Sinusoidal, 0, 0, 1, 7).is_err());
    }

    #[test]
    fn perldpe_examples() {
        assert_eq!(perldpe(6, 6, 0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        close(
            &perldpe(2, 10, 3, 4).unwrap(),
            &[11f64.sin(), 11f64.cos(), 0.11f64.sin(), 0.11f64.cos()],
        );
        assert_eq!(perldpe(3, 9, 0, 8).unwrap(), perldpe(8, 14, 0, 8).unwrap());
    }

    #[test]
    fn negative_argument_is_legal() {
        let v = perldpe(10, 4, 0, 2).unwrap();
        close(&v, &[(-6f64).sin(), (-6f64).cos()]);
    }

    #[test]
    fn table_examples() {
        let t = build_pe_table(PeKind::Sinusoidal, 0, 0, 1, 4).unwrap();
        assert_eq!(t.max_pos(), 1);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);

        let range = PerturbationRange::new(0, 2).unwrap();
        let t = build_pe_table(PeKind::PerLdpe { range }, 4, 0, 5, 2).unwrap();
        assert_eq!(t.row(4), &[0.0, 1.0]);
        let t = build_pe_table(PeKind::PerLdpe { range }, 4, 1, 5, 2).unwrap();
        close(t.row(4), &[1f64.sin(), 1f64.cos()]);
        assert_eq!(t.per_used(), 1);
    }

    #[test]
    fn ldpe_table_ignores_perturbation() {
        let a = build_pe_table(PeKind::Ldpe, 5, 3, 8, 6).unwrap();
        let b = build_pe_table(PeKind::Ldpe, 5, 0, 8, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_range_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = PerturbationRange::zero();
        assert!((0..1000).all(|_| r.sample(&mut rng) == 0));
    }

    #[test]
    fn student_range_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = PerturbationRange::new(0, 2).unwrap();
        let mut seen = [false; 3];
        for _ in 0..1000 {
            let v = r.sample(&mut rng);
            assert!((0..=2).contains(&v));
            seen[v as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn parse_range() {
        assert_eq!(
            PerturbationRange::parse("-4,4").unwrap(),
            PerturbationRange::new(-4, 4).unwrap()
        );
        assert!(PerturbationRange::parse("3,1").is_err());
        assert!(PerturbationRange::parse("3").is_err());
    }

    #[test]
    fn same_seed_same_draws() {
        let r = PerturbationRange::new(-4, 4).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<_> = (0..100).map(|_| r.sample(&mut a)).collect();
        let ys: Vec<_> = (0..100).map(|_| r.sample(&mut b)).collect();
        assert_eq!(xs, ys);
    }

    proptest! {
        #[test]
        fn bounded(pos in 0usize..10_000, len in 0usize..10_000, per in -8i64..8, half in 1usize..=256) {
            let d = 2 * half;
            for v in perldpe(pos, len, per, d).unwrap().into_iter().chain(sinusoidal_pe(pos, d).unwrap()) {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn shift_identity(pos in 0usize..500, len in 0usize..500, per in -4i64..=4, c in 0usize..100, half in 1usize..16) {
            let d = 2 * half;
            prop_assert_eq!(perldpe(pos, len, per, d).unwrap(), perldpe(pos + c, len + c, per, d).unwrap());
        }

        #[test]
        fn reduces_to_sinusoidal(pos in 0usize..200, extra in 0usize..200, half in 1usize..16) {
            let d = 2 * half;
            let len = pos + extra;
            prop_assert_eq!(ldpe(pos, len, d).unwrap(), sinusoidal_pe(extra, d).unwrap());
        }
    }
}
