//! Vocabulary, whitespace tokenisation, parallel corpora and synthetic tasks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const PLH: TokenId = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>", "<plh>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_tokens(content: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of the synthetic alphabet `w0 … w{n-1}`.
    pub fn synthetic(n: usize) -> Self {
        Self::from_tokens((0..n).map(synthetic_token)).expect("distinct tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> TokenSequence {
        TokenSequence {
            ids: line.split_whitespace().map(|t| self.id(t)).collect(),
            text: Some(line.to_string()),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        if lines.len() < NUM_RESERVED
            || lines[..NUM_RESERVED].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "vocabulary must start with the reserved tokens".into(),
            });
        }
        Self::from_tokens(lines.into_iter().skip(NUM_RESERVED))
    }
}

fn synthetic_token(i: usize) -> String {
    format!("w{i}")
}

/// Content token ids; BOS/EOS framing is added by the models.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids, text: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `BOS ids… EOS`
    pub fn framed(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.ids.len() + 2);
        v.push(BOS);
        v.extend_from_slice(&self.ids);
        v.push(EOS);
        v
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: bad,
                size: vocab_size,
            });
        }
        if self.ids.contains(&PAD) {
            return Err(Error::Invalid("PAD inside a token sequence".into()));
        }
        Ok(())
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self::new(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub name: String,
    pub split: String,
    pub pairs: Vec<(TokenSequence, TokenSequence)>,
}

impl ParallelCorpus {
    pub fn new(name: impl Into<String>, split: impl Into<String>, pairs: Vec<(TokenSequence, TokenSequence)>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Invalid(format!("pair {i} has an empty side")));
        }
        Ok(Self {
            name: name.into(),
            split: split.into(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &TokenSequence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &TokenSequence> {
        self.pairs.iter().map(|(_, t)| t)
    }

    /// Writes both sides as one detokenised sentence per line.
    pub fn write(&self, vocab: &Vocab, src_path: &Path, tgt_path: &Path) -> Result<()> {
        write_side(vocab, self.sources(), src_path)?;
        write_side(vocab, self.targets(), tgt_path)
    }

    /// First `n` pairs and the rest.
    pub fn split_at(&self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let n = n.min(self.pairs.len());
        let head = ParallelCorpus {
            name: self.name.clone(),
            split: format!("{}-head", self.split),
            pairs: self.pairs[..n].to_vec(),
        };
        let tail = ParallelCorpus {
            name: self.name.clone(),
            split: format!("{}-tail", self.split),
            pairs: self.pairs[n..].to_vec(),
        };
        (head, tail)
    }
}

fn write_side<'a>(vocab: &Vocab, seqs: impl Iterator<Item = &'a TokenSequence>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in seqs {
        writeln!(w, "{}", vocab.decode(&s.ids))?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(Error::from)
}

/// Reads one side of a corpus; empty lines are rejected with their line number.
pub fn load_side(path: &Path, vocab: &Vocab) -> Result<Vec<TokenSequence>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| {
            if line.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "empty sentence".into(),
                });
            }
            Ok(vocab.encode(&line))
        })
        .collect()
}

pub fn load_parallel(src_path: &Path, tgt_path: &Path, vocab: &Vocab) -> Result<ParallelCorpus> {
    let src = load_side(src_path, vocab)?;
    let tgt = load_side(tgt_path, vocab)?;
    if src.len() != tgt.len() {
        return Err(Error::Parse {
            path: tgt_path.display().to_string(),
            line: src.len().min(tgt.len()) + 1,
            msg: format!("{} source lines but {} target lines", src.len(), tgt.len()),
        });
    }
    let name = src_path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    ParallelCorpus::new(name, "file", src.into_iter().zip(tgt).collect())
}

/// Frequency-ranked vocabulary shared by every input file.
///
/// `max_size` counts the reserved entries; ties are broken lexicographically
/// so the result does not depend on file order.
pub fn build_vocab<P: AsRef<Path>>(files: &[P], max_size: usize, min_freq: usize) -> Result<Vocab> {
    if max_size <= NUM_RESERVED {
        return Err(Error::Config(format!(
            "max_size must exceed the {NUM_RESERVED} reserved tokens"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for f in files {
        for line in read_lines(f.as_ref())? {
            for tok in line.split_whitespace() {
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok.to_string()).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    /// Each source token repeated `k` times.
    Expand(usize),
}

impl SyntheticTask {
    /// `copy`, `reverse`, or `expand<k>` / `expand:<k>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            _ => {
                let k = s
                    .strip_prefix("expand")
                    .map(|r| r.trim_start_matches(':'))
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown synthetic task `{s}`")))?;
                Ok(Self::Expand(k))
            }
        }
    }

    pub fn apply(&self, src: &[TokenId]) -> Vec<TokenId> {
        match *self {
            Self::Copy => src.to_vec(),
            Self::Reverse => src.iter().rev().copied().collect(),
            Self::Expand(k) => src.iter().flat_map(|&t| std::iter::repeat(t).take(k)).collect(),
        }
    }
}

impl std::fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Copy => write!(f, "copy"),
            Self::Reverse => write!(f, "reverse"),
            Self::Expand(k) => write!(f, "expand{k}"),
        }
    }
}

/// `n` pairs over the alphabet of [`Vocab::synthetic`]`(vocab_size)` with
/// source lengths uniform in `1..=max_len`.
pub fn gen_synthetic(task: SyntheticTask, n: usize, max_len: usize, vocab_size: usize, seed: u64) -> Result<ParallelCorpus> {
    if n == 0 || max_len == 0 || vocab_size == 0 {
        return Err(Error::Config("gen_synthetic needs n, max_len, vocab_size >= 1".into()));
    }
    if let SyntheticTask::Expand(0) = task {
        return Err(Error::Config("expand factor must be >= 1".into()));
    }
    let vocab = Vocab::synthetic(vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            let src: Vec<TokenId> = (0..len).map(|_| NUM_RESERVED + rng.gen_range(0..vocab_size)).collect();
            let tgt = task.apply(&src);
            let mk = |ids: Vec<TokenId>| TokenSequence {
                text: Some(vocab.decode(&ids)),
                ids,
            };
            (mk(src), mk(tgt))
        })
        .collect();
    ParallelCorpus::new(task.to_string(), "synthetic", pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::synthetic(3);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(PLH), "<plh>");
        assert_eq!(v.id("w0"), NUM_RESERVED);
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn load_three_lines_with_unknowns() {
        let d = tempdir().unwrap();
        let s = write(d.path(), "a.src", "w0 w1\nw2\nw0 zz\n");
        let t = write(d.path(), "a.tgt", "w1\nw2 w2\nw0\n");
        let v = Vocab::synthetic(3);
        let c = load_parallel(&s, &t, &v).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs[2].0.ids, vec![NUM_RESERVED, UNK]);
    }

    #[test]
    fn load_errors_carry_line_numbers() {
        let d = tempdir().unwrap();
        let v = Vocab::synthetic(3);
        let s = write(d.path(), "b.src", "w0\n\nw1\n");
        let t = write(d.path(), "b.tgt", "w0\nw1\nw1\n");
        match load_parallel(&s, &t, &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let s = write(d.path(), "c.src", "w0\nw1\n");
        let t = write(d.path(), "c.tgt", "w0\n");
        assert!(matches!(load_parallel(&s, &t, &v), Err(Error::Parse { .. })));
    }

    #[test]
    fn write_then_load_is_identity() {
        let d = tempdir().unwrap();
        let c = gen_synthetic(SyntheticTask::Reverse, 20, 6, 7, 1).unwrap();
        let v = Vocab::synthetic(7);
        let (s, t) = (d.path().join("x.src"), d.path().join("x.tgt"));
        c.write(&v, &s, &t).unwrap();
        let back = load_parallel(&s, &t, &v).unwrap();
        for (a, b) in c.pairs.iter().zip(&back.pairs) {
            assert_eq!(a.0.ids, b.0.ids);
            assert_eq!(a.1.ids, b.1.ids);
        }
    }

    #[test]
    fn vocab_ranking_and_min_freq() {
        let d = tempdir().unwrap();
        let f = write(d.path(), "v.txt", "a a b\nc b a\nd\n");
        let v = build_vocab(&[&f], 100, 1).unwrap();
        assert_eq!(&v.tokens()[NUM_RESERVED..], &["a", "b", "c", "d"]);
        let v = build_vocab(&[&f], 100, 2).unwrap();
        assert_eq!(&v.tokens()[NUM_RESERVED..], &["a", "b"]);
        let v = build_vocab(&[&f], 6, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert!(build_vocab(&[&f], 5, 1).is_err());
    }

    #[test]
    fn vocab_is_file_order_independent() {
        let d = tempdir().unwrap();
        let f1 = write(d.path(), "1.txt", "x y y z\n");
        let f2 = write(d.path(), "2.txt", "z q x\n");
        assert_eq!(
            build_vocab(&[&f1, &f2], 50, 1).unwrap(),
            build_vocab(&[&f2, &f1], 50, 1).unwrap()
        );
    }

    #[test]
    fn vocab_file_round_trip() {
        let d = tempdir().unwrap();
        let v = Vocab::synthetic(4);
        let p = d.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        let bad = write(d.path(), "bad.txt", "a\nb\n");
        assert!(Vocab::load(&bad).is_err());
    }

    #[test]
    fn synthetic_tasks() {
        let v = Vocab::synthetic(5);
        let src = v.encode("w0 w1").ids;
        assert_eq!(v.decode(&SyntheticTask::Copy.apply(&src)), "w0 w1");
        assert_eq!(v.decode(&SyntheticTask::Reverse.apply(&src)), "w1 w0");
        assert_eq!(v.decode(&SyntheticTask::Expand(2).apply(&src)), "w0 w0 w1 w1");

        let a = gen_synthetic(SyntheticTask::Expand(2), 50, 12, 20, 3).unwrap();
        let b = gen_synthetic(SyntheticTask::Expand(2), 50, 12, 20, 3).unwrap();
        assert_eq!(a, b);
        for (s, t) in &a.pairs {
            assert_eq!(t.len(), 2 * s.len());
            assert!((1..=12).contains(&s.len()));
        }
        assert_ne!(a, gen_synthetic(SyntheticTask::Expand(2), 50, 12, 20, 4).unwrap());
    }

    #[test]
    fn task_parsing() {
        assert_eq!(SyntheticTask::parse("expand2").unwrap(), SyntheticTask::Expand(2));
        assert_eq!(SyntheticTask::parse("expand:3").unwrap(), SyntheticTask::Expand(3));
        assert_eq!(SyntheticTask::parse("copy").unwrap(), SyntheticTask::Copy);
        assert!(SyntheticTask::parse("shuffle").is_err());
        assert!(SyntheticTask::parse("expand0").is_err());
    }

    #[test]
    fn framing_and_validation() {
        let s = TokenSequence::new(vec![7, 8]);
        assert_eq!(s.framed(), vec![BOS, 7, 8, EOS]);
        assert!(s.validate(9).is_ok());
        assert!(s.validate(8).is_err());
        assert!(TokenSequence::new(vec![7, PAD, 8]).validate(9).is_err());
    }
}
