//! Sequence-level distillation: the teacher's beam output becomes the
//! student's training target.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::length::{ConstraintMode, LengthConstrainer};
use crate::pe::PeKind;
use crate::teacher::{decode_corpus, TeacherModel};

pub const SRC_FILE: &str = "distill.src";
pub const TGT_FILE: &str = "distill.tgt";
pub const PROVENANCE_FILE: &str = "distill.provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_config_hash: String,
    pub teacher_pe: PeKind,
    /// `None` when the teacher decodes without a length constraint.
    pub constraint: Option<ConstraintMode>,
    pub beam: usize,
    pub pairs: usize,
    /// Empty teacher outputs replaced by the most probable first token.
    pub replaced_empty: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledCorpus {
    pub corpus: ParallelCorpus,
    pub provenance: Provenance,
}

/// Beam-decodes every training source with `per = 0`.
///
/// Length-aware teachers decode with the reference length of each training
/// target; any other constraint mode is rejected for them. Sinusoidal
/// teachers get no constraint.
pub fn distill(teacher: &TeacherModel, train: &ParallelCorpus, constraint: ConstraintMode, beam: usize) -> Result<DistilledCorpus> {
    if train.is_empty() {
        return Err(Error::Invalid("cannot distill an empty corpus".into()));
    }
    for (s, t) in &train.pairs {
        s.validate(teacher.vocab_size())?;
        t.validate(teacher.vocab_size())?;
    }
    let pe = teacher.config().decoder_pe;
    let lengths = if pe.is_length_aware() {
        if constraint != ConstraintMode::Reference {
            return Err(Error::Config(format!(
                "a length-aware teacher distills with reference lengths, not `{}`",
                constraint.name()
            )));
        }
        let c = LengthConstrainer::resolve(constraint, Some(train))?;
        Some(train.pairs.iter().map(|(s, t)| c.constraint(s, Some(t))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let sources: Vec<TokenSequence> = train.sources().cloned().collect();
    let hyps = decode_corpus(teacher, &sources, lengths.as_deref(), beam)?;
    let mut replaced = 0;
    let mut pairs = Vec::with_capacity(hyps.len());
    for (i, (src, hyp)) in sources.into_iter().zip(hyps).enumerate() {
        let mut ids = hyp.tokens;
        if ids.is_empty() {
            let len = lengths.as_ref().map(|l| l[i]);
            ids = vec![teacher.first_token(&src, len)?];
            replaced += 1;
        }
        pairs.push((src, TokenSequence::new(ids)));
    }
    if replaced > 0 {
        warn!("{replaced} empty teacher outputs replaced by their most probable first token");
    }
    info!("distilled {} pairs with beam {beam}", pairs.len());
    let corpus = ParallelCorpus::new(format!("{}-distilled", train.name), train.split.clone(), pairs)?;
    Ok(DistilledCorpus {
        provenance: Provenance {
            teacher_config_hash: teacher.config().hash(),
            teacher_pe: pe,
            constraint: lengths.is_some().then_some(constraint),
            beam,
            pairs: corpus.len(),
            replaced_empty: replaced,
        },
        corpus,
    })
}

impl DistilledCorpus {
    /// Writes the two text sides and the provenance sidecar into `dir`.
    pub fn write(&self, vocab: &Vocab, dir: &Path) -> Result<[PathBuf; 3]> {
        fs::create_dir_all(dir)?;
        let paths = [dir.join(SRC_FILE), dir.join(TGT_FILE), dir.join(PROVENANCE_FILE)];
        self.corpus.write(vocab, &paths[0], &paths[1])?;
        let mut json = serde_json::to_string_pretty(&self.provenance)?;
        json.push('\n');
        fs::write(&paths[2], json)?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, load_parallel, SyntheticTask};
    use crate::nn::layers::ArchConfig;
    use crate::pe::PerturbationRange;
    use crate::teacher::TeacherConfig;

    fn teacher(pe: PeKind) -> TeacherModel {
        let cfg = TeacherConfig {
            arch: ArchConfig {
                layers: 1,
                heads: 2,
                d_model: 16,
                d_ff: 32,
                dropout: 0.0,
            },
            decoder_pe: pe,
            max_len_margin: 3,
            ..TeacherConfig::default()
        };
        TeacherModel::new(cfg, 11, 2).unwrap()
    }

    fn corpus() -> ParallelCorpus {
        gen_synthetic(SyntheticTask::Copy, 6, 4, 6, 3).unwrap()
    }

    #[test]
    fn cardinality_and_sources_preserved() {
        let c = corpus();
        let d = distill(&teacher(PeKind::Sinusoidal), &c, ConstraintMode::Reference, 2).unwrap();
        assert_eq!(d.corpus.len(), c.len());
        for ((a, _), (b, t)) in c.pairs.iter().zip(&d.corpus.pairs) {
            assert_eq!(a.ids, b.ids);
            assert!(!t.is_empty());
        }
        assert_eq!(d.provenance.constraint, None);
        assert_eq!(d.provenance.pairs, c.len());
    }

    #[test]
    fn length_aware_teacher_needs_reference() {
        let t = teacher(PeKind::PerLdpe {
            range: PerturbationRange::new(-4, 4).unwrap(),
        });
        assert!(distill(&t, &corpus(), ConstraintMode::Fitted, 2).is_err());
        let d = distill(&t, &corpus(), ConstraintMode::Reference, 2).unwrap();
        assert_eq!(d.provenance.constraint, Some(ConstraintMode::Reference));
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let c = gen_synthetic(SyntheticTask::Copy, 3, 4, 30, 3).unwrap();
        assert!(distill(&teacher(PeKind::Sinusoidal), &c, ConstraintMode::Reference, 2).is_err());
    }

    #[test]
    fn files_are_reproducible() {
        let vocab = Vocab::synthetic(6);
        let t = teacher(PeKind::Ldpe);
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for run in ["a", "b"] {
            let d = distill(&t, &corpus(), ConstraintMode::Reference, 3).unwrap();
            let paths = d.write(&vocab, &dir.path().join(run)).unwrap();
            bytes.push(paths.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
            let back = load_parallel(&paths[0], &paths[1], &vocab).unwrap();
            assert_eq!(back.len(), d.corpus.len());
        }
        assert_eq!(bytes[0], bytes[1]);
    }
}
