use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{gen_synthetic, ParallelCorpus, SyntheticTask, TokenSequence, BOS, EOS, PLH};
use crate::nn::layers::ArchConfig;
use crate::nn::{AdamConfig, AdamState};
use crate::pe::{PeKind, PerturbationRange};
use crate::teacher::TrainOptions;

const V: usize = 12;

fn tiny(mode: EmbeddingMode, pe: PeKind) -> StudentConfig {
    StudentConfig {
        arch: ArchConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            dropout: 0.0,
        },
        embedding_mode: mode,
        placeholder_pe: pe,
        max_placeholders: 4,
        ..StudentConfig::default()
    }
}

fn per(lo: i64, hi: i64) -> PeKind {
    PeKind::PerLdpe {
        range: PerturbationRange::new(lo, hi).unwrap(),
    }
}

fn model(mode: EmbeddingMode) -> StudentModel {
    StudentModel::new(tiny(mode, per(0, 2)), V, 3).unwrap()
}

#[test]
fn negative_perturbation_rejected() {
    let err = StudentModel::new(tiny(EmbeddingMode::Shared, per(-4, 4)), V, 0).unwrap_err();
    assert!(err.to_string().contains("negative"));
    assert!(StudentModel::new(tiny(EmbeddingMode::Shared, per(0, 0)), V, 0).is_ok());
}

#[test]
fn shared_embedding_is_one_tensor() {
    let m = model(EmbeddingMode::Shared);
    let h = m.head_manifest();
    assert_eq!(h.placeholder_embedding, h.deletion_embedding);
    assert_eq!(h.fill_embedding, h.fill_output);
    assert_eq!(m.embedding_param(Some(Head::Placeholder)), m.embedding_param(None));
}

#[test]
fn independent_embedding_is_separate() {
    let m = model(EmbeddingMode::Independent);
    let h = m.head_manifest();
    assert_ne!(h.placeholder_embedding, h.deletion_embedding);
    assert_eq!(h.deletion_embedding, h.fill_embedding);
    assert_ne!(m.embedding_param(Some(Head::Placeholder)), m.embedding_param(Some(Head::Fill)));
    let shared = model(EmbeddingMode::Shared).store().num_scalars();
    assert_eq!(m.store().num_scalars(), shared + V * 16);
}

#[test]
fn head_shapes() {
    let m = model(EmbeddingMode::Shared);
    let src = [5, 6, 7];
    let state = [BOS, 8, 9, EOS];
    let d = m.delete_forward(&src, &state).unwrap();
    assert_eq!(d.len(), 4);
    assert_eq!((d[0], d[3]), (0.0, 0.0));
    assert!(d.iter().all(|p| (0.0..=1.0).contains(p)));
    let p = m.placeholder_forward(&src, &state, 5, 0).unwrap();
    assert_eq!(p.shape(), &[3, 5]);
    let f = m.fill_forward(&src, &[BOS, PLH, 8, PLH, EOS]).unwrap();
    assert_eq!(f.shape(), &[2, V]);
    assert_eq!(m.fill_forward(&src, &state).unwrap().rows(), 0);
}

#[test]
fn invalid_states_rejected() {
    let m = model(EmbeddingMode::Shared);
    assert!(m.delete_forward(&[5], &[8, 9]).is_err());
    assert!(m.delete_forward(&[5], &[BOS, V, EOS]).is_err());
    assert!(m.placeholder_forward(&[5], &[BOS, EOS], 0, 0).is_err());
    assert!(m.delete_forward(&[], &[BOS, EOS]).is_err());
}

#[test]
fn length_only_reaches_the_placeholder_head() {
    let m = model(EmbeddingMode::Shared);
    let src = [5, 6];
    let state = [BOS, 7, EOS];
    let a = m.placeholder_forward(&src, &state, 3, 0).unwrap();
    let b = m.placeholder_forward(&src, &state, 6, 0).unwrap();
    assert_ne!(a, b);
    let c = m.placeholder_forward(&src, &state, 4, 0).unwrap();
    let d = m.placeholder_forward(&src, &state, 3, 1).unwrap();
    assert_eq!(c, d);

    let base = StudentModel::new(tiny(EmbeddingMode::Shared, PeKind::Sinusoidal), V, 3).unwrap();
    let a = base.placeholder_forward(&src, &state, 3, 0).unwrap();
    let b = base.placeholder_forward(&src, &state, 6, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn roll_in_labels_are_consistent() {
    let m = model(EmbeddingMode::Shared);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tgt = TokenSequence::new(vec![5, 6, 7, 8, 9, 10, 11]).framed();
    for _ in 0..50 {
        let r = roll_in(&m, &tgt, &mut rng);
        let kept: Vec<_> = r
            .noisy
            .iter()
            .zip(&r.deletion_labels)
            .filter(|(_, &l)| l != 1)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(kept, tgt);
        assert_eq!(r.placeholder_labels.len(), r.partial.len() - 1);
        assert_eq!(r.masked.iter().filter(|&&t| t == PLH).count(), r.fill_labels.len());
        let mut filled = r.masked.clone();
        let mut it = r.fill_labels.iter();
        for t in filled.iter_mut().filter(|t| **t == PLH) {
            *t = *it.next().unwrap();
        }
        let script = oracle_actions(&r.partial, &tgt, 4);
        assert_eq!(filled, script.apply(&r.partial));
    }
}

#[test]
fn train_step_reduces_loss() {
    let mut m = model(EmbeddingMode::Independent);
    let pair = (TokenSequence::new(vec![5, 6]), TokenSequence::new(vec![5, 5, 6, 6]));
    let batch = vec![pair; 4];
    let mut adam = AdamState::new(
        m.store(),
        AdamConfig {
            lr: 3e-3,
            warmup_steps: 0,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = student_train_step(&mut m, &batch, &mut adam, &mut rng).unwrap();
    let mut last = first;
    for _ in 0..60 {
        last = student_train_step(&mut m, &batch, &mut adam, &mut rng).unwrap();
    }
    assert!(last.total() < 0.6 * first.total(), "{first:?} -> {last:?}");
}

#[test]
fn refine_respects_iteration_cap() {
    let m = model(EmbeddingMode::Shared);
    let r = refine_decode(&m, &[5, 6, 7], 4, 3).unwrap();
    assert!(r.iterations <= 3);
    assert!(r.tokens.iter().all(|&t| t >= 5 && t < V));
    let z = refine_decode(&m, &[5, 6, 7], 4, 0).unwrap();
    assert!(z.tokens.is_empty());
}

#[test]
fn runaway_insertion_is_capped() {
    let mut m = zeroed(model(EmbeddingMode::Shared));
    let b = m.store().find("placeholder.out.b").unwrap();
    let k = m.config().max_placeholders;
    m.store_mut().get_mut(b).data_mut()[k] = 10.0;
    let r = refine_decode(&m, &[5, 6], 3, 10).unwrap();
    assert_eq!(r.tokens.len(), output_cap(2, 3));
}

#[test]
fn refine_corpus_checks_constraints() {
    let m = model(EmbeddingMode::Shared);
    let src = vec![TokenSequence::new(vec![5]), TokenSequence::new(vec![6, 7])];
    assert!(refine_corpus(&m, &src, None, 2).is_err());
    assert!(refine_corpus(&m, &src, Some(&[1]), 2).is_err());
    let out = refine_corpus(&m, &src, Some(&[2, 4]), 2).unwrap();
    assert_eq!(out[1], refine_decode(&m, &[6, 7], 4, 2).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let m = model(EmbeddingMode::Independent);
    m.save(&path).unwrap();
    let back = StudentModel::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.head_manifest(), m.head_manifest());
    let src = [5, 6, 7];
    assert_eq!(
        back.placeholder_forward(&src, &[BOS, 8, EOS], 3, 1).unwrap(),
        m.placeholder_forward(&src, &[BOS, 8, EOS], 3, 1).unwrap()
    );
}

#[test]
fn training_is_deterministic() {
    let corpus: ParallelCorpus = gen_synthetic(SyntheticTask::Copy, 12, 4, V - 5, 4).unwrap();
    let opts = TrainOptions {
        steps: 5,
        batch_size: 4,
        log_every: 5,
        ..TrainOptions::default()
    };
    let run = || {
        let mut m = model(EmbeddingMode::Shared);
        let log = train_student(&mut m, &corpus, &opts).unwrap();
        (log, m.store().get(m.embedding_param(None)).clone())
    };
    assert_eq!(run(), run());
}

fn zeroed(mut m: StudentModel) -> StudentModel {
    let ids: Vec<_> = m.store().ids().collect();
    for id in ids {
        m.store_mut().get_mut(id).data_mut().fill(0.0);
    }
    m
}

#[test]
fn zeroed_deletion_head_is_uncertain() {
    let m = zeroed(model(EmbeddingMode::Shared));
    let p = m.delete_forward(&[5, 6], &[BOS, 7, 8, 9, EOS]).unwrap();
    assert_eq!(p, vec![0.0, 0.5, 0.5, 0.5, 0.0]);
}

#[test]
fn uniform_predictions_give_log_class_losses() {
    let mut m = zeroed(model(EmbeddingMode::Shared));
    let batch = vec![(TokenSequence::new(vec![5, 6, 7]), TokenSequence::new(vec![5, 6, 7, 8, 9]))];
    let mut adam = AdamState::new(m.store(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = student_train_step(&mut m, &batch, &mut adam, &mut rng).unwrap();
    assert!((l.deletion - 2f64.ln()).abs() < 1e-12);
    assert!((l.placeholder - 5f64.ln()).abs() < 1e-12);
    assert!((l.fill - (V as f64).ln()).abs() < 1e-12);
}

#[test]
fn fill_distributions_sum_to_one() {
    let m = model(EmbeddingMode::Independent);
    let f = m.fill_forward(&[5, 6], &[BOS, PLH, PLH, PLH, EOS]).unwrap();
    for i in 0..f.rows() {
        assert!((f.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
