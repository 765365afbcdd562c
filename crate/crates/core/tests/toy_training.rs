//! Small end-to-end training runs on a handful of pairs.

use lenat::corpus::{gen_synthetic, ParallelCorpus, SyntheticTask, TokenSequence, BOS, EOS};
use lenat::experiment::teacher_outputs;
use lenat::levt::{refine_decode, train_student, StudentConfig, StudentModel};
use lenat::nn::layers::ArchConfig;
use lenat::nn::AdamConfig;
use lenat::pe::{PeKind, PerturbationRange};
use lenat::teacher::{train_teacher, TeacherConfig, TeacherModel, TrainOptions};

fn arch(d: usize) -> ArchConfig {
    ArchConfig {
        layers: 2,
        heads: 4,
        d_model: d,
        d_ff: 2 * d,
        dropout: 0.0,
    }
}

fn opts(steps: usize, batch: usize, lr: f64) -> TrainOptions {
    TrainOptions {
        steps,
        batch_size: batch,
        adam: AdamConfig {
            lr,
            warmup_steps: 50,
            ..AdamConfig::default()
        },
        seed: 3,
        log_every: 100,
    }
}

fn eight_pairs() -> ParallelCorpus {
    gen_synthetic(SyntheticTask::Reverse, 8, 5, 6, 21).unwrap()
}

fn student(pe: PeKind, d: usize) -> StudentConfig {
    StudentConfig {
        arch: arch(d),
        placeholder_pe: pe,
        label_smoothing: 0.0,
        ..StudentConfig::default()
    }
}

#[test]
fn teacher_memorizes_eight_pairs() {
    let corpus = eight_pairs();
    let cfg = TeacherConfig {
        arch: arch(32),
        label_smoothing: 0.0,
        ..TeacherConfig::default()
    };
    let mut t = TeacherModel::new(cfg, 11, 1).unwrap();
    let log = train_teacher(&mut t, &corpus, &opts(500, 8, 3e-3)).unwrap();
    assert!(log.final_loss < 0.1, "final loss {}", log.final_loss);
    let hyps = teacher_outputs(&t, &corpus, None, 3).unwrap();
    for (h, (_, tgt)) in hyps.iter().zip(&corpus.pairs) {
        assert_eq!(h.ids, tgt.ids);
    }
}

#[test]
fn student_memorizes_eight_pairs() {
    let corpus = eight_pairs();
    let mut m = StudentModel::new(student(PeKind::Sinusoidal, 32), 11, 1).unwrap();
    let log = train_student(&mut m, &corpus, &opts(2000, 8, 2e-3)).unwrap();
    let tail = &log.losses[log.losses.len() - 3..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 0.3, "late losses {tail:?}");
}

#[test]
fn length_aware_student_tracks_the_constraint() {
    let corpus = gen_synthetic(SyntheticTask::Copy, 400, 8, 6, 5).unwrap();
    let range = PerturbationRange::new(0, 0).unwrap();
    let mut m = StudentModel::new(student(PeKind::PerLdpe { range }, 32), 11, 2).unwrap();
    train_student(&mut m, &corpus, &opts(2500, 16, 2e-3)).unwrap();

    let test = gen_synthetic(SyntheticTask::Copy, 50, 8, 6, 6).unwrap();
    let mut close = 0;
    let mut exact = 0;
    for (src, tgt) in &test.pairs {
        let counts = m.placeholder_forward(&src.ids, &[BOS, EOS], tgt.len(), 0).unwrap();
        let row = counts.row(0);
        let k = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        if (k as i64 - tgt.len() as i64).abs() <= 2 {
            close += 1;
        }
        let out = refine_decode(&m, &src.ids, tgt.len(), 10).unwrap();
        if out.tokens == src.ids {
            exact += 1;
        }
    }
    assert!(close >= 45, "{close}/50 first-round counts within 2 of the constraint");
    assert!(exact >= 45, "{exact}/50 copies reproduced");
}

#[test]
fn refinement_output_is_content_only() {
    let corpus = eight_pairs();
    let m = StudentModel::new(student(PeKind::Sinusoidal, 16), 11, 1).unwrap();
    for (src, _) in &corpus.pairs {
        let r = refine_decode(&m, &src.ids, 1, 4).unwrap();
        assert!(r.tokens.iter().all(|&t| t >= 5 && t < 11));
        assert!(!TokenSequence::new(r.tokens).ids.contains(&EOS));
    }
}
