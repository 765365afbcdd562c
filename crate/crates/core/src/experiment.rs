//! Experiment grids: teacher, distillation, student and evaluation per cell.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, gen_synthetic, load_parallel, ParallelCorpus, SyntheticTask, TokenSequence, Vocab};
use crate::distill::distill;
use crate::error::{Error, Result};
use crate::length::{ConstraintMode, LengthConstrainer};
use crate::levt::{refine_corpus, train_student, EmbeddingMode, RollInConfig, StudentConfig, StudentModel};
use crate::metrics::{evaluate, EvalReport};
use crate::nn::layers::ArchConfig;
use crate::pe::{PeKind, PerturbationRange};
use crate::teacher::{decode_corpus, train_teacher, TeacherConfig, TeacherModel, TrainOptions};

pub const REPORT_FILE: &str = "report.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    Synthetic {
        /// `copy`, `reverse` or `expand<k>`.
        task: String,
        vocab_size: usize,
        max_len: usize,
        train_size: usize,
        test_size: usize,
        data_seed: u64,
    },
    Files {
        train_src: PathBuf,
        train_tgt: PathBuf,
        test_src: PathBuf,
        test_tgt: PathBuf,
        max_vocab: usize,
        #[serde(default = "one")]
        min_freq: usize,
    },
}

fn one() -> usize {
    1
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Synthetic {
            task: "expand2".into(),
            vocab_size: 20,
            max_len: 12,
            train_size: 2000,
            test_size: 200,
            data_seed: 1,
        }
    }
}

/// Loaded data of a task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub vocab: Vocab,
    pub train: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl TaskSpec {
    pub fn load(&self) -> Result<TaskData> {
        match self {
            TaskSpec::Synthetic {
                task,
                vocab_size,
                max_len,
                train_size,
                test_size,
                data_seed,
            } => {
                let t = SyntheticTask::parse(task)?;
                let train = gen_synthetic(t, *train_size, *max_len, *vocab_size, *data_seed)?;
                let mut test = gen_synthetic(t, *test_size, *max_len, *vocab_size, data_seed.wrapping_add(1))?;
                test.split = "test".into();
                Ok(TaskData {
                    vocab: Vocab::synthetic(*vocab_size),
                    train,
                    test,
                })
            }
            TaskSpec::Files {
                train_src,
                train_tgt,
                test_src,
                test_tgt,
                max_vocab,
                min_freq,
            } => {
                let vocab = build_vocab(&[train_src, train_tgt], *max_vocab, *min_freq)?;
                Ok(TaskData {
                    train: load_parallel(train_src, train_tgt, &vocab)?,
                    test: load_parallel(test_src, test_tgt, &vocab)?,
                    vocab,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub arch: ArchConfig,
    pub perturb: PerturbationRange,
    pub max_len_margin: usize,
    pub label_smoothing: f64,
    pub train: TrainOptions,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let base = TeacherConfig::default();
        Self {
            arch: base.arch,
            perturb: PerturbationRange::new(-4, 4).expect("valid"),
            max_len_margin: base.max_len_margin,
            label_smoothing: base.label_smoothing,
            train: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub arch: ArchConfig,
    pub perturb: PerturbationRange,
    pub max_placeholders: usize,
    pub max_refine_iters: usize,
    pub label_smoothing: f64,
    pub roll_in: RollInConfig,
    pub train: TrainOptions,
}

impl Default for StudentSection {
    fn default() -> Self {
        let base = StudentConfig::default();
        Self {
            arch: base.arch,
            perturb: base.placeholder_pe.perturbation(),
            max_placeholders: base.max_placeholders,
            max_refine_iters: base.max_refine_iters,
            label_smoothing: base.label_smoothing,
            roll_in: base.roll_in,
            train: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherVariant {
    #[serde(rename = "sinusoidal")]
    Sinusoidal,
    #[serde(rename = "perldpe")]
    PerLdpe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudentVariant {
    #[serde(rename = "levt")]
    Levt,
    #[serde(rename = "levt+perldpe")]
    LevtPerLdpe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub teachers: Vec<TeacherVariant>,
    pub students: Vec<StudentVariant>,
    pub embeddings: Vec<EmbeddingMode>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            teachers: vec![TeacherVariant::Sinusoidal, TeacherVariant::PerLdpe],
            students: vec![StudentVariant::Levt, StudentVariant::LevtPerLdpe],
            embeddings: vec![EmbeddingMode::Shared],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub grid: GridSpec,
    /// Test-time constraint of the students.
    pub constraint: ConstraintMode,
    pub seeds: Vec<u64>,
    pub beam: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            grid: GridSpec::default(),
            constraint: ConstraintMode::Reference,
            seeds: vec![1],
            beam: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn teacher_config(&self, variant: TeacherVariant) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            arch: t.arch,
            decoder_pe: match variant {
                TeacherVariant::Sinusoidal => PeKind::Sinusoidal,
                TeacherVariant::PerLdpe => PeKind::PerLdpe { range: t.perturb },
            },
            max_len_margin: t.max_len_margin,
            label_smoothing: t.label_smoothing,
        }
    }

    pub fn student_config(&self, variant: StudentVariant, embedding: EmbeddingMode) -> StudentConfig {
        let s = &self.student;
        StudentConfig {
            arch: s.arch,
            embedding_mode: embedding,
            placeholder_pe: match variant {
                StudentVariant::Levt => PeKind::Sinusoidal,
                StudentVariant::LevtPerLdpe => PeKind::PerLdpe { range: s.perturb },
            },
            max_placeholders: s.max_placeholders,
            max_refine_iters: s.max_refine_iters,
            label_smoothing: s.label_smoothing,
            roll_in: s.roll_in,
        }
    }

    /// Checks every module configuration the grid will build.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam size must be >= 1".into()));
        }
        let g = &self.grid;
        if g.teachers.is_empty() || g.students.is_empty() || g.embeddings.is_empty() {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        self.constraint.validate()?;
        for &t in &g.teachers {
            self.teacher_config(t).validate()?;
        }
        for &s in &g.students {
            for &e in &g.embeddings {
                self.student_config(s, e).validate()?;
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &teacher in &self.grid.teachers {
                for &student in &self.grid.students {
                    for &embedding in &self.grid.embeddings {
                        out.push(Cell {
                            teacher,
                            student,
                            embedding,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub teacher: TeacherVariant,
    pub student: StudentVariant,
    pub embedding: EmbeddingMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    #[serde(flatten)]
    pub cell: Cell,
    #[serde(flatten)]
    pub eval: EvalReport,
    pub teacher_config_hash: String,
    pub student_config_hash: String,
    pub mean_iterations: f64,
    pub unconverged: usize,
    pub config: ExperimentConfig,
}

pub fn with_seed(opts: &TrainOptions, seed: u64) -> TrainOptions {
    TrainOptions { seed, ..opts.clone() }
}

pub fn train_teacher_for(cfg: &ExperimentConfig, variant: TeacherVariant, data: &TaskData, seed: u64) -> Result<TeacherModel> {
    let mut teacher = TeacherModel::new(cfg.teacher_config(variant), data.vocab.len(), seed)?;
    train_teacher(&mut teacher, &data.train, &with_seed(&cfg.teacher.train, seed))?;
    Ok(teacher)
}

pub fn train_student_for(cfg: &ExperimentConfig, cell: &Cell, vocab_size: usize, distilled: &ParallelCorpus) -> Result<StudentModel> {
    let mut student = StudentModel::new(cfg.student_config(cell.student, cell.embedding), vocab_size, cell.seed)?;
    train_student(&mut student, distilled, &with_seed(&cfg.student.train, cell.seed))?;
    Ok(student)
}

/// Test-time constraints resolved against the original training corpus.
pub fn test_constraints(mode: ConstraintMode, train: &ParallelCorpus, test: &ParallelCorpus) -> Result<Vec<usize>> {
    let c = LengthConstrainer::resolve(mode, Some(train))?;
    test.pairs.iter().map(|(s, r)| c.constraint(s, Some(r))).collect()
}

/// Decodes `test` with `student` and scores it.
pub fn evaluate_student(
    student: &StudentModel,
    test: &ParallelCorpus,
    constraints: &[usize],
) -> Result<(EvalReport, Vec<TokenSequence>, f64, usize)> {
    let sources: Vec<TokenSequence> = test.sources().cloned().collect();
    let out = refine_corpus(student, &sources, Some(constraints), student.config().max_refine_iters)?;
    let hyps: Vec<TokenSequence> = out.iter().map(|r| TokenSequence::new(r.tokens.clone())).collect();
    let refs: Vec<&[usize]> = test.targets().map(|t| t.ids.as_slice()).collect();
    let hyp_ids: Vec<&[usize]> = hyps.iter().map(|h| h.ids.as_slice()).collect();
    let eval = evaluate(&hyp_ids, &refs)?;
    let mean_iters = out.iter().map(|r| r.iterations as f64).sum::<f64>() / out.len().max(1) as f64;
    let unconverged = out.iter().filter(|r| !r.converged).count();
    Ok((eval, hyps, mean_iters, unconverged))
}

/// Runs every cell, appending one JSON line per cell to
/// `out_dir/report.jsonl`. Teachers and distilled corpora are shared by the
/// cells of the same teacher variant and seed.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<CellReport>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let data = cfg.task.load().map_err(|e| e.in_stage("load-data"))?;
    let constraints = test_constraints(cfg.constraint, &data.train, &data.test).map_err(|e| e.in_stage("constraints"))?;
    let report_path = out_dir.join(REPORT_FILE);
    let mut file = fs::File::create(&report_path)?;
    let mut reports = Vec::new();
    let mut cached: Option<((TeacherVariant, u64), String, ParallelCorpus)> = None;
    for cell in cfg.cells() {
        let key = (cell.teacher, cell.seed);
        if cached.as_ref().map(|c| c.0) != Some(key) {
            info!("training {:?} teacher, seed {}", cell.teacher, cell.seed);
            let teacher = train_teacher_for(cfg, cell.teacher, &data, cell.seed).map_err(|e| e.in_stage("train-teacher"))?;
            let d = distill(&teacher, &data.train, ConstraintMode::Reference, cfg.beam).map_err(|e| e.in_stage("distill"))?;
            cached = Some((key, teacher.config().hash(), d.corpus));
        }
        let (_, teacher_hash, distilled) = cached.as_ref().expect("filled above");
        info!("training {:?} student ({:?}), seed {}", cell.student, cell.embedding, cell.seed);
        let student =
            train_student_for(cfg, &cell, data.vocab.len(), distilled).map_err(|e| e.in_stage("train-student"))?;
        let (eval, _, mean_iterations, unconverged) =
            evaluate_student(&student, &data.test, &constraints).map_err(|e| e.in_stage("translate"))?;
        let report = CellReport {
            cell,
            eval,
            teacher_config_hash: teacher_hash.clone(),
            student_config_hash: student.config().hash(),
            mean_iterations,
            unconverged,
            config: cfg.clone(),
        };
        writeln!(file, "{}", serde_json::to_string(&report)?)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Teacher decoding of a test set, for evaluating teachers directly.
pub fn teacher_outputs(teacher: &TeacherModel, test: &ParallelCorpus, constraints: Option<&[usize]>, beam: usize) -> Result<Vec<TokenSequence>> {
    let sources: Vec<TokenSequence> = test.sources().cloned().collect();
    let c = if teacher.config().decoder_pe.is_length_aware() { constraints } else { None };
    Ok(decode_corpus(teacher, &sources, c, beam)?
        .into_iter()
        .map(|h| TokenSequence::new(h.tokens))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
seeds = [3]
beam = 2

[task]
kind = "synthetic"
task = "copy"
vocab_size = 5
max_len = 3
train_size = 6
test_size = 3
data_seed = 4

[teacher.arch]
layers = 1
heads = 2
d_model = 8
d_ff = 16

[teacher.train]
steps = 2
batch_size = 2
log_every = 1
seed = 0
adam = { lr = 0.001, beta1 = 0.9, beta2 = 0.98, eps = 1e-9, warmup_steps = 0, clip_norm = 0.0 }

[student.arch]
layers = 1
heads = 2
d_model = 8
d_ff = 16

[student.train]
steps = 2
batch_size = 2
log_every = 1
seed = 0
adam = { lr = 0.001, beta1 = 0.9, beta2 = 0.98, eps = 1e-9, warmup_steps = 0, clip_norm = 0.0 }
"#;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        assert_eq!(ExperimentConfig::default().cells().len(), 4);
    }

    #[test]
    fn negative_student_perturbation_rejected() {
        let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
        cfg.student.perturb = PerturbationRange::new(-1, 2).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("negative"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn inverted_range_rejected() {
        let err = ExperimentConfig::from_toml("[teacher]\nperturb = { lo = 3, hi = 1 }\n").unwrap_err();
        assert!(err.to_string().contains("lo > hi"), "{err}");
        let ok = ExperimentConfig::from_toml("[teacher]\nperturb = { lo = -2, hi = 2 }\n").unwrap();
        assert_eq!(ok.teacher.perturb, PerturbationRange::new(-2, 2).unwrap());
    }

    #[test]
    fn grid_emits_one_row_per_cell() {
        let cfg = ExperimentConfig::from_toml(TINY).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let reports = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(reports.len(), 4);
        let text = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            assert!(row["bleu"].is_number() && row["lr"].is_number());
            let back: ExperimentConfig = serde_json::from_value(row["config"].clone()).unwrap();
            assert_eq!(back, cfg);
        }
        let again = tempfile::tempdir().unwrap();
        run_experiment(&cfg, again.path()).unwrap();
        assert_eq!(text, fs::read_to_string(again.path().join(REPORT_FILE)).unwrap());
    }
}
