use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lenat::corpus::{build_vocab, gen_synthetic, load_parallel, load_side, SyntheticTask, TokenSequence, Vocab};
use lenat::distill::distill;
use lenat::experiment::{evaluate_student, run_experiment, teacher_outputs, with_seed, ExperimentConfig, REPORT_FILE};
use lenat::length::{ConstraintMode, LengthConstrainer};
use lenat::levt::{train_student, EmbeddingMode, StudentModel};
use lenat::metrics::evaluate;
use lenat::nn::checkpoint;
use lenat::pe::{PeKind, PerturbationRange};
use lenat::teacher::{train_teacher, TeacherModel};
use lenat::Error;

const LOG_FILE: &str = "log.jsonl";
const VOCAB_FILE: &str = "vocab.txt";
const TEACHER_FILE: &str = "teacher.ckpt";
const STUDENT_FILE: &str = "student.ckpt";
const HYP_FILE: &str = "hyp.txt";
const SCORE_FILE: &str = "score.json";

#[derive(Parser)]
#[command(name = "lenat", version, about = "Length-aware teacher/student translation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus
    GenData(GenData),
    /// Build a frequency-ranked vocabulary from text files
    BuildVocab(BuildVocab),
    /// Train the autoregressive teacher
    TrainTeacher(TrainTeacher),
    /// Decode a training corpus with the teacher
    Distill(Distill),
    /// Train the non-autoregressive student
    TrainStudent(TrainStudent),
    /// Decode sources with a teacher or student checkpoint
    Translate(Translate),
    /// Corpus BLEU and length ratio of a hypothesis file
    Score(Score),
    /// Run an experiment grid from a config file
    RunGrid(RunGrid),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Experiment config (TOML); model and training sections are read from it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// copy, reverse or expand<k>
    #[arg(long, default_value = "expand2")]
    task: String,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long, default_value_t = 2000)]
    size: usize,
    /// File prefix of the two sides
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct BuildVocab {
    #[command(flatten)]
    common: Common,
    #[arg(long, num_args = 1.., required = true)]
    files: Vec<PathBuf>,
    #[arg(long, default_value_t = 32000)]
    max_size: usize,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
}

#[derive(Args)]
struct Data {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherPe {
    Sinusoidal,
    Ldpe,
    Perldpe,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudentPe {
    Sinusoidal,
    Perldpe,
}

#[derive(Clone, Copy, ValueEnum)]
enum Constraint {
    Reference,
    Proxy,
    Fitted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Embedding {
    Shared,
    Independent,
}

#[derive(Args)]
struct TrainTeacher {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[arg(long, value_enum, default_value = "perldpe")]
    pe: TeacherPe,
    /// Training perturbation range `lo,hi`
    #[arg(long, allow_hyphen_values = true)]
    perturb: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct Distill {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, value_enum, default_value = "reference")]
    constraint: Constraint,
    #[arg(long, default_value_t = 5)]
    beam: usize,
}

#[derive(Args)]
struct TrainStudent {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[arg(long, value_enum, default_value = "perldpe")]
    pe: StudentPe,
    /// Training perturbation range `lo,hi`; `lo` must not be negative
    #[arg(long, allow_hyphen_values = true)]
    perturb: Option<String>,
    #[arg(long, value_enum, default_value = "shared")]
    embedding: Embedding,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct Translate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// References, needed by `--constraint reference`
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "reference")]
    constraint: Constraint,
    /// Ratio for `--constraint proxy`
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Training corpus for `--constraint fitted`
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
    fit_on: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct Score {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunGrid {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_range(s: &str) -> lenat::Result<PerturbationRange> {
    PerturbationRange::parse(s)
}

fn load_config(path: Option<&Path>) -> lenat::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Appends `record` to the command log and echoes it on stdout.
fn log_record(out_dir: &Path, record: Value) -> anyhow::Result<()> {
    let line = serde_json::to_string(&record)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(out_dir.join(LOG_FILE))?;
    writeln!(f, "{line}")?;
    println!("{line}");
    Ok(())
}

fn write_lines(path: &Path, vocab: &Vocab, seqs: &[TokenSequence]) -> anyhow::Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&vocab.decode(&s.ids));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: &GenData) -> anyhow::Result<Value> {
    let task = SyntheticTask::parse(&a.task)?;
    let corpus = gen_synthetic(task, a.size, a.max_len, a.vocab_size, a.common.seed)?;
    let vocab = Vocab::synthetic(a.vocab_size);
    let dir = &a.common.out_dir;
    let src = dir.join(format!("{}.src", a.split));
    let tgt = dir.join(format!("{}.tgt", a.split));
    corpus.write(&vocab, &src, &tgt)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(json!({ "task": task.to_string(), "pairs": corpus.len(), "artifacts": [src, tgt, dir.join(VOCAB_FILE)] }))
}

fn build_vocab_cmd(a: &BuildVocab) -> anyhow::Result<Value> {
    let vocab = build_vocab(&a.files, a.max_size, a.min_freq)?;
    let path = a.common.out_dir.join(VOCAB_FILE);
    vocab.save(&path)?;
    Ok(json!({ "size": vocab.len(), "artifacts": [path] }))
}

fn train_teacher_cmd(a: &TrainTeacher) -> anyhow::Result<Value> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(p) = &a.perturb {
        cfg.teacher.perturb = parse_range(p)?;
    }
    if let Some(s) = a.steps {
        cfg.teacher.train.steps = s;
    }
    let mut tc = cfg.teacher_config(lenat::experiment::TeacherVariant::PerLdpe);
    tc.decoder_pe = match a.pe {
        TeacherPe::Sinusoidal => PeKind::Sinusoidal,
        TeacherPe::Ldpe => PeKind::Ldpe,
        TeacherPe::Perldpe => PeKind::PerLdpe { range: cfg.teacher.perturb },
    };
    let vocab = Vocab::load(&a.data.vocab)?;
    let corpus = load_parallel(&a.data.src, &a.data.tgt, &vocab)?;
    let mut model = TeacherModel::new(tc, vocab.len(), a.common.seed)?;
    let log = train_teacher(&mut model, &corpus, &with_seed(&cfg.teacher.train, a.common.seed))?;
    let path = a.common.out_dir.join(TEACHER_FILE);
    model.save(&path)?;
    Ok(json!({
        "config_hash": model.config().hash(),
        "final_loss": log.final_loss,
        "losses": log.losses,
        "artifacts": [path],
    }))
}

fn constraint_mode(c: Constraint, alpha: f64) -> ConstraintMode {
    match c {
        Constraint::Reference => ConstraintMode::Reference,
        Constraint::Proxy => ConstraintMode::Proxy { alpha },
        Constraint::Fitted => ConstraintMode::Fitted,
    }
}

fn distill_cmd(a: &Distill) -> anyhow::Result<Value> {
    let teacher = TeacherModel::load(&a.teacher)?;
    let vocab = Vocab::load(&a.data.vocab)?;
    let corpus = load_parallel(&a.data.src, &a.data.tgt, &vocab)?;
    let d = distill(&teacher, &corpus, constraint_mode(a.constraint, 1.0), a.beam)?;
    let paths = d.write(&vocab, &a.common.out_dir)?;
    Ok(json!({ "provenance": d.provenance, "artifacts": paths }))
}

fn train_student_cmd(a: &TrainStudent) -> anyhow::Result<Value> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(p) = &a.perturb {
        cfg.student.perturb = parse_range(p)?;
    }
    if let Some(s) = a.steps {
        cfg.student.train.steps = s;
    }
    let variant = match a.pe {
        StudentPe::Sinusoidal => lenat::experiment::StudentVariant::Levt,
        StudentPe::Perldpe => lenat::experiment::StudentVariant::LevtPerLdpe,
    };
    let embedding = match a.embedding {
        Embedding::Shared => EmbeddingMode::Shared,
        Embedding::Independent => EmbeddingMode::Independent,
    };
    let sc = cfg.student_config(variant, embedding);
    sc.validate()?;
    let vocab = Vocab::load(&a.data.vocab)?;
    let corpus = load_parallel(&a.data.src, &a.data.tgt, &vocab)?;
    let mut model = StudentModel::new(sc, vocab.len(), a.common.seed)?;
    let log = train_student(&mut model, &corpus, &with_seed(&cfg.student.train, a.common.seed))?;
    let path = a.common.out_dir.join(STUDENT_FILE);
    model.save(&path)?;
    Ok(json!({
        "config_hash": model.config().hash(),
        "final_loss": log.final_loss,
        "losses": log.losses,
        "artifacts": [path],
    }))
}

fn translate_cmd(a: &Translate) -> anyhow::Result<Value> {
    let vocab = Vocab::load(&a.vocab)?;
    let sources = load_side(&a.src, &vocab)?;
    let refs = a.reference.as_deref().map(|p| load_side(p, &vocab)).transpose()?;
    let train = match &a.fit_on {
        Some(f) => Some(load_parallel(&f[0], &f[1], &vocab)?),
        None => None,
    };
    let mode = constraint_mode(a.constraint, a.alpha);
    let constrainer = LengthConstrainer::resolve(mode, train.as_ref())?;
    if let Some(r) = &refs {
        if r.len() != sources.len() {
            bail!("{} sources but {} references", sources.len(), r.len());
        }
    }
    let constraints = sources
        .iter()
        .enumerate()
        .map(|(i, s)| constrainer.constraint(s, refs.as_ref().map(|r| &r[i])))
        .collect::<lenat::Result<Vec<_>>>()?;

    let (header, _) = checkpoint::load(&a.model)?;
    let test = lenat::corpus::ParallelCorpus::new(
        "input",
        "test",
        sources
            .iter()
            .cloned()
            .zip(refs.clone().unwrap_or_else(|| sources.clone()))
            .collect(),
    )?;
    let mut record = json!({ "model": header.model, "constraint": mode });
    let hyps = match header.model.as_str() {
        "teacher" => {
            let t = TeacherModel::load(&a.model)?;
            teacher_outputs(&t, &test, Some(&constraints), a.beam)?
        }
        "student" => {
            let mut s = StudentModel::load(&a.model)?;
            if let Some(n) = a.max_iters {
                s = with_max_iters(s, n)?;
            }
            let (_, hyps, mean_iters, unconverged) = evaluate_student(&s, &test, &constraints)?;
            record["mean_iterations"] = json!(mean_iters);
            record["unconverged"] = json!(unconverged);
            hyps
        }
        other => bail!("unknown checkpoint kind `{other}`"),
    };
    let path = a.common.out_dir.join(HYP_FILE);
    write_lines(&path, &vocab, &hyps)?;
    if let Some(r) = &refs {
        let h: Vec<&[usize]> = hyps.iter().map(|s| s.ids.as_slice()).collect();
        let r: Vec<&[usize]> = r.iter().map(|s| s.ids.as_slice()).collect();
        record["eval"] = serde_json::to_value(evaluate(&h, &r)?)?;
    }
    record["artifacts"] = json!([path]);
    Ok(record)
}

fn with_max_iters(model: StudentModel, n: usize) -> lenat::Result<StudentModel> {
    let mut cfg = model.config().clone();
    cfg.max_refine_iters = n;
    let mut m = StudentModel::new(cfg, model.vocab_size(), 0)?;
    m.store_mut().load_from(model.store())?;
    Ok(m)
}

/// Whitespace tokens interned to ids shared by both files.
fn read_tokens(path: &Path, table: &mut HashMap<String, usize>) -> anyhow::Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| {
            l.split_whitespace()
                .map(|t| {
                    let n = table.len();
                    *table.entry(t.to_string()).or_insert(n)
                })
                .collect()
        })
        .collect())
}

fn score_cmd(a: &Score) -> anyhow::Result<Value> {
    let mut table = HashMap::new();
    let hyps = read_tokens(&a.hyp, &mut table)?;
    let refs = read_tokens(&a.reference, &mut table)?;
    let report = evaluate(&hyps, &refs)?;
    let mut record = serde_json::to_value(&report)?;
    if let Some(dir) = &a.out_dir {
        let path = dir.join(SCORE_FILE);
        fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        record["artifacts"] = json!([path]);
    }
    Ok(record)
}

fn run_grid_cmd(a: &RunGrid) -> anyhow::Result<Value> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let reports = run_experiment(&cfg, &a.out_dir)?;
    Ok(json!({ "cells": reports.len(), "artifacts": [a.out_dir.join(REPORT_FILE)] }))
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LENAT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LENAT_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("LENAT_THREADS must be a positive integer, got `0`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let (name, out_dir, seed) = match &cli.command {
        Command::GenData(a) => ("gen-data", Some(&a.common.out_dir), Some(a.common.seed)),
        Command::BuildVocab(a) => ("build-vocab", Some(&a.common.out_dir), None),
        Command::TrainTeacher(a) => ("train-teacher", Some(&a.common.out_dir), Some(a.common.seed)),
        Command::Distill(a) => ("distill", Some(&a.common.out_dir), None),
        Command::TrainStudent(a) => ("train-student", Some(&a.common.out_dir), Some(a.common.seed)),
        Command::Translate(a) => ("translate", Some(&a.common.out_dir), None),
        Command::Score(a) => ("score", a.out_dir.as_ref(), None),
        Command::RunGrid(a) => ("run-grid", Some(&a.out_dir), None),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildVocab(a) => build_vocab_cmd(a),
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::TrainStudent(a) => train_student_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::RunGrid(a) => run_grid_cmd(a),
    };
    let mut record = result.map_err(|e| match e.downcast::<Error>() {
        Ok(err) => anyhow::Error::new(err.in_stage(name)),
        Err(e) => e.context(format!("stage `{name}` failed")),
    })?;
    record["command"] = json!(name);
    if let Some(s) = seed {
        record["seed"] = json!(s);
    }
    match out_dir {
        Some(dir) => log_record(dir, record),
        None => {
            println!("{}", serde_json::to_string(&record)?);
            Ok(())
        }
    }
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    let mut err = e.downcast_ref::<Error>();
    while let Some(inner) = err {
        match inner {
            Error::Config(_) => return true,
            Error::Stage { source, .. } => err = Some(source),
            _ => return false,
        }
    }
    false
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
