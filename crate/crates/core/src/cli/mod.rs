//! The `promptvqa` command-line front end.
//!
//! Every command resolves a [`RunConfig`], echoes it to `<out>/config.txt`
//! and hashes that text into any evaluation report. Exit codes: 0 success,
//! 2 configuration, 3 checkpoint, 4 input, 5 numeric or gradient-check
//! failure, 1 anything else.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use config::RunConfig;

use crate::data::eval::{config_hash, evaluate_model, score_predictions, EvalFlags, EvalReport};
use crate::data::generate::{generate_dataset, render_exemplars, CaptionSample, Split, VqaSample};
use crate::data::io::{read_captions, read_dataset, read_image, write_dataset, CAPTIONS_FILE, DATASET_FILE};
use crate::data::Tokenizer;
use crate::error::Error;
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::{count_all_params, count_trainable_params};
use crate::parallel::Execution;
use crate::prompts::pipeline::{answer_question, InferenceOptions, InferenceOutput};
use crate::prompts::{build_vocabulary, PromptFlags, VocabularyIndex};
use crate::training::trainer::append_loss_csv;
use crate::training::{
    read_loss_csv, train_stage1, train_stage2, warmup_texts, write_loss_csv, Example, Phase,
    TrainState,
};
use crate::verify::{gradcheck_suite, GradcheckRow, GRADCHECK_SEEDS};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKSUM_LOG: &str = "frozen_checksum.log";
pub const VOCAB_FILE: &str = "vocabulary.jsonl";

#[derive(Debug, Parser)]
#[command(name = "promptvqa", version, about = "Prompt-based VQA on a frozen toy LM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint to continue from (training) or to load (eval, infer).
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    /// Disable the prefix key/value prompts.
    #[arg(long, global = true)]
    pub no_tp: bool,
    /// Skip test-time optimisation and the summary prompt.
    #[arg(long, global = true)]
    pub no_tto: bool,
    /// Adaption prompts only.
    #[arg(long, global = true)]
    pub ap_only: bool,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub tto_iters: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus to `<out>/data`.
    GenData,
    /// Text warmup, LM freeze and Stage 1 caption alignment.
    Pretrain,
    /// Stage 2 VQA fine-tuning from a Stage 1 (or Stage 2) checkpoint.
    Finetune,
    /// Score a checkpoint on the evaluation split.
    Eval,
    /// Answer one question about one image file.
    Infer { image: PathBuf, question: String },
    /// Finite-difference check of every backward rule and the full model.
    Gradcheck,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(Error),
    #[error("checkpoint: {0}")]
    Checkpoint(Error),
    #[error("input: {0}")]
    Input(Error),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Input(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Config(e),
            Error::Format { .. } | Error::Dimension { .. } => CliError::Checkpoint(e),
            Error::Input(_)
            | Error::Tokenizer(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Provenance(_)
            | Error::Length { .. } => CliError::Input(e),
            Error::Numeric(_) | Error::Norm(_) | Error::DegenerateLoss => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Other(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Resolves the configuration: defaults, then the file, then flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(Error::io(path, e)))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(t) = cli.tto_iters {
        cfg.tto_iters = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path)).map_err(CliError::Other)
}

/// Creates the output directory and echoes the configuration into it.
fn prepare_out(out: &Path, cfg: &RunConfig) -> CliResult<String> {
    fs::create_dir_all(out).map_err(|e| CliError::Other(Error::io(out, e)))?;
    let text = cfg.to_text();
    write_text(&out.join(CONFIG_ECHO), &text)?;
    Ok(config_hash(&text))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    let hash = prepare_out(&cli.out, &cfg)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, &cli.out),
        Command::Pretrain => cmd_pretrain(&cfg, &cli.out, cli.resume.as_deref()),
        Command::Finetune => cmd_finetune(&cfg, &cli.out, cli.resume.as_deref()),
        Command::Eval => {
            let report = cmd_eval(&cfg, &cli.out, cli.resume.as_deref(), eval_flags(cli), hash)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            Ok(())
        }
        Command::Infer { image, question } => {
            let out = cmd_infer(&cfg, cli.resume.as_deref(), image, question, eval_flags(cli))?;
            let json = serde_json::to_string_pretty(&out).map_err(Error::from)?;
            write_text(&cli.out.join("infer.json"), &json)?;
            println!("{json}");
            Ok(())
        }
        Command::Gradcheck => {
            let rows = cmd_gradcheck(&cfg, &cli.out)?;
            for r in &rows {
                println!(
                    "{:<22} {:>4} cases  max rel err {:.3e}  {}",
                    r.name,
                    r.cases,
                    r.max_rel_err,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            match rows.iter().filter(|r| !r.passed).count() {
                0 => Ok(()),
                n => Err(CliError::Numeric(format!("{n} gradient checks failed"))),
            }
        }
    }
}

pub fn eval_flags(cli: &Cli) -> EvalFlags {
    EvalFlags {
        use_ap: true,
        use_tp: !(cli.no_tp || cli.ap_only),
        use_tto: !(cli.no_tto || cli.ap_only),
    }
}

/// Training split, training captions, evaluation split and exemplar
/// images, read from `dataset` when set and generated otherwise.
pub struct LoadedData {
    pub train: Vec<VqaSample>,
    pub captions: Vec<CaptionSample>,
    pub eval: Vec<VqaSample>,
}

fn split_named(name: &str) -> Split {
    match name {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

pub fn load_data(cfg: &RunConfig) -> CliResult<LoadedData> {
    let eval_split = split_named(&cfg.eval_split);
    match &cfg.train.dataset {
        Some(dir) => {
            let samples = read_dataset(&dir.join(DATASET_FILE))?;
            let captions = read_captions(&dir.join(CAPTIONS_FILE))?;
            let pick = |s: Split| samples.iter().filter(|x| x.split == s).cloned().collect();
            Ok(LoadedData {
                train: pick(Split::Train),
                eval: pick(eval_split),
                captions: captions.into_iter().filter(|c| c.split == Split::Train).collect(),
            })
        }
        None => {
            let corpus = generate_dataset(&cfg.data, Execution::Parallel)?;
            Ok(LoadedData {
                train: corpus.split(Split::Train),
                eval: corpus.split(eval_split),
                captions: corpus.captions_in(Split::Train),
            })
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let corpus = generate_dataset(&cfg.data, Execution::Parallel)?;
    let dir = out.join("data");
    write_dataset(&dir, &corpus, false)?;
    println!(
        "wrote {} samples and {} captions to {}",
        corpus.samples.len(),
        corpus.captions.len(),
        dir.display()
    );
    Ok(())
}

/// Loads a checkpoint into a state built from `cfg`; every failure is a
/// checkpoint error.
pub fn load_state(cfg: &RunConfig, path: &Path) -> CliResult<TrainState> {
    let ck = Checkpoint::load(path).map_err(CliError::Checkpoint)?;
    let mut st = TrainState::new(&cfg.model, cfg.seed)?;
    st.restore_from(&ck).map_err(CliError::Checkpoint)?;
    Ok(st)
}

fn log_checksum(out: &Path, st: &TrainState) -> CliResult<()> {
    use std::io::Write;
    let path = out.join(CHECKSUM_LOG);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::Other(Error::io(&path, e)))?;
    writeln!(f, "{} {} {}", st.phase.name(), st.step, st.weights.lm_checksum())
        .map_err(|e| CliError::Other(Error::io(&path, e)))
}

/// Writes this run's part of a loss curve. A resumed run keeps the rows
/// before the resume point and appends after them.
fn save_curve(path: &Path, curve: &[(usize, f64)], resumed_at: Option<usize>) -> CliResult<()> {
    match resumed_at {
        Some(step) if path.exists() => {
            let kept: Vec<(usize, f64)> =
                read_loss_csv(path)?.into_iter().filter(|&(s, _)| s < step).collect();
            write_loss_csv(path, &kept)?;
            append_loss_csv(path, curve)?;
        }
        _ => write_loss_csv(path, curve)?,
    }
    Ok(())
}

fn periodic_save<'a>(
    out: &'a Path,
    every: usize,
) -> impl FnMut(&TrainState, f64) -> crate::Result<()> + 'a {
    move |st, _| {
        if every > 0 && st.step % every == 0 {
            st.save(&out.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let data = load_data(cfg)?;
    let (mut st, resumed) = match resume {
        Some(p) => {
            let st = load_state(cfg, p)?;
            let at = (st.phase, st.step);
            (st, Some(at))
        }
        None => (TrainState::new(&cfg.model, cfg.seed)?, None),
    };
    if st.phase == Phase::Stage2 {
        return Err(CliError::Config(Error::Config(
            "pretrain cannot continue a stage 2 checkpoint".into(),
        )));
    }
    let texts = warmup_texts(&data.captions, &data.train);
    let caps: Vec<Example> = data.captions.iter().map(Example::caption).collect();
    let tc = cfg.train_config(1);
    let (warm, s1) = train_stage1(
        &mut st,
        &tc,
        &texts,
        &caps,
        Execution::Parallel,
        periodic_save(out, tc.checkpoint_every),
    )?;
    let warm_resume = resumed.and_then(|(p, s)| (p == Phase::Warmup).then_some(s));
    let s1_resume = resumed.map(|(p, s)| if p == Phase::Stage1 { s } else { 0 });
    if !warm.is_empty() {
        save_curve(&out.join("loss_warmup.csv"), &warm, warm_resume)?;
    }
    save_curve(&out.join("loss_stage1.csv"), &s1, s1_resume)?;
    log_checksum(out, &st)?;
    st.save(&out.join(CHECKPOINT_FILE))?;
    println!(
        "stage 1 done at step {}: trainable {} of {} parameters",
        st.step,
        count_trainable_params(&st.weights, &st.bank),
        count_all_params(&st.weights, &st.bank)
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let path = resume.ok_or_else(|| {
        CliError::Checkpoint(Error::Input("finetune needs --resume CHECKPOINT".into()))
    })?;
    let mut st = load_state(cfg, path)?;
    let resumed = (st.phase == Phase::Stage2).then_some(st.step);
    log_checksum(out, &st)?;
    let data = load_data(cfg)?;
    let vqa: Vec<Example> = data.train.iter().map(Example::vqa).collect();
    let tc = cfg.train_config(2);
    let curve = train_stage2(
        &mut st,
        &tc,
        &vqa,
        Execution::Parallel,
        periodic_save(out, tc.checkpoint_every),
    )?;
    save_curve(&out.join("loss_stage2.csv"), &curve, resumed)?;
    log_checksum(out, &st)?;
    st.save(&out.join(CHECKPOINT_FILE))?;
    let index = vocabulary_for(cfg, &st, &data.train)?;
    index.save_jsonl(&out.join(VOCAB_FILE))?;
    Ok(())
}

fn attributes(cfg: &RunConfig) -> Vec<String> {
    cfg.data
        .colors
        .iter()
        .map(|c| c.word().to_string())
        .chain(cfg.data.shapes.iter().map(|s| s.word().to_string()))
        .collect()
}

/// The configured vocabulary file, or one built from the training answers.
fn vocabulary_for(cfg: &RunConfig, st: &TrainState, train: &[VqaSample]) -> CliResult<VocabularyIndex> {
    match &cfg.vocabulary {
        Some(p) => Ok(VocabularyIndex::load_jsonl(p, cfg.model.vision_dim)?),
        None => Ok(build_vocabulary(
            train,
            &attributes(cfg),
            &render_exemplars(&cfg.data),
            &st.weights,
        )?),
    }
}

pub fn inference_options(cfg: &RunConfig, flags: EvalFlags) -> InferenceOptions {
    InferenceOptions {
        flags: PromptFlags {
            adaption: flags.use_ap,
            prefix: flags.use_tp,
        },
        use_tto: flags.use_tto,
        k: cfg.k,
        tto_iters: cfg.tto_iters,
        tto_step: cfg.tto_step,
        max_new: cfg.max_new,
    }
}

fn report_name(flags: EvalFlags) -> String {
    format!(
        "eval_{}.json",
        flags.label().to_lowercase().replace('+', "_")
    )
}

pub fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    flags: EvalFlags,
    hash: String,
) -> CliResult<EvalReport> {
    let data = load_data(cfg)?;
    let report = if cfg.eval_oracle {
        let preds: Vec<String> = data.eval.iter().map(|s| s.answer.clone()).collect();
        score_predictions(&data.eval, &preds, flags, hash)?
    } else {
        let path = resume.ok_or_else(|| {
            CliError::Checkpoint(Error::Input("eval needs --resume CHECKPOINT".into()))
        })?;
        let st = load_state(cfg, path)?;
        let index = if flags.use_tto {
            Some(vocabulary_for(cfg, &st, &data.train)?)
        } else {
            None
        };
        evaluate_model(
            &st.weights,
            &st.bank,
            index.as_ref(),
            &data.eval,
            flags,
            &inference_options(cfg, flags),
            hash,
            Execution::Parallel,
        )?
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_text(&out.join(report_name(flags)), &json)?;
    Ok(report)
}

pub fn cmd_infer(
    cfg: &RunConfig,
    resume: Option<&Path>,
    image: &Path,
    question: &str,
    flags: EvalFlags,
) -> CliResult<InferenceOutput> {
    let path = resume.ok_or_else(|| {
        CliError::Checkpoint(Error::Input("infer needs --resume CHECKPOINT".into()))
    })?;
    let st = load_state(cfg, path)?;
    let img = read_image(image).map_err(CliError::Input)?;
    let m = &cfg.model;
    if img.channels != m.image_channels || img.height != m.image_size || img.width != m.image_size {
        return Err(CliError::Input(Error::Input(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            img.channels, img.height, img.width, m.image_channels, m.image_size, m.image_size
        ))));
    }
    let tok = Tokenizer::new();
    let q = tok.encode(question).map_err(CliError::Input)?;
    let index = if flags.use_tto {
        let train = load_data(cfg)?.train;
        Some(vocabulary_for(cfg, &st, &train)?)
    } else {
        None
    };
    Ok(answer_question(
        &st.weights,
        &st.bank,
        index.as_ref(),
        &tok,
        &img,
        &q,
        &inference_options(cfg, flags),
    )?)
}

#[derive(Serialize)]
struct GradcheckFile<'a> {
    injected_fault: Option<&'static str>,
    rows: &'a [GradcheckRow],
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> CliResult<Vec<GradcheckRow>> {
    let fault = cfg.gradcheck_inject_fault;
    let rows = gradcheck_suite(GRADCHECK_SEEDS, fault, Execution::Parallel)?;
    let file = GradcheckFile {
        injected_fault: fault.map(|k| k.name()),
        rows: &rows,
    };
    let json = serde_json::to_string_pretty(&file).map_err(Error::from)?;
    write_text(&out.join("gradcheck.json"), &json)?;
    Ok(rows)
}
