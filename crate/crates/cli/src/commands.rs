//! Pipeline subcommands: gen-data, split, train, generate, rank, report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use desktune_core::clients::HttpTextClient;
use desktune_core::corpus::{
    build_eval_prompt, build_qgen_prompt, detokenize, read_jsonl, stratified_split, write_jsonl,
    AnswerQuality, BloomLevel, EvalRecord, PromptPair, QGenRecord, BOS, EOS, SEP, PAPER_SPLIT,
};
use desktune_core::judge::{
    aggregate, anonymize, collect_ranking, read_sheets, render_table, write_sheets, JudgeClient,
    RankSheet, RankTable, StubJudge,
};
use desktune_core::lora::{trainable_param_count, AttachmentFlags};
use desktune_core::model::{GenerateMode, Model};
use desktune_core::numerics::Rng;
use desktune_core::synthgen::{
    generate_eval_dataset, generate_qgen_dataset, GeneratorClient, StubGenerator, TopicRegistry,
};
use desktune_core::trainkit::{
    config_fingerprint, load_checkpoint, train, ResumePoint, Sample, TokenizedSplits,
    TrainOptions, FINAL_CHECKPOINT, RESUME_CHECKPOINT,
};

use crate::config::{ClientKind, RunConfig, Task};

// RNG stream tags for pipeline stages outside the training loop.
const STREAM_GEN_DATA: u64 = 10 << 56;
const STREAM_RANK: u64 = 11 << 56;

/// Failures are split by exit code: 1 for validation (bad input, missing
/// upstream artifacts, refusal to clobber), 2 for runtime faults.
#[derive(Debug)]
pub enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(e) => write!(f, "{e:#}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn validation(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

type CmdResult = Result<(), CliError>;

/// Refuse to overwrite outputs unless `--force` was given.
fn refuse_clobber(paths: &[PathBuf], force: bool) -> CmdResult {
    if force {
        return Ok(());
    }
    for path in paths {
        if path.exists() {
            return Err(validation(anyhow!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Missing upstream artifacts name the command that produces them.
fn require_artifact(path: &Path, produced_by: &str) -> CmdResult {
    if !path.exists() {
        return Err(validation(anyhow!(
            "{} not found; run `desktune {produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

fn make_generator(cfg: &RunConfig) -> Result<Box<dyn GeneratorClient>, CliError> {
    match cfg.client {
        ClientKind::Stub => Ok(Box::new(StubGenerator::new(cfg.seed))),
        ClientKind::Http => Ok(Box::new(HttpTextClient::from_env("GEN").map_err(validation)?)),
    }
}

fn make_judge(cfg: &RunConfig) -> Result<Box<dyn JudgeClient>, CliError> {
    match cfg.client {
        ClientKind::Stub => Ok(Box::new(StubJudge)),
        ClientKind::Http => Ok(Box::new(HttpTextClient::from_env("JUDGE").map_err(validation)?)),
    }
}

fn fnv64(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for byte in text.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Generate both synthetic datasets with the configured client and print
/// per-level / per-tier counts.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> CmdResult {
    require_artifact(&cfg.registry, "gen-data with a valid --config registry path")
        .map_err(|_| {
            validation(anyhow!(
                "registry file {} not found (set `registry =` in the config)",
                cfg.registry.display()
            ))
        })?;
    let qgen_path = cfg.dataset_path(Task::QGen);
    let eval_path = cfg.dataset_path(Task::Eval);
    refuse_clobber(&[qgen_path.clone(), eval_path.clone()], force)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create {}", cfg.out_dir.display()))
        .map_err(runtime)?;

    let mut registry = TopicRegistry::load(&cfg.registry).map_err(validation)?;
    let total = registry.total();
    let mut client = make_generator(cfg)?;
    let mut rng = Rng::with_stream(cfg.seed, STREAM_GEN_DATA);

    let outcome = generate_qgen_dataset(&mut registry, client.as_mut(), cfg.gen_triples, &mut rng);
    write_jsonl(&outcome.records, &qgen_path).map_err(runtime)?;

    let seeds: Vec<String> = outcome
        .records
        .iter()
        .take(cfg.eval_seeds)
        .map(|r| r.question.clone())
        .collect();
    if seeds.is_empty() {
        return Err(runtime(anyhow!(
            "no question records were generated; cannot derive eval seeds"
        )));
    }
    let (eval_records, eval_failures) = generate_eval_dataset(&seeds, client.as_mut());
    write_jsonl(&eval_records, &eval_path).map_err(runtime)?;

    let mut level_counts: BTreeMap<BloomLevel, usize> = BTreeMap::new();
    for r in &outcome.records {
        *level_counts.entry(r.bloom_level).or_insert(0) += 1;
    }
    let mut tier_counts: BTreeMap<AnswerQuality, usize> = BTreeMap::new();
    for r in &eval_records {
        *tier_counts.entry(r.answer_quality).or_insert(0) += 1;
    }
    println!(
        "question records: {} -> {}",
        outcome.records.len(),
        qgen_path.display()
    );
    for (level, count) in &level_counts {
        println!("  {level}: {count}");
    }
    println!(
        "evaluation records: {} -> {}",
        eval_records.len(),
        eval_path.display()
    );
    for (tier, count) in &tier_counts {
        println!("  {tier}: {count}");
    }
    for skip in &outcome.skips {
        eprintln!("skipped {}-{}: {}", skip.id_prefix, skip.level, skip.reason);
    }
    for (id, reason) in outcome.failures.iter().chain(&eval_failures) {
        eprintln!("failed {id}: {reason}");
    }
    if outcome.exhausted {
        eprintln!(
            "warning: registry exhausted after {} of {} requested triples; partial output retained",
            registry.used_count(),
            cfg.gen_triples.unwrap_or(total)
        );
    }
    Ok(())
}

/// Stratified 80/15/5 split for every dataset present.
pub fn cmd_split(cfg: &RunConfig, force: bool) -> CmdResult {
    require_artifact(&cfg.dataset_path(cfg.task), "gen-data")?;
    let mut outputs = Vec::new();
    for task in [Task::QGen, Task::Eval] {
        if cfg.dataset_path(task).exists() {
            for split in ["train", "val", "test"] {
                outputs.push(cfg.split_path(task, split));
            }
        }
    }
    refuse_clobber(&outputs, force)?;

    if cfg.dataset_path(Task::QGen).exists() {
        let records: Vec<QGenRecord> =
            read_jsonl(&cfg.dataset_path(Task::QGen)).map_err(validation)?;
        let outcome = stratified_split(&records, PAPER_SPLIT, |r| r.bloom_level.to_string(), cfg.seed)
            .map_err(validation)?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        write_jsonl(&outcome.train, &cfg.split_path(Task::QGen, "train")).map_err(runtime)?;
        write_jsonl(&outcome.val, &cfg.split_path(Task::QGen, "val")).map_err(runtime)?;
        write_jsonl(&outcome.test, &cfg.split_path(Task::QGen, "test")).map_err(runtime)?;
        println!(
            "qgen: {} train / {} val / {} test",
            outcome.train.len(),
            outcome.val.len(),
            outcome.test.len()
        );
    }
    if cfg.dataset_path(Task::Eval).exists() {
        let records: Vec<EvalRecord> =
            read_jsonl(&cfg.dataset_path(Task::Eval)).map_err(validation)?;
        let outcome = stratified_split(
            &records,
            PAPER_SPLIT,
            |r| r.answer_quality.to_string(),
            cfg.seed,
        )
        .map_err(validation)?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        write_jsonl(&outcome.train, &cfg.split_path(Task::Eval, "train")).map_err(runtime)?;
        write_jsonl(&outcome.val, &cfg.split_path(Task::Eval, "val")).map_err(runtime)?;
        write_jsonl(&outcome.test, &cfg.split_path(Task::Eval, "test")).map_err(runtime)?;
        println!(
            "eval: {} train / {} val / {} test",
            outcome.train.len(),
            outcome.val.len(),
            outcome.test.len()
        );
    }
    Ok(())
}

fn prompt_pair_for(task: Task, qgen: Option<&QGenRecord>, eval: Option<&EvalRecord>) -> PromptPair {
    match task {
        Task::QGen => build_qgen_prompt(qgen.expect("qgen record")),
        Task::Eval => build_eval_prompt(eval.expect("eval record")),
    }
}

/// Load a split file for the configured task and encode it into samples.
fn load_samples(cfg: &RunConfig, split: &str) -> Result<Vec<Sample>, CliError> {
    let path = cfg.split_path(cfg.task, split);
    require_artifact(&path, "split")?;
    let pairs: Vec<PromptPair> = match cfg.task {
        Task::QGen => read_jsonl::<QGenRecord>(&path)
            .map_err(validation)?
            .iter()
            .map(|r| prompt_pair_for(cfg.task, Some(r), None))
            .collect(),
        Task::Eval => read_jsonl::<EvalRecord>(&path)
            .map_err(validation)?
            .iter()
            .map(|r| prompt_pair_for(cfg.task, None, Some(r)))
            .collect(),
    };
    let total = pairs.len();
    let samples: Vec<Sample> = pairs
        .iter()
        .filter_map(|p| desktune_core::corpus::encode_pair(p, cfg.max_seq))
        .collect();
    if samples.len() < total {
        eprintln!(
            "warning: {} of {total} {split} samples exceed max_seq {} and were skipped",
            total - samples.len(),
            cfg.max_seq
        );
    }
    if samples.is_empty() {
        return Err(validation(anyhow!(
            "no usable samples in {}: raise max_seq or regenerate data",
            path.display()
        )));
    }
    Ok(samples)
}

fn build_model(cfg: &RunConfig) -> Result<Model, CliError> {
    Model::new(
        cfg.model_config(),
        AttachmentFlags::all(),
        cfg.lora_config(),
        &mut Rng::new(cfg.seed),
    )
    .map_err(validation)
}

/// Verify a checkpoint belongs to this architecture before using it.
fn load_verified_checkpoint(
    cfg: &RunConfig,
    path: &Path,
) -> Result<desktune_core::trainkit::Checkpoint, CliError> {
    let ckpt = load_checkpoint(path).map_err(validation)?;
    let expected = config_fingerprint(&cfg.model_config());
    if ckpt.config_hash != expected {
        return Err(validation(anyhow!(
            "checkpoint {} was written for a different model config (hash {:#018x}, expected {:#018x})",
            path.display(),
            ckpt.config_hash,
            expected
        )));
    }
    Ok(ckpt)
}

/// Instruct-tune the adapters on the task's train/val splits.
pub fn cmd_train(cfg: &RunConfig, force: bool, resume: bool) -> CmdResult {
    let train_cfg = cfg.train_config().map_err(validation)?;
    let data = TokenizedSplits {
        train: load_samples(cfg, "train")?,
        val: load_samples(cfg, "val")?,
    };
    let ckpt_dir = cfg.checkpoint_dir();
    if !resume {
        refuse_clobber(
            &[ckpt_dir.join(FINAL_CHECKPOINT), cfg.loss_curve_path()],
            force,
        )?;
    }
    fs::create_dir_all(&ckpt_dir)
        .with_context(|| format!("cannot create {}", ckpt_dir.display()))
        .map_err(runtime)?;

    let mut model = build_model(cfg)?;
    println!(
        "model: {} trainable adapter parameters over {} sites",
        trainable_param_count(model.adapters()),
        model.adapters().len()
    );

    let resume_point = if resume {
        let path = ckpt_dir.join(RESUME_CHECKPOINT);
        require_artifact(&path, "train")?;
        let ckpt = load_verified_checkpoint(cfg, &path)?;
        model
            .load_adapter_state(&ckpt.tensors)
            .map_err(validation)?;
        println!("resuming from iteration {}", ckpt.iteration);
        Some(ResumePoint {
            iteration: ckpt.iteration,
            optimizer: ckpt.optimizer.ok_or_else(|| {
                validation(anyhow!("resume checkpoint lacks optimizer state"))
            })?,
        })
    } else {
        None
    };

    let opts = TrainOptions {
        checkpoint_dir: Some(ckpt_dir.clone()),
        resume: resume_point,
        stop_after: None,
        sample_eos: Some(EOS),
        sample_max_new: cfg.sample_max_new,
        verbose: true,
    };
    let report = train(&mut model, &data, &train_cfg, &opts).map_err(runtime)?;

    fs::write(cfg.loss_curve_path(), report.curve.to_csv())
        .with_context(|| format!("cannot write {}", cfg.loss_curve_path().display()))
        .map_err(runtime)?;
    for (iteration, tokens) in &report.eval_generations {
        println!("sample @ iter {iteration}: {:?}", detokenize(tokens));
    }
    println!(
        "finished at iteration {}; checkpoints in {}, loss curve in {}",
        report.final_iteration,
        ckpt_dir.display(),
        cfg.loss_curve_path().display()
    );
    Ok(())
}

/// Prompt ids for generation: BOS + prompt bytes + SEP (the model was
/// trained to complete after the separator).
fn generation_ids(prompt: &str) -> Vec<usize> {
    let mut ids = Vec::with_capacity(prompt.len() + 2);
    ids.push(BOS);
    ids.extend(prompt.bytes().map(|b| b as usize));
    ids.push(SEP);
    ids
}

/// Print a completion for an ad-hoc prompt using the trained adapters.
pub fn cmd_generate(
    cfg: &RunConfig,
    prompt: &str,
    max_new: usize,
    temperature: Option<f64>,
) -> CmdResult {
    if prompt.is_empty() {
        return Err(validation(anyhow!("--prompt must be nonempty")));
    }
    let ckpt_path = cfg.checkpoint_dir().join(FINAL_CHECKPOINT);
    require_artifact(&ckpt_path, "train")?;
    let ckpt = load_verified_checkpoint(cfg, &ckpt_path)?;
    let mut model = build_model(cfg)?;
    model.load_adapter_state(&ckpt.tensors).map_err(validation)?;

    let ids = generation_ids(prompt);
    if ids.len() >= cfg.max_seq {
        return Err(validation(anyhow!(
            "prompt needs {} tokens but max_seq is {}",
            ids.len(),
            cfg.max_seq
        )));
    }
    let mode = match temperature {
        Some(t) if t > 0.0 => GenerateMode::Temperature(t),
        Some(_) => return Err(validation(anyhow!("--temperature must be positive"))),
        None => GenerateMode::Greedy,
    };
    let mut rng = Rng::with_stream(cfg.seed, STREAM_RANK + 1);
    let tokens = model
        .generate(&ids, max_new, mode, Some(EOS), &mut rng)
        .map_err(runtime)?;
    println!("{}", detokenize(&tokens[ids.len()..]));
    Ok(())
}

/// The four candidate responders compared by the judge at desk scale.
fn candidate_responses(
    tuned: &Model,
    base: &Model,
    pair: &PromptPair,
    cfg: &RunConfig,
) -> Result<Vec<(String, String)>, CliError> {
    let ids = generation_ids(&pair.prompt);
    let run = |model: &Model| -> Result<String, CliError> {
        if ids.len() >= cfg.max_seq {
            return Ok(String::new());
        }
        let mut rng = Rng::new(0); // greedy decoding never consults it
        let tokens = model
            .generate(&ids, cfg.rank_max_new, GenerateMode::Greedy, Some(EOS), &mut rng)
            .map_err(runtime)?;
        Ok(detokenize(&tokens[ids.len()..]))
    };
    Ok(vec![
        ("tuned".to_string(), run(tuned)?),
        ("base".to_string(), run(base)?),
        ("reference".to_string(), pair.target.clone()),
        (
            "canned".to_string(),
            "A short canned answer for calibration.".to_string(),
        ),
    ])
}

/// Rank candidate responses on the task's test prompts via the configured
/// judge, writing blind sheets and the separate label mapping.
pub fn cmd_rank(cfg: &RunConfig, force: bool) -> CmdResult {
    let ckpt_path = cfg.checkpoint_dir().join(FINAL_CHECKPOINT);
    require_artifact(&ckpt_path, "train")?;
    let test_path = cfg.split_path(cfg.task, "test");
    require_artifact(&test_path, "split")?;
    refuse_clobber(&[cfg.sheets_path(), cfg.mapping_path()], force)?;

    let ckpt = load_verified_checkpoint(cfg, &ckpt_path)?;
    let mut tuned = build_model(cfg)?;
    tuned.load_adapter_state(&ckpt.tensors).map_err(validation)?;
    let base = build_model(cfg)?;

    struct TestPrompt {
        id: String,
        pair: PromptPair,
    }
    let prompts: Vec<TestPrompt> = match cfg.task {
        Task::QGen => read_jsonl::<QGenRecord>(&test_path)
            .map_err(validation)?
            .iter()
            .map(|r| TestPrompt {
                id: r.id.clone(),
                pair: build_qgen_prompt(r),
            })
            .collect(),
        Task::Eval => read_jsonl::<EvalRecord>(&test_path)
            .map_err(validation)?
            .iter()
            .map(|r| TestPrompt {
                id: r.id.clone(),
                pair: build_eval_prompt(r),
            })
            .collect(),
    };
    if prompts.is_empty() {
        return Err(validation(anyhow!(
            "test split {} is empty",
            test_path.display()
        )));
    }
    let mut judge = make_judge(cfg)?;
    let mut sheets: Vec<RankSheet> = Vec::new();
    let mut discarded = 0usize;
    for prompt in prompts.iter().take(cfg.rank_prompts) {
        let candidates = candidate_responses(&tuned, &base, &prompt.pair, cfg)?;
        let mut rng = Rng::with_stream(cfg.seed, STREAM_RANK ^ fnv64(&prompt.id));
        let (labeled, mapping) = anonymize(&candidates, &mut rng).map_err(runtime)?;
        match collect_ranking(judge.as_mut(), &prompt.id, &prompt.pair.prompt, &labeled, &mapping)
        {
            Ok(sheet) => sheets.push(sheet),
            Err(e) => {
                discarded += 1;
                eprintln!("discarded sheet for {}: {e}", prompt.id);
            }
        }
    }
    if sheets.is_empty() {
        return Err(runtime(anyhow!("every ranking sheet was discarded")));
    }
    write_sheets(&sheets, &cfg.sheets_path(), &cfg.mapping_path()).map_err(runtime)?;
    println!(
        "ranked {} prompts ({} discarded) -> {} + {}",
        sheets.len(),
        discarded,
        cfg.sheets_path().display(),
        cfg.mapping_path().display()
    );
    Ok(())
}

/// Aggregate sheets into the percentage table (or render a counts fixture
/// directly with `--counts`), emitting text and JSON reports.
pub fn cmd_report(cfg: &RunConfig, force: bool, counts: Option<&Path>) -> CmdResult {
    if let Some(path) = counts {
        require_artifact(path, "report --counts with an existing file")
            .map_err(|_| validation(anyhow!("counts file {} not found", path.display())))?;
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(validation)?;
        let table: RankTable = serde_json::from_str(&text)
            .map_err(|e| validation(anyhow!("counts file {}: {e}", path.display())))?;
        table.validate().map_err(validation)?;
        print!("{}", render_table(&table));
        return Ok(());
    }

    require_artifact(&cfg.sheets_path(), "rank")?;
    require_artifact(&cfg.mapping_path(), "rank")?;
    refuse_clobber(&[cfg.report_text_path(), cfg.report_json_path()], force)?;

    let sheets = read_sheets(&cfg.sheets_path(), &cfg.mapping_path()).map_err(validation)?;
    let table = aggregate(&sheets).map_err(runtime)?;
    let text = render_table(&table);
    let mut report = String::new();
    let _ = writeln!(report, "{}", text.trim_end());
    let _ = writeln!(report, "\nprompts ranked: {}", table.n);
    fs::write(cfg.report_text_path(), &report)
        .with_context(|| format!("cannot write {}", cfg.report_text_path().display()))
        .map_err(runtime)?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    fs::write(cfg.report_json_path(), json)
        .with_context(|| format!("cannot write {}", cfg.report_json_path().display()))
        .map_err(runtime)?;
    print!("{text}");
    println!(
        "\nwrote {} and {}",
        cfg.report_text_path().display(),
        cfg.report_json_path().display()
    );
    Ok(())
}
