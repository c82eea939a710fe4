//! Command implementations behind the CLI: dataset synthesis, training,
//! evaluation, inference, and checkpoint inspection.
//!
//! Every command is deterministic under fixed seed and flags. Errors are
//! split into usage problems (bad flags, bad config, missing paths — exit
//! code 2) and runtime failures (I/O, corrupt files, training aborts — exit
//! code 1) so scripts can tell them apart.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::config::{ModelKind, RunConfig};
use crate::model::checkpoint::{apply_params, load_checkpoint, CheckpointData};
use crate::model::infer::{
    coverage_windows_over, infer_epochs, infer_sequences, InferOutput, PathwayChoice,
};
use crate::model::{EpochModel, Model, SequenceModel};
use crate::mome::PathwayId;
use crate::params::ParamStore;
use crate::signal::{
    load_record, make_sequences, normalize_subject, patch, save_record, slice_epochs,
    synth_generate, PatchedEpoch, SignalError, SignalRecord, SynthConfig,
};
use crate::train::{
    evaluate_epochs, evaluate_sequences, fit, format_report, EvalReport, TrainData, TrainOptions,
};

#[derive(Debug, Error)]
pub enum RunError {
    /// Bad flags, bad config, missing referenced paths. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while doing the work. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Runtime(_) => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> RunError {
    RunError::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> RunError {
    RunError::Runtime(msg.to_string())
}

/// Worker-thread budget for data loading: the machine's parallelism, capped
/// by `SDREAMER_THREADS` when set.
fn worker_threads() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("SDREAMER_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => hw.min(cap),
        _ => hw,
    }
}

/// Load the named subject containers under `data_dir` in parallel,
/// preserving list order.
fn load_subjects(data_dir: &Path, names: &[String]) -> Result<Vec<SignalRecord>, RunError> {
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !data_dir.join(n).is_dir())
        .map(|n| data_dir.join(n).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(usage(format!("missing subject directories: {}", missing.join(", "))));
    }

    let threads = worker_threads().min(names.len().max(1));
    let mut slots: Vec<Option<Result<SignalRecord, SignalError>>> =
        names.iter().map(|_| None).collect();
    let chunk = names.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (out, part) in slots.chunks_mut(chunk).zip(names.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, name) in out.iter_mut().zip(part) {
                    *slot = Some(load_record(&data_dir.join(name)));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled").map_err(runtime))
        .collect()
}

/// Normalize, slice into one-second epochs, and patch one subject.
fn preprocess(record: &SignalRecord, width: usize) -> Result<Vec<PatchedEpoch>, RunError> {
    let (normalized, _) = normalize_subject(record).map_err(runtime)?;
    slice_epochs(&normalized)
        .iter()
        .map(|e| {
            patch(e, width).map_err(|err| match err {
                SignalError::InvalidPatchWidth { .. } => usage(err.to_string()),
                other => runtime(other),
            })
        })
        .collect()
}

fn preprocess_all(records: &[SignalRecord], width: usize) -> Result<Vec<PatchedEpoch>, RunError> {
    let mut out = Vec::new();
    for r in records {
        out.extend(preprocess(r, width)?);
    }
    Ok(out)
}

/// Subject directories (containing a `meta` file) under `dir`, sorted.
fn discover_subjects(dir: &Path) -> Result<Vec<String>, RunError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| usage(format!("cannot read data directory {}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(runtime)?;
        if entry.path().is_dir() && entry.path().join("meta").is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(usage(format!("no subject containers found under {}", dir.display())));
    }
    Ok(names)
}

fn build_model(
    config: &RunConfig,
    patches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamStore, Model), RunError> {
    let mut store = ParamStore::new();
    let model = match config.kind {
        ModelKind::Epoch => Model::Epoch(
            EpochModel::build(&mut store, config.epoch_model_config(patches), rng)
                .map_err(runtime)?,
        ),
        ModelKind::Sequence => Model::Sequence(
            SequenceModel::build(&mut store, config.sequence_model_config(patches), rng)
                .map_err(runtime)?,
        ),
    };
    Ok((store, model))
}

/// Generate a synthetic dataset: one container directory per subject.
pub fn cmd_synth(
    subjects: usize,
    seconds: usize,
    seed: u64,
    out_dir: &Path,
    transition: Option<&str>,
) -> Result<(), RunError> {
    let mut config = SynthConfig::default();
    if let Some(text) = transition {
        let values: Result<Vec<f64>, _> = text.split(',').map(|v| v.trim().parse()).collect();
        let values = values
            .map_err(|_| usage(format!("--transition-matrix: expected 9 numbers, got {text:?}")))?;
        if values.len() != 9 {
            return Err(usage(format!(
                "--transition-matrix: expected 9 comma-separated numbers, got {}",
                values.len()
            )));
        }
        for r in 0..3 {
            config.transition[r].copy_from_slice(&values[r * 3..r * 3 + 3]);
        }
    }
    let records = synth_generate(subjects, seconds, seed, &config)
        .map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    for record in &records {
        let dir = out_dir.join(&record.subject_id);
        save_record(&dir, record).map_err(runtime)?;
    }
    println!("wrote {} subjects ({} s each) to {}", records.len(), seconds, out_dir.display());
    Ok(())
}

/// Everything cmd_train derives from the config before fitting.
struct PreparedRun {
    config: RunConfig,
    store: ParamStore,
    model: Model,
    data: TrainData,
    rng: ChaCha8Rng,
}

fn prepare_run(config: &RunConfig) -> Result<PreparedRun, RunError> {
    config.validate().map_err(|e| usage(e.to_string()))?;
    if !config.data_dir.is_dir() {
        return Err(usage(format!("data directory not found: {}", config.data_dir.display())));
    }

    let train_records = load_subjects(&config.data_dir, &config.train_subjects)?;
    let test_records = load_subjects(&config.data_dir, &config.test_subjects)?;
    let train_epochs = preprocess_all(&train_records, config.patch_width)?;
    let test_epochs = preprocess_all(&test_records, config.patch_width)?;
    if train_epochs.is_empty() {
        return Err(runtime("training subjects yielded no epochs"));
    }

    let patches = train_epochs[0].patches;
    if let Some(expected) = config.patches {
        if expected != patches {
            return Err(usage(format!(
                "patches: config says {expected} but the data yields {patches} \
                 (sample rate / patch_width)"
            )));
        }
    }
    if let Some(first) = test_epochs.first() {
        if first.patches != patches {
            return Err(usage(format!(
                "test data yields {} patches per epoch but training data yields {patches}",
                first.patches
            )));
        }
    }

    let (train_windows, test_windows) = match config.kind {
        ModelKind::Epoch => (Vec::new(), Vec::new()),
        ModelKind::Sequence => {
            let train = make_sequences(&train_epochs, config.seq_len, 1);
            let test = coverage_windows_over(&test_epochs, config.seq_len);
            if train.is_empty() {
                return Err(runtime(format!(
                    "no training sequences of length {} could be formed",
                    config.seq_len
                )));
            }
            (train, test)
        }
    };

    let mut resolved = config.clone();
    resolved.patches = Some(patches);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (store, model) = build_model(&resolved, patches, &mut rng)?;
    Ok(PreparedRun {
        config: resolved,
        store,
        model,
        data: TrainData { train_epochs, test_epochs, train_windows, test_windows },
        rng,
    })
}

/// Train a model per the config file (plus overrides), writing the training
/// log, checkpoint, and final report under `out_dir`.
pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<(), RunError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", config_path.display())))?;
    let mut config = RunConfig::parse_text(&text).map_err(|e| usage(e.to_string()))?;
    config.apply_overrides(overrides).map_err(|e| usage(e.to_string()))?;

    let mut run = prepare_run(&config)?;
    fs::create_dir_all(&run.config.out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", run.config.out_dir.display())))?;
    let log_path = run.config.out_dir.join("train.ndjson");
    let mut log = fs::File::create(&log_path)
        .map_err(|e| runtime(format!("cannot create {}: {e}", log_path.display())))?;

    let options = TrainOptions {
        steps: run.config.steps,
        batch_size: run.config.effective_batch_size(),
        eval_interval: run.config.eval_interval,
        eval_subset: run.config.eval_subset,
        stop_at_accuracy: run.config.stop_at_accuracy,
        sd_eeg_on: run.config.sd_eeg_on,
        sd_emg_on: run.config.sd_emg_on,
        checkpoint_path: run.config.out_dir.join("checkpoint.bin"),
        config_echo: run.config.to_text(),
    };
    let outcome = fit(
        &mut run.store,
        &run.model,
        &run.data,
        &run.config.distill_config(),
        &run.config.optim_config(),
        &options,
        run.rng,
        &mut log,
    )
    .map_err(runtime)?;

    let mut report_text = String::new();
    for (name, report) in [
        ("mix", &outcome.reports.mix),
        ("eeg", &outcome.reports.eeg),
        ("emg", &outcome.reports.emg),
    ] {
        if let Some(r) = report {
            report_text.push_str(&format!("pathway {name}\n{}\n", format_report(r)));
        }
    }
    let report_path = run.config.out_dir.join("final_report.txt");
    fs::write(&report_path, &report_text).map_err(runtime)?;

    print!("{report_text}");
    println!(
        "finished at step {}{}; checkpoint: {}",
        outcome.final_step,
        if outcome.stopped_early { " (stopped early at target accuracy)" } else { "" },
        options.checkpoint_path.display()
    );
    Ok(())
}

/// Rebuild the model a checkpoint was trained with and load its weights.
/// A model rebuilt from a checkpoint, ready for inference.
pub struct RestoredModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub model: Model,
    /// Training step the checkpoint was saved at.
    pub step: u64,
}

pub fn restore_model(checkpoint: &Path) -> Result<RestoredModel, RunError> {
    if !checkpoint.is_file() {
        return Err(usage(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let data: CheckpointData = load_checkpoint(checkpoint).map_err(runtime)?;
    let config = RunConfig::parse_text(&data.config_text)
        .map_err(|e| runtime(format!("checkpoint config does not re-parse: {e}")))?;
    let patches = config
        .patches
        .ok_or_else(|| runtime("checkpoint config is missing the resolved patch count"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut store, model) = build_model(&config, patches, &mut rng)?;
    apply_params(&data, &mut store).map_err(runtime)?;
    Ok(RestoredModel { config, store, model, step: data.step })
}

pub fn parse_pathway(text: &str) -> Result<PathwayChoice, RunError> {
    match text {
        "auto" => Ok(PathwayChoice::Auto),
        "eeg" => Ok(PathwayChoice::Force(PathwayId::Eeg)),
        "emg" => Ok(PathwayChoice::Force(PathwayId::Emg)),
        "mix" => Ok(PathwayChoice::Force(PathwayId::Mix)),
        _ => Err(usage(format!("--pathway: expected auto|eeg|emg|mix, got {text:?}"))),
    }
}

fn evaluate_dataset(
    config: &RunConfig,
    store: &ParamStore,
    model: &Model,
    epochs: &[PatchedEpoch],
    choice: PathwayChoice,
) -> Result<EvalReport, RunError> {
    match model {
        Model::Epoch(m) => evaluate_epochs(store, m, epochs, choice).map_err(runtime),
        Model::Sequence(m) => {
            let windows = coverage_windows_over(epochs, config.seq_len);
            if windows.is_empty() {
                return Err(runtime(format!(
                    "no evaluation sequences of length {} could be formed",
                    config.seq_len
                )));
            }
            evaluate_sequences(store, m, epochs, &windows, choice).map_err(runtime)
        }
    }
}

/// Evaluate a checkpoint on a dataset directory and print the report.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    pathway: &str,
    subjects: Option<&str>,
) -> Result<(), RunError> {
    let choice = parse_pathway(pathway)?;
    let RestoredModel { config, store, model, .. } = restore_model(checkpoint)?;
    if !data_dir.is_dir() {
        return Err(usage(format!("data directory not found: {}", data_dir.display())));
    }
    let names = match subjects {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => discover_subjects(data_dir)?,
    };
    let records = load_subjects(data_dir, &names)?;
    let epochs = preprocess_all(&records, config.patch_width)?;
    let report = evaluate_dataset(&config, &store, &model, &epochs, choice)?;
    print!("{}", format_report(&report));
    Ok(())
}

/// Predict stages for one recording with a restored model. The shared
/// backend for `cmd_infer` and the C ABI.
pub fn predict_record(
    config: &RunConfig,
    store: &ParamStore,
    model: &Model,
    record: &SignalRecord,
    want_embeddings: bool,
) -> Result<InferOutput, RunError> {
    let epochs = preprocess(record, config.patch_width)?;
    match model {
        Model::Epoch(m) => {
            infer_epochs(store, m, &epochs, PathwayChoice::Auto, want_embeddings).map_err(runtime)
        }
        Model::Sequence(m) => {
            let windows = coverage_windows_over(&epochs, config.seq_len);
            if windows.is_empty() {
                return Err(runtime(format!(
                    "{}: fewer than {} epochs; the sequence model cannot cover it",
                    record.subject_id, config.seq_len
                )));
            }
            infer_sequences(store, m, &epochs, &windows, PathwayChoice::Auto, want_embeddings)
                .map_err(runtime)
        }
    }
}

/// Run inference over a container (or a directory of containers), writing
/// one record per epoch to stdout.
pub fn cmd_infer(checkpoint: &Path, input: &Path, emit_embeddings: bool) -> Result<(), RunError> {
    let RestoredModel { config, store, model, .. } = restore_model(checkpoint)?;
    if !input.is_dir() {
        return Err(usage(format!("input directory not found: {}", input.display())));
    }
    let names = if input.join("meta").is_file() {
        vec![String::new()] // `input` itself is a single container
    } else {
        discover_subjects(input)?
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for name in &names {
        let dir = if name.is_empty() { input.to_path_buf() } else { input.join(name) };
        let record = load_record(&dir).map_err(runtime)?;
        let result = predict_record(&config, &store, &model, &record, emit_embeddings)?;
        for (i, p) in result.predictions.iter().enumerate() {
            let mut rec = json!({
                "subject": record.subject_id,
                "index": p.index,
                "label": p.label.name(),
                "probs": p.probs,
                "pathway": p.pathway.name(),
            });
            if emit_embeddings {
                let e = &result.embeddings[i];
                debug_assert_eq!(e.index, p.index);
                rec.as_object_mut()
                    .expect("record is an object")
                    .insert("embedding".into(), json!(e.values));
            }
            writeln!(out, "{rec}").map_err(runtime)?;
        }
    }
    Ok(())
}

/// Print a checkpoint's metadata and echoed config.
pub fn cmd_inspect(checkpoint: &Path) -> Result<(), RunError> {
    if !checkpoint.is_file() {
        return Err(usage(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let data = load_checkpoint(checkpoint).map_err(runtime)?;
    let scalars: usize = data.params.iter().map(|(_, t)| t.numel()).sum();
    println!("format_version = {}", data.version);
    println!("step = {}", data.step);
    println!("param_tensors = {}", data.params.len());
    println!("param_scalars = {scalars}");
    println!("config:");
    for line in data.config_text.lines() {
        println!("  {line}");
    }
    Ok(())
}
