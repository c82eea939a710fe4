//! The training loop: shuffled minibatches, combined objective, AdamW
//! updates, NDJSON progress records, and periodic evaluation.
//!
//! Every step draws the next batch from a shuffled deck of training items
//! (epochs for the epoch model, windows for the sequence model), reshuffling
//! whenever too few remain. All three pathways run forward; cross-entropy is
//! taken on the mix logits and the distillation terms pull each mono pathway
//! toward the mix teacher. A non-finite loss or gradient aborts the run,
//! restoring the last good parameters and writing them to the checkpoint so
//! nothing is lost.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::model::checkpoint::save_checkpoint;
use crate::model::infer::PathwayChoice;
use crate::model::{
    epoch_batch, epoch_forward, sequence_batch, sequence_epoch_encode, sequence_forward,
    sequence_labels, Model, PathwaySelect,
};
use crate::mome::{Graph, PathwayId};
use crate::params::ParamStore;
use crate::signal::{PatchedEpoch, SequenceSample, StageLabel};
use crate::tensor::{Tape, Var};

use super::metrics::{evaluate_epochs, evaluate_sequences, EvalReport};
use super::optim::{adamw_step, clear_grads, OptimConfig, OptimState};
use super::{ce_loss, combine_losses, sd_loss, DistillConfig, LossBreakdown, TrainError};

/// Preprocessed train/test splits. The window lists are only consulted by
/// the sequence model; epoch-model runs may leave them empty.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train_epochs: Vec<PatchedEpoch>,
    pub test_epochs: Vec<PatchedEpoch>,
    pub train_windows: Vec<SequenceSample>,
    pub test_windows: Vec<SequenceSample>,
}

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    /// Evaluate (and checkpoint) every this many steps; 0 disables periodic
    /// evaluation entirely.
    pub eval_interval: u64,
    /// Cap on test items per periodic evaluation; 0 means the full test set.
    pub eval_subset: usize,
    /// Stop once a periodic evaluation reaches this accuracy.
    pub stop_at_accuracy: Option<f64>,
    pub sd_eeg_on: bool,
    pub sd_emg_on: bool,
    pub checkpoint_path: PathBuf,
    /// Run configuration echoed verbatim into every checkpoint.
    pub config_echo: String,
}

/// Full-test evaluations after the last step, one per pathway the test data
/// supports.
#[derive(Debug, Clone, Default)]
pub struct FinalReports {
    pub eeg: Option<EvalReport>,
    pub emg: Option<EvalReport>,
    pub mix: Option<EvalReport>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub reports: FinalReports,
    pub stopped_early: bool,
}

/// Next-batch cursor over a shuffled index deck.
struct Deck {
    order: Vec<usize>,
    cursor: usize,
}

impl Deck {
    fn new(n: usize) -> Self {
        Deck { order: (0..n).collect(), cursor: n }
    }

    fn draw(&mut self, count: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.cursor + count > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let batch = &self.order[self.cursor..self.cursor + count];
        self.cursor += count;
        batch
    }
}

/// Pathway logits flattened to `[N, classes]` plus the matching labels.
struct StepTensors {
    eeg: Var,
    emg: Var,
    mix: Var,
    labels: Vec<StageLabel>,
}

fn epoch_step_tensors(
    g: &mut Graph,
    model: &crate::model::EpochModel,
    epochs: &[PatchedEpoch],
    indices: &[usize],
) -> Result<StepTensors, TrainError> {
    let refs: Vec<&PatchedEpoch> = indices.iter().map(|&i| &epochs[i]).collect();
    let inputs = epoch_batch(g.tape, &refs)?;
    let (logits, _) = epoch_forward(g, model, &inputs, PathwaySelect::all())?;
    let labels = refs.iter().map(|e| e.label).collect();
    Ok(StepTensors {
        eeg: logits.eeg.expect("eeg pathway selected"),
        emg: logits.emg.expect("emg pathway selected"),
        mix: logits.mix.expect("mix pathway selected"),
        labels,
    })
}

fn sequence_step_tensors(
    g: &mut Graph,
    model: &crate::model::SequenceModel,
    epochs: &[PatchedEpoch],
    windows: &[SequenceSample],
    indices: &[usize],
) -> Result<StepTensors, TrainError> {
    let refs: Vec<&SequenceSample> = indices.iter().map(|&i| &windows[i]).collect();
    let inputs = sequence_batch(g.tape, epochs, &refs)?;
    let z_eeg = match inputs.eeg {
        Some(v) => Some(sequence_epoch_encode(g, model, v, PathwayId::Eeg)?),
        None => None,
    };
    let z_emg = match inputs.emg {
        Some(v) => Some(sequence_epoch_encode(g, model, v, PathwayId::Emg)?),
        None => None,
    };
    let (logits, _) = sequence_forward(g, model, z_eeg, z_emg, PathwaySelect::all())?;

    // [B, K, C] -> [B*K, C]; labels are gathered window-major to match.
    let flatten = |g: &mut Graph, v: Var| {
        let shape = g.tape.shape_of(v).to_vec();
        g.tape.reshape(v, &[shape[0] * shape[1], shape[2]])
    };
    let mut labels = Vec::with_capacity(refs.len() * refs[0].len);
    for w in &refs {
        labels.extend(sequence_labels(epochs, w));
    }
    let eeg = logits.eeg.expect("eeg pathway selected");
    let emg = logits.emg.expect("emg pathway selected");
    let mix = logits.mix.expect("mix pathway selected");
    Ok(StepTensors {
        eeg: flatten(g, eeg),
        emg: flatten(g, emg),
        mix: flatten(g, mix),
        labels,
    })
}

fn eval_subset<T>(items: &[T], cap: usize) -> &[T] {
    if cap == 0 { items } else { &items[..cap.min(items.len())] }
}

fn evaluate(
    store: &ParamStore,
    model: &Model,
    data: &TrainData,
    cap: usize,
    choice: PathwayChoice,
) -> Result<EvalReport, TrainError> {
    match model {
        Model::Epoch(m) => {
            evaluate_epochs(store, m, eval_subset(&data.test_epochs, cap), choice)
        }
        Model::Sequence(m) => evaluate_sequences(
            store,
            m,
            &data.test_epochs,
            eval_subset(&data.test_windows, cap),
            choice,
        ),
    }
}

fn write_eval_record(
    log: &mut dyn Write,
    step: u64,
    report: &EvalReport,
) -> Result<(), TrainError> {
    let mut value = serde_json::to_value(report).expect("eval report serializes");
    let obj = value.as_object_mut().expect("eval report is a json object");
    obj.insert("step".into(), json!(step));
    obj.insert("kind".into(), json!("eval"));
    writeln!(log, "{value}")?;
    Ok(())
}

fn snapshot_params(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| t.data().to_vec()).collect()
}

fn restore_params(store: &mut ParamStore, snapshot: &[Vec<f64>]) {
    let ids: Vec<_> = store.ids().collect();
    for (id, data) in ids.into_iter().zip(snapshot) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }
}

/// Train `model` in place, streaming one NDJSON record per step (and per
/// evaluation) into `log`. Returns the final step count and the full-test
/// reports for every pathway the test split supports.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    store: &mut ParamStore,
    model: &Model,
    data: &TrainData,
    distill: &DistillConfig,
    optim: &OptimConfig,
    opts: &TrainOptions,
    mut rng: ChaCha8Rng,
    log: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    let n_train = match model {
        Model::Epoch(_) => data.train_epochs.len(),
        Model::Sequence(_) => data.train_windows.len(),
    };
    if n_train == 0 {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    let batch = opts.batch_size.max(1).min(n_train);

    let mut deck = Deck::new(n_train);
    let mut opt_state = OptimState::new(store);
    let mut last_good = snapshot_params(store);
    let mut stopped_early = false;

    let abort = |store: &mut ParamStore,
                 snapshot: &[Vec<f64>],
                 rng: &ChaCha8Rng,
                 step: u64,
                 opts: &TrainOptions| {
        restore_params(store, snapshot);
        // Best-effort rescue; the original error is the one worth reporting.
        let _ = save_checkpoint(&opts.checkpoint_path, &opts.config_echo, step, rng, store);
    };

    while opt_state.step < opts.steps {
        let started = Instant::now();
        let indices: Vec<usize> = deck.draw(batch, &mut rng).to_vec();

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, store, true);
        let step_t = match model {
            Model::Epoch(m) => epoch_step_tensors(&mut g, m, &data.train_epochs, &indices)?,
            Model::Sequence(m) => {
                sequence_step_tensors(&mut g, m, &data.train_epochs, &data.train_windows, &indices)?
            }
        };

        let labeled: Vec<bool> = step_t.labels.iter().map(|l| l.is_some()).collect();
        let n_labeled = labeled.iter().filter(|&&l| l).count();
        let ce = ce_loss(g.tape, step_t.mix, &step_t.labels)?;
        let zero = |g: &mut Graph| g.tape.constant(&[1], vec![0.0]);
        let sd_eeg = if opts.sd_eeg_on {
            sd_loss(g.tape, step_t.eeg, step_t.mix, distill.tau_eeg, &labeled, distill)
        } else {
            zero(&mut g)
        };
        let sd_emg = if opts.sd_emg_on {
            sd_loss(g.tape, step_t.emg, step_t.mix, distill.tau_emg, &labeled, distill)
        } else {
            zero(&mut g)
        };
        let total = combine_losses(g.tape, ce, sd_eeg, sd_emg, distill.alpha);

        let breakdown = LossBreakdown::new(
            g.tape.value(ce)[0],
            g.tape.value(sd_eeg)[0],
            g.tape.value(sd_emg)[0],
            distill.alpha,
            n_labeled,
        );
        let binder = g.finish();
        if !breakdown.is_finite() {
            let step = opt_state.step;
            abort(store, &last_good, &rng, step, opts);
            return Err(TrainError::NonFiniteLoss {
                step: step + 1,
                ce: breakdown.ce,
                sd_eeg: breakdown.sd_eeg,
                sd_emg: breakdown.sd_emg,
            });
        }
        tape.backward(total);
        binder.harvest_grads(&tape, store);
        drop(tape);

        if let Err(err) = adamw_step(store, &mut opt_state, optim) {
            abort(store, &last_good, &rng, opt_state.step - 1, opts);
            return Err(err);
        }
        clear_grads(store);
        last_good = snapshot_params(store);

        let step = opt_state.step;
        writeln!(
            log,
            "{}",
            json!({
                "step": step,
                "kind": "loss",
                "ce": breakdown.ce,
                "sd_eeg": breakdown.sd_eeg,
                "sd_emg": breakdown.sd_emg,
                "total": breakdown.total,
                "lr": optim.lr,
                "n_labeled": breakdown.n_labeled,
                "wall_ms": started.elapsed().as_millis() as u64,
            })
        )?;

        if opts.eval_interval > 0 && step.is_multiple_of(opts.eval_interval) && step < opts.steps {
            let report =
                evaluate(store, model, data, opts.eval_subset, PathwayChoice::Auto)?;
            write_eval_record(log, step, &report)?;
            log.flush()?;
            save_checkpoint(&opts.checkpoint_path, &opts.config_echo, step, &rng, store)?;
            if let Some(target) = opts.stop_at_accuracy {
                if report.accuracy >= target {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let final_step = opt_state.step;
    let reports = FinalReports {
        eeg: evaluate(store, model, data, 0, PathwayChoice::Force(PathwayId::Eeg)).ok(),
        emg: evaluate(store, model, data, 0, PathwayChoice::Force(PathwayId::Emg)).ok(),
        mix: evaluate(store, model, data, 0, PathwayChoice::Force(PathwayId::Mix)).ok(),
    };
    if let Some(mix) = &reports.mix {
        write_eval_record(log, final_step, mix)?;
    }
    log.flush()?;
    save_checkpoint(&opts.checkpoint_path, &opts.config_echo, final_step, &rng, store)?;

    Ok(TrainOutcome { final_step, reports, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EpochModel, EpochModelConfig, SequenceModel, SequenceModelConfig};
    use crate::signal::Stage;
    use rand::Rng as _;
    use rand::SeedableRng;

    fn fake_epochs(n: usize, patches: usize, width: usize, seed: u64) -> Vec<PatchedEpoch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let stage = Stage::ALL[i % 3];
                // Give each class a distinct mean so a few steps of training
                // have something learnable.
                let shift = stage.index() as f64 - 1.0;
                let gen = |rng: &mut ChaCha8Rng| {
                    (0..patches * width)
                        .map(|_| rng.random_range(-0.5..0.5) + shift)
                        .collect::<Vec<f64>>()
                };
                PatchedEpoch {
                    eeg: gen(&mut rng),
                    emg: gen(&mut rng),
                    patches,
                    width,
                    label: Some(stage),
                    subject_id: "t0".into(),
                    position: i,
                }
            })
            .collect()
    }

    fn tiny_model(seed: u64) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let cfg = EpochModelConfig {
            layers: 2,
            mix_start_layer: 2,
            dim: 8,
            patch_width: 4,
            patches: 2,
            heads: 2,
            ffn_dim: 16,
            ..EpochModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EpochModel::build(&mut store, cfg, &mut rng).unwrap();
        (store, Model::Epoch(model))
    }

    fn tiny_options(dir: &tempfile::TempDir, steps: u64) -> TrainOptions {
        TrainOptions {
            steps,
            batch_size: 4,
            eval_interval: 0,
            eval_subset: 0,
            stop_at_accuracy: None,
            sd_eeg_on: true,
            sd_emg_on: true,
            checkpoint_path: dir.path().join("ckpt.bin"),
            config_echo: "test".into(),
        }
    }

    fn tiny_data() -> TrainData {
        TrainData {
            train_epochs: fake_epochs(12, 2, 4, 1),
            test_epochs: fake_epochs(6, 2, 4, 2),
            train_windows: Vec::new(),
            test_windows: Vec::new(),
        }
    }

    #[test]
    fn zero_lr_and_decay_leave_parameters_unchanged() {
        let (mut store, model) = tiny_model(3);
        let before = snapshot_params(&store);
        let dir = tempfile::tempdir().unwrap();
        let optim = OptimConfig { lr: 0.0, weight_decay: 0.0, ..OptimConfig::default() };
        let mut log = Vec::new();
        fit(
            &mut store,
            &model,
            &tiny_data(),
            &DistillConfig::default(),
            &optim,
            &tiny_options(&dir, 3),
            ChaCha8Rng::seed_from_u64(5),
            &mut log,
        )
        .unwrap();
        assert_eq!(snapshot_params(&store), before);
    }

    #[test]
    fn same_seed_gives_identical_records_modulo_wall_time() {
        let run = || {
            let (mut store, model) = tiny_model(3);
            let dir = tempfile::tempdir().unwrap();
            let mut log = Vec::new();
            fit(
                &mut store,
                &model,
                &tiny_data(),
                &DistillConfig::default(),
                &OptimConfig::default(),
                &tiny_options(&dir, 4),
                ChaCha8Rng::seed_from_u64(5),
                &mut log,
            )
            .unwrap();
            let text = String::from_utf8(log).unwrap();
            text.lines()
                .map(|line| {
                    let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                    v.as_object_mut().unwrap().remove("wall_ms");
                    v.to_string()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn a_few_steps_produce_final_reports_and_checkpoint() {
        let (mut store, model) = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let opts = tiny_options(&dir, 3);
        let mut log = Vec::new();
        let outcome = fit(
            &mut store,
            &model,
            &tiny_data(),
            &DistillConfig::default(),
            &OptimConfig::default(),
            &opts,
            ChaCha8Rng::seed_from_u64(5),
            &mut log,
        )
        .unwrap();
        assert_eq!(outcome.final_step, 3);
        assert!(!outcome.stopped_early);
        assert!(outcome.reports.eeg.is_some());
        assert!(outcome.reports.emg.is_some());
        assert!(outcome.reports.mix.is_some());
        assert!(opts.checkpoint_path.exists());

        let text = String::from_utf8(log).unwrap();
        let kinds: Vec<String> = text
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["kind"].as_str().unwrap().to_string()
            })
            .collect();
        assert_eq!(kinds, vec!["loss", "loss", "loss", "eval"]);
    }

    #[test]
    fn sequence_model_trains_for_a_step() {
        let mut store = ParamStore::new();
        let cfg = SequenceModelConfig {
            epoch_layers: 1,
            seq_layers: 1,
            seq_mix_start_layer: 1,
            seq_len: 3,
            dim: 8,
            patch_width: 4,
            patches: 2,
            heads: 2,
            ffn_dim: 16,
            ..SequenceModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Model::Sequence(SequenceModel::build(&mut store, cfg, &mut rng).unwrap());
        let epochs = fake_epochs(9, 2, 4, 1);
        let windows = vec![
            SequenceSample { start: 0, len: 3 },
            SequenceSample { start: 3, len: 3 },
            SequenceSample { start: 6, len: 3 },
        ];
        let data = TrainData {
            train_epochs: epochs.clone(),
            test_epochs: epochs,
            train_windows: windows.clone(),
            test_windows: windows,
        };
        let dir = tempfile::tempdir().unwrap();
        let mut opts = tiny_options(&dir, 2);
        opts.batch_size = 2;
        let mut log = Vec::new();
        let outcome = fit(
            &mut store,
            &model,
            &data,
            &DistillConfig::default(),
            &OptimConfig::default(),
            &opts,
            ChaCha8Rng::seed_from_u64(5),
            &mut log,
        )
        .unwrap();
        assert_eq!(outcome.final_step, 2);
        assert!(outcome.reports.mix.is_some());
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (mut store, model) = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let mut data = tiny_data();
        data.train_epochs.clear();
        let mut log = Vec::new();
        let err = fit(
            &mut store,
            &model,
            &data,
            &DistillConfig::default(),
            &OptimConfig::default(),
            &tiny_options(&dir, 1),
            ChaCha8Rng::seed_from_u64(5),
            &mut log,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit { which: "train" }));
    }

    #[test]
    fn stop_at_accuracy_halts_before_the_step_budget() {
        // An impossible-to-miss bar: any report has accuracy >= 0.
        let (mut store, model) = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = tiny_options(&dir, 50);
        opts.eval_interval = 1;
        opts.stop_at_accuracy = Some(0.0);
        let mut log = Vec::new();
        let outcome = fit(
            &mut store,
            &model,
            &tiny_data(),
            &DistillConfig::default(),
            &OptimConfig::default(),
            &opts,
            ChaCha8Rng::seed_from_u64(5),
            &mut log,
        )
        .unwrap();
        assert!(outcome.stopped_early);
        assert_eq!(outcome.final_step, 1);
    }
}
