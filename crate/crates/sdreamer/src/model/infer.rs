//! Pathway-selective batch inference.
//!
//! Auto mode picks the mix pathway when both channels are present and the
//! single available modality's pathway otherwise; a forced pathway must be
//! compatible with the channels on hand. Probabilities are the plain
//! (temperature 1) softmax of the chosen pathway's logits.

use crate::mome::{Graph, PathwayId};
use crate::params::ParamStore;
use crate::signal::{EpochKey, PatchedEpoch, SequenceSample, Stage};
use crate::tensor::Tape;

use super::{
    epoch_batch, epoch_forward, sequence_batch, sequence_epoch_encode, sequence_forward,
    EpochModel, ModelError, PathwaySelect, SequenceModel,
};

/// How to pick the forward pathway at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathwayChoice {
    /// Mix when both channels are present, else the available modality.
    Auto,
    Force(PathwayId),
}

/// One classified epoch.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Index of the epoch in the caller's epoch list.
    pub index: usize,
    pub label: Stage,
    /// Class probabilities, `n_classes` entries summing to 1.
    pub probs: Vec<f64>,
    pub pathway: PathwayId,
}

/// Final-layer summary representation of one epoch (2D wide for mix).
#[derive(Debug, Clone)]
pub struct EpochEmbedding {
    pub index: usize,
    pub pathway: PathwayId,
    pub values: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct InferOutput {
    pub predictions: Vec<Prediction>,
    /// Present when embeddings were requested.
    pub embeddings: Vec<EpochEmbedding>,
}

/// Epochs per forward pass; bounds tape memory during bulk inference.
const INFER_CHUNK: usize = 256;

/// Resolve the pathway for a batch with the given channel availability.
pub fn choose_pathway(
    has_eeg: bool,
    has_emg: bool,
    choice: PathwayChoice,
) -> Result<PathwayId, ModelError> {
    match choice {
        PathwayChoice::Auto => match (has_eeg, has_emg) {
            (true, true) => Ok(PathwayId::Mix),
            (true, false) => Ok(PathwayId::Eeg),
            (false, true) => Ok(PathwayId::Emg),
            (false, false) => Err(ModelError::EmptyBatch),
        },
        PathwayChoice::Force(PathwayId::Mix) if !(has_eeg && has_emg) => {
            Err(ModelError::MixNeedsBothModalities)
        }
        PathwayChoice::Force(PathwayId::Eeg) if !has_eeg => Err(ModelError::MissingModality {
            pathway: "eeg",
            modality: "eeg",
        }),
        PathwayChoice::Force(PathwayId::Emg) if !has_emg => Err(ModelError::MissingModality {
            pathway: "emg",
            modality: "emg",
        }),
        PathwayChoice::Force(p) => Ok(p),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Classify every epoch with the epoch model.
pub fn infer_epochs(
    store: &ParamStore,
    model: &EpochModel,
    epochs: &[PatchedEpoch],
    choice: PathwayChoice,
    want_embeddings: bool,
) -> Result<InferOutput, ModelError> {
    let first = epochs.first().ok_or(ModelError::EmptyBatch)?;
    let pathway = choose_pathway(!first.eeg.is_empty(), !first.emg.is_empty(), choice)?;
    let n_classes = model.config.n_classes;

    let mut out = InferOutput::default();
    for (chunk_idx, chunk) in epochs.chunks(INFER_CHUNK).enumerate() {
        let refs: Vec<&PatchedEpoch> = chunk.iter().collect();
        let mut tape = Tape::new();
        let inputs = epoch_batch(&mut tape, &refs)?;
        let mut g = Graph::new(&mut tape, store, false);
        let (logits, reprs) =
            epoch_forward(&mut g, model, &inputs, PathwaySelect::only(pathway))?;
        let z = logits.get(pathway).expect("requested pathway present");
        let probs = g.tape.softmax(z, 1);
        let base = chunk_idx * INFER_CHUNK;
        let flat = tape.value(probs);
        for (i, row) in flat.chunks_exact(n_classes).enumerate() {
            let label = Stage::from_index(argmax(row)).expect("argmax in class range");
            out.predictions.push(Prediction {
                index: base + i,
                label,
                probs: row.to_vec(),
                pathway,
            });
        }
        if want_embeddings {
            let repr = match pathway {
                PathwayId::Eeg => reprs.eeg,
                PathwayId::Emg => reprs.emg,
                PathwayId::Mix => reprs.mix,
            }
            .expect("requested pathway present");
            let values = tape.value(repr);
            let width = values.len() / chunk.len();
            for (i, row) in values.chunks_exact(width).enumerate() {
                out.embeddings.push(EpochEmbedding {
                    index: base + i,
                    pathway,
                    values: row.to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Sequences per forward pass during inference.
const INFER_SEQ_CHUNK: usize = 16;

/// Classify every epoch covered by `windows` with the sequence model. Each
/// window contributes one prediction per covered epoch; when windows
/// overlap, the later window's prediction for an epoch wins.
pub fn infer_sequences(
    store: &ParamStore,
    model: &SequenceModel,
    epochs: &[PatchedEpoch],
    windows: &[SequenceSample],
    choice: PathwayChoice,
    want_embeddings: bool,
) -> Result<InferOutput, ModelError> {
    let first = epochs.first().ok_or(ModelError::EmptyBatch)?;
    let pathway = choose_pathway(!first.eeg.is_empty(), !first.emg.is_empty(), choice)?;
    let n_classes = model.config.n_classes;
    let k = model.config.seq_len;

    // Keyed by epoch index so overlapping windows overwrite.
    let mut predictions: Vec<Option<Prediction>> = vec![None; epochs.len()];
    let mut embeddings: Vec<Option<EpochEmbedding>> = vec![None; epochs.len()];

    for chunk in windows.chunks(INFER_SEQ_CHUNK) {
        let refs: Vec<&SequenceSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let inputs = sequence_batch(&mut tape, epochs, &refs)?;
        let mut g = Graph::new(&mut tape, store, false);
        let ze = match inputs.eeg {
            Some(v) => Some(sequence_epoch_encode(&mut g, model, v, PathwayId::Eeg)?),
            None => None,
        };
        let zm = match inputs.emg {
            Some(v) => Some(sequence_epoch_encode(&mut g, model, v, PathwayId::Emg)?),
            None => None,
        };
        let (logits, reprs) =
            sequence_forward(&mut g, model, ze, zm, PathwaySelect::only(pathway))?;
        let z = logits.get(pathway).expect("requested pathway present");
        let probs = g.tape.softmax(z, 2);
        let flat = tape.value(probs);
        let per_window = k * n_classes;
        for (w_idx, window) in chunk.iter().enumerate() {
            let rows = &flat[w_idx * per_window..(w_idx + 1) * per_window];
            for (j, row) in rows.chunks_exact(n_classes).enumerate() {
                let label = Stage::from_index(argmax(row)).expect("argmax in class range");
                predictions[window.start + j] = Some(Prediction {
                    index: window.start + j,
                    label,
                    probs: row.to_vec(),
                    pathway,
                });
            }
        }
        if want_embeddings {
            let repr = match pathway {
                PathwayId::Eeg => reprs.eeg,
                PathwayId::Emg => reprs.emg,
                PathwayId::Mix => reprs.mix,
            }
            .expect("requested pathway present");
            let values = tape.value(repr);
            let width = values.len() / (chunk.len() * k);
            for (w_idx, window) in chunk.iter().enumerate() {
                for j in 0..k {
                    let at = (w_idx * k + j) * width;
                    embeddings[window.start + j] = Some(EpochEmbedding {
                        index: window.start + j,
                        pathway,
                        values: values[at..at + width].to_vec(),
                    });
                }
            }
        }
    }

    Ok(InferOutput {
        predictions: predictions.into_iter().flatten().collect(),
        embeddings: embeddings.into_iter().flatten().collect(),
    })
}

/// Non-overlapping windows of length `k` covering `n` epochs; when `k` does
/// not divide `n`, a final window is right-aligned to cover the tail (its
/// predictions for re-covered epochs overwrite the earlier window's).
pub fn coverage_windows(n: usize, k: usize) -> Vec<SequenceSample> {
    let mut out = Vec::new();
    if n < k || k == 0 {
        return out;
    }
    let mut start = 0;
    while start + k <= n {
        out.push(SequenceSample { start, len: k });
        start += k;
    }
    if start < n {
        out.push(SequenceSample { start: n - k, len: k });
    }
    out
}

/// Coverage windows over a possibly multi-subject epoch list: windows never
/// span a subject change or a gap in positions. Runs shorter than `k` get no
/// window (their epochs go unpredicted — the caller should warn).
pub fn coverage_windows_over<E: EpochKey>(epochs: &[E], k: usize) -> Vec<SequenceSample> {
    let mut out = Vec::new();
    let mut run_start = 0;
    for i in 0..=epochs.len() {
        let run_ends = i == epochs.len()
            || (i > run_start && {
                let (prev_subject, prev_pos) = epochs[i - 1].run_key();
                let (subject, pos) = epochs[i].run_key();
                subject != prev_subject || pos != prev_pos + 1
            });
        if run_ends {
            for w in coverage_windows(i - run_start, k) {
                out.push(SequenceSample { start: run_start + w.start, len: w.len });
            }
            run_start = i;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EpochModelConfig, SequenceModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn epoch_model(store: &mut ParamStore) -> EpochModel {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = EpochModelConfig {
            layers: 1,
            mix_start_layer: 1,
            dim: 4,
            patch_width: 2,
            patches: 2,
            heads: 2,
            ffn_dim: 8,
            n_classes: 3,
            use_pos_encoding: true,
            use_mod_encoding: true,
        };
        EpochModel::build(store, cfg, &mut rng).unwrap()
    }

    fn sample_epochs(n: usize, both: bool) -> Vec<PatchedEpoch> {
        (0..n)
            .map(|i| PatchedEpoch {
                eeg: (0..4).map(|j| ((i * 4 + j) as f64 * 0.3).sin()).collect(),
                emg: if both {
                    (0..4).map(|j| ((i * 4 + j) as f64 * 0.7).cos()).collect()
                } else {
                    Vec::new()
                },
                patches: 2,
                width: 2,
                label: None,
                subject_id: "s".into(),
                position: i,
            })
            .collect()
    }

    #[test]
    fn auto_picks_mix_for_dual_and_mono_for_single() {
        assert_eq!(choose_pathway(true, true, PathwayChoice::Auto).unwrap(), PathwayId::Mix);
        assert_eq!(choose_pathway(true, false, PathwayChoice::Auto).unwrap(), PathwayId::Eeg);
        assert_eq!(choose_pathway(false, true, PathwayChoice::Auto).unwrap(), PathwayId::Emg);
        assert!(choose_pathway(false, false, PathwayChoice::Auto).is_err());
    }

    #[test]
    fn multi_subject_coverage_respects_run_boundaries() {
        let mut epochs = sample_epochs(5, true);
        let mut second = sample_epochs(3, true);
        for e in &mut second {
            e.subject_id = "t".into();
        }
        epochs.extend(second);
        let windows = coverage_windows_over(&epochs, 2);
        // Subject s: [0,2), [2,4), tail [3,5). Subject t: [5,7), tail [6,8).
        let spans: Vec<(usize, usize)> = windows.iter().map(|w| (w.start, w.len)).collect();
        assert_eq!(spans, vec![(0, 2), (2, 2), (3, 2), (5, 2), (6, 2)]);
        for w in &windows {
            let run: Vec<&str> = epochs[w.start..w.start + w.len]
                .iter()
                .map(|e| e.subject_id.as_str())
                .collect();
            assert!(run.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn forcing_mix_without_both_channels_fails() {
        let err = choose_pathway(true, false, PathwayChoice::Force(PathwayId::Mix)).unwrap_err();
        assert!(matches!(err, ModelError::MixNeedsBothModalities));
        assert_eq!(
            choose_pathway(true, false, PathwayChoice::Force(PathwayId::Eeg)).unwrap(),
            PathwayId::Eeg
        );
    }

    #[test]
    fn probabilities_sum_to_one_and_match_argmax() {
        let mut store = ParamStore::new();
        let model = epoch_model(&mut store);
        let epochs = sample_epochs(5, true);
        let out = infer_epochs(&store, &model, &epochs, PathwayChoice::Auto, false).unwrap();
        assert_eq!(out.predictions.len(), 5);
        for (i, p) in out.predictions.iter().enumerate() {
            assert_eq!(p.index, i);
            assert_eq!(p.pathway, PathwayId::Mix);
            let sum: f64 = p.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let best = p.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(p.probs[p.label.index()], best);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let mut store = ParamStore::new();
        let model = epoch_model(&mut store);
        let epochs = sample_epochs(3, true);
        let a = infer_epochs(&store, &model, &epochs, PathwayChoice::Auto, true).unwrap();
        let b = infer_epochs(&store, &model, &epochs, PathwayChoice::Auto, true).unwrap();
        for (x, y) in a.predictions.iter().zip(&b.predictions) {
            assert_eq!(x.probs, y.probs);
            assert_eq!(x.label, y.label);
        }
        for (x, y) in a.embeddings.iter().zip(&b.embeddings) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn eeg_only_input_uses_eeg_pathway() {
        let mut store = ParamStore::new();
        let model = epoch_model(&mut store);
        let epochs = sample_epochs(2, false);
        let out = infer_epochs(&store, &model, &epochs, PathwayChoice::Auto, false).unwrap();
        assert!(out.predictions.iter().all(|p| p.pathway == PathwayId::Eeg));
    }

    #[test]
    fn mix_embeddings_are_double_width() {
        let mut store = ParamStore::new();
        let model = epoch_model(&mut store);
        let epochs = sample_epochs(2, true);
        let out = infer_epochs(&store, &model, &epochs, PathwayChoice::Auto, true).unwrap();
        assert_eq!(out.embeddings.len(), 2);
        assert!(out.embeddings.iter().all(|e| e.values.len() == 2 * model.config.dim));
    }

    #[test]
    fn coverage_handles_remainders() {
        assert_eq!(coverage_windows(8, 4).len(), 2);
        let w = coverage_windows(10, 4);
        assert_eq!(w.len(), 3);
        assert_eq!(w[2], SequenceSample { start: 6, len: 4 });
        assert!(coverage_windows(3, 4).is_empty());
    }

    #[test]
    fn sequence_inference_covers_all_epochs_once() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cfg = SequenceModelConfig {
            epoch_layers: 1,
            seq_layers: 1,
            seq_mix_start_layer: 1,
            seq_len: 2,
            dim: 4,
            patch_width: 2,
            patches: 2,
            heads: 2,
            ffn_dim: 8,
            n_classes: 3,
            use_pos_encoding: true,
            use_mod_encoding: true,
        };
        let model = SequenceModel::build(&mut store, cfg, &mut rng).unwrap();
        let epochs = sample_epochs(5, true);
        let windows = coverage_windows(5, 2);
        let out =
            infer_sequences(&store, &model, &epochs, &windows, PathwayChoice::Auto, true).unwrap();
        assert_eq!(out.predictions.len(), 5);
        for (i, p) in out.predictions.iter().enumerate() {
            assert_eq!(p.index, i);
            let sum: f64 = p.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.embeddings.len(), 5);
        assert!(out.embeddings.iter().all(|e| e.values.len() == 8));
    }
}
