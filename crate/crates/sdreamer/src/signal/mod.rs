//! Signal records and preprocessing.
//!
//! A recording is a per-subject pair of EEG/EMG traces with one sleep-stage
//! label per second. Preprocessing normalizes each subject's channels with
//! whole-trace statistics, slices the traces into one-second epochs, groups
//! epochs into fixed-length sequences that never cross subject boundaries,
//! and cuts each epoch into non-overlapping patches for the transformer.

mod container;
mod synth;

pub use container::{load_record, save_record};
pub use synth::{synth_generate, StageSignature, SynthConfig};

use std::path::PathBuf;

use thiserror::Error;

/// The three scored sleep stages. Class indices are stable: Wake=0, SWS=1,
/// REM=2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Wake,
    Sws,
    Rem,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Wake, Stage::Sws, Stage::Rem];

    pub fn index(self) -> usize {
        match self {
            Stage::Wake => 0,
            Stage::Sws => 1,
            Stage::Rem => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Stage::ALL.get(i).copied()
    }

    pub fn code(self) -> char {
        match self {
            Stage::Wake => 'W',
            Stage::Sws => 'S',
            Stage::Rem => 'R',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Wake => "wake",
            Stage::Sws => "sws",
            Stage::Rem => "rem",
        }
    }
}

/// Per-second label: `None` marks an unlabeled second, which flows through
/// the models but is masked out of every loss term.
pub type StageLabel = Option<Stage>;

pub fn label_code(label: StageLabel) -> char {
    label.map_or('-', Stage::code)
}

pub fn label_from_code(c: char) -> Option<StageLabel> {
    match c {
        'W' => Some(Some(Stage::Wake)),
        'S' => Some(Some(Stage::Sws)),
        'R' => Some(Some(Stage::Rem)),
        '-' => Some(None),
        _ => None,
    }
}

/// Which channels a record carries. Dual-channel data enables the mix
/// pathway; mono data restricts inference to that modality's pathway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalitySet {
    pub eeg: bool,
    pub emg: bool,
}

impl ModalitySet {
    pub const BOTH: ModalitySet = ModalitySet { eeg: true, emg: true };

    pub fn count(self) -> usize {
        self.eeg as usize + self.emg as usize
    }
}

/// One subject's raw (or normalized) dual-channel trace with per-second
/// labels. A missing channel is represented by an empty vector and recorded
/// in `modalities`; when both channels are present their lengths agree.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub subject_id: String,
    pub sample_rate_hz: u32,
    pub eeg: Vec<f64>,
    pub emg: Vec<f64>,
    pub labels: Vec<StageLabel>,
}

impl SignalRecord {
    pub fn modalities(&self) -> ModalitySet {
        ModalitySet { eeg: !self.eeg.is_empty(), emg: !self.emg.is_empty() }
    }

    /// Number of whole seconds of signal (partial trailing seconds excluded).
    pub fn whole_seconds(&self) -> usize {
        let len = if self.eeg.is_empty() { self.emg.len() } else { self.eeg.len() };
        len / self.sample_rate_hz as usize
    }
}

/// Whole-trace mean/std for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-subject normalization statistics, one entry per present channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub eeg: Option<ChannelStats>,
    pub emg: Option<ChannelStats>,
}

/// One second of signal with its label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSample {
    /// `sample_rate_hz` samples, or empty when the channel is absent.
    pub eeg: Vec<f64>,
    pub emg: Vec<f64>,
    pub label: StageLabel,
    pub subject_id: String,
    /// Epoch index within the source record.
    pub position: usize,
}

/// Window of `len` consecutive same-subject epochs, stored as indices into
/// the epoch list it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSample {
    pub start: usize,
    pub len: usize,
}

/// An epoch cut into P non-overlapping width-W patches per channel
/// (row-major P × W; trailing samples beyond P·W are dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedEpoch {
    pub eeg: Vec<f64>,
    pub emg: Vec<f64>,
    pub patches: usize,
    pub width: usize,
    pub label: StageLabel,
    pub subject_id: String,
    pub position: usize,
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed at byte {offset}: {what}")]
    Malformed { path: PathBuf, offset: u64, what: String },
    #[error("{path}: channel length mismatch: eeg {eeg} samples vs emg {emg}")]
    ChannelMismatch { path: PathBuf, eeg: usize, emg: usize },
    #[error("{path}: label count mismatch at byte {offset}: {expected} whole seconds of signal but {got} labels")]
    LabelCount { path: PathBuf, offset: u64, expected: usize, got: usize },
    #[error("subject {subject}: {channel} channel is degenerate (std {std:.3e} below 1e-12)")]
    DegenerateChannel { subject: String, channel: &'static str, std: f64 },
    #[error("subject {subject}: record has no samples")]
    EmptyRecord { subject: String },
    #[error("transition matrix row {row} ({stage:?}) sums to {sum} (must be 1 within 1e-9)")]
    BadTransitionRow { row: usize, stage: Stage, sum: f64 },
    #[error("transition matrix row {row} has a negative entry {value}")]
    NegativeTransition { row: usize, value: f64 },
    #[error("patch width {width} exceeds epoch length {t}")]
    InvalidPatchWidth { width: usize, t: usize },
}

/// Normalize each present channel by the subject's whole-trace mean and
/// population standard deviation, returning the stats for audit.
pub fn normalize_subject(
    record: &SignalRecord,
) -> Result<(SignalRecord, NormalizationStats), SignalError> {
    if record.eeg.is_empty() && record.emg.is_empty() {
        return Err(SignalError::EmptyRecord { subject: record.subject_id.clone() });
    }
    let mut out = record.clone();
    let eeg = normalize_channel(&mut out.eeg, &record.subject_id, "eeg")?;
    let emg = normalize_channel(&mut out.emg, &record.subject_id, "emg")?;
    Ok((out, NormalizationStats { eeg, emg }))
}

fn normalize_channel(
    samples: &mut [f64],
    subject: &str,
    channel: &'static str,
) -> Result<Option<ChannelStats>, SignalError> {
    if samples.is_empty() {
        return Ok(None);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Err(SignalError::DegenerateChannel {
            subject: subject.to_string(),
            channel,
            std,
        });
    }
    for v in samples.iter_mut() {
        *v = (*v - mean) / std;
    }
    Ok(Some(ChannelStats { mean, std }))
}

/// Cut a record into one-second epochs. Partial trailing samples are
/// discarded; unlabeled seconds are retained with `label = None`.
pub fn slice_epochs(record: &SignalRecord) -> Vec<EpochSample> {
    let t = record.sample_rate_hz as usize;
    let n = record.whole_seconds().min(record.labels.len());
    let mut epochs = Vec::with_capacity(n);
    for i in 0..n {
        let span = i * t..(i + 1) * t;
        epochs.push(EpochSample {
            eeg: if record.eeg.is_empty() { Vec::new() } else { record.eeg[span.clone()].to_vec() },
            emg: if record.emg.is_empty() { Vec::new() } else { record.emg[span].to_vec() },
            label: record.labels[i],
            subject_id: record.subject_id.clone(),
            position: i,
        });
    }
    epochs
}

/// Subject identity and position of an epoch; sequence grouping needs
/// nothing else, so it works both before and after patching.
pub trait EpochKey {
    fn run_key(&self) -> (&str, usize);
}

impl EpochKey for EpochSample {
    fn run_key(&self) -> (&str, usize) {
        (&self.subject_id, self.position)
    }
}

impl EpochKey for PatchedEpoch {
    fn run_key(&self) -> (&str, usize) {
        (&self.subject_id, self.position)
    }
}

/// Sliding windows of `k` consecutive same-subject epochs at the given
/// stride. Windows never cross a subject boundary or a gap in positions.
/// Returns indices into `epochs`.
pub fn make_sequences<E: EpochKey>(epochs: &[E], k: usize, stride: usize) -> Vec<SequenceSample> {
    assert!(k >= 1, "sequence length must be at least 1");
    assert!(stride >= 1, "stride must be at least 1");
    let mut out = Vec::new();
    let mut run_start = 0;
    let mut i = 0;
    while i <= epochs.len() {
        let run_ends = i == epochs.len()
            || (i > run_start && {
                let (prev_subject, prev_pos) = epochs[i - 1].run_key();
                let (subject, pos) = epochs[i].run_key();
                subject != prev_subject || pos != prev_pos + 1
            });
        if run_ends {
            let run_len = i - run_start;
            if run_len >= k {
                let mut s = 0;
                while s + k <= run_len {
                    out.push(SequenceSample { start: run_start + s, len: k });
                    s += stride;
                }
            }
            run_start = i;
        }
        i += 1;
    }
    if out.is_empty() && !epochs.is_empty() {
        eprintln!(
            "warning: no sequences of length {} could be formed from {} epochs",
            k,
            epochs.len()
        );
    }
    out
}

/// Cut an epoch into ⌊T/W⌋ non-overlapping width-`width` patches per channel,
/// dropping any trailing remainder.
pub fn patch(epoch: &EpochSample, width: usize) -> Result<PatchedEpoch, SignalError> {
    let t = epoch.eeg.len().max(epoch.emg.len());
    if width == 0 || width > t {
        return Err(SignalError::InvalidPatchWidth { width, t });
    }
    let p = t / width;
    let take = |ch: &[f64]| {
        if ch.is_empty() {
            Vec::new()
        } else {
            ch[..p * width].to_vec()
        }
    };
    Ok(PatchedEpoch {
        eeg: take(&epoch.eeg),
        emg: take(&epoch.emg),
        patches: p,
        width,
        label: epoch.label,
        subject_id: epoch.subject_id.clone(),
        position: epoch.position,
    })
}
