//! Synthetic dual-channel recordings for desk-scale verification.
//!
//! Stage labels follow a 3-state Markov chain; each stage imprints a
//! characteristic signature on the channels: Wake pairs a fast low-amplitude
//! EEG oscillation with strong EMG noise, SWS a slow high-amplitude EEG with
//! near-silent EMG, and REM a fast low-amplitude EEG also with near-silent
//! EMG. Generation is deterministic for a fixed (seed, config).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SignalError, SignalRecord, Stage, StageLabel};

/// Per-stage emission parameters. `eeg_amp`/`eeg_noise`/`emg_amp` are
/// amplitudes in arbitrary units (noise values are Gaussian standard
/// deviations); subject-wise normalization later removes the absolute scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSignature {
    pub eeg_freq_hz: f64,
    pub eeg_amp: f64,
    pub eeg_noise: f64,
    pub emg_amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    /// Row-stochastic transition matrix, rows/columns ordered Wake, SWS, REM.
    pub transition: [[f64; 3]; 3],
    pub initial_stage: Stage,
    /// Signatures indexed by `Stage::index()`.
    pub signatures: [StageSignature; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            // Desk-scale rate: fast enough for distinct stage oscillations,
            // small enough to keep training cheap.
            sample_rate_hz: 32,
            transition: [
                [0.90, 0.08, 0.02],
                [0.07, 0.88, 0.05],
                [0.15, 0.05, 0.80],
            ],
            initial_stage: Stage::Wake,
            signatures: [
                // Wake: high-frequency low-amplitude EEG, high muscle tonus.
                StageSignature { eeg_freq_hz: 10.0, eeg_amp: 0.6, eeg_noise: 0.15, emg_amp: 1.2 },
                // SWS: low-frequency high-amplitude EEG, no muscle tonus.
                StageSignature { eeg_freq_hz: 1.5, eeg_amp: 1.8, eeg_noise: 0.15, emg_amp: 0.05 },
                // REM: high-frequency low-amplitude EEG, no muscle tonus.
                StageSignature { eeg_freq_hz: 7.0, eeg_amp: 0.7, eeg_noise: 0.15, emg_amp: 0.05 },
            ],
        }
    }
}

/// Generate `n_subjects` records of `seconds_per_subject` labeled seconds
/// each. Subjects are named `s00`, `s01`, ... in order.
pub fn synth_generate(
    n_subjects: usize,
    seconds_per_subject: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<Vec<SignalRecord>, SignalError> {
    validate_transition(&config.transition)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let subject_seed = master.random::<u64>();
        records.push(generate_subject(format!("s{:02}", i), subject_seed, seconds_per_subject, config));
    }
    Ok(records)
}

fn validate_transition(t: &[[f64; 3]; 3]) -> Result<(), SignalError> {
    for (row, stage) in Stage::ALL.iter().enumerate() {
        for &v in &t[row] {
            if v < 0.0 {
                return Err(SignalError::NegativeTransition { row, value: v });
            }
        }
        let sum: f64 = t[row].iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SignalError::BadTransitionRow { row, stage: *stage, sum });
        }
    }
    Ok(())
}

fn generate_subject(
    subject_id: String,
    seed: u64,
    seconds: usize,
    config: &SynthConfig,
) -> SignalRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = config.sample_rate_hz as usize;

    // Stage trajectory: the label of second i is the state *before* the
    // i-th transition, so an identity matrix pins every label to the
    // initial stage.
    let mut labels: Vec<StageLabel> = Vec::with_capacity(seconds);
    let mut state = config.initial_stage;
    for _ in 0..seconds {
        labels.push(Some(state));
        let u: f64 = rng.random();
        let row = &config.transition[state.index()];
        let mut cum = 0.0;
        let mut next = state;
        for (j, &p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                next = Stage::ALL[j];
                break;
            }
        }
        state = next;
    }

    let phase: f64 = rng.random::<f64>() * TAU;
    let mut eeg = Vec::with_capacity(seconds * rate);
    let mut emg = Vec::with_capacity(seconds * rate);
    for (i, label) in labels.iter().enumerate() {
        let sig = &config.signatures[label.unwrap().index()];
        let eeg_noise = Normal::new(0.0, sig.eeg_noise).expect("valid noise std");
        let emg_noise = Normal::new(0.0, sig.emg_amp).expect("valid emg std");
        for s in 0..rate {
            let t = (i * rate + s) as f64 / rate as f64;
            eeg.push(sig.eeg_amp * (TAU * sig.eeg_freq_hz * t + phase).sin() + eeg_noise.sample(&mut rng));
            emg.push(emg_noise.sample(&mut rng));
        }
    }

    SignalRecord { subject_id, sample_rate_hz: config.sample_rate_hz, eeg, emg, labels }
}
