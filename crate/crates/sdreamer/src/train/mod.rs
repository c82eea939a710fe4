//! Training: losses, optimizer, metrics, and the fitting loop.
//!
//! The mix pathway is the only one with direct label supervision; the mono
//! pathways learn through self-distillation, pulling their temperature-
//! softened class distributions toward the mix pathway's (detached)
//! predictions. The total objective blends the two signal kinds with a
//! single weight: `(1 - alpha) * ce + (alpha / 2) * (sd_eeg + sd_emg)`.

mod fit;
mod metrics;
mod optim;

pub use fit::{fit, FinalReports, TrainData, TrainOptions, TrainOutcome};
pub use metrics::{
    confusion_from_pairs, evaluate_epochs, evaluate_sequences, format_report,
    report_from_confusion, ClassMetrics, EvalReport,
};
pub use optim::{adamw_step, clear_grads, OptimConfig, OptimState};

use thiserror::Error;

use crate::model::checkpoint::CheckpointError;
use crate::model::ModelError;
use crate::signal::StageLabel;
use crate::tensor::{Tape, Var};

/// Self-distillation hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Softmax temperature for the EEG student/teacher pair.
    pub tau_eeg: f64,
    /// Softmax temperature for the EMG student/teacher pair.
    pub tau_emg: f64,
    /// Blend weight between cross-entropy and distillation.
    pub alpha: f64,
    /// Treat the teacher (mix) logits as constants inside the sd terms.
    pub detach_teacher: bool,
    /// Multiply each sd term by its temperature squared.
    pub scale_by_tau_sq: bool,
    /// Reverse the KL argument order (teacher distribution first).
    pub kl_teacher_first: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_eeg: 1.0,
            tau_emg: 3.0,
            alpha: 0.33,
            detach_teacher: true,
            scale_by_tau_sq: false,
            kl_teacher_first: false,
        }
    }
}

/// Scalar components of one training step's objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sd_eeg: f64,
    pub sd_emg: f64,
    pub total: f64,
    pub n_labeled: usize,
}

impl LossBreakdown {
    pub fn new(ce: f64, sd_eeg: f64, sd_emg: f64, alpha: f64, n_labeled: usize) -> Self {
        let total = (1.0 - alpha) * ce + (alpha / 2.0) * (sd_eeg + sd_emg);
        LossBreakdown { ce, sd_eeg, sd_emg, total, n_labeled }
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite()
            && self.sd_eeg.is_finite()
            && self.sd_emg.is_finite()
            && self.total.is_finite()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no labeled samples")]
    NoLabeledSamples,
    #[error("non-finite loss at step {step}: ce {ce}, sd_eeg {sd_eeg}, sd_emg {sd_emg}")]
    NonFiniteLoss { step: u64, ce: f64, sd_eeg: f64, sd_emg: f64 },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("empty {which} split")]
    EmptySplit { which: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("log write failed: {0}")]
    LogWrite(#[from] std::io::Error),
}

/// Temperature softmax of one logit row, max-subtracted for stability.
pub fn softmax_tau(z: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "softmax temperature must be positive, got {tau}");
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let exps: Vec<f64> = z.iter().map(|&v| (v / tau - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// 0/1 mask column `[N, 1]` from per-sample labeled flags.
fn mask_column(tape: &mut Tape, labeled: &[bool]) -> Var {
    let data: Vec<f64> = labeled.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    tape.constant(&[labeled.len(), 1], data)
}

/// Mean over labeled samples of the temperature-softened KL divergence
/// between student and teacher logits (`[N, C]` each). Returns a scalar
/// tape variable; an all-masked batch contributes zero (with a warning).
pub fn sd_loss(
    tape: &mut Tape,
    student: Var,
    teacher: Var,
    tau: f64,
    labeled: &[bool],
    cfg: &DistillConfig,
) -> Var {
    assert!(tau > 0.0, "distillation temperature must be positive, got {tau}");
    let n = labeled.iter().filter(|&&l| l).count();
    if n == 0 {
        eprintln!("warning: distillation batch has no labeled samples; sd term is 0");
        return tape.constant(&[1], vec![0.0]);
    }

    let teacher = if cfg.detach_teacher { tape.detach(teacher) } else { teacher };
    let s = tape.scale(student, 1.0 / tau);
    let t = tape.scale(teacher, 1.0 / tau);
    let ls = tape.log_softmax(s, 1);
    let lt = tape.log_softmax(t, 1);

    // KL(p ‖ q) = sum p * (log p - log q), p owned by the first argument.
    let (p, diff) = if cfg.kl_teacher_first {
        let p = tape.softmax(t, 1);
        let d = tape.sub(lt, ls);
        (p, d)
    } else {
        let p = tape.softmax(s, 1);
        let d = tape.sub(ls, lt);
        (p, d)
    };
    let per = tape.mul(p, diff);
    let mask = mask_column(tape, labeled);
    let masked = tape.mul(per, mask);
    let total = tape.sum_all(masked);
    let mean = tape.scale(total, 1.0 / n as f64);
    if cfg.scale_by_tau_sq {
        tape.scale(mean, tau * tau)
    } else {
        mean
    }
}

/// Mean negative log-likelihood of the labels under `logits` (`[N, C]`),
/// averaged over labeled samples only.
pub fn ce_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[StageLabel],
) -> Result<Var, TrainError> {
    let shape = tape.shape_of(logits).to_vec();
    assert_eq!(shape.len(), 2, "ce_loss expects [samples, classes]");
    let classes = shape[1];
    assert_eq!(shape[0], labels.len(), "one label per logit row");

    let n = labels.iter().filter(|l| l.is_some()).count();
    if n == 0 {
        return Err(TrainError::NoLabeledSamples);
    }
    let mut onehot = vec![0.0; labels.len() * classes];
    for (i, label) in labels.iter().enumerate() {
        if let Some(stage) = label {
            onehot[i * classes + stage.index()] = 1.0;
        }
    }
    let logp = tape.log_softmax(logits, 1);
    let oh = tape.constant(&[labels.len(), classes], onehot);
    let picked = tape.mul(oh, logp);
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Blend the objective terms on the tape:
/// `(1 - alpha) * ce + (alpha / 2) * (sd_eeg + sd_emg)`.
pub fn combine_losses(tape: &mut Tape, ce: Var, sd_eeg: Var, sd_emg: Var, alpha: f64) -> Var {
    let ce_term = tape.scale(ce, 1.0 - alpha);
    let sd_sum = tape.add(sd_eeg, sd_emg);
    let sd_term = tape.scale(sd_sum, alpha / 2.0);
    tape.add(ce_term, sd_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Stage;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_tau_is_symmetric_and_stable() {
        assert_eq!(softmax_tau(&[0.0, 0.0, 0.0], 1.0), vec![1.0 / 3.0; 3]);
        assert_eq!(softmax_tau(&[0.0, 0.0, 0.0], 17.0), vec![1.0 / 3.0; 3]);
        let p = softmax_tau(&[1000.0, 0.0], 1.0);
        assert_eq!(p, vec![1.0, 0.0]);
        let flat = softmax_tau(&[2.0, 0.0, 0.0], 1000.0);
        for v in flat {
            assert!((v - 1.0 / 3.0).abs() < 1e-3);
        }
        let p = softmax_tau(&[2.0f64.ln(), 0.0], 1.0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "temperature must be positive")]
    fn softmax_tau_rejects_nonpositive_tau() {
        let _ = softmax_tau(&[0.0], 0.0);
    }

    #[test]
    fn sd_loss_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let z = tape.variable(&[2, 3], vec![0.3, -0.4, 1.0, 0.0, 0.2, -0.9]);
        let cfg = DistillConfig::default();
        let sd = sd_loss(&mut tape, z, z, 2.0, &[true, true], &cfg);
        assert_eq!(tape.value(sd), &[0.0]);
    }

    #[test]
    fn sd_loss_matches_hand_computed_kl() {
        // student [ln 2, 0], teacher [0, 0], tau 1:
        // p_s = [2/3, 1/3], p_t = [1/2, 1/2]
        // KL = (2/3) ln(4/3) + (1/3) ln(2/3)
        let mut tape = Tape::new();
        let s = tape.constant(&[1, 2], vec![2.0f64.ln(), 0.0]);
        let t = tape.constant(&[1, 2], vec![0.0, 0.0]);
        let cfg = DistillConfig::default();
        let sd = sd_loss(&mut tape, s, t, 1.0, &[true], &cfg);
        let expect = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((tape.value(sd)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sd_loss_is_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = DistillConfig::default();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let s = tape.constant(&[2, 3], a);
            let t = tape.constant(&[2, 3], b);
            let tau = rng.random_range(0.5..4.0);
            let sd = sd_loss(&mut tape, s, t, tau, &[true, true], &cfg);
            assert!(tape.value(sd)[0] >= -1e-15);
        }
    }

    #[test]
    fn sd_loss_masks_unlabeled_samples() {
        let cfg = DistillConfig::default();
        let rows = [0.4, -0.2, 0.9, 3.0, -1.0, 0.0];
        let mut tape = Tape::new();
        let s = tape.constant(&[2, 3], rows.to_vec());
        let t = tape.constant(&[2, 3], vec![0.0; 6]);
        let masked = sd_loss(&mut tape, s, t, 1.5, &[true, false], &cfg);
        let masked_val = tape.value(masked)[0];

        let mut tape2 = Tape::new();
        let s1 = tape2.constant(&[1, 3], rows[..3].to_vec());
        let t1 = tape2.constant(&[1, 3], vec![0.0; 3]);
        let single = sd_loss(&mut tape2, s1, t1, 1.5, &[true], &cfg);
        assert!((masked_val - tape2.value(single)[0]).abs() < 1e-15);
    }

    #[test]
    fn sd_loss_all_masked_is_zero() {
        let cfg = DistillConfig::default();
        let mut tape = Tape::new();
        let s = tape.variable(&[1, 3], vec![1.0, 2.0, 3.0]);
        let t = tape.variable(&[1, 3], vec![0.0, 1.0, 0.5]);
        let sd = sd_loss(&mut tape, s, t, 1.0, &[false], &cfg);
        assert_eq!(tape.value(sd), &[0.0]);
    }

    #[test]
    fn detached_teacher_gets_no_gradient_from_sd() {
        let cfg = DistillConfig::default();
        let mut tape = Tape::new();
        let s = tape.variable(&[1, 3], vec![0.5, -0.5, 0.0]);
        let t = tape.variable(&[1, 3], vec![1.0, 0.0, -1.0]);
        let sd = sd_loss(&mut tape, s, t, 1.0, &[true], &cfg);
        tape.backward(sd);
        assert!(tape.grad(s).is_some());
        assert!(tape.grad(t).is_none());
    }

    #[test]
    fn attached_teacher_gets_gradient_when_not_detached() {
        let cfg = DistillConfig { detach_teacher: false, ..DistillConfig::default() };
        let mut tape = Tape::new();
        let s = tape.variable(&[1, 3], vec![0.5, -0.5, 0.0]);
        let t = tape.variable(&[1, 3], vec![1.0, 0.0, -1.0]);
        let sd = sd_loss(&mut tape, s, t, 1.0, &[true], &cfg);
        tape.backward(sd);
        assert!(tape.grad(t).is_some());
    }

    #[test]
    fn tau_sq_scaling_multiplies_the_loss() {
        let base = DistillConfig::default();
        let scaled = DistillConfig { scale_by_tau_sq: true, ..base.clone() };
        let tau = 3.0;
        let mk = |cfg: &DistillConfig| {
            let mut tape = Tape::new();
            let s = tape.constant(&[1, 3], vec![1.0, 0.0, -1.0]);
            let t = tape.constant(&[1, 3], vec![0.0, 0.5, 0.0]);
            let sd = sd_loss(&mut tape, s, t, tau, &[true], cfg);
            tape.value(sd)[0]
        };
        assert!((mk(&scaled) - tau * tau * mk(&base)).abs() < 1e-15);
    }

    #[test]
    fn teacher_first_swaps_the_divergence_direction() {
        let fwd = DistillConfig::default();
        let rev = DistillConfig { kl_teacher_first: true, ..fwd.clone() };
        let s_data = vec![2.0, 0.0, -1.0];
        let t_data = vec![0.0, 0.0, 0.0];
        let mk = |cfg: &DistillConfig, a: &[f64], b: &[f64]| {
            let mut tape = Tape::new();
            let s = tape.constant(&[1, 3], a.to_vec());
            let t = tape.constant(&[1, 3], b.to_vec());
            let sd = sd_loss(&mut tape, s, t, 1.0, &[true], cfg);
            tape.value(sd)[0]
        };
        // KL(student ‖ teacher) with swapped args equals the teacher-first
        // form on the original args (teacher is detached either way, so
        // only the value matters here).
        let a = mk(&fwd, &t_data, &s_data);
        let b = mk(&rev, &s_data, &t_data);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_matches_closed_forms() {
        let mut tape = Tape::new();
        let confident = tape.constant(&[1, 3], vec![1e9, 0.0, 0.0]);
        let ce = ce_loss(&mut tape, confident, &[Some(Stage::Wake)]).unwrap();
        assert!(tape.value(ce)[0].abs() < 1e-12);

        let mut tape = Tape::new();
        let uniform = tape.constant(&[1, 3], vec![0.7, 0.7, 0.7]);
        let ce = ce_loss(&mut tape, uniform, &[Some(Stage::Rem)]).unwrap();
        assert!((tape.value(ce)[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_ignores_masked_samples() {
        let rows = vec![0.2, -0.3, 0.8, 5.0, 1.0, -2.0];
        let mut tape = Tape::new();
        let z = tape.constant(&[2, 3], rows.clone());
        let ce = ce_loss(&mut tape, z, &[Some(Stage::Sws), None]).unwrap();
        let both = tape.value(ce)[0];

        let mut tape2 = Tape::new();
        let z1 = tape2.constant(&[1, 3], rows[..3].to_vec());
        let ce1 = ce_loss(&mut tape2, z1, &[Some(Stage::Sws)]).unwrap();
        assert!((both - tape2.value(ce1)[0]).abs() < 1e-15);
    }

    #[test]
    fn ce_loss_requires_a_label() {
        let mut tape = Tape::new();
        let z = tape.constant(&[1, 3], vec![0.0; 3]);
        assert!(matches!(ce_loss(&mut tape, z, &[None]), Err(TrainError::NoLabeledSamples)));
    }

    #[test]
    fn breakdown_identity_and_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let ce = rng.random_range(0.0..5.0);
            let se = rng.random_range(0.0..5.0);
            let sm = rng.random_range(0.0..5.0);
            let alpha = rng.random_range(0.0..=1.0);
            let bd = LossBreakdown::new(ce, se, sm, alpha, 4);
            let expect = (1.0 - alpha) * ce + (alpha / 2.0) * (se + sm);
            assert!((bd.total - expect).abs() < 1e-12);
        }
        let at0 = LossBreakdown::new(1.25, 9.0, 3.0, 0.0, 1);
        assert_eq!(at0.total, 1.25);
        let at1 = LossBreakdown::new(7.0, 0.2, 0.4, 1.0, 1);
        assert_eq!(at1.total, (0.2 + 0.4) / 2.0);
    }

    #[test]
    fn tape_combination_matches_breakdown() {
        let mut tape = Tape::new();
        let ce = tape.constant(&[1], vec![1.0]);
        let se = tape.constant(&[1], vec![0.2]);
        let sm = tape.constant(&[1], vec![0.4]);
        let total = combine_losses(&mut tape, ce, se, sm, 0.33);
        let bd = LossBreakdown::new(1.0, 0.2, 0.4, 0.33, 1);
        assert!((tape.value(total)[0] - bd.total).abs() < 1e-15);
        assert!((bd.total - 0.769).abs() < 1e-12);
    }
}
