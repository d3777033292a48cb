//! Training objectives. Every loss is recorded on the tape so it can be
//! differentiated; SAT arguments are `[t, c, b]` vars.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Norm, Tape, Var};
use crate::error::{Error, Result};
use crate::snn::Sat;

/// Mean negative log-likelihood of the true classes.
pub fn nll_loss(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(log_probs, labels)
}

/// Norm of the whole SAT difference, divided by the batch size.
pub fn full_lm_loss(tape: &mut Tape, sat_t: Var, sat_s: Var, norm: Norm) -> Result<Var> {
    tape.full_distance(sat_t, sat_s, norm)
}

/// `KL(softmax(student) ‖ softmax(teacher))` over classes, averaged over
/// timesteps and batch elements.
pub fn kl_loss(tape: &mut Tape, sat_s: Var, sat_t: Var) -> Result<Var> {
    tape.kl_divergence(sat_s, sat_t)
}

/// Windowed SAT distance over every class/item time series.
pub fn sliding_lm_loss(
    tape: &mut Tape,
    sat_t: Var,
    sat_s: Var,
    delta: usize,
    norm: Norm,
    stride: usize,
) -> Result<Var> {
    tape.sliding_distance(sat_t, sat_s, norm, delta, stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    StudentTeacher,
    /// `KL(teacher ‖ student)`, the usual distillation direction.
    TeacherStudent,
}

/// Weights and window settings of the combined distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLossConfig {
    /// Weight of the sliding-window term.
    pub alpha: f64,
    /// Weight of the full L2 term.
    pub beta: f64,
    /// Weight of the KL term.
    pub gamma: f64,
    /// Window length Δ.
    pub delta: usize,
    /// Norm of the sliding-window term.
    pub m_sliding: Norm,
    pub stride: usize,
    pub kl_direction: KlDirection,
}

impl DistillLossConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: usize) -> Self {
        DistillLossConfig {
            alpha,
            beta,
            gamma,
            delta,
            m_sliding: Norm::L1,
            stride: 1,
            kl_direction: KlDirection::StudentTeacher,
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be positive (alpha={}, beta={}, gamma={})",
                self.alpha, self.beta, self.gamma
            )));
        }
        let total = self.alpha + self.beta + self.gamma;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights must sum to 1, got {total}")));
        }
        if self.delta == 0 || self.delta > timesteps {
            return Err(Error::Config(format!(
                "window length {} must lie in 1..={timesteps}",
                self.delta
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("window stride must be positive".into()));
        }
        Ok(())
    }
}

/// `α·sliding + β·full L2 + γ·KL`.
pub fn combined_loss(tape: &mut Tape, sat_t: Var, sat_s: Var, cfg: &DistillLossConfig) -> Result<Var> {
    let steps = tape.shape(sat_s).first().copied().unwrap_or(0);
    cfg.validate(steps)?;
    let sliding = sliding_lm_loss(tape, sat_t, sat_s, cfg.delta, cfg.m_sliding, cfg.stride)?;
    let full = full_lm_loss(tape, sat_t, sat_s, Norm::L2)?;
    let kl = match cfg.kl_direction {
        KlDirection::StudentTeacher => kl_loss(tape, sat_s, sat_t)?,
        KlDirection::TeacherStudent => kl_loss(tape, sat_t, sat_s)?,
    };
    let a = tape.scale(sliding, cfg.alpha);
    let b = tape.scale(full, cfg.beta);
    let g = tape.scale(kl, cfg.gamma);
    let ab = tape.add(a, b)?;
    tape.add(ab, g)
}

/// What a distillation run minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Combined(DistillLossConfig),
    Full(Norm),
    Kl(KlDirection),
    Sliding { delta: usize, norm: Norm, stride: usize },
}

impl Objective {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        match self {
            Objective::Combined(cfg) => cfg.validate(timesteps),
            Objective::Sliding { delta, stride, .. } => {
                if *delta == 0 || *delta > timesteps {
                    return Err(Error::Config(format!(
                        "window length {delta} must lie in 1..={timesteps}"
                    )));
                }
                if *stride == 0 {
                    return Err(Error::Config("window stride must be positive".into()));
                }
                Ok(())
            }
            Objective::Full(_) | Objective::Kl(_) => Ok(()),
        }
    }

    pub fn loss(&self, tape: &mut Tape, sat_t: Var, sat_s: Var) -> Result<Var> {
        match *self {
            Objective::Combined(ref cfg) => combined_loss(tape, sat_t, sat_s, cfg),
            Objective::Full(norm) => full_lm_loss(tape, sat_t, sat_s, norm),
            Objective::Kl(KlDirection::StudentTeacher) => kl_loss(tape, sat_s, sat_t),
            Objective::Kl(KlDirection::TeacherStudent) => kl_loss(tape, sat_t, sat_s),
            Objective::Sliding { delta, norm, stride } => sliding_lm_loss(tape, sat_t, sat_s, delta, norm, stride),
        }
    }

    /// Loss value between two fixed SATs.
    pub fn value(&self, teacher: &Sat, student: &Sat) -> Result<f64> {
        let mut tape = Tape::new();
        let t = teacher.constant(&mut tape);
        let s = student.constant(&mut tape);
        let l = self.loss(&mut tape, t, s)?;
        Ok(tape.value(l)[0])
    }
}
