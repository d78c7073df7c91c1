//! Post-densification backward gating.
//!
//! Every post-densification iteration the trainer runs a forward pass on one
//! sampled view and hands the resulting loss to [`Gate::step`]. The gate keeps
//! a per-view exponential moving average of observed losses and proposes a
//! backward pass only when the current loss exceeds that view's baseline
//! (`loss / (ema + eps) > 1`). The first `warmup_len` iterations always run
//! backward while the would-be decisions are tallied; the tally calibrates a
//! minimum backward ratio that is enforced for the rest of training by forcing
//! backward whenever the cumulative executed ratio falls below it.
//!
//! The gate never looks at the renderer or optimizer. It is a pure, sequential
//! state machine over `(view, loss)` observations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ViewId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatingError {
    #[error("invalid gating config: {0}")]
    InvalidConfig(String),
    #[error("loss must be finite and non-negative, got {0}")]
    InvalidLoss(f64),
    #[error("out-of-order step: gate expects iteration {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("backward budget already calibrated")]
    AlreadyCalibrated,
    #[error("ratio must lie in [0, 1], got {0}")]
    InvalidRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingConfig {
    /// Iterations after densification during which backward always runs.
    pub warmup_len: u64,
    pub ema_decay: f64,
    pub eps: f64,
    /// Lower bound on the calibrated minimum backward ratio.
    pub budget_floor: f64,
    /// Turning this off removes only the budget override; warmup and
    /// calibration still run.
    pub budget_enabled: bool,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            warmup_len: 500,
            ema_decay: 0.95,
            eps: 1e-8,
            budget_floor: 0.5,
            budget_enabled: true,
        }
    }
}

impl GatingConfig {
    pub fn validate(&self) -> Result<(), GatingError> {
        if self.warmup_len < 1 {
            return Err(GatingError::InvalidConfig("warmup_len must be >= 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(GatingError::InvalidConfig(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        // eps = 0 is accepted for exact scale-invariance experiments.
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(GatingError::InvalidConfig(format!(
                "eps must be finite and non-negative, got {}",
                self.eps
            )));
        }
        if !(0.0..=1.0).contains(&self.budget_floor) {
            return Err(GatingError::InvalidConfig(format!(
                "budget_floor must lie in [0, 1], got {}",
                self.budget_floor
            )));
        }
        Ok(())
    }
}

/// Per-view loss EMAs. A view has an entry only once it has been observed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewLossTable {
    ema: BTreeMap<ViewId, f64>,
}

impl ViewLossTable {
    pub fn get(&self, view: ViewId) -> Option<f64> {
        self.ema.get(&view).copied()
    }

    pub fn len(&self) -> usize {
        self.ema.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ema.is_empty()
    }

    pub fn set(&mut self, view: ViewId, value: f64) {
        self.ema.insert(view, value);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingState {
    pub table: ViewLossTable,
    /// Post-densification iteration the next call to `step` must carry (1-based).
    pub t: u64,
    /// Executed-backward count so far.
    pub b: u64,
    pub rho_min: Option<f64>,
    pub warmup_eligible: u64,
    pub warmup_would_backward: u64,
    pub calibrated: bool,
}

impl Default for GatingState {
    fn default() -> Self {
        Self {
            table: ViewLossTable::default(),
            t: 1,
            b: 0,
            rho_min: None,
            warmup_eligible: 0,
            warmup_would_backward: 0,
            calibrated: false,
        }
    }
}

impl GatingState {
    /// Fraction of eligible warmup iterations whose skip test asked for a
    /// backward pass. With no eligible iterations this is 1 so the calibrated
    /// budget falls back to full backward.
    pub fn warmup_ratio(&self) -> f64 {
        if self.warmup_eligible == 0 {
            1.0
        } else {
            self.warmup_would_backward as f64 / self.warmup_eligible as f64
        }
    }

    /// Sets `rho_min` from the warmup tally. Valid exactly once.
    pub fn calibrate(&mut self, budget_floor: f64) -> Result<f64, GatingError> {
        if self.calibrated {
            return Err(GatingError::AlreadyCalibrated);
        }
        let rho_min = calibrate_rho_min(self.warmup_ratio(), budget_floor)?;
        self.rho_min = Some(rho_min);
        self.calibrated = true;
        Ok(rho_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// May be `+inf` on a view's first observation.
    pub score: f64,
    pub proposed: bool,
    pub forced_warmup: bool,
    pub forced_budget: bool,
    pub execute_backward: bool,
    pub rho_cum_before: f64,
    pub rho_min: Option<f64>,
}

pub fn update_ema(prev_ema: Option<f64>, loss: f64, decay: f64) -> Result<f64, GatingError> {
    check_loss(loss)?;
    Ok(match prev_ema {
        Some(prev) => decay * prev + (1.0 - decay) * loss,
        None => loss,
    })
}

pub fn deviation_score(loss: f64, prev_ema: Option<f64>, eps: f64) -> Result<f64, GatingError> {
    check_loss(loss)?;
    Ok(match prev_ema {
        Some(prev) => {
            let denom = prev + eps;
            // Only reachable with eps = 0 and a zero history.
            if denom == 0.0 {
                if loss == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                loss / denom
            }
        }
        None => f64::INFINITY,
    })
}

/// `true` means "execute backward". The comparison is strict: a score of
/// exactly 1 proposes a skip.
pub fn skip_test(score: f64) -> bool {
    score > 1.0
}

pub fn cumulative_ratio(b: u64, t: u64) -> f64 {
    b as f64 / t.saturating_sub(1).max(1) as f64
}

pub fn calibrate_rho_min(rho_hat: f64, rho_lo: f64) -> Result<f64, GatingError> {
    for r in [rho_hat, rho_lo] {
        if !(0.0..=1.0).contains(&r) {
            return Err(GatingError::InvalidRatio(r));
        }
    }
    Ok((rho_lo + (1.0 - rho_lo) * rho_hat).clamp(rho_lo, 1.0))
}

fn check_loss(loss: f64) -> Result<(), GatingError> {
    if loss.is_finite() && loss >= 0.0 {
        Ok(())
    } else {
        Err(GatingError::InvalidLoss(loss))
    }
}

/// Config plus state; the unit the trainer owns and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub config: GatingConfig,
    pub state: GatingState,
}

impl Gate {
    pub fn new(config: GatingConfig) -> Result<Self, GatingError> {
        config.validate()?;
        Ok(Self {
            config,
            state: GatingState::default(),
        })
    }

    /// Decide whether post-densification iteration `t` runs backward.
    ///
    /// `t` must equal `self.state.t`. On error the state is left untouched.
    pub fn step(&mut self, t: u64, view: ViewId, loss: f64) -> Result<GateDecision, GatingError> {
        let cfg = &self.config;
        let st = &mut self.state;
        if t != st.t {
            return Err(GatingError::OutOfOrder {
                expected: st.t,
                got: t,
            });
        }
        check_loss(loss)?;

        let prev = st.table.get(view);
        let score = deviation_score(loss, prev, cfg.eps)?;
        let proposed = skip_test(score);
        let rho_cum_before = cumulative_ratio(st.b, t);
        let new_ema = update_ema(prev, loss, cfg.ema_decay)?;

        let mut forced_warmup = false;
        let mut forced_budget = false;
        if t <= cfg.warmup_len {
            if prev.is_some() {
                st.warmup_eligible += 1;
                if proposed {
                    st.warmup_would_backward += 1;
                }
            }
            forced_warmup = true;
        } else {
            if !st.calibrated {
                st.calibrate(cfg.budget_floor)?;
            }
            let rho_min = st.rho_min.unwrap_or(cfg.budget_floor);
            if cfg.budget_enabled && rho_cum_before < rho_min {
                forced_budget = true;
            }
        }
        let execute_backward = proposed || forced_warmup || forced_budget;

        st.table.set(view, new_ema);
        if execute_backward {
            st.b += 1;
        }
        st.t += 1;

        Ok(GateDecision {
            score,
            proposed,
            forced_warmup,
            forced_budget,
            execute_backward,
            rho_cum_before,
            rho_min: st.rho_min,
        })
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}
