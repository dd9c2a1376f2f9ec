//! Control strategies.
//!
//! A strategy is queried once per integration step, at the left endpoint of
//! the step, and the returned control is held for the whole step. Closures
//! must be pure so trajectories can run concurrently and reproducibly.

use std::fmt;
use std::sync::Arc;

use crate::matcore::DensityMatrix;
use crate::rng::mix64;

pub type OpenLoopFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `(t, observation increments so far) ↦ u`.
pub type PathFeedbackFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, filter state) ↦ u`.
pub type SeparatedFn = Arc<dyn Fn(f64, &DensityMatrix) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum StrategyKind {
    OpenLoop(OpenLoopFn),
    PathFeedback(PathFeedbackFn),
    Separated(SeparatedFn),
}

#[derive(Clone)]
pub struct ControlStrategy {
    pub name: String,
    pub kind: StrategyKind,
}

impl fmt::Debug for ControlStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            StrategyKind::OpenLoop(_) => "open-loop",
            StrategyKind::PathFeedback(_) => "path-feedback",
            StrategyKind::Separated(_) => "separated",
        };
        write!(f, "ControlStrategy({}, {kind})", self.name)
    }
}

impl ControlStrategy {
    pub fn open_loop(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind: StrategyKind::OpenLoop(Arc::new(f)),
        }
    }

    pub fn path_feedback(
        name: impl Into<String>,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind: StrategyKind::PathFeedback(Arc::new(f)),
        }
    }

    pub fn separated(
        name: impl Into<String>,
        f: impl Fn(f64, &DensityMatrix) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind: StrategyKind::Separated(Arc::new(f)),
        }
    }

    pub fn constant(u: f64) -> Self {
        Self::open_loop(format!("const({u})"), move |_| u)
    }

    /// `u_high` when the last `window` observation increments sum to a
    /// positive number, `u_low` otherwise.
    pub fn bang_bang(window: usize, u_low: f64, u_high: f64) -> Self {
        let window = window.max(1);
        Self::path_feedback(format!("bang_bang({window})"), move |_, dy| {
            let start = dy.len().saturating_sub(window);
            if dy[start..].iter().sum::<f64>() > 0.0 {
                u_high
            } else {
                u_low
            }
        })
    }

    /// Picks a grid value pseudo-randomly from a hash of `salt`, the step index
    /// and the latest observation increment. The choice is a deterministic
    /// function of the observed path, so the strategy stays admissible.
    pub fn randomized(grid: Vec<f64>, salt: u64) -> Self {
        assert!(!grid.is_empty(), "randomized strategy needs a control grid");
        Self::path_feedback(format!("randomized({salt})"), move |_, dy| {
            let last = dy.last().map_or(0, |v| v.to_bits());
            let h = mix64(mix64(salt ^ dy.len() as u64) ^ last);
            grid[(h % grid.len() as u64) as usize]
        })
    }

    pub fn is_separated(&self) -> bool {
        matches!(self.kind, StrategyKind::Separated(_))
    }

    /// Control for the step starting at `t`, given the increments observed on
    /// earlier steps and the current filter state.
    #[inline]
    pub fn control(&self, t: f64, dy: &[f64], rho: &DensityMatrix) -> f64 {
        match &self.kind {
            StrategyKind::OpenLoop(f) => f(t),
            StrategyKind::PathFeedback(f) => f(t, dy),
            StrategyKind::Separated(f) => f(t, rho),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}
