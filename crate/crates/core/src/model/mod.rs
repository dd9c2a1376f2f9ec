//! Controlled coefficient maps, admissible controls and costs.
//!
//! A control is a real scalar `u`. For each `u` the map yields the output
//! noise coefficients `(Ξ, Υ)`, the scattering matrix `S`, the coupling `L`
//! and the Hamiltonian `H`.

mod config;
mod strategy;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{pauli, ComplexMatrix, DensityMatrix, C64, ONE, ZERO};

pub use config::{
    emit_config, load_config, load_config_value, matrix_to_spec, BellmanConfig, BellmanSection,
    ConfigDocument, ControlGridSpec, CostSection, CustomSection, LoadedConfig, MatrixEntry,
    MatrixSpec, ModelSection, RunConfig, RunSection, StateSpec,
};
pub use strategy::{ControlStrategy, StrategyKind};

/// Number of control values sampled by [`validate`].
pub const VALIDATION_SAMPLES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    /// Quadrature (homodyne) observation, `Ξ = 0`.
    Diffusive,
    /// Photon counting, `Ξ` invertible.
    Counting,
}

impl fmt::Display for ObservationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Diffusive => "diffusive",
            Self::Counting => "counting",
        })
    }
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type ComplexFn = Arc<dyn Fn(f64) -> C64 + Send + Sync>;
type MatrixFn = Arc<dyn Fn(f64) -> ComplexMatrix + Send + Sync>;

/// Coefficients at one control value.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub xi: f64,
    pub upsilon: C64,
    pub s: ComplexMatrix,
    pub l: ComplexMatrix,
    pub h: ComplexMatrix,
}

/// Pure maps `u ↦ (Ξ, Υ, S, L, H)`.
#[derive(Clone)]
pub struct CoefficientMap {
    xi: RealFn,
    upsilon: ComplexFn,
    s: MatrixFn,
    l: MatrixFn,
    h: MatrixFn,
}

impl fmt::Debug for CoefficientMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientMap")
            .field("at(0)", &self.at(0.0))
            .finish()
    }
}

impl CoefficientMap {
    pub fn new(
        xi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        upsilon: impl Fn(f64) -> C64 + Send + Sync + 'static,
        s: impl Fn(f64) -> ComplexMatrix + Send + Sync + 'static,
        l: impl Fn(f64) -> ComplexMatrix + Send + Sync + 'static,
        h: impl Fn(f64) -> ComplexMatrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            xi: Arc::new(xi),
            upsilon: Arc::new(upsilon),
            s: Arc::new(s),
            l: Arc::new(l),
            h: Arc::new(h),
        }
    }

    /// `L(u) = L₀ + u·L₁`, `H(u) = H₀ + u·H₁`, constant `Ξ`, `Υ`, and `S = I`.
    pub fn affine(
        l0: ComplexMatrix,
        l1: ComplexMatrix,
        h0: ComplexMatrix,
        h1: ComplexMatrix,
        xi: f64,
        upsilon: C64,
    ) -> Self {
        let dim = l0.dim();
        Self::new(
            move |_| xi,
            move |_| upsilon,
            move |_| ComplexMatrix::identity(dim),
            move |u| &l0 + &l1.scale_re(u),
            move |u| &h0 + &h1.scale_re(u),
        )
    }

    pub fn xi(&self, u: f64) -> f64 {
        (self.xi)(u)
    }

    pub fn upsilon(&self, u: f64) -> C64 {
        (self.upsilon)(u)
    }

    pub fn s(&self, u: f64) -> ComplexMatrix {
        (self.s)(u)
    }

    pub fn l(&self, u: f64) -> ComplexMatrix {
        (self.l)(u)
    }

    pub fn h(&self, u: f64) -> ComplexMatrix {
        (self.h)(u)
    }

    pub fn at(&self, u: f64) -> Coefficients {
        Coefficients {
            xi: self.xi(u),
            upsilon: self.upsilon(u),
            s: self.s(u),
            l: self.l(u),
            h: self.h(u),
        }
    }

    pub fn with_upsilon(mut self, f: impl Fn(f64) -> C64 + Send + Sync + 'static) -> Self {
        self.upsilon = Arc::new(f);
        self
    }

    pub fn with_xi(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.xi = Arc::new(f);
        self
    }

    pub fn with_s(mut self, f: impl Fn(f64) -> ComplexMatrix + Send + Sync + 'static) -> Self {
        self.s = Arc::new(f);
        self
    }
}

/// Admissible control values, time independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleRange {
    pub u_min: f64,
    pub u_max: f64,
    /// Strictly increasing values searched by the dynamic program.
    pub grid: Vec<f64>,
}

impl AdmissibleRange {
    /// Slack used when checking that a control lies in `[u_min, u_max]`.
    pub const SLACK: f64 = 1e-12;

    pub fn new(u_min: f64, u_max: f64, grid: Vec<f64>) -> Result<Self> {
        let r = Self { u_min, u_max, grid };
        let v = r.violations();
        if v.is_empty() {
            Ok(r)
        } else {
            Err(Error::Validation(v))
        }
    }

    /// `levels` equally spaced values from `u_min` to `u_max`.
    pub fn uniform(u_min: f64, u_max: f64, levels: usize) -> Result<Self> {
        let grid = match levels {
            0 => Vec::new(),
            1 => vec![0.5 * (u_min + u_max)],
            n => (0..n)
                .map(|i| {
                    let v = u_min + (u_max - u_min) * i as f64 / (n - 1) as f64;
                    // Keep the centre exactly zero for symmetric ranges.
                    if v.abs() < 1e-14 * (u_max - u_min) {
                        0.0
                    } else {
                        v
                    }
                })
                .collect(),
        };
        Self::new(u_min, u_max, grid)
    }

    pub fn single(u: f64) -> Self {
        Self {
            u_min: u,
            u_max: u,
            grid: vec![u],
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        u.is_finite() && u >= self.u_min - Self::SLACK && u <= self.u_max + Self::SLACK
    }

    pub fn check(&self, u: f64) -> Result<f64> {
        if self.contains(u) {
            Ok(u)
        } else {
            Err(Error::ControlOutOfRange {
                u,
                min: self.u_min,
                max: self.u_max,
            })
        }
    }

    /// Grid index nearest to `u`; ties go to the lower index.
    pub fn nearest_index(&self, u: f64) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (i, &g) in self.grid.iter().enumerate() {
            let d = (g - u).abs();
            if d < dist {
                dist = d;
                best = i;
            }
        }
        best
    }

    /// `VALIDATION_SAMPLES` points spanning the range, together with the grid.
    pub fn samples(&self) -> Vec<f64> {
        let n = VALIDATION_SAMPLES;
        let mut out: Vec<f64> = (0..n)
            .map(|i| self.u_min + (self.u_max - self.u_min) * i as f64 / (n - 1) as f64)
            .collect();
        out.extend_from_slice(&self.grid);
        out
    }

    fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut bad = |detail: String| {
            v.push(Violation {
                kind: ViolationKind::InvalidRange,
                u: None,
                detail,
            })
        };
        if !(self.u_min.is_finite() && self.u_max.is_finite()) || self.u_min > self.u_max {
            bad(format!(
                "bounds [{}, {}] are not an interval",
                self.u_min, self.u_max
            ));
        }
        if self.grid.is_empty() {
            bad("control grid is empty".into());
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            bad("control grid is not strictly increasing".into());
        }
        if let Some(g) = self.grid.iter().find(|&&g| !self.contains(g)) {
            bad(format!(
                "grid value {g} outside [{}, {}]",
                self.u_min, self.u_max
            ));
        }
        v
    }
}

/// Running cost `C(u) = C₀ + r·u²·I` and terminal cost `C_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub running_base: ComplexMatrix,
    pub control_penalty: f64,
    pub terminal: ComplexMatrix,
}

impl CostSpec {
    pub fn new(running_base: ComplexMatrix, control_penalty: f64, terminal: ComplexMatrix) -> Self {
        Self {
            running_base,
            control_penalty,
            terminal,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(ComplexMatrix::zeros(dim), 0.0, ComplexMatrix::zeros(dim))
    }

    pub fn running(&self, u: f64) -> ComplexMatrix {
        let mut c = self.running_base.clone();
        let r = self.control_penalty * u * u;
        for i in 0..c.dim() {
            c[(i, i)] += r;
        }
        c
    }

    /// `Tr[ρ C(u)]`.
    pub fn running_rate(&self, rho: &ComplexMatrix, u: f64) -> f64 {
        trace_product(rho, &self.running_base) + self.control_penalty * u * u * rho.trace().re
    }

    /// `Tr[ρ C_T]`.
    pub fn terminal_value(&self, rho: &ComplexMatrix) -> f64 {
        trace_product(rho, &self.terminal)
    }

    /// `a·C(u)`, `a·C_T`.
    pub fn scaled(&self, a: f64) -> Self {
        Self::new(
            self.running_base.scale_re(a),
            self.control_penalty * a,
            self.terminal.scale_re(a),
        )
    }

    /// Positivity of `C(u)` on `range` samples and of `C_T`.
    pub fn violations(&self, range: &AdmissibleRange) -> Vec<Violation> {
        let mut v = Vec::new();
        let tol = 1e-10;
        if !self.control_penalty.is_finite() || self.control_penalty < 0.0 {
            v.push(Violation::new(
                ViolationKind::CostNotPositive,
                None,
                format!("control penalty {} is negative", self.control_penalty),
            ));
        }
        for u in range.samples() {
            let c = self.running(u);
            if !c.is_hermitian(tol) || !c.is_positive_semidefinite(tol) {
                v.push(Violation::new(
                    ViolationKind::CostNotPositive,
                    Some(u),
                    "running cost is not positive semidefinite".into(),
                ));
                break;
            }
        }
        if !self.terminal.is_hermitian(tol) || !self.terminal.is_positive_semidefinite(tol) {
            v.push(Violation::new(
                ViolationKind::CostNotPositive,
                None,
                "terminal cost is not positive semidefinite".into(),
            ));
        }
        v
    }
}

/// Real part of `Tr[a b]`.
pub fn trace_product(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    let n = a.dim();
    let mut acc = ZERO;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc.re
}

/// Lower bounds on `|Υ|` (diffusive) and `|Ξ|` (counting).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub upsilon_min: f64,
    pub xi_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            upsilon_min: 1e-6,
            xi_min: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    pub name: String,
    pub dim: usize,
    pub coeffs: CoefficientMap,
    pub mode: ObservationMode,
    pub range: AdmissibleRange,
    pub rho0: DensityMatrix,
    pub thresholds: Thresholds,
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        coeffs: CoefficientMap,
        mode: ObservationMode,
        range: AdmissibleRange,
        rho0: DensityMatrix,
    ) -> Self {
        Self {
            name: name.into(),
            dim: rho0.dim(),
            coeffs,
            mode,
            range,
            rho0,
            thresholds: Thresholds::default(),
        }
    }

    /// `L = 0`, `H = 0` with the given observation mode; `Ξ = 1`, `Υ = 1` when counting.
    pub fn frozen(mode: ObservationMode) -> Self {
        let z = ComplexMatrix::zeros(2);
        let xi = match mode {
            ObservationMode::Diffusive => 0.0,
            ObservationMode::Counting => 1.0,
        };
        Self::new(
            "frozen",
            CoefficientMap::affine(z.clone(), z.clone(), z.clone(), z, xi, ONE),
            mode,
            AdmissibleRange::single(0.0),
            DensityMatrix::from_bloch([0.0, 0.0, 1.0]).expect("excited state"),
        )
    }

    pub fn with_rho0(mut self, rho0: DensityMatrix) -> Self {
        self.rho0 = rho0;
        self
    }

    pub fn with_range(mut self, range: AdmissibleRange) -> Self {
        self.range = range;
        self
    }

    /// `Ok(self)` when [`validate`] reports nothing.
    pub fn validated(self) -> Result<Self> {
        let v = validate(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DimensionMismatch,
    NonFinite,
    HamiltonianNotHermitian,
    ScatteringNotUnitary,
    /// Diffusive mode with `Ξ ≠ 0`.
    NonzeroXi,
    /// Diffusive mode with `|Υ|` below threshold.
    NonzeroUpsilon,
    /// Counting mode with `|Ξ|` below threshold.
    InvertibleXi,
    InvalidRange,
    InvalidInitialState,
    CostNotPositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub u: Option<f64>,
    pub detail: String,
}

impl Violation {
    pub fn new(kind: ViolationKind, u: Option<f64>, detail: String) -> Self {
        Self { kind, u, detail }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.u {
            Some(u) => write!(f, "{:?} at u = {u}: {}", self.kind, self.detail),
            None => write!(f, "{:?}: {}", self.kind, self.detail),
        }
    }
}

/// Checks every model invariant on a sample of controls; empty means valid.
pub fn validate(model: &SystemModel) -> Vec<Violation> {
    let mut out = model.range.violations();
    let tol = 1e-10;
    if model.rho0.dim() != model.dim {
        out.push(Violation::new(
            ViolationKind::InvalidInitialState,
            None,
            format!(
                "rho0 has dim {} but model dim is {}",
                model.rho0.dim(),
                model.dim
            ),
        ));
    }
    for u in model.range.samples() {
        let c = model.coeffs.at(u);
        let mut push = |kind, detail: String| out.push(Violation::new(kind, Some(u), detail));
        let dims = [c.s.dim(), c.l.dim(), c.h.dim()];
        if dims.iter().any(|&d| d != model.dim) {
            push(
                ViolationKind::DimensionMismatch,
                format!("coefficient dims {dims:?} differ from {}", model.dim),
            );
            break;
        }
        if !(c.xi.is_finite()
            && c.upsilon.re.is_finite()
            && c.upsilon.im.is_finite()
            && c.s.is_finite()
            && c.l.is_finite()
            && c.h.is_finite())
        {
            push(ViolationKind::NonFinite, "non-finite coefficient".into());
            break;
        }
        let dev = c.h.hermitian_deviation();
        if dev > tol {
            push(
                ViolationKind::HamiltonianNotHermitian,
                format!("hermitian deviation {dev:e}"),
            );
        }
        if !c.s.is_unitary(tol) {
            push(
                ViolationKind::ScatteringNotUnitary,
                "S is not unitary".into(),
            );
        }
        match model.mode {
            ObservationMode::Diffusive => {
                if c.xi != 0.0 {
                    push(
                        ViolationKind::NonzeroXi,
                        format!("diffusive observation requires Ξ = 0, got {}", c.xi),
                    );
                }
                if c.upsilon.norm() < model.thresholds.upsilon_min {
                    push(
                        ViolationKind::NonzeroUpsilon,
                        format!(
                            "|Υ| = {:e} is below {:e}",
                            c.upsilon.norm(),
                            model.thresholds.upsilon_min
                        ),
                    );
                }
            }
            ObservationMode::Counting => {
                if c.xi.abs() < model.thresholds.xi_min {
                    push(
                        ViolationKind::InvertibleXi,
                        format!(
                            "|Ξ| = {:e} is below {:e}",
                            c.xi.abs(),
                            model.thresholds.xi_min
                        ),
                    );
                }
            }
        }
    }
    out.dedup_by(|a, b| a.kind == b.kind);
    out
}

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: [&str; 4] = [
    "decay_homodyne",
    "decay_counting",
    "coherent_feedback",
    "adaptive_measurement",
];

/// Default counting-mode local-oscillator amplitude for `decay_counting`.
pub const DEFAULT_EPSILON0: f64 = 1e-3;

/// Builds one of the qubit models.
///
/// Parameters: `gamma` (default 1), `u_max` (default 1), `u_min` (default
/// `-u_max`), `levels` (default 11), plus `epsilon0` for `decay_counting`
/// and `omega` for `adaptive_measurement`. The initial state is `|e⟩⟨e|`.
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemModel> {
    let extra: &[&str] = match name {
        "decay_homodyne" | "coherent_feedback" => &[],
        "decay_counting" => &["epsilon0"],
        "adaptive_measurement" => &["omega"],
        _ => return Err(Error::UnknownModel(name.to_string())),
    };
    for key in params.keys() {
        if !["gamma", "u_max", "u_min", "levels"].contains(&key.as_str())
            && !extra.contains(&key.as_str())
        {
            return Err(invalid(key, "not a parameter of this model"));
        }
    }
    let get = |k: &str, default: f64| -> Result<f64> {
        let v = params.get(k).copied().unwrap_or(default);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(invalid(k, "must be finite"))
        }
    };
    let gamma = get("gamma", 1.0)?;
    if gamma <= 0.0 {
        return Err(invalid("gamma", &format!("must be positive, got {gamma}")));
    }
    let u_max = get("u_max", 1.0)?;
    if u_max <= 0.0 {
        return Err(invalid("u_max", &format!("must be positive, got {u_max}")));
    }
    let u_min = get("u_min", -u_max)?;
    if u_min > u_max {
        return Err(invalid("u_min", "exceeds u_max"));
    }
    let levels = get("levels", 11.0)?;
    if levels < 1.0 || levels.fract() != 0.0 {
        return Err(invalid("levels", "must be a positive integer"));
    }
    let range = AdmissibleRange::uniform(u_min, u_max, levels as usize)?;

    let sg = gamma.sqrt();
    let lower = pauli::sigma_minus().scale_re(sg);
    let zero = ComplexMatrix::zeros(2);
    let (coeffs, mode) = match name {
        "decay_homodyne" => (
            CoefficientMap::affine(lower, zero.clone(), zero, pauli::y(), 0.0, ONE),
            ObservationMode::Diffusive,
        ),
        "decay_counting" => {
            let eps = get("epsilon0", DEFAULT_EPSILON0)?;
            (
                CoefficientMap::affine(
                    lower,
                    zero.clone(),
                    zero,
                    pauli::y(),
                    1.0,
                    C64::new(eps, 0.0),
                ),
                ObservationMode::Counting,
            )
        }
        "coherent_feedback" => (
            CoefficientMap::affine(
                lower,
                ComplexMatrix::identity(2),
                zero.clone(),
                zero,
                0.0,
                ONE,
            ),
            ObservationMode::Diffusive,
        ),
        "adaptive_measurement" => {
            let omega = get("omega", 1.0)?;
            (
                CoefficientMap::affine(
                    lower,
                    zero.clone(),
                    pauli::x().scale_re(omega),
                    zero,
                    0.0,
                    ONE,
                )
                .with_upsilon(|u| C64::from_polar(1.0, -u)),
                ObservationMode::Diffusive,
            )
        }
        _ => unreachable!(),
    };
    let rho0 = DensityMatrix::from_bloch([0.0, 0.0, 1.0])?;
    Ok(SystemModel::new(name, coeffs, mode, range, rho0))
}

fn invalid(field: &str, reason: &str) -> Error {
    Error::InvalidParameter {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

/// Parameter map from `(name, value)` pairs.
pub fn params<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}
