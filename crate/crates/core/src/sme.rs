//! Normalized quantum filters, trajectory generation and innovations.
//!
//! Diffusive observation (`Ξ = 0`), with `K = Υ⁻¹L`:
//!
//! ```text
//! dY  = dW + Tr[(Ῡ L + Υ L*) ρ] dt,      E[dW²] = |Υ|² dt
//! dρ  = 𝓛ρ dt + (Kρ + ρK* − Tr[(K + K*)ρ] ρ) dW
//! ```
//!
//! Counting observation (`Ξ ≠ 0`), with `B = Υ + ΞL` and intensity
//! `λ = Ξ⁻² Tr[BρB*]`: a unit jump replaces `ρ` by `BρB*/Tr[BρB*]`; otherwise
//! `dρ = (𝓛ρ − Ξ⁻² BρB* + λρ) dt`.
//!
//! The `kraus` scheme writes each step as `ρ' ∝ MρM*`, which keeps the state
//! exactly positive. In diffusive mode `M` carries the second-order term
//! `½K²(dY² − |Υ|²dt)`.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::generator;
use crate::matcore::{matrix_to_bloch, ComplexMatrix, DensityMatrix, C64, I, ONE};
use crate::model::{ControlStrategy, ObservationMode, SystemModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    #[default]
    Kraus,
}

/// Largest admissible `λ·dt` for Bernoulli jump sampling.
pub const MAX_JUMP_PROBABILITY: f64 = 0.1;

/// Number of steps on the uniform grid `0, dt, …, T`.
pub fn grid_steps(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final.is_finite() && dt.is_finite()) || t_final < 0.0 || dt <= 0.0 {
        return Err(Error::TimeGrid(format!("T = {t_final}, dt = {dt}")));
    }
    let n = (t_final / dt).round();
    if (n * dt - t_final).abs() > 1e-9 * t_final.max(dt) {
        return Err(Error::TimeGrid(format!(
            "T = {t_final} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

/// Coefficient-derived operators for one control value.
#[derive(Debug, Clone)]
pub struct StepOps {
    pub mode: ObservationMode,
    pub u: f64,
    pub h: ComplexMatrix,
    pub l: ComplexMatrix,
    pub xi: f64,
    pub upsilon: C64,
    /// `Υ⁻¹L` (diffusive) or `B = Υ + ΞL` (counting).
    pub k: ComplexMatrix,
    /// `−iH − ½L*L`.
    pub drift: ComplexMatrix,
    /// `K²` (diffusive) or the no-jump Kraus rate (counting).
    pub aux: ComplexMatrix,
}

impl StepOps {
    pub fn new(model: &SystemModel, u: f64) -> Result<Self> {
        let c = model.coeffs.at(u);
        let dim = model.dim;
        let ldl = &c.l.adjoint() * &c.l;
        let mut drift = c.h.scale(-I);
        drift.add_scaled((-0.5).into(), &ldl);
        let (k, aux) = match model.mode {
            ObservationMode::Diffusive => {
                let a = c.upsilon.norm();
                if a < model.thresholds.upsilon_min {
                    return Err(Error::UpsilonTooSmall(a));
                }
                let k = c.l.scale(c.upsilon.inv());
                let k2 = &k * &k;
                (k, k2)
            }
            ObservationMode::Counting => {
                if c.xi.abs() < model.thresholds.xi_min {
                    return Err(Error::XiTooSmall(c.xi.abs()));
                }
                let mut b = c.l.scale_re(c.xi);
                for i in 0..dim {
                    b[(i, i)] += c.upsilon;
                }
                // No-jump rate: iH + ½L*L + Ξ⁻¹ῩL + ½Ξ⁻²|Υ|².
                let mut rate = drift.scale_re(-1.0);
                rate.add_scaled(c.upsilon.conj() / c.xi, &c.l);
                let c0 = 0.5 * c.upsilon.norm_sqr() / (c.xi * c.xi);
                for i in 0..dim {
                    rate[(i, i)] += c0;
                }
                (b, rate)
            }
        };
        Ok(Self {
            mode: model.mode,
            u,
            h: c.h,
            l: c.l,
            xi: c.xi,
            upsilon: c.upsilon,
            k,
            drift,
            aux,
        })
    }

    /// `|Υ|²`, the variance rate of the diffusive innovations.
    #[inline]
    pub fn variance_rate(&self) -> f64 {
        self.upsilon.norm_sqr()
    }

    /// `Tr[(Ῡ L + Υ L*) ρ]`, the drift of the diffusive observation.
    #[inline]
    pub fn observation_drift(&self, rho: &ComplexMatrix) -> f64 {
        2.0 * (self.upsilon.conj() * trace_mul(&self.l, rho)).re
    }

    /// Jump intensity `Ξ⁻² Tr[BρB*]`.
    #[inline]
    pub fn intensity(&self, rho: &ComplexMatrix) -> f64 {
        self.k.sandwich(rho).trace().re / (self.xi * self.xi)
    }

    pub(crate) fn diffusive(
        &self,
        rho: &ComplexMatrix,
        dt: f64,
        dy: f64,
        scheme: Scheme,
    ) -> ComplexMatrix {
        let var = self.variance_rate();
        let out = match scheme {
            Scheme::Euler => {
                let kr = &self.k * rho;
                let a = 2.0 * kr.trace().re;
                let dz = dy - a * var * dt;
                let mut out = rho.clone();
                out += &generator(&self.h, &self.l, rho).scale_re(dt);
                let kr_h = &kr + &kr.adjoint();
                out.add_scaled(dz.into(), &kr_h);
                out.add_scaled((-a * dz).into(), rho);
                out
            }
            Scheme::Kraus => {
                let mut m = ComplexMatrix::identity(rho.dim());
                m.add_scaled(dt.into(), &self.drift);
                m.add_scaled(dy.into(), &self.k);
                m.add_scaled((0.5 * (dy * dy - var * dt)).into(), &self.aux);
                m.sandwich(rho)
            }
        };
        normalize(&out)
    }

    pub(crate) fn no_jump(&self, rho: &ComplexMatrix, dt: f64, scheme: Scheme) -> ComplexMatrix {
        let out = match scheme {
            Scheme::Euler => {
                let brb = self.k.sandwich(rho);
                let lam = brb.trace().re / (self.xi * self.xi);
                let mut out = rho.clone();
                out += &generator(&self.h, &self.l, rho).scale_re(dt);
                out.add_scaled((-dt / (self.xi * self.xi)).into(), &brb);
                out.add_scaled((lam * dt).into(), rho);
                out
            }
            Scheme::Kraus => {
                let mut m = ComplexMatrix::identity(rho.dim());
                m.add_scaled((-dt).into(), &self.aux);
                m.sandwich(rho)
            }
        };
        normalize(&out)
    }

    pub(crate) fn jump(&self, rho: &ComplexMatrix) -> Result<ComplexMatrix> {
        let brb = self.k.sandwich(rho);
        if brb.trace().re <= 0.0 {
            return Err(Error::InvalidState(
                "jump from a state with zero intensity".into(),
            ));
        }
        Ok(normalize(&brb))
    }
}

#[inline]
fn trace_mul(a: &ComplexMatrix, b: &ComplexMatrix) -> C64 {
    let n = a.dim();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Hermitian part rescaled to unit trace.
#[inline]
pub fn normalize(m: &ComplexMatrix) -> ComplexMatrix {
    DensityMatrix::normalized(m).into_matrix()
}

fn require(model: &SystemModel, mode: ObservationMode) -> Result<()> {
    if model.mode != mode {
        return Err(Error::ModeMismatch {
            expected: match mode {
                ObservationMode::Diffusive => "diffusive",
                ObservationMode::Counting => "counting",
            },
        });
    }
    Ok(())
}

/// The Lindblad generator at control `u`.
pub fn drift_lindblad(rho: &DensityMatrix, u: f64, model: &SystemModel) -> ComplexMatrix {
    generator(&model.coeffs.h(u), &model.coeffs.l(u), rho.matrix())
}

/// One diffusive step driven by the innovation increment `dw`. Returns the
/// updated state and the observation increment `dY`.
pub fn step_diffusive(
    model: &SystemModel,
    rho: &DensityMatrix,
    u: f64,
    dt: f64,
    dw: f64,
    scheme: Scheme,
) -> Result<(DensityMatrix, f64)> {
    require(model, ObservationMode::Diffusive)?;
    if !dw.is_finite() {
        return Err(Error::NonFinite("dW"));
    }
    let ops = StepOps::new(model, u)?;
    let dy = dw + ops.observation_drift(rho.matrix()) * dt;
    let next = ops.diffusive(rho.matrix(), dt, dy, scheme);
    Ok((DensityMatrix::normalized(&next), dy))
}

/// One diffusive step driven by an observed increment `dy`.
pub fn update_diffusive(
    model: &SystemModel,
    rho: &DensityMatrix,
    u: f64,
    dt: f64,
    dy: f64,
    scheme: Scheme,
) -> Result<DensityMatrix> {
    require(model, ObservationMode::Diffusive)?;
    if !dy.is_finite() {
        return Err(Error::NonFinite("dY"));
    }
    let ops = StepOps::new(model, u)?;
    Ok(DensityMatrix::normalized(&ops.diffusive(
        rho.matrix(),
        dt,
        dy,
        scheme,
    )))
}

/// One counting step with Bernoulli(λ·dt) jump sampling from `rng`.
pub fn step_jump(
    model: &SystemModel,
    rho: &DensityMatrix,
    u: f64,
    dt: f64,
    scheme: Scheme,
    rng: &mut ChaCha8Rng,
) -> Result<(DensityMatrix, bool)> {
    step_jump_with_uniform(model, rho, u, dt, scheme, rng::uniform(rng))
}

/// As [`step_jump`], with the uniform variate supplied: a jump happens iff `r < λ·dt`.
pub fn step_jump_with_uniform(
    model: &SystemModel,
    rho: &DensityMatrix,
    u: f64,
    dt: f64,
    scheme: Scheme,
    r: f64,
) -> Result<(DensityMatrix, bool)> {
    require(model, ObservationMode::Counting)?;
    let ops = StepOps::new(model, u)?;
    let (next, jumped) = jump_step(&ops, rho.matrix(), dt, scheme, r)?;
    Ok((DensityMatrix::normalized(&next), jumped))
}

fn jump_step(
    ops: &StepOps,
    rho: &ComplexMatrix,
    dt: f64,
    scheme: Scheme,
    r: f64,
) -> Result<(ComplexMatrix, bool)> {
    let p = ops.intensity(rho) * dt;
    // Written to reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(p < MAX_JUMP_PROBABILITY) {
        return Err(Error::IntensityTooLarge(p));
    }
    if r < p {
        Ok((ops.jump(rho)?, true))
    } else {
        Ok((ops.no_jump(rho, dt, scheme), false))
    }
}

/// One counting step given the observed jump indicator.
pub fn update_jump(
    model: &SystemModel,
    rho: &DensityMatrix,
    u: f64,
    dt: f64,
    jumped: bool,
    scheme: Scheme,
) -> Result<DensityMatrix> {
    require(model, ObservationMode::Counting)?;
    let ops = StepOps::new(model, u)?;
    let next = if jumped {
        ops.jump(rho.matrix())?
    } else {
        ops.no_jump(rho.matrix(), dt, scheme)
    };
    Ok(DensityMatrix::normalized(&next))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    pub t_final: f64,
    pub dt: f64,
    pub scheme: Scheme,
    /// Normal variates summed per diffusive step. Runs at `dt` and `dt/2` with
    /// refinements `2m` and `m` see the same Brownian path.
    pub noise_refine: usize,
}

impl TrajectoryParams {
    pub fn new(t_final: f64, dt: f64, scheme: Scheme) -> Self {
        Self {
            t_final,
            dt,
            scheme,
            noise_refine: 1,
        }
    }

    pub fn with_noise_refine(mut self, m: usize) -> Self {
        self.noise_refine = m.max(1);
        self
    }
}

/// One realization: `N` steps, `N + 1` states.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub mode: ObservationMode,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Observation increments; `0`/`1` jump indicators in counting mode.
    pub dy: Vec<f64>,
    pub u: Vec<f64>,
    /// Innovation increments `dZ̄`.
    pub innovations: Vec<f64>,
    pub rho: Vec<DensityMatrix>,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.dy.len()
    }

    pub fn final_state(&self) -> &DensityMatrix {
        self.rho.last().expect("records hold the initial state")
    }

    pub fn jumps(&self) -> usize {
        match self.mode {
            ObservationMode::Counting => self.dy.iter().filter(|&&d| d == 1.0).count(),
            ObservationMode::Diffusive => 0,
        }
    }

    /// `t,u,dY,dZ,x,y,z` for qubits (flattened `ρ` otherwise). Row `k` holds
    /// the state at `t_k` and the control and increments of the step that
    /// starts there; the final row leaves those three fields empty.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let dim = self.rho[0].dim();
        let state_cols: Vec<String> = if dim == 2 {
            vec!["x".into(), "y".into(), "z".into()]
        } else {
            (0..dim * dim)
                .flat_map(|k| {
                    [
                        format!("re{}_{}", k / dim, k % dim),
                        format!("im{}_{}", k / dim, k % dim),
                    ]
                })
                .collect()
        };
        writeln!(w, "t,u,dY,dZ,{}", state_cols.join(","))?;
        for (k, (t, rho)) in self.times.iter().zip(&self.rho).enumerate() {
            let state: Vec<String> = if dim == 2 {
                matrix_to_bloch(rho.matrix())?
                    .iter()
                    .map(|v| v.to_string())
                    .collect()
            } else {
                rho.matrix()
                    .entries()
                    .iter()
                    .flat_map(|c| [c.re.to_string(), c.im.to_string()])
                    .collect()
            };
            if k < self.steps() {
                writeln!(
                    w,
                    "{t},{},{},{},{}",
                    self.u[k],
                    self.dy[k],
                    self.innovations[k],
                    state.join(",")
                )?;
            } else {
                writeln!(w, "{t},,,,{}", state.join(","))?;
            }
        }
        Ok(())
    }
}

/// Caches [`StepOps`] across steps that reuse the same control.
pub(crate) struct OpsCache {
    ops: Option<StepOps>,
}

impl OpsCache {
    pub(crate) fn new() -> Self {
        Self { ops: None }
    }

    pub(crate) fn get(&mut self, model: &SystemModel, u: f64) -> Result<&StepOps> {
        let stale = self
            .ops
            .as_ref()
            .is_none_or(|o| o.u.to_bits() != u.to_bits());
        if stale {
            self.ops = Some(StepOps::new(model, u)?);
        }
        Ok(self.ops.as_ref().expect("just filled"))
    }
}

/// Simulates trajectory `index` of the run seeded with `seed`.
///
/// The physical observation is generated by the filter itself: `dW` is drawn
/// with variance `|Υ|²dt` (diffusive) and jumps with probability `λ·dt`
/// (counting). Each step consumes `noise_refine` normals or one uniform from
/// the trajectory's stream.
pub fn generate_trajectory(
    model: &SystemModel,
    strategy: &ControlStrategy,
    params: &TrajectoryParams,
    seed: u64,
    index: u64,
) -> Result<TrajectoryRecord> {
    let n = grid_steps(params.t_final, params.dt)?;
    let mut rng = rng::stream(seed, index);
    let dt = params.dt;
    let m = params.noise_refine.max(1);
    let sub = (dt / m as f64).sqrt();

    let mut rec = TrajectoryRecord {
        mode: model.mode,
        dt,
        times: (0..=n).map(|k| k as f64 * dt).collect(),
        dy: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        innovations: Vec::with_capacity(n),
        rho: Vec::with_capacity(n + 1),
    };
    rec.rho.push(model.rho0.clone());
    let mut cache = OpsCache::new();
    for k in 0..n {
        let rho = &rec.rho[k];
        let u = model
            .range
            .check(strategy.control(rec.times[k], &rec.dy, rho))?;
        let ops = cache.get(model, u)?;
        let (next, dy, dz) = match model.mode {
            ObservationMode::Diffusive => {
                let z: f64 = (0..m).map(|_| rng::normal(&mut rng)).sum();
                let dw = ops.upsilon.norm() * sub * z;
                let dy = dw + ops.observation_drift(rho.matrix()) * dt;
                (ops.diffusive(rho.matrix(), dt, dy, params.scheme), dy, dw)
            }
            ObservationMode::Counting => {
                let lam = ops.intensity(rho.matrix());
                let (next, jumped) =
                    jump_step(ops, rho.matrix(), dt, params.scheme, rng::uniform(&mut rng))?;
                let d = if jumped { 1.0 } else { 0.0 };
                (next, d, ops.xi * (d - lam * dt))
            }
        };
        rec.u.push(u);
        rec.dy.push(dy);
        rec.innovations.push(dz);
        rec.rho.push(DensityMatrix::normalized(&next));
    }
    Ok(rec)
}

/// Re-runs the normalized filter along a recorded observation and control path.
pub fn filter_record(
    model: &SystemModel,
    rho0: &DensityMatrix,
    dy: &[f64],
    u: &[f64],
    dt: f64,
    scheme: Scheme,
) -> Result<Vec<DensityMatrix>> {
    if dy.len() != u.len() {
        return Err(Error::DimensionMismatch {
            left: dy.len(),
            right: u.len(),
        });
    }
    let mut out = Vec::with_capacity(dy.len() + 1);
    out.push(rho0.clone());
    let mut cache = OpsCache::new();
    for (k, (&d, &uk)) in dy.iter().zip(u).enumerate() {
        let ops = cache.get(model, uk)?;
        let rho = out[k].matrix();
        let next = match model.mode {
            ObservationMode::Diffusive => ops.diffusive(rho, dt, d, scheme),
            ObservationMode::Counting => {
                if d == 1.0 {
                    ops.jump(rho)?
                } else {
                    ops.no_jump(rho, dt, scheme)
                }
            }
        };
        out.push(DensityMatrix::normalized(&next));
    }
    Ok(out)
}

/// Applies `f` to every trajectory `0..n` in parallel; results come back in
/// index order so any later fold is independent of scheduling.
pub fn ensemble_map<T, F>(
    model: &SystemModel,
    strategy: &ControlStrategy,
    params: &TrajectoryParams,
    seed: u64,
    n: usize,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, TrajectoryRecord) -> T + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(|i| generate_trajectory(model, strategy, params, seed, i as u64).map(|r| f(i, r)))
        .collect()
}

/// All `n` records. Memory grows as `n · T/dt`; prefer [`ensemble_map`] for large runs.
pub fn generate_ensemble(
    model: &SystemModel,
    strategy: &ControlStrategy,
    params: &TrajectoryParams,
    seed: u64,
    n: usize,
) -> Result<Vec<TrajectoryRecord>> {
    ensemble_map(model, strategy, params, seed, n, |_, r| r)
}

/// Bounded functionals `g(Y_{≤s})` of the observation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    One,
    /// `Y_s`, the accumulated observation.
    Ys,
    /// `sign(Y_s)`, with `sign(0) = 0`.
    SignYs,
    Constant(f64),
}

impl TestFunction {
    pub const DEFAULTS: [TestFunction; 3] = [Self::One, Self::Ys, Self::SignYs];

    pub fn eval(self, y_s: f64) -> f64 {
        match self {
            Self::One => 1.0,
            Self::Ys => y_s,
            Self::SignYs => {
                if y_s > 0.0 {
                    1.0
                } else if y_s < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Self::Constant(c) => c,
        }
    }
}

/// `(Z̄_t − Z̄_s, Y_s)` from one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnovationSample {
    pub dz: f64,
    pub y_s: f64,
}

impl InnovationSample {
    /// Grid indices `s_idx < t_idx ≤ N`.
    pub fn from_record(rec: &TrajectoryRecord, s_idx: usize, t_idx: usize) -> Result<Self> {
        if s_idx >= t_idx || t_idx > rec.steps() {
            return Err(Error::TimeGrid(format!(
                "need s < t ≤ N, got s = {s_idx}, t = {t_idx}, N = {}",
                rec.steps()
            )));
        }
        Ok(Self {
            dz: rec.innovations[s_idx..t_idx].iter().sum(),
            y_s: rec.dy[..s_idx].iter().sum(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            sum += v;
            sum2 += v * v;
        }
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let mean = sum / n as f64;
        let var = if n > 1 {
            ((sum2 - n as f64 * mean * mean) / (n - 1) as f64).max(0.0)
        } else {
            0.0
        };
        Ok(Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        })
    }

    /// `|mean| ≤ k·stderr`.
    pub fn within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.stderr
    }
}

/// Monte Carlo estimates of `E[(Z̄_t − Z̄_s)·g(Y_{≤s})]`, one per test function.
pub fn innovations_martingale_stat(
    samples: &[InnovationSample],
    test_fns: &[TestFunction],
) -> Result<Vec<MeanEstimate>> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    test_fns
        .iter()
        .map(|g| MeanEstimate::from_values(samples.iter().map(|s| s.dz * g.eval(s.y_s))))
        .collect()
}

/// Convenience form over full records, with `s` and `t` in time units.
pub fn innovations_martingale_records(
    records: &[TrajectoryRecord],
    s: f64,
    t: f64,
    test_fns: &[TestFunction],
) -> Result<Vec<MeanEstimate>> {
    let first = records.first().ok_or(Error::EmptyEnsemble)?;
    let (si, ti) = (
        (s / first.dt).round() as usize,
        (t / first.dt).round() as usize,
    );
    let samples = records
        .iter()
        .map(|r| InnovationSample::from_record(r, si, ti))
        .collect::<Result<Vec<_>>>()?;
    innovations_martingale_stat(&samples, test_fns)
}

/// Per-time ensemble statistics of the Bloch vector and filter invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub mode: ObservationMode,
    pub scheme: Scheme,
    pub n_traj: usize,
    pub seed: u64,
    pub t_final: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub mean_bloch: Vec<[f64; 3]>,
    pub stderr_bloch: Vec<[f64; 3]>,
    pub min_eigenvalue: f64,
    pub max_trace_error: f64,
    pub mean_jumps: f64,
}

/// Streaming accumulator behind [`EnsembleSummary`]; fold records in index order.
#[derive(Debug, Clone)]
pub struct SummaryAccumulator {
    stride: usize,
    n: usize,
    sum: Vec<[f64; 3]>,
    sum2: Vec<[f64; 3]>,
    min_eig: f64,
    max_trace_err: f64,
    jumps: usize,
}

/// Per-trajectory contribution to a [`SummaryAccumulator`].
#[derive(Debug, Clone)]
pub struct SummaryPart {
    bloch: Vec<[f64; 3]>,
    min_eig: f64,
    max_trace_err: f64,
    jumps: usize,
}

impl SummaryPart {
    pub fn from_record(rec: &TrajectoryRecord, stride: usize) -> Result<Self> {
        let mut bloch = Vec::new();
        for k in (0..rec.rho.len()).step_by(stride.max(1)) {
            bloch.push(rec.rho[k].bloch()?);
        }
        let mut min_eig = f64::INFINITY;
        let mut max_trace_err: f64 = 0.0;
        for r in &rec.rho {
            min_eig = min_eig.min(r.min_eigenvalue());
            max_trace_err = max_trace_err.max((r.matrix().trace() - ONE).norm());
        }
        Ok(Self {
            bloch,
            min_eig,
            max_trace_err,
            jumps: rec.jumps(),
        })
    }
}

impl SummaryAccumulator {
    pub fn new(stride: usize) -> Self {
        Self {
            stride: stride.max(1),
            n: 0,
            sum: Vec::new(),
            sum2: Vec::new(),
            min_eig: f64::INFINITY,
            max_trace_err: 0.0,
            jumps: 0,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn push(&mut self, part: &SummaryPart) {
        if self.sum.is_empty() {
            self.sum = vec![[0.0; 3]; part.bloch.len()];
            self.sum2 = vec![[0.0; 3]; part.bloch.len()];
        }
        for (k, b) in part.bloch.iter().enumerate() {
            for c in 0..3 {
                self.sum[k][c] += b[c];
                self.sum2[k][c] += b[c] * b[c];
            }
        }
        self.n += 1;
        self.min_eig = self.min_eig.min(part.min_eig);
        self.max_trace_err = self.max_trace_err.max(part.max_trace_err);
        self.jumps += part.jumps;
    }

    pub fn finish(
        &self,
        mode: ObservationMode,
        scheme: Scheme,
        seed: u64,
        t_final: f64,
        dt: f64,
    ) -> Result<EnsembleSummary> {
        if self.n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let n = self.n as f64;
        let mut mean = Vec::with_capacity(self.sum.len());
        let mut se = Vec::with_capacity(self.sum.len());
        for (s, s2) in self.sum.iter().zip(&self.sum2) {
            let mut m = [0.0; 3];
            let mut e = [0.0; 3];
            for c in 0..3 {
                m[c] = s[c] / n;
                let var = if self.n > 1 {
                    ((s2[c] - n * m[c] * m[c]) / (n - 1.0)).max(0.0)
                } else {
                    0.0
                };
                e[c] = (var / n).sqrt();
            }
            mean.push(m);
            se.push(e);
        }
        Ok(EnsembleSummary {
            mode,
            scheme,
            n_traj: self.n,
            seed,
            t_final,
            dt,
            times: (0..mean.len())
                .map(|k| (k * self.stride) as f64 * dt)
                .collect(),
            mean_bloch: mean,
            stderr_bloch: se,
            min_eigenvalue: self.min_eig,
            max_trace_error: self.max_trace_err,
            mean_jumps: self.jumps as f64 / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::pauli;
    use crate::model::{builtin_model, params, AdmissibleRange, CoefficientMap};
    use proptest::prelude::*;

    fn homodyne() -> SystemModel {
        builtin_model("decay_homodyne", &params([("gamma", 1.0), ("u_max", 5.0)])).unwrap()
    }

    fn counting(eps: f64) -> SystemModel {
        builtin_model(
            "decay_counting",
            &params([("gamma", 1.0), ("epsilon0", eps)]),
        )
        .unwrap()
    }

    fn state(b: [f64; 3]) -> DensityMatrix {
        DensityMatrix::from_bloch(b).unwrap()
    }

    fn close(a: &ComplexMatrix, b: &ComplexMatrix, tol: f64) -> bool {
        (a - b).max_abs() <= tol
    }

    #[test]
    fn drift_examples() {
        let m = homodyne();
        let d = drift_lindblad(&state([0.0, 0.0, 1.0]), 0.0, &m);
        let want = &pauli::ground_projector() - &pauli::excited_projector();
        assert!(close(&d, &want, 1e-15));
        let f = SystemModel::frozen(ObservationMode::Diffusive);
        assert_eq!(
            drift_lindblad(&state([0.2, 0.3, 0.1]), 0.0, &f).max_abs(),
            0.0
        );
    }

    #[test]
    fn frozen_diffusive_step() {
        let f = SystemModel::frozen(ObservationMode::Diffusive);
        let rho = state([0.2, -0.3, 0.4]);
        for scheme in [Scheme::Euler, Scheme::Kraus] {
            let (next, dy) = step_diffusive(&f, &rho, 0.0, 1e-3, 0.05, scheme).unwrap();
            assert!(close(next.matrix(), rho.matrix(), 1e-15));
            assert_eq!(dy, 0.05);
        }
    }

    /// One Euler step against the hand-reduced Bloch equations of the
    /// homodyne-detected decaying qubit with `H = uσy`:
    /// `dx = (−γx/2 + 2uz)dt + √γ(1 + z − x²)dW`,
    /// `dy = −γy/2 dt − √γ x y dW`,
    /// `dz = (−γ(1 + z) − 2ux)dt − √γ x(1 + z) dW`.
    #[test]
    fn euler_step_matches_bloch_reduction() {
        let gamma: f64 = 1.0;
        let m = homodyne();
        let sg = gamma.sqrt();
        for (b, u, dw) in [
            ([0.0, 0.0, 0.0], 0.0, 0.0),
            ([0.0, 0.0, 0.0], 0.0, 0.031),
            ([0.3, -0.2, 0.5], 1.5, -0.02),
        ] {
            let dt = 1e-3;
            let [x, y, z] = b;
            let want = [
                x + (-gamma * x / 2.0 + 2.0 * u * z) * dt + sg * (1.0 + z - x * x) * dw,
                y - gamma * y / 2.0 * dt - sg * x * y * dw,
                z + (-gamma * (1.0 + z) - 2.0 * u * x) * dt - sg * x * (1.0 + z) * dw,
            ];
            let (next, dy) = step_diffusive(&m, &state(b), u, dt, dw, Scheme::Euler).unwrap();
            let got = next.bloch().unwrap();
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() < 1e-10, "{c}: {got:?} vs {want:?}");
            }
            assert!((dy - (dw + sg * x * dt)).abs() < 1e-15);
        }
    }

    #[test]
    fn kraus_step_always_valid() {
        let m = homodyne();
        let rho = state([0.0, 0.0, 1.0]);
        for dw in [-3.0, -0.5, 0.0, 0.2, 4.0] {
            let (next, _) = step_diffusive(&m, &rho, 5.0, 1e-2, dw, Scheme::Kraus).unwrap();
            assert!(DensityMatrix::new(next.into_matrix()).is_ok());
        }
    }

    #[test]
    fn diffusive_errors() {
        let m = homodyne();
        let rho = state([0.0; 3]);
        assert!(matches!(
            step_diffusive(&m, &rho, 0.0, 1e-3, f64::NAN, Scheme::Kraus),
            Err(Error::NonFinite(_))
        ));
        let coeffs = m.coeffs.clone().with_upsilon(|_| C64::new(0.0, 0.0));
        let bad = SystemModel { coeffs, ..m };
        assert!(matches!(
            step_diffusive(&bad, &rho, 0.0, 1e-3, 0.0, Scheme::Kraus),
            Err(Error::UpsilonTooSmall(_))
        ));
        assert!(matches!(
            step_diffusive(&counting(0.0), &rho, 0.0, 1e-3, 0.0, Scheme::Kraus),
            Err(Error::ModeMismatch { .. })
        ));
    }

    #[test]
    fn jump_examples() {
        let m = counting(0.0);
        let e = state([0.0, 0.0, 1.0]);
        let ops = StepOps::new(&m, 0.0).unwrap();
        assert!((ops.intensity(e.matrix()) - 1.0).abs() < 1e-15);
        let (j, jumped) = step_jump_with_uniform(&m, &e, 0.0, 1e-3, Scheme::Kraus, 0.0).unwrap();
        assert!(jumped);
        assert!(close(j.matrix(), &pauli::ground_projector(), 1e-15));

        let g = state([0.0, 0.0, -1.0]);
        assert_eq!(ops.intensity(g.matrix()), 0.0);
        let mut rng = rng::stream(1, 0);
        for _ in 0..1000 {
            let (_, jumped) = step_jump(&m, &g, 0.0, 1e-2, Scheme::Euler, &mut rng).unwrap();
            assert!(!jumped);
        }

        let f = SystemModel::frozen(ObservationMode::Counting);
        let rho = state([0.3, 0.1, -0.2]);
        let fo = StepOps::new(&f, 0.0).unwrap();
        assert!((fo.intensity(rho.matrix()) - 1.0).abs() < 1e-15);
        let (j, jumped) = step_jump_with_uniform(&f, &rho, 0.0, 1e-3, Scheme::Kraus, 0.0).unwrap();
        assert!(jumped);
        assert!(close(j.matrix(), rho.matrix(), 1e-15));
    }

    #[test]
    fn intensity_precondition() {
        let m = counting(0.0);
        let e = state([0.0, 0.0, 1.0]);
        assert!(matches!(
            step_jump_with_uniform(&m, &e, 0.0, 0.2, Scheme::Kraus, 0.5),
            Err(Error::IntensityTooLarge(_))
        ));
    }

    #[test]
    fn no_jump_schemes_agree_to_second_order() {
        let m = builtin_model(
            "decay_counting",
            &params([("u_max", 2.0), ("epsilon0", 0.3)]),
        )
        .unwrap();
        let mut ratios = Vec::new();
        for b in [[0.3, 0.2, 0.5], [0.0, 0.0, 1.0], [-0.6, 0.1, 0.0]] {
            let rho = state(b);
            let diff = |dt: f64| {
                let e = update_jump(&m, &rho, 1.3, dt, false, Scheme::Euler).unwrap();
                let k = update_jump(&m, &rho, 1.3, dt, false, Scheme::Kraus).unwrap();
                (e.matrix() - k.matrix()).max_abs()
            };
            ratios.push(diff(2e-3) / diff(1e-3));
        }
        for r in ratios {
            assert!(r >= 3.5, "ratio {r}");
        }
    }

    #[test]
    fn same_seed_same_record() {
        let m = homodyne();
        let s = ControlStrategy::bang_bang(5, -5.0, 5.0);
        let p = TrajectoryParams::new(0.1, 1e-3, Scheme::Kraus);
        let a = generate_trajectory(&m, &s, &p, 11, 3).unwrap();
        let b = generate_trajectory(&m, &s, &p, 11, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_trajectory(&m, &s, &p, 11, 4).unwrap();
        assert_ne!(a.dy, c.dy);
    }

    #[test]
    fn frozen_trajectory() {
        let f = SystemModel::frozen(ObservationMode::Diffusive);
        let p = TrajectoryParams::new(0.05, 1e-3, Scheme::Kraus);
        let r = generate_trajectory(&f, &ControlStrategy::constant(0.0), &p, 0, 0).unwrap();
        assert_eq!(r.rho.len(), 51);
        assert!(r.rho.iter().all(|s| s == &f.rho0));
        assert_eq!(r.dy, r.innovations);
    }

    #[test]
    fn counting_record_is_zero_one() {
        let m = counting(1e-3);
        let p = TrajectoryParams::new(1.0, 1e-3, Scheme::Kraus);
        let r = generate_trajectory(&m, &ControlStrategy::constant(0.5), &p, 2, 0).unwrap();
        assert!(r.dy.iter().all(|&d| d == 0.0 || d == 1.0));
        // Without a jump the state moves by O(dt).
        for k in 0..r.steps() {
            if r.dy[k] == 0.0 {
                assert!((r.rho[k + 1].matrix() - r.rho[k].matrix()).max_abs() < 20.0 * r.dt);
            }
        }
    }

    #[test]
    fn control_out_of_range_is_an_error() {
        let m = homodyne();
        let p = TrajectoryParams::new(0.01, 1e-3, Scheme::Kraus);
        let err = generate_trajectory(&m, &ControlStrategy::constant(7.0), &p, 0, 0);
        assert!(matches!(err, Err(Error::ControlOutOfRange { .. })));
    }

    #[test]
    fn filter_record_reproduces_path() {
        let m = homodyne();
        let s = ControlStrategy::bang_bang(3, -5.0, 5.0);
        let p = TrajectoryParams::new(0.2, 1e-3, Scheme::Kraus);
        let r = generate_trajectory(&m, &s, &p, 5, 0).unwrap();
        let f = filter_record(&m, &m.rho0, &r.dy, &r.u, r.dt, Scheme::Kraus).unwrap();
        assert_eq!(f, r.rho);
    }

    #[test]
    fn grid_rules() {
        assert_eq!(grid_steps(1.0, 1e-3).unwrap(), 1000);
        assert!(grid_steps(1.0, 0.3).is_err());
        assert!(grid_steps(1.0, 0.0).is_err());
    }

    #[test]
    fn martingale_stat_linearity_and_empty() {
        let samples: Vec<InnovationSample> = (0..50)
            .map(|i| InnovationSample {
                dz: (i as f64 * 0.37).sin(),
                y_s: (i as f64 * 0.11).cos() - 0.5,
            })
            .collect();
        let s = innovations_martingale_stat(
            &samples,
            &[TestFunction::One, TestFunction::Constant(2.0)],
        )
        .unwrap();
        assert_eq!(s[1].mean, 2.0 * s[0].mean);
        assert_eq!(s[1].stderr, 2.0 * s[0].stderr);
        assert!(matches!(
            innovations_martingale_stat(&[], &TestFunction::DEFAULTS),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn wiener_innovations_are_centred() {
        let f = SystemModel::frozen(ObservationMode::Diffusive);
        let p = TrajectoryParams::new(1.0, 1e-2, Scheme::Kraus);
        let samples = ensemble_map(&f, &ControlStrategy::constant(0.0), &p, 3, 4000, |_, r| {
            InnovationSample::from_record(&r, 20, 50).unwrap()
        })
        .unwrap();
        let s = innovations_martingale_stat(&samples, &[TestFunction::One]).unwrap();
        assert!(s[0].within(3.0), "{:?}", s[0]);
    }

    #[test]
    fn general_upsilon_scaling() {
        // |Υ| = 2: the innovation variance rate is 4 and the drift of Y doubles.
        let m = homodyne();
        let coeffs = CoefficientMap::affine(
            pauli::sigma_minus(),
            ComplexMatrix::zeros(2),
            ComplexMatrix::zeros(2),
            pauli::y(),
            0.0,
            C64::new(0.0, 2.0),
        );
        let m2 = SystemModel {
            coeffs,
            range: AdmissibleRange::single(0.0),
            ..m
        };
        let ops = StepOps::new(&m2, 0.0).unwrap();
        assert_eq!(ops.variance_rate(), 4.0);
        let rho = state([0.4, 0.3, 0.0]);
        // Tr[(ῩL + ΥL*)ρ] with Υ = 2i: −2i·ρ_eg + 2i·ρ_ge = −2y.
        assert!((ops.observation_drift(rho.matrix()) + 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn kraus_preserves_positivity_and_trace(
            x in -0.57f64..0.57, y in -0.57f64..0.57, z in -0.57f64..0.57,
            u in -5.0f64..5.0, dw in -0.3f64..0.3,
        ) {
            let m = homodyne();
            let (next, _) = step_diffusive(&m, &state([x, y, z]), u, 1e-3, dw, Scheme::Kraus).unwrap();
            prop_assert!(next.min_eigenvalue() >= -1e-12);
            prop_assert!((next.matrix().trace() - ONE).norm() <= 1e-12);
        }

        #[test]
        fn drift_is_traceless_hermitian(
            x in -0.57f64..0.57, y in -0.57f64..0.57, z in -0.57f64..0.57, u in -5.0f64..5.0,
        ) {
            for name in crate::model::BUILTIN_MODELS {
                let m = builtin_model(name, &params([("u_max", 5.0)])).unwrap();
                let d = drift_lindblad(&state([x, y, z]), u, &m);
                prop_assert!(d.trace().norm() <= 1e-14);
                prop_assert!(d.is_hermitian(1e-14));
            }
        }
    }
}
