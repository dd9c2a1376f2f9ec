//! Backward dynamic programming on the Bloch ball.
//!
//! The filter is approximated by a Markov chain on a uniform `n³` lattice over
//! the cube `[−1, 1]³`. From each node the chain moves to the successors of one
//! Kraus filter step (two symmetric innovation increments in diffusive mode,
//! jump / no-jump in counting mode) and values off the lattice are read by
//! trilinear interpolation.
//!
//! Pure states stay pure under the filter, so optimal paths often run along
//! the sphere, which cuts through lattice cells. A lattice point `θ` outside
//! the ball is backed up at its radial projection `p = θ/r` and then
//! extrapolated linearly along the radius, `2V(p) − V((2 − r)θ/r)`, clipped to
//! the a-priori range of the cost-to-go. Holding `V(p)` constant outside the
//! ball instead would bias interpolated values on the sphere by `O(h)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{bloch_to_matrix, matrix_to_bloch, DensityMatrix};
use crate::model::{ControlStrategy, CostSpec, ObservationMode, SystemModel};
use crate::rng;
use crate::sme::{Scheme, StepOps};

/// Slack on `|θ| ≤ 1` accepted from rounding in filter updates.
pub const DEFAULT_EPS_GRID: f64 = 1e-6;

pub type Bloch = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub n: usize,
    pub eps_grid: f64,
}

impl StateGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Bellman(format!(
                "grid needs at least 2 points per axis, got {n}"
            )));
        }
        Ok(Self {
            n,
            eps_grid: DEFAULT_EPS_GRID,
        })
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    /// Number of lattice points, `n³`.
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        let m = (self.n - 1) as f64;
        (2.0 * i as f64 - m) / m
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    #[inline]
    pub fn axes(&self, idx: usize) -> [usize; 3] {
        let n = self.n;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    pub fn point(&self, idx: usize) -> Bloch {
        let [i, j, k] = self.axes(idx);
        [self.coord(i), self.coord(j), self.coord(k)]
    }

    /// The state a lattice point stands for: itself inside the ball, its radial
    /// projection outside.
    pub fn representative(&self, idx: usize) -> Bloch {
        let p = self.point(idx);
        let r = norm(p);
        if r > 1.0 {
            p.map(|c| c / r)
        } else {
            p
        }
    }

    pub fn in_ball(&self, idx: usize) -> bool {
        norm(self.point(idx)) <= 1.0 + self.eps_grid
    }

    /// Lattice points with `|θ| ≤ 1 + ε_grid`.
    pub fn nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.in_ball(i)).collect()
    }

    pub fn contains(&self, theta: Bloch) -> bool {
        norm(theta) <= 1.0 + self.eps_grid
    }

    /// Trilinear stencil of the cell containing `theta` (clamped to the cube).
    pub fn stencil(&self, theta: Bloch) -> [(usize, f64); 8] {
        let m = (self.n - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let s = ((theta[a].clamp(-1.0, 1.0) + 1.0) * 0.5 * m).clamp(0.0, m);
            let i = (s.floor() as usize).min(self.n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let mut out = [(0usize, 0f64); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (di, dj, dk) = (c >> 2 & 1, c >> 1 & 1, c & 1);
            let w = |d: usize, f: f64| if d == 1 { f } else { 1.0 - f };
            *slot = (
                self.index(base[0] + di, base[1] + dj, base[2] + dk),
                w(di, frac[0]) * w(dj, frac[1]) * w(dk, frac[2]),
            );
        }
        out
    }

    pub fn interpolate(&self, values: &[f64], theta: Bloch) -> f64 {
        self.stencil(theta)
            .iter()
            .map(|&(i, w)| w * values[i])
            .sum()
    }
}

#[inline]
fn norm(p: Bloch) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn require_qubit(model: &SystemModel) -> Result<()> {
    if model.dim != 2 {
        return Err(Error::Bellman(format!(
            "dynamic programming is limited to qubits, got dimension {}",
            model.dim
        )));
    }
    Ok(())
}

fn transition_with(ops: &StepOps, theta: Bloch, dt: f64) -> Result<Vec<(f64, Bloch)>> {
    let rho = bloch_to_matrix(theta);
    let mut out = Vec::with_capacity(2);
    match ops.mode {
        ObservationMode::Diffusive => {
            let drift = ops.observation_drift(&rho) * dt;
            let step = (ops.variance_rate() * dt).sqrt();
            for dw in [step, -step] {
                let next = ops.diffusive(&rho, dt, drift + dw, Scheme::Kraus);
                out.push((0.5, matrix_to_bloch(&next)?));
            }
        }
        ObservationMode::Counting => {
            let p = ops.intensity(&rho) * dt;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Probability(p));
            }
            if p > 0.0 {
                out.push((p, matrix_to_bloch(&ops.jump(&rho)?)?));
            }
            if p < 1.0 {
                let next = ops.no_jump(&rho, dt, Scheme::Kraus);
                out.push((1.0 - p, matrix_to_bloch(&next)?));
            }
        }
    }
    Ok(out)
}

/// Successors of one filter step from `theta` under control `u`, with their
/// probabilities.
///
/// Diffusive: the innovation takes the values `±|Υ|√dt` with probability ½
/// each, which matches its mean and variance; odd-order terms cancel, so the
/// mean successor agrees with the Lindblad drift to `O(dt²)`. Counting: jump
/// with probability `λ·dt`, otherwise the no-jump update.
pub fn local_transition(
    theta: Bloch,
    u: f64,
    dt: f64,
    model: &SystemModel,
) -> Result<Vec<(f64, Bloch)>> {
    require_qubit(model)?;
    transition_with(&StepOps::new(model, u)?, theta, dt)
}

/// Slots per (node, control): up to two successors with 8 stencil points each.
const SLOTS: usize = 16;

struct TransitionTable {
    controls: usize,
    index: Vec<u32>,
    weight: Vec<f64>,
    running: Vec<f64>,
}

impl TransitionTable {
    fn build(
        model: &SystemModel,
        cost: &CostSpec,
        grid: &StateGrid,
        dt: f64,
        points: &[Bloch],
    ) -> Result<Self> {
        let controls = &model.range.grid;
        let ops: Vec<StepOps> = controls
            .iter()
            .map(|&u| StepOps::new(model, u))
            .collect::<Result<_>>()?;
        let nc = controls.len();
        let rows: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)> = points
            .par_iter()
            .map(|&theta| {
                let rho = bloch_to_matrix(theta);
                let mut idx = vec![0u32; nc * SLOTS];
                let mut wts = vec![0f64; nc * SLOTS];
                let mut run = vec![0f64; nc];
                for (c, (op, &u)) in ops.iter().zip(controls).enumerate() {
                    run[c] = cost.running_rate(&rho, u) * dt;
                    let succ = transition_with(op, theta, dt)?;
                    let mut s = c * SLOTS;
                    for (p, next) in succ {
                        for (i, w) in grid.stencil(next) {
                            idx[s] = i as u32;
                            wts[s] = p * w;
                            s += 1;
                        }
                    }
                }
                Ok((idx, wts, run))
            })
            .collect::<Result<_>>()?;
        let mut table = Self {
            controls: nc,
            index: Vec::with_capacity(points.len() * nc * SLOTS),
            weight: Vec::with_capacity(points.len() * nc * SLOTS),
            running: Vec::with_capacity(points.len() * nc),
        };
        for (i, w, r) in rows {
            table.index.extend(i);
            table.weight.extend(w);
            table.running.extend(r);
        }
        Ok(table)
    }

    #[cfg(test)]
    fn q_values(&self, node: usize, next: &[f64]) -> Vec<f64> {
        (0..self.controls)
            .map(|c| {
                let row = node * self.controls + c;
                let s = row * SLOTS;
                self.running[row]
                    + (s..s + SLOTS)
                        .map(|t| self.weight[t] * next[self.index[t] as usize])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Bellman update at `node`: minimum and lowest-index argmin.
    #[inline]
    fn backup(&self, node: usize, next: &[f64]) -> (f64, u16) {
        let mut best = f64::INFINITY;
        let mut arg = 0u16;
        for c in 0..self.controls {
            let row = node * self.controls + c;
            let s = row * SLOTS;
            let mut q = self.running[row];
            for t in s..s + SLOTS {
                q += self.weight[t] * next[self.index[t] as usize];
            }
            if q < best {
                best = q;
                arg = c as u16;
            }
        }
        (best, arg)
    }
}

/// Values and argmin policy on the lattice.
///
/// `values[s]` is the value at time slice `slices[s]`; a freshly solved
/// function holds every slice `0..=K`, one reloaded from disk only the
/// slices that were written. `policy[k]` is the control index chosen on
/// `[t_k, t_{k+1})` for `k < K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub grid: StateGrid,
    pub t_final: f64,
    pub time_steps: usize,
    pub controls: Vec<f64>,
    pub slices: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<u16>>,
}

impl ValueFunction {
    pub fn dt(&self) -> f64 {
        self.t_final / self.time_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.time_steps)
            .map(|k| k as f64 * self.dt())
            .collect()
    }

    /// Nearest time slice to `t`, clamped to `0..=K`.
    pub fn slice_of(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.time_steps)
    }

    pub fn slice(&self, k: usize) -> Option<&[f64]> {
        self.slices
            .binary_search(&k)
            .ok()
            .map(|s| self.values[s].as_slice())
    }

    fn check_state(&self, theta: Bloch) -> Result<()> {
        if !theta.iter().all(|c| c.is_finite()) || !self.grid.contains(theta) {
            return Err(Error::Bellman(format!(
                "state {theta:?} lies outside the Bloch ball"
            )));
        }
        Ok(())
    }

    /// `V(t_k, θ)` by trilinear interpolation.
    pub fn value_at_slice(&self, k: usize, theta: Bloch) -> Result<f64> {
        self.check_state(theta)?;
        let v = self
            .slice(k)
            .ok_or_else(|| Error::Bellman(format!("time slice {k} is not stored")))?;
        Ok(self.grid.interpolate(v, theta))
    }

    pub fn value_at(&self, t: f64, theta: Bloch) -> Result<f64> {
        self.value_at_slice(self.slice_of(t), theta)
    }

    /// Control at slice `k` (clamped to `K − 1`): the policy is interpolated
    /// trilinearly and snapped to the nearest grid control.
    pub fn control_at_slice(&self, k: usize, theta: Bloch) -> Result<f64> {
        self.check_state(theta)?;
        let row = &self.policy[k.min(self.time_steps - 1)];
        let u: f64 = self
            .grid
            .stencil(theta)
            .iter()
            .map(|&(i, w)| w * self.controls[row[i] as usize])
            .sum();
        Ok(self.controls[nearest(&self.controls, u)])
    }

    pub fn control_at(&self, t: f64, theta: Bloch) -> Result<f64> {
        self.control_at_slice(self.slice_of(t).min(self.time_steps - 1), theta)
    }

    /// Largest admissible `|V|` for the given cost: `T·max‖C(u)‖ + ‖C_T‖`.
    pub fn bound(&self, cost: &CostSpec) -> f64 {
        let run = self
            .controls
            .iter()
            .map(|&u| cost.running(u).inf_norm())
            .fold(0.0, f64::max);
        self.t_final * run + cost.terminal.inf_norm()
    }
}

/// Extreme eigenvalues of `C(u)` over the control grid and of `C_T`.
fn cost_bounds(model: &SystemModel, cost: &CostSpec) -> Result<(f64, f64, f64, f64)> {
    let range = |m: &crate::matcore::ComplexMatrix| -> Result<(f64, f64)> {
        let e = crate::matcore::eig_hermitian(m)?;
        Ok((e.values[0], e.values[e.values.len() - 1]))
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &u in &model.range.grid {
        let (a, b) = range(&cost.running(u))?;
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let (tlo, thi) = range(&cost.terminal)?;
    Ok((lo, hi, tlo, thi))
}

fn nearest(grid: &[f64], u: f64) -> usize {
    let mut best = 0;
    for (i, g) in grid.iter().enumerate() {
        if (g - u).abs() < (grid[best] - u).abs() {
            best = i;
        }
    }
    best
}

/// Solves the backward recursion
/// `V(t_k, θ) = min_u { Tr[θC(u)]·dt + Σ pᵢ V(t_{k+1}, θᵢ') }` from
/// `V(T, θ) = Tr[θ C_T]` with `K` steps of `dt = T/K`.
pub fn solve(
    model: &SystemModel,
    cost: &CostSpec,
    grid: &StateGrid,
    t_final: f64,
    time_steps: usize,
) -> Result<ValueFunction> {
    require_qubit(model)?;
    if time_steps == 0 || !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::Bellman(format!(
            "need T > 0 and at least one time step, got T = {t_final}, K = {time_steps}"
        )));
    }
    if model.range.grid.len() > u16::MAX as usize {
        return Err(Error::Bellman("control grid too large".into()));
    }
    let dt = t_final / time_steps as f64;
    // Lattice points outside the ball get the linear radial extrapolation
    // `2V(θ/r) − V((2 − r)θ/r)` from the sphere and its mirror point, which
    // keeps interpolation near the sphere second-order accurate.
    let mut points: Vec<Bloch> = (0..grid.len()).map(|i| grid.representative(i)).collect();
    let mut mirror = vec![u32::MAX; grid.len()];
    for node in 0..grid.len() {
        let p = grid.point(node);
        let r = norm(p);
        if r > 1.0 {
            mirror[node] = points.len() as u32;
            points.push(p.map(|c| c * (2.0 - r) / r));
        }
    }
    let table = TransitionTable::build(model, cost, grid, dt, &points)?;
    // Extrapolated values are clipped to the a-priori range of the cost-to-go.
    let (run_lo, run_hi, term_lo, term_hi) = cost_bounds(model, cost)?;

    let terminal: Vec<f64> = (0..grid.len())
        .map(|i| cost.terminal_value(&bloch_to_matrix(grid.point(i))))
        .collect();
    let mut values = vec![Vec::new(); time_steps + 1];
    let mut policy = vec![Vec::new(); time_steps];
    values[time_steps] = terminal;
    for k in (0..time_steps).rev() {
        let next = &values[k + 1];
        let (v, p): (Vec<f64>, Vec<u16>) = (0..grid.len())
            .into_par_iter()
            .map(|node| {
                let (v, arg) = table.backup(node, next);
                match mirror[node] {
                    u32::MAX => (v, arg),
                    m => {
                        let left = (time_steps - k) as f64 * dt;
                        let ext = 2.0 * v - table.backup(m as usize, next).0;
                        (
                            ext.clamp(left * run_lo + term_lo, left * run_hi + term_hi),
                            arg,
                        )
                    }
                }
            })
            .unzip();
        if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Bellman(format!(
                "non-finite value at slice {k}, node {:?}",
                grid.point(bad)
            )));
        }
        values[k] = v;
        policy[k] = p;
    }
    Ok(ValueFunction {
        grid: *grid,
        t_final,
        time_steps,
        controls: model.range.grid.clone(),
        slices: (0..=time_steps).collect(),
        values,
        policy,
    })
}

/// The argmin policy as a function of time and filter state.
#[derive(Debug, Clone)]
pub struct SeparatedPolicy {
    vf: Arc<ValueFunction>,
}

impl SeparatedPolicy {
    pub fn control(&self, t: f64, rho: &DensityMatrix) -> Result<f64> {
        self.vf.control_at(t, rho.bloch()?)
    }

    pub fn value_function(&self) -> &ValueFunction {
        &self.vf
    }

    /// Wraps the policy as a separated strategy. States outside the ball
    /// yield `NaN`, which the admissibility check turns into an error.
    pub fn strategy(&self, name: impl Into<String>) -> ControlStrategy {
        let vf = Arc::clone(&self.vf);
        ControlStrategy::separated(name, move |t, rho| {
            rho.bloch()
                .and_then(|b| vf.control_at(t, b))
                .unwrap_or(f64::NAN)
        })
    }
}

pub fn extract_policy(vf: ValueFunction) -> SeparatedPolicy {
    SeparatedPolicy { vf: Arc::new(vf) }
}

/// Discrete HJB expressions at one off-lattice sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HjbEntry {
    pub slice: usize,
    pub theta: Bloch,
    /// `∂V/∂t + 𝓛(u)V + Tr[θC(u)]` at the policy's control.
    pub at_policy: f64,
    /// Minimum of the same expression over the control grid.
    pub min_over_controls: f64,
    pub policy_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbReport {
    pub entries: Vec<HjbEntry>,
    pub min_condition3: f64,
    pub max_abs_condition2: f64,
}

/// Evaluates the discrete HJB expression
/// `(Σ pᵢ V(t_{k+1}, θᵢ') − V(t_k, θ))/dt + Tr[θC(u)]`
/// at each `(k, θ)`, with `k < K`. At lattice nodes the minimum over controls
/// vanishes by construction; off the lattice it measures the interpolation
/// error of the solution.
pub fn hjb_residual(
    vf: &ValueFunction,
    model: &SystemModel,
    cost: &CostSpec,
    samples: &[(usize, Bloch)],
) -> Result<HjbReport> {
    require_qubit(model)?;
    let dt = vf.dt();
    let ops: Vec<StepOps> = vf
        .controls
        .iter()
        .map(|&u| StepOps::new(model, u))
        .collect::<Result<_>>()?;
    let entries: Vec<HjbEntry> = samples
        .par_iter()
        .map(|&(k, theta)| {
            if k >= vf.time_steps {
                return Err(Error::Bellman(format!("sample slice {k} has no successor")));
            }
            let here = vf.value_at_slice(k, theta)?;
            let next = vf
                .slice(k + 1)
                .ok_or_else(|| Error::Bellman(format!("time slice {} is not stored", k + 1)))?;
            let rho = bloch_to_matrix(theta);
            let mut exprs = Vec::with_capacity(ops.len());
            for (op, &u) in ops.iter().zip(&vf.controls) {
                let ev: f64 = transition_with(op, theta, dt)?
                    .into_iter()
                    .map(|(p, s)| p * vf.grid.interpolate(next, s))
                    .sum();
                exprs.push((ev - here) / dt + cost.running_rate(&rho, u));
            }
            let policy_u = vf.control_at_slice(k, theta)?;
            let pi = nearest(&vf.controls, policy_u);
            Ok(HjbEntry {
                slice: k,
                theta,
                at_policy: exprs[pi],
                min_over_controls: exprs.iter().copied().fold(f64::INFINITY, f64::min),
                policy_u,
            })
        })
        .collect::<Result<_>>()?;
    Ok(HjbReport {
        min_condition3: entries
            .iter()
            .map(|e| e.min_over_controls)
            .fold(f64::INFINITY, f64::min),
        max_abs_condition2: entries
            .iter()
            .map(|e| e.at_policy.abs())
            .fold(0.0, f64::max),
        entries,
    })
}

/// `count` samples with uniformly random slice in `0..K` and state uniform in
/// the ball of radius `radius`.
pub fn interior_samples(
    vf: &ValueFunction,
    count: usize,
    radius: f64,
    seed: u64,
) -> Vec<(usize, Bloch)> {
    let mut r = rng::stream(seed, 0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p: Bloch = [0; 3].map(|_| r.random_range(-1.0..1.0) * radius);
        if norm(p) <= radius {
            out.push((r.random_range(0..vf.time_steps), p));
        }
    }
    out
}

/// Rate-scale error estimate for [`hjb_residual`] at states with
/// `|θ| ≤ radius`.
///
/// Trilinear interpolation of a smooth function misses by at most
/// `⅛ Σ_axes h²|∂²V|`, estimated with lattice second differences; dividing by
/// `dt` turns it into an error on the residual. The time part bounds the
/// first-order error of the backward difference, `½ dt |∂²V/∂t²|`.
pub fn residual_tolerance(vf: &ValueFunction, radius: f64) -> Result<f64> {
    let g = &vf.grid;
    let dt = vf.dt();
    let reach = radius + 3f64.sqrt() * g.spacing();
    let n = g.n;
    let interior: Vec<usize> = (0..g.len())
        .filter(|&i| {
            let a = g.axes(i);
            a.iter().all(|&c| c > 0 && c + 1 < n) && norm(g.point(i)) <= reach
        })
        .collect();
    if vf.slices.len() != vf.time_steps + 1 {
        return Err(Error::Bellman(
            "residual tolerance needs every time slice".into(),
        ));
    }
    let strides = [n * n, n, 1];
    let mut space = 0.0f64;
    for v in &vf.values {
        for &i in &interior {
            let c: f64 = strides
                .iter()
                .map(|&s| (v[i + s] - 2.0 * v[i] + v[i - s]).abs())
                .sum();
            space = space.max(c / 8.0);
        }
    }
    let mut time = 0.0f64;
    for k in 1..vf.time_steps {
        for &i in &interior {
            let c = (vf.values[k + 1][i] - 2.0 * vf.values[k][i] + vf.values[k - 1][i]).abs();
            time = time.max(c);
        }
    }
    Ok(space / dt + time / (2.0 * dt))
}

/// Discretization error estimate of `V(0, θ)`: the difference to a solve on
/// the half-resolution lattice with half as many time steps.
pub fn richardson_estimate(
    vf: &ValueFunction,
    model: &SystemModel,
    cost: &CostSpec,
    theta: Bloch,
) -> Result<f64> {
    let n = vf.grid.n;
    if n < 5 || n.is_multiple_of(2) || vf.time_steps < 2 {
        return Err(Error::Bellman(format!(
            "refinement estimate needs odd n ≥ 5 and K ≥ 2, got n = {n}, K = {}",
            vf.time_steps
        )));
    }
    let coarse = StateGrid {
        n: (n - 1) / 2 + 1,
        eps_grid: vf.grid.eps_grid,
    };
    let c = solve(model, cost, &coarse, vf.t_final, vf.time_steps / 2)?;
    Ok((vf.value_at_slice(0, theta)? - c.value_at_slice(0, theta)?).abs())
}

pub const HEADER_FILE: &str = "value_function.json";
pub const VALUES_FILE: &str = "values.csv";
pub const POLICY_FILE: &str = "policy.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    grid_n: usize,
    eps_grid: f64,
    t_final: f64,
    time_steps: usize,
    controls: Vec<f64>,
    value_slices: Vec<usize>,
    times: Vec<f64>,
    values_file: String,
    policy_file: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Writes the header JSON, a values CSV holding every `stride`-th slice plus
/// the last one, and a policy CSV of control indices for every slice.
pub fn write_value_function(
    vf: &ValueFunction,
    dir: &Path,
    stride: usize,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stride = stride.max(1);
    let mut keep: Vec<usize> = vf
        .slices
        .iter()
        .copied()
        .filter(|k| k % stride == 0)
        .collect();
    if let Some(&last) = vf.slices.last() {
        if keep.last() != Some(&last) {
            keep.push(last);
        }
    }
    let header = Header {
        grid_n: vf.grid.n,
        eps_grid: vf.grid.eps_grid,
        t_final: vf.t_final,
        time_steps: vf.time_steps,
        controls: vf.controls.clone(),
        value_slices: keep.clone(),
        times: keep.iter().map(|&k| k as f64 * vf.dt()).collect(),
        values_file: VALUES_FILE.into(),
        policy_file: POLICY_FILE.into(),
        meta,
    };
    fs::write(
        dir.join(HEADER_FILE),
        serde_json::to_string_pretty(&header)? + "\n",
    )?;

    let cols: Vec<&[f64]> = keep
        .iter()
        .map(|&k| vf.slice(k).expect("kept slices exist"))
        .collect();
    let mut w = BufWriter::new(fs::File::create(dir.join(VALUES_FILE))?);
    write!(w, "node,x,y,z")?;
    for k in &keep {
        write!(w, ",v{k}")?;
    }
    writeln!(w)?;
    for node in 0..vf.grid.len() {
        let [x, y, z] = vf.grid.point(node);
        write!(w, "{node},{x},{y},{z}")?;
        for c in &cols {
            write!(w, ",{}", c[node])?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(POLICY_FILE))?);
    write!(w, "node")?;
    for k in 0..vf.time_steps {
        write!(w, ",p{k}")?;
    }
    writeln!(w)?;
    for node in 0..vf.grid.len() {
        write!(w, "{node}")?;
        for row in &vf.policy {
            write!(w, ",{}", row[node])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_row<T: std::str::FromStr>(
    line: &str,
    skip: usize,
    expect: usize,
    what: &str,
) -> Result<Vec<T>> {
    let out: Vec<T> = line
        .split(',')
        .skip(skip)
        .map(|f| {
            f.parse::<T>()
                .map_err(|_| Error::Bellman(format!("bad {what} entry {f:?}")))
        })
        .collect::<Result<_>>()?;
    if out.len() != expect {
        return Err(Error::Bellman(format!(
            "{what} row has {} fields, expected {expect}",
            out.len()
        )));
    }
    Ok(out)
}

/// Reloads a value function written by [`write_value_function`].
pub fn read_value_function(dir: &Path) -> Result<ValueFunction> {
    let header: Header = serde_json::from_str(&fs::read_to_string(dir.join(HEADER_FILE))?)?;
    let grid = StateGrid {
        n: header.grid_n,
        eps_grid: header.eps_grid,
    };
    StateGrid::new(grid.n)?;
    let len = grid.len();
    let ns = header.value_slices.len();

    let mut values = vec![vec![0.0; len]; ns];
    let mut lines = BufReader::new(fs::File::open(dir.join(&header.values_file))?).lines();
    lines.next().transpose()?;
    for node in 0..len {
        let line = lines
            .next()
            .ok_or_else(|| Error::Bellman("values table is truncated".into()))??;
        let row: Vec<f64> = parse_row(&line, 4, ns, "value")?;
        for (s, v) in row.into_iter().enumerate() {
            values[s][node] = v;
        }
    }

    let k = header.time_steps;
    let mut policy = vec![vec![0u16; len]; k];
    let mut lines = BufReader::new(fs::File::open(dir.join(&header.policy_file))?).lines();
    lines.next().transpose()?;
    for node in 0..len {
        let line = lines
            .next()
            .ok_or_else(|| Error::Bellman("policy table is truncated".into()))??;
        let row: Vec<u16> = parse_row(&line, 1, k, "policy")?;
        for (s, p) in row.into_iter().enumerate() {
            if p as usize >= header.controls.len() {
                return Err(Error::Bellman(format!("policy index {p} out of range")));
            }
            policy[s][node] = p;
        }
    }
    Ok(ValueFunction {
        grid,
        t_final: header.t_final,
        time_steps: k,
        controls: header.controls,
        slices: header.value_slices,
        values,
        policy,
    })
}
