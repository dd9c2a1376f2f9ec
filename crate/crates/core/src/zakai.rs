//! Unnormalized (linear) filter and the normalization cross-check.
//!
//! Diffusive: `dτ = 𝓛τ dt + (Kτ + τK*) dY` with `K = Υ⁻¹L`.
//! Counting: `dτ = 𝓛τ dt + (BτB* − τ)(dỸ − Ξ⁻² dt)` with `B = Υ + ΞL`.
//!
//! Normalizing `τ` must reproduce the nonlinear filter driven by the same
//! record; [`ks_check`] measures how far apart the two discretizations end up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::generator;
use crate::matcore::{ComplexMatrix, DensityMatrix};
use crate::model::{ControlStrategy, ObservationMode, SystemModel};
use crate::sme::{generate_trajectory, Scheme, StepOps, TrajectoryParams, TrajectoryRecord};

/// Rescale `τ` once `|ln Tr τ|` exceeds this.
const RESCALE_LOG_THRESHOLD: f64 = 50.0;

/// Integration scheme for the linear filter. Both are linear in `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearScheme {
    #[default]
    Euler,
    /// Adds `½𝒢(𝒢τ)(dY² − |Υ|²dt)` with `𝒢τ = Kτ + τK*` (diffusive only).
    Milstein,
}

/// `σ(X) = e^{log_scale}·Tr[Xτ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnnormalizedState {
    pub tau: ComplexMatrix,
    pub log_scale: f64,
}

impl UnnormalizedState {
    pub fn new(tau: ComplexMatrix) -> Result<Self> {
        let s = Self {
            tau,
            log_scale: 0.0,
        };
        s.check()?;
        Ok(s)
    }

    pub fn from_density(rho: &DensityMatrix) -> Self {
        Self {
            tau: rho.matrix().clone(),
            log_scale: 0.0,
        }
    }

    pub fn trace(&self) -> f64 {
        self.tau.trace().re
    }

    /// `ln σ(I)`.
    pub fn log_norm(&self) -> f64 {
        self.log_scale + self.trace().ln()
    }

    /// `τ / Tr τ`.
    pub fn normalized(&self) -> DensityMatrix {
        DensityMatrix::normalized(&self.tau)
    }

    /// Hermitian within 1e-10 (relative to `Tr τ`), `Tr τ > 0`, eigenvalues ≥ −1e-9·Tr τ.
    pub fn check(&self) -> Result<()> {
        let tr = self.trace();
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::InvalidState(format!("Tr τ = {tr}")));
        }
        let dev = self.tau.hermitian_deviation();
        if dev > 1e-10 * tr.max(1.0) {
            return Err(Error::InvalidState(format!(
                "τ hermitian deviation {dev:e}"
            )));
        }
        let min = self.tau.eig_hermitian(1e-8 * tr.max(1.0))?.values[0];
        if min < -1e-9 * tr {
            return Err(Error::InvalidState(format!("τ eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// Divides `τ` by its trace when the trace drifts far from 1.
    pub fn rescale_if_needed(&mut self) {
        let tr = self.trace();
        if tr > 0.0 && tr.ln().abs() > RESCALE_LOG_THRESHOLD {
            self.tau = self.tau.scale_re(1.0 / tr);
            self.log_scale += tr.ln();
        }
    }
}

fn linear_diffusive(
    ops: &StepOps,
    tau: &ComplexMatrix,
    dt: f64,
    dy: f64,
    scheme: LinearScheme,
) -> ComplexMatrix {
    let g = |x: &ComplexMatrix| {
        let kx = &ops.k * x;
        let xk = x * &ops.k.adjoint();
        &kx + &xk
    };
    let mut out = tau.clone();
    out += &generator(&ops.h, &ops.l, tau).scale_re(dt);
    let gt = g(tau);
    out.add_scaled(dy.into(), &gt);
    if scheme == LinearScheme::Milstein {
        let ggt = g(&gt);
        out.add_scaled((0.5 * (dy * dy - ops.variance_rate() * dt)).into(), &ggt);
    }
    out
}

fn linear_jump(ops: &StepOps, tau: &ComplexMatrix, dt: f64, jumped: bool) -> ComplexMatrix {
    let mut out = tau.clone();
    out += &generator(&ops.h, &ops.l, tau).scale_re(dt);
    let kernel = &ops.k.sandwich(tau) - tau;
    let d = if jumped { 1.0 } else { 0.0 };
    out.add_scaled((d - dt / (ops.xi * ops.xi)).into(), &kernel);
    out
}

/// One linear diffusive step along the observed increment `dy`.
pub fn step_linear_diffusive(
    model: &SystemModel,
    state: &UnnormalizedState,
    u: f64,
    dt: f64,
    dy: f64,
    scheme: LinearScheme,
) -> Result<UnnormalizedState> {
    if model.mode != ObservationMode::Diffusive {
        return Err(Error::ModeMismatch {
            expected: "diffusive",
        });
    }
    let ops = StepOps::new(model, u)?;
    Ok(UnnormalizedState {
        tau: linear_diffusive(&ops, &state.tau, dt, dy, scheme),
        log_scale: state.log_scale,
    })
}

/// One linear counting step given the jump indicator.
pub fn step_linear_jump(
    model: &SystemModel,
    state: &UnnormalizedState,
    u: f64,
    dt: f64,
    jumped: bool,
) -> Result<UnnormalizedState> {
    if model.mode != ObservationMode::Counting {
        return Err(Error::ModeMismatch {
            expected: "counting",
        });
    }
    let ops = StepOps::new(model, u)?;
    Ok(UnnormalizedState {
        tau: linear_jump(&ops, &state.tau, dt, jumped),
        log_scale: state.log_scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    /// `max_t ‖τ_t/Tr τ_t − ρ_t‖_max`.
    pub discrepancy: f64,
    /// Smallest `Tr τ_t` seen (before any rescaling of that step).
    pub min_trace: f64,
    /// `ln σ_T(I)`.
    pub final_log_norm: f64,
}

/// Integrates the linear filter along the record's observations and controls
/// and compares its normalization with the recorded states.
pub fn ks_check(
    record: &TrajectoryRecord,
    model: &SystemModel,
    scheme: LinearScheme,
) -> Result<KsReport> {
    if record.mode != model.mode {
        return Err(Error::ModeMismatch {
            expected: match model.mode {
                ObservationMode::Diffusive => "diffusive",
                ObservationMode::Counting => "counting",
            },
        });
    }
    let mut state = UnnormalizedState::from_density(&record.rho[0]);
    let mut cache: Option<StepOps> = None;
    let mut disc: f64 = 0.0;
    let mut min_trace = state.trace();
    for k in 0..record.steps() {
        let u = record.u[k];
        if cache.as_ref().is_none_or(|o| o.u.to_bits() != u.to_bits()) {
            cache = Some(StepOps::new(model, u)?);
        }
        let ops = cache.as_ref().expect("filled above");
        state.tau = match model.mode {
            ObservationMode::Diffusive => {
                linear_diffusive(ops, &state.tau, record.dt, record.dy[k], scheme)
            }
            ObservationMode::Counting => {
                linear_jump(ops, &state.tau, record.dt, record.dy[k] == 1.0)
            }
        };
        let tr = state.trace();
        min_trace = min_trace.min(tr);
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::InvalidState(format!("Tr τ = {tr} at step {k}")));
        }
        let d = (&state.tau.scale_re(1.0 / tr) - record.rho[k + 1].matrix()).max_abs();
        disc = disc.max(d);
        state.rescale_if_needed();
    }
    Ok(KsReport {
        discrepancy: disc,
        min_trace,
        final_log_norm: state.log_norm(),
    })
}

/// Linear scheme matched to the nonlinear one: the second-order Kraus step
/// pairs with Milstein in diffusive mode.
pub fn matched_scheme(mode: ObservationMode, scheme: Scheme) -> LinearScheme {
    match (mode, scheme) {
        (ObservationMode::Diffusive, Scheme::Kraus) => LinearScheme::Milstein,
        _ => LinearScheme::Euler,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsRefinement {
    pub dts: Vec<f64>,
    /// `per_seed[s][i]`: discrepancy for seed `s` at `dts[i]`.
    pub per_seed: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    /// Least-squares slope of `ln median` against `ln dt`.
    pub order: f64,
    pub min_trace: f64,
}

/// Runs [`ks_check`] on `n_seeds` trajectories at each `dt`.
///
/// In diffusive mode every run sums normals generated on the grid `fine_dt`,
/// so all step sizes see the same Brownian path for a given seed. Counting
/// runs draw independent jump records per step size.
#[allow(clippy::too_many_arguments)]
pub fn ks_refinement(
    model: &SystemModel,
    strategy: &ControlStrategy,
    t_final: f64,
    dts: &[f64],
    fine_dt: f64,
    scheme: Scheme,
    seed: u64,
    n_seeds: usize,
) -> Result<KsRefinement> {
    if dts.len() < 2 || n_seeds == 0 {
        return Err(Error::TimeGrid(
            "need at least two step sizes and one seed".into(),
        ));
    }
    let lin = matched_scheme(model.mode, scheme);
    let mut refine = Vec::with_capacity(dts.len());
    for &dt in dts {
        let m = (dt / fine_dt).round();
        if m < 1.0 || (m * fine_dt - dt).abs() > 1e-9 * dt {
            return Err(Error::TimeGrid(format!(
                "dt = {dt} is not a multiple of {fine_dt}"
            )));
        }
        refine.push(m as usize);
    }
    use rayon::prelude::*;
    let per_seed: Vec<Vec<(f64, f64)>> = (0..n_seeds)
        .into_par_iter()
        .map(|s| {
            dts.iter()
                .zip(&refine)
                .map(|(&dt, &m)| {
                    let p = TrajectoryParams::new(t_final, dt, scheme).with_noise_refine(m);
                    let rec = generate_trajectory(model, strategy, &p, seed, s as u64)?;
                    let r = ks_check(&rec, model, lin)?;
                    Ok((r.discrepancy, r.min_trace))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let min_trace = per_seed
        .iter()
        .flatten()
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min);
    let per_seed: Vec<Vec<f64>> = per_seed
        .into_iter()
        .map(|v| v.into_iter().map(|p| p.0).collect())
        .collect();
    let median: Vec<f64> = (0..dts.len())
        .map(|i| median(per_seed.iter().map(|v| v[i]).collect()))
        .collect();
    let order = fit_slope(
        &dts.iter().map(|d| d.ln()).collect::<Vec<_>>(),
        &median.iter().map(|m| m.ln()).collect::<Vec<_>>(),
    );
    Ok(KsRefinement {
        dts: dts.to_vec(),
        per_seed,
        median,
        order,
        min_trace,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of an empty list");
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::pauli;
    use crate::model::{builtin_model, params};
    use proptest::prelude::*;

    fn close(a: &ComplexMatrix, b: &ComplexMatrix, tol: f64) -> bool {
        (a - b).max_abs() <= tol
    }

    fn homodyne() -> SystemModel {
        builtin_model("decay_homodyne", &params([("u_max", 5.0)])).unwrap()
    }

    fn counting(eps: f64) -> SystemModel {
        builtin_model("decay_counting", &params([("epsilon0", eps)])).unwrap()
    }

    #[test]
    fn frozen_linear_steps() {
        let f = SystemModel::frozen(ObservationMode::Diffusive);
        let s = UnnormalizedState::new(
            DensityMatrix::from_bloch([0.1, 0.2, 0.3])
                .unwrap()
                .into_matrix(),
        )
        .unwrap();
        let n = step_linear_diffusive(&f, &s, 0.0, 1e-3, 0.0, LinearScheme::Euler).unwrap();
        assert_eq!(n, s);

        let f = SystemModel::frozen(ObservationMode::Counting);
        for jumped in [false, true] {
            let n = step_linear_jump(&f, &s, 0.0, 1e-3, jumped).unwrap();
            assert!(close(&n.tau, &s.tau, 1e-16));
        }
    }

    #[test]
    fn decay_without_observation() {
        let m = homodyne();
        let tau = DensityMatrix::from_bloch([0.2, -0.1, 0.4])
            .unwrap()
            .into_matrix();
        let s = UnnormalizedState::new(tau.clone()).unwrap();
        let dt = 1e-3;
        let n = step_linear_diffusive(&m, &s, 0.0, dt, 0.0, LinearScheme::Euler).unwrap();
        let sm = pauli::sigma_minus();
        let sp = pauli::sigma_plus();
        let mut want = tau.clone();
        want += &(&(&(&sm * &tau) * &sp) - &(&(&sp * &sm) * &tau).scale_re(0.5)).scale_re(dt);
        want.add_scaled((-0.5 * dt).into(), &(&tau * &(&sp * &sm)));
        assert!(close(&n.tau, &want, 1e-15));
    }

    #[test]
    fn jump_kernel_on_excited_state() {
        let m = counting(0.0);
        let s =
            UnnormalizedState::from_density(&DensityMatrix::from_bloch([0.0, 0.0, 1.0]).unwrap());
        let n = step_linear_jump(&m, &s, 0.0, 1e-3, true).unwrap();
        assert!(close(&n.tau, &pauli::ground_projector(), 1e-15));
    }

    #[test]
    fn mode_mismatch() {
        let s = UnnormalizedState::from_density(&DensityMatrix::maximally_mixed(2));
        assert!(matches!(
            step_linear_jump(&homodyne(), &s, 0.0, 1e-3, true),
            Err(Error::ModeMismatch { .. })
        ));
        let p = TrajectoryParams::new(0.01, 1e-3, Scheme::Kraus);
        let r =
            generate_trajectory(&homodyne(), &ControlStrategy::constant(0.0), &p, 0, 0).unwrap();
        assert!(ks_check(&r, &counting(0.0), LinearScheme::Euler).is_err());
    }

    #[test]
    fn frozen_ks_is_exact() {
        for mode in [ObservationMode::Diffusive, ObservationMode::Counting] {
            let f = SystemModel::frozen(mode);
            let p = TrajectoryParams::new(0.2, 1e-3, Scheme::Kraus);
            let r = generate_trajectory(&f, &ControlStrategy::constant(0.0), &p, 1, 0).unwrap();
            for lin in [LinearScheme::Euler, LinearScheme::Milstein] {
                let rep = ks_check(&r, &f, lin).unwrap();
                assert_eq!(rep.discrepancy, 0.0, "{mode}");
            }
        }
    }

    /// With an Itô-consistent increment `dY = ±√dt` the normalized linear step
    /// and the nonlinear step differ by O(dt^{3/2}) pathwise; the odd terms
    /// cancel between the two signs, leaving O(dt²) on average.
    #[test]
    fn one_step_normalization_matches_nonlinear_step() {
        let m = homodyne();
        let rho = DensityMatrix::from_bloch([0.3, 0.1, 0.2]).unwrap();
        let diff = |dt: f64, dy: f64| {
            let nl = crate::sme::update_diffusive(&m, &rho, 1.0, dt, dy, Scheme::Euler).unwrap();
            let lin = step_linear_diffusive(
                &m,
                &UnnormalizedState::from_density(&rho),
                1.0,
                dt,
                dy,
                LinearScheme::Euler,
            )
            .unwrap()
            .normalized();
            nl.matrix() - lin.matrix()
        };
        let pathwise = |dt: f64| diff(dt, dt.sqrt()).max_abs();
        let mean = |dt: f64| (&diff(dt, dt.sqrt()) + &diff(dt, -dt.sqrt())).max_abs() / 2.0;
        assert!(pathwise(2e-3) / pathwise(1e-3) > 2.5);
        assert!(mean(2e-3) / mean(1e-3) > 3.5);
    }

    #[test]
    fn rescaling_keeps_log_norm() {
        let mut s = UnnormalizedState {
            tau: ComplexMatrix::identity(2).scale_re(1e30),
            log_scale: 1.0,
        };
        let before = s.log_norm();
        s.rescale_if_needed();
        assert!((s.trace() - 1.0).abs() < 1e-15);
        assert!((s.log_norm() - before).abs() < 1e-12);
    }

    #[test]
    fn median_and_slope() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        let x = [1.0f64, 2.0, 3.0];
        assert!((fit_slope(&x, &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn diffusive_step_is_linear(
            a in 0.0f64..3.0, b in 0.0f64..3.0,
            x1 in -0.5f64..0.5, z1 in -0.5f64..0.5, x2 in -0.5f64..0.5, y2 in -0.5f64..0.5,
            u in -5.0f64..5.0, dy in -0.2f64..0.2, milstein in proptest::bool::ANY,
        ) {
            let m = homodyne();
            let lin = if milstein { LinearScheme::Milstein } else { LinearScheme::Euler };
            let t1 = DensityMatrix::from_bloch([x1, 0.0, z1]).unwrap().into_matrix();
            let t2 = DensityMatrix::from_bloch([x2, y2, 0.0]).unwrap().into_matrix();
            let mix = &t1.scale_re(a) + &t2.scale_re(b);
            let step = |t: &ComplexMatrix| {
                step_linear_diffusive(&m, &UnnormalizedState { tau: t.clone(), log_scale: 0.0 }, u, 1e-3, dy, lin)
                    .unwrap()
                    .tau
            };
            let lhs = step(&mix);
            let rhs = &step(&t1).scale_re(a) + &step(&t2).scale_re(b);
            prop_assert!((&lhs - &rhs).max_abs() <= 1e-14 * (1.0 + a + b));
        }

        #[test]
        fn jump_step_is_linear(
            a in 0.0f64..3.0, b in 0.0f64..3.0,
            x1 in -0.5f64..0.5, z1 in -0.5f64..0.5, x2 in -0.5f64..0.5, y2 in -0.5f64..0.5,
            u in -1.0f64..1.0, jumped in proptest::bool::ANY,
        ) {
            let m = counting(0.3);
            let t1 = DensityMatrix::from_bloch([x1, 0.0, z1]).unwrap().into_matrix();
            let t2 = DensityMatrix::from_bloch([x2, y2, 0.0]).unwrap().into_matrix();
            let mix = &t1.scale_re(a) + &t2.scale_re(b);
            let step = |t: &ComplexMatrix| {
                step_linear_jump(&m, &UnnormalizedState { tau: t.clone(), log_scale: 0.0 }, u, 1e-3, jumped)
                    .unwrap()
                    .tau
            };
            let lhs = step(&mix);
            let rhs = &step(&t1).scale_re(a) + &step(&t2).scale_re(b);
            prop_assert!((&lhs - &rhs).max_abs() <= 1e-14 * (1.0 + a + b));
        }
    }
}
