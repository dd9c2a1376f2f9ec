//! Repeated-interaction oracle.
//!
//! Each step couples the system to a fresh two-level ancilla in `|0⟩` through
//! `U = exp(−iH⊗I·dt + √dt(L⊗a⁺ − L*⊗a⁻))·(I⊗|0⟩⟨0| + S⊗|1⟩⟨1|)`, then measures
//! the ancilla and conditions the system by Bayes' rule. The conditional
//! states are computed without reference to any filtering equation.
//!
//! * quadrature: basis `(|0⟩ ± Υ̂|1⟩)/√2`, `Υ̂ = Υ/|Υ|`; outcome `±` is recorded as
//!   `dY = ±|Υ|√dt`.
//! * number: the ancilla is displaced by `exp(√dt(βa⁺ − β̄a⁻))`, `β = Υ/Ξ`, and
//!   read in `{|0⟩, |1⟩}`; a click is recorded as `dY = 1`.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{ComplexMatrix, DensityMatrix, C64, I, ONE, ZERO};
use crate::model::{ControlStrategy, ObservationMode, SystemModel};
use crate::rng;
use crate::sme::{filter_record, grid_steps, Scheme, TrajectoryRecord};
use crate::zakai::median;

pub const COMPLETENESS_TOL: f64 = 1e-9;
const EXPM_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measurement {
    Quadrature,
    Number,
}

impl Measurement {
    pub fn for_mode(mode: ObservationMode) -> Self {
        match mode {
            ObservationMode::Diffusive => Self::Quadrature,
            ObservationMode::Counting => Self::Number,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub label: &'static str,
    /// Recorded observation increment.
    pub dy: f64,
    pub kraus: ComplexMatrix,
}

/// Measurement operators of one step.
#[derive(Debug, Clone)]
pub struct StepKraus {
    pub outcomes: Vec<Outcome>,
}

impl StepKraus {
    /// `‖Σ M*M − I‖_max`.
    pub fn completeness_defect(&self) -> f64 {
        let dim = self.outcomes[0].kraus.dim();
        let mut sum = ComplexMatrix::zeros(dim);
        for o in &self.outcomes {
            sum += &(&o.kraus.adjoint() * &o.kraus);
        }
        (&sum - &ComplexMatrix::identity(dim)).max_abs()
    }

    pub fn probabilities(&self, rho: &ComplexMatrix) -> Vec<f64> {
        self.outcomes
            .iter()
            .map(|o| o.kraus.sandwich(rho).trace().re.max(0.0))
            .collect()
    }

    /// Outcome index for a uniform variate `r`.
    pub fn sample(&self, rho: &ComplexMatrix, r: f64) -> usize {
        let p = self.probabilities(rho);
        let total: f64 = p.iter().sum();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi / total;
            if r < acc {
                return i;
            }
        }
        p.len() - 1
    }
}

/// `a⁺ = |1⟩⟨0|` on the ancilla.
fn raising() -> ComplexMatrix {
    ComplexMatrix::from_entries(&[ZERO, ZERO, ONE, ZERO]).expect("2x2")
}

/// Rows `anc_out` and columns `anc_in` of a system ⊗ ancilla operator.
fn ancilla_block(u: &ComplexMatrix, dim: usize, anc_out: usize, anc_in: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(dim, |i, j| u[(i * 2 + anc_out, j * 2 + anc_in)])
}

pub fn build_step(
    model: &SystemModel,
    u: f64,
    dt: f64,
    measurement: Measurement,
) -> Result<StepKraus> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::TimeGrid(format!("dt = {dt}")));
    }
    let c = model.coeffs.at(u);
    let d = model.dim;
    let ap = raising();
    let am = ap.adjoint();
    let i2 = ComplexMatrix::identity(2);
    let sq = dt.sqrt();

    let mut gen = c.h.kron(&i2).scale(-I * dt);
    gen += &c.l.kron(&ap).scale_re(sq);
    gen.add_scaled((-sq).into(), &c.l.adjoint().kron(&am));
    let mut unitary = gen.expm(EXPM_TOL)?;

    let p0 = ComplexMatrix::diag(&[ONE, ZERO]);
    let p1 = ComplexMatrix::diag(&[ZERO, ONE]);
    let gauge = &ComplexMatrix::identity(d).kron(&p0) + &c.s.kron(&p1);
    unitary = &unitary * &gauge;

    let outcomes = match measurement {
        Measurement::Quadrature => {
            let a = c.upsilon.norm();
            if a < model.thresholds.upsilon_min {
                return Err(Error::UpsilonTooSmall(a));
            }
            let phase = (c.upsilon / a).conj();
            let m0 = ancilla_block(&unitary, d, 0, 0);
            let m1 = ancilla_block(&unitary, d, 1, 0);
            let plus = (&m0 + &m1.scale(phase)).scale_re(FRAC_1_SQRT_2);
            let minus = (&m0 - &m1.scale(phase)).scale_re(FRAC_1_SQRT_2);
            vec![
                Outcome {
                    label: "+",
                    dy: a * sq,
                    kraus: plus,
                },
                Outcome {
                    label: "-",
                    dy: -a * sq,
                    kraus: minus,
                },
            ]
        }
        Measurement::Number => {
            if c.xi.abs() < model.thresholds.xi_min {
                return Err(Error::XiTooSmall(c.xi.abs()));
            }
            let beta = c.upsilon / c.xi;
            if beta != ZERO {
                let disp = (&ap.scale(beta * sq) - &am.scale(beta.conj() * sq)).expm(EXPM_TOL)?;
                unitary = &ComplexMatrix::identity(d).kron(&disp) * &unitary;
            }
            vec![
                Outcome {
                    label: "no-click",
                    dy: 0.0,
                    kraus: ancilla_block(&unitary, d, 0, 0),
                },
                Outcome {
                    label: "click",
                    dy: 1.0,
                    kraus: ancilla_block(&unitary, d, 1, 0),
                },
            ]
        }
    };
    let step = StepKraus { outcomes };
    let defect = step.completeness_defect();
    if defect > COMPLETENESS_TOL {
        return Err(Error::Completeness(defect));
    }
    Ok(step)
}

/// Samples one oracle realization. The strategy sees the oracle's own
/// conditional state and recorded increments.
pub fn oracle_trajectory(
    model: &SystemModel,
    strategy: &ControlStrategy,
    t_final: f64,
    dt: f64,
    seed: u64,
    index: u64,
) -> Result<TrajectoryRecord> {
    let n = grid_steps(t_final, dt)?;
    let measurement = Measurement::for_mode(model.mode);
    let mut rng = rng::stream(seed, index);
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
    let mut cached: Option<(u64, StepKraus)> = None;
    for k in 0..n {
        let rho = rec.rho[k].matrix().clone();
        let u = model
            .range
            .check(strategy.control(rec.times[k], &rec.dy, &rec.rho[k]))?;
        if cached.as_ref().is_none_or(|(b, _)| *b != u.to_bits()) {
            cached = Some((u.to_bits(), build_step(model, u, dt, measurement)?));
        }
        let step = &cached.as_ref().expect("filled above").1;
        let idx = step.sample(&rho, rng::uniform(&mut rng));
        let o = &step.outcomes[idx];
        let post = DensityMatrix::normalized(&o.kraus.sandwich(&rho));

        let c = model.coeffs.at(u);
        let dz = match model.mode {
            ObservationMode::Diffusive => {
                let drift = 2.0 * (c.upsilon.conj() * trace_prod(&c.l, &rho)).re;
                o.dy - drift * dt
            }
            ObservationMode::Counting => {
                let mut b = c.l.scale_re(c.xi);
                for i in 0..model.dim {
                    b[(i, i)] += c.upsilon;
                }
                let lam = b.sandwich(&rho).trace().re / (c.xi * c.xi);
                c.xi * (o.dy - lam * dt)
            }
        };
        rec.u.push(u);
        rec.dy.push(o.dy);
        rec.innovations.push(dz);
        rec.rho.push(post);
    }
    Ok(rec)
}

fn trace_prod(a: &ComplexMatrix, b: &ComplexMatrix) -> C64 {
    (a * b).trace()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub dt: f64,
    pub median: f64,
    pub max: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub measurement: Measurement,
    pub strategy: String,
    pub rows: Vec<OracleRow>,
    /// Median error at the last step size over the median at the first.
    pub ratio: f64,
}

/// Terminal trace distance between the oracle's conditional state and the
/// normalized filter (Euler scheme) fed the oracle's record, per step size.
pub fn compare_with_filter(
    model: &SystemModel,
    strategy: &ControlStrategy,
    t_final: f64,
    dts: &[f64],
    seed: u64,
    n_seeds: usize,
) -> Result<OracleReport> {
    use rayon::prelude::*;
    if dts.is_empty() || n_seeds == 0 {
        return Err(Error::TimeGrid(
            "need at least one step size and one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(dts.len());
    for &dt in dts {
        let per_seed = (0..n_seeds)
            .into_par_iter()
            .map(|s| {
                let rec = oracle_trajectory(model, strategy, t_final, dt, seed, s as u64)?;
                let filt = filter_record(model, &model.rho0, &rec.dy, &rec.u, dt, Scheme::Euler)?;
                Ok(rec
                    .final_state()
                    .trace_distance(filt.last().expect("non-empty")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(OracleRow {
            dt,
            median: median(per_seed.clone()),
            max: per_seed.iter().copied().fold(0.0, f64::max),
            per_seed,
        });
    }
    let ratio = rows.last().expect("non-empty").median / rows[0].median;
    Ok(OracleReport {
        measurement: Measurement::for_mode(model.mode),
        strategy: strategy.name.clone(),
        rows,
        ratio,
    })
}
