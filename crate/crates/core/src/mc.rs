//! Monte Carlo cost evaluation and strategy comparison.
//!
//! The running cost uses the left-endpoint rule `Σ Tr[ρ_k C(u_k)]·dt`, the same
//! quadrature as the dynamic-programming backup. Trajectory `i` of every
//! strategy draws from the same random stream, so diffusive runs share their
//! innovation increments and counting runs share the per-step uniforms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bellman::{Bloch, StateGrid, ValueFunction};
use crate::error::{Error, Result};
use crate::model::{ControlStrategy, CostSpec, SystemModel};
use crate::sme::{ensemble_map, TrajectoryParams, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    #[serde(skip)]
    pub costs: Vec<f64>,
}

impl CostEstimate {
    pub fn from_costs(costs: Vec<f64>) -> Result<Self> {
        let n = costs.len();
        if n < 2 {
            return Err(Error::EmptyEnsemble);
        }
        let mean = costs.iter().sum::<f64>() / n as f64;
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
            costs,
        })
    }
}

/// `Σ_{k ≥ t_index} Tr[ρ_k C(u_k)]·dt + Tr[ρ_T C_T]`.
pub fn cost_to_go(rec: &TrajectoryRecord, cost: &CostSpec, t_index: usize) -> Result<f64> {
    let n = rec.steps();
    if t_index > n {
        return Err(Error::IndexOutOfRange {
            index: t_index,
            len: n + 1,
        });
    }
    let running: f64 = (t_index..n)
        .map(|k| cost.running_rate(rec.rho[k].matrix(), rec.u[k]))
        .sum();
    Ok(running * rec.dt + cost.terminal_value(rec.rho[n].matrix()))
}

/// Total cost of one trajectory.
pub fn trajectory_cost(rec: &TrajectoryRecord, cost: &CostSpec) -> Result<f64> {
    cost_to_go(rec, cost, 0)
}

pub fn evaluate_cost(
    model: &SystemModel,
    strategy: &ControlStrategy,
    cost: &CostSpec,
    params: &TrajectoryParams,
    n: usize,
    seed: u64,
) -> Result<CostEstimate> {
    let costs = ensemble_map(model, strategy, params, seed, n, |_, rec| {
        trajectory_cost(&rec, cost)
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    CostEstimate::from_costs(costs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub name: String,
    pub rank: usize,
    #[serde(flatten)]
    pub estimate: CostEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDifference {
    pub a: String,
    pub b: String,
    /// `mean(a) − mean(b)`.
    pub difference: f64,
    /// `√(se_a² + se_b²)`.
    pub pooled_stderr: f64,
    /// Standard error of the per-trajectory differences, which exploits the
    /// common random numbers.
    pub paired_stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Whether the `mean ± 2·stderr` intervals of `a` and `b` intersect.
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n: usize,
    pub seed: u64,
    /// In panel order.
    pub strategies: Vec<StrategyResult>,
    /// Names from lowest to highest mean cost.
    pub ranking: Vec<String>,
    pub pairwise: Vec<PairwiseDifference>,
}

impl ComparisonReport {
    pub fn get(&self, name: &str) -> Option<&StrategyResult> {
        self.strategies.iter().find(|s| s.name == name)
    }

    /// For every other strategy, `mean(other) − mean(best) − 2·pooled_stderr`.
    /// All margins are non-negative when `best` beats the panel.
    pub fn margins(&self, best: &str) -> Result<Vec<(String, f64)>> {
        let b = self
            .get(best)
            .ok_or_else(|| Error::Config(format!("no strategy named {best:?} in the panel")))?;
        Ok(self
            .strategies
            .iter()
            .filter(|s| s.name != best)
            .map(|s| {
                let pooled = (b.estimate.stderr.powi(2) + s.estimate.stderr.powi(2)).sqrt();
                (
                    s.name.clone(),
                    s.estimate.mean - b.estimate.mean - 2.0 * pooled,
                )
            })
            .collect())
    }

    /// One row per trajectory, one column per strategy.
    pub fn write_costs_csv(&self, mut w: impl Write) -> Result<()> {
        let names: Vec<&str> = self.strategies.iter().map(|s| s.name.as_str()).collect();
        writeln!(w, "trajectory,{}", names.join(","))?;
        for i in 0..self.n {
            write!(w, "{i}")?;
            for s in &self.strategies {
                write!(w, ",{}", s.estimate.costs[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Evaluates each strategy on trajectories `0..n` of the same seed.
pub fn compare_strategies(
    model: &SystemModel,
    cost: &CostSpec,
    strategies: &[ControlStrategy],
    params: &TrajectoryParams,
    n: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    if strategies.is_empty() {
        return Err(Error::Config("empty strategy panel".into()));
    }
    let mut names: Vec<&str> = strategies.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("strategy names must be unique".into()));
    }
    let mut results = Vec::with_capacity(strategies.len());
    for s in strategies {
        results.push(StrategyResult {
            name: s.name.clone(),
            rank: 0,
            estimate: evaluate_cost(model, s, cost, params, n, seed)?,
        });
    }
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[a]
            .estimate
            .mean
            .total_cmp(&results[b].estimate.mean)
            .then(a.cmp(&b))
    });
    for (r, &i) in order.iter().enumerate() {
        results[i].rank = r + 1;
    }
    let mut pairwise = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let (a, b) = (&results[i].estimate, &results[j].estimate);
            let diffs: Vec<f64> = a.costs.iter().zip(&b.costs).map(|(x, y)| x - y).collect();
            let paired = CostEstimate::from_costs(diffs)?;
            let pooled = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
            let d = a.mean - b.mean;
            pairwise.push(PairwiseDifference {
                a: results[i].name.clone(),
                b: results[j].name.clone(),
                difference: d,
                pooled_stderr: pooled,
                paired_stderr: paired.stderr,
                ci_low: d - 2.0 * pooled,
                ci_high: d + 2.0 * pooled,
                overlap: (a.mean - b.mean).abs() <= 2.0 * (a.stderr + b.stderr),
            });
        }
    }
    Ok(ComparisonReport {
        n,
        seed,
        ranking: order.iter().map(|&i| results[i].name.clone()).collect(),
        strategies: results,
        pairwise,
    })
}

/// Radius of the Bloch-ball neighbourhood used by the conditional check.
pub const PROBE_RADIUS: f64 = 0.15;
/// Fractions of the horizon at which the conditional check is probed.
pub const PROBE_FRACTIONS: [f64; 5] = [0.05, 0.1, 0.2, 0.35, 0.5];
const MIN_PROBE_MEMBERS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub t: f64,
    pub node: Bloch,
    pub members: usize,
    /// Mean cost-to-go of trajectories whose state at `t` is within
    /// [`PROBE_RADIUS`] of `node`.
    pub mean_cost_to_go: f64,
    pub stderr: f64,
    /// Mean of `V(t, ρ_t)` over the same trajectories.
    pub mean_value: f64,
    pub value_at_node: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueConsistency {
    pub value_at_start: f64,
    pub estimate: CostEstimate,
    pub eps_disc: f64,
    /// `|mean J − V(0, ρ0)|`.
    pub gap: f64,
    pub pass_total: bool,
    pub probes: Vec<ProbeResult>,
    pub pass_conditional: bool,
}

struct PathSummary {
    cost: f64,
    states: Vec<Bloch>,
    to_go: Vec<f64>,
}

/// Checks `V(0, ρ0) = E[J]` under the strategy extracted from `vf`, and
/// `E[cost-to-go | ρ_t] = V(t, ρ_t)` on five neighbourhoods chosen where the
/// ensemble is densest. Both use the tolerance `2·stderr + eps_disc`.
#[allow(clippy::too_many_arguments)]
pub fn value_consistency(
    model: &SystemModel,
    cost: &CostSpec,
    vf: &ValueFunction,
    strategy: &ControlStrategy,
    params: &TrajectoryParams,
    n: usize,
    seed: u64,
    eps_disc: f64,
) -> Result<ValueConsistency> {
    let steps = crate::sme::grid_steps(params.t_final, params.dt)?;
    // Probe at stored value slices, so a value function read back from
    // thinned files works too.
    let mut probe_idx: Vec<usize> = PROBE_FRACTIONS
        .iter()
        .map(|f| {
            let want = f * vf.time_steps as f64;
            let slice = vf
                .slices
                .iter()
                .copied()
                .filter(|&k| k > 0)
                .min_by(|a, b| {
                    (*a as f64 - want)
                        .abs()
                        .total_cmp(&(*b as f64 - want).abs())
                })
                .unwrap_or(0);
            ((slice as f64 * vf.dt() / params.dt).round() as usize).min(steps)
        })
        .collect();
    probe_idx.dedup();
    let paths = ensemble_map(
        model,
        strategy,
        params,
        seed,
        n,
        |_, rec| -> Result<PathSummary> {
            let mut states = Vec::with_capacity(probe_idx.len());
            let mut to_go = Vec::with_capacity(probe_idx.len());
            for &k in &probe_idx {
                states.push(rec.rho[k].bloch()?);
                to_go.push(cost_to_go(&rec, cost, k)?);
            }
            Ok(PathSummary {
                cost: trajectory_cost(&rec, cost)?,
                states,
                to_go,
            })
        },
    )?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let estimate = CostEstimate::from_costs(paths.iter().map(|p| p.cost).collect())?;
    let v0 = vf.value_at(0.0, model.rho0.bloch()?)?;
    let gap = (estimate.mean - v0).abs();
    let pass_total = gap <= 2.0 * estimate.stderr + eps_disc;

    let mut probes = Vec::with_capacity(probe_idx.len());
    for (p, &k) in probe_idx.iter().enumerate() {
        let t = k as f64 * params.dt;
        let pts: Vec<Bloch> = paths.iter().map(|s| s.states[p]).collect();
        let node = densest_node(&vf.grid, &pts);
        let members: Vec<usize> = (0..pts.len())
            .filter(|&i| dist(pts[i], node) <= PROBE_RADIUS)
            .collect();
        if members.len() < MIN_PROBE_MEMBERS {
            return Err(Error::Bellman(format!(
                "only {} trajectories near the probe at t = {t}",
                members.len()
            )));
        }
        let ctg = CostEstimate::from_costs(members.iter().map(|&i| paths[i].to_go[p]).collect())?;
        let mut vsum = 0.0;
        for &i in &members {
            vsum += vf.value_at(t, pts[i])?;
        }
        let mean_value = vsum / members.len() as f64;
        probes.push(ProbeResult {
            t,
            node,
            members: members.len(),
            mean_cost_to_go: ctg.mean,
            stderr: ctg.stderr,
            mean_value,
            value_at_node: vf.value_at(t, node)?,
            pass: (ctg.mean - mean_value).abs() <= 2.0 * ctg.stderr + eps_disc,
        });
    }
    let pass_conditional = probes.iter().all(|p| p.pass);
    Ok(ValueConsistency {
        value_at_start: v0,
        estimate,
        eps_disc,
        gap,
        pass_total,
        probes,
        pass_conditional,
    })
}

fn dist(a: Bloch, b: Bloch) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Lattice node inside the ball whose [`PROBE_RADIUS`] neighbourhood holds the
/// most points; candidates are the nodes nearest to a subsample of the points.
fn densest_node(grid: &StateGrid, pts: &[Bloch]) -> Bloch {
    let h = grid.spacing();
    let snap = |c: f64| (((c + 1.0) / h).round() * h - 1.0).clamp(-1.0, 1.0);
    let stride = (pts.len() / 200).max(1);
    let mut best = ([0.0; 3], 0usize);
    for p in pts.iter().step_by(stride) {
        let mut node = p.map(snap);
        let r = dist(node, [0.0; 3]);
        if r > 1.0 {
            // Step inwards until the node lies in the ball.
            let [i, j, k] = node.map(|c| ((c + 1.0) / h).round() as i64);
            let shrink = |i: i64, c: f64| {
                if c > 0.0 {
                    i - 1
                } else if c < 0.0 {
                    i + 1
                } else {
                    i
                }
            };
            let mut idx = [i, j, k];
            while dist(idx.map(|a| a as f64 * h - 1.0), [0.0; 3]) > 1.0 {
                idx = [
                    shrink(idx[0], node[0]),
                    shrink(idx[1], node[1]),
                    shrink(idx[2], node[2]),
                ];
            }
            node = idx.map(|a| a as f64 * h - 1.0);
        }
        let count = pts
            .iter()
            .filter(|q| dist(**q, node) <= PROBE_RADIUS)
            .count();
        if count > best.1 {
            best = (node, count);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::{extract_policy, solve};
    use crate::matcore::{pauli, ComplexMatrix, DensityMatrix};
    use crate::model::{builtin_model, params, AdmissibleRange, ObservationMode};
    use crate::sme::{generate_trajectory, Scheme};

    fn decay() -> SystemModel {
        builtin_model("decay_homodyne", &params([("gamma", 1.0)])).unwrap()
    }

    #[test]
    fn frozen_cost_is_deterministic() {
        for mode in [ObservationMode::Diffusive, ObservationMode::Counting] {
            let rho0 = DensityMatrix::from_bloch([0.2, 0.1, 0.3]).unwrap();
            let m = SystemModel::frozen(mode).with_rho0(rho0.clone());
            let c0 = ComplexMatrix::from_real_rows(&[[0.6, 0.1], [0.1, 0.3]]).unwrap();
            let ct = ComplexMatrix::from_real_rows(&[[0.2, 0.0], [0.0, 0.9]]).unwrap();
            let cost = CostSpec::new(c0.clone(), 0.0, ct.clone());
            let p = TrajectoryParams::new(0.5, 0.01, Scheme::Kraus);
            let est = evaluate_cost(&m, &ControlStrategy::constant(0.0), &cost, &p, 20, 1).unwrap();
            let want =
                0.5 * cost.running_rate(rho0.matrix(), 0.0) + cost.terminal_value(rho0.matrix());
            assert!((est.mean - want).abs() < 1e-12);
            assert!(est.stderr < 1e-12);
            let rec = generate_trajectory(&m, &ControlStrategy::constant(0.0), &p, 1, 0).unwrap();
            let ctg = cost_to_go(&rec, &cost, 20).unwrap();
            let want =
                0.3 * cost.running_rate(rho0.matrix(), 0.0) + cost.terminal_value(rho0.matrix());
            assert!((ctg - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cost_and_terminal_index() {
        let m = decay();
        let p = TrajectoryParams::new(0.2, 0.01, Scheme::Kraus);
        let est = evaluate_cost(
            &m,
            &ControlStrategy::constant(0.3),
            &CostSpec::zero(2),
            &p,
            10,
            3,
        )
        .unwrap();
        assert_eq!((est.mean, est.stderr), (0.0, 0.0));
        let rec = generate_trajectory(&m, &ControlStrategy::constant(0.3), &p, 3, 0).unwrap();
        let pe = pauli::excited_projector();
        let cost = CostSpec::new(pe.clone(), 0.0, pe);
        let last = cost_to_go(&rec, &cost, 20).unwrap();
        assert_eq!(last, cost.terminal_value(rec.final_state().matrix()));
        assert!(matches!(
            cost_to_go(&rec, &cost, 21),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            CostEstimate::from_costs(vec![1.0]),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn decay_cost_matches_lindblad_integral() {
        let m = decay();
        let pe = pauli::excited_projector();
        let cost = CostSpec::new(pe, 0.0, ComplexMatrix::zeros(2));
        let p = TrajectoryParams::new(1.0, 1e-3, Scheme::Kraus);
        let est =
            evaluate_cost(&m, &ControlStrategy::constant(0.0), &cost, &p, 10_000, 11).unwrap();
        // Left-endpoint sum of e^{−t} on the 1000-step grid.
        let h: f64 = 1e-3;
        let want = h * (1.0 - (-1.0f64).exp()) / (1.0 - (-h).exp());
        assert!((want - (1.0 - (-1.0f64).exp())).abs() < 1e-3);
        assert!(
            (est.mean - want).abs() <= 3.0 * est.stderr,
            "{} vs {want} ± {}",
            est.mean,
            est.stderr
        );
        assert!(est.costs.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn stderr_follows_root_n() {
        let m = decay();
        let pe = pauli::excited_projector();
        let cost = CostSpec::new(pe.clone(), 0.01, pe);
        let p = TrajectoryParams::new(1.0, 1e-2, Scheme::Kraus);
        let s = ControlStrategy::bang_bang(3, -1.0, 1.0);
        let small = evaluate_cost(&m, &s, &cost, &p, 1000, 5).unwrap();
        let large = evaluate_cost(&m, &s, &cost, &p, 4000, 5).unwrap();
        let ratio = small.stderr / large.stderr;
        assert!((1.6..=2.5).contains(&ratio), "{ratio}");
        let again = evaluate_cost(&m, &s, &cost, &p, 1000, 5).unwrap();
        assert_eq!(again, small);
        let tower: f64 = (0..1000)
            .map(|i| {
                let rec = generate_trajectory(&m, &s, &p, 5, i).unwrap();
                cost_to_go(&rec, &cost, 0).unwrap()
            })
            .sum::<f64>()
            / 1000.0;
        assert!((tower - small.mean).abs() < 1e-12);
    }

    #[test]
    fn comparison_ranks_and_couples() {
        let m = decay();
        let pe = pauli::excited_projector();
        let cost = CostSpec::new(pe.clone(), 0.01, pe);
        let p = TrajectoryParams::new(0.5, 1e-2, Scheme::Kraus);
        let panel = vec![
            ControlStrategy::constant(0.0).with_name("a"),
            ControlStrategy::constant(0.0).with_name("b"),
            ControlStrategy::constant(1.0).with_name("c"),
        ];
        let rep = compare_strategies(&m, &cost, &panel, &p, 200, 9).unwrap();
        assert_eq!(
            rep.get("a").unwrap().estimate,
            rep.get("b").unwrap().estimate
        );
        assert_eq!(rep.ranking.len(), 3);
        assert_eq!(rep.pairwise.len(), 3);
        assert_eq!(rep.pairwise[0].difference, 0.0);
        assert!(rep.pairwise[0].overlap);
        let mut csv = Vec::new();
        rep.write_costs_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 201);
        let one = compare_strategies(&m, &cost, &panel[..1], &p, 50, 9).unwrap();
        assert_eq!(one.ranking, vec!["a".to_string()]);
        assert!(one.margins("a").unwrap().is_empty());
        assert!(
            compare_strategies(&m, &cost, &[panel[0].clone(), panel[0].clone()], &p, 5, 1).is_err()
        );
    }

    #[test]
    fn frozen_value_matches_rollout() {
        let rho0 = DensityMatrix::from_bloch([0.0, 0.3, 0.4]).unwrap();
        let m = SystemModel::frozen(ObservationMode::Diffusive)
            .with_rho0(rho0.clone())
            .with_range(AdmissibleRange::uniform(-1.0, 1.0, 3).unwrap());
        let ct = ComplexMatrix::from_real_rows(&[[0.7, 0.0], [0.0, 0.1]]).unwrap();
        let cost = CostSpec::new(ComplexMatrix::zeros(2), 0.0, ct);
        let vf = solve(&m, &cost, &StateGrid::new(11).unwrap(), 1.0, 10).unwrap();
        let pol = extract_policy(vf.clone());
        let p = TrajectoryParams::new(1.0, 0.1, Scheme::Kraus);
        let rep =
            value_consistency(&m, &cost, &vf, &pol.strategy("sep"), &p, 100, 1, 1e-12).unwrap();
        assert!(rep.gap < 1e-12 && rep.pass_total && rep.pass_conditional);
    }
}
