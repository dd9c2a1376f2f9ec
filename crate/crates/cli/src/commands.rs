// Negated comparisons below also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use qsep_core::bellman::{
    hjb_residual, interior_samples, residual_tolerance, richardson_estimate, solve,
    write_value_function, HjbReport, StateGrid, ValueFunction, HEADER_FILE, POLICY_FILE,
    VALUES_FILE,
};
use qsep_core::lindblad;
use qsep_core::matcore::eig_hermitian;
use qsep_core::mc::{compare_strategies, value_consistency, ComparisonReport, ValueConsistency};
use qsep_core::model::LoadedConfig;
use qsep_core::sme::{
    ensemble_map, innovations_martingale_stat, InnovationSample, MeanEstimate, SummaryAccumulator,
    SummaryPart, TestFunction, TrajectoryParams,
};
use qsep_core::zakai::{ks_refinement, KsRefinement};
use qsep_core::{oracle, SystemModel};
use serde::Serialize;

use crate::manifest::Outputs;
use crate::strategy;
use crate::CliError;

/// What a command hands back to `main`: the failing check names, if any.
pub type Outcome = Vec<String>;

pub struct Context {
    pub cfg: LoadedConfig,
    pub hash: String,
    pub out: Outputs,
}

impl Context {
    fn params(&self) -> TrajectoryParams {
        let r = &self.cfg.run;
        TrajectoryParams::new(r.t_final, r.dt, r.scheme)
    }

    fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".into(), self.hash.clone()),
            ("model".into(), self.cfg.model.name.clone()),
        ])
    }
}

pub struct SimulateArgs {
    pub strategy: String,
    pub value_function: Option<PathBuf>,
    pub save: usize,
    pub stride: usize,
}

pub fn simulate(ctx: &mut Context, args: &SimulateArgs) -> Result<Outcome, CliError> {
    let vf = args
        .value_function
        .as_deref()
        .map(strategy::load_value_function)
        .transpose()?;
    let s = strategy::parse(&args.strategy, &ctx.cfg.model, vf.as_ref())?;
    let run = ctx.cfg.run;
    let p = ctx.params();
    let stride = args.stride.max(1);
    let save = args.save.min(run.n_traj);
    let parts = ensemble_map(&ctx.cfg.model, &s, &p, run.seed, run.n_traj, |i, rec| {
        let csv = if i < save {
            let mut buf = Vec::new();
            rec.write_csv(&mut buf).map(|_| Some(buf))
        } else {
            Ok(None)
        };
        SummaryPart::from_record(&rec, stride).and_then(|part| Ok((part, csv?)))
    })?;
    let mut acc = SummaryAccumulator::new(stride);
    for (i, part) in parts.into_iter().enumerate() {
        let (part, csv) = part?;
        acc.push(&part);
        if let Some(bytes) = csv {
            ctx.out
                .write(format!("trajectories/trajectory_{i:05}.csv"), &bytes)?;
        }
    }
    let summary = acc.finish(
        ctx.cfg.model.mode,
        run.scheme,
        run.seed,
        run.t_final,
        run.dt,
    )?;
    #[derive(Serialize)]
    struct Ensemble<'a> {
        strategy: &'a str,
        #[serde(flatten)]
        summary: &'a qsep_core::sme::EnsembleSummary,
    }
    ctx.out.write_json(
        "ensemble.json",
        &Ensemble {
            strategy: &s.name,
            summary: &summary,
        },
    )?;
    Ok(Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Check {
    Ks,
    Innovations,
    Oracle,
    Lindblad,
}

impl Check {
    fn name(self) -> &'static str {
        match self {
            Check::Ks => "ks",
            Check::Innovations => "innovations",
            Check::Oracle => "oracle",
            Check::Lindblad => "lindblad",
        }
    }
}

pub struct VerifyArgs {
    pub check: Check,
    pub strategy: String,
    pub seeds: usize,
}

/// Smallest accepted empirical order of the normalization discrepancy.
pub const KS_MIN_ORDER: f64 = 1.0;
/// Discrepancies this small count as exact agreement, where no order is defined.
const KS_EXACT: f64 = 1e-12;
pub const ORACLE_MAX_RATIO: f64 = 0.6;
pub const INNOVATION_SIGMAS: f64 = 3.0;
/// Time pairs `(s, t)` as fractions of the horizon.
pub const INNOVATION_PAIRS: [(f64, f64); 2] = [(0.2, 0.5), (0.5, 1.0)];
const LINDBLAD_TOL: f64 = 1e-8;
const STATE_TOL: f64 = 1e-10;

#[derive(Serialize)]
struct VerifyReport<T: Serialize> {
    check: &'static str,
    strategy: String,
    pass: bool,
    failing: Vec<String>,
    details: T,
}

pub fn verify(ctx: &mut Context, args: &VerifyArgs) -> Result<Outcome, CliError> {
    let model = &ctx.cfg.model;
    let s = strategy::parse(&args.strategy, model, None)?;
    let run = ctx.cfg.run;
    let seeds = args.seeds.max(1);
    let mut failing = Vec::new();
    let file = format!("verify_{}.json", args.check.name());
    macro_rules! report {
        ($details:expr) => {
            ctx.out.write_json(
                &file,
                &VerifyReport {
                    check: args.check.name(),
                    strategy: s.name.clone(),
                    pass: failing.is_empty(),
                    failing: failing.clone(),
                    details: $details,
                },
            )?
        };
    }
    match args.check {
        Check::Ks => {
            let dts = [run.dt, run.dt / 2.0, run.dt / 4.0];
            let r = ks_refinement(
                model,
                &s,
                run.t_final,
                &dts,
                run.dt / 8.0,
                run.scheme,
                run.seed,
                seeds,
            )?;
            let exact = r.per_seed.iter().flatten().all(|&d| d <= KS_EXACT);
            let c = r
                .per_seed
                .iter()
                .flat_map(|v| v.iter().zip(&dts).map(|(d, dt)| d / dt))
                .fold(0.0, f64::max);
            if !(exact || r.order >= KS_MIN_ORDER) {
                failing.push(format!("ks.order ({:.3} < {KS_MIN_ORDER})", r.order));
            }
            if !(r.min_trace > 0.0) {
                failing.push("ks.min_trace".into());
            }
            #[derive(Serialize)]
            struct Ks {
                #[serde(flatten)]
                refinement: KsRefinement,
                max_discrepancy_over_dt: f64,
                min_order: f64,
            }
            report!(Ks {
                refinement: r,
                max_discrepancy_over_dt: c,
                min_order: KS_MIN_ORDER,
            });
        }
        Check::Innovations => {
            let p = ctx.params();
            let idx: Vec<(usize, usize)> = INNOVATION_PAIRS
                .iter()
                .map(|(a, b)| {
                    let k = |f: f64| (f * run.t_final / run.dt).round() as usize;
                    (k(*a), k(*b))
                })
                .collect();
            let samples = ensemble_map(model, &s, &p, run.seed, run.n_traj, |_, rec| {
                idx.iter()
                    .map(|&(si, ti)| InnovationSample::from_record(&rec, si, ti))
                    .collect::<qsep_core::Result<Vec<_>>>()
            })?
            .into_iter()
            .collect::<qsep_core::Result<Vec<_>>>()?;
            #[derive(Serialize)]
            struct Row {
                s: f64,
                t: f64,
                test_function: TestFunction,
                #[serde(flatten)]
                estimate: MeanEstimate,
                pass: bool,
            }
            let mut rows = Vec::new();
            for (j, (a, b)) in INNOVATION_PAIRS.iter().enumerate() {
                let col: Vec<InnovationSample> = samples.iter().map(|v| v[j]).collect();
                let stats = innovations_martingale_stat(&col, &TestFunction::DEFAULTS)?;
                for (g, m) in TestFunction::DEFAULTS.iter().zip(stats) {
                    let (s, t) = (a * run.t_final, b * run.t_final);
                    let pass = m.within(INNOVATION_SIGMAS);
                    if !pass {
                        failing.push(format!("innovations({s},{t},{g:?})"));
                    }
                    rows.push(Row {
                        s,
                        t,
                        test_function: *g,
                        estimate: m,
                        pass,
                    });
                }
            }
            report!(rows);
        }
        Check::Oracle => {
            let r = oracle::compare_with_filter(
                model,
                &s,
                run.t_final,
                &[run.dt, run.dt / 4.0],
                run.seed,
                seeds,
            )?;
            if !(r.ratio <= ORACLE_MAX_RATIO) {
                failing.push(format!(
                    "oracle.ratio ({:.3} > {ORACLE_MAX_RATIO})",
                    r.ratio
                ));
            }
            report!(r);
        }
        Check::Lindblad => {
            let details = lindblad_check(model, run.t_final, run.dt, &mut failing)?;
            let mut csv = Vec::new();
            details.1.write_csv(&mut csv)?;
            ctx.out.write("lindblad.csv", &csv)?;
            report!(details.0);
        }
    }
    Ok(failing)
}

#[derive(Serialize)]
struct LindbladDetails {
    control: f64,
    t_final: f64,
    dt: f64,
    min_eigenvalue: f64,
    max_trace_error: f64,
    step_halving_difference: f64,
    /// Closed-form excited population for pure decay, when it applies.
    closed_form: Option<f64>,
    excited_population: f64,
}

fn lindblad_check(
    model: &SystemModel,
    t_final: f64,
    dt: f64,
    failing: &mut Vec<String>,
) -> Result<(LindbladDetails, lindblad::LindbladPath), CliError> {
    let u = model.range.grid[model.range.nearest_index(0.0)];
    let rho0 = model.rho0.matrix();
    let path = lindblad::integrate(model, |_| u, rho0, t_final, dt)?;
    let half = lindblad::integrate(model, |_| u, rho0, t_final, dt / 2.0)?;
    let mut min_eig = f64::INFINITY;
    let mut max_tr: f64 = 0.0;
    for s in &path.states {
        min_eig = min_eig.min(eig_hermitian(&s.hermitian_part())?.values[0]);
        max_tr = max_tr.max((s.trace().re - 1.0).abs());
    }
    let diff = (path.final_state() - half.final_state()).max_abs();
    let excited = path.final_state().entries()[0].re;

    // Pure decay: no Hamiltonian and L proportional to the lowering operator.
    let c = model.coeffs.at(u);
    let closed_form = (model.dim == 2 && c.h.max_abs() == 0.0 && {
        let e = c.l.entries();
        e[0].norm() == 0.0 && e[1].norm() == 0.0 && e[3].norm() == 0.0
    })
    .then(|| rho0.entries()[0].re * (-c.l.entries()[2].norm_sqr() * t_final).exp());

    if min_eig < -STATE_TOL || max_tr > STATE_TOL {
        failing.push("lindblad.state".into());
    }
    if diff > LINDBLAD_TOL {
        failing.push("lindblad.step_halving".into());
    }
    if let Some(want) = closed_form {
        if (excited - want).abs() > LINDBLAD_TOL {
            failing.push("lindblad.closed_form".into());
        }
    }
    Ok((
        LindbladDetails {
            control: u,
            t_final,
            dt,
            min_eigenvalue: min_eig,
            max_trace_error: max_tr,
            step_halving_difference: diff,
            closed_form,
            excited_population: excited,
        },
        path,
    ))
}

/// Radius of the interior region probed by the HJB residual check.
pub const HJB_RADIUS: f64 = 0.9;
pub const HJB_SAMPLES: usize = 100;
/// Residuals must stay within this many multiples of the tolerance estimate.
pub const HJB_BAND: f64 = 5.0;
const VALUE_STRIDE: usize = 10;

#[derive(Serialize)]
struct BellmanSummary {
    grid_n: usize,
    time_steps: usize,
    controls: Vec<f64>,
    value_at_start: f64,
    bound: f64,
    residual_tolerance: f64,
    hjb: HjbReport,
    pass: bool,
}

fn solve_config(ctx: &Context) -> Result<ValueFunction, CliError> {
    let b = ctx.cfg.bellman;
    let grid = StateGrid::new(b.grid_n)?;
    Ok(solve(
        &ctx.cfg.model,
        &ctx.cfg.cost,
        &grid,
        ctx.cfg.run.t_final,
        b.time_steps,
    )?)
}

pub fn bellman(ctx: &mut Context) -> Result<Outcome, CliError> {
    let vf = solve_config(ctx)?;
    let (model, cost) = (&ctx.cfg.model, &ctx.cfg.cost);
    write_value_function(&vf, ctx.out.root(), VALUE_STRIDE, ctx.meta())?;
    for f in [HEADER_FILE, VALUES_FILE, POLICY_FILE] {
        ctx.out.track(f);
    }
    let tol = residual_tolerance(&vf, HJB_RADIUS)?;
    let samples = interior_samples(&vf, HJB_SAMPLES, HJB_RADIUS, ctx.cfg.run.seed);
    let hjb = hjb_residual(&vf, model, cost, &samples)?;
    let mut failing = Vec::new();
    if hjb.min_condition3 < -HJB_BAND * tol {
        failing.push("hjb.condition3".to_string());
    }
    if hjb.max_abs_condition2 > HJB_BAND * tol {
        failing.push("hjb.condition2".to_string());
    }
    let summary = BellmanSummary {
        grid_n: vf.grid.n,
        time_steps: vf.time_steps,
        controls: vf.controls.clone(),
        value_at_start: vf.value_at(0.0, model.rho0.bloch()?)?,
        bound: vf.bound(cost),
        residual_tolerance: tol,
        hjb,
        pass: failing.is_empty(),
    };
    ctx.out.write_json("bellman.json", &summary)?;
    Ok(failing)
}

pub struct CompareArgs {
    pub panel: Vec<String>,
    pub value_function: Option<PathBuf>,
}

pub const DEFAULT_PANEL: [&str; 6] = ["separated", "zero", "max", "min", "randomized", "bang_bang"];

pub fn compare(ctx: &mut Context, args: &CompareArgs) -> Result<Outcome, CliError> {
    let wants_separated = args.panel.iter().any(|s| s == "separated");
    let vf = match (&args.value_function, wants_separated) {
        (Some(dir), _) => Some(strategy::load_value_function(dir)?),
        (None, true) => Some(solve_config(ctx)?),
        (None, false) => None,
    };
    let model = &ctx.cfg.model;
    let cost = &ctx.cfg.cost;
    let panel = args
        .panel
        .iter()
        .map(|spec| strategy::parse(spec, model, vf.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let run = ctx.cfg.run;
    let p = ctx.params();
    let report: ComparisonReport =
        compare_strategies(model, cost, &panel, &p, run.n_traj, run.seed)?;
    let mut failing = Vec::new();
    let mut consistency: Option<ValueConsistency> = None;
    if let (Some(vf), true) = (&vf, wants_separated) {
        if report.ranking[0] != "separated" {
            failing.push(format!("separation (best is {})", report.ranking[0]));
        }
        for (name, margin) in report.margins("separated")? {
            if !(margin > 0.0) {
                failing.push(format!("separation.margin({name})"));
            }
        }
        let rho0 = model.rho0.bloch()?;
        let eps = richardson_estimate(vf, model, cost, rho0).unwrap_or(0.0);
        let sep = panel
            .iter()
            .find(|s| s.name == "separated")
            .expect("panel holds the separated policy");
        let vc = value_consistency(model, cost, vf, sep, &p, run.n_traj, run.seed, eps)?;
        if !vc.pass_total {
            failing.push("value_consistency".into());
        }
        consistency = Some(vc);
    }
    #[derive(Serialize)]
    struct Comparison<'a> {
        #[serde(flatten)]
        report: &'a ComparisonReport,
        margins: BTreeMap<String, f64>,
        value_consistency: Option<ValueConsistency>,
        pass: bool,
    }
    let margins = if wants_separated {
        report.margins("separated")?.into_iter().collect()
    } else {
        BTreeMap::new()
    };
    let mut csv = Vec::new();
    report.write_costs_csv(&mut csv)?;
    ctx.out.write("costs.csv", &csv)?;
    ctx.out.write_json(
        "comparison.json",
        &Comparison {
            report: &report,
            margins,
            value_consistency: consistency,
            pass: failing.is_empty(),
        },
    )?;
    Ok(failing)
}
