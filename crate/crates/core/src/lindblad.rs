//! Fixed-step RK4 integration of the master equation
//! `dρ/dt = −i[H, ρ] + LρL* − ½{L*L, ρ}` under an open-loop control.

use std::io::Write;

use crate::error::Result;
use crate::matcore::{matrix_to_bloch, ComplexMatrix, I};
use crate::model::SystemModel;
use crate::sme::grid_steps;

/// Lindblad generator applied to `rho`.
pub fn generator(h: &ComplexMatrix, l: &ComplexMatrix, rho: &ComplexMatrix) -> ComplexMatrix {
    let ldag = l.adjoint();
    let ldl = &ldag * l;
    let hr = h * rho;
    let rh = rho * h;
    let mut out = (&hr - &rh).scale(-I);
    out += &l.sandwich(rho);
    let ldl_r = &ldl * rho;
    let r_ldl = rho * &ldl;
    out.add_scaled((-0.5).into(), &ldl_r);
    out.add_scaled((-0.5).into(), &r_ldl);
    out
}

#[derive(Debug, Clone)]
pub struct LindbladPath {
    pub times: Vec<f64>,
    pub states: Vec<ComplexMatrix>,
}

impl LindbladPath {
    pub fn final_state(&self) -> &ComplexMatrix {
        self.states
            .last()
            .expect("paths hold at least the initial state")
    }

    /// State at the grid time closest to `t`.
    pub fn at(&self, t: f64) -> &ComplexMatrix {
        let dt = self.times.get(1).map_or(1.0, |t1| t1 - self.times[0]);
        let k = ((t - self.times[0]) / dt)
            .round()
            .clamp(0.0, (self.states.len() - 1) as f64);
        &self.states[k as usize]
    }

    /// CSV with columns `t,x,y,z` for qubits, otherwise the flattened matrix.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let dim = self.states[0].dim();
        if dim == 2 {
            writeln!(w, "t,x,y,z")?;
        } else {
            let cols: Vec<String> = (0..dim * dim)
                .flat_map(|k| {
                    [
                        format!("re{}_{}", k / dim, k % dim),
                        format!("im{}_{}", k / dim, k % dim),
                    ]
                })
                .collect();
            writeln!(w, "t,{}", cols.join(","))?;
        }
        for (t, s) in self.times.iter().zip(&self.states) {
            if dim == 2 {
                let [x, y, z] = matrix_to_bloch(s)?;
                writeln!(w, "{t},{x},{y},{z}")?;
            } else {
                let vals: Vec<String> = s
                    .entries()
                    .iter()
                    .flat_map(|c| [c.re.to_string(), c.im.to_string()])
                    .collect();
                writeln!(w, "{t},{}", vals.join(","))?;
            }
        }
        Ok(())
    }
}

/// Classical RK4 on the grid `0, dt, …, T`. The control is sampled at each
/// stage time.
pub fn integrate(
    model: &SystemModel,
    u_fn: impl Fn(f64) -> f64,
    rho0: &ComplexMatrix,
    t_final: f64,
    dt: f64,
) -> Result<LindbladPath> {
    let n = grid_steps(t_final, dt)?;
    let f = |t: f64, r: &ComplexMatrix| {
        let u = u_fn(t);
        generator(&model.coeffs.h(u), &model.coeffs.l(u), r)
    };
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut rho = rho0.clone();
    times.push(0.0);
    states.push(rho.clone());
    for k in 0..n {
        let t = k as f64 * dt;
        let k1 = f(t, &rho);
        let mut tmp = rho.clone();
        tmp.add_scaled((0.5 * dt).into(), &k1);
        let k2 = f(t + 0.5 * dt, &tmp);
        let mut tmp = rho.clone();
        tmp.add_scaled((0.5 * dt).into(), &k2);
        let k3 = f(t + 0.5 * dt, &tmp);
        let mut tmp = rho.clone();
        tmp.add_scaled(dt.into(), &k3);
        let k4 = f(t + dt, &tmp);
        rho.add_scaled((dt / 6.0).into(), &k1);
        rho.add_scaled((dt / 3.0).into(), &k2);
        rho.add_scaled((dt / 3.0).into(), &k3);
        rho.add_scaled((dt / 6.0).into(), &k4);
        times.push((k + 1) as f64 * dt);
        states.push(rho.clone());
    }
    Ok(LindbladPath { times, states })
}
