//! Timestep selection and the Newton solve of one timestep with cuts.

use super::assembly::{assemble_system, pressure_residual, State, StepContext};
use super::linsolve::{linear_solve, LinSolveError};
use super::model::{Formulation, NumericalControls};
use super::work::WorkClock;

/// Nonlinear convergence target: max cell residual over pore volume.
pub const NONLINEAR_TOL: f64 = 1e-6;
/// Largest saturation change applied by a single Newton update.
const MAX_NEWTON_DSW: f64 = 0.2;
/// Saturation bound slack accepted after a step.
pub const SAT_SLACK: f64 = 1e-9;

/// Next timestep size from the changes observed over the previous step.
pub fn select_timestep(prev_dt: f64, observed_dp: f64, observed_ds: f64, controls: &NumericalControls) -> f64 {
    let ratio = |norm: f64, obs: f64| if obs > 0.0 { norm / obs } else { f64::INFINITY };
    let factor = ratio(controls.norm_press, observed_dp.abs())
        .min(ratio(controls.norm_satur, observed_ds.abs()))
        .min(2.0);
    (prev_dt * factor).clamp(controls.dt_min, controls.dt_max)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub newton_cycles: u64,
    pub linear_iterations: u64,
    pub solver_failures: u64,
    pub cuts: u64,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, o: Self) {
        self.newton_cycles += o.newton_cycles;
        self.linear_iterations += o.linear_iterations;
        self.solver_failures += o.solver_failures;
        self.cuts += o.cuts;
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: State,
    pub dt: f64,
    pub max_dp: f64,
    pub max_ds: f64,
    pub stats: StepStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepFailure {
    /// Cuts exhausted or no smaller timestep allowed.
    CutsExhausted { dt: f64, stats: StepStats },
    /// Hard linear algebra error.
    Linear(LinSolveError),
}

struct Attempt {
    state: State,
    converged: bool,
    stats: StepStats,
}

fn newton(ctx: &StepContext<'_>, start: &State, controls: &NumericalControls, clock: &mut WorkClock) -> Result<Attempt, LinSolveError> {
    let mut state = start.clone();
    let mut stats = StepStats::default();
    let mut updates = 0u32;
    let converged = loop {
        let sys = assemble_system(ctx, &state, controls.formulation);
        clock.assembly += sys.flops;
        clock.wells += sys.well_flops;
        if sys.residual_norm < NONLINEAR_TOL && sys.residual_norm.is_finite() {
            break true;
        }
        if updates >= controls.newton_max || !sys.residual_norm.is_finite() {
            break false;
        }
        let sol = linear_solve(&sys.matrix, &sys.rhs, controls)?;
        clock.linear_solve += sol.flops;
        clock.note_memory(sol.memory_bytes + sys.matrix.nnz() as f64 * 12.0);
        stats.linear_iterations += sol.iterations as u64;
        if sol.failed {
            stats.solver_failures += 1;
        }
        if sol.x.iter().any(|v| !v.is_finite()) {
            updates += 1;
            break false;
        }
        match controls.formulation {
            Formulation::FullyImplicit => {
                for i in 0..state.p.len() {
                    state.p[i] += sol.x[2 * i];
                    let ds = sol.x[2 * i + 1].clamp(-MAX_NEWTON_DSW, MAX_NEWTON_DSW);
                    state.sw[i] = (state.sw[i] + ds).clamp(0.0, 1.0);
                }
            }
            Formulation::Impes => {
                for (p, dp) in state.p.iter_mut().zip(&sol.x) {
                    *p += dp;
                }
            }
        }
        updates += 1;
    };
    stats.newton_cycles = updates.max(1) as u64;
    if converged && controls.formulation == Formulation::Impes {
        let upd = pressure_residual(ctx, &state.p);
        let fluid = ctx.fluid;
        for i in 0..state.p.len() {
            let pv = ctx.disc.pv0[i] * fluid.pore_mult(state.p[i]).v;
            state.sw[i] = upd.m_w[i] / (pv * fluid.b_water(state.p[i]).v);
        }
        clock.assembly += 20.0 * state.p.len() as f64;
    }
    Ok(Attempt { state, converged, stats })
}

/// Solves one timestep starting at `dt`, halving on failure. The Newton
/// iteration, maximum per-cell changes and saturation bounds decide whether
/// a step is accepted.
pub fn solve_timestep(
    ctx_base: &StepContext<'_>,
    state: &State,
    dt: f64,
    controls: &NumericalControls,
    clock: &mut WorkClock,
) -> Result<StepOutcome, StepFailure> {
    let mut dt = dt;
    let mut total = StepStats::default();
    let cap = controls.cut_cap() as u64;
    loop {
        let ctx = StepContext { dt, ..*ctx_base };
        let attempt = newton(&ctx, state, controls, clock).map_err(StepFailure::Linear)?;
        total += attempt.stats;
        let (mut max_dp, mut max_ds) = (0.0f64, 0.0f64);
        let mut in_bounds = true;
        for i in 0..state.p.len() {
            max_dp = max_dp.max((attempt.state.p[i] - state.p[i]).abs());
            max_ds = max_ds.max((attempt.state.sw[i] - state.sw[i]).abs());
            let s = attempt.state.sw[i];
            in_bounds &= (-SAT_SLACK..=1.0 + SAT_SLACK).contains(&s);
        }
        let at_floor = dt <= controls.dt_min;
        let change_ok = (max_dp <= controls.maxchange_press && max_ds <= controls.maxchange_satur) || at_floor;
        if attempt.converged && in_bounds && change_ok {
            return Ok(StepOutcome { state: attempt.state, dt, max_dp, max_ds, stats: total });
        }
        if at_floor || total.cuts >= cap {
            return Err(StepFailure::CutsExhausted { dt, stats: total });
        }
        total.cuts += 1;
        dt = (dt * 0.5).max(controls.dt_min);
        clock.other += 2_000.0;
    }
}
