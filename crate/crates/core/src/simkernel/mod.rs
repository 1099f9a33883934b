//! Two-phase (oil-water) finite-volume reservoir simulator.
//!
//! Cartesian 2D grid, two-point flux approximation, Corey relative
//! permeabilities and slightly compressible phases. Each timestep is solved
//! by Newton's method (fully implicit, or IMPES with an implicit pressure
//! and explicit saturation update); the numerical controls in
//! [`NumericalControls`] are the knobs the tuner adjusts.

pub mod assembly;
pub mod cases;
pub mod linsolve;
pub mod model;
pub mod physics;
pub mod result;
pub mod sparse;
pub mod stepping;
pub mod work;

use std::time::Instant;

use thiserror::Error;

pub use assembly::{assemble_system, AssembledSystem, Discretization, State, StepContext};
pub use linsolve::{linear_solve, LinSolveError, LinearSolution};
pub use model::{
    FluidModel, Formulation, GridModel, NumericalControls, Ordering, ScheduleInterval, SimulationCase,
    SolverKind, WellControl, WellKind, WellSpec, UNLIMITED_CUTS,
};
pub use result::{Counters, Curves, Mbe, Series, SimStatus, SimulationResult};
pub use stepping::{select_timestep, solve_timestep, StepFailure, StepOutcome, StepStats, NONLINEAR_TOL};
pub use work::KernelTimings;

use assembly::{masses, well_term};
use work::WorkClock;

/// Version string reported as the simulator identity in logs and features.
pub const SIMULATOR_ID: &str = concat!("simtune-fv2p-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation case: {}", .0.join("; "))]
    InvalidCase(Vec<String>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("material balance undefined: OFIP - Prod + Inj is zero")]
    ZeroBalanceDenominator,
}

/// Material balance error in percent:
/// `(fip / (ofip - prod + inj) - 1) * 100`.
pub fn compute_mbe(fip: f64, ofip: f64, cum_prod: f64, cum_inj: f64) -> Result<f64, SimError> {
    let denom = ofip - cum_prod + cum_inj;
    if denom == 0.0 {
        return Err(SimError::ZeroBalanceDenominator);
    }
    Ok((fip / denom - 1.0) * 100.0)
}

fn phase_mbe(fip: f64, ofip: f64, prod: f64, inj: f64) -> f64 {
    match compute_mbe(fip, ofip, prod, inj) {
        Ok(v) => v,
        // phase absent throughout
        Err(_) if fip == 0.0 => 0.0,
        Err(_) => 100.0,
    }
}

/// Curve names in column order: field totals, then three per well.
pub fn curve_names(case: &SimulationCase) -> Vec<String> {
    let mut names = vec!["FIELD_OPT".to_string(), "FIELD_WPT".to_string(), "FIELD_WIT".to_string()];
    for w in &case.wells {
        for suffix in ["OPT", "WPT", "WIT"] {
            names.push(format!("{}_{suffix}", w.name));
        }
    }
    names
}

fn event_times(case: &SimulationCase) -> Vec<f64> {
    let h = case.horizon_days;
    let mut ev = Vec::new();
    let mut k = 1;
    loop {
        let t = k as f64 * case.report_interval_days;
        if t >= h - 1e-9 {
            break;
        }
        ev.push(t);
        k += 1;
    }
    ev.push(h);
    for w in &case.wells {
        for iv in &w.schedule {
            for t in [iv.start_day, iv.end_day] {
                if t > 1e-9 && t < h - 1e-9 {
                    ev.push(t);
                }
            }
        }
    }
    ev.sort_by(f64::total_cmp);
    ev.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    ev
}

fn report_times(case: &SimulationCase) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 1;
    loop {
        let t = k as f64 * case.report_interval_days;
        if t >= case.horizon_days - 1e-9 {
            break;
        }
        out.push(t);
        k += 1;
    }
    out.push(case.horizon_days);
    out
}

/// Runs the case from day 0 to the horizon. `wall_timeout_s` bounds the
/// modeled elapsed time; exceeding it ends the run with [`SimStatus::Timeout`].
pub fn run_simulation(case: &SimulationCase, wall_timeout_s: f64) -> Result<SimulationResult, SimError> {
    case.validate()?;
    let started = Instant::now();
    let controls = &case.controls;
    let fluid = &case.fluid;
    let disc = Discretization::new(&case.grid, &case.wells);
    let n = disc.n();
    let mut state = State {
        p: disc.cells.iter().map(|&c| case.initial_pressure[c]).collect(),
        sw: disc.cells.iter().map(|&c| case.initial_sw[c]).collect(),
    };
    let m0 = masses(&disc, fluid, &state);
    let (ofip_o, ofip_w) = (m0.total_oil(), m0.total_water());

    let mut clock = WorkClock::default();
    clock.io += work::STARTUP_FLOPS + 50.0 * n as f64;
    let base_bytes = (n * 12 * 8 + disc.conns.len() * 24 + case.wells.len() * 64) as f64;

    let mut curves = Curves::with_names(curve_names(case));
    let mut fip_series = Curves::with_names(["FIP_OIL", "FIP_WATER"]);
    // per well: oil produced, water produced, water injected
    let mut cum = vec![[0.0f64; 3]; case.wells.len()];
    let record = |curves: &mut Curves, cum: &[[f64; 3]], day: f64| {
        let mut row = vec![0.0; 3];
        for c in cum {
            for k in 0..3 {
                row[k] += c[k];
            }
        }
        for c in cum {
            row.extend_from_slice(c);
        }
        curves.push_row(day, &row);
    };
    record(&mut curves, &cum, 0.0);
    fip_series.push_row(0.0, &[ofip_o, ofip_w]);

    let events = event_times(case);
    let reports = report_times(case);
    let horizon = case.horizon_days;
    let mut counters = Counters::default();
    let mut status = SimStatus::Normal;
    let mut message = None;
    let mut t = 0.0f64;
    let mut dt = 1.0f64.clamp(controls.dt_min, controls.dt_max);

    while t < horizon - 1e-9 {
        let next_event = events.iter().copied().find(|&e| e > t + 1e-9).unwrap_or(horizon);
        let dt_try = dt.min(next_event - t);
        let well_ctl: Vec<_> = case.wells.iter().map(|w| w.control_at(t)).collect();
        let old_masses = masses(&disc, fluid, &state);
        let ctx = StepContext {
            disc: &disc,
            fluid,
            old_masses: &old_masses,
            old_sw: &state.sw,
            dt: dt_try,
            controls: &well_ctl,
        };
        match solve_timestep(&ctx, &state, dt_try, controls, &mut clock) {
            Ok(out) => {
                counters.timesteps += 1;
                counters.newton_cycles += out.stats.newton_cycles;
                counters.linear_iterations += out.stats.linear_iterations;
                counters.solver_failures += out.stats.solver_failures;
                counters.cuts += out.stats.cuts;
                for (k, (w, ctl)) in disc.wells.iter().zip(&well_ctl).enumerate() {
                    let sw_mob = match controls.formulation {
                        Formulation::FullyImplicit => out.state.sw[w.cell],
                        Formulation::Impes => state.sw[w.cell],
                    };
                    let q = well_term(fluid, w.kind, w.wi, *ctl, out.state.p[w.cell], sw_mob);
                    cum[k][0] += out.dt * q.q_o;
                    if q.q_w >= 0.0 {
                        cum[k][1] += out.dt * q.q_w;
                    } else {
                        cum[k][2] -= out.dt * q.q_w;
                    }
                }
                clock.wells += 20.0 * disc.wells.len() as f64;
                clock.other += work::STEP_OVERHEAD_FLOPS;
                let truncated = dt_try < dt && out.stats.cuts == 0;
                t += out.dt;
                if (t - next_event).abs() < 1e-9 {
                    t = next_event;
                }
                let prev = out.dt.clamp(controls.dt_min, controls.dt_max);
                let mut next = select_timestep(prev, out.max_dp, out.max_ds, controls);
                if truncated {
                    next = next.max(dt);
                }
                dt = next;
                state = out.state;
                if reports.iter().any(|&r| (r - t).abs() < 1e-9) {
                    record(&mut curves, &cum, t);
                    let m = masses(&disc, fluid, &state);
                    fip_series.push_row(t, &[m.total_oil(), m.total_water()]);
                    clock.io += 20.0 * n as f64 + 10.0 * case.wells.len() as f64;
                }
            }
            Err(StepFailure::CutsExhausted { dt: at, stats }) => {
                counters.newton_cycles += stats.newton_cycles;
                counters.linear_iterations += stats.linear_iterations;
                counters.solver_failures += stats.solver_failures;
                counters.cuts += stats.cuts;
                status = SimStatus::Abnormal;
                message = Some(format!("timestep cuts exhausted at day {t} (dt = {at})"));
                break;
            }
            Err(StepFailure::Linear(e)) => {
                status = SimStatus::Abnormal;
                message = Some(format!("linear solver error at day {t}: {e}"));
                break;
            }
        }
        if clock.elapsed_s() > wall_timeout_s {
            status = SimStatus::Timeout;
            message = Some(format!("timeout after {:.6} s at day {t}", clock.elapsed_s()));
            break;
        }
    }

    let m = masses(&disc, fluid, &state);
    let (opt, wpt, wit) = cum.iter().fold((0.0, 0.0, 0.0), |a, c| (a.0 + c[0], a.1 + c[1], a.2 + c[2]));
    let mbe = Mbe {
        oil: phase_mbe(m.total_oil(), ofip_o, opt, 0.0),
        water: phase_mbe(m.total_water(), ofip_w, wpt, wit),
        gas: 0.0,
    };
    let elapsed_s = clock.elapsed_s();
    let average_implicitness = match controls.formulation {
        Formulation::FullyImplicit => 1.0,
        // pressure implicit, saturation explicit: one of two unknowns per cell-step
        Formulation::Impes => 0.5,
    };
    Ok(SimulationResult {
        status,
        elapsed_s,
        cpu_s: elapsed_s,
        wall_s: started.elapsed().as_secs_f64(),
        memory_peak_mb: 1.0 + (base_bytes + clock.peak_bytes()) / 1.0e6,
        counters,
        kernel_timings: clock.kernels(),
        curves,
        fip_series,
        mbe,
        average_implicitness,
        days_simulated: t,
        horizon_days: horizon,
        final_pressure: state.p,
        final_sw: state.sw,
        message,
    })
}
