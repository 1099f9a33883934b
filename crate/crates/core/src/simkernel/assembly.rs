//! Residual and Jacobian assembly for the two-point flux discretization.
//!
//! Fully implicit unknowns are `(p, sw)` per active cell; rows are the
//! total (oil + water) and the water mass balances. The IMPES pressure
//! system has one unknown per cell and eliminates the saturations through
//! the volume balance, with mobilities lagged at the previous saturations.

use super::model::{FluidModel, Formulation, GridModel, WellControl, WellKind, WellSpec};
use super::physics::{connections, Connection};
use super::sparse::CsrMatrix;

/// Static per-case discretization data over active cells.
#[derive(Debug, Clone)]
pub struct Discretization {
    /// Global cell ids of active cells, in local order.
    pub cells: Vec<usize>,
    pub local: Vec<Option<usize>>,
    /// Reference pore volume `V * phi` per active cell.
    pub pv0: Vec<f64>,
    pub conns: Vec<Connection>,
    pub wells: Vec<Completion>,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub cell: usize,
    pub kind: WellKind,
    pub wi: f64,
}

impl Discretization {
    pub fn new(grid: &GridModel, wells: &[WellSpec]) -> Self {
        let mut local = vec![None; grid.total_cells()];
        let mut cells = Vec::new();
        for c in 0..grid.total_cells() {
            if grid.active[c] {
                local[c] = Some(cells.len());
                cells.push(c);
            }
        }
        let vol = grid.cell_volume();
        let pv0 = cells.iter().map(|&c| vol * grid.porosity[c]).collect();
        let conns = connections(grid, &local);
        let wells = wells
            .iter()
            .map(|w| Completion {
                cell: local[w.cell].expect("well cell validated active"),
                kind: w.kind,
                wi: w.well_index,
            })
            .collect();
        Self { cells, local, pv0, conns, wells }
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub p: Vec<f64>,
    pub sw: Vec<f64>,
}

/// Surface volumes of each phase per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Masses {
    pub water: Vec<f64>,
    pub oil: Vec<f64>,
}

impl Masses {
    pub fn total_water(&self) -> f64 {
        self.water.iter().sum()
    }

    pub fn total_oil(&self) -> f64 {
        self.oil.iter().sum()
    }
}

pub fn masses(disc: &Discretization, fluid: &FluidModel, state: &State) -> Masses {
    let n = disc.n();
    let mut water = Vec::with_capacity(n);
    let mut oil = Vec::with_capacity(n);
    for i in 0..n {
        let pv = disc.pv0[i] * fluid.pore_mult(state.p[i]).v;
        water.push(pv * fluid.b_water(state.p[i]).v * state.sw[i]);
        oil.push(pv * fluid.b_oil(state.p[i]).v * (1.0 - state.sw[i]));
    }
    Masses { water, oil }
}

/// Surface rates of one well (production positive) and their derivatives
/// with respect to the completion cell's pressure and water saturation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WellTerm {
    pub q_w: f64,
    pub q_o: f64,
    pub dqw_dp: f64,
    pub dqw_dsw: f64,
    pub dqo_dp: f64,
    pub dqo_dsw: f64,
}

pub fn well_term(fluid: &FluidModel, kind: WellKind, wi: f64, control: Option<WellControl>, p: f64, sw: f64) -> WellTerm {
    let Some(control) = control else { return WellTerm::default() };
    let lw = fluid.mob_water(sw);
    let lo = fluid.mob_oil(sw);
    match (kind, control) {
        (WellKind::Producer, WellControl::Bhp(bhp)) => {
            let dp = p - bhp;
            // at dp == 0 keep the derivative of the open branch so Newton can leave the kink
            if dp < 0.0 {
                return WellTerm::default();
            }
            let bw = fluid.b_water(p);
            let bo = fluid.b_oil(p);
            WellTerm {
                q_w: wi * lw.v * bw.v * dp,
                q_o: wi * lo.v * bo.v * dp,
                dqw_dp: wi * lw.v * (bw.d * dp + bw.v),
                dqw_dsw: wi * lw.d * bw.v * dp,
                dqo_dp: wi * lo.v * (bo.d * dp + bo.v),
                dqo_dsw: wi * lo.d * bo.v * dp,
            }
        }
        (WellKind::Producer, WellControl::Rate(q)) => {
            let lt = lw.v + lo.v;
            let fw = lw.v / lt;
            let dfw = (lw.d * lo.v - lw.v * lo.d) / (lt * lt);
            WellTerm {
                q_w: q * fw,
                q_o: q * (1.0 - fw),
                dqw_dsw: q * dfw,
                dqo_dsw: -q * dfw,
                ..WellTerm::default()
            }
        }
        (WellKind::Injector, WellControl::Rate(q)) => WellTerm { q_w: -q, ..WellTerm::default() },
        (WellKind::Injector, WellControl::Bhp(bhp)) => {
            let dp = bhp - p;
            if dp < 0.0 {
                return WellTerm::default();
            }
            let bw = fluid.b_water(p);
            let lt = lw.v + lo.v;
            let dlt = lw.d + lo.d;
            WellTerm {
                q_w: -wi * lt * bw.v * dp,
                dqw_dp: -wi * lt * (bw.d * dp - bw.v),
                dqw_dsw: -wi * dlt * bw.v * dp,
                ..WellTerm::default()
            }
        }
    }
}

/// Assembled Newton system: `matrix * delta = rhs` with `rhs = -residual`.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Scaled residual norm used for the convergence test.
    pub residual_norm: f64,
    pub flops: f64,
    pub well_flops: f64,
}

/// Inputs that stay fixed during the Newton iterations of one step.
pub struct StepContext<'a> {
    pub disc: &'a Discretization,
    pub fluid: &'a FluidModel,
    pub old_masses: &'a Masses,
    /// Saturations at the start of the step (IMPES lags mobilities on these).
    pub old_sw: &'a [f64],
    pub dt: f64,
    /// Control of each completion during the step.
    pub controls: &'a [Option<WellControl>],
}

pub fn assemble_system(ctx: &StepContext<'_>, state: &State, formulation: Formulation) -> AssembledSystem {
    match formulation {
        Formulation::FullyImplicit => assemble_fully_implicit(ctx, state),
        Formulation::Impes => assemble_pressure(ctx, state),
    }
}

/// Phase fluxes from `a` to `b` with derivatives w.r.t. `p_a`, `p_b` and the
/// upwind saturation. Returns `(flux, d/dpa, d/dpb, d/dsw_up, upwind_is_a)`.
fn phase_flux(
    trans: f64,
    pa: f64,
    pb: f64,
    sw_a: f64,
    sw_b: f64,
    mob: impl Fn(f64) -> super::physics::Dual,
    bfac: impl Fn(f64) -> super::physics::Dual,
) -> (f64, f64, f64, f64, bool) {
    let up_a = pa >= pb;
    let (p_up, sw_up) = if up_a { (pa, sw_a) } else { (pb, sw_b) };
    let lam = mob(sw_up);
    let b = bfac(p_up);
    let dp = pa - pb;
    let f = trans * lam.v * b.v * dp;
    let dbu = trans * lam.v * b.d * dp;
    let dfa = trans * lam.v * b.v + if up_a { dbu } else { 0.0 };
    let dfb = -trans * lam.v * b.v + if up_a { 0.0 } else { dbu };
    let dfs = trans * lam.d * b.v * dp;
    (f, dfa, dfb, dfs, up_a)
}

/// Water and oil residuals of the fully implicit system (no Jacobian).
pub fn fully_implicit_residual(ctx: &StepContext<'_>, state: &State) -> (Vec<f64>, Vec<f64>) {
    let (disc, fluid, dt) = (ctx.disc, ctx.fluid, ctx.dt);
    let m = masses(disc, fluid, state);
    let mut rw: Vec<f64> = (0..disc.n()).map(|i| m.water[i] - ctx.old_masses.water[i]).collect();
    let mut ro: Vec<f64> = (0..disc.n()).map(|i| m.oil[i] - ctx.old_masses.oil[i]).collect();
    for c in &disc.conns {
        let (pa, pb) = (state.p[c.a], state.p[c.b]);
        let (sa, sb) = (state.sw[c.a], state.sw[c.b]);
        let fw = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_water(s), |p| fluid.b_water(p)).0;
        let fo = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_oil(s), |p| fluid.b_oil(p)).0;
        rw[c.a] += dt * fw;
        rw[c.b] -= dt * fw;
        ro[c.a] += dt * fo;
        ro[c.b] -= dt * fo;
    }
    for (w, ctl) in disc.wells.iter().zip(ctx.controls) {
        let t = well_term(fluid, w.kind, w.wi, *ctl, state.p[w.cell], state.sw[w.cell]);
        rw[w.cell] += dt * t.q_w;
        ro[w.cell] += dt * t.q_o;
    }
    (rw, ro)
}

fn scaled_norm(disc: &Discretization, r: &[f64]) -> f64 {
    r.iter().zip(&disc.pv0).fold(0.0f64, |m, (v, pv)| m.max(v.abs() / pv))
}

fn assemble_fully_implicit(ctx: &StepContext<'_>, state: &State) -> AssembledSystem {
    let (disc, fluid, dt) = (ctx.disc, ctx.fluid, ctx.dt);
    let n = disc.n();
    let (rw, ro) = fully_implicit_residual(ctx, state);
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(10); 2 * n];
    // (row, col) contributions: row 2i = total, 2i+1 = water; col 2k = p, 2k+1 = sw
    let add = |rows: &mut Vec<Vec<(usize, f64)>>, cell: usize, var: usize, dw: f64, dof: f64| {
        rows[2 * cell].push((var, dw + dof));
        rows[2 * cell + 1].push((var, dw));
    };
    for i in 0..n {
        let p = state.p[i];
        let sw = state.sw[i];
        let pm = fluid.pore_mult(p);
        let bw = fluid.b_water(p);
        let bo = fluid.b_oil(p);
        let pv0 = disc.pv0[i];
        let dmw_dp = pv0 * sw * (pm.d * bw.v + pm.v * bw.d);
        let dmw_ds = pv0 * pm.v * bw.v;
        let dmo_dp = pv0 * (1.0 - sw) * (pm.d * bo.v + pm.v * bo.d);
        let dmo_ds = -pv0 * pm.v * bo.v;
        add(&mut rows, i, 2 * i, dmw_dp, dmo_dp);
        add(&mut rows, i, 2 * i + 1, dmw_ds, dmo_ds);
    }
    for c in &disc.conns {
        let (pa, pb) = (state.p[c.a], state.p[c.b]);
        let (sa, sb) = (state.sw[c.a], state.sw[c.b]);
        let (_, wa, wb, ws, up_a) = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_water(s), |p| fluid.b_water(p));
        let (_, oa, ob, os, _) = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_oil(s), |p| fluid.b_oil(p));
        let up = if up_a { c.a } else { c.b };
        for (cell, sign) in [(c.a, dt), (c.b, -dt)] {
            add(&mut rows, cell, 2 * c.a, sign * wa, sign * oa);
            add(&mut rows, cell, 2 * c.b, sign * wb, sign * ob);
            add(&mut rows, cell, 2 * up + 1, sign * ws, sign * os);
        }
    }
    let mut well_flops = 0.0;
    for (w, ctl) in disc.wells.iter().zip(ctx.controls) {
        let t = well_term(fluid, w.kind, w.wi, *ctl, state.p[w.cell], state.sw[w.cell]);
        let k = w.cell;
        add(&mut rows, k, 2 * k, dt * t.dqw_dp, dt * t.dqo_dp);
        add(&mut rows, k, 2 * k + 1, dt * t.dqw_dsw, dt * t.dqo_dsw);
        well_flops += 60.0;
    }
    let mut rhs = Vec::with_capacity(2 * n);
    for i in 0..n {
        rhs.push(-(rw[i] + ro[i]));
        rhs.push(-rw[i]);
    }
    let residual_norm = scaled_norm(disc, &rw).max(scaled_norm(disc, &ro));
    let flops = 40.0 * n as f64 + 90.0 * disc.conns.len() as f64 + 12.0 * n as f64;
    AssembledSystem { matrix: CsrMatrix::from_rows(2 * n, 2, rows), rhs, residual_norm, flops, well_flops }
}

/// Phase volumes `M_alpha(p) = m_alpha^n - dt (sum F + q)` of the IMPES
/// update with lagged mobilities, and the pressure residual
/// `G = pv(p) - M_w / b_w - M_o / b_o`.
pub struct PressureUpdate {
    pub m_w: Vec<f64>,
    pub m_o: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn pressure_residual(ctx: &StepContext<'_>, p: &[f64]) -> PressureUpdate {
    let (disc, fluid, dt) = (ctx.disc, ctx.fluid, ctx.dt);
    let n = disc.n();
    let mut m_w = ctx.old_masses.water.clone();
    let mut m_o = ctx.old_masses.oil.clone();
    for c in &disc.conns {
        let (pa, pb) = (p[c.a], p[c.b]);
        let (sa, sb) = (ctx.old_sw[c.a], ctx.old_sw[c.b]);
        let fw = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_water(s), |q| fluid.b_water(q)).0;
        let fo = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_oil(s), |q| fluid.b_oil(q)).0;
        m_w[c.a] -= dt * fw;
        m_w[c.b] += dt * fw;
        m_o[c.a] -= dt * fo;
        m_o[c.b] += dt * fo;
    }
    for (w, ctl) in disc.wells.iter().zip(ctx.controls) {
        let t = well_term(fluid, w.kind, w.wi, *ctl, p[w.cell], ctx.old_sw[w.cell]);
        m_w[w.cell] -= dt * t.q_w;
        m_o[w.cell] -= dt * t.q_o;
    }
    let residual = (0..n)
        .map(|i| {
            disc.pv0[i] * fluid.pore_mult(p[i]).v - m_w[i] / fluid.b_water(p[i]).v - m_o[i] / fluid.b_oil(p[i]).v
        })
        .collect();
    PressureUpdate { m_w, m_o, residual }
}

fn assemble_pressure(ctx: &StepContext<'_>, state: &State) -> AssembledSystem {
    let (disc, fluid, dt) = (ctx.disc, ctx.fluid, ctx.dt);
    let n = disc.n();
    let p = &state.p;
    let upd = pressure_residual(ctx, p);
    let bw: Vec<_> = p.iter().map(|&x| fluid.b_water(x)).collect();
    let bo: Vec<_> = p.iter().map(|&x| fluid.b_oil(x)).collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(5); n];
    // dG_i/dp_k = d(pv)/dp - sum_alpha [dM/dp_k / b - M b' / b^2 (k == i)]
    for i in 0..n {
        let pm = fluid.pore_mult(p[i]);
        let d = disc.pv0[i] * pm.d + upd.m_w[i] * bw[i].d / (bw[i].v * bw[i].v)
            + upd.m_o[i] * bo[i].d / (bo[i].v * bo[i].v);
        rows[i].push((i, d));
    }
    // dM_alpha,i/dp_k = -dt (dF/dp_k) for outflow from i; G gets -dM/b so +dt dF / b
    for c in &disc.conns {
        let (pa, pb) = (p[c.a], p[c.b]);
        let (sa, sb) = (ctx.old_sw[c.a], ctx.old_sw[c.b]);
        let (_, wa, wb, _, _) = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_water(s), |q| fluid.b_water(q));
        let (_, oa, ob, _, _) = phase_flux(c.trans, pa, pb, sa, sb, |s| fluid.mob_oil(s), |q| fluid.b_oil(q));
        for (cell, sign) in [(c.a, dt), (c.b, -dt)] {
            let (iw, io) = (1.0 / bw[cell].v, 1.0 / bo[cell].v);
            rows[cell].push((c.a, sign * (wa * iw + oa * io)));
            rows[cell].push((c.b, sign * (wb * iw + ob * io)));
        }
    }
    let mut well_flops = 0.0;
    for (w, ctl) in disc.wells.iter().zip(ctx.controls) {
        let k = w.cell;
        let t = well_term(fluid, w.kind, w.wi, *ctl, p[k], ctx.old_sw[k]);
        rows[k].push((k, dt * (t.dqw_dp / bw[k].v + t.dqo_dp / bo[k].v)));
        well_flops += 40.0;
    }
    let rhs = upd.residual.iter().map(|r| -r).collect();
    let residual_norm = scaled_norm(disc, &upd.residual);
    let flops = 30.0 * n as f64 + 70.0 * disc.conns.len() as f64;
    AssembledSystem { matrix: CsrMatrix::from_rows(n, 1, rows), rhs, residual_norm, flops, well_flops }
}
