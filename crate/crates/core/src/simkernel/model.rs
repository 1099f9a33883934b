//! Input description of a simulation: grid, fluid, wells, numerical controls.

use serde::{Deserialize, Serialize};

use super::SimError;

/// Cap applied when the cut limit is "unlimited".
pub const UNLIMITED_CUTS: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub nx: usize,
    pub ny: usize,
    /// Cell sizes in metres.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Permeability maps in mD, row-major with `x` fastest.
    pub perm_x: Vec<f64>,
    pub perm_y: Vec<f64>,
    pub porosity: Vec<f64>,
    pub active: Vec<bool>,
    pub depth: f64,
}

impl GridModel {
    /// Homogeneous grid with every cell active.
    pub fn uniform(nx: usize, ny: usize, d: [f64; 3], perm: f64, poro: f64) -> Self {
        let n = nx * ny;
        Self {
            nx,
            ny,
            dx: d[0],
            dy: d[1],
            dz: d[2],
            perm_x: vec![perm; n],
            perm_y: vec![perm; n],
            porosity: vec![poro; n],
            active: vec![true; n],
            depth: 2000.0,
        }
    }

    pub fn total_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn active_cells(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    fn validate(&self, errs: &mut Vec<String>) {
        let n = self.total_cells();
        if n == 0 {
            errs.push("grid has no cells".into());
            return;
        }
        for (name, len) in [
            ("perm_x", self.perm_x.len()),
            ("perm_y", self.perm_y.len()),
            ("porosity", self.porosity.len()),
            ("active", self.active.len()),
        ] {
            if len != n {
                errs.push(format!("{name} has {len} entries, expected {n}"));
            }
        }
        if !errs.is_empty() {
            return;
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dz > 0.0) {
            errs.push("cell dimensions must be positive".into());
        }
        if self.active_cells() == 0 {
            errs.push("grid has no active cells".into());
        }
        for c in 0..n {
            if !self.active[c] {
                continue;
            }
            if !(self.perm_x[c] > 0.0 && self.perm_y[c] > 0.0)
                || !self.perm_x[c].is_finite()
                || !self.perm_y[c].is_finite()
            {
                errs.push(format!("cell {c}: permeability must be positive and finite"));
            }
            if !(self.porosity[c] > 0.0 && self.porosity[c] < 1.0) {
                errs.push(format!("cell {c}: porosity {} outside (0, 1)", self.porosity[c]));
            }
        }
    }
}

/// Slightly compressible oil-water fluid with Corey relative permeabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidModel {
    /// Viscosities in cP.
    pub mu_o: f64,
    pub mu_w: f64,
    /// Compressibilities in 1/bar.
    pub c_o: f64,
    pub c_w: f64,
    pub c_r: f64,
    pub n_o: f64,
    pub n_w: f64,
    /// Connate water and residual oil saturations.
    pub swc: f64,
    pub sor: f64,
    pub krw_max: f64,
    pub kro_max: f64,
    /// Reference pressure in bar.
    pub p_ref: f64,
}

impl Default for FluidModel {
    fn default() -> Self {
        Self {
            mu_o: 3.0,
            mu_w: 0.5,
            c_o: 1e-4,
            c_w: 4e-5,
            c_r: 3e-5,
            n_o: 2.0,
            n_w: 2.0,
            swc: 0.1,
            sor: 0.15,
            krw_max: 0.6,
            kro_max: 0.9,
            p_ref: 250.0,
        }
    }
}

impl FluidModel {
    fn validate(&self, errs: &mut Vec<String>) {
        if !(self.mu_o > 0.0 && self.mu_w > 0.0) {
            errs.push("viscosities must be positive".into());
        }
        if !(self.c_o >= 0.0 && self.c_w >= 0.0 && self.c_r >= 0.0) {
            errs.push("compressibilities must be non-negative".into());
        }
        if !(self.n_o >= 1.0 && self.n_w >= 1.0) {
            errs.push("Corey exponents must be at least 1".into());
        }
        for (name, v) in [
            ("swc", self.swc),
            ("sor", self.sor),
            ("krw_max", self.krw_max),
            ("kro_max", self.kro_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.swc + self.sor >= 1.0 {
            errs.push("swc + sor must be below 1".into());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WellKind {
    Injector,
    Producer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WellControl {
    /// Surface rate in m3/day: water for injectors, total liquid for producers.
    Rate(f64),
    /// Bottom-hole pressure in bar.
    Bhp(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInterval {
    pub start_day: f64,
    pub end_day: f64,
    pub control: WellControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellSpec {
    pub name: String,
    /// Global cell index (`i + nx * j`).
    pub cell: usize,
    pub kind: WellKind,
    /// Productivity factor in m3 cP / (day bar).
    pub well_index: f64,
    pub schedule: Vec<ScheduleInterval>,
}

impl WellSpec {
    /// Control active at time `t`, if any. Intervals are half-open `[start, end)`.
    pub fn control_at(&self, t: f64) -> Option<WellControl> {
        self.schedule
            .iter()
            .find(|iv| t >= iv.start_day && t < iv.end_day)
            .map(|iv| iv.control)
    }

    fn validate(&self, grid: &GridModel, horizon: f64, errs: &mut Vec<String>) {
        if self.cell >= grid.total_cells() || !grid.active.get(self.cell).copied().unwrap_or(false) {
            errs.push(format!("well {}: cell {} is not an active cell", self.name, self.cell));
        }
        if !(self.well_index > 0.0) {
            errs.push(format!("well {}: well index must be positive", self.name));
        }
        let mut ivs: Vec<&ScheduleInterval> = self.schedule.iter().collect();
        ivs.sort_by(|a, b| a.start_day.total_cmp(&b.start_day));
        for iv in &ivs {
            if !(iv.start_day >= 0.0 && iv.end_day > iv.start_day && iv.end_day <= horizon + 1e-9) {
                errs.push(format!(
                    "well {}: interval [{}, {}) not within horizon {horizon}",
                    self.name, iv.start_day, iv.end_day
                ));
            }
            match iv.control {
                WellControl::Rate(q) if !(q >= 0.0) => {
                    errs.push(format!("well {}: negative rate {q}", self.name))
                }
                WellControl::Bhp(p) if !p.is_finite() => {
                    errs.push(format!("well {}: non-finite bhp", self.name))
                }
                _ => {}
            }
        }
        for w in ivs.windows(2) {
            if w[1].start_day < w[0].end_day {
                errs.push(format!("well {}: overlapping schedule intervals", self.name));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ordering {
    #[serde(rename = "natural")]
    Natural,
    #[serde(rename = "red-black")]
    RedBlack,
    #[serde(rename = "rcm")]
    Rcm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formulation {
    #[serde(rename = "fully-implicit")]
    FullyImplicit,
    #[serde(rename = "impes")]
    Impes,
}

/// Tunable numerical controls of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalControls {
    pub dt_min: f64,
    pub dt_max: f64,
    pub newton_max: u32,
    pub lin_iter_max: u32,
    pub lin_tol: f64,
    pub north_restart: u32,
    /// `None` means unlimited (capped at [`UNLIMITED_CUTS`]).
    pub ncuts_max: Option<u32>,
    pub norm_press: f64,
    pub maxchange_press: f64,
    pub norm_satur: f64,
    pub maxchange_satur: f64,
    pub ordering: Ordering,
    pub solver_kind: SolverKind,
    pub pivot_stab: bool,
    pub formulation: Formulation,
}

impl Default for NumericalControls {
    fn default() -> Self {
        Self {
            dt_min: 1e-3,
            dt_max: 365.0,
            newton_max: 10,
            lin_iter_max: 10,
            lin_tol: 1e-4,
            north_restart: 30,
            ncuts_max: None,
            norm_press: 30.0,
            maxchange_press: 60.0,
            norm_satur: 0.1,
            maxchange_satur: 0.1,
            ordering: Ordering::RedBlack,
            solver_kind: SolverKind::Iterative,
            pivot_stab: false,
            formulation: Formulation::FullyImplicit,
        }
    }
}

impl NumericalControls {
    pub fn cut_cap(&self) -> u32 {
        self.ncuts_max.unwrap_or(UNLIMITED_CUTS)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut errs = Vec::new();
        self.check(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidCase(errs))
        }
    }

    fn check(&self, errs: &mut Vec<String>) {
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            errs.push(format!("need 0 < dt_min <= dt_max (got {} / {})", self.dt_min, self.dt_max));
        }
        if self.maxchange_press < self.norm_press || self.norm_press <= 0.0 {
            errs.push("need 0 < norm_press <= maxchange_press".into());
        }
        if self.maxchange_satur < self.norm_satur || self.norm_satur <= 0.0 {
            errs.push("need 0 < norm_satur <= maxchange_satur".into());
        }
        // Tighter tolerances than the tunable range are allowed for verification runs.
        if !(self.lin_tol >= 1e-14 && self.lin_tol <= 1e-2) {
            errs.push(format!("lin_tol {} outside [1e-14, 1e-2]", self.lin_tol));
        }
        if self.newton_max < 1 || self.lin_iter_max < 1 || self.north_restart < 1 {
            errs.push("iteration limits must be at least 1".into());
        }
        if self.ncuts_max == Some(0) {
            errs.push("ncuts_max must be at least 1".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCase {
    pub grid: GridModel,
    pub fluid: FluidModel,
    pub wells: Vec<WellSpec>,
    pub controls: NumericalControls,
    pub horizon_days: f64,
    pub report_interval_days: f64,
    /// Per-cell initial pressure (bar) and water saturation.
    pub initial_pressure: Vec<f64>,
    pub initial_sw: Vec<f64>,
}

impl SimulationCase {
    pub fn validate(&self) -> Result<(), SimError> {
        let mut errs = Vec::new();
        self.grid.validate(&mut errs);
        self.fluid.validate(&mut errs);
        self.controls.check(&mut errs);
        if !(self.horizon_days > 0.0) {
            errs.push("horizon_days must be positive".into());
        }
        if !(self.report_interval_days > 0.0 && self.report_interval_days <= self.horizon_days) {
            errs.push("report_interval_days must be in (0, horizon_days]".into());
        }
        let n = self.grid.total_cells();
        if self.initial_pressure.len() != n || self.initial_sw.len() != n {
            errs.push(format!("initial fields must have {n} entries"));
        } else {
            for c in 0..n {
                if !self.grid.active[c] {
                    continue;
                }
                if !self.initial_pressure[c].is_finite() {
                    errs.push(format!("cell {c}: non-finite initial pressure"));
                }
                if !(0.0..=1.0).contains(&self.initial_sw[c]) {
                    errs.push(format!("cell {c}: initial sw outside [0, 1]"));
                }
            }
        }
        let mut names = std::collections::HashSet::new();
        for w in &self.wells {
            if !names.insert(w.name.as_str()) {
                errs.push(format!("duplicate well name {}", w.name));
            }
            if w.name.is_empty() || w.name.contains([',', '=', '\n']) {
                errs.push(format!("well name {:?} is not a valid identifier", w.name));
            }
            w.validate(&self.grid, self.horizon_days, &mut errs);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidCase(errs))
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_case() -> SimulationCase {
        let grid = GridModel::uniform(3, 3, [10.0, 10.0, 5.0], 100.0, 0.2);
        SimulationCase {
            initial_pressure: vec![250.0; 9],
            initial_sw: vec![0.2; 9],
            grid,
            fluid: FluidModel::default(),
            wells: vec![],
            controls: NumericalControls::default(),
            horizon_days: 10.0,
            report_interval_days: 5.0,
        }
    }

    #[test]
    fn valid_case_passes() {
        small_case().validate().unwrap();
    }

    #[test]
    fn bad_porosity_rejected() {
        let mut c = small_case();
        c.grid.porosity[4] = 1.2;
        let SimError::InvalidCase(errs) = c.validate().unwrap_err() else { panic!() };
        assert!(errs.iter().any(|e| e.contains("porosity")));
    }

    #[test]
    fn overlapping_schedule_rejected() {
        let mut c = small_case();
        c.wells.push(WellSpec {
            name: "P1".into(),
            cell: 0,
            kind: WellKind::Producer,
            well_index: 1.0,
            schedule: vec![
                ScheduleInterval { start_day: 0.0, end_day: 6.0, control: WellControl::Bhp(200.0) },
                ScheduleInterval { start_day: 5.0, end_day: 10.0, control: WellControl::Bhp(190.0) },
            ],
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn controls_cross_field_rules() {
        let mut ctl = NumericalControls::default();
        ctl.dt_min = 10.0;
        ctl.dt_max = 5.0;
        assert!(ctl.validate().is_err());
        let mut ctl = NumericalControls::default();
        ctl.norm_press = 100.0;
        assert!(ctl.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = small_case();
        let back = SimulationCase::from_json(&c.to_json()).unwrap();
        assert_eq!(c, back);
    }
}
