//! Built-in cases used for verification and examples.

use super::model::{
    FluidModel, GridModel, NumericalControls, ScheduleInterval, SimulationCase, WellControl, WellKind, WellSpec,
};

/// Quarter five-spot on a heterogeneous 20x20 grid: a rate-controlled
/// water injector in one corner and a BHP producer in the opposite one.
pub fn reference_case() -> SimulationCase {
    let (nx, ny) = (20, 20);
    let mut grid = GridModel::uniform(nx, ny, [20.0, 20.0, 10.0], 100.0, 0.2);
    for j in 0..ny {
        for i in 0..nx {
            let c = grid.cell_index(i, j);
            let (x, y) = (i as f64 / nx as f64, j as f64 / ny as f64);
            let lnk = 4.6 + 0.8 * (6.0 * x).sin() * (4.0 * y).cos() + 0.4 * (9.0 * (x + y)).sin();
            grid.perm_x[c] = lnk.exp();
            grid.perm_y[c] = 0.5 * lnk.exp();
            grid.porosity[c] = (0.12 + 0.02 * (lnk - 4.6)).clamp(0.05, 0.35);
        }
    }
    let horizon = 100.0;
    let wells = vec![
        WellSpec {
            name: "INJ".into(),
            cell: grid.cell_index(0, 0),
            kind: WellKind::Injector,
            well_index: 50.0,
            schedule: vec![ScheduleInterval { start_day: 0.0, end_day: horizon, control: WellControl::Rate(60.0) }],
        },
        WellSpec {
            name: "PROD".into(),
            cell: grid.cell_index(nx - 1, ny - 1),
            kind: WellKind::Producer,
            well_index: 50.0,
            schedule: vec![ScheduleInterval { start_day: 0.0, end_day: horizon, control: WellControl::Bhp(200.0) }],
        },
    ];
    let n = nx * ny;
    SimulationCase {
        grid,
        fluid: FluidModel::default(),
        wells,
        controls: NumericalControls::default(),
        horizon_days: horizon,
        report_interval_days: 10.0,
        initial_pressure: vec![250.0; n],
        initial_sw: vec![0.15; n],
    }
}
