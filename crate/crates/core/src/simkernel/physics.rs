//! Fluid and rock property evaluation with analytic derivatives.

use super::model::{FluidModel, GridModel};

/// Darcy conversion constant for metric units:
/// q [m3/day] = C * k [mD] * A [m2] * dp [bar] / (mu [cP] * L [m]).
pub const DARCY: f64 = 0.008_526_7;

/// Value and derivative pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl FluidModel {
    /// Water expansion factor `b_w(p) = exp(c_w (p - p_ref))`.
    pub fn b_water(&self, p: f64) -> Dual {
        let v = (self.c_w * (p - self.p_ref)).exp();
        Dual { v, d: self.c_w * v }
    }

    pub fn b_oil(&self, p: f64) -> Dual {
        let v = (self.c_o * (p - self.p_ref)).exp();
        Dual { v, d: self.c_o * v }
    }

    /// Pore-volume multiplier `exp(c_r (p - p_ref))`.
    pub fn pore_mult(&self, p: f64) -> Dual {
        let v = (self.c_r * (p - self.p_ref)).exp();
        Dual { v, d: self.c_r * v }
    }

    fn normalized_sw(&self, sw: f64) -> (f64, f64) {
        let span = 1.0 - self.swc - self.sor;
        let s = (sw - self.swc) / span;
        if s <= 0.0 {
            (0.0, 0.0)
        } else if s >= 1.0 {
            (1.0, 0.0)
        } else {
            (s, 1.0 / span)
        }
    }

    /// Water mobility `krw / mu_w` and its saturation derivative.
    pub fn mob_water(&self, sw: f64) -> Dual {
        let (s, ds) = self.normalized_sw(sw);
        let kr = self.krw_max * s.powf(self.n_w);
        let dkr = if s > 0.0 { self.krw_max * self.n_w * s.powf(self.n_w - 1.0) * ds } else { 0.0 };
        Dual { v: kr / self.mu_w, d: dkr / self.mu_w }
    }

    /// Oil mobility `kro / mu_o` and its water-saturation derivative.
    pub fn mob_oil(&self, sw: f64) -> Dual {
        let (s, ds) = self.normalized_sw(sw);
        let so = 1.0 - s;
        let kr = self.kro_max * so.powf(self.n_o);
        let dkr = if so > 0.0 { -self.kro_max * self.n_o * so.powf(self.n_o - 1.0) * ds } else { 0.0 };
        Dual { v: kr / self.mu_o, d: dkr / self.mu_o }
    }
}

/// Harmonic average of two half-cell conductances.
pub fn harmonic(k1: f64, k2: f64) -> f64 {
    2.0 * k1 * k2 / (k1 + k2)
}

/// A face between two active cells (local indices) with its geometric
/// transmissibility in m3 cP / (day bar).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Connection {
    pub a: usize,
    pub b: usize,
    pub trans: f64,
}

/// Face transmissibility between two equally sized cells.
pub fn face_transmissibility(k_a: f64, k_b: f64, area: f64, length: f64) -> f64 {
    DARCY * area * harmonic(k_a, k_b) / length
}

/// TPFA connection list over active cells. `local[c]` maps global to local index.
pub fn connections(grid: &GridModel, local: &[Option<usize>]) -> Vec<Connection> {
    let mut out = Vec::new();
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let c = grid.cell_index(i, j);
            let Some(a) = local[c] else { continue };
            if i + 1 < grid.nx {
                let e = grid.cell_index(i + 1, j);
                if let Some(b) = local[e] {
                    let trans = face_transmissibility(grid.perm_x[c], grid.perm_x[e], grid.dy * grid.dz, grid.dx);
                    out.push(Connection { a, b, trans });
                }
            }
            if j + 1 < grid.ny {
                let n = grid.cell_index(i, j + 1);
                if let Some(b) = local[n] {
                    let trans = face_transmissibility(grid.perm_y[c], grid.perm_y[n], grid.dx * grid.dz, grid.dy);
                    out.push(Connection { a, b, trans });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_of_equals() {
        assert_eq!(harmonic(150.0, 150.0), 150.0);
        let t = face_transmissibility(150.0, 150.0, 50.0, 10.0);
        assert!((t - DARCY * 150.0 * 50.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn harmonic_limit_is_twice_small_perm() {
        let t = face_transmissibility(1.0, 1e12, 1.0, 1.0);
        assert!((t / DARCY - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mobility_derivatives_match_finite_differences() {
        let f = FluidModel::default();
        for &sw in &[0.2, 0.35, 0.5, 0.7, 0.8] {
            let h = 1e-7;
            for mob in [FluidModel::mob_water, FluidModel::mob_oil] {
                let fd = (mob(&f, sw + h).v - mob(&f, sw - h).v) / (2.0 * h);
                let an = mob(&f, sw).d;
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3));
            }
        }
    }
}
