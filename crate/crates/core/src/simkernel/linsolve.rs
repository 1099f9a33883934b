//! Linear solvers: banded LU (direct) and restarted GMRES with an ILU(0)
//! preconditioner (iterative), plus the unknown orderings applied before
//! factorization.

use std::collections::VecDeque;

use thiserror::Error;

use super::model::{NumericalControls, Ordering, SolverKind};
use super::sparse::CsrMatrix;

/// Relative diagonal shift applied when pivot stabilization is on.
pub const PIVOT_SHIFT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinSolveError {
    #[error("dimension mismatch: matrix {matrix}, rhs {rhs}")]
    DimensionMismatch { matrix: usize, rhs: usize },
    #[error("matrix is structurally singular (empty row or column)")]
    StructurallySingular,
    #[error("zero pivot at row {0}")]
    ZeroPivot(usize),
}

#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub x: Vec<f64>,
    pub iterations: u32,
    pub failed: bool,
    /// Floating point operations spent, for the work clock.
    pub flops: f64,
    /// Working storage high-water mark in bytes.
    pub memory_bytes: f64,
}

/// Solves `A x = b` with the solver selected by `controls`.
pub fn linear_solve(
    a: &CsrMatrix,
    b: &[f64],
    controls: &NumericalControls,
) -> Result<LinearSolution, LinSolveError> {
    if a.n != b.len() {
        return Err(LinSolveError::DimensionMismatch { matrix: a.n, rhs: b.len() });
    }
    if a.n == 0 {
        return Ok(LinearSolution { x: vec![], iterations: 0, failed: false, flops: 0.0, memory_bytes: 0.0 });
    }
    if a.has_empty_row_or_column() {
        return Err(LinSolveError::StructurallySingular);
    }
    let perm = ordering_permutation(a, controls.ordering);
    let pa = a.permuted(&perm);
    let pb: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
    let base_flops = 2.0 * a.nnz() as f64;
    let mut sol = match controls.solver_kind {
        SolverKind::Direct => {
            let lu = BandLu::factor(&pa)?;
            let x = lu.solve(&pb);
            LinearSolution {
                x,
                iterations: 1,
                failed: false,
                flops: lu.factor_flops + lu.solve_flops(),
                memory_bytes: lu.memory_bytes(),
            }
        }
        SolverKind::Iterative => {
            let mut m = pa.clone();
            if controls.pivot_stab {
                stabilize_diagonal(&mut m);
            }
            let ilu = Ilu0::factor(&m)?;
            let res = gmres(
                &pa,
                &pb,
                &ilu,
                controls.north_restart as usize,
                controls.lin_tol,
                controls.lin_iter_max,
            );
            LinearSolution {
                x: res.x,
                iterations: res.iterations,
                failed: !res.converged,
                flops: ilu.factor_flops + res.flops,
                memory_bytes: (pa.nnz() * 2) as f64 * 12.0
                    + (controls.north_restart as f64 + 2.0) * 2.0 * pa.n as f64 * 8.0,
            }
        }
    };
    let mut x = vec![0.0; a.n];
    for (new, &old) in perm.iter().enumerate() {
        x[old] = sol.x[new];
    }
    sol.x = x;
    sol.flops += base_flops;
    Ok(sol)
}

/// Unknown permutation (`perm[new] = old`) for the requested ordering.
/// Orderings act on blocks of `block_size` unknowns so a cell's unknowns
/// stay adjacent.
pub fn ordering_permutation(a: &CsrMatrix, ordering: Ordering) -> Vec<usize> {
    let bs = a.block_size.max(1);
    if a.n % bs != 0 {
        return (0..a.n).collect();
    }
    let nb = a.n / bs;
    let block_order: Vec<usize> = match ordering {
        Ordering::Natural => (0..nb).collect(),
        Ordering::RedBlack => red_black(&block_graph(a, nb, bs)),
        Ordering::Rcm => reverse_cuthill_mckee(&block_graph(a, nb, bs)),
    };
    block_order
        .iter()
        .flat_map(|&blk| (0..bs).map(move |k| blk * bs + k))
        .collect()
}

fn block_graph(a: &CsrMatrix, nb: usize, bs: usize) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for i in 0..a.n {
        let bi = i / bs;
        for (j, _) in a.row(i) {
            let bj = j / bs;
            if bi != bj {
                adj[bi].push(bj);
                adj[bj].push(bi);
            }
        }
    }
    for nbrs in adj.iter_mut() {
        nbrs.sort_unstable();
        nbrs.dedup();
    }
    adj
}

/// Two-colouring by breadth-first parity; first colour numbered first.
fn red_black(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut color = vec![usize::MAX; n];
    for s in 0..n {
        if color[s] != usize::MAX {
            continue;
        }
        color[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if color[v] == usize::MAX {
                    color[v] = 1 - color[u];
                    q.push_back(v);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| color[i] == 0).collect();
    order.extend((0..n).filter(|&i| color[i] == 1));
    order
}

fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (deg[i], i))
            .expect("unvisited node exists");
        visited[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| (deg[v], v));
            for v in nbrs {
                visited[v] = true;
                q.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

fn stabilize_diagonal(m: &mut CsrMatrix) {
    let row_max = m.row_max_abs();
    for i in 0..m.n {
        for k in m.row_ptr[i]..m.row_ptr[i + 1] {
            if m.col_idx[k] == i {
                let shift = PIVOT_SHIFT * row_max[i];
                m.values[k] += if m.values[k] < 0.0 { -shift } else { shift };
            }
        }
    }
}

/// LU factorization with partial pivoting in band storage.
pub struct BandLu {
    n: usize,
    kl: usize,
    width: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
    pub factor_flops: f64,
}

impl BandLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinSolveError> {
        let n = a.n;
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut lu = Self { n, kl, width, data: vec![0.0; n * width], piv: vec![0; n], factor_flops: 0.0 };
        for i in 0..n {
            for (j, v) in a.row(i) {
                let idx = lu.idx(i, j);
                lu.data[idx] = v;
            }
        }
        let ucols = kl + ku;
        let mut flops = 0.0;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ucols).min(n - 1);
            let mut p = k;
            let mut best = lu.data[lu.idx(k, k)].abs();
            for r in k + 1..=last_row {
                let v = lu.data[lu.idx(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 {
                return Err(LinSolveError::ZeroPivot(k));
            }
            lu.piv[k] = p;
            if p != k {
                for c in k..=last_col {
                    let (ik, ip) = (lu.idx(k, c), lu.idx(p, c));
                    lu.data.swap(ik, ip);
                }
            }
            let pivot = lu.data[lu.idx(k, k)];
            for r in k + 1..=last_row {
                let irk = lu.idx(r, k);
                if lu.data[irk] == 0.0 {
                    continue;
                }
                let l = lu.data[irk] / pivot;
                lu.data[irk] = l;
                for c in k + 1..=last_col {
                    let kc = lu.data[lu.idx(k, c)];
                    let irc = lu.idx(r, c);
                    lu.data[irc] -= l * kc;
                }
                flops += 1.0 + 2.0 * (last_col - k) as f64;
            }
        }
        lu.factor_flops = flops;
        Ok(lu)
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        r * self.width + (c + self.kl - r)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        let ucols = self.width - 1 - self.kl;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                y.swap(k, p);
            }
            let last_row = (k + self.kl).min(n - 1);
            for r in k + 1..=last_row {
                y[r] -= self.data[self.idx(r, k)] * y[k];
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + ucols).min(n - 1);
            let mut acc = y[k];
            for c in k + 1..=last_col {
                acc -= self.data[self.idx(k, c)] * y[c];
            }
            y[k] = acc / self.data[self.idx(k, k)];
        }
        y
    }

    pub fn solve_flops(&self) -> f64 {
        2.0 * self.n as f64 * (self.width as f64)
    }

    pub fn memory_bytes(&self) -> f64 {
        (self.data.len() * 8 + self.piv.len() * 8) as f64
    }
}

/// Incomplete LU with zero fill on the sparsity pattern of `A`.
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
    pub factor_flops: f64,
}

impl Ilu0 {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinSolveError> {
        let n = a.n;
        let mut lu = a.clone();
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for k in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.col_idx[k] == i {
                    diag[i] = k;
                }
            }
            if diag[i] == usize::MAX {
                return Err(LinSolveError::ZeroPivot(i));
            }
        }
        let mut pos = vec![usize::MAX; n];
        let mut flops = 0.0;
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in start..end {
                pos[lu.col_idx[k]] = k;
            }
            for kk in start..end {
                let k = lu.col_idx[kk];
                if k >= i {
                    break;
                }
                let pivot = lu.values[diag[k]];
                if pivot == 0.0 {
                    return Err(LinSolveError::ZeroPivot(k));
                }
                let l = lu.values[kk] / pivot;
                lu.values[kk] = l;
                for jj in diag[k] + 1..lu.row_ptr[k + 1] {
                    let j = lu.col_idx[jj];
                    let p = pos[j];
                    if p != usize::MAX && p >= start && p < end {
                        lu.values[p] -= l * lu.values[jj];
                        flops += 2.0;
                    }
                }
                flops += 1.0;
            }
            for k in start..end {
                pos[lu.col_idx[k]] = usize::MAX;
            }
            if lu.values[diag[i]] == 0.0 {
                return Err(LinSolveError::ZeroPivot(i));
            }
        }
        Ok(Self { lu, diag, factor_flops: flops })
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.lu.n;
        for i in 0..n {
            let mut acc = r[i];
            for k in self.lu.row_ptr[i]..self.diag[i] {
                acc -= self.lu.values[k] * z[self.lu.col_idx[k]];
            }
            z[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = z[i];
            for k in self.diag[i] + 1..self.lu.row_ptr[i + 1] {
                acc -= self.lu.values[k] * z[self.lu.col_idx[k]];
            }
            z[i] = acc / self.lu.values[self.diag[i]];
        }
    }

    fn apply_flops(&self) -> f64 {
        2.0 * self.lu.nnz() as f64
    }
}

pub struct GmresResult {
    pub x: Vec<f64>,
    pub iterations: u32,
    pub converged: bool,
    pub flops: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Right-preconditioned restarted GMRES. `max_iter` caps the total number
/// of Arnoldi steps across restarts.
pub fn gmres(a: &CsrMatrix, b: &[f64], precond: &Ilu0, restart: usize, tol: f64, max_iter: u32) -> GmresResult {
    let n = a.n;
    let restart = restart.max(1);
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    let mut flops = 2.0 * n as f64;
    if bnorm == 0.0 {
        return GmresResult { x, iterations: 0, converged: true, flops };
    }
    let step_flops = 2.0 * a.nnz() as f64 + precond.apply_flops();
    let mut total: u32 = 0;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        a.matvec(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        flops += 2.0 * a.nnz() as f64 + 3.0 * n as f64;
        let beta = norm(&r);
        if beta / bnorm <= tol {
            return GmresResult { x, iterations: total, converged: true, flops };
        }
        if total >= max_iter {
            return GmresResult { x, iterations: total, converged: false, flops };
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut used = 0;
        let mut done = false;
        for j in 0..restart {
            if total >= max_iter {
                break;
            }
            precond.apply(&basis[j], &mut z);
            a.matvec(&z, &mut w);
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(&w, v);
                h[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= hij * vk;
                }
            }
            let hnext = norm(&w);
            h[j + 1][j] = hnext;
            flops += step_flops + 4.0 * n as f64 * (j as f64 + 2.0);
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let denom = (h[j][j] * h[j][j] + h[j + 1][j] * h[j + 1][j]).sqrt();
            if denom == 0.0 {
                cs[j] = 1.0;
                sn[j] = 0.0;
            } else {
                cs[j] = h[j][j] / denom;
                sn[j] = h[j + 1][j] / denom;
            }
            h[j][j] = cs[j] * h[j][j] + sn[j] * h[j + 1][j];
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            total += 1;
            used = j + 1;
            if (g[j + 1].abs() / bnorm) <= tol || hnext == 0.0 {
                done = true;
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        if used > 0 {
            let mut y = vec![0.0; used];
            for i in (0..used).rev() {
                let mut acc = g[i];
                for k in i + 1..used {
                    acc -= h[i][k] * y[k];
                }
                y[i] = if h[i][i] != 0.0 { acc / h[i][i] } else { 0.0 };
            }
            let mut comb = vec![0.0; n];
            for (k, yk) in y.iter().enumerate() {
                for (c, v) in comb.iter_mut().zip(&basis[k]) {
                    *c += yk * v;
                }
            }
            precond.apply(&comb, &mut z);
            for i in 0..n {
                x[i] += z[i];
            }
            flops += 2.0 * (n * used) as f64 + precond.apply_flops() + n as f64;
        }
        if done {
            return GmresResult { x, iterations: total, converged: true, flops };
        }
        if total >= max_iter {
            // one last residual check so the flag reflects the returned iterate
            a.matvec(&x, &mut r);
            let res: f64 = b.iter().zip(&r).map(|(bi, ri)| (bi - ri) * (bi - ri)).sum::<f64>().sqrt();
            flops += 2.0 * a.nnz() as f64 + 3.0 * n as f64;
            return GmresResult { x, iterations: total, converged: res / bnorm <= tol, flops };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn controls(kind: SolverKind, ordering: Ordering) -> NumericalControls {
        NumericalControls {
            solver_kind: kind,
            ordering,
            lin_tol: 1e-12,
            lin_iter_max: 200,
            ..NumericalControls::default()
        }
    }

    fn laplacian_2d(nx: usize, ny: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let c = i + nx * j;
                t.push((c, c, 4.1));
                if i > 0 {
                    t.push((c, c - 1, -1.0));
                }
                if i + 1 < nx {
                    t.push((c, c + 1, -1.0));
                }
                if j > 0 {
                    t.push((c, c - nx, -1.0));
                }
                if j + 1 < ny {
                    t.push((c, c + nx, -1.0));
                }
            }
        }
        CsrMatrix::from_triplets(nx * ny, 1, &t)
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let a = CsrMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 7.0];
        for kind in [SolverKind::Direct, SolverKind::Iterative] {
            let s = linear_solve(&a, &b, &controls(kind, Ordering::Natural)).unwrap();
            assert_eq!(s.iterations, 1);
            assert!(!s.failed);
            for (x, y) in s.x.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spd_two_by_two() {
        let a = CsrMatrix::from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let b = [1.0, 2.0];
        for kind in [SolverKind::Direct, SolverKind::Iterative] {
            let s = linear_solve(&a, &b, &controls(kind, Ordering::Rcm)).unwrap();
            assert!((s.x[0] - 1.0 / 11.0).abs() < 1e-12);
            assert!((s.x[1] - 7.0 / 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iteration_cap_flags_failure() {
        // 50x50 ill-conditioned nonsymmetric tridiagonal system
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 1e-3 * (i as f64 + 1.0)));
            if i > 0 {
                t.push((i, i - 1, 1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, 1, &t);
        let b: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut c = controls(SolverKind::Iterative, Ordering::Natural);
        c.lin_iter_max = 1;
        c.lin_tol = 1e-10;
        // ILU(0) of a tridiagonal is exact, so break the pattern with a far coupling
        let mut t2 = t.clone();
        t2.push((0, n - 1, 5.0));
        t2.push((n - 1, 0, -5.0));
        let a2 = CsrMatrix::from_triplets(n, 1, &t2);
        let s = linear_solve(&a2, &b, &c).unwrap();
        assert!(s.failed);
        assert_eq!(s.iterations, 1);
        let _ = a;
    }

    #[test]
    fn structurally_singular_is_hard_error() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        for kind in [SolverKind::Direct, SolverKind::Iterative] {
            let e = linear_solve(&a, &[1.0, 1.0], &controls(kind, Ordering::Natural)).unwrap_err();
            assert_eq!(e, LinSolveError::StructurallySingular);
        }
    }

    #[test]
    fn orderings_agree_on_laplacian() {
        let a = laplacian_2d(7, 5);
        let b: Vec<f64> = (0..35).map(|i| (i as f64).sin()).collect();
        let reference = linear_solve(&a, &b, &controls(SolverKind::Direct, Ordering::Natural)).unwrap().x;
        for ord in [Ordering::Natural, Ordering::RedBlack, Ordering::Rcm] {
            for kind in [SolverKind::Direct, SolverKind::Iterative] {
                let x = linear_solve(&a, &b, &controls(kind, ord)).unwrap().x;
                for (u, v) in x.iter().zip(&reference) {
                    assert!((u - v).abs() < 1e-9, "{ord:?} {kind:?}");
                }
            }
        }
    }

    #[test]
    fn band_lu_pivots() {
        let a = CsrMatrix::from_dense(&[
            vec![0.0, 2.0, 0.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 3.0, 4.0],
        ]);
        let lu = BandLu::factor(&a).unwrap();
        let x = lu.solve(&[2.0, 3.0, 7.0]);
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
        assert!((x[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn red_black_separates_colours() {
        let a = laplacian_2d(4, 4);
        let perm = ordering_permutation(&a, Ordering::RedBlack);
        let first: Vec<usize> = perm[..8].to_vec();
        for &c in &first {
            let (i, j) = (c % 4, c / 4);
            assert_eq!((i + j) % 2, 0);
        }
    }

    #[test]
    fn rcm_reduces_bandwidth_of_shuffled_grid() {
        let a = laplacian_2d(10, 3);
        let shuffle: Vec<usize> = (0..30).map(|i| (i * 7) % 30).collect();
        let shuffled = a.permuted(&shuffle);
        let perm = ordering_permutation(&shuffled, Ordering::Rcm);
        let (kl, _) = shuffled.permuted(&perm).bandwidths();
        assert!(kl <= 4, "bandwidth {kl}");
    }
}
