//! Backward solvers for scalar BSDEs: an implicit Lipschitz recursion and a
//! Picard iteration for quadratic drivers with small data.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::ProbabilityModel;
use crate::par;
use crate::process::{sup_norm, Process};
use crate::rates::ConvergenceTable;

/// f(t, time index, sample, y, z).
pub type DriverFn = dyn Fn(f64, usize, usize, f64, &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct Driver {
    pub f: Arc<DriverFn>,
    pub lipschitz: f64,
    /// Optional λ_t (one sample broadcasts) bounding |f| + |∂_y f| at the origin.
    pub lambda: Option<Process>,
    /// Optional μ_t bounding |∂_z f| at the origin.
    pub mu: Option<Process>,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("lipschitz", &self.lipschitz)
            .field("lambda", &self.lambda.is_some())
            .field("mu", &self.mu.is_some())
            .finish()
    }
}

const FD_STEP: f64 = 1e-6;

impl Driver {
    pub fn new<F>(lipschitz: f64, f: F) -> Self
    where
        F: Fn(f64, usize, usize, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), lipschitz, lambda: None, mu: None }
    }

    pub fn zero() -> Self {
        Self::new(0.0, |_, _, _, _, _| 0.0)
    }

    /// f = L |z|².
    pub fn quadratic_z(l: f64) -> Self {
        Self::new(l, move |_, _, _, _, z| l * z.iter().map(|v| v * v).sum::<f64>())
    }

    pub fn with_bounds(mut self, lambda: Process, mu: Process) -> Self {
        self.lambda = Some(lambda);
        self.mu = Some(mu);
        self
    }

    #[inline]
    pub fn eval(&self, t: f64, i: usize, s: usize, y: f64, z: &[f64]) -> f64 {
        (self.f)(t, i, s, y, z)
    }

    /// (∂_y f, ∇_z f) by central differences.
    pub fn gradient(&self, t: f64, i: usize, s: usize, y: f64, z: &[f64]) -> (f64, Vec<f64>) {
        let h = FD_STEP;
        let dy = (self.eval(t, i, s, y + h, z) - self.eval(t, i, s, y - h, z)) / (2.0 * h);
        let mut zz = z.to_vec();
        let dz = (0..z.len())
            .map(|c| {
                zz[c] = z[c] + h;
                let up = self.eval(t, i, s, y, &zz);
                zz[c] = z[c] - h;
                let down = self.eval(t, i, s, y, &zz);
                zz[c] = z[c];
                (up - down) / (2.0 * h)
            })
            .collect();
        (dy, dz)
    }

    /// (λ_i, μ_i) per sample: the given bounds, or origin values when absent.
    pub fn bounds_at(&self, model: &dyn ProbabilityModel, i: usize) -> (Vec<f64>, Vec<f64>) {
        let n = model.n_samples();
        let pick = |p: &Process, s: usize| p.at(i, if p.n_samples() == 1 { 0 } else { s });
        match (&self.lambda, &self.mu) {
            (Some(l), Some(m)) => ((0..n).map(|s| pick(l, s)).collect(), (0..n).map(|s| pick(m, s)).collect()),
            _ => {
                let t = model.grid().t(i);
                let zero = vec![0.0; model.dim()];
                let per: Vec<(f64, f64)> = par::map_indexed(n, |s| {
                    let (dy, dz) = self.gradient(t, i, s, 0.0, &zero);
                    (self.eval(t, i, s, 0.0, &zero).abs() + dy.abs(), dz.iter().map(|v| v * v).sum::<f64>().sqrt())
                });
                let lam = per.iter().map(|p| p.0).fold(0.0, f64::max);
                let mu = per.iter().map(|p| p.1).fold(0.0, f64::max);
                (vec![lam; n], vec![mu; n])
            }
        }
    }

    /// ‖∫₀^T (λ + μ²) dr‖_∞ on the model grid.
    pub fn bound_integral(&self, model: &dyn ProbabilityModel) -> f64 {
        let grid = model.grid();
        let n = model.n_samples();
        let mut acc = vec![0.0; n];
        for i in 0..grid.n_cells() {
            let (l, m) = self.bounds_at(model, i);
            for s in 0..n {
                acc[s] += (l[s] + m[s] * m[s]) * grid.dt(i);
            }
        }
        sup_norm(&acc)
    }

    /// Spot check of the growth bounds at `points` random (node, y, z) with |y|, |z| ≤ `radius`.
    pub fn audit_bounds(&self, model: &dyn ProbabilityModel, points: usize, radius: f64, seed: u64) -> DriverAudit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = model.grid();
        let l = self.lipschitz;
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut violations = 0;
        for _ in 0..points {
            let i = rng.random_range(0..grid.n_cells());
            let s = rng.random_range(0..model.n_samples());
            let y = rng.random_range(-radius..=radius);
            let z: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-radius..=radius)).collect();
            let t = grid.t(i);
            let (lam, mu) = self.bounds_at(model, i);
            let (dy, dz) = self.gradient(t, i, s, y, &z);
            let zn2: f64 = z.iter().map(|v| v * v).sum();
            let e1 = self.eval(t, i, s, y, &z).abs() + dy.abs() - lam[s] - l * (y * y + zn2);
            let e2 = dz.iter().map(|v| v * v).sum::<f64>().sqrt() - mu[s] - l * (y.abs() + zn2.sqrt());
            let e = e1.max(e2);
            if e > 1e-6 {
                violations += 1;
            }
            worst = worst.max(e);
        }
        DriverAudit { points, violations, max_excess: worst }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverAudit {
    pub points: usize,
    pub violations: usize,
    pub max_excess: f64,
}

#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub y: Process,
    /// Z per Brownian component, one row per grid cell.
    pub z: Vec<Process>,
    pub sup_y: f64,
    pub bmo_z: f64,
    pub l2_z: f64,
    pub picard_iterations: usize,
    pub converged: bool,
    /// Successive Picard distances ‖ΔY‖_∞ + ‖ΔZ‖_BMO.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub contraction_warning: bool,
}

impl BsdeSolution {
    fn from_pair(y: Process, z: Vec<Process>, model: &dyn ProbabilityModel) -> Self {
        let sup_y = y.sup_abs();
        let (bmo_z, l2_z) = z_norms(&z, model);
        Self {
            y,
            z,
            sup_y,
            bmo_z,
            l2_z,
            picard_iterations: 0,
            converged: true,
            distances: Vec::new(),
            ratios: Vec::new(),
            contraction_warning: false,
        }
    }

    /// ‖Y‖_∞ + ‖Z‖_BMO.
    pub fn norm(&self) -> f64 {
        self.sup_y + self.bmo_z
    }

    pub fn z_at(&self, i: usize, s: usize) -> Vec<f64> {
        self.z.iter().map(|zc| zc.at(i, s)).collect()
    }
}

/// (‖Z‖_BMO, ‖Z‖₂) with the BMO norm as max over nodes of (𝔼_i Σ_{j≥i} |Z_j|² dt_j)^{1/2}.
pub fn z_norms(z: &[Process], model: &dyn ProbabilityModel) -> (f64, f64) {
    let grid = model.grid();
    let n = model.n_samples();
    let cells = grid.n_cells();
    let mut tail = vec![0.0; n];
    let mut bmo: f64 = 0.0;
    for i in (0..cells).rev() {
        for (s, t) in tail.iter_mut().enumerate() {
            *t += z.iter().map(|zc| zc.at(i, s).powi(2)).sum::<f64>() * grid.dt(i);
        }
        let e = model.cond_exp(&tail, i);
        bmo = bmo.max(e.iter().fold(0.0f64, |m, v| m.max(v.max(0.0))).sqrt());
    }
    let l2 = (tail.iter().sum::<f64>() / n as f64).sqrt();
    (bmo, l2)
}

/// Z on cell i from Y_{i+1}: 𝔼_i[Y_{i+1} δW_i] / Var on noise cells, copied inside blocks.
fn z_row(next: &[f64], model: &dyn ProbabilityModel, i: usize, z: &[Process]) -> Vec<Vec<f64>> {
    let n = model.n_samples();
    let src = model.noise_cell(i);
    (0..model.dim())
        .map(|c| {
            if src != i {
                return z[c].row(src).to_vec();
            }
            let var = model.noise_variance(i);
            let prod: Vec<f64> = (0..n).map(|s| next[s] * model.dw(s, i, c)).collect();
            model.cond_exp(&prod, i).into_iter().map(|v| v / var).collect()
        })
        .collect()
}

fn check_terminal(xi: &[f64], model: &dyn ProbabilityModel) -> Result<()> {
    if xi.len() != model.n_samples() {
        return Err(Error::GridMismatch(format!("ξ has {} samples, model {}", xi.len(), model.n_samples())));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("ξ must be finite".into()));
    }
    Ok(())
}

/// Y_i = 𝔼_i Y_{i+1} + f(t_i, Y_i, Z_i) dt_i, implicit in Y, explicit in Z.
pub fn solve_lipschitz_bsde(xi: &[f64], driver: &Driver, model: &dyn ProbabilityModel) -> Result<BsdeSolution> {
    check_terminal(xi, model)?;
    let grid = model.grid();
    let worst = grid.mesh() * driver.lipschitz;
    if worst >= 1.0 {
        return Err(Error::GridTooCoarse(worst));
    }
    let n = model.n_samples();
    let cells = grid.n_cells();
    let d = model.dim();
    let mut y = Process::zeros(cells + 1, n);
    y.set_row(cells, xi);
    let mut z = vec![Process::zeros(cells, n); d];
    for i in (0..cells).rev() {
        let next = y.row(i + 1).to_vec();
        let zi = z_row(&next, model, i, &z);
        for (c, row) in zi.iter().enumerate() {
            z[c].set_row(i, row);
        }
        let e = model.cond_exp(&next, i);
        let (t, dt) = (grid.t(i), grid.dt(i));
        let solved: Vec<Option<f64>> = par::map_indexed(n, |s| {
            let zs: Vec<f64> = zi.iter().map(|r| r[s]).collect();
            let mut v = e[s];
            for _ in 0..50 {
                let nv = e[s] + driver.eval(t, i, s, v, &zs) * dt;
                if (nv - v).abs() <= 1e-12 * (1.0 + nv.abs()) {
                    return Some(nv);
                }
                v = nv;
            }
            None
        });
        let row: Option<Vec<f64>> = solved.into_iter().collect();
        match row {
            Some(r) => y.set_row(i, &r),
            None => return Err(Error::GridTooCoarse(dt * driver.lipschitz)),
        }
    }
    Ok(BsdeSolution::from_pair(y, z, model))
}

/// Y_i = 𝔼_i Y_{i+1} + g_i dt_i for a frozen drift g (rows on cells), with its Z.
pub fn solve_frozen(xi: &[f64], g: &Process, model: &dyn ProbabilityModel) -> (Process, Vec<Process>) {
    let grid = model.grid();
    let n = model.n_samples();
    let cells = grid.n_cells();
    let mut y = Process::zeros(cells + 1, n);
    y.set_row(cells, xi);
    let mut z = vec![Process::zeros(cells, n); model.dim()];
    for i in (0..cells).rev() {
        let next = y.row(i + 1).to_vec();
        let zi = z_row(&next, model, i, &z);
        for (c, row) in zi.iter().enumerate() {
            z[c].set_row(i, row);
        }
        let e = model.cond_exp(&next, i);
        let row: Vec<f64> = (0..n).map(|s| e[s] + g.at(i, s) * grid.dt(i)).collect();
        y.set_row(i, &row);
    }
    (y, z)
}

/// ‖ΔY‖_∞ + ‖ΔZ‖_BMO between two pairs on the same model.
pub fn pair_distance(y1: &Process, z1: &[Process], y2: &Process, z2: &[Process], model: &dyn ProbabilityModel) -> f64 {
    let dz: Vec<Process> = z1.iter().zip(z2).map(|(a, b)| a.sub(b)).collect();
    y1.sub(y2).sup_abs() + z_norms(&dz, model).0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticOptions {
    /// Constants of the smallness regime; 4L + 4 when `None`.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QuadraticOptions {
    fn default() -> Self {
        Self { c1: None, c2: None, tol: 1e-13, max_iter: 200 }
    }
}

/// (ε, R) of the smallness regime for horizon T and constant c.
pub fn quadratic_regime(c: f64, horizon: f64) -> (f64, f64) {
    (1.0 / (16.0 * c * c * (horizon + 1.0)), 1.0 / (4.0 * c * (horizon + 1.0)))
}

impl QuadraticOptions {
    pub fn constant(&self, l: f64) -> f64 {
        let default = 4.0 * l + 4.0;
        self.c1.unwrap_or(default).max(self.c2.unwrap_or(default))
    }
}

const RATIO_FLOOR: f64 = 1e-12;

/// Picard iteration Y^{k+1}_i = 𝔼_i Y^{k+1}_{i+1} + f(t_i, Y^k_i, Z^k_i) dt_i from (0, 0).
pub fn solve_quadratic_bsde_small(
    xi: &[f64],
    driver: &Driver,
    model: &dyn ProbabilityModel,
    opts: &QuadraticOptions,
) -> Result<BsdeSolution> {
    check_terminal(xi, model)?;
    let grid = model.grid();
    let horizon = grid.horizon();
    let c = opts.constant(driver.lipschitz);
    let (eps, radius) = quadratic_regime(c, horizon);
    let xi_sup = sup_norm(xi);
    if xi_sup > eps {
        return Err(Error::OutsideContraction(format!("‖ξ‖∞ = {xi_sup:e} exceeds ε = {eps:e}")));
    }
    let data = driver.bound_integral(model);
    if data > eps {
        return Err(Error::OutsideContraction(format!("‖∫(λ+μ²)dr‖∞ = {data:e} exceeds ε = {eps:e}")));
    }
    let n = model.n_samples();
    let cells = grid.n_cells();
    let d = model.dim();
    let mut y = Process::zeros(cells + 1, n);
    let mut z = vec![Process::zeros(cells, n); d];
    let mut distances = Vec::new();
    let mut ratios = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let g = Process::from_fn(cells, n, |i, s| {
            let zs: Vec<f64> = z.iter().map(|zc| zc.at(i, s)).collect();
            driver.eval(grid.t(i), i, s, y.at(i, s), &zs)
        });
        let (ny, nz) = solve_frozen(xi, &g, model);
        let dist = pair_distance(&ny, &nz, &y, &z, model);
        if let Some(&prev) = distances.last() {
            if prev > RATIO_FLOOR && dist > RATIO_FLOOR {
                ratios.push(dist / prev);
            }
        }
        distances.push(dist);
        y = ny;
        z = nz;
        if dist <= opts.tol {
            converged = true;
            break;
        }
    }
    let mut sol = BsdeSolution::from_pair(y, z, model);
    sol.picard_iterations = iterations;
    sol.converged = converged;
    sol.contraction_warning = ratios.iter().any(|&r| r > 0.75);
    sol.distances = distances;
    sol.ratios = ratios;
    if sol.norm() > radius {
        return Err(Error::OutsideContraction(format!("solution norm {:e} exceeds R = {radius:e}", sol.norm())));
    }
    Ok(sol)
}

/// Which solver a continuity audit runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BsdeKind {
    Lipschitz,
    Quadratic(QuadraticOptions),
}

pub fn solve(xi: &[f64], driver: &Driver, model: &dyn ProbabilityModel, kind: BsdeKind) -> Result<BsdeSolution> {
    match kind {
        BsdeKind::Lipschitz => solve_lipschitz_bsde(xi, driver, model),
        BsdeKind::Quadratic(o) => solve_quadratic_bsde_small(xi, driver, model, &o),
    }
}

/// Table of (input distance, ‖(Yᵏ − Y, Zᵏ − Z)‖) for a perturbation family.
pub fn bsde_continuity_audit(
    base: (&[f64], &Driver),
    family: &[(Vec<f64>, Driver, f64)],
    model: &dyn ProbabilityModel,
    kind: BsdeKind,
) -> Result<ConvergenceTable> {
    let reference = solve(base.0, base.1, model, kind)?;
    let mut table = ConvergenceTable::new("input_distance", "solution_distance");
    for (xi, f, dist) in family {
        let sol = solve(xi, f, model, kind)?;
        table.push(*dist, pair_distance(&sol.y, &sol.z, &reference.y, &reference.z, model));
    }
    Ok(table)
}

/// Largest |Y_i − (Y_{i+1} + f dt − Z·δW)| over nodes, for the solution's driver.
pub fn discrete_residual(sol: &BsdeSolution, driver: &Driver, model: &dyn ProbabilityModel) -> f64 {
    let grid = model.grid();
    let n = model.n_samples();
    let mut worst: f64 = 0.0;
    for i in 0..grid.n_cells() {
        for s in 0..n {
            let zs = sol.z_at(i, s);
            let zdw: f64 = zs.iter().enumerate().map(|(c, v)| v * model.dw(s, i, c)).sum();
            let rhs = sol.y.at(i + 1, s) + driver.eval(grid.t(i), i, s, sol.y.at(i, s), &zs) * grid.dt(i) - zdw;
            worst = worst.max((sol.y.at(i, s) - rhs).abs());
        }
    }
    worst
}

/// (1/2L) ln 𝔼_{t_i} e^{2Lξ} on every node.
pub fn cole_hopf_oracle(xi: &[f64], l: f64, model: &dyn ProbabilityModel) -> Process {
    let expo: Vec<f64> = xi.iter().map(|v| (2.0 * l * v).exp()).collect();
    Process::from_rows(
        (0..model.grid().len())
            .map(|i| model.cond_exp(&expo, i).into_iter().map(|v| v.ln() / (2.0 * l)).collect())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BinomialTree, BrownianEnsemble};
    use crate::rough_path::TimeGrid;
    use proptest::prelude::*;

    fn tree(n: usize) -> BinomialTree {
        BinomialTree::new(n, 1, 1.0).unwrap()
    }

    fn terminal(t: &BinomialTree, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let last = t.grid().n_cells();
        (0..t.n_samples()).map(|s| f(t.w(s, last, 0))).collect()
    }

    #[test]
    fn zero_driver_gives_conditional_expectation() {
        let t = tree(6);
        let xi = terminal(&t, |w| w.powi(3) + w);
        let sol = solve_lipschitz_bsde(&xi, &Driver::zero(), &t).unwrap();
        for i in 0..=6 {
            let e = t.cond_exp(&xi, i);
            for s in 0..t.n_samples() {
                assert!((sol.y.at(i, s) - e[s]).abs() < 1e-13);
            }
        }
        assert!(discrete_residual(&sol, &Driver::zero(), &t) < 1e-13);
    }

    #[test]
    fn constant_driver_shifts_by_time_to_go() {
        let t = tree(5);
        let xi = terminal(&t, f64::sin);
        let c = 0.7;
        let sol = solve_lipschitz_bsde(&xi, &Driver::new(0.0, move |_, _, _, _, _| c), &t).unwrap();
        for i in 0..=5 {
            let e = t.cond_exp(&xi, i);
            for s in 0..t.n_samples() {
                assert!((sol.y.at(i, s) - e[s] - c * (1.0 - t.grid().t(i))).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_decay_matches_ode() {
        let r = 0.8;
        let mut errs = Vec::new();
        for n in [8usize, 16] {
            let t = tree(n);
            let xi = vec![1.0; t.n_samples()];
            let sol = solve_lipschitz_bsde(&xi, &Driver::new(r, move |_, _, _, y, _| -r * y), &t).unwrap();
            let exact = (-r).exp();
            errs.push((sol.y.at(0, 0) - exact).abs());
            // Implicit Euler closed form (1 + r dt)^{-N}.
            assert!((sol.y.at(0, 0) - (1.0 + r / n as f64).powi(-(n as i32))).abs() < 1e-12);
        }
        assert!(errs[0] < 0.05 && errs[1] < errs[0]);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let t = tree(2);
        let xi = vec![0.0; 4];
        let err = solve_lipschitz_bsde(&xi, &Driver::new(3.0, |_, _, _, y, _| 3.0 * y), &t).unwrap_err();
        assert!(err.to_string().contains("grid too coarse for L"));
    }

    #[test]
    fn linear_driver_residual_vanishes() {
        let t = BinomialTree::with_substeps(6, 1, 1.0, 3).unwrap();
        let xi = terminal(&t, |w| (2.0 * w).cos());
        let drv = Driver::new(1.5, |t, _, _, y, z| 0.3 * y - 1.2 * z[0] + t);
        let sol = solve_lipschitz_bsde(&xi, &drv, &t).unwrap();
        assert!(discrete_residual(&sol, &drv, &t) < 1e-11);
        assert_eq!(sol.y.last_row(), &xi[..]);
    }

    #[test]
    fn zero_data_quadratic_is_zero_in_one_step() {
        let t = tree(6);
        let sol = solve_quadratic_bsde_small(&vec![0.0; 64], &Driver::quadratic_z(0.25), &t, &QuadraticOptions::default()).unwrap();
        assert_eq!(sol.picard_iterations, 1);
        assert_eq!(sol.norm(), 0.0);
    }

    #[test]
    fn cole_hopf_on_tree() {
        let t = tree(10);
        let l = 0.25;
        let xi = terminal(&t, |w| 0.05 * (1.3 * w).sin());
        let opts = QuadraticOptions { c1: Some(0.75), c2: Some(0.75), ..Default::default() };
        let sol = solve_quadratic_bsde_small(&xi, &Driver::quadratic_z(l), &t, &opts).unwrap();
        let oracle = cole_hopf_oracle(&xi, l, &t);
        assert!(sol.y.sub(&oracle).sup_abs() < 1e-6);
        assert!(sol.converged);
        assert!(sol.ratios.iter().all(|&r| r <= 0.55), "{:?}", sol.ratios);
        assert!(!sol.contraction_warning);
    }

    #[test]
    fn default_constants_need_smaller_data() {
        let t = tree(8);
        let xi = terminal(&t, |w| 0.05 * w.sin());
        let err = solve_quadratic_bsde_small(&xi, &Driver::quadratic_z(0.25), &t, &QuadraticOptions::default()).unwrap_err();
        assert!(err.to_string().contains("outside contraction regime"));
        let xi = terminal(&t, |w| 1e-3 * w.sin());
        let sol = solve_quadratic_bsde_small(&xi, &Driver::quadratic_z(0.25), &t, &QuadraticOptions::default()).unwrap();
        assert!(sol.y.sub(&cole_hopf_oracle(&xi, 0.25, &t)).sup_abs() < 1e-8);
    }

    #[test]
    fn large_driver_data_is_rejected() {
        let t = tree(4);
        let drv = Driver::new(0.25, |_, _, _, _, z| 1.0 + 0.25 * z[0] * z[0]);
        let err = solve_quadratic_bsde_small(&vec![0.0; 16], &drv, &t, &QuadraticOptions::default()).unwrap_err();
        assert!(matches!(err, Error::OutsideContraction(_)));
    }

    #[test]
    fn bmo_dominates_l2() {
        for horizon in [1.0, 2.0] {
            let t = BinomialTree::new(8, 1, horizon).unwrap();
            let xi = terminal(&t, |w| w * w - 0.5 * w);
            let sol = solve_lipschitz_bsde(&xi, &Driver::zero(), &t).unwrap();
            assert!(sol.l2_z <= horizon.sqrt() * sol.bmo_z + 1e-14);
        }
    }

    #[test]
    fn continuity_examples() {
        let t = tree(8);
        let l = 0.25;
        let opts = QuadraticOptions { c1: Some(0.75), c2: Some(0.75), ..Default::default() };
        let xi = terminal(&t, |w| 0.02 * w.cos());
        let f = Driver::quadratic_z(l);
        let same: Vec<(Vec<f64>, Driver, f64)> = (1..=3).map(|_| (xi.clone(), f.clone(), 0.0)).collect();
        let tab = bsde_continuity_audit((&xi, &f), &same, &t, BsdeKind::Quadratic(opts)).unwrap();
        assert!(tab.ys().iter().all(|&v| v == 0.0));
        let delta = 0.02;
        let family: Vec<(Vec<f64>, Driver, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&k| (xi.iter().map(|v| v + delta / k).collect(), f.clone(), delta / k))
            .collect();
        let tab = bsde_continuity_audit((&xi, &f), &family, &t, BsdeKind::Quadratic(opts)).unwrap();
        let ks: Vec<f64> = vec![1.0, 2.0, 4.0, 8.0];
        let fit = crate::rates::fit_rate(&ks, &tab.ys()).unwrap();
        assert!((fit.slope + 1.0).abs() < 0.2, "{fit:?}");
        let drivers: Vec<(Vec<f64>, Driver, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&k| {
                let a = 0.01 / k;
                (xi.clone(), Driver::new(l, move |_, _, _, y, z| l * z[0] * z[0] + a * y.sin()), a)
            })
            .collect();
        let tab = bsde_continuity_audit((&xi, &f), &drivers, &t, BsdeKind::Quadratic(opts)).unwrap();
        assert!(tab.is_strictly_decreasing());
    }

    #[test]
    fn driver_bounds_audit() {
        let t = tree(4);
        // |∂_z (z²/4)| = |z|/2 needs the growth constant 1/2.
        let f = Driver::new(0.5, |_, _, _, _, z| 0.25 * z[0] * z[0]).with_bounds(Process::zeros(5, 1), Process::zeros(5, 1));
        let audit = f.audit_bounds(&t, 200, 1.0, 3);
        assert_eq!(audit.violations, 0);
        let bad = Driver::new(0.1, |_, _, _, y, _| 2.0 * y).with_bounds(Process::zeros(5, 1), Process::zeros(5, 1));
        assert!(bad.audit_bounds(&t, 200, 1.0, 3).violations > 0);
    }

    #[test]
    fn monte_carlo_zero_driver() {
        let g = TimeGrid::uniform(8, 1.0).unwrap();
        let ens = BrownianEnsemble::simulate(g, 4000, 1, 11).unwrap();
        let xi: Vec<f64> = (0..4000).map(|s| ens.w(s, 8, 0)).collect();
        let sol = solve_lipschitz_bsde(&xi, &Driver::zero(), &ens).unwrap();
        assert!(sol.y.row(0).iter().all(|v| v.abs() < 0.05));
        assert!((sol.z[0].row(0).iter().sum::<f64>() / 4000.0 - 1.0).abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn comparison_on_tree(a in -1.0f64..1.0, shift in 0.0f64..0.5, r in -1.0f64..1.0) {
            let t = tree(6);
            let xi1 = terminal(&t, |w| (a * w).sin());
            let xi2: Vec<f64> = xi1.iter().enumerate().map(|(s, v)| v + shift * (s % 3) as f64).collect();
            let drv = Driver::new(1.0, move |_, _, _, y, z| r * y + 0.5 * z[0].abs());
            let s1 = solve_lipschitz_bsde(&xi1, &drv, &t).unwrap();
            let s2 = solve_lipschitz_bsde(&xi2, &drv, &t).unwrap();
            for i in 0..=6 {
                for s in 0..t.n_samples() {
                    prop_assert!(s1.y.at(i, s) <= s2.y.at(i, s) + 1e-12);
                }
            }
        }
    }
}
