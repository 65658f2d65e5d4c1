//! Nonlinear rough drifts g(Y) d𝐗 by the flow transform: for each smooth
//! approximation Xᵏ the backward flow φ of dφ = −g(φ) dXᵏ turns the BSDE into
//! a quadratic one, solved in the small regime and mapped back by φ.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::{solve_quadratic_bsde_small, z_norms, Driver, QuadraticOptions};
use crate::error::{Error, Result};
use crate::models::ProbabilityModel;
use crate::par;
use crate::process::{sup_norm, Process};
use crate::rates::ConvergenceTable;
use crate::rough_path::{RoughPath, SampledPath, TimeGrid};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

const FD_STEPS: [f64; 3] = [1e-5, 1e-4, 1e-3];

/// Scalar vector field g with up to three derivatives.
#[derive(Clone)]
pub struct VectorField {
    g: ScalarFn,
    derivatives: [Option<ScalarFn>; 3],
    /// Declared bound standing in for the Lip^γ norm.
    pub gamma_norm: f64,
}

impl std::fmt::Debug for VectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorField")
            .field("gamma_norm", &self.gamma_norm)
            .field("analytic_derivatives", &self.derivatives.iter().filter(|d| d.is_some()).count())
            .finish()
    }
}

impl VectorField {
    /// Field with derivatives by central differences.
    pub fn new<F: Fn(f64) -> f64 + Send + Sync + 'static>(g: F, gamma_norm: f64) -> Self {
        Self { g: Arc::new(g), derivatives: [None, None, None], gamma_norm }
    }

    pub fn with_derivatives<A, B, C>(mut self, d1: A, d2: B, d3: C) -> Self
    where
        A: Fn(f64) -> f64 + Send + Sync + 'static,
        B: Fn(f64) -> f64 + Send + Sync + 'static,
        C: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.derivatives = [Some(Arc::new(d1)), Some(Arc::new(d2)), Some(Arc::new(d3))];
        self
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, 0.0).with_derivatives(|_| 0.0, |_| 0.0, |_| 0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c, c.abs()).with_derivatives(|_| 0.0, |_| 0.0, |_| 0.0)
    }

    /// g(y) = a y.
    pub fn linear(a: f64) -> Self {
        Self::new(move |y| a * y, a.abs()).with_derivatives(move |_| a, |_| 0.0, |_| 0.0)
    }

    /// g(y) = a sin y.
    pub fn sin_saturating(a: f64) -> Self {
        Self::new(move |y| a * y.sin(), a.abs())
            .with_derivatives(move |y| a * y.cos(), move |y| -a * y.sin(), move |y| -a * y.cos())
    }

    pub fn value(&self, y: f64) -> f64 {
        (self.g)(y)
    }

    /// k-th derivative, k ∈ {1, 2, 3}.
    pub fn derivative(&self, k: usize, y: f64) -> f64 {
        match &self.derivatives[k - 1] {
            Some(d) => d(y),
            None => self.fd_derivative(k, y),
        }
    }

    fn lower(&self, k: usize, y: f64) -> f64 {
        if k == 0 {
            self.value(y)
        } else {
            self.derivative(k, y)
        }
    }

    fn fd_derivative(&self, k: usize, y: f64) -> f64 {
        let h = FD_STEPS[k - 1];
        (self.lower(k - 1, y + h) - self.lower(k - 1, y - h)) / (2.0 * h)
    }

    /// Largest relative gap between supplied derivatives and central differences of the order below.
    pub fn fd_consistency(&self, probes: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 1..=3 {
            if self.derivatives[k - 1].is_none() {
                continue;
            }
            for &y in probes {
                let a = self.derivative(k, y);
                let b = self.fd_derivative(k, y);
                worst = worst.max((a - b).abs() / (1.0 + a.abs()));
            }
        }
        worst
    }
}

/// φ, Dφ, D²φ, D³φ at every grid node on a sorted probe set.
#[derive(Debug)]
pub struct SolutionFlow {
    grid: TimeGrid,
    probes: Vec<f64>,
    data: Vec<[f64; 4]>,
    extrapolations: AtomicUsize,
}

/// Backward flow of dφ = −g(φ) dX from φ_T = id, with its variational equations,
/// by RK4 with `substeps` steps per grid cell (Ẋ constant on cells).
pub fn solve_backward_flow(g: &VectorField, drive: &SampledPath, probes: &[f64], substeps: usize) -> Result<SolutionFlow> {
    if drive.dim() != 1 {
        return Err(Error::Precondition("flow transform needs a scalar drive".into()));
    }
    if probes.len() < 2 || probes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Precondition("probes must be strictly increasing, at least two".into()));
    }
    let substeps = substeps.max(1);
    let grid = drive.grid().clone();
    let cells = grid.n_cells();
    let np = probes.len();
    let rhs = |s: [f64; 4], xdot: f64| -> [f64; 4] {
        let (u, u1, u2, u3) = (s[0], s[1], s[2], s[3]);
        let (g0, g1, g2, g3) = (g.value(u), g.derivative(1, u), g.derivative(2, u), g.derivative(3, u));
        [
            xdot * g0,
            xdot * g1 * u1,
            xdot * (g2 * u1 * u1 + g1 * u2),
            xdot * (g3 * u1 * u1 * u1 + 3.0 * g2 * u1 * u2 + g1 * u3),
        ]
    };
    let add = |a: [f64; 4], b: [f64; 4], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2], a[3] + h * b[3]];
    let columns: Vec<Vec<[f64; 4]>> = par::map_indexed(np, |j| {
        let mut col = vec![[0.0; 4]; cells + 1];
        let mut s = [probes[j], 1.0, 0.0, 0.0];
        col[cells] = s;
        for i in (0..cells).rev() {
            let dt = grid.dt(i);
            let xdot = (drive.x(i + 1) - drive.x(i)) / dt;
            let h = dt / substeps as f64;
            for _ in 0..substeps {
                let k1 = rhs(s, xdot);
                let k2 = rhs(add(s, k1, h / 2.0), xdot);
                let k3 = rhs(add(s, k2, h / 2.0), xdot);
                let k4 = rhs(add(s, k3, h), xdot);
                for c in 0..4 {
                    s[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
                }
            }
            col[i] = s;
        }
        col
    });
    let mut data = vec![[0.0; 4]; (cells + 1) * np];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * np + j] = *v;
        }
    }
    if data.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Precondition("flow blew up on the probe set".into()));
    }
    Ok(SolutionFlow { grid, probes: probes.to_vec(), data, extrapolations: AtomicUsize::new(0) })
}

fn hermite(y0: f64, y1: f64, q0: f64, q1: f64, d0: f64, d1: f64, y: f64) -> f64 {
    let h = y1 - y0;
    let s = (y - y0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * q0 + (s3 - 2.0 * s2 + s) * h * d0 + (-2.0 * s3 + 3.0 * s2) * q1 + (s3 - s2) * h * d1
}

impl SolutionFlow {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn probes(&self) -> &[f64] {
        &self.probes
    }

    /// (φ, Dφ, D²φ, D³φ) at node `i` and probe `j`.
    pub fn at_probe(&self, i: usize, j: usize) -> [f64; 4] {
        self.data[i * self.probes.len() + j]
    }

    pub fn in_hull(&self, y: f64) -> bool {
        y >= self.probes[0] && y <= self.probes[self.probes.len() - 1]
    }

    /// Queries that fell outside the probe hull so far.
    pub fn extrapolations(&self) -> usize {
        self.extrapolations.load(Ordering::Relaxed)
    }

    /// (φ, Dφ, D²φ) at node `i` and any y: Hermite inside the hull, Taylor outside.
    pub fn eval(&self, i: usize, y: f64) -> [f64; 3] {
        let np = self.probes.len();
        let lo = self.probes[0];
        let hi = self.probes[np - 1];
        if y < lo || y > hi {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
            let (j, y0) = if y < lo { (0, lo) } else { (np - 1, hi) };
            let v = self.at_probe(i, j);
            let d = y - y0;
            return [v[0] + v[1] * d + 0.5 * v[2] * d * d, v[1] + v[2] * d + 0.5 * v[3] * d * d, v[2] + v[3] * d];
        }
        let j = (self.probes.partition_point(|&p| p <= y) - 1).min(np - 2);
        let (y0, y1) = (self.probes[j], self.probes[j + 1]);
        let a = self.at_probe(i, j);
        let b = self.at_probe(i, j + 1);
        [
            hermite(y0, y1, a[0], b[0], a[1], b[1], y),
            hermite(y0, y1, a[1], b[1], a[2], b[2], y),
            hermite(y0, y1, a[2], b[2], a[3], b[3], y),
        ]
    }

    pub fn phi(&self, i: usize, y: f64) -> f64 {
        self.eval(i, y)[0]
    }

    /// ψ_{t_i}(y): the solution x of φ_{t_i}(x) = y by Newton.
    pub fn psi(&self, i: usize, y: f64) -> Result<f64> {
        let mut x = 2.0 * y - self.phi(i, y);
        for _ in 0..60 {
            let [v, d, _] = self.eval(i, x);
            if d.abs() < 1e-12 || !d.is_finite() {
                break;
            }
            let step = (v - y) / d;
            x -= step;
            if step.abs() <= 1e-14 * (1.0 + x.abs()) {
                return Ok(x);
            }
        }
        Err(Error::FlowInversion { index: i, target: y })
    }

    /// sup over nodes and probes of |φ(y) − y|.
    pub fn deviation(&self) -> f64 {
        let np = self.probes.len();
        self.data.iter().enumerate().fold(0.0, |m, (k, v)| m.max((v[0] - self.probes[k % np]).abs()))
    }

    /// (min Dφ, max Dφ, max |D²φ|) over nodes and probes.
    pub fn derivative_bounds(&self) -> (f64, f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY, 0.0f64), |(lo, hi, d2), v| {
            (lo.min(v[1]), hi.max(v[1]), d2.max(v[2].abs()))
        })
    }
}

/// f̃_t(ỹ, z̃) = (Dφ_t(ỹ))⁻¹ (f_t(φ_t(ỹ), Dφ_t(ỹ) z̃) + ½ D²φ_t(ỹ) |z̃|²).
pub fn transformed_driver(flow: Arc<SolutionFlow>, f: &Driver) -> Result<Driver> {
    let (dmin, dmax, d2max) = flow.derivative_bounds();
    if !(dmin > 0.0) {
        return Err(Error::Precondition(format!("Dφ not invertible on the probes (min {dmin:e})")));
    }
    let inner = f.clone();
    let lipschitz = (inner.lipschitz * dmax.max(1.0) + 0.5 * d2max) / dmin;
    let fl = flow.clone();
    Ok(Driver::new(lipschitz, move |t, i, s, y, z| {
        let [p, d, d2] = fl.eval(i, y);
        let dz: Vec<f64> = z.iter().map(|v| d * v).collect();
        let z2: f64 = z.iter().map(|v| v * v).sum();
        (inner.eval(t, i, s, p, &dz) + 0.5 * d2 * z2) / d
    }))
}

/// Measured constants C in the growth bounds of f̃ at random points in the probe hull.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformAudit {
    pub points: usize,
    /// (|f̃| + |∂_ỹ f̃|) / (λ + μ² + |𝐗| + |ỹ|² + |z̃|²).
    pub c_value: f64,
    /// |∂_z̃ f̃| / (μ + |𝐗| + |ỹ| + |z̃|).
    pub c_gradient: f64,
}

pub fn audit_transformed_driver(
    ft: &Driver,
    f: &Driver,
    rough_pvar: f64,
    hull: f64,
    model: &dyn ProbabilityModel,
    points: usize,
    seed: u64,
) -> TransformAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = model.grid();
    let d = model.dim();
    let mut c_value: f64 = 0.0;
    let mut c_gradient: f64 = 0.0;
    for _ in 0..points {
        let i = rng.random_range(0..grid.n_cells());
        let s = rng.random_range(0..model.n_samples());
        let y = rng.random_range(-hull..=hull);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-hull..=hull)).collect();
        let t = grid.t(i);
        let (lam, mu) = f.bounds_at(model, i);
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (dy, dz) = ft.gradient(t, i, s, y, &z);
        let value = ft.eval(t, i, s, y, &z).abs() + dy.abs();
        let grad = dz.iter().map(|v| v * v).sum::<f64>().sqrt();
        let den1 = lam[s] + mu[s] * mu[s] + rough_pvar + y * y + zn * zn;
        let den2 = mu[s] + rough_pvar + y.abs() + zn;
        if den1 > 0.0 {
            c_value = c_value.max(value / den1);
        }
        if den2 > 0.0 {
            c_gradient = c_gradient.max(grad / den2);
        }
    }
    TransformAudit { points, c_value, c_gradient }
}

#[derive(Clone, Debug)]
pub struct NonlinearProblem {
    pub xi: Vec<f64>,
    pub driver: Driver,
    pub field: VectorField,
    /// Smooth scalar drive sampled on the model grid.
    pub path: SampledPath,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowOptions {
    pub levels: usize,
    /// Pieces of the coarsest dyadic approximation.
    pub base_pieces: usize,
    pub probes: usize,
    /// Half-width of the probe hull; max(1, 4‖ξ‖∞) when `None`.
    pub probe_radius: Option<f64>,
    pub rk_substeps: usize,
    pub xi_max: f64,
    pub driver_max: f64,
    pub rough_max: f64,
    pub quadratic: QuadraticOptions,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            levels: 4,
            base_pieces: 4,
            probes: 401,
            probe_radius: None,
            rk_substeps: 1,
            xi_max: 1.0,
            driver_max: 1.0,
            rough_max: 2.5,
            quadratic: QuadraticOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LevelSolution {
    pub pieces: usize,
    pub y: Process,
    pub z: Vec<Process>,
    /// Solution of the transformed quadratic BSDE.
    pub y_tilde: Process,
    pub z_tilde: Vec<Process>,
    pub report: LevelReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelReport {
    pub pieces: usize,
    /// |𝐗ᵏ|_{p-var} of the canonical lift.
    pub rough_pvar: f64,
    /// |φᵏ − id|∞ on the probes.
    pub flow_deviation: f64,
    /// |φᵏ − id|∞ / |𝐗ᵏ|_{p-var}.
    pub flow_constant: f64,
    pub dphi_min: f64,
    pub dphi_max: f64,
    pub picard_iterations: usize,
    pub converged: bool,
    pub ratios: Vec<f64>,
    pub extrapolations: usize,
    pub sup_y: f64,
    pub bmo_z: f64,
}

#[derive(Clone, Debug)]
pub struct NonlinearSolution {
    /// Finest level.
    pub finest: LevelSolution,
    pub levels: Vec<LevelReport>,
    /// (pieces, ‖Yᵏ − Yᵏ⁻¹‖∞ + ‖Zᵏ − Zᵏ⁻¹‖_BMO).
    pub cauchy: ConvergenceTable,
    /// Cauchy distances strictly decreasing.
    pub converged: bool,
    pub rough_pvar: f64,
    /// Every |𝐗ᵏ|_{p-var} ≤ 2 |𝐗|_{p-var}.
    pub approximations_ok: bool,
    /// sup over levels of ‖Yᵏ‖∞ + ‖Zᵏ‖_BMO.
    pub bound: f64,
}

/// Knots of the piecewise-linear approximation with `pieces` pieces.
pub fn dyadic_knots(cells: usize, pieces: usize) -> Vec<usize> {
    let pieces = pieces.clamp(1, cells);
    let mut k: Vec<usize> = (0..=pieces).map(|l| l * cells / pieces).collect();
    k.dedup();
    k
}

impl NonlinearProblem {
    fn check(&self, model: &dyn ProbabilityModel, opts: &FlowOptions) -> Result<f64> {
        if model.grid() != self.path.grid() {
            return Err(Error::GridMismatch("model and drive grids differ".into()));
        }
        if self.xi.len() != model.n_samples() {
            return Err(Error::GridMismatch("ξ and model differ in sample count".into()));
        }
        let xi_sup = sup_norm(&self.xi);
        if xi_sup > opts.xi_max {
            return Err(Error::OutsideFlowRegime(format!("‖ξ‖∞ = {xi_sup:e} > {:e}", opts.xi_max)));
        }
        let data = self.driver.bound_integral(model);
        if data > opts.driver_max {
            return Err(Error::OutsideFlowRegime(format!("‖∫(λ+μ²)dr‖∞ = {data:e} > {:e}", opts.driver_max)));
        }
        let rough = RoughPath::canonical_lift(&self.path, self.p)?.metrics().total;
        if rough > opts.rough_max {
            return Err(Error::OutsideFlowRegime(format!("|𝐗|_p-var = {rough:e} > {:e}", opts.rough_max)));
        }
        Ok(rough)
    }

    /// Solution driven by the approximation with `pieces` pieces.
    pub fn solve_level(&self, pieces: usize, model: &dyn ProbabilityModel, opts: &FlowOptions) -> Result<LevelSolution> {
        let cells = model.grid().n_cells();
        let xk = self.path.interpolant_through(&dyadic_knots(cells, pieces))?;
        self.solve_with_drive(&xk, pieces, model, opts)
    }

    fn solve_with_drive(
        &self,
        xk: &SampledPath,
        pieces: usize,
        model: &dyn ProbabilityModel,
        opts: &FlowOptions,
    ) -> Result<LevelSolution> {
        let rough_pvar = RoughPath::canonical_lift(xk, self.p)?.metrics().total;
        let radius = opts.probe_radius.unwrap_or_else(|| (4.0 * sup_norm(&self.xi)).max(1.0));
        let np = opts.probes.max(2);
        let probes: Vec<f64> = (0..np).map(|j| -radius + 2.0 * radius * j as f64 / (np - 1) as f64).collect();
        let flow = Arc::new(solve_backward_flow(&self.field, xk, &probes, opts.rk_substeps)?);
        let ft = transformed_driver(flow.clone(), &self.driver)?;
        let tilde = solve_quadratic_bsde_small(&self.xi, &ft, model, &opts.quadratic)?;
        let n = model.n_samples();
        let cells = model.grid().n_cells();
        let y = Process::from_fn(cells + 1, n, |i, s| flow.phi(i, tilde.y.at(i, s)));
        let z = innovation_z(&y, model);
        let (dmin, dmax, _) = flow.derivative_bounds();
        let deviation = flow.deviation();
        let (bmo_z, _) = z_norms(&z, model);
        let report = LevelReport {
            pieces,
            rough_pvar,
            flow_deviation: deviation,
            flow_constant: if rough_pvar > 0.0 { deviation / rough_pvar } else { 0.0 },
            dphi_min: dmin,
            dphi_max: dmax,
            picard_iterations: tilde.picard_iterations,
            converged: tilde.converged,
            ratios: tilde.ratios.clone(),
            extrapolations: flow.extrapolations(),
            sup_y: y.sup_abs(),
            bmo_z,
        };
        Ok(LevelSolution { pieces, y, z, y_tilde: tilde.y, z_tilde: tilde.z, report })
    }
}

/// Z_i = 𝔼_i[δY δW] / 𝔼_i[δW²] on noise cells, copied across the rest of each block.
fn innovation_z(y: &Process, model: &dyn ProbabilityModel) -> Vec<Process> {
    let cells = model.grid().n_cells();
    let n = model.n_samples();
    let d = model.dim();
    let rows: Vec<Option<Vec<Vec<f64>>>> = par::map_indexed(cells, |i| {
        if model.noise_cell(i) != i {
            return None;
        }
        let var = model.noise_variance(i);
        Some(
            (0..d)
                .map(|c| {
                    let prod: Vec<f64> = (0..n).map(|s| (y.at(i + 1, s) - y.at(i, s)) * model.dw(s, i, c)).collect();
                    model.cond_exp(&prod, i).into_iter().map(|v| v / var).collect()
                })
                .collect(),
        )
    });
    let mut z = vec![Process::zeros(cells, n); d];
    for i in 0..cells {
        let src = model.noise_cell(i);
        if let Some(r) = &rows[src] {
            for (c, zc) in z.iter_mut().enumerate() {
                zc.set_row(i, &r[c]);
            }
        }
    }
    z
}

/// Solves at `opts.levels` dyadic approximations and reports their Cauchy table.
pub fn solve_nonlinear_rough_bsde(
    problem: &NonlinearProblem,
    model: &dyn ProbabilityModel,
    opts: &FlowOptions,
) -> Result<NonlinearSolution> {
    let rough = problem.check(model, opts)?;
    let mut prev: Option<LevelSolution> = None;
    let mut levels = Vec::new();
    let mut cauchy = ConvergenceTable::new("pieces", "cauchy_distance");
    let mut bound: f64 = 0.0;
    for l in 0..opts.levels.max(1) {
        let pieces = opts.base_pieces.max(1) << l;
        let cur = problem.solve_level(pieces, model, opts)?;
        bound = bound.max(cur.report.sup_y + cur.report.bmo_z);
        if let Some(p) = &prev {
            let dz: Vec<Process> = cur.z.iter().zip(&p.z).map(|(a, b)| a.sub(b)).collect();
            cauchy.push(pieces as f64, cur.y.sub(&p.y).sup_abs() + z_norms(&dz, model).0);
        }
        levels.push(cur.report.clone());
        prev = Some(cur);
    }
    let approximations_ok = levels.iter().all(|r| r.rough_pvar <= 2.0 * rough + 1e-12);
    let converged = cauchy.rows.len() < 2 || cauchy.is_strictly_decreasing();
    Ok(NonlinearSolution {
        finest: prev.expect("at least one level"),
        levels,
        cauchy,
        converged,
        rough_pvar: rough,
        approximations_ok,
        bound,
    })
}

/// Largest |Y_i − (Y_{i+1} + f dt + g(Y_i) δXᵏ − Z·δW)| of a level solution.
pub fn reduction_residual(
    level: &LevelSolution,
    problem: &NonlinearProblem,
    model: &dyn ProbabilityModel,
) -> Result<f64> {
    let grid = model.grid();
    let xk = problem.path.interpolant_through(&dyadic_knots(grid.n_cells(), level.pieces))?;
    let n = model.n_samples();
    let rows: Vec<f64> = par::map_indexed(grid.n_cells(), |i| {
        let mut worst: f64 = 0.0;
        for s in 0..n {
            let zs: Vec<f64> = level.z.iter().map(|zc| zc.at(i, s)).collect();
            let y = level.y.at(i, s);
            let zdw: f64 = zs.iter().enumerate().map(|(c, v)| v * model.dw(s, i, c)).sum();
            let rhs = level.y.at(i + 1, s) + problem.driver.eval(grid.t(i), i, s, y, &zs) * grid.dt(i)
                + problem.field.value(y) * (xk.x(i + 1) - xk.x(i))
                - zdw;
            worst = worst.max((y - rhs).abs());
        }
        worst
    });
    Ok(rows.into_iter().fold(0.0, f64::max))
}
