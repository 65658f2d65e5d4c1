//! Markovian rough BSDEs and the rough PDE
//!
//! ∂ₜu + ½σ²∂ₓ²u + b∂ₓu + f(t, x, u, σ∂ₓu) + (G u + H + h) Ẋ = 0,  u(T) = l,
//!
//! evaluated by Feynman–Kac (u(t, x) = Y_t of the rough BSDE started at x) and,
//! for smooth drives in one dimension, by Crank–Nicolson finite differences.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::Driver;
use crate::controlled::{Drive, EssBoundedControlledPath};
use crate::error::{Error, Result};
use crate::linear::{solve_linear_rough_bsde, LinearOptions, LinearRoughBsdeProblem};
use crate::models::{BinomialTree, ProbabilityModel};
use crate::par;
use crate::process::Process;
use crate::rates::ConvergenceTable;
use crate::rough_path::{fmt_f64, RoughPath, SampledPath, TimeGrid};

pub type Coefficient = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type MarkovDriverFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;

/// A smooth scalar drive given by X(t) and Ẋ(t).
#[derive(Clone)]
pub struct SmoothDrive {
    pub x: TimeFn,
    pub xdot: TimeFn,
}

impl std::fmt::Debug for SmoothDrive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SmoothDrive")
    }
}

impl SmoothDrive {
    /// X(t) = amp · sin(2πt).
    pub fn sine(amp: f64) -> Self {
        let w = 2.0 * std::f64::consts::PI;
        Self { x: Arc::new(move |t| amp * (w * t).sin()), xdot: Arc::new(move |t| amp * w * (w * t).cos()) }
    }

    pub fn zero() -> Self {
        Self { x: Arc::new(|_| 0.0), xdot: Arc::new(|_| 0.0) }
    }

    /// Piecewise-linear drive through a scalar sampled path.
    pub fn from_sampled(path: &SampledPath) -> Self {
        let p = path.clone();
        let q = path.clone();
        Self {
            x: Arc::new(move |t| p.interpolate(t)[0]),
            xdot: Arc::new(move |t| {
                let pts = q.grid().points();
                let k = (pts.partition_point(|&s| s <= t).max(1) - 1).min(pts.len() - 2);
                (q.x(k + 1) - q.x(k)) / (pts[k + 1] - pts[k])
            }),
        }
    }

    /// Piecewise-linear approximation through `pieces + 1` equally spaced times on [0, T].
    pub fn dyadic(&self, pieces: usize, horizon: f64) -> Result<Self> {
        let grid = TimeGrid::uniform(pieces, horizon)?;
        let x = self.x.clone();
        let path = SampledPath::from_fn(grid, 1, move |t| vec![x(t)])?;
        Ok(Self::from_sampled(&path))
    }

    /// Canonical lift of the drive sampled at `t0 + grid` points.
    pub fn lift_on(&self, grid: &TimeGrid, t0: f64, p: f64) -> Result<RoughPath> {
        let x = self.x.clone();
        let path = SampledPath::from_fn(grid.clone(), 1, move |t| vec![x(t0 + t)])?;
        RoughPath::canonical_lift(&path, p)
    }
}

#[derive(Clone)]
pub struct MarkovianProblem {
    pub horizon: f64,
    pub b: Coefficient,
    pub sigma: Coefficient,
    /// Declared Lipschitz constants of b and σ in x.
    pub b_lipschitz: f64,
    pub sigma_lipschitz: f64,
    pub terminal: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// f(t, x, y, z).
    pub f: MarkovDriverFn,
    pub f_lipschitz: f64,
    pub g: TimeFn,
    pub gp: TimeFn,
    pub h_time: TimeFn,
    pub hp_time: TimeFn,
    /// h(t, x) inside the rough integrand.
    pub h_space: Coefficient,
    /// ∂ₜh, ∂ₓh, ∂ₓ²h.
    pub h_derivatives: [Coefficient; 3],
    pub p: f64,
}

impl std::fmt::Debug for MarkovianProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarkovianProblem").field("horizon", &self.horizon).field("p", &self.p).finish()
    }
}

fn zero2() -> Coefficient {
    Arc::new(|_, _| 0.0)
}

fn zero1() -> TimeFn {
    Arc::new(|_| 0.0)
}

impl MarkovianProblem {
    /// Heat problem: b = 0, σ = 1, f = 0, G = H = h = 0.
    pub fn heat<L: Fn(f64) -> f64 + Send + Sync + 'static>(terminal: L, horizon: f64) -> Self {
        Self {
            horizon,
            b: zero2(),
            sigma: Arc::new(|_, _| 1.0),
            b_lipschitz: 0.0,
            sigma_lipschitz: 0.0,
            terminal: Arc::new(terminal),
            f: Arc::new(|_, _, _, _| 0.0),
            f_lipschitz: 0.0,
            g: zero1(),
            gp: zero1(),
            h_time: zero1(),
            hp_time: zero1(),
            h_space: zero2(),
            h_derivatives: [zero2(), zero2(), zero2()],
            p: 2.5,
        }
    }

    pub fn with_constant_g(mut self, g: f64) -> Self {
        self.g = Arc::new(move |_| g);
        self.gp = zero1();
        self
    }

    pub fn with_coefficients(mut self, b: Coefficient, sigma: Coefficient, b_lip: f64, sigma_lip: f64) -> Self {
        self.b = b;
        self.sigma = sigma;
        self.b_lipschitz = b_lip;
        self.sigma_lipschitz = sigma_lip;
        self
    }

    pub fn with_driver(mut self, f: MarkovDriverFn, lipschitz: f64) -> Self {
        self.f = f;
        self.f_lipschitz = lipschitz;
        self
    }

    /// Spot check of the declared Lipschitz constants and of |∂ₓh| against differences.
    pub fn audit(&self, points: usize, radius: f64, seed: u64) -> CoefficientAudit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = CoefficientAudit { points, ..Default::default() };
        for _ in 0..points {
            let t = rng.random_range(0.0..self.horizon);
            let x1 = rng.random_range(-radius..radius);
            let x2 = rng.random_range(-radius..radius);
            let dx = (x1 - x2).abs().max(1e-300);
            let rb = ((self.b)(t, x1) - (self.b)(t, x2)).abs() / dx;
            let rs = ((self.sigma)(t, x1) - (self.sigma)(t, x2)).abs() / dx;
            out.b_measured = out.b_measured.max(rb);
            out.sigma_measured = out.sigma_measured.max(rs);
            if rb > self.b_lipschitz * (1.0 + 1e-9) + 1e-12 || rs > self.sigma_lipschitz * (1.0 + 1e-9) + 1e-12 {
                out.violations += 1;
            }
            let hstep = 1e-5;
            let fd = ((self.h_space)(t, x1 + hstep) - (self.h_space)(t, x1 - hstep)) / (2.0 * hstep);
            out.h_derivative_gap = out.h_derivative_gap.max((fd - (self.h_derivatives[1])(t, x1)).abs());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CoefficientAudit {
    pub points: usize,
    pub violations: usize,
    pub b_measured: f64,
    pub sigma_measured: f64,
    pub h_derivative_gap: f64,
}

/// Euler scheme S_{i+1} = S_i + b dt + σ δW started at x, with coefficient time t0 + t_i.
pub fn simulate_forward_sde(problem: &MarkovianProblem, t0: f64, x: f64, model: &dyn ProbabilityModel) -> Process {
    let grid = model.grid();
    let n = model.n_samples();
    let cells = grid.n_cells();
    let paths: Vec<Vec<f64>> = par::map_indexed(n, |s| {
        let mut out = Vec::with_capacity(cells + 1);
        let mut v = x;
        out.push(v);
        for i in 0..cells {
            let t = t0 + grid.t(i);
            v += (problem.b)(t, v) * grid.dt(i) + (problem.sigma)(t, v) * model.dw(s, i, 0);
            out.push(v);
        }
        out
    });
    Process::from_fn(cells + 1, n, |i, s| paths[s][i])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    FeynmanKac,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoughPdeSolution {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// u[time][x].
    pub u: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl RoughPdeSolution {
    pub fn at(&self, ti: usize, xi: usize) -> f64 {
        self.u[ti][xi]
    }

    /// sup over the shared (t, x) grid of |u − v|.
    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        if self.times.len() != other.times.len() || self.xs.len() != other.xs.len() {
            return Err(Error::GridMismatch("solutions on different (t, x) grids".into()));
        }
        Ok(self
            .u
            .iter()
            .zip(&other.u)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "x", "u"])?;
        for (ti, t) in self.times.iter().enumerate() {
            for (xi, x) in self.xs.iter().enumerate() {
                wtr.write_record([fmt_f64(*t), fmt_f64(*x), fmt_f64(self.u[ti][xi])])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeynmanKacOptions {
    /// Branching steps of the tree over the full horizon.
    pub steps: usize,
    pub substeps: usize,
    pub linear: LinearOptions,
}

impl Default for FeynmanKacOptions {
    fn default() -> Self {
        Self { steps: 10, substeps: 20, linear: LinearOptions::default() }
    }
}

/// Tree for a start time t0: the branching steps still ahead of t0 (at least one).
fn tree_from(t0: f64, horizon: f64, opts: &FeynmanKacOptions) -> Result<BinomialTree> {
    let rest = horizon - t0;
    let steps = ((opts.steps as f64 * rest / horizon).round() as usize).max(1);
    BinomialTree::with_substeps(steps, 1, rest, opts.substeps)
}

/// The rough BSDE of the problem started at (t0, x) on `model` (time measured from t0).
pub fn markovian_bsde(
    problem: &MarkovianProblem,
    drive: &SmoothDrive,
    t0: f64,
    x: f64,
    model: &dyn ProbabilityModel,
) -> Result<(LinearRoughBsdeProblem, Process)> {
    let grid = model.grid().clone();
    let nt = grid.len();
    let n = model.n_samples();
    let states = Arc::new(simulate_forward_sde(problem, t0, x, model));
    let xi: Vec<f64> = states.row(nt - 1).iter().map(|v| (problem.terminal)(*v)).collect();
    let st = states.clone();
    let fm = problem.f.clone();
    let driver = Driver::new(problem.f_lipschitz, move |t, i, s, y, z| fm(t0 + t, st.at(i, s), y, z[0]));
    let (g, gp) = (problem.g.clone(), problem.gp.clone());
    let gg = grid.clone();
    let g_path = EssBoundedControlledPath::deterministic(nt, |i| g(t0 + gg.t(i)), |i| gp(t0 + gg.t(i)));
    let h = Process::from_fn(nt, n, |i, s| {
        let t = t0 + grid.t(i);
        (problem.h_time)(t) + (problem.h_space)(t, states.at(i, s))
    });
    let hp = Process::from_fn(nt, n, |i, _| (problem.hp_time)(t0 + grid.t(i)));
    let rp = drive.lift_on(&grid, t0, problem.p)?;
    let lin = LinearRoughBsdeProblem::new(xi, driver, g_path, Drive::single(rp))?.with_h(h, hp)?;
    Ok((lin, Arc::try_unwrap(states).unwrap_or_else(|a| (*a).clone())))
}

/// u(t, x) = Y_t of the rough BSDE started at (t, x), for every grid pair.
pub fn feynman_kac_u(
    problem: &MarkovianProblem,
    drive: &SmoothDrive,
    times: &[f64],
    xs: &[f64],
    opts: &FeynmanKacOptions,
) -> Result<RoughPdeSolution> {
    let nx = xs.len();
    let flat: Vec<Result<f64>> = par::map_indexed(times.len() * nx, |k| {
        let (t, x) = (times[k / nx], xs[k % nx]);
        if t >= problem.horizon {
            return Ok((problem.terminal)(x));
        }
        let run = || -> Result<f64> {
            let tree = tree_from(t, problem.horizon, opts)?;
            let (lin, _) = markovian_bsde(problem, drive, t, x, &tree)?;
            let sol = solve_linear_rough_bsde(&lin, &tree, &opts.linear)?;
            Ok(sol.y.row(0).iter().sum::<f64>() / tree.n_samples() as f64)
        };
        run().map_err(|e| Error::AtPoint { t, x, source: Box::new(e) })
    });
    let mut u = vec![vec![0.0; nx]; times.len()];
    for (k, v) in flat.into_iter().enumerate() {
        u[k / nx][k % nx] = v?;
    }
    Ok(RoughPdeSolution { times: times.to_vec(), xs: xs.to_vec(), u, provenance: Provenance::FeynmanKac })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub dt: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { x_min: -8.0, x_max: 8.0, dx: 1e-2, dt: 1e-3 }
    }
}

/// Thomas algorithm for a tridiagonal system (sub, diag, sup) x = rhs.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta.abs() < 1e-300 {
        return Err(Error::Precondition("singular finite-difference system".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = sup[i - 1] / beta;
        beta = diag[i] - sub[i] * c[i - 1];
        if beta.abs() < 1e-300 {
            return Err(Error::Precondition("singular finite-difference system".into()));
        }
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}

/// Crank–Nicolson with central differences, Dirichlet data l at both ends;
/// the driver and the H + h source are explicit at the later time level.
pub fn fd_pde_oracle(
    problem: &MarkovianProblem,
    drive: &SmoothDrive,
    times: &[f64],
    xs: &[f64],
    opts: &FdOptions,
) -> Result<RoughPdeSolution> {
    if !(opts.dx > 0.0 && opts.dt > 0.0 && opts.x_max > opts.x_min) {
        return Err(Error::Precondition("finite-difference grid must be non-degenerate".into()));
    }
    if xs.iter().any(|&x| x <= opts.x_min || x >= opts.x_max) {
        return Err(Error::Precondition("query points must lie inside the spatial domain".into()));
    }
    let m = ((opts.x_max - opts.x_min) / opts.dx).round() as usize;
    let dx = (opts.x_max - opts.x_min) / m as f64;
    let nodes: Vec<f64> = (0..=m).map(|j| opts.x_min + j as f64 * dx).collect();
    let horizon = problem.horizon;
    let steps = (horizon / opts.dt).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let step_of = |t: f64| ((t / dt).round() as usize).min(steps);
    let mut u: Vec<f64> = nodes.iter().map(|&x| (problem.terminal)(x)).collect();
    let mut out = vec![vec![0.0; xs.len()]; times.len()];
    let sample = |u: &[f64], out_row: &mut Vec<f64>| {
        for (k, &x) in xs.iter().enumerate() {
            let j = (((x - opts.x_min) / dx).floor() as usize).min(m - 1);
            let w = (x - nodes[j]) / dx;
            out_row[k] = (1.0 - w) * u[j] + w * u[j + 1];
        }
    };
    for (ti, &t) in times.iter().enumerate() {
        if step_of(t) == steps {
            sample(&u, &mut out[ti]);
        }
    }
    let inner = m - 1;
    for n in (0..steps).rev() {
        let t_mid = (n as f64 + 0.5) * dt;
        let t_late = (n + 1) as f64 * dt;
        let xdot = (drive.xdot)(t_mid);
        let gk = (problem.g)(t_mid) * xdot;
        let mut sub = vec![0.0; inner];
        let mut diag = vec![0.0; inner];
        let mut sup = vec![0.0; inner];
        let mut rhs = vec![0.0; inner];
        for k in 0..inner {
            let j = k + 1;
            let x = nodes[j];
            let sig = (problem.sigma)(t_mid, x);
            let a = 0.5 * sig * sig / (dx * dx);
            let bc = (problem.b)(t_mid, x) / (2.0 * dx);
            let lo = a - bc;
            let hi = a + bc;
            let mid = -2.0 * a + gk;
            let ux = (u[j + 1] - u[j - 1]) / (2.0 * dx);
            let sig_late = (problem.sigma)(t_late, x);
            let source = (problem.f)(t_late, x, u[j], sig_late * ux)
                + ((problem.h_time)(t_mid) + (problem.h_space)(t_mid, x)) * xdot;
            rhs[k] = u[j] + 0.5 * dt * (lo * u[j - 1] + mid * u[j] + hi * u[j + 1]) + dt * source;
            sub[k] = -0.5 * dt * lo;
            diag[k] = 1.0 - 0.5 * dt * mid;
            sup[k] = -0.5 * dt * hi;
        }
        let left = (problem.terminal)(nodes[0]);
        let right = (problem.terminal)(nodes[m]);
        rhs[0] -= sub[0] * left;
        rhs[inner - 1] -= sup[inner - 1] * right;
        solve_tridiagonal(&sub, &diag, &sup, &mut rhs)?;
        u[0] = left;
        u[m] = right;
        u[1..m].copy_from_slice(&rhs);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!("finite-difference blow-up at step {n}")));
        }
        for (ti, &t) in times.iter().enumerate() {
            if step_of(t) == n {
                sample(&u, &mut out[ti]);
            }
        }
    }
    Ok(RoughPdeSolution { times: times.to_vec(), xs: xs.to_vec(), u: out, provenance: Provenance::FiniteDifference })
}

/// Table of (level, sup |u(𝐗ᵏ) − u(𝐗)|) by Feynman–Kac over the (t, x) grid.
pub fn continuity_in_x_audit(
    problem: &MarkovianProblem,
    levels: &[(f64, SmoothDrive)],
    limit: &SmoothDrive,
    times: &[f64],
    xs: &[f64],
    opts: &FeynmanKacOptions,
) -> Result<ConvergenceTable> {
    let reference = feynman_kac_u(problem, limit, times, xs, opts)?;
    let mut table = ConvergenceTable::new("level", "sup_distance");
    for (label, drive) in levels {
        let u = feynman_kac_u(problem, drive, times, xs, opts)?;
        table.push(*label, u.sup_distance(&reference)?);
    }
    Ok(table)
}
