//! Linear rough BSDE
//!
//! Y_t = ξ + ∫ₜ^T f(r, Y_r, Z_r) dr + ∫ₜ^T (G_r Y_r + H_r) d𝐗_r − ∫ₜ^T Z_r dW_r
//!
//! solved by Picard iteration on backward windows, with the Gubinelli
//! derivative kept equal to −(GY + H).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::Driver;
use crate::controlled::{controlled_distance, controlled_norm, Drive, EssBoundedControlledPath, StochasticControlledPath};
use crate::error::{Error, Result};
use crate::integral::{integrate_window, IntegralOptions};
use crate::models::{martingale_representation_window, ProbabilityModel, WindowModel};
use crate::par;
use crate::process::{lm_norm, Process};
use crate::rates::ConvergenceTable;
use crate::rough_path::{rough_distance, RoughPath, DEFAULT_COARSE_CAP};

#[derive(Clone, Debug)]
pub struct LinearRoughBsdeProblem {
    pub xi: Vec<f64>,
    pub driver: Driver,
    pub g: EssBoundedControlledPath,
    pub h: Process,
    pub hp: Process,
    pub drive: Drive,
}

impl LinearRoughBsdeProblem {
    /// Problem with H = H′ = 0.
    pub fn new(xi: Vec<f64>, driver: Driver, g: EssBoundedControlledPath, drive: Drive) -> Result<Self> {
        let n_times = drive.grid().len();
        if g.n_times() != n_times {
            return Err(Error::GridMismatch(format!("G needs {n_times} rows")));
        }
        let n = xi.len();
        if !drive.is_single() && drive.paths().len() != n {
            return Err(Error::GridMismatch("one rough path per sample expected".into()));
        }
        let zeros = Process::zeros(n_times, n);
        Ok(Self { xi, driver, g, h: zeros.clone(), hp: zeros, drive })
    }

    pub fn with_h(mut self, h: Process, hp: Process) -> Result<Self> {
        let shape = (self.drive.grid().len(), self.xi.len());
        if (h.n_times(), h.n_samples()) != shape || (hp.n_times(), hp.n_samples()) != shape {
            return Err(Error::GridMismatch(format!("H and H′ need shape {shape:?}")));
        }
        self.h = h;
        self.hp = hp;
        Ok(self)
    }

    pub fn h_path(&self) -> Result<StochasticControlledPath> {
        StochasticControlledPath::with_defaults(self.h.clone(), self.hp.clone(), self.drive.clone())
    }

    /// K = 4(1 + C)(1 + ‖(G, G′)‖).
    pub fn window_constant(&self, c: f64) -> f64 {
        4.0 * (1.0 + c) * (1.0 + self.g.norm(&self.drive))
    }

    fn check(&self, model: &dyn ProbabilityModel) -> Result<()> {
        if model.grid() != self.drive.grid() {
            return Err(Error::GridMismatch("model and rough path grids differ".into()));
        }
        if self.xi.len() != model.n_samples() {
            return Err(Error::GridMismatch(format!("ξ has {} samples, model {}", self.xi.len(), model.n_samples())));
        }
        if self.g.g.n_samples() != 1 && self.g.g.n_samples() != model.n_samples() {
            return Err(Error::GridMismatch("G must be deterministic or per sample".into()));
        }
        if self.xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("ξ must be finite".into()));
        }
        Ok(())
    }

    /// Measured sizes of the data and a Lipschitz spot check of f.
    pub fn audit(&self, model: &dyn ProbabilityModel, points: usize, seed: u64) -> Result<AssumptionAudit> {
        self.check(model)?;
        let grid = model.grid();
        let n = model.n_samples();
        let d = model.dim();
        let zero = vec![0.0; d];
        let f0: Vec<f64> = par::map_indexed(n, |s| {
            (0..grid.n_cells()).map(|i| self.driver.eval(grid.t(i), i, s, 0.0, &zero).powi(2) * grid.dt(i)).sum::<f64>()
        });
        let f0_l2 = (f0.iter().sum::<f64>() / n as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = self.driver.lipschitz;
        let mut violations = 0;
        let mut worst_ratio: f64 = 0.0;
        for _ in 0..points {
            let i = rng.random_range(0..grid.n_cells());
            let s = rng.random_range(0..n);
            let y1: f64 = rng.random_range(-1.0..1.0);
            let y2: f64 = rng.random_range(-1.0..1.0);
            let z1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = grid.t(i);
            let lhs = (self.driver.eval(t, i, s, y1, &z1) - self.driver.eval(t, i, s, y2, &z2)).abs();
            let dz = z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let rhs = (y1 - y2).abs() + dz;
            if lhs > l * rhs * (1.0 + 1e-9) + 1e-12 {
                violations += 1;
            }
            if rhs > 0.0 {
                worst_ratio = worst_ratio.max(lhs / rhs);
            }
        }
        let h_norm = controlled_norm(&self.h_path()?, 1.0, (0, grid.n_cells()), model)?.total;
        let out = AssumptionAudit {
            xi_l2: lm_norm(&self.xi, 2.0),
            f0_l2,
            lipschitz_points: points,
            lipschitz_violations: violations,
            lipschitz_measured: worst_ratio,
            g_norm: self.g.norm(&self.drive),
            h_norm,
        };
        Ok(out)
    }
}

/// Sizes of ξ, f(·,0,0), (G,G′), (H,H′) and the Lipschitz spot check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssumptionAudit {
    pub xi_l2: f64,
    pub f0_l2: f64,
    pub lipschitz_points: usize,
    pub lipschitz_violations: usize,
    /// Largest |Δf| / (|Δy| + |Δz|) seen.
    pub lipschitz_measured: f64,
    pub g_norm: f64,
    /// ‖(H, H′)‖^{(1)}.
    pub h_norm: f64,
}

impl AssumptionAudit {
    pub fn passed(&self) -> bool {
        [self.xi_l2, self.f0_l2, self.g_norm, self.h_norm].iter().all(|v| v.is_finite()) && self.lipschitz_violations == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Start {
    /// Y = 0 before the window end.
    #[default]
    Zero,
    /// Y_t = Y_b − Y′_b δX_{t,b}.
    TerminalExtension,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearOptions {
    /// The generic constant in K = 4(1 + C)(1 + ‖(G, G′)‖).
    pub c: f64,
    /// Overrides ε = 1/K⁴.
    pub epsilon: Option<f64>,
    /// Error on any cell that violates the ε rule.
    pub strict: bool,
    /// Relative tolerance on successive window distances.
    pub tol: f64,
    pub max_iter: usize,
    pub start: Start,
    /// Windows whose measured ratio exceeds this are bisected.
    pub fallback_ratio: f64,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self { c: 2.0, epsilon: None, strict: false, tol: 1e-12, max_iter: 200, start: Start::Zero, fallback_ratio: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowReport {
    pub start: usize,
    pub end: usize,
    pub k: f64,
    pub epsilon: f64,
    /// Both t_b − t_a ≤ ε and |𝐗|_{p-var;[a,b]} ≤ ε.
    pub criterion_met: bool,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-node residual of the discrete equation in the window.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct RoughBsdeSolution {
    pub y: Process,
    /// Z per Brownian component, one row per cell.
    pub z: Vec<Process>,
    /// (Y, Y′) with Y′ = −(GY + H).
    pub controlled: StochasticControlledPath,
    pub windows: Vec<WindowReport>,
    /// Largest over nodes of ‖Y_t − (ξ + ∫ₜ^T f dr + ∫ₜ^T (GY+H) d𝐗 − ∫ₜ^T Z dW)‖₂.
    pub residual: f64,
    /// Largest per-node, per-sample residual of the one-cell equation.
    pub node_residual: f64,
    pub converged: bool,
    pub k: f64,
    pub epsilon: f64,
}

impl RoughBsdeSolution {
    pub fn max_ratio(&self) -> f64 {
        self.windows.iter().fold(0.0, |m, w| m.max(w.max_ratio))
    }

    /// ‖Z‖₂ = (𝔼 Σ |Z|² dt)^{1/2}.
    pub fn z_l2(&self, model: &dyn ProbabilityModel) -> f64 {
        z_l2(&self.z, None, model, 0)
    }
}

/// ‖Z − Z̄‖₂ on the cells of `model` starting at cell `a` of its grid.
fn z_l2(z: &[Process], other: Option<&[Process]>, model: &dyn ProbabilityModel, a: usize) -> f64 {
    let n = model.n_samples();
    let grid = model.grid();
    let mut acc = 0.0;
    for (c, zc) in z.iter().enumerate() {
        for k in 0..zc.n_times() {
            let dt = grid.dt(a + k);
            for s in 0..n {
                let v = zc.at(k, s) - other.map_or(0.0, |o| o[c].at(k, s));
                acc += v * v * dt;
            }
        }
    }
    (acc / n as f64).sqrt()
}

/// Backward windows `(a, b, criterion_met)` in increasing order.
pub fn plan_windows(problem: &LinearRoughBsdeProblem, epsilon: f64, strict: bool) -> Result<Vec<(usize, usize, bool)>> {
    let grid = problem.drive.grid();
    let ok = |a: usize, b: usize| {
        grid.t(b) - grid.t(a) <= epsilon && problem.drive.pvar_total(a, b, DEFAULT_COARSE_CAP) <= epsilon
    };
    let mut out = Vec::new();
    let mut b = grid.n_cells();
    while b > 0 {
        let mut a = b - 1;
        if !ok(a, b) {
            if strict {
                return Err(Error::TooRough { start: a, end: b, ratio: f64::NAN });
            }
            out.push((a, b, false));
            b = a;
            continue;
        }
        while a > 0 && ok(a - 1, b) {
            a -= 1;
        }
        out.push((a, b, true));
        b = a;
    }
    out.reverse();
    Ok(out)
}

/// Solves the problem window by window from the terminal time.
pub fn solve_linear_rough_bsde(
    problem: &LinearRoughBsdeProblem,
    model: &dyn ProbabilityModel,
    opts: &LinearOptions,
) -> Result<RoughBsdeSolution> {
    problem.check(model)?;
    let grid = model.grid();
    let cells = grid.n_cells();
    let n = model.n_samples();
    let k = problem.window_constant(opts.c);
    let epsilon = opts.epsilon.unwrap_or(1.0 / k.powi(4));
    let mut pending = plan_windows(problem, epsilon, opts.strict)?;
    let mut y = Process::zeros(cells + 1, n);
    y.set_row(cells, &problem.xi);
    let mut z = vec![Process::zeros(cells, n); model.dim()];
    let mut reports = Vec::new();
    while let Some((a, b, met)) = pending.pop() {
        let (yw, zw, mut rep) = solve_window(problem, model, a, b, &y, &z, k, opts)?;
        rep.epsilon = epsilon;
        rep.criterion_met = met;
        if rep.max_ratio > opts.fallback_ratio || !rep.max_ratio.is_finite() {
            if b - a == 1 {
                return Err(Error::TooRough { start: a, end: b, ratio: rep.max_ratio });
            }
            let mid = a + (b - a) / 2;
            pending.push((a, mid, met));
            pending.push((mid, b, met));
            continue;
        }
        y.put_rows(a, &yw);
        for (zc, wc) in z.iter_mut().zip(&zw) {
            zc.put_rows(a, wc);
        }
        reports.push(rep);
    }
    reports.reverse();
    let yp = derivative(problem, &y, 0);
    let controlled = StochasticControlledPath::with_defaults(y.clone(), yp, problem.drive.clone())?;
    let (residual, node_residual) = global_residual(problem, model, &y, &z);
    let converged = reports.iter().all(|r| r.converged);
    Ok(RoughBsdeSolution { y, z, controlled, windows: reports, residual, node_residual, converged, k, epsilon })
}

/// −(G Y + H) on rows starting at global row `a`.
fn derivative(problem: &LinearRoughBsdeProblem, y: &Process, a: usize) -> Process {
    Process::from_fn(y.n_times(), y.n_samples(), |i, s| -(problem.g.g(a + i, s) * y.at(i, s) + problem.h.at(a + i, s)))
}

/// (V, V′) = (GY + H, GY′ + G′Y + H′) with Y′ = −V, on rows from global row `a`.
fn rough_drift(problem: &LinearRoughBsdeProblem, y: &Process, a: usize) -> (Process, Process) {
    let v = Process::from_fn(y.n_times(), y.n_samples(), |i, s| problem.g.g(a + i, s) * y.at(i, s) + problem.h.at(a + i, s));
    let vp = Process::from_fn(y.n_times(), y.n_samples(), |i, s| {
        let gi = problem.g.g(a + i, s);
        -gi * v.at(i, s) + problem.g.gp(a + i, s) * y.at(i, s) + problem.hp.at(a + i, s)
    });
    (v, vp)
}

/// Per-cell equation terms f dt + V δX + V′ 𝕏 − Z δW for global cell `i`.
fn cell_terms(
    problem: &LinearRoughBsdeProblem,
    model: &dyn ProbabilityModel,
    i: usize,
    y: &[f64],
    z: &[Process],
    zrow: usize,
) -> Vec<f64> {
    let grid = model.grid();
    let d = model.dim();
    let t = grid.t(i);
    let dt = grid.dt(i);
    (0..y.len())
        .map(|s| {
            let zs: Vec<f64> = (0..d).map(|c| z[c].at(zrow, s)).collect();
            let x = problem.drive.for_sample(s);
            let gi = problem.g.g(i, s);
            let v = gi * y[s] + problem.h.at(i, s);
            let vp = -gi * v + problem.g.gp(i, s) * y[s] + problem.hp.at(i, s);
            let noise: f64 = zs.iter().enumerate().map(|(c, zc)| zc * model.dw(s, i, c)).sum();
            problem.driver.eval(t, i, s, y[s], &zs) * dt + v * (x.x(i + 1) - x.x(i)) + vp * x.xx(i, i + 1) - noise
        })
        .collect()
}

fn global_residual(problem: &LinearRoughBsdeProblem, model: &dyn ProbabilityModel, y: &Process, z: &[Process]) -> (f64, f64) {
    let cells = model.grid().n_cells();
    let n = model.n_samples();
    let mut acc = problem.xi.clone();
    let mut worst_l2: f64 = lm_norm(&y.row(cells).iter().zip(&acc).map(|(a, b)| a - b).collect::<Vec<_>>(), 2.0);
    let mut worst_node: f64 = 0.0;
    for i in (0..cells).rev() {
        let terms = cell_terms(problem, model, i, y.row(i), z, i);
        for s in 0..n {
            acc[s] += terms[s];
            let local = y.at(i, s) - (y.at(i + 1, s) + terms[s]);
            worst_node = worst_node.max(local.abs());
        }
        let diff: Vec<f64> = y.row(i).iter().zip(&acc).map(|(a, b)| a - b).collect();
        worst_l2 = worst_l2.max(lm_norm(&diff, 2.0));
    }
    (worst_l2, worst_node)
}

struct WindowData<'a> {
    problem: &'a LinearRoughBsdeProblem,
    model: &'a dyn ProbabilityModel,
    wm: WindowModel<'a>,
    drive: Drive,
    a: usize,
    len: usize,
    y_end: Vec<f64>,
    tail: Option<Vec<Process>>,
    iopts: IntegralOptions,
}

impl WindowData<'_> {
    /// One Picard step Φ: returns (Y, Z) on the window from the input Y and Z.
    fn phi(&self, y: &Process, z: &[Process]) -> Result<(Process, Vec<Process>)> {
        let n = self.model.n_samples();
        let grid = self.model.grid();
        let len = self.len;
        let a = self.a;
        let (v, vp) = rough_drift(self.problem, y, a);
        let scp = StochasticControlledPath::with_defaults(v, vp, self.drive.clone())?;
        let integral = integrate_window(&scp, &self.wm, (0, len), &self.iopts)?.values;
        let d = self.model.dim();
        let drift: Vec<Vec<f64>> = par::map_indexed(n, |s| {
            let mut acc = vec![0.0; len + 1];
            let mut zs = vec![0.0; d];
            for k in 0..len {
                for (c, zc) in zs.iter_mut().enumerate() {
                    *zc = z[c].at(k, s);
                }
                let i = a + k;
                acc[k + 1] = acc[k] + self.problem.driver.eval(grid.t(i), i, s, y.at(k, s), &zs) * grid.dt(i);
            }
            acc
        });
        let gamma: Vec<f64> = (0..n).map(|s| self.y_end[s] + drift[s][len] + integral.at(len, s)).collect();
        let mut mart = Process::zeros(len + 1, n);
        let rows = par::map_indexed(len, |k| self.wm.cond_exp(&gamma, k));
        for (k, r) in rows.iter().enumerate() {
            mart.set_row(k, r);
        }
        mart.set_row(len, &gamma);
        let (znew, _) = martingale_representation_window(&mart, &self.wm, 0, len, self.tail.as_deref())?;
        let mut ynew = Process::from_fn(len + 1, n, |k, s| mart.at(k, s) - drift[s][k] - integral.at(k, s));
        ynew.set_row(len, &self.y_end);
        Ok((ynew, znew))
    }

    fn distance(&self, y1: &Process, z1: &[Process], y2: &Process, z2: &[Process], k: f64) -> Result<f64> {
        let p1 = StochasticControlledPath::with_defaults(y1.clone(), derivative(self.problem, y1, self.a), self.drive.clone())?;
        let p2 = StochasticControlledPath::with_defaults(y2.clone(), derivative(self.problem, y2, self.a), self.drive.clone())?;
        let cd = controlled_distance(&p1, Some(&p2), k, (0, self.len), &self.wm)?.total;
        Ok(cd + k * z_l2(z1, Some(z2), self.model, self.a))
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_window(
    problem: &LinearRoughBsdeProblem,
    model: &dyn ProbabilityModel,
    a: usize,
    b: usize,
    y: &Process,
    z: &[Process],
    k: f64,
    opts: &LinearOptions,
) -> Result<(Process, Vec<Process>, WindowReport)> {
    let n = model.n_samples();
    let len = b - a;
    let wm = WindowModel::new(model, a, b);
    let last_noise = wm.noise_cell(len - 1);
    let tail = (last_noise >= len).then(|| {
        z.iter()
            .map(|zc| {
                let mut t = Process::zeros(last_noise + 1, n);
                t.set_row(last_noise, zc.row(last_noise + a));
                t
            })
            .collect()
    });
    let mut iopts = IntegralOptions::quiet();
    iopts.sewing.tol = 0.0;
    let data = WindowData {
        problem,
        model,
        wm,
        drive: problem.drive.window(a, b),
        a,
        len,
        y_end: y.row(b).to_vec(),
        tail,
        iopts,
    };
    let mut cur = match opts.start {
        Start::Zero => {
            let mut p = Process::zeros(len + 1, n);
            p.set_row(len, &data.y_end);
            p
        }
        Start::TerminalExtension => Process::from_fn(len + 1, n, |kk, s| {
            let x = data.drive.for_sample(s);
            let yb = data.y_end[s];
            yb + (problem.g.g(b, s) * yb + problem.h.at(b, s)) * (x.x(len) - x.x(kk))
        }),
    };
    let mut cur_z = vec![Process::zeros(len, n); model.dim()];
    let scale = 1.0 + data.y_end.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-11 * scale;
    let mut ratios = Vec::new();
    let mut prev: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let (ny, nz) = data.phi(&cur, &cur_z)?;
        let dist = data.distance(&ny, &nz, &cur, &cur_z, k)?;
        iterations += 1;
        cur = ny;
        cur_z = nz;
        if let Some(p) = prev {
            if p > floor {
                ratios.push(dist / p);
            }
        }
        if !dist.is_finite() {
            ratios.push(f64::INFINITY);
            break;
        }
        if dist <= opts.tol * scale {
            converged = true;
            break;
        }
        if ratios.len() >= 2 && ratios[ratios.len() - 2..].iter().all(|r| *r > opts.fallback_ratio) {
            break;
        }
        prev = Some(dist);
    }
    let mut residual: f64 = 0.0;
    for kk in 0..len {
        let terms = cell_terms(problem, model, a + kk, cur.row(kk), &cur_z, kk);
        for s in 0..n {
            residual = residual.max((cur.at(kk, s) - cur.at(kk + 1, s) - terms[s]).abs());
        }
    }
    let max_ratio = ratios.iter().fold(0.0f64, |m, r| m.max(*r));
    let report = WindowReport {
        start: a,
        end: b,
        k,
        epsilon: 0.0,
        criterion_met: false,
        ratios,
        max_ratio,
        iterations,
        converged,
        residual,
    };
    Ok((cur, cur_z, report))
}

/// e^{g δX_{t_i,T}} 𝔼_{t_i} ξ for constant G = g, H = 0, f = 0 and a geometric drive.
pub fn duality_oracle(xi: &[f64], g: f64, rp: &RoughPath, model: &dyn ProbabilityModel) -> Process {
    let grid = model.grid();
    let last = grid.n_cells();
    let rows: Vec<Vec<f64>> = par::map_indexed(grid.len(), |i| {
        let factor = (g * (rp.x(last) - rp.x(i))).exp();
        model.cond_exp(xi, i).into_iter().map(|v| factor * v).collect()
    });
    Process::from_rows(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundednessRow {
    pub index: usize,
    /// ‖(Y, Y′)‖^{(1)}.
    pub controlled_norm: f64,
    pub z_l2: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundednessReport {
    pub rows: Vec<BoundednessRow>,
    pub sup: f64,
    /// Largest total over smallest total.
    pub spread: f64,
}

/// Solution norms across a family of problems on one model.
pub fn boundedness_audit(
    family: &[LinearRoughBsdeProblem],
    model: &dyn ProbabilityModel,
    opts: &LinearOptions,
) -> Result<BoundednessReport> {
    let cells = model.grid().n_cells();
    let mut rows = Vec::with_capacity(family.len());
    for (index, problem) in family.iter().enumerate() {
        let sol = solve_linear_rough_bsde(problem, model, opts)?;
        let cn = controlled_norm(&sol.controlled, 1.0, (0, cells), model)?.total;
        let zl = sol.z_l2(model);
        rows.push(BoundednessRow { index, controlled_norm: cn, z_l2: zl, total: cn + zl });
    }
    let sup = rows.iter().fold(0.0f64, |m, r| m.max(r.total));
    let inf = rows.iter().fold(f64::INFINITY, |m, r| m.min(r.total));
    let spread = if inf > 0.0 { sup / inf } else if sup == 0.0 { 1.0 } else { f64::INFINITY };
    Ok(BoundednessReport { rows, sup, spread })
}

/// Distance of the data of two problems: ‖Δξ‖₂ + ‖Δf(·,0,0)‖₂ + ρ(𝐗, 𝐗̄) + ‖ΔG‖∞ + ‖ΔG′‖∞ + ‖Δ(H,H′)‖^{(1)}.
pub fn input_distance(
    a: &LinearRoughBsdeProblem,
    b: &LinearRoughBsdeProblem,
    model: &dyn ProbabilityModel,
) -> Result<f64> {
    let grid = model.grid();
    let n = model.n_samples();
    let dxi: Vec<f64> = a.xi.iter().zip(&b.xi).map(|(u, v)| u - v).collect();
    let zero = vec![0.0; model.dim()];
    let df: Vec<f64> = par::map_indexed(n, |s| {
        (0..grid.n_cells())
            .map(|i| {
                let t = grid.t(i);
                (a.driver.eval(t, i, s, 0.0, &zero) - b.driver.eval(t, i, s, 0.0, &zero)).powi(2) * grid.dt(i)
            })
            .sum::<f64>()
    });
    let df = (df.iter().sum::<f64>() / n as f64).sqrt();
    let paths = a.drive.paths().len().max(b.drive.paths().len()).min(DEFAULT_COARSE_CAP);
    let mut rho: f64 = 0.0;
    for s in 0..paths {
        rho = rho.max(rough_distance(a.drive.for_sample(s), b.drive.for_sample(s))?);
    }
    let gs = a.g.g.n_samples().max(b.g.g.n_samples());
    let mut dg: f64 = 0.0;
    let mut dgp: f64 = 0.0;
    for i in 0..grid.len() {
        for s in 0..gs {
            dg = dg.max((a.g.g(i, s) - b.g.g(i, s)).abs());
            dgp = dgp.max((a.g.gp(i, s) - b.g.gp(i, s)).abs());
        }
    }
    let dh = controlled_distance(&a.h_path()?, Some(&b.h_path()?), 1.0, (0, grid.n_cells()), model)?.total;
    Ok(lm_norm(&dxi, 2.0) + df + rho + dg + dgp + dh)
}

/// Table of (input distance, ‖(Y,Y′) − (Ȳ,Ȳ′)‖^{(K)} + K‖Z − Z̄‖₂) against `base`.
pub fn continuity_audit(
    base: &LinearRoughBsdeProblem,
    family: &[LinearRoughBsdeProblem],
    model: &dyn ProbabilityModel,
    opts: &LinearOptions,
) -> Result<ConvergenceTable> {
    let cells = model.grid().n_cells();
    let limit = solve_linear_rough_bsde(base, model, opts)?;
    let k = limit.k;
    let mut table = ConvergenceTable::new("input_distance", "solution_distance");
    for problem in family {
        let sol = solve_linear_rough_bsde(problem, model, opts)?;
        let cd = controlled_distance(&sol.controlled, Some(&limit.controlled), k, (0, cells), model)?.total;
        let dz = z_l2(&sol.z, Some(&limit.z), model, 0);
        table.push(input_distance(problem, base, model)?, cd + k * dz);
    }
    Ok(table)
}
