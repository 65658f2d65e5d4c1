//! Probability backends: an exact binomial tree and a Monte Carlo Brownian
//! ensemble, with conditional expectation, martingale representation and the
//! martingale decomposition of adapted processes.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::par;
use crate::process::{lm_norm, Process};
use crate::rough_path::{capped_indices, fmt_f64, p_variation_on, TimeGrid, DEFAULT_COARSE_CAP};

/// Filtered probability space on a finite grid with uniformly weighted samples.
pub trait ProbabilityModel: Send + Sync {
    fn grid(&self) -> &TimeGrid;
    fn n_samples(&self) -> usize;
    /// Brownian dimension d.
    fn dim(&self) -> usize;
    /// Increment δW over grid cell `cell`.
    fn dw(&self, sample: usize, cell: usize, comp: usize) -> f64;
    /// W at grid index `i`.
    fn w(&self, sample: usize, i: usize, comp: usize) -> f64;
    /// 𝔼_{t_i} of a per-sample quantity, returned per sample.
    fn cond_exp(&self, values: &[f64], i: usize) -> Vec<f64>;
    /// Cell whose increment carries the noise of `cell`'s block (itself on plain grids).
    fn noise_cell(&self, cell: usize) -> usize {
        cell
    }
    /// Variance of δW on a noise cell.
    fn noise_variance(&self, cell: usize) -> f64 {
        self.grid().dt(cell)
    }
    /// True when `cond_exp` is exact rather than estimated.
    fn is_exact(&self) -> bool;
    /// Tolerance for a centering audit of a quantity with L² size `scale`.
    fn audit_tol(&self, scale: f64) -> f64 {
        if self.is_exact() {
            1e-10 * (1.0 + scale)
        } else {
            5.0 * scale / (self.n_samples() as f64).sqrt() + 1e-12
        }
    }
    /// Set once a regression had to fall back to a ridge-regularized solve.
    fn regression_warning(&self) -> bool {
        false
    }
}

/// A model viewed on `[t_a, t_b]` with local indices and a grid shifted to start at 0.
pub struct WindowModel<'a> {
    inner: &'a dyn ProbabilityModel,
    offset: usize,
    grid: TimeGrid,
}

impl<'a> WindowModel<'a> {
    pub fn new(inner: &'a dyn ProbabilityModel, a: usize, b: usize) -> Self {
        Self { inner, offset: a, grid: inner.grid().window(a, b) }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }
}

impl ProbabilityModel for WindowModel<'_> {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn dw(&self, sample: usize, cell: usize, comp: usize) -> f64 {
        self.inner.dw(sample, cell + self.offset, comp)
    }
    fn w(&self, sample: usize, i: usize, comp: usize) -> f64 {
        self.inner.w(sample, i + self.offset, comp)
    }
    fn cond_exp(&self, values: &[f64], i: usize) -> Vec<f64> {
        self.inner.cond_exp(values, i + self.offset)
    }
    fn noise_cell(&self, cell: usize) -> usize {
        self.inner.noise_cell(cell + self.offset) - self.offset
    }
    fn noise_variance(&self, cell: usize) -> f64 {
        self.inner.noise_variance(cell + self.offset)
    }
    fn is_exact(&self) -> bool {
        self.inner.is_exact()
    }
    fn audit_tol(&self, scale: f64) -> f64 {
        self.inner.audit_tol(scale)
    }
    fn regression_warning(&self) -> bool {
        self.inner.regression_warning()
    }
}

/// Recombining-free binomial tree with ±√Δ increments per branching step and
/// optional deterministic sub-steps inside each branching step.
///
/// Sample `s` is a leaf; its branching choices are the bits of `s`, first step
/// most significant, so leaves sharing a history form contiguous blocks.
#[derive(Clone, Debug)]
pub struct BinomialTree {
    steps: usize,
    d: usize,
    substeps: usize,
    sqrt_step: f64,
    step_len: f64,
    grid: TimeGrid,
}

impl BinomialTree {
    pub fn new(steps: usize, d: usize, horizon: f64) -> Result<Self> {
        Self::with_substeps(steps, d, horizon, 1)
    }

    /// `substeps` grid cells per branching step; the branching happens on the last one.
    pub fn with_substeps(steps: usize, d: usize, horizon: f64, substeps: usize) -> Result<Self> {
        if steps == 0 || d == 0 || substeps == 0 {
            return Err(Error::Precondition("tree needs steps, d, substeps ≥ 1".into()));
        }
        if d * steps > 20 {
            return Err(Error::Precondition(format!("tree too large: d·N = {} > 20", d * steps)));
        }
        let grid = TimeGrid::uniform(steps * substeps, horizon)?;
        let step_len = horizon / steps as f64;
        Ok(Self { steps, d, substeps, sqrt_step: step_len.sqrt(), step_len, grid })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Sign (±1) of branching step `k`, component `c`, on leaf `s`.
    #[inline]
    pub fn sign(&self, s: usize, k: usize, c: usize) -> f64 {
        let bit = (self.steps - 1 - k) * self.d + (self.d - 1 - c);
        if (s >> bit) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Branching steps completed by grid index `i`.
    #[inline]
    fn completed(&self, i: usize) -> usize {
        i / self.substeps
    }

    /// Number of leaves sharing the history up to grid index `i`.
    pub fn block_size(&self, i: usize) -> usize {
        1 << (self.d * (self.steps - self.completed(i)))
    }
}

impl ProbabilityModel for BinomialTree {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn n_samples(&self) -> usize {
        1 << (self.d * self.steps)
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn dw(&self, sample: usize, cell: usize, comp: usize) -> f64 {
        if cell % self.substeps == self.substeps - 1 {
            self.sqrt_step * self.sign(sample, cell / self.substeps, comp)
        } else {
            0.0
        }
    }

    fn w(&self, sample: usize, i: usize, comp: usize) -> f64 {
        let k = self.completed(i);
        self.sqrt_step * (0..k).map(|j| self.sign(sample, j, comp)).sum::<f64>()
    }

    fn cond_exp(&self, values: &[f64], i: usize) -> Vec<f64> {
        let b = self.block_size(i);
        let mut out = vec![0.0; values.len()];
        for (chunk, src) in out.chunks_mut(b).zip(values.chunks(b)) {
            let m = src.iter().sum::<f64>() / b as f64;
            chunk.fill(m);
        }
        out
    }

    fn noise_cell(&self, cell: usize) -> usize {
        (cell / self.substeps) * self.substeps + self.substeps - 1
    }

    fn noise_variance(&self, _cell: usize) -> f64 {
        self.step_len
    }

    fn is_exact(&self) -> bool {
        true
    }
}

/// Monte Carlo Brownian paths on a simulation grid.
#[derive(Debug)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    n_samples: usize,
    d: usize,
    seed: u64,
    /// W values, layout `[(i * n_samples + s) * d + c]`.
    w: Vec<f64>,
    degree: usize,
    warned: AtomicBool,
}

impl Clone for BrownianEnsemble {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            n_samples: self.n_samples,
            d: self.d,
            seed: self.seed,
            w: self.w.clone(),
            degree: self.degree,
            warned: AtomicBool::new(self.warned.load(Ordering::Relaxed)),
        }
    }
}

impl BrownianEnsemble {
    /// Sample `s` draws from ChaCha8 with stream `s`, so samples are independent
    /// of generation order.
    pub fn simulate(grid: TimeGrid, n_samples: usize, d: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 || d == 0 {
            return Err(Error::Precondition("ensemble needs n_samples, d ≥ 1".into()));
        }
        let n = grid.len();
        let paths: Vec<Vec<f64>> = par::map_indexed(n_samples, |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut path = vec![0.0; n * d];
            for j in 0..n - 1 {
                let sd = grid.dt(j).sqrt();
                for c in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    path[(j + 1) * d + c] = path[j * d + c] + sd * z;
                }
            }
            path
        });
        let mut w = vec![0.0; n * n_samples * d];
        for (s, path) in paths.iter().enumerate() {
            for i in 0..n {
                for c in 0..d {
                    w[(i * n_samples + s) * d + c] = path[i * d + c];
                }
            }
        }
        Ok(Self { grid, n_samples, d, seed, w, degree: 3, warned: AtomicBool::new(false) })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Polynomial degree of the regression basis (default 3).
    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = degree;
        self
    }

    /// Same sample paths observed on a subgrid of the simulation grid.
    pub fn restrict(&self, target: &TimeGrid) -> Result<Self> {
        let idx = self.grid.embed(target)?;
        let (n, d) = (self.n_samples, self.d);
        let mut w = Vec::with_capacity(idx.len() * n * d);
        for &i in &idx {
            w.extend_from_slice(&self.w[i * n * d..(i + 1) * n * d]);
        }
        Ok(Self { grid: target.clone(), n_samples: n, d, seed: self.seed, w, degree: self.degree, warned: AtomicBool::new(false) })
    }

    /// W at index `i` for every sample, component `c`.
    pub fn w_row(&self, i: usize, c: usize) -> Vec<f64> {
        (0..self.n_samples).map(|s| self.w(s, i, c)).collect()
    }

    /// Regression operator on the Brownian state.
    pub fn regression(&self) -> RegressionOperator {
        let states = (0..self.d).map(|c| Process::from_fn(self.grid.len(), self.n_samples, |i, s| self.w(s, i, c))).collect();
        RegressionOperator::new(states, self.degree)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["sample".to_string(), "t".to_string()];
        header.extend((1..=self.d).map(|c| format!("w_{c}")));
        wtr.write_record(&header)?;
        for s in 0..self.n_samples {
            for i in 0..self.grid.len() {
                let mut rec = vec![s.to_string(), fmt_f64(self.grid.t(i))];
                rec.extend((0..self.d).map(|c| fmt_f64(self.w(s, i, c))));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

impl ProbabilityModel for BrownianEnsemble {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn dw(&self, sample: usize, cell: usize, comp: usize) -> f64 {
        self.w(sample, cell + 1, comp) - self.w(sample, cell, comp)
    }

    #[inline]
    fn w(&self, sample: usize, i: usize, comp: usize) -> f64 {
        self.w[(i * self.n_samples + sample) * self.d + comp]
    }

    fn cond_exp(&self, values: &[f64], i: usize) -> Vec<f64> {
        let states: Vec<Vec<f64>> = (0..self.d).map(|c| self.w_row(i, c)).collect();
        let (fit, warned) = regress(values, &states, self.degree);
        if warned {
            self.warned.store(true, Ordering::Relaxed);
        }
        fit
    }

    fn is_exact(&self) -> bool {
        false
    }

    fn regression_warning(&self) -> bool {
        self.warned.load(Ordering::Relaxed)
    }
}

/// Least-squares conditional expectation on polynomial features of declared
/// state processes (Brownian value, forward diffusion, ...).
#[derive(Debug)]
pub struct RegressionOperator {
    states: Vec<Process>,
    degree: usize,
    warned: AtomicBool,
}

impl RegressionOperator {
    pub fn new(states: Vec<Process>, degree: usize) -> Self {
        Self { states, degree, warned: AtomicBool::new(false) }
    }

    pub fn cond_exp(&self, values: &[f64], i: usize) -> Vec<f64> {
        let states: Vec<Vec<f64>> = self.states.iter().map(|p| p.row(i).to_vec()).collect();
        let (fit, warned) = regress(values, &states, self.degree);
        if warned {
            self.warned.store(true, Ordering::Relaxed);
        }
        fit
    }

    pub fn warned(&self) -> bool {
        self.warned.load(Ordering::Relaxed)
    }
}

/// An ensemble whose conditional expectations regress on custom state processes.
pub struct StatefulEnsemble<'a> {
    pub ensemble: &'a BrownianEnsemble,
    pub operator: RegressionOperator,
}

impl ProbabilityModel for StatefulEnsemble<'_> {
    fn grid(&self) -> &TimeGrid {
        self.ensemble.grid()
    }
    fn n_samples(&self) -> usize {
        self.ensemble.n_samples()
    }
    fn dim(&self) -> usize {
        self.ensemble.dim()
    }
    fn dw(&self, sample: usize, cell: usize, comp: usize) -> f64 {
        self.ensemble.dw(sample, cell, comp)
    }
    fn w(&self, sample: usize, i: usize, comp: usize) -> f64 {
        self.ensemble.w(sample, i, comp)
    }
    fn cond_exp(&self, values: &[f64], i: usize) -> Vec<f64> {
        self.operator.cond_exp(values, i)
    }
    fn is_exact(&self) -> bool {
        false
    }
    fn regression_warning(&self) -> bool {
        self.operator.warned()
    }
}

/// Exponent tuples of all monomials in `k` variables with total degree ≤ `deg`.
fn monomials(k: usize, deg: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(k, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, deg, &mut Vec::new(), &mut out);
    out
}

/// L² projection of `y` onto polynomials of the standardized states.
/// Returns the fitted values and whether the ridge fallback was used.
pub fn regress(y: &[f64], states: &[Vec<f64>], degree: usize) -> (Vec<f64>, bool) {
    let n = y.len();
    let nf = n as f64;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for st in states {
        let m = st.iter().sum::<f64>() / nf;
        let sd = (st.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf).sqrt();
        if sd > 1e-12 * (1.0 + m.abs()) {
            cols.push(st.iter().map(|v| (v - m) / sd).collect());
        }
    }
    if cols.is_empty() {
        let m = y.iter().sum::<f64>() / nf;
        return (vec![m; n], false);
    }
    let exps = monomials(cols.len(), degree);
    let k = exps.len();
    let feature = |s: usize, e: &[usize]| -> f64 { e.iter().zip(&cols).map(|(&p, c)| c[s].powi(p as i32)).product() };
    let phi = DMatrix::from_fn(n, k, |s, j| feature(s, &exps[j]));
    let gram = phi.transpose() * &phi / nf;
    let rhs = phi.transpose() * DVector::from_column_slice(y) / nf;
    let (beta, warned) = match gram.clone().cholesky() {
        Some(ch) if ch.l().diagonal().iter().all(|d| *d > 1e-7) => (ch.solve(&rhs), false),
        _ => {
            let ridged = gram + DMatrix::identity(k, k) * 1e-10;
            match ridged.clone().cholesky() {
                Some(ch) => (ch.solve(&rhs), true),
                None => (ridged.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)), true),
            }
        }
    };
    ((phi * beta).iter().copied().collect(), warned)
}

/// Y = Y^M + Y^J with Y^M a discrete martingale started at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MartingalePart {
    pub mart: Process,
    pub residual: Process,
}

/// δY^M over cell i := δY − 𝔼_{t_i} δY, for the whole grid.
pub fn martingale_decomposition(y: &Process, model: &dyn ProbabilityModel) -> MartingalePart {
    martingale_decomposition_window(y, model, 0, y.n_times() - 1)
}

/// Decomposition on `[t_a, t_b]`; the result has `b − a + 1` rows with Y^M_a = 0.
pub fn martingale_decomposition_window(y: &Process, model: &dyn ProbabilityModel, a: usize, b: usize) -> MartingalePart {
    let n = y.n_samples();
    let len = b - a + 1;
    let incs: Vec<Vec<f64>> = par::map_indexed(len - 1, |k| {
        let i = a + k;
        let dy: Vec<f64> = y.row(i + 1).iter().zip(y.row(i)).map(|(u, v)| u - v).collect();
        let e = model.cond_exp(&dy, i);
        dy.iter().zip(&e).map(|(d, c)| d - c).collect()
    });
    let mut mart = Process::zeros(len, n);
    for k in 0..len - 1 {
        for s in 0..n {
            mart.set(k + 1, s, mart.at(k, s) + incs[k][s]);
        }
    }
    let residual = Process::from_fn(len, n, |k, s| y.at(a + k, s) - mart.at(k, s));
    MartingalePart { mart, residual }
}

/// Z with δM = Z·δW on each noise cell; cells without noise reuse their block's Z.
/// Errors if M fails the martingale audit.
pub fn martingale_representation(m: &Process, model: &dyn ProbabilityModel) -> Result<Vec<Process>> {
    martingale_representation_window(m, model, 0, m.n_times() - 1, None).map(|(z, _)| z)
}

/// Representation over cells of `[t_a, t_b]` (`m` indexed on the full grid).
/// Cells whose noise arrives after `t_b` copy their row from `tail` (full-grid Z)
/// when given. Returns Z with `b − a` rows and the measured centering defect.
pub fn martingale_representation_window(
    m: &Process,
    model: &dyn ProbabilityModel,
    a: usize,
    b: usize,
    tail: Option<&[Process]>,
) -> Result<(Vec<Process>, f64)> {
    let n = m.n_samples();
    let d = model.dim();
    let cells = b - a;
    let per_cell: Vec<(f64, f64, Vec<Vec<f64>>)> = par::map_indexed(cells, |k| {
        let i = a + k;
        let dm: Vec<f64> = m.row(i + 1).iter().zip(m.row(i)).map(|(u, v)| u - v).collect();
        let scale = lm_norm(&dm, 2.0);
        let drift = lm_norm(&model.cond_exp(&dm, i), 2.0);
        let z = if model.noise_cell(i) == i {
            let var = model.noise_variance(i);
            (0..d)
                .map(|c| {
                    let prod: Vec<f64> = (0..n).map(|s| dm[s] * model.dw(s, i, c)).collect();
                    model.cond_exp(&prod, i).into_iter().map(|v| v / var).collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        (drift, scale, z)
    });
    let scale = per_cell.iter().fold(0.0f64, |acc, c| acc.max(c.1));
    let defect = per_cell.iter().fold(0.0f64, |acc, c| acc.max(c.0));
    let tol = model.audit_tol(scale);
    if defect > tol {
        return Err(Error::NotMartingale { defect, tol });
    }
    let mut z = vec![Process::zeros(cells, n); d];
    for k in (0..cells).rev() {
        let i = a + k;
        let src = model.noise_cell(i);
        for c in 0..d {
            if src == i {
                z[c].set_row(k, &per_cell[k].2[c]);
            } else if src < b {
                let row = z[c].row(src - a).to_vec();
                z[c].set_row(k, &row);
            } else if let Some(tail) = tail {
                z[c].set_row(k, tail[c].row(src));
            } else {
                let row = representation_row(m, model, src, c);
                z[c].set_row(k, &row);
            }
        }
    }
    Ok((z, defect))
}

/// Z on a noise cell outside the window (used when a window ends inside a block).
fn representation_row(m: &Process, model: &dyn ProbabilityModel, cell: usize, c: usize) -> Vec<f64> {
    let n = m.n_samples();
    let prod: Vec<f64> = (0..n).map(|s| (m.at(cell + 1, s) - m.at(cell, s)) * model.dw(s, cell, c)).collect();
    let var = model.noise_variance(cell);
    model.cond_exp(&prod, cell).into_iter().map(|v| v / var).collect()
}

/// ∫ Z dW over cells `[a, b)` per sample.
pub fn stochastic_integral(z: &[Process], model: &dyn ProbabilityModel, a: usize) -> Process {
    let cells = z[0].n_times();
    let n = model.n_samples();
    let mut out = Process::zeros(cells + 1, n);
    for k in 0..cells {
        for s in 0..n {
            let inc: f64 = z.iter().enumerate().map(|(c, zc)| zc.at(k, s) * model.dw(s, a + k, c)).sum();
            out.set(k + 1, s, out.at(k, s) + inc);
        }
    }
    out
}

/// Pairwise empirical L^m norms `‖Y_j − Y_i‖_m` on the given grid indices.
pub fn pair_norms(y: &Process, idx: &[usize], m: f64) -> Vec<Vec<f64>> {
    par::map_indexed(idx.len(), |a| {
        let ya = y.row(idx[a]);
        idx.iter()
            .map(|&j| if j <= idx[a] { 0.0 } else { crate::process::lm_dist(y.row(j), ya, m) })
            .collect()
    })
}

/// ‖δY‖_{m,q-var} over `[t_a, t_b]` on at most `cap` breakpoints.
pub fn lm_qvar(y: &Process, a: usize, b: usize, m: f64, q: f64, cap: usize) -> f64 {
    let idx = capped_indices(a, b, cap);
    let pairs = pair_norms(y, &idx, m);
    let pos = |i: usize| idx.binary_search(&i).unwrap();
    p_variation_on(&idx, q, |i, j| pairs[pos(i)][pos(j)]).expect("q ≥ 1")
}

/// Measured constant of ‖δM‖_{m,m-var} ≤ C ‖δM_{0,T}‖_m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MartingaleVariationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

pub fn martingale_variation_check(m_proc: &Process, m: f64) -> MartingaleVariationCheck {
    let last = m_proc.n_times() - 1;
    let lhs = lm_qvar(m_proc, 0, last, m, m, DEFAULT_COARSE_CAP);
    let rhs = crate::process::lm_dist(m_proc.row(last), m_proc.row(0), m);
    MartingaleVariationCheck { lhs, rhs, ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 } }
}

/// Worst ratio of ‖∫F dr‖_{2,1-var;[s,t]} to ‖F‖₂·|t−s|^{1/2} over all grid windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftVariationCheck {
    pub max_ratio: f64,
    pub f_l2: f64,
}

pub fn drift_variation_check(f: &Process, grid: &TimeGrid) -> DriftVariationCheck {
    let n = f.n_samples();
    let len = grid.len();
    let mut y = Process::zeros(len, n);
    for i in 0..len - 1 {
        for s in 0..n {
            y.set(i + 1, s, y.at(i, s) + f.at(i, s) * grid.dt(i));
        }
    }
    let energy: f64 = (0..len - 1).map(|i| f.row(i).iter().map(|v| v * v).sum::<f64>() / n as f64 * grid.dt(i)).sum();
    let f_l2 = energy.sqrt();
    let idx = capped_indices(0, len - 1, DEFAULT_COARSE_CAP);
    let pairs = pair_norms(&y, &idx, 2.0);
    let mut max_ratio: f64 = 0.0;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let window = &idx[a..=b];
            let lhs = p_variation_on(window, 1.0, |i, j| {
                pairs[idx.binary_search(&i).unwrap()][idx.binary_search(&j).unwrap()]
            })
            .expect("q = 1");
            let rhs = f_l2 * (grid.t(idx[b]) - grid.t(idx[a])).sqrt();
            if rhs > 0.0 {
                max_ratio = max_ratio.max(lhs / rhs);
            }
        }
    }
    DriftVariationCheck { max_ratio, f_l2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(n: usize) -> BinomialTree {
        BinomialTree::new(n, 1, 1.0).unwrap()
    }

    fn w_process(model: &dyn ProbabilityModel) -> Process {
        Process::from_fn(model.grid().len(), model.n_samples(), |i, s| model.w(s, i, 0))
    }

    #[test]
    fn tree_increments_have_exact_moments() {
        let t = tree(6);
        for j in 0..6 {
            let inc: Vec<f64> = (0..t.n_samples()).map(|s| t.dw(s, j, 0)).collect();
            let m = inc.iter().sum::<f64>() / inc.len() as f64;
            let v = inc.iter().map(|x| x * x).sum::<f64>() / inc.len() as f64;
            assert!(m.abs() < 1e-15);
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tree_conditional_expectations() {
        let t = tree(8);
        let n = t.n_samples();
        let last = 8;
        let c = t.cond_exp(&vec![2.5; n], 3);
        assert!(c.iter().all(|&v| v == 2.5));
        let wt: Vec<f64> = (0..n).map(|s| t.w(s, last, 0)).collect();
        assert!(t.cond_exp(&wt, 0).iter().all(|v| v.abs() < 1e-15));
        let wt2: Vec<f64> = wt.iter().map(|w| w * w).collect();
        for i in 0..=last {
            let e = t.cond_exp(&wt2, i);
            for s in 0..n {
                let w = t.w(s, i, 0);
                assert!((e[s] - (w * w + (1.0 - t.grid().t(i)))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tower_property_on_tree() {
        let t = BinomialTree::new(6, 2, 1.0).unwrap();
        let n = t.n_samples();
        let xi: Vec<f64> = (0..n).map(|s| (t.w(s, 6, 0) * 1.3).sin() + t.w(s, 6, 1).powi(3)).collect();
        for s_i in 0..=6 {
            for t_i in s_i..=6 {
                let inner = t.cond_exp(&t.cond_exp(&xi, t_i), s_i);
                let direct = t.cond_exp(&xi, s_i);
                for k in 0..n {
                    assert!((inner[k] - direct[k]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn representation_of_w_and_w2() {
        let t = tree(7);
        let w = w_process(&t);
        let z = martingale_representation(&w, &t).unwrap();
        assert!(z[0].data().iter().all(|v| (v - 1.0).abs() < 1e-13));
        let m = Process::from_fn(8, t.n_samples(), |i, s| t.w(s, i, 0).powi(2) - t.grid().t(i));
        let z = martingale_representation(&m, &t).unwrap();
        for i in 0..7 {
            for s in 0..t.n_samples() {
                assert!((z[0].at(i, s) - 2.0 * t.w(s, i, 0)).abs() < 1e-12);
            }
        }
        let c = Process::constant(8, t.n_samples(), 4.0);
        assert!(martingale_representation(&c, &t).unwrap()[0].sup_abs() == 0.0);
    }

    #[test]
    fn representation_rejects_non_martingale() {
        let t = tree(5);
        let y = Process::from_fn(6, t.n_samples(), |i, s| t.w(s, i, 0).powi(2));
        assert!(matches!(martingale_representation(&y, &t), Err(Error::NotMartingale { .. })));
    }

    #[test]
    fn decomposition_examples() {
        let t = tree(6);
        let n = t.n_samples();
        let time = Process::deterministic(7, n, |i| t.grid().t(i));
        let dec = martingale_decomposition(&time, &t);
        assert!(dec.mart.sup_abs() < 1e-15);
        let w2 = Process::from_fn(7, n, |i, s| t.w(s, i, 0).powi(2));
        let dec = martingale_decomposition(&w2, &t);
        let dt = 1.0 / 6.0;
        for i in 0..6 {
            for s in 0..n {
                let (w, dw) = (t.w(s, i, 0), t.dw(s, i, 0));
                let dm = dec.mart.at(i + 1, s) - dec.mart.at(i, s);
                assert!((dm - (2.0 * w * dw + dw * dw - dt)).abs() < 1e-13);
                let dj = dec.residual.at(i + 1, s) - dec.residual.at(i, s);
                assert!((dj - dt).abs() < 1e-13);
            }
        }
        let again = martingale_decomposition(&dec.mart, &t);
        assert!(again.mart.sub(&dec.mart).sup_abs() < 1e-13);
        assert!(again.residual.sup_abs() < 1e-13);
        let wdec = martingale_decomposition(&w_process(&t), &t);
        assert!(wdec.residual.sup_abs() < 1e-15);
    }

    #[test]
    fn substep_tree_keeps_information_constant_inside_blocks() {
        let t = BinomialTree::with_substeps(4, 1, 1.0, 3).unwrap();
        assert_eq!(t.grid().n_cells(), 12);
        let n = t.n_samples();
        let xi: Vec<f64> = (0..n).map(|s| t.w(s, 12, 0).exp()).collect();
        for i in 0..12 {
            let here = t.cond_exp(&xi, i);
            let block_start = (i / 3) * 3;
            assert_eq!(here, t.cond_exp(&xi, block_start));
        }
        let m = Process::from_fn(13, n, |i, s| t.w(s, i, 0).powi(2) - 0.25 * (i / 3) as f64);
        let z = martingale_representation(&m, &t).unwrap();
        for i in 0..12 {
            for s in 0..n {
                assert!((z[0].at(i, s) - 2.0 * t.w(s, i, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_is_reproducible_and_order_free() {
        let g = TimeGrid::uniform(16, 1.0).unwrap();
        let a = BrownianEnsemble::simulate(g.clone(), 5, 2, 11).unwrap();
        let b = BrownianEnsemble::simulate(g.clone(), 9, 2, 11).unwrap();
        for s in 0..5 {
            for i in 0..17 {
                assert_eq!(a.w(s, i, 1), b.w(s, i, 1));
            }
        }
        let one = BrownianEnsemble::simulate(g.clone(), 1, 1, 3).unwrap();
        let again = BrownianEnsemble::simulate(g, 1, 1, 3).unwrap();
        assert_eq!(one.w, again.w);
    }

    #[test]
    fn ensemble_variance_and_quadratic_variation() {
        let g = TimeGrid::uniform(64, 1.0).unwrap();
        let e = BrownianEnsemble::simulate(g, 100_000, 1, 7).unwrap();
        let wt = e.w_row(64, 0);
        let var = wt.iter().map(|w| w * w).sum::<f64>() / wt.len() as f64;
        assert!((var - 1.0).abs() < 0.05);
        for j in [0, 17, 63] {
            let m = (0..e.n_samples()).map(|s| e.dw(s, j, 0)).sum::<f64>() / e.n_samples() as f64;
            assert!(m.abs() < 4.0 / (e.n_samples() as f64).sqrt() * (1.0f64 / 64.0).sqrt());
        }
        let qv: Vec<f64> = (0..1000).map(|s| (0..64).map(|j| e.dw(s, j, 0).powi(2)).sum::<f64>()).collect();
        let err = lm_norm(&qv.iter().map(|q| q - 1.0).collect::<Vec<_>>(), 2.0);
        assert!(err < 4.0 * (2.0f64 / 64.0).sqrt());
    }

    #[test]
    fn regression_recovers_polynomial_conditional_mean() {
        let g = TimeGrid::uniform(8, 1.0).unwrap();
        let e = BrownianEnsemble::simulate(g, 20_000, 1, 5).unwrap();
        let wt = e.w_row(8, 0);
        let y: Vec<f64> = wt.iter().map(|w| w * w).collect();
        let fit = e.cond_exp(&y, 4);
        let err: Vec<f64> = (0..e.n_samples()).map(|s| fit[s] - (e.w(s, 4, 0).powi(2) + 0.5)).collect();
        assert!(lm_norm(&err, 2.0) < 0.05);
        let at0 = e.cond_exp(&y, 0);
        assert!(at0.iter().all(|v| (v - at0[0]).abs() < 1e-12));
    }

    #[test]
    fn regression_flags_collinear_features() {
        let x: Vec<f64> = (0..50).map(|k| k as f64).collect();
        let states = vec![x.clone(), x.iter().map(|v| 2.0 * v + 1.0).collect()];
        let (fit, warned) = regress(&x, &states, 2);
        assert!(warned);
        assert!(fit.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn martingale_variation_constant_is_finite() {
        let t = tree(8);
        let w = w_process(&t);
        let c = martingale_variation_check(&w, 2.0);
        assert!(c.ratio >= 1.0 - 1e-12 && c.ratio.is_finite());
    }

    #[test]
    fn drift_variation_bound_holds() {
        let t = tree(6);
        let one = Process::constant(7, t.n_samples(), 1.0);
        let c = drift_variation_check(&one, t.grid());
        assert!(c.max_ratio <= 1.0 + 1e-12);
        let f = Process::from_fn(7, t.n_samples(), |i, s| t.w(s, i, 0).sin() * (i as f64));
        assert!(drift_variation_check(&f, t.grid()).max_ratio <= 1.0 + 1e-12);
    }
}
