//! Stochastic controlled rough paths (scalar), their K-weighted norms, the
//! Leibniz rule and lifts of drift integrals.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::{drift_variation_check, martingale_decomposition_window, DriftVariationCheck, ProbabilityModel};
use crate::par;
use crate::process::{lm_norm, Process};
use crate::rough_path::{capped_indices, p_variation_on, RoughPath, TimeGrid, DEFAULT_COARSE_CAP};

/// One rough path shared by all samples, or one per sample (e.g. Itô lifts).
#[derive(Clone, Debug)]
pub struct Drive(Arc<Vec<RoughPath>>);

impl Drive {
    pub fn single(rp: RoughPath) -> Self {
        Self(Arc::new(vec![rp]))
    }

    pub fn per_sample(rps: Vec<RoughPath>) -> Result<Self> {
        let first = rps.first().ok_or_else(|| Error::Precondition("empty drive".into()))?;
        if rps.iter().any(|r| r.grid() != first.grid()) {
            return Err(Error::GridMismatch("per-sample rough paths on different grids".into()));
        }
        Ok(Self(Arc::new(rps)))
    }

    #[inline]
    pub fn for_sample(&self, s: usize) -> &RoughPath {
        if self.0.len() == 1 {
            &self.0[0]
        } else {
            &self.0[s]
        }
    }

    pub fn paths(&self) -> &[RoughPath] {
        &self.0
    }

    pub fn is_single(&self) -> bool {
        self.0.len() == 1
    }

    pub fn grid(&self) -> &TimeGrid {
        self.0[0].grid()
    }

    pub fn p(&self) -> f64 {
        self.0[0].p()
    }

    /// The drive restricted to `[t_a, t_b]` on the shifted grid.
    pub fn window(&self, a: usize, b: usize) -> Self {
        Self(Arc::new(self.0.iter().map(|r| r.window(a, b)).collect()))
    }

    /// |𝐗|_{p-var;[a,b]}, the largest over the (at most `cap`) first paths.
    pub fn pvar_total(&self, a: usize, b: usize, cap: usize) -> f64 {
        let k = self.0.len().min(cap.max(1));
        par::map_indexed(k, |s| self.0[s].metrics_window(a, b).total).into_iter().fold(0.0, f64::max)
    }

    /// (|δX|_{p-var}, |𝕏|_{p/2-var}) on `[a, b]`, largest over the first `cap` paths.
    pub fn pvar_levels(&self, a: usize, b: usize, cap: usize) -> (f64, f64) {
        let k = self.0.len().min(cap.max(1));
        par::map_indexed(k, |s| {
            let m = self.0[s].metrics_window(a, b);
            (m.p_var_level1, m.p2_var_level2)
        })
        .into_iter()
        .fold((0.0, 0.0), |(x, y), (u, v)| (f64::max(x, u), f64::max(y, v)))
    }
}

/// Scalar (Y, Y′) per sample on the drive's grid.
#[derive(Clone, Debug)]
pub struct StochasticControlledPath {
    pub y: Process,
    pub yp: Process,
    pub drive: Drive,
    pub q: f64,
    pub qp: f64,
    pub m: f64,
}

impl StochasticControlledPath {
    pub fn new(y: Process, yp: Process, drive: Drive, q: f64, qp: f64, m: f64) -> Result<Self> {
        let n = drive.grid().len();
        if y.n_times() != n || yp.n_times() != n {
            return Err(Error::GridMismatch(format!("controlled path needs {n} rows")));
        }
        if y.n_samples() != yp.n_samples() {
            return Err(Error::GridMismatch("Y and Y′ differ in sample count".into()));
        }
        if !drive.is_single() && drive.paths().len() != y.n_samples() {
            return Err(Error::GridMismatch("one rough path per sample expected".into()));
        }
        Ok(Self { y, yp, drive, q, qp, m })
    }

    /// Exponents q = q′ = p and m = 2.
    pub fn with_defaults(y: Process, yp: Process, drive: Drive) -> Result<Self> {
        let p = drive.p();
        Self::new(y, yp, drive, p, p, 2.0)
    }

    pub fn n_samples(&self) -> usize {
        self.y.n_samples()
    }

    pub fn len(&self) -> usize {
        self.y.n_times()
    }

    pub fn is_empty(&self) -> bool {
        self.y.n_times() == 0
    }

    /// R^Y_{s,t} = δY_{s,t} − Y′_s δX_{s,t} per sample.
    pub fn remainder(&self, s: usize, t: usize) -> Vec<f64> {
        (0..self.n_samples())
            .map(|k| {
                let x = self.drive.for_sample(k);
                self.y.at(t, k) - self.y.at(s, k) - self.yp.at(s, k) * (x.x(t) - x.x(s))
            })
            .collect()
    }

    /// ‖R^Y‖_{m, qq′/(q+q′)-var} on `[a, b]` (the pathwise remainder report).
    pub fn remainder_var(&self, a: usize, b: usize) -> f64 {
        let r = remainder_exponent(self.q, self.qp);
        two_param_var(&capped_indices(a, b, DEFAULT_COARSE_CAP), self.n_samples(), self.m, r, |k, i, j| {
            let x = self.drive.for_sample(k);
            self.y.at(j, k) - self.y.at(i, k) - self.yp.at(i, k) * (x.x(j) - x.x(i))
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { y: self.y.scale(c), yp: self.yp.scale(c), ..self.clone() }
    }

    /// αY + βZ on the same drive.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        let y = self.y.zip_with(&other.y, |a, b| alpha * a + beta * b);
        let yp = self.yp.zip_with(&other.yp, |a, b| alpha * a + beta * b);
        Self { y, yp, ..self.clone() }
    }
}

pub fn remainder_exponent(q: f64, qp: f64) -> f64 {
    q * qp / (q + qp)
}

/// Exponent constraints for the K-weighted norm.
pub fn check_exponents(q: f64, qp: f64, p: f64) -> Result<()> {
    if q < p || qp < p {
        return Err(Error::Precondition(format!("need q, q′ ≥ p = {p}, got q = {q}, q′ = {qp}")));
    }
    if 1.0 / q + 1.0 / qp <= 0.5 {
        return Err(Error::Precondition(format!("need 1/q + 1/q′ > 1/2, got q = {q}, q′ = {qp}")));
    }
    Ok(())
}

/// r-variation over `idx` of the empirical L^m norms of the two-parameter
/// quantity `value(sample, i, j)`.
pub fn two_param_var<F>(idx: &[usize], n_samples: usize, m: f64, r: f64, value: F) -> f64
where
    F: Fn(usize, usize, usize) -> f64 + Sync + Send,
{
    let n = idx.len();
    let rows: Vec<Vec<f64>> = par::map_indexed(n, |a| {
        (0..n)
            .map(|b| {
                if b <= a {
                    0.0
                } else {
                    let v: Vec<f64> = (0..n_samples).map(|k| value(k, idx[a], idx[b])).collect();
                    lm_norm(&v, m)
                }
            })
            .collect()
    });
    let pos = |i: usize| idx.binary_search(&i).expect("index in window");
    p_variation_on(idx, r, |i, j| rows[pos(i)][pos(j)]).expect("exponent ≥ 1")
}

/// Components of ‖(Y, Y′)‖^{(K)} on a window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlledNormReport {
    pub k: f64,
    pub mart_qvar: f64,
    pub yp_qpvar: f64,
    pub rem_j_var: f64,
    pub terminal: f64,
    pub total: f64,
}

/// ‖(Y,Y′)‖^{(K)} on `[t_a, t_b]` with Y = Y^M + Y^J split under `model`.
pub fn controlled_norm(
    scp: &StochasticControlledPath,
    k: f64,
    window: (usize, usize),
    model: &dyn ProbabilityModel,
) -> Result<ControlledNormReport> {
    controlled_distance(scp, None, k, window, model)
}

/// ‖(Y,Y′) − (Ȳ,Ȳ′)‖^{(K)} where each remainder uses its own rough path.
pub fn controlled_distance(
    a: &StochasticControlledPath,
    b: Option<&StochasticControlledPath>,
    k: f64,
    window: (usize, usize),
    model: &dyn ProbabilityModel,
) -> Result<ControlledNormReport> {
    if !(k >= 1.0) {
        return Err(Error::Precondition(format!("K must be ≥ 1, got {k}")));
    }
    check_exponents(a.q, a.qp, a.drive.p())?;
    if model.grid() != a.drive.grid() {
        return Err(Error::GridMismatch("model and rough path grids differ".into()));
    }
    if let Some(b) = b {
        if b.y.n_samples() != a.y.n_samples() || b.len() != a.len() {
            return Err(Error::GridMismatch("controlled paths differ in shape".into()));
        }
    }
    let (lo, hi) = window;
    let m = a.m;
    let n = a.n_samples();
    let zeros;
    let b_y = match b {
        Some(b) => &b.y,
        None => {
            zeros = Process::zeros(a.len(), n);
            &zeros
        }
    };
    let diff = a.y.sub(b_y);
    let yp_diff = match b {
        Some(b) => a.yp.sub(&b.yp),
        None => a.yp.clone(),
    };
    let dec_a = martingale_decomposition_window(&a.y, model, lo, hi);
    let dec_b = b.map(|b| martingale_decomposition_window(&b.y, model, lo, hi));
    let mart = match &dec_b {
        Some(d) => dec_a.mart.sub(&d.mart),
        None => dec_a.mart.clone(),
    };
    let idx = capped_indices(lo, hi, DEFAULT_COARSE_CAP);
    let rel: Vec<usize> = idx.iter().map(|i| i - lo).collect();
    let mart_qvar = two_param_var(&rel, n, m, a.q, |s, i, j| mart.at(j, s) - mart.at(i, s));
    let yp_qpvar = two_param_var(&idx, n, m, a.qp, |s, i, j| yp_diff.at(j, s) - yp_diff.at(i, s));
    let r = remainder_exponent(a.q, a.qp);
    let rem_j_var = two_param_var(&idx, n, m, r, |s, i, j| {
        let xa = a.drive.for_sample(s);
        let ra = dec_a.residual.at(j - lo, s) - dec_a.residual.at(i - lo, s) - a.yp.at(i, s) * (xa.x(j) - xa.x(i));
        let rb = match (b, &dec_b) {
            (Some(b), Some(d)) => {
                let xb = b.drive.for_sample(s);
                d.residual.at(j - lo, s) - d.residual.at(i - lo, s) - b.yp.at(i, s) * (xb.x(j) - xb.x(i))
            }
            _ => 0.0,
        };
        ra - rb
    });
    let terminal = lm_norm(diff.row(hi), m) + lm_norm(yp_diff.row(hi), m);
    let total = terminal + k * mart_qvar + yp_qpvar + k * rem_j_var;
    Ok(ControlledNormReport { k, mart_qvar, yp_qpvar, rem_j_var, terminal, total })
}

/// (G, G′) essentially bounded, either deterministic (one sample) or per sample.
#[derive(Clone, Debug)]
pub struct EssBoundedControlledPath {
    pub g: Process,
    pub gp: Process,
}

impl EssBoundedControlledPath {
    pub fn new(g: Process, gp: Process) -> Result<Self> {
        if g.n_times() != gp.n_times() || g.n_samples() != gp.n_samples() {
            return Err(Error::GridMismatch("G and G′ differ in shape".into()));
        }
        Ok(Self { g, gp })
    }

    pub fn constant(value: f64, n_times: usize) -> Self {
        Self { g: Process::constant(n_times, 1, value), gp: Process::zeros(n_times, 1) }
    }

    /// Deterministic (G, G′) from time-index functions.
    pub fn deterministic(n_times: usize, g: impl Fn(usize) -> f64, gp: impl Fn(usize) -> f64) -> Self {
        Self { g: Process::deterministic(n_times, 1, g), gp: Process::deterministic(n_times, 1, gp) }
    }

    #[inline]
    pub fn g(&self, i: usize, s: usize) -> f64 {
        self.g.at(i, if self.g.n_samples() == 1 { 0 } else { s })
    }

    #[inline]
    pub fn gp(&self, i: usize, s: usize) -> f64 {
        self.gp.at(i, if self.gp.n_samples() == 1 { 0 } else { s })
    }

    pub fn n_times(&self) -> usize {
        self.g.n_times()
    }

    /// ‖(G,G′)‖ = ‖G_T‖∞ + ‖G′_T‖∞ + ‖δG′‖_{∞,p-var} + ‖R^G‖_{∞,p/2-var}.
    pub fn norm(&self, drive: &Drive) -> f64 {
        let last = self.n_times() - 1;
        self.norm_window(drive, 0, last)
    }

    pub fn norm_window(&self, drive: &Drive, a: usize, b: usize) -> f64 {
        let p = drive.p();
        let n = self.g.n_samples().max(if drive.is_single() { 1 } else { drive.paths().len() });
        let idx = capped_indices(a, b, DEFAULT_COARSE_CAP);
        let sup = |f: &dyn Fn(usize) -> f64| (0..n).map(f).fold(0.0, |acc: f64, v| acc.max(v.abs()));
        let terminal = sup(&|s| self.g(b, s)) + sup(&|s| self.gp(b, s));
        let gp_var = two_param_var(&idx, n, f64::INFINITY, p, |s, i, j| self.gp(j, s) - self.gp(i, s));
        let rem_var = two_param_var(&idx, n, f64::INFINITY, p / 2.0, |s, i, j| {
            let x = drive.for_sample(s);
            self.g(j, s) - self.g(i, s) - self.gp(i, s) * (x.x(j) - x.x(i))
        });
        terminal + gp_var + rem_var
    }
}

/// Output of the Leibniz rule with the audited bound.
#[derive(Clone, Debug)]
pub struct LeibnizReport {
    pub product: StochasticControlledPath,
    /// Σ_{i<j} G_{t_i} δY^M over cells, rows on the full grid.
    pub mart: Process,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// (GY, GY′ + G′Y), the discrete integral ∫G dY^M, and the measured constant
/// in ‖(GY, ·)‖^{(K)} ≤ C‖(G,G′)‖(K‖Y_T‖₂ + ‖(Y,Y′)‖^{(K)}(1 + K|𝐗|)²).
pub fn leibniz_product(
    gg: &EssBoundedControlledPath,
    scp: &StochasticControlledPath,
    k: f64,
    model: &dyn ProbabilityModel,
) -> Result<LeibnizReport> {
    if gg.n_times() != scp.len() {
        return Err(Error::GridMismatch("G and Y live on different grids".into()));
    }
    if scp.qp < scp.q {
        return Err(Error::Precondition("Leibniz rule needs q′ ≥ q".into()));
    }
    let n = scp.n_samples();
    let len = scp.len();
    let y = Process::from_fn(len, n, |i, s| gg.g(i, s) * scp.y.at(i, s));
    let yp = Process::from_fn(len, n, |i, s| gg.g(i, s) * scp.yp.at(i, s) + gg.gp(i, s) * scp.y.at(i, s));
    let product = StochasticControlledPath { y, yp, ..scp.clone() };
    let dec = martingale_decomposition_window(&scp.y, model, 0, len - 1);
    let mut mart = Process::zeros(len, n);
    for i in 0..len - 1 {
        for s in 0..n {
            let inc = gg.g(i, s) * (dec.mart.at(i + 1, s) - dec.mart.at(i, s));
            mart.set(i + 1, s, mart.at(i, s) + inc);
        }
    }
    let window = (0, len - 1);
    let lhs = controlled_norm(&product, k, window, model)?.total;
    let base = controlled_norm(scp, k, window, model)?.total;
    let xnorm = scp.drive.pvar_total(0, len - 1, DEFAULT_COARSE_CAP);
    let rhs = gg.norm(&scp.drive) * (k * lm_norm(scp.y.last_row(), 2.0) + base * (1.0 + k * xnorm).powi(2));
    let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
    Ok(LeibnizReport { product, mart, lhs, rhs, ratio })
}

/// (∫₀^· F dr, 0) as a controlled path, with the 1-variation audit.
pub fn lift_drift_integral(f: &Process, drive: &Drive) -> Result<(StochasticControlledPath, DriftVariationCheck)> {
    let grid = drive.grid();
    if f.n_times() != grid.len() {
        return Err(Error::GridMismatch(format!("F needs {} rows", grid.len())));
    }
    let n = f.n_samples();
    let mut y = Process::zeros(grid.len(), n);
    for i in 0..grid.n_cells() {
        for s in 0..n {
            y.set(i + 1, s, y.at(i, s) + f.at(i, s) * grid.dt(i));
        }
    }
    let check = drift_variation_check(f, grid);
    let scp = StochasticControlledPath::with_defaults(y, Process::zeros(grid.len(), n), drive.clone())?;
    Ok((scp, check))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{martingale_decomposition, BinomialTree};
    use crate::process::lm_dist;
    use crate::rough_path::SampledPath;
    use proptest::prelude::*;

    fn sine_drive(grid: &TimeGrid, amp: f64) -> Drive {
        let path = SampledPath::from_fn(grid.clone(), 1, |t| vec![amp * (6.0 * t).sin()]).unwrap();
        Drive::single(RoughPath::canonical_lift(&path, 2.5).unwrap())
    }

    fn w_path(tree: &BinomialTree) -> Process {
        Process::from_fn(tree.grid().len(), tree.n_samples(), |i, s| tree.w(s, i, 0))
    }

    /// Brute force over all partitions of `0..=n` of (Σ ‖δ‖_m^q)^{1/q}.
    fn brute_qvar(rows: &[Vec<f64>], m: f64, q: f64) -> f64 {
        let n = rows.len() - 1;
        let mut best: f64 = 0.0;
        for mask in 0..(1usize << (n - 1)) {
            let mut pts = vec![0];
            pts.extend((1..n).filter(|i| (mask >> (i - 1)) & 1 == 1));
            pts.push(n);
            let s: f64 = pts.windows(2).map(|w| lm_dist(&rows[w[1]], &rows[w[0]], m).powf(q)).sum();
            best = best.max(s);
        }
        best.powf(1.0 / q)
    }

    #[test]
    fn zero_path_has_zero_norm() {
        let tree = BinomialTree::new(4, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 1.0);
        let z = Process::zeros(5, tree.n_samples());
        let scp = StochasticControlledPath::with_defaults(z.clone(), z, drive).unwrap();
        let rep = controlled_norm(&scp, 3.0, (0, 4), &tree).unwrap();
        assert_eq!(rep.total, 0.0);
    }

    #[test]
    fn tautological_path_norm() {
        let tree = BinomialTree::new(5, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 0.8);
        let rp = drive.for_sample(0).clone();
        let n = tree.n_samples();
        let y = Process::deterministic(6, n, |i| rp.x(i));
        let scp = StochasticControlledPath::with_defaults(y, Process::constant(6, n, 1.0), drive).unwrap();
        let rep = controlled_norm(&scp, 4.0, (0, 5), &tree).unwrap();
        assert!(rep.mart_qvar < 1e-14 && rep.rem_j_var < 1e-14 && rep.yp_qpvar == 0.0);
        assert!((rep.total - (rp.x(5).abs() + 1.0)).abs() < 1e-13);
        assert!(scp.remainder_var(0, 5) < 1e-14);
    }

    #[test]
    fn brownian_mart_qvar_matches_enumeration() {
        let tree = BinomialTree::new(8, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 1.0);
        let w = w_path(&tree);
        let scp = StochasticControlledPath::new(w.clone(), Process::zeros(9, tree.n_samples()), drive, 2.5, 2.5, 2.0).unwrap();
        let rep = controlled_norm(&scp, 1.0, (0, 8), &tree).unwrap();
        let rows: Vec<Vec<f64>> = (0..=8).map(|i| w.row(i).to_vec()).collect();
        assert!((rep.mart_qvar - brute_qvar(&rows, 2.0, 2.5)).abs() < 1e-13);
    }

    #[test]
    fn exponent_constraints_are_checked() {
        let tree = BinomialTree::new(3, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 1.0);
        let z = Process::zeros(4, tree.n_samples());
        let bad = StochasticControlledPath::new(z.clone(), z.clone(), drive.clone(), 2.0, 2.5, 2.0).unwrap();
        assert!(controlled_norm(&bad, 1.0, (0, 3), &tree).is_err());
        let bad = StochasticControlledPath::new(z.clone(), z.clone(), drive.clone(), 2.6, 5.0, 2.0).unwrap();
        assert!(controlled_norm(&bad, 1.0, (0, 3), &tree).is_ok());
        let bad = StochasticControlledPath::new(z.clone(), z, drive, 2.6, 8.0, 2.0).unwrap();
        assert!(controlled_norm(&bad, 0.5, (0, 3), &tree).is_err());
    }

    #[test]
    fn leibniz_identity_and_zero() {
        let tree = BinomialTree::new(5, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 1.0);
        let w = w_path(&tree);
        let yp = w.map(|v| v * v);
        let scp = StochasticControlledPath::with_defaults(w.clone(), yp.clone(), drive).unwrap();
        let id = leibniz_product(&EssBoundedControlledPath::constant(1.0, 6), &scp, 2.0, &tree).unwrap();
        assert_eq!(id.product.y, w);
        assert_eq!(id.product.yp, yp);
        let zero = leibniz_product(&EssBoundedControlledPath::constant(0.0, 6), &scp, 2.0, &tree).unwrap();
        assert_eq!(zero.product.y.sup_abs(), 0.0);
        assert_eq!(zero.product.yp.sup_abs(), 0.0);
    }

    #[test]
    fn constant_g_scales_martingale_part() {
        let tree = BinomialTree::new(6, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 0.5);
        let y = Process::from_fn(7, tree.n_samples(), |i, s| tree.w(s, i, 0).powi(3) + i as f64 * 0.1);
        let scp = StochasticControlledPath::with_defaults(y.clone(), y.map(f64::cos), drive).unwrap();
        let g = -0.7;
        let rep = leibniz_product(&EssBoundedControlledPath::constant(g, 7), &scp, 2.0, &tree).unwrap();
        let ym = martingale_decomposition(&y, &tree).mart;
        let gym = martingale_decomposition(&rep.product.y, &tree).mart;
        for i in 0..7 {
            for s in 0..tree.n_samples() {
                assert!((rep.mart.at(i, s) - g * ym.at(i, s)).abs() < 1e-12);
                assert!((gym.at(i, s) - g * ym.at(i, s)).abs() < 1e-12);
            }
        }
        assert!(rep.ratio.is_finite() && rep.ratio > 0.0);
    }

    #[test]
    fn leibniz_martingale_part_only_sees_y_martingale() {
        let tree = BinomialTree::new(5, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 0.5);
        let y = Process::from_fn(6, tree.n_samples(), |i, s| (tree.w(s, i, 0) + 0.2 * i as f64).exp());
        let ym = martingale_decomposition(&y, &tree).mart;
        let gg = EssBoundedControlledPath::deterministic(6, |i| 1.0 + 0.1 * i as f64, |i| (i as f64).sin());
        let full = StochasticControlledPath::with_defaults(y.clone(), y.clone(), drive.clone()).unwrap();
        let mart_only = StochasticControlledPath::with_defaults(ym, Process::zeros(6, tree.n_samples()), drive).unwrap();
        let a = leibniz_product(&gg, &full, 1.0, &tree).unwrap();
        let b = leibniz_product(&gg, &mart_only, 1.0, &tree).unwrap();
        for i in 0..6 {
            for s in 0..tree.n_samples() {
                assert!((a.mart.at(i, s) - b.mart.at(i, s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn drift_lift_examples() {
        let g = TimeGrid::uniform(16, 1.0).unwrap();
        let drive = sine_drive(&g, 1.0);
        let (scp, check) = lift_drift_integral(&Process::zeros(17, 3), &drive).unwrap();
        assert_eq!(scp.y.sup_abs(), 0.0);
        assert_eq!(check.max_ratio, 0.0);
        let (scp, check) = lift_drift_integral(&Process::constant(17, 2, 1.0), &drive).unwrap();
        for i in 0..17 {
            assert!((scp.y.at(i, 1) - g.t(i)).abs() < 1e-14);
        }
        assert!(check.max_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn drift_lift_on_tree_obeys_bound() {
        let tree = BinomialTree::new(8, 1, 1.0).unwrap();
        let drive = sine_drive(tree.grid(), 1.0);
        let f = Process::from_fn(9, tree.n_samples(), |i, s| (3.0 * tree.w(s, i, 0)).sin() * (1.0 + i as f64));
        let (_, check) = lift_drift_integral(&f, &drive).unwrap();
        assert!(check.max_ratio <= 1.0 + 1e-12, "{}", check.max_ratio);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn norms_are_equivalent_across_k(seed in 0u64..1000, k in 1.0f64..20.0) {
            let tree = BinomialTree::new(6, 1, 1.0).unwrap();
            let drive = sine_drive(tree.grid(), 1.0 + (seed % 7) as f64 / 7.0);
            let a = (seed % 13) as f64 / 5.0 - 1.0;
            let y = Process::from_fn(7, tree.n_samples(), |i, s| (a * tree.w(s, i, 0)).sin() + 0.3 * i as f64);
            let yp = Process::from_fn(7, tree.n_samples(), |i, s| tree.w(s, i, 0) * a);
            let scp = StochasticControlledPath::with_defaults(y, yp, drive).unwrap();
            let one = controlled_norm(&scp, 1.0, (0, 6), &tree).unwrap();
            let kk = controlled_norm(&scp, k, (0, 6), &tree).unwrap();
            prop_assert!(one.total <= kk.total * (1.0 + 1e-12));
            prop_assert!(kk.total <= k * one.total * (1.0 + 1e-12));
            prop_assert!((kk.total - (kk.terminal + k * kk.mart_qvar + kk.yp_qpvar + k * kk.rem_j_var)).abs() < 1e-12);
        }

        #[test]
        fn sup_bounded_by_terminal_plus_variation(seed in 0u64..1000) {
            let tree = BinomialTree::new(7, 1, 1.0).unwrap();
            let c = (seed % 11) as f64 / 3.0;
            let y = Process::from_fn(8, tree.n_samples(), |i, s| (c * tree.w(s, i, 0)).cos() - 0.1 * c * i as f64);
            let sup = (0..8).map(|i| lm_norm(y.row(i), 2.0)).fold(0.0, f64::max);
            let var = crate::models::lm_qvar(&y, 0, 7, 2.0, 2.5, 64);
            prop_assert!(sup <= lm_norm(y.row(7), 2.0) + var + 1e-12);
        }

        #[test]
        fn leibniz_is_linear(alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let tree = BinomialTree::new(5, 1, 1.0).unwrap();
            let drive = sine_drive(tree.grid(), 1.0);
            let n = tree.n_samples();
            let y1 = Process::from_fn(6, n, |i, s| tree.w(s, i, 0) + i as f64);
            let y2 = Process::from_fn(6, n, |i, s| tree.w(s, i, 0).powi(2));
            let a = StochasticControlledPath::with_defaults(y1.clone(), y2.clone(), drive.clone()).unwrap();
            let b = StochasticControlledPath::with_defaults(y2, y1, drive).unwrap();
            let g1 = EssBoundedControlledPath::deterministic(6, |i| (i as f64).cos(), |i| 0.3 * i as f64);
            let g2 = EssBoundedControlledPath::deterministic(6, |i| 0.5 + i as f64, |_| -1.0);
            let mix = a.combine(alpha, &b, beta);
            let lhs = leibniz_product(&g1, &mix, 1.0, &tree).unwrap().product;
            let pa = leibniz_product(&g1, &a, 1.0, &tree).unwrap().product;
            let pb = leibniz_product(&g1, &b, 1.0, &tree).unwrap().product;
            let rhs = pa.combine(alpha, &pb, beta);
            prop_assert!(lhs.y.sub(&rhs.y).sup_abs() < 1e-12);
            prop_assert!(lhs.yp.sub(&rhs.yp).sup_abs() < 1e-12);
            let gmix = EssBoundedControlledPath::new(
                g1.g.zip_with(&g2.g, |u, v| alpha * u + beta * v),
                g1.gp.zip_with(&g2.gp, |u, v| alpha * u + beta * v),
            ).unwrap();
            let lhs = leibniz_product(&gmix, &a, 1.0, &tree).unwrap().product;
            let pb = leibniz_product(&g2, &a, 1.0, &tree).unwrap().product;
            let rhs = pa.combine(alpha, &pb, beta);
            prop_assert!(lhs.y.sub(&rhs.y).sup_abs() < 1e-12);
            prop_assert!(lhs.yp.sub(&rhs.yp).sup_abs() < 1e-12);
        }
    }
}
