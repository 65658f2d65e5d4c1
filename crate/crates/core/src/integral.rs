//! Rough stochastic integral of a scalar controlled path, sewn as a
//! martingale-part germ (in L^m) plus a remainder-part germ (pathwise).

use std::io::Write;

use crate::controlled::{
    controlled_distance, remainder_exponent, two_param_var, ControlledNormReport, Drive, StochasticControlledPath,
};
use crate::error::{Error, Result};
use crate::models::{martingale_decomposition_window, ProbabilityModel};
use crate::process::{lm_norm, Process};
use crate::rough_path::{capped_indices, fmt_f64, rough_distance, TimeGrid, DEFAULT_COARSE_CAP};
use crate::sewing::{scalar_germ, sew_deterministic_at, sew_stochastic_at, SewingOptions, SewingReport};

#[derive(Clone, Debug, PartialEq)]
pub struct IntegralOptions {
    pub sewing: SewingOptions,
    /// Reporting grid; the model grid when `None`.
    pub target: Option<TimeGrid>,
    /// Number of windows in the local-error audit (0 turns it off).
    pub audit_windows: usize,
    /// Sew the martingale germ with the centering audit.
    pub centering: bool,
}

impl Default for IntegralOptions {
    fn default() -> Self {
        Self { sewing: SewingOptions::default(), target: None, audit_windows: 32, centering: true }
    }
}

impl IntegralOptions {
    /// No audits and no reporting grid: the cheapest call, used inside solvers.
    pub fn quiet() -> Self {
        Self { audit_windows: 0, centering: false, ..Self::default() }
    }
}

/// One window of the local estimate ‖∫ₛᵗ Y d𝐗 − Y_s δX − Y′_s 𝕏‖_m ≤ C · (...).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalAuditRow {
    pub a: usize,
    pub b: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct RoughStochasticIntegral {
    /// ∫_{t_a}^t Y d𝐗 at the reporting points, rows starting at 0.
    pub values: Process,
    /// Reporting points as model-grid indices.
    pub target: Vec<usize>,
    pub mart_report: SewingReport,
    pub jump_report: SewingReport,
    pub audit: Vec<LocalAuditRow>,
    /// Largest audited ratio.
    pub c_measured: f64,
}

impl RoughStochasticIntegral {
    pub fn terminal(&self) -> &[f64] {
        self.values.last_row()
    }

    pub fn converged(&self) -> bool {
        self.mart_report.converged && self.jump_report.converged
    }

    /// (∫₀^· Y d𝐗, Y) as a controlled path; needs the full model grid as target.
    pub fn as_controlled(&self, scp: &StochasticControlledPath) -> Result<StochasticControlledPath> {
        if self.values.n_times() != scp.len() {
            return Err(Error::GridMismatch("integral was not reported on the full grid".into()));
        }
        StochasticControlledPath::new(self.values.clone(), scp.y.clone(), scp.drive.clone(), scp.q, scp.qp, scp.m)
    }

    pub fn write_audit_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["window", "lhs", "rhs", "ratio"])?;
        for r in &self.audit {
            wtr.write_record([format!("{}-{}", r.a, r.b), fmt_f64(r.lhs), fmt_f64(r.rhs), fmt_f64(r.ratio)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_integrability(scp: &StochasticControlledPath) -> Result<()> {
    let p = scp.drive.p();
    if 1.0 / p + 1.0 / scp.q + 1.0 / scp.qp <= 1.0 {
        return Err(Error::Precondition(format!(
            "need 1/p + 1/q + 1/q′ > 1, got p = {p}, q = {}, q′ = {}",
            scp.q, scp.qp
        )));
    }
    Ok(())
}

/// ∫₀^· Y d𝐗 over the whole model grid.
pub fn rough_stochastic_integrate(
    scp: &StochasticControlledPath,
    model: &dyn ProbabilityModel,
    opts: &IntegralOptions,
) -> Result<RoughStochasticIntegral> {
    integrate_window(scp, model, (0, model.grid().n_cells()), opts)
}

/// ∫_{t_a}^· Y d𝐗 on `[t_a, t_b]`, with Y = Y^M + Y^J split on the window.
pub fn integrate_window(
    scp: &StochasticControlledPath,
    model: &dyn ProbabilityModel,
    window: (usize, usize),
    opts: &IntegralOptions,
) -> Result<RoughStochasticIntegral> {
    check_integrability(scp)?;
    if model.grid() != scp.drive.grid() {
        return Err(Error::GridMismatch("model and rough path grids differ".into()));
    }
    if scp.n_samples() != model.n_samples() {
        return Err(Error::GridMismatch("controlled path and model differ in sample count".into()));
    }
    let (lo, hi) = window;
    if lo >= hi || hi > model.grid().n_cells() {
        return Err(Error::Precondition(format!("bad window [{lo}, {hi}]")));
    }
    let grid = model.grid();
    let target: Vec<usize> = match &opts.target {
        Some(t) => grid.embed(t)?.into_iter().filter(|&i| i >= lo && i <= hi).collect(),
        None => (lo..=hi).collect(),
    };
    if target.first() != Some(&lo) || target.last() != Some(&hi) {
        return Err(Error::GridMismatch("reporting grid must contain the window ends".into()));
    }
    let dec = martingale_decomposition_window(&scp.y, model, lo, hi);
    let drive = &scp.drive;
    let germ_m = scalar_germ(|k, s, t| {
        let x = drive.for_sample(k);
        dec.mart.at(s - lo, k) * (x.x(t) - x.x(s))
    });
    let germ_j = scalar_germ(|k, s, t| {
        let x = drive.for_sample(k);
        dec.residual.at(s - lo, k) * (x.x(t) - x.x(s)) + scp.yp.at(s, k) * x.xx(s, t)
    });
    let mart_report = if opts.centering {
        sew_stochastic_at(&germ_m, &target, model, &opts.sewing)?
    } else {
        sew_deterministic_at(&germ_m, grid, &target, model.n_samples(), &opts.sewing)?
    };
    let jump_report = sew_deterministic_at(&germ_j, grid, &target, model.n_samples(), &opts.sewing)?;
    let values = mart_report.values[0].add(&jump_report.values[0]);
    let mut out = RoughStochasticIntegral { values, target, mart_report, jump_report, audit: Vec::new(), c_measured: 0.0 };
    if opts.audit_windows > 0 {
        out.audit = local_audit(scp, &out, &dec, lo, opts.audit_windows);
        out.c_measured = out.audit.iter().fold(0.0, |m, r| m.max(r.ratio));
    }
    Ok(out)
}

/// Windows made of 2, 4, 8, ... consecutive reporting cells, at most `cap`.
fn audit_windows(points: usize, cap: usize) -> Vec<(usize, usize)> {
    let cells = points - 1;
    let mut all = Vec::new();
    let mut len = 2;
    while len <= cells {
        let mut a = 0;
        while a + len <= cells {
            all.push((a, a + len));
            a += len;
        }
        len *= 2;
    }
    if all.len() <= cap {
        return all;
    }
    let step = all.len() as f64 / cap as f64;
    (0..cap).map(|k| all[(k as f64 * step) as usize]).collect()
}

fn local_audit(
    scp: &StochasticControlledPath,
    res: &RoughStochasticIntegral,
    dec: &crate::models::MartingalePart,
    lo: usize,
    cap: usize,
) -> Vec<LocalAuditRow> {
    let n = scp.n_samples();
    let m = scp.m;
    let r = remainder_exponent(scp.q, scp.qp);
    audit_windows(res.target.len(), cap)
        .into_iter()
        .map(|(pa, pb)| {
            let (a, b) = (res.target[pa], res.target[pb]);
            let local: Vec<f64> = (0..n)
                .map(|k| {
                    let x = scp.drive.for_sample(k);
                    res.values.at(pb, k)
                        - res.values.at(pa, k)
                        - scp.y.at(a, k) * (x.x(b) - x.x(a))
                        - scp.yp.at(a, k) * x.xx(a, b)
                })
                .collect();
            let lhs = lm_norm(&local, m);
            let idx = capped_indices(a, b, DEFAULT_COARSE_CAP);
            let mart_var = two_param_var(&idx, n, m, scp.q, |k, i, j| dec.mart.at(j - lo, k) - dec.mart.at(i - lo, k));
            let rem_var = two_param_var(&idx, n, m, r, |k, i, j| {
                let x = scp.drive.for_sample(k);
                dec.residual.at(j - lo, k) - dec.residual.at(i - lo, k) - scp.yp.at(i, k) * (x.x(j) - x.x(i))
            });
            let yp_var = two_param_var(&idx, n, m, scp.qp, |k, i, j| scp.yp.at(j, k) - scp.yp.at(i, k));
            let (x1, x2) = scp.drive.pvar_levels(a, b, DEFAULT_COARSE_CAP);
            let rhs = (mart_var + rem_var) * x1 + yp_var * x2;
            let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
            LocalAuditRow { a, b, lhs, rhs, ratio }
        })
        .collect()
}

/// One perturbation in the stability audit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityRow {
    /// ρ_{p-var}(𝐗, 𝐗̄), largest over the compared drives.
    pub rho: f64,
    /// ‖(Y,Y′) − (Ȳ,Ȳ′)‖^{(K)} of the inputs.
    pub input_distance: f64,
    /// ‖Y_T − Ȳ_T‖_m.
    pub terminal: f64,
    /// Distance of the integrals' controlled data (∫Y d𝐗, Y).
    pub lhs: f64,
    /// K ρ + (1/K + K ε) · input distance.
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub k: f64,
    pub epsilon: f64,
    pub rows: Vec<StabilityRow>,
    /// Largest ratio: the fitted constant C_M.
    pub c_m: f64,
}

impl StabilityReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["rho", "input_distance", "terminal", "lhs", "rhs", "ratio"])?;
        for r in &self.rows {
            wtr.write_record([r.rho, r.input_distance, r.terminal, r.lhs, r.rhs, r.ratio].map(fmt_f64))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn drive_distance(a: &Drive, b: &Drive) -> Result<f64> {
    let k = a.paths().len().max(b.paths().len()).min(DEFAULT_COARSE_CAP);
    let mut worst: f64 = 0.0;
    for s in 0..k {
        worst = worst.max(rough_distance(a.for_sample(s), b.for_sample(s))?);
    }
    Ok(worst)
}

/// Integrates each pair and compares the integrals' controlled data against
/// ‖Y_T − Ȳ_T‖ + C_M (K ρ + (1/K + K ε) · input distance).
pub fn stability_audit(
    pairs: &[(StochasticControlledPath, StochasticControlledPath)],
    k: f64,
    model: &dyn ProbabilityModel,
    opts: &IntegralOptions,
) -> Result<StabilityReport> {
    let last = model.grid().n_cells();
    let mut rows = Vec::with_capacity(pairs.len());
    let mut epsilon: f64 = 0.0;
    for (a, b) in pairs {
        epsilon = epsilon
            .max(a.drive.pvar_total(0, last, DEFAULT_COARSE_CAP))
            .max(b.drive.pvar_total(0, last, DEFAULT_COARSE_CAP));
    }
    for (a, b) in pairs {
        let ia = rough_stochastic_integrate(a, model, &IntegralOptions { target: None, ..opts.clone() })?;
        let ib = rough_stochastic_integrate(b, model, &IntegralOptions { target: None, ..opts.clone() })?;
        let ca = ia.as_controlled(a)?;
        let cb = ib.as_controlled(b)?;
        let out: ControlledNormReport = controlled_distance(&ca, Some(&cb), k, (0, last), model)?;
        let input = controlled_distance(a, Some(b), k, (0, last), model)?.total;
        let rho = drive_distance(&a.drive, &b.drive)?;
        let terminal = crate::process::lm_dist(a.y.last_row(), b.y.last_row(), a.m);
        let rhs = k * rho + (1.0 / k + k * epsilon) * input;
        let excess = (out.total - terminal).max(0.0);
        let ratio = if rhs > 0.0 { excess / rhs } else { 0.0 };
        rows.push(StabilityRow { rho, input_distance: input, terminal, lhs: out.total, rhs, ratio });
    }
    let c_m = rows.iter().fold(0.0f64, |m, r| m.max(r.ratio));
    Ok(StabilityReport { k, epsilon, rows, c_m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BinomialTree, BrownianEnsemble};
    use crate::rough_path::{RoughPath, SampledPath};
    use proptest::prelude::*;

    fn smooth(grid: &TimeGrid, shift: f64) -> SampledPath {
        SampledPath::from_fn(grid.clone(), 1, |t| vec![shift + (5.0 * t).sin() + 0.5 * (13.0 * t).cos()]).unwrap()
    }

    fn deterministic(grid: &TimeGrid) -> Drive {
        Drive::single(RoughPath::canonical_lift(&smooth(grid, 0.0), 2.5).unwrap())
    }

    #[test]
    fn constant_integrand_telescopes() {
        let tree = BinomialTree::new(6, 1, 1.0).unwrap();
        let drive = deterministic(tree.grid());
        let n = tree.n_samples();
        let scp = StochasticControlledPath::with_defaults(Process::constant(7, n, 1.7), Process::zeros(7, n), drive.clone()).unwrap();
        let res = rough_stochastic_integrate(&scp, &tree, &IntegralOptions::default()).unwrap();
        let x = drive.for_sample(0);
        for s in 0..n {
            assert!((res.terminal()[s] - 1.7 * (x.x(6) - x.x(0))).abs() < 1e-14);
        }
        assert!(res.converged());
    }

    #[test]
    fn path_against_its_canonical_lift() {
        let tree = BinomialTree::new(4, 1, 1.0).unwrap();
        let g = TimeGrid::uniform(4, 1.0).unwrap();
        let raw = smooth(&g, 0.9);
        let drive = Drive::single(RoughPath::canonical_lift(&raw, 2.5).unwrap());
        let n = tree.n_samples();
        let y = Process::deterministic(5, n, |i| raw.x(i));
        let scp = StochasticControlledPath::with_defaults(y, Process::constant(5, n, 1.0), drive).unwrap();
        let res = rough_stochastic_integrate(&scp, &tree, &IntegralOptions::default()).unwrap();
        let want = (raw.x(4).powi(2) - raw.x(0).powi(2)) / 2.0;
        assert!((res.terminal()[3] - want).abs() < 1e-12);
        assert!(res.audit.iter().all(|r| r.ratio.is_finite()));
    }

    #[test]
    fn ito_lift_reproduces_discrete_ito_sum() {
        let fine = TimeGrid::uniform(64, 1.0).unwrap();
        let ens = BrownianEnsemble::simulate(fine.clone(), 200, 1, 7).unwrap();
        let coarse = TimeGrid::uniform(16, 1.0).unwrap();
        let model = ens.restrict(&coarse).unwrap();
        let lifts = RoughPath::ito_brownian_lift(&ens, &coarse, 2.5).unwrap();
        let drive = Drive::per_sample(lifts).unwrap();
        let y = Process::from_fn(17, 200, |i, s| model.w(s, i, 0));
        let scp = StochasticControlledPath::with_defaults(y, Process::constant(17, 200, 1.0), drive).unwrap();
        let opts = IntegralOptions { audit_windows: 4, ..Default::default() };
        let res = rough_stochastic_integrate(&scp, &model, &opts).unwrap();
        for s in 0..200 {
            let ito: f64 = (0..64).map(|k| ens.w(s, k, 0) * ens.dw(s, k, 0)).sum();
            assert!((res.terminal()[s] - ito).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_over_time() {
        let tree = BinomialTree::new(6, 1, 1.0).unwrap();
        let drive = deterministic(tree.grid());
        let n = tree.n_samples();
        let y = Process::from_fn(7, n, |i, s| (tree.w(s, i, 0) + 0.1 * i as f64).sin());
        let yp = y.map(|v| v * v);
        let scp = StochasticControlledPath::with_defaults(y, yp, drive).unwrap();
        let q = IntegralOptions::quiet();
        let full = rough_stochastic_integrate(&scp, &tree, &q).unwrap();
        let left = integrate_window(&scp, &tree, (0, 2), &q).unwrap();
        let right = integrate_window(&scp, &tree, (2, 6), &q).unwrap();
        for s in 0..n {
            assert!((left.terminal()[s] + right.terminal()[s] - full.terminal()[s]).abs() < 1e-13);
        }
    }

    #[test]
    fn initial_value_of_path_is_irrelevant() {
        let g = TimeGrid::uniform(8, 1.0).unwrap();
        let a = RoughPath::canonical_lift(&smooth(&g, 0.0), 2.5).unwrap();
        let b = RoughPath::canonical_lift(&smooth(&g, 3.0), 2.5).unwrap();
        let tree = BinomialTree::new(8, 1, 1.0).unwrap();
        let n = tree.n_samples();
        let y = Process::from_fn(9, n, |i, s| tree.w(s, i, 0));
        let ra = rough_stochastic_integrate(
            &StochasticControlledPath::with_defaults(y.clone(), y.clone(), Drive::single(a)).unwrap(),
            &tree,
            &IntegralOptions::quiet(),
        )
        .unwrap();
        let rb = rough_stochastic_integrate(
            &StochasticControlledPath::with_defaults(y.clone(), y, Drive::single(b)).unwrap(),
            &tree,
            &IntegralOptions::quiet(),
        )
        .unwrap();
        assert!(ra.values.sub(&rb.values).sup_abs() < 1e-14);
    }

    #[test]
    fn stability_examples() {
        let tree = BinomialTree::new(6, 1, 1.0).unwrap();
        let drive = deterministic(tree.grid());
        let n = tree.n_samples();
        let y = Process::from_fn(7, n, |i, s| tree.w(s, i, 0) * (i as f64).cos());
        let scp = StochasticControlledPath::with_defaults(y.clone(), y.map(f64::sin), drive).unwrap();
        let opts = IntegralOptions::quiet();
        let same = stability_audit(&[(scp.clone(), scp.clone())], 2.0, &tree, &opts).unwrap();
        assert_eq!(same.rows[0].lhs, 0.0);
        let two = stability_audit(&[(scp.clone(), scp.scale(2.0)), (scp.clone(), scp.scale(3.0))], 2.0, &tree, &opts).unwrap();
        assert!((two.rows[1].lhs - 2.0 * two.rows[0].lhs).abs() < 1e-12 * two.rows[1].lhs);
        assert!(two.c_m.is_finite());
    }

    #[test]
    fn refined_lifts_give_vanishing_distance() {
        let tree = BinomialTree::with_substeps(4, 1, 1.0, 16).unwrap();
        let g = tree.grid().clone();
        let fine = smooth(&g, 0.0);
        let finest = RoughPath::canonical_lift(&fine, 2.5).unwrap();
        let n = tree.n_samples();
        let w = Process::from_fn(g.len(), n, |i, s| tree.w(s, i, 0));
        let mut pairs = Vec::new();
        for level in [2usize, 3, 4, 5] {
            let knots: Vec<usize> = (0..=(1 << level)).map(|k| k * 64 >> level).collect();
            let approx = RoughPath::canonical_lift(&fine.interpolant_through(&knots).unwrap(), 2.5).unwrap();
            let a = StochasticControlledPath::with_defaults(w.clone(), Process::constant(g.len(), n, 1.0), Drive::single(finest.clone())).unwrap();
            let b = StochasticControlledPath::with_defaults(w.clone(), Process::constant(g.len(), n, 1.0), Drive::single(approx)).unwrap();
            pairs.push((a, b));
        }
        let rep = stability_audit(&pairs, 2.0, &tree, &IntegralOptions::quiet()).unwrap();
        let lhs: Vec<f64> = rep.rows.iter().map(|r| r.lhs).collect();
        assert!(lhs.windows(2).all(|w| w[1] < w[0]), "{lhs:?}");
        assert!(rep.rows.windows(2).all(|w| w[1].rho < w[0].rho));
    }

    #[test]
    fn integrability_constraint() {
        let tree = BinomialTree::new(3, 1, 1.0).unwrap();
        let drive = deterministic(tree.grid());
        let z = Process::zeros(4, tree.n_samples());
        let scp = StochasticControlledPath::new(z.clone(), z, drive, 4.0, 4.0, 2.0).unwrap();
        assert!(matches!(rough_stochastic_integrate(&scp, &tree, &IntegralOptions::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn audit_csv_columns() {
        let tree = BinomialTree::new(8, 1, 1.0).unwrap();
        let drive = deterministic(tree.grid());
        let n = tree.n_samples();
        let y = Process::from_fn(9, n, |i, s| tree.w(s, i, 0) + i as f64);
        let res = rough_stochastic_integrate(
            &StochasticControlledPath::with_defaults(y.clone(), y, drive).unwrap(),
            &tree,
            &IntegralOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        res.write_audit_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("window,lhs,rhs,ratio\n"));
        assert_eq!(res.audit.len(), 4 + 2 + 1);
        assert!(res.c_measured.is_finite());
        assert!(!res.mart_report.centering_flagged);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn integral_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, c in 0.1f64..2.0) {
            let tree = BinomialTree::new(5, 1, 1.0).unwrap();
            let drive = deterministic(tree.grid());
            let n = tree.n_samples();
            let y1 = Process::from_fn(6, n, |i, s| (c * tree.w(s, i, 0)).exp());
            let y2 = Process::from_fn(6, n, |i, s| tree.w(s, i, 0) * i as f64);
            let a = StochasticControlledPath::with_defaults(y1.clone(), y2.clone(), drive.clone()).unwrap();
            let b = StochasticControlledPath::with_defaults(y2, y1, drive).unwrap();
            let q = IntegralOptions::quiet();
            let ia = rough_stochastic_integrate(&a, &tree, &q).unwrap();
            let ib = rough_stochastic_integrate(&b, &tree, &q).unwrap();
            let imix = rough_stochastic_integrate(&a.combine(alpha, &b, beta), &tree, &q).unwrap();
            let want = ia.values.zip_with(&ib.values, |u, v| alpha * u + beta * v);
            prop_assert!(imix.values.sub(&want).sup_abs() < 1e-12 * (1.0 + want.sup_abs()));
        }
    }
}
