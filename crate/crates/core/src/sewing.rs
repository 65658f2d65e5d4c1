//! Sewing of two-parameter germs by compensated Riemann sums over refined
//! partitions, pathwise and in L^m with a centering audit.

use std::io::Write;

use crate::error::{Error, Result};
use crate::models::ProbabilityModel;
use crate::par;
use crate::process::{lm_norm, Process};
use crate::rough_path::{euclid, fmt_f64, TimeGrid};

/// A_{s,t} per sample, evaluated on simulation-grid indices `s ≤ t`.
pub trait Germ: Send + Sync {
    fn dim(&self) -> usize;
    fn adapted(&self) -> bool {
        true
    }
    fn eval(&self, sample: usize, s: usize, t: usize, out: &mut [f64]);
}

/// Germ from a closure writing into an output slice.
pub struct FnGerm<F> {
    dim: usize,
    adapted: bool,
    f: F,
}

impl<F> FnGerm<F>
where
    F: Fn(usize, usize, usize, &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, adapted: true, f }
    }

    pub fn non_adapted(mut self) -> Self {
        self.adapted = false;
        self
    }
}

impl<F> Germ for FnGerm<F>
where
    F: Fn(usize, usize, usize, &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn adapted(&self) -> bool {
        self.adapted
    }

    fn eval(&self, sample: usize, s: usize, t: usize, out: &mut [f64]) {
        (self.f)(sample, s, t, out)
    }
}

/// Scalar germ from `(sample, s, t) -> A_{s,t}`.
pub fn scalar_germ<F>(f: F) -> FnGerm<impl Fn(usize, usize, usize, &mut [f64]) + Send + Sync>
where
    F: Fn(usize, usize, usize) -> f64 + Send + Sync,
{
    FnGerm::new(1, move |k, s, t, out: &mut [f64]| out[0] = f(k, s, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Dyadic,
    Triadic,
}

impl Schedule {
    pub fn factor(self) -> usize {
        match self {
            Schedule::Dyadic => 2,
            Schedule::Triadic => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SewingOptions {
    pub m: f64,
    /// Relative Cauchy tolerance on sup_t ‖𝒜^k_t − 𝒜^{k−1}_t‖_m; 0 runs to the floor.
    pub tol: f64,
    pub max_levels: usize,
    /// Levels computed even when the tolerance is met earlier.
    pub min_levels: usize,
    pub schedule: Schedule,
    /// Cap on the number of triples in the centering audit.
    pub audit_triples: usize,
}

impl Default for SewingOptions {
    fn default() -> Self {
        Self { m: 2.0, tol: 1e-3, max_levels: 24, min_levels: 1, schedule: Schedule::Dyadic, audit_triples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SewingReport {
    /// Target (coarse) points as simulation-grid indices.
    pub coarse: Vec<usize>,
    /// 𝒜 at the coarse points, one process per component, from the last level.
    pub values: Vec<Process>,
    /// 𝒜 at the coarse points for each computed level.
    pub level_values: Vec<Vec<Process>>,
    /// Largest sub-cell length of each level's partition.
    pub level_mesh: Vec<f64>,
    /// Entry k − 1 compares level k with level k − 1.
    pub refinement_errors: Vec<f64>,
    pub converged: bool,
    pub at_floor: bool,
    /// Set when the Cauchy errors grow after the first two levels.
    pub non_monotone: bool,
    pub m: f64,
    /// max over audited triples of ‖𝔼_s δA_{s,u,t}‖_m (stochastic sewing only).
    pub centering_defect: Option<f64>,
    pub centering_tol: Option<f64>,
    pub centering_flagged: bool,
}

impl SewingReport {
    /// 𝒜_T per sample for component `comp`.
    pub fn terminal(&self, comp: usize) -> &[f64] {
        self.values[comp].last_row()
    }

    pub fn terminal_by_level(&self, comp: usize) -> Vec<Vec<f64>> {
        self.level_values.iter().map(|v| v[comp].last_row().to_vec()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["level", "error"])?;
        for (k, e) in self.refinement_errors.iter().enumerate() {
            wtr.write_record([(k + 1).to_string(), fmt_f64(*e)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Breakpoints of `[a, b]` split into `pieces` near-equal runs of grid cells.
fn split(a: usize, b: usize, pieces: usize) -> Vec<usize> {
    let len = b - a;
    if pieces >= len {
        return (a..=b).collect();
    }
    let mut out: Vec<usize> = (0..=pieces).map(|l| a + l * len / pieces).collect();
    out.dedup();
    out
}

fn pieces_at(level: usize, factor: usize) -> usize {
    factor.checked_pow(level as u32).unwrap_or(usize::MAX)
}

/// Σ over the level's partition, accumulated along the coarse points, per sample.
fn level_sum(germ: &dyn Germ, coarse: &[usize], pieces: usize, n_samples: usize) -> Result<Vec<Process>> {
    let dim = germ.dim();
    let parts: Vec<Vec<usize>> = coarse.windows(2).map(|w| split(w[0], w[1], pieces)).collect();
    let per_sample: Vec<Result<Vec<f64>>> = par::map_indexed(n_samples, |k| {
        let mut acc = vec![0.0; dim];
        let mut buf = vec![0.0; dim];
        let mut out = Vec::with_capacity(coarse.len() * dim);
        out.extend_from_slice(&acc);
        for part in &parts {
            for w in part.windows(2) {
                germ.eval(k, w[0], w[1], &mut buf);
                if buf.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { sample: k, s: w[0], t: w[1] });
                }
                for (a, v) in acc.iter_mut().zip(&buf) {
                    *a += v;
                }
            }
            out.extend_from_slice(&acc);
        }
        Ok(out)
    });
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..dim)
        .map(|c| Process::from_fn(coarse.len(), n_samples, |r, k| per_sample[k][r * dim + c]))
        .collect())
}

/// sup over coarse points of the empirical L^m norm of a vector-valued per-sample quantity.
fn sup_lm(values: &[Process], other: Option<&[Process]>, m: f64) -> f64 {
    let rows = values[0].n_times();
    let n = values[0].n_samples();
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        let mags: Vec<f64> = (0..n)
            .map(|k| {
                let v: Vec<f64> = values
                    .iter()
                    .enumerate()
                    .map(|(c, p)| p.at(r, k) - other.map_or(0.0, |o| o[c].at(r, k)))
                    .collect();
                euclid(&v)
            })
            .collect();
        worst = worst.max(lm_norm(&mags, m));
    }
    worst
}

fn sew(germ: &dyn Germ, grid: &TimeGrid, coarse: &[usize], n_samples: usize, opts: &SewingOptions) -> Result<SewingReport> {
    if !(opts.m >= 1.0) {
        return Err(Error::Exponent(opts.m));
    }
    if coarse.len() < 2 {
        return Err(Error::InvalidGrid("sewing needs at least two target points".into()));
    }
    let factor = opts.schedule.factor();
    let longest = coarse.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
    let mut level_values: Vec<Vec<Process>> = Vec::new();
    let mut level_mesh = Vec::new();
    let mut refinement_errors = Vec::new();
    let mut converged = false;
    let mut at_floor = false;
    for level in 0..=opts.max_levels {
        let pieces = pieces_at(level, factor);
        let values = level_sum(germ, coarse, pieces, n_samples)?;
        let mesh = coarse
            .windows(2)
            .flat_map(|w| split(w[0], w[1], pieces).windows(2).map(|c| grid.t(c[1]) - grid.t(c[0])).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        at_floor = pieces >= longest;
        if let Some(prev) = level_values.last() {
            let e = sup_lm(&values, Some(prev), opts.m);
            refinement_errors.push(e);
            let scale = sup_lm(&values, None, opts.m);
            converged = opts.tol > 0.0 && e <= opts.tol * scale;
        }
        level_values.push(values);
        level_mesh.push(mesh);
        if at_floor || (converged && level >= opts.min_levels) {
            break;
        }
    }
    converged = converged || at_floor;
    let non_monotone = refinement_errors.iter().skip(1).collect::<Vec<_>>().windows(2).any(|w| *w[1] > *w[0] * (1.0 + 1e-9));
    Ok(SewingReport {
        coarse: coarse.to_vec(),
        values: level_values.last().cloned().expect("at least one level"),
        level_values,
        level_mesh,
        refinement_errors,
        converged,
        at_floor,
        non_monotone,
        m: opts.m,
        centering_defect: None,
        centering_tol: None,
        centering_flagged: false,
    })
}

/// Pathwise sewing of `germ` on `grid` with values reported at the `coarse` points.
pub fn sew_deterministic(
    germ: &dyn Germ,
    grid: &TimeGrid,
    coarse: &TimeGrid,
    n_samples: usize,
    opts: &SewingOptions,
) -> Result<SewingReport> {
    let idx = grid.embed(coarse)?;
    sew(germ, grid, &idx, n_samples, opts)
}

/// [`sew_deterministic`] with the reporting points given as grid indices.
pub fn sew_deterministic_at(
    germ: &dyn Germ,
    grid: &TimeGrid,
    coarse: &[usize],
    n_samples: usize,
    opts: &SewingOptions,
) -> Result<SewingReport> {
    sew(germ, grid, coarse, n_samples, opts)
}

/// Sewing in L^m over the samples of `model`, plus the centering audit.
pub fn sew_stochastic(
    germ: &dyn Germ,
    coarse: &TimeGrid,
    model: &dyn ProbabilityModel,
    opts: &SewingOptions,
) -> Result<SewingReport> {
    let idx = model.grid().embed(coarse)?;
    sew_stochastic_at(germ, &idx, model, opts)
}

/// [`sew_stochastic`] with the reporting points given as grid indices.
pub fn sew_stochastic_at(
    germ: &dyn Germ,
    idx: &[usize],
    model: &dyn ProbabilityModel,
    opts: &SewingOptions,
) -> Result<SewingReport> {
    if !germ.adapted() {
        return Err(Error::Precondition("stochastic sewing needs an adapted germ".into()));
    }
    let mut report = sew(germ, model.grid(), idx, model.n_samples(), opts)?;
    let (defect, scale) = centering_audit(germ, model, opts.m, opts.audit_triples);
    let tol = model.audit_tol(scale);
    report.centering_defect = Some(defect);
    report.centering_tol = Some(tol);
    report.centering_flagged = defect > tol;
    Ok(report)
}

/// Equally spaced triples `(s, s + h, s + 2h)` on the model grid, at most `cap`.
pub fn audit_triples(n_cells: usize, cap: usize) -> Vec<(usize, usize, usize)> {
    let mut all = Vec::new();
    let mut h = 1;
    while 2 * h <= n_cells {
        let mut s = 0;
        while s + 2 * h <= n_cells {
            all.push((s, s + h, s + 2 * h));
            s += h;
        }
        h *= 2;
    }
    if all.len() <= cap || cap == 0 {
        return all;
    }
    let step = all.len() as f64 / cap as f64;
    (0..cap).map(|k| all[(k as f64 * step) as usize]).collect()
}

/// max ‖𝔼_s δA_{s,u,t}‖_m over the audit triples and the largest ‖A_{s,t}‖_m seen.
pub fn centering_audit(germ: &dyn Germ, model: &dyn ProbabilityModel, m: f64, cap: usize) -> (f64, f64) {
    let dim = germ.dim();
    let n = model.n_samples();
    let triples = audit_triples(model.grid().n_cells(), cap);
    let per: Vec<(f64, f64)> = par::map_indexed(triples.len(), |k| {
        let (s, u, t) = triples[k];
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        let mut c = vec![0.0; dim];
        let mut delta = vec![vec![0.0; n]; dim];
        let mut size = vec![0.0; n];
        for j in 0..n {
            germ.eval(j, s, t, &mut a);
            germ.eval(j, s, u, &mut b);
            germ.eval(j, u, t, &mut c);
            for comp in 0..dim {
                delta[comp][j] = a[comp] - b[comp] - c[comp];
            }
            size[j] = euclid(&a);
        }
        let cond: Vec<Vec<f64>> = delta.iter().map(|d| model.cond_exp(d, s)).collect();
        let mags: Vec<f64> = (0..n).map(|j| euclid(&cond.iter().map(|c| c[j]).collect::<Vec<_>>())).collect();
        (lm_norm(&mags, m), lm_norm(&size, m))
    });
    per.iter().fold((0.0, 0.0), |(d, sc), &(a, b)| (f64::max(d, a), f64::max(sc, b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BinomialTree;
    use crate::rough_path::{RoughPath, SampledPath};
    use proptest::prelude::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::uniform(n, 1.0).unwrap()
    }

    /// A single deterministic sample on a given grid.
    struct Pointmass(TimeGrid);

    impl ProbabilityModel for Pointmass {
        fn grid(&self) -> &TimeGrid {
            &self.0
        }
        fn n_samples(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn dw(&self, _: usize, _: usize, _: usize) -> f64 {
            0.0
        }
        fn w(&self, _: usize, _: usize, _: usize) -> f64 {
            0.0
        }
        fn cond_exp(&self, values: &[f64], _: usize) -> Vec<f64> {
            values.to_vec()
        }
        fn is_exact(&self) -> bool {
            true
        }
    }

    #[test]
    fn split_covers_cells() {
        assert_eq!(split(3, 10, 2), vec![3, 6, 10]);
        assert_eq!(split(0, 4, 8), vec![0, 1, 2, 3, 4]);
        assert_eq!(audit_triples(4, 100), vec![(0, 1, 2), (1, 2, 3), (2, 3, 4), (0, 2, 4)]);
        assert_eq!(audit_triples(1024, 256).len(), 256);
    }

    #[test]
    fn additive_germ_is_exact_at_every_level() {
        let g = grid(64);
        let xs: Vec<f64> = (0..=64).map(|i| ((i * 37 % 11) as f64) / 8.0).collect();
        let germ = scalar_germ(|_, s, t| xs[t] - xs[s]);
        let opts = SewingOptions { tol: 0.0, ..Default::default() };
        let rep = sew_deterministic(&germ, &g, &grid(4), 1, &opts).unwrap();
        assert!(rep.at_floor && rep.converged);
        for lv in &rep.level_values {
            for (r, &i) in rep.coarse.iter().enumerate() {
                assert_eq!(lv[0].at(r, 0), xs[i] - xs[0]);
            }
        }
        assert!(rep.refinement_errors.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn drift_germ_matches_fine_quadrature() {
        let n = 256;
        let g = grid(n);
        let f = |t: f64| (3.0 * t).sin() + t;
        let germ = scalar_germ(|_, s, t| f(g.t(s)) * (g.t(t) - g.t(s)));
        let rep = sew_deterministic(&germ, &g, &grid(1), 1, &SewingOptions::default()).unwrap();
        let fine = 100 * n;
        let oracle: f64 = (0..fine).map(|k| f(k as f64 / fine as f64) / fine as f64).sum();
        let lip = 4.0;
        let mesh = rep.level_mesh.last().copied().unwrap();
        assert!(rep.converged);
        assert!((rep.terminal(0)[0] - oracle).abs() <= lip * mesh);
    }

    #[test]
    fn canonical_lift_germ_gives_half_square() {
        let n = 40;
        let g = grid(n);
        let xs: Vec<f64> = (0..=n).map(|i| (i as f64 * 0.7).sin() * 2.0 + 0.3).collect();
        let path = SampledPath::scalar(g.clone(), xs.clone()).unwrap();
        let lift = RoughPath::canonical_lift(&path, 2.5).unwrap();
        let germ = scalar_germ(|_, s, t| xs[s] * (xs[t] - xs[s]) + lift.xx(s, t));
        let opts = SewingOptions { tol: 0.0, ..Default::default() };
        let rep = sew_deterministic(&germ, &g, &g.subgrid(&[0, 10, 40]).unwrap(), 1, &opts).unwrap();
        let want = (xs[n] * xs[n] - xs[0] * xs[0]) / 2.0;
        for t in rep.terminal_by_level(0) {
            assert!((t[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ito_germ_on_tree_is_discrete_ito_sum() {
        let tree = BinomialTree::new(8, 1, 1.0).unwrap();
        let germ = scalar_germ(|k, s, t| tree.w(k, s, 0) * (tree.w(k, t, 0) - tree.w(k, s, 0)));
        let opts = SewingOptions { tol: 0.0, ..Default::default() };
        let rep = sew_stochastic(&germ, &grid(2), &tree, &opts).unwrap();
        for k in 0..tree.n_samples() {
            let mut w = 0.0;
            let mut sum = 0.0;
            for step in 0..8 {
                let inc = if (k >> (7 - step)) & 1 == 1 { 1.0 } else { -1.0 } * (1.0f64 / 8.0).sqrt();
                sum += w * inc;
                w += inc;
            }
            assert!((rep.terminal(0)[k] - sum).abs() < 1e-12);
            assert!((rep.terminal(0)[k] - (w * w - 1.0) / 2.0).abs() < 1e-12);
        }
        assert!(rep.centering_defect.unwrap() < 1e-14);
        assert!(!rep.centering_flagged);
    }

    #[test]
    fn martingale_germ_telescopes() {
        let tree = BinomialTree::new(6, 2, 1.0).unwrap();
        let m = |k: usize, i: usize| tree.w(k, i, 0) * tree.w(k, i, 1) + tree.w(k, i, 1);
        let germ = scalar_germ(|k, s, t| m(k, t) - m(k, s));
        let rep = sew_stochastic(&germ, &grid(3), &tree, &SewingOptions::default()).unwrap();
        for k in 0..tree.n_samples() {
            assert!((rep.terminal(0)[k] - m(k, 6)).abs() < 1e-12);
        }
        assert!(!rep.centering_flagged);
    }

    #[test]
    fn non_centered_germ_is_flagged() {
        let tree = BinomialTree::new(6, 1, 1.0).unwrap();
        let g = tree.grid().clone();
        let germ = scalar_germ(|k, s, t| tree.w(k, s, 0) * (tree.w(k, t, 0) - tree.w(k, s, 0)) + (g.t(t) - g.t(s)).powi(2));
        let rep = sew_stochastic(&germ, &grid(2), &tree, &SewingOptions::default()).unwrap();
        assert!(rep.centering_flagged);
    }

    #[test]
    fn non_finite_germ_is_an_error() {
        let germ = scalar_germ(|_, s, _| if s == 3 { f64::NAN } else { 1.0 });
        let err = sew_deterministic(&germ, &grid(8), &grid(1), 1, &SewingOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { s: 3, .. }));
    }

    #[test]
    fn single_sample_models_agree() {
        let g = grid(64);
        let f = |t: f64| (5.0 * t).cos();
        let germ = scalar_germ(|_, s, t| f(g.t(s)) * (g.t(t) - g.t(s)) + 0.1 * (g.t(t) - g.t(s)).powf(1.5));
        let opts = SewingOptions::default();
        let a = sew_deterministic(&germ, &g, &grid(2), 1, &opts).unwrap();
        let b = sew_stochastic(&germ, &grid(2), &Pointmass(g.clone()), &opts).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.refinement_errors, b.refinement_errors);
    }

    #[test]
    fn report_csv_has_level_rows() {
        let g = grid(16);
        let germ = scalar_germ(|_, s, t| g.t(s) * (g.t(t) - g.t(s)));
        let rep = sew_deterministic(&germ, &g, &grid(1), 1, &SewingOptions { tol: 0.0, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + rep.refinement_errors.len());
        assert_eq!(rep.refinement_errors.len(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn additive_germs_do_not_depend_on_level(values in prop::collection::vec(-4i32..4, 33)) {
            let g = grid(32);
            let xs: Vec<f64> = values.iter().map(|&v| v as f64 / 4.0).collect();
            let germ = scalar_germ(|_, s, t| xs[t] - xs[s]);
            let rep = sew_deterministic(&germ, &g, &grid(2), 1, &SewingOptions { tol: 0.0, ..Default::default() }).unwrap();
            for lv in &rep.level_values {
                prop_assert_eq!(lv[0].row(2)[0], xs[32] - xs[0]);
            }
        }

        #[test]
        fn dyadic_and_triadic_limits_agree(a in 0.5f64..6.0, b in -3.0f64..3.0, c in -1.0f64..1.0) {
            let g = grid(1296);
            let f = |t: f64| (a * t + b).sin() + c * t;
            let germ = scalar_germ(|_, s, t| f(g.t(s)) * (g.t(t) - g.t(s)));
            let coarse = grid(4);
            let dy = sew_deterministic(&germ, &g, &coarse, 1, &SewingOptions::default()).unwrap();
            let tri_opts = SewingOptions { schedule: Schedule::Triadic, ..Default::default() };
            let tri = sew_deterministic(&germ, &g, &coarse, 1, &tri_opts).unwrap();
            let finer = if dy.level_mesh.last() <= tri.level_mesh.last() { &dy } else { &tri };
            let last = *finer.refinement_errors.last().unwrap();
            let dist = sup_lm(&dy.values, Some(&tri.values), 2.0);
            prop_assert!(dist <= 3.0 * last + 1e-15, "dist {} last {}", dist, last);
        }
    }
}
