//! The experiment registry and one runner per experiment.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use roughbsde::bsde::{
    bsde_continuity_audit, cole_hopf_oracle, solve_quadratic_bsde_small, BsdeKind, Driver, QuadraticOptions,
};
use roughbsde::controlled::{Drive, EssBoundedControlledPath, StochasticControlledPath};
use roughbsde::flow::{solve_nonlinear_rough_bsde, FlowOptions, NonlinearProblem, VectorField};
use roughbsde::integral::{rough_stochastic_integrate, stability_audit, IntegralOptions};
use roughbsde::linear::{
    continuity_audit, duality_oracle, solve_linear_rough_bsde, LinearOptions, LinearRoughBsdeProblem,
    RoughBsdeSolution,
};
use roughbsde::models::{drift_variation_check, martingale_variation_check};
use roughbsde::pde::{
    continuity_in_x_audit, fd_pde_oracle, feynman_kac_u, FdOptions, FeynmanKacOptions, MarkovianProblem, SmoothDrive,
};
use roughbsde::rates::{ConvergenceTable, RateFit};
use roughbsde::rough_path::p_variation_of_values;
use roughbsde::{BinomialTree, BrownianEnsemble, ProbabilityModel, Process, RoughPath, SampledPath, TimeGrid};

use crate::config::{ExperimentConfig, Param};
use crate::error::CliError;

/// Registry entry.
pub struct Spec {
    pub id: &'static str,
    pub description: &'static str,
    pub params: fn() -> Vec<Param>,
    pub run: fn(&ExperimentConfig, &Path) -> Result<Outcome, CliError>,
}

pub static SPECS: &[Spec] = &[
    Spec {
        id: "chen-check",
        description: "Chen relation of canonical lifts on every grid triple",
        params: chen_params,
        run: chen_check,
    },
    Spec {
        id: "pvar-bruteforce",
        description: "p-variation dynamic program against partition enumeration",
        params: pvar_params,
        run: pvar_bruteforce,
    },
    Spec {
        id: "ito-consistency",
        description: "∫W dW against Itô lifts versus (W_T² − T)/2, with the mesh rate",
        params: ito_params,
        run: ito_consistency,
    },
    Spec {
        id: "tree-constants",
        description: "martingale and drift variation constants on two tree refinements",
        params: tree_constant_params,
        run: tree_constants,
    },
    Spec {
        id: "linear-rbsde-duality",
        description: "constant-G linear rough BSDE against the exponential duality formula",
        params: duality_params,
        run: linear_duality,
    },
    Spec {
        id: "linear-rbsde-contraction",
        description: "Picard ratios and node residuals of random linear rough BSDEs",
        params: contraction_params,
        run: linear_contraction,
    },
    Spec {
        id: "cole-hopf",
        description: "quadratic BSDE f = Lz² against the Cole–Hopf formula",
        params: cole_hopf_params,
        run: cole_hopf,
    },
    Spec {
        id: "flow-cauchy",
        description: "flow-transform solver over dyadic approximations, with its Cauchy table",
        params: flow_params,
        run: flow_cauchy,
    },
    Spec {
        id: "feynman-kac",
        description: "Feynman–Kac rough PDE values against finite differences, and continuity in the drive",
        params: fk_params,
        run: feynman_kac,
    },
    Spec {
        id: "stability",
        description: "stability and continuity tables for the integral, the linear and the quadratic solvers",
        params: stability_params,
        run: stability,
    },
];

pub fn find(id: &str) -> Option<&'static Spec> {
    SPECS.iter().find(|s| s.id == id)
}

/// One audited quantity with its bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, max: f64) -> Self {
        Self { name: name.into(), value, min: None, max: Some(max), passed: value <= max }
    }

    pub fn within(name: &str, value: f64, min: f64, max: f64) -> Self {
        Self { name: name.into(), value, min: Some(min), max: Some(max), passed: (min..=max).contains(&value) }
    }

    pub fn holds(name: &str, ok: bool) -> Self {
        Self { name: name.into(), value: if ok { 1.0 } else { 0.0 }, min: Some(1.0), max: None, passed: ok }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn create(dir: &Path, name: &str, out: &mut Outcome) -> Result<BufWriter<File>, CliError> {
    out.artifacts.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_rows(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>], out: &mut Outcome) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(dir, name, out)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_table(dir: &Path, name: &str, table: &ConvergenceTable, out: &mut Outcome) -> Result<(), CliError> {
    table.write_csv(create(dir, name, out)?)?;
    Ok(())
}

fn write_fit(dir: &Path, name: &str, fit: &RateFit, out: &mut Outcome) -> Result<(), CliError> {
    write_rows(
        dir,
        name,
        &["slope", "intercept", "slope_low", "slope_high", "rows"],
        &[vec![fmt(fit.slope), fmt(fit.intercept), fmt(fit.slope_low), fmt(fit.slope_high), fit.n.to_string()]],
        out,
    )
}

fn positive(cfg: &ExperimentConfig, key: &str) -> Result<usize, CliError> {
    let v = cfg.usize(key)?;
    if v == 0 {
        return Err(CliError::Config(format!("`{key}` must be positive")));
    }
    Ok(v)
}

fn sine_lift(grid: &TimeGrid, amp: f64) -> Result<RoughPath, CliError> {
    let path = SampledPath::from_fn(grid.clone(), 1, |t| vec![amp * (2.0 * std::f64::consts::PI * t).sin()])?;
    Ok(RoughPath::canonical_lift(&path, 2.5)?)
}

fn terminal_of(tree: &BinomialTree, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let last = tree.grid().n_cells();
    (0..tree.n_samples()).map(|s| f(tree.w(s, last, 0))).collect()
}

fn chen_params() -> Vec<Param> {
    vec![
        Param::text("path", "linear", &["linear", "sine", "random"], "path family"),
        Param::int("points", 64, "grid points per path"),
        Param::int("dim", 2, "path dimension"),
        Param::int("paths", 1, "number of paths"),
        Param::float("tol", 1e-12, "largest relative Chen defect"),
    ]
}

fn chen_check(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let points = cfg.usize("points")?.max(2);
    let dim = positive(cfg, "dim")?;
    let tol = cfg.float("tol")?;
    let mut rng = StdRng::seed_from_u64(cfg.seed());
    let mut rows = Vec::new();
    let mut violations = 0;
    for k in 0..positive(cfg, "paths")? {
        let grid = TimeGrid::uniform(points - 1, 1.0)?;
        let values: Vec<Vec<f64>> = match cfg.text("path")? {
            "linear" => grid.points().iter().map(|t| (1..=dim).map(|c| c as f64 * t).collect()).collect(),
            "sine" => grid
                .points()
                .iter()
                .map(|t| (1..=dim).map(|c| (2.0 * std::f64::consts::PI * c as f64 * t).sin()).collect())
                .collect(),
            _ => {
                let mut v = vec![vec![0.0; dim]];
                for _ in 1..points {
                    let prev = v.last().unwrap().clone();
                    v.push(prev.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect());
                }
                v
            }
        };
        let defect = RoughPath::canonical_lift(&SampledPath::new(grid, values)?, 2.5)?.chen_defect();
        if defect > tol {
            violations += 1;
        }
        rows.push(vec![k.to_string(), dim.to_string(), points.to_string(), fmt(defect)]);
    }
    let mut out = Outcome::default();
    write_rows(dir, "chen.csv", &["path", "dim", "points", "defect"], &rows, &mut out)?;
    out.checks.push(Check::at_most("violations", violations as f64, 0.0));
    Ok(out)
}

fn pvar_params() -> Vec<Param> {
    vec![Param::int("paths", 200, "number of random paths"), Param::int("max_points", 14, "largest path length (≤ 20)")]
}

/// Largest q-th power sum over every partition that keeps both end points.
pub fn pvar_by_enumeration(values: &[f64], q: f64) -> f64 {
    let q = std::hint::black_box(q);
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for mask in 0u32..(1u32 << (n - 2)) {
        let mut prev = 0;
        let mut sum = 0.0;
        for k in 1..n {
            if k == n - 1 || mask >> (k - 1) & 1 == 1 {
                sum += (values[k] - values[prev]).abs().powf(q);
                prev = k;
            }
        }
        best = best.max(sum);
    }
    best.powf(1.0 / q)
}

fn pvar_bruteforce(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let max_points = positive(cfg, "max_points")?;
    if max_points > 20 {
        return Err(CliError::Config("`max_points` above 20 makes enumeration too slow".into()));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed());
    let mut rows = Vec::new();
    let mut mismatches = 0;
    for k in 0..cfg.usize("paths")? {
        let n = rng.random_range(1..=max_points);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        for q in [1.0, 1.5, 2.0, 2.5] {
            let dp = p_variation_of_values(&values, q)?;
            let bf = pvar_by_enumeration(&values, q);
            if dp != bf {
                mismatches += 1;
            }
            rows.push(vec![k.to_string(), n.to_string(), fmt(q), fmt(dp), fmt(bf)]);
        }
    }
    let mut out = Outcome::default();
    write_rows(dir, "pvar.csv", &["path", "points", "q", "dynamic_program", "enumeration"], &rows, &mut out)?;
    out.checks.push(Check::at_most("mismatches", mismatches as f64, 0.0));
    Ok(out)
}

fn ito_params() -> Vec<Param> {
    vec![
        Param::int("samples", 10_000, "Brownian samples per level"),
        Param::int("base_cells", 16, "cells on the coarsest level"),
        Param::int("levels", 4, "dyadic levels"),
        Param::float("slope_min", 0.4, "lower end of the accepted rate"),
        Param::float("slope_max", 0.6, "upper end of the accepted rate"),
    ]
}

fn ito_consistency(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let samples = positive(cfg, "samples")?;
    let base = positive(cfg, "base_cells")?;
    let levels = cfg.usize("levels")?;
    if levels < 3 {
        return Err(CliError::Config("`levels` must be at least 3 for a rate fit".into()));
    }
    let mut table = ConvergenceTable::new("mesh", "l2_error");
    for l in 0..levels {
        let cells = base << l;
        let grid = TimeGrid::uniform(cells, 1.0)?;
        let ens = BrownianEnsemble::simulate(grid.clone(), samples, 1, cfg.seed().wrapping_add(l as u64))?;
        let drive = Drive::per_sample(RoughPath::ito_brownian_lift(&ens, &grid, 2.5)?)?;
        let y = Process::from_fn(cells + 1, samples, |i, s| ens.w(s, i, 0));
        let scp = StochasticControlledPath::with_defaults(y, Process::constant(cells + 1, samples, 1.0), drive)?;
        let res = rough_stochastic_integrate(&scp, &ens, &IntegralOptions::quiet())?;
        let mse = (0..samples)
            .map(|s| {
                let wt = ens.w(s, cells, 0);
                (res.terminal()[s] - (wt * wt - 1.0) / 2.0).powi(2)
            })
            .sum::<f64>()
            / samples as f64;
        table.push(1.0 / cells as f64, mse.sqrt());
    }
    let fit = table.fit()?;
    let mut out = Outcome::default();
    write_table(dir, "ito_rate.csv", &table, &mut out)?;
    write_fit(dir, "ito_fit.csv", &fit, &mut out)?;
    out.checks.push(Check::within("slope", fit.slope, cfg.float("slope_min")?, cfg.float("slope_max")?));
    Ok(out)
}

fn tree_constant_params() -> Vec<Param> {
    vec![
        Param::int("steps", 12, "steps of the fine tree (the coarse tree has half)"),
        Param::int("cases", 50, "random martingales and drifts"),
        Param::float("m", 2.0, "integrability exponent"),
        Param::float("spread_max", 2.0, "largest ratio of constants across refinement"),
    ]
}

fn tree_constants(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let steps = cfg.usize("steps")?;
    if !(2..=16).contains(&steps) {
        return Err(CliError::Config("`steps` must lie in 2..=16".into()));
    }
    let m = cfg.float("m")?;
    if m < 1.0 {
        return Err(CliError::Config("`m` must be at least 1".into()));
    }
    let trees = [BinomialTree::new(steps / 2, 1, 1.0)?, BinomialTree::new(steps, 1, 1.0)?];
    let mut rng = StdRng::seed_from_u64(cfg.seed());
    let mut rows = Vec::new();
    let mut spread: f64 = 1.0;
    let mut all_finite = true;
    for case in 0..cfg.usize("cases")? {
        let (a, b, c) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.5));
        let (fa, fb, fc) = (rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
        let mut mart = Vec::new();
        let mut drift = Vec::new();
        for tree in &trees {
            let xi = terminal_of(tree, |w| c * (a * w + b).sin() + w);
            let nt = tree.grid().len();
            let m_proc = Process::from_rows((0..nt).map(|i| tree.cond_exp(&xi, i)).collect());
            mart.push(martingale_variation_check(&m_proc, m).ratio);
            let g = tree.grid().clone();
            let f = Process::from_fn(nt, tree.n_samples(), |i, s| (fa * tree.w(s, i, 0) + fb * g.t(i)).sin() + fc);
            drift.push(drift_variation_check(&f, &g).max_ratio);
        }
        for (kind, pair) in [("martingale", &mart), ("drift", &drift)] {
            all_finite &= pair.iter().all(|r| r.is_finite() && *r > 0.0);
            spread = spread.max(pair[0] / pair[1]).max(pair[1] / pair[0]);
            rows.push(vec![case.to_string(), kind.to_string(), fmt(pair[0]), fmt(pair[1])]);
        }
    }
    let mut out = Outcome::default();
    write_rows(dir, "tree_constants.csv", &["case", "kind", "coarse_constant", "fine_constant"], &rows, &mut out)?;
    out.checks.push(Check::holds("finite_constants", all_finite));
    out.checks.push(Check::at_most("spread", spread, cfg.float("spread_max")?));
    Ok(out)
}

fn linear_options(cfg: &ExperimentConfig) -> Result<LinearOptions, CliError> {
    let eps = cfg.float("epsilon")?;
    Ok(LinearOptions { c: cfg.float("c")?, epsilon: (eps > 0.0).then_some(eps), ..Default::default() })
}

fn write_windows(dir: &Path, sol: &RoughBsdeSolution, out: &mut Outcome) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = sol
        .windows
        .iter()
        .map(|w| {
            vec![
                w.start.to_string(),
                w.end.to_string(),
                fmt(w.k),
                fmt(w.epsilon),
                w.criterion_met.to_string(),
                fmt(w.max_ratio),
                w.iterations.to_string(),
                fmt(w.residual),
            ]
        })
        .collect();
    write_rows(
        dir,
        "windows.csv",
        &["start", "end", "k", "epsilon", "criterion_met", "max_ratio", "iterations", "residual"],
        &rows,
        out,
    )
}

fn write_solution(dir: &Path, sol: &RoughBsdeSolution, grid: &TimeGrid, out: &mut Outcome) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(dir, "solution.csv", out)?);
    let mut header = vec!["sample".to_string(), "t".into(), "y".into()];
    header.extend((0..sol.z.len()).map(|c| format!("z{c}")));
    w.write_record(&header)?;
    let cells = grid.n_cells();
    for s in 0..sol.y.n_samples() {
        for i in 0..=cells {
            let mut r = vec![s.to_string(), fmt(grid.t(i)), fmt(sol.y.at(i, s))];
            r.extend(sol.z.iter().map(|z| if i < cells { fmt(z.at(i, s)) } else { String::new() }));
            w.write_record(&r)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn terminal_fn(name: &str) -> fn(f64) -> f64 {
    match name {
        "cos" => |w: f64| w.cos(),
        "square" => |w: f64| 0.25 * w * w,
        "bump" => |w: f64| 1.0 / (1.0 + w * w),
        _ => |w: f64| (w + 0.2).sin() + 0.3,
    }
}

fn duality_params() -> Vec<Param> {
    vec![
        Param::int("steps", 10, "tree branching steps"),
        Param::int("substeps", 40, "deterministic sub-steps per branching step"),
        Param::float("g", 0.4, "constant G"),
        Param::float("amp", 0.5, "amplitude of the sine drive"),
        Param::text("terminal", "sin", &["sin", "cos", "square"], "terminal value as a function of W_T"),
        Param::float("c", 2.0, "window-rule constant C"),
        Param::float("epsilon", 0.0, "window size override (0 uses the window rule)"),
        Param::float("tol", 1e-6, "largest accepted error"),
        Param::int("export_solution", 0, "write solution.csv when 1"),
    ]
}

fn linear_duality(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let tree = BinomialTree::with_substeps(positive(cfg, "steps")?, 1, 1.0, positive(cfg, "substeps")?)?;
    let grid = tree.grid().clone();
    let g = cfg.float("g")?;
    let rp = sine_lift(&grid, cfg.float("amp")?)?;
    let xi = terminal_of(&tree, terminal_fn(cfg.text("terminal")?));
    let problem = LinearRoughBsdeProblem::new(
        xi.clone(),
        Driver::zero(),
        EssBoundedControlledPath::constant(g, grid.len()),
        Drive::single(rp.clone()),
    )?;
    let sol = solve_linear_rough_bsde(&problem, &tree, &linear_options(cfg)?)?;
    let oracle = duality_oracle(&xi, g, &rp, &tree);
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            let e = sol.y.row(i).iter().zip(oracle.row(i)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            vec![i.to_string(), fmt(grid.t(i)), fmt(e)]
        })
        .collect();
    let err = sol.y.sub(&oracle).sup_abs();
    let mut out = Outcome::default();
    write_rows(dir, "duality_error.csv", &["node", "t", "max_abs_error"], &rows, &mut out)?;
    write_windows(dir, &sol, &mut out)?;
    if cfg.int("export_solution")? == 1 {
        write_solution(dir, &sol, &grid, &mut out)?;
    }
    out.checks.push(Check::at_most("max_abs_error", err, cfg.float("tol")?));
    out.checks.push(Check::holds("converged", sol.converged));
    Ok(out)
}

fn contraction_params() -> Vec<Param> {
    vec![
        Param::int("problems", 50, "random problems"),
        Param::int("steps", 4, "tree branching steps"),
        Param::int("substeps", 3, "deterministic sub-steps per branching step"),
        Param::float("c", 2.0, "window-rule constant C"),
        Param::float("epsilon", 0.0, "window size override (0 uses the window rule)"),
        Param::float("ratio_max", 0.55, "largest accepted Picard ratio"),
        Param::float("residual_max", 1e-10, "largest accepted node residual"),
    ]
}

fn linear_contraction(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let tree = BinomialTree::with_substeps(positive(cfg, "steps")?, 1, 1.0, positive(cfg, "substeps")?)?;
    let grid = tree.grid().clone();
    let nt = grid.len();
    let n = tree.n_samples();
    let opts = linear_options(cfg)?;
    let mut rng = StdRng::seed_from_u64(cfg.seed());
    let mut rows = Vec::new();
    let (mut ratio, mut residual) = (0.0f64, 0.0f64);
    let mut converged = true;
    for k in 0..cfg.usize("problems")? {
        let (g, amp, hc, l) =
            (rng.random_range(-0.5..0.5), rng.random_range(0.05..0.6), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
        let (sa, sb) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        let problem = LinearRoughBsdeProblem::new(
            terminal_of(&tree, |w| (sa * w + sb).sin()),
            Driver::new(l, move |_, _, _, y, z| l * (0.5 * y + 0.5 * z[0])),
            EssBoundedControlledPath::constant(g, nt),
            Drive::single(sine_lift(&grid, amp)?),
        )?
        .with_h(Process::deterministic(nt, n, |i| hc * (i as f64 / nt as f64)), Process::zeros(nt, n))?;
        let sol = solve_linear_rough_bsde(&problem, &tree, &opts)?;
        ratio = ratio.max(sol.max_ratio());
        residual = residual.max(sol.node_residual);
        converged &= sol.converged;
        rows.push(vec![
            k.to_string(),
            fmt(g),
            fmt(amp),
            fmt(l),
            sol.windows.len().to_string(),
            fmt(sol.max_ratio()),
            fmt(sol.node_residual),
        ]);
    }
    let mut out = Outcome::default();
    write_rows(
        dir,
        "contraction.csv",
        &["problem", "g", "amp", "lipschitz", "windows", "max_ratio", "node_residual"],
        &rows,
        &mut out,
    )?;
    out.checks.push(Check::at_most("max_ratio", ratio, cfg.float("ratio_max")?));
    out.checks.push(Check::at_most("node_residual", residual, cfg.float("residual_max")?));
    out.checks.push(Check::holds("converged", converged));
    Ok(out)
}

fn quadratic_options(cfg: &ExperimentConfig) -> Result<QuadraticOptions, CliError> {
    let c = cfg.float("c")?;
    let c = (c > 0.0).then_some(c);
    Ok(QuadraticOptions { c1: c, c2: c, ..Default::default() })
}

fn cole_hopf_params() -> Vec<Param> {
    vec![
        Param::int("steps", 10, "tree steps"),
        Param::float("l", 0.25, "coefficient L of f = Lz²"),
        Param::float("xi_scale", 0.05, "sup of the terminal value"),
        Param::float("c", 0.75, "regime constant (0 uses 4L + 4)"),
        Param::float("tol", 1e-6, "largest accepted error"),
        Param::float("ratio_max", 0.55, "largest accepted Picard ratio"),
    ]
}

fn cole_hopf(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let tree = BinomialTree::new(positive(cfg, "steps")?, 1, 1.0)?;
    let l = cfg.float("l")?;
    if l <= 0.0 {
        return Err(CliError::Config("`l` must be positive".into()));
    }
    let scale = cfg.float("xi_scale")?;
    let xi = terminal_of(&tree, |w| scale * (1.3 * w).sin());
    let sol = solve_quadratic_bsde_small(&xi, &Driver::quadratic_z(l), &tree, &quadratic_options(cfg)?)?;
    let oracle = cole_hopf_oracle(&xi, l, &tree);
    let grid = tree.grid();
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            let e = sol.y.row(i).iter().zip(oracle.row(i)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            vec![i.to_string(), fmt(grid.t(i)), fmt(e)]
        })
        .collect();
    let picard: Vec<Vec<String>> = sol
        .distances
        .iter()
        .enumerate()
        .map(|(k, d)| vec![(k + 1).to_string(), fmt(*d), k.checked_sub(1).map_or(String::new(), |j| fmt(sol.ratios.get(j).copied().unwrap_or(0.0)))])
        .collect();
    let mut out = Outcome::default();
    write_rows(dir, "cole_hopf_error.csv", &["node", "t", "max_abs_error"], &rows, &mut out)?;
    write_rows(dir, "picard.csv", &["iteration", "distance", "ratio"], &picard, &mut out)?;
    let ratio = sol.ratios.iter().fold(0.0f64, |m, &r| m.max(r));
    out.checks.push(Check::at_most("max_abs_error", sol.y.sub(&oracle).sup_abs(), cfg.float("tol")?));
    out.checks.push(Check::at_most("max_ratio", ratio, cfg.float("ratio_max")?));
    out.checks.push(Check::holds("converged", sol.converged));
    Ok(out)
}

fn flow_params() -> Vec<Param> {
    vec![
        Param::int("steps", 5, "tree branching steps"),
        Param::int("substeps", 16, "deterministic sub-steps per branching step"),
        Param::int("levels", 4, "dyadic approximation levels"),
        Param::int("base_pieces", 2, "pieces of the coarsest approximation"),
        Param::text("field", "sin-saturating", &["zero", "constant", "linear", "sin-saturating"], "drift vector field"),
        Param::float("field_param", 0.5, "parameter of the vector field"),
        Param::float("amp", 0.5, "amplitude of the sine drive"),
        Param::float("xi_scale", 0.04, "sup of the terminal value"),
        Param::float("l", 0.25, "coefficient L of f = Lz²"),
        Param::float("c", 0.75, "quadratic regime constant (0 uses 4L + 4)"),
    ]
}

fn flow_cauchy(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let tree = BinomialTree::with_substeps(positive(cfg, "steps")?, 1, 1.0, positive(cfg, "substeps")?)?;
    let grid = tree.grid().clone();
    let a = cfg.float("field_param")?;
    let field = match cfg.text("field")? {
        "zero" => VectorField::zero(),
        "constant" => VectorField::constant(a),
        "linear" => VectorField::linear(a),
        _ => VectorField::sin_saturating(a),
    };
    let amp = cfg.float("amp")?;
    let path = SampledPath::from_fn(grid, 1, |t| vec![amp * (2.0 * std::f64::consts::PI * t).sin()])?;
    let scale = cfg.float("xi_scale")?;
    let problem = NonlinearProblem {
        xi: terminal_of(&tree, |w| scale * w.sin()),
        driver: Driver::quadratic_z(cfg.float("l")?),
        field,
        path,
        p: 2.5,
    };
    let opts = FlowOptions {
        levels: positive(cfg, "levels")?,
        base_pieces: positive(cfg, "base_pieces")?,
        quadratic: quadratic_options(cfg)?,
        ..Default::default()
    };
    let sol = solve_nonlinear_rough_bsde(&problem, &tree, &opts)?;
    let rows: Vec<Vec<String>> = sol
        .levels
        .iter()
        .map(|r| {
            vec![
                r.pieces.to_string(),
                fmt(r.rough_pvar),
                fmt(r.flow_deviation),
                fmt(r.dphi_min),
                fmt(r.dphi_max),
                r.picard_iterations.to_string(),
                fmt(r.sup_y),
                fmt(r.bmo_z),
                r.extrapolations.to_string(),
            ]
        })
        .collect();
    let mut out = Outcome::default();
    write_table(dir, "cauchy.csv", &sol.cauchy, &mut out)?;
    write_rows(
        dir,
        "levels.csv",
        &["pieces", "rough_pvar", "flow_deviation", "dphi_min", "dphi_max", "picard_iterations", "sup_y", "bmo_z", "extrapolations"],
        &rows,
        &mut out,
    )?;
    let zero = sol.cauchy.ys().iter().all(|&d| d == 0.0);
    out.checks.push(Check::holds("cauchy_decreasing", sol.converged || zero));
    out.checks.push(Check::holds("approximations_bounded", sol.approximations_ok));
    Ok(out)
}

fn fk_params() -> Vec<Param> {
    vec![
        Param::int("steps", 8, "tree branching steps over the horizon"),
        Param::int("substeps", 10, "deterministic sub-steps per branching step"),
        Param::float("g", 0.3, "constant G"),
        Param::float("amp", 0.5, "amplitude of the sine drive"),
        Param::text("terminal", "sin", &["sin", "cos", "bump"], "terminal function l(x)"),
        Param::float("x_min", -1.0, "left end of the x grid"),
        Param::float("x_max", 1.0, "right end of the x grid"),
        Param::int("x_points", 9, "x grid points"),
        Param::float("tol", 2e-2, "largest accepted |u_FK − u_FD|"),
        Param::int("levels", 4, "dyadic drive levels in the continuity table"),
        Param::float("dx", 1e-2, "finite-difference space step"),
        Param::float("dt", 1e-3, "finite-difference time step"),
    ]
}

fn feynman_kac(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let terminal: fn(f64) -> f64 = match cfg.text("terminal")? {
        "cos" => |x: f64| x.cos(),
        "bump" => |x: f64| 1.0 / (1.0 + x * x),
        _ => |x: f64| x.sin(),
    };
    let problem = MarkovianProblem::heat(terminal, 1.0).with_constant_g(cfg.float("g")?);
    let drive = SmoothDrive::sine(cfg.float("amp")?);
    let np = cfg.usize("x_points")?.max(2);
    let (x0, x1) = (cfg.float("x_min")?, cfg.float("x_max")?);
    if x1 <= x0 {
        return Err(CliError::Config("`x_max` must exceed `x_min`".into()));
    }
    let xs: Vec<f64> = (0..np).map(|k| x0 + (x1 - x0) * k as f64 / (np - 1) as f64).collect();
    let opts = FeynmanKacOptions { steps: positive(cfg, "steps")?, substeps: positive(cfg, "substeps")?, ..Default::default() };
    let fdo = FdOptions { dx: cfg.float("dx")?, dt: cfg.float("dt")?, ..Default::default() };
    let fk = feynman_kac_u(&problem, &drive, &[0.0], &xs, &opts)?;
    let fd = fd_pde_oracle(&problem, &drive, &[0.0], &xs, &fdo)?;
    let gap = fk.sup_distance(&fd)?;
    let levels: Vec<(f64, SmoothDrive)> = (1..=cfg.usize("levels")?)
        .map(|k| Ok((k as f64, drive.dyadic(2 << k, 1.0)?)))
        .collect::<Result<_, roughbsde::Error>>()?;
    let table = continuity_in_x_audit(&problem, &levels, &drive, &[0.0], &xs, &opts)?;
    let mut out = Outcome::default();
    fk.write_csv(create(dir, "u_feynman_kac.csv", &mut out)?)?;
    fd.write_csv(create(dir, "u_finite_difference.csv", &mut out)?)?;
    write_table(dir, "continuity.csv", &table, &mut out)?;
    out.checks.push(Check::at_most("fk_fd_gap", gap, cfg.float("tol")?));
    out.checks.push(Check::holds("continuity_decreasing", table.is_strictly_decreasing()));
    Ok(out)
}

fn stability_params() -> Vec<Param> {
    vec![
        Param::int("steps", 6, "tree steps"),
        Param::float("perturbation", 0.1, "size of the first perturbation"),
        Param::int("levels", 4, "perturbations, halving each time"),
        Param::float("ratio_max", 0.2, "largest accepted last/first ratio"),
    ]
}

fn stability(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, CliError> {
    let steps = positive(cfg, "steps")?;
    let delta = cfg.float("perturbation")?;
    let levels = cfg.usize("levels")?;
    if levels < 2 {
        return Err(CliError::Config("`levels` must be at least 2".into()));
    }
    let ks: Vec<f64> = (0..levels).map(|l| (1u64 << l) as f64).collect();
    let ratio_max = cfg.float("ratio_max")?;
    let mut out = Outcome::default();

    let tree = BinomialTree::new(steps, 1, 1.0)?;
    let grid = tree.grid().clone();
    let nt = grid.len();
    let n = tree.n_samples();
    let y = Process::from_fn(nt, n, |i, s| tree.w(s, i, 0) * (i as f64).cos());
    let base = StochasticControlledPath::with_defaults(y.clone(), y.map(f64::sin), Drive::single(sine_lift(&grid, 0.5)?))?;
    let mut pairs = Vec::new();
    for k in &ks {
        let d = delta / k;
        let yk = Process::from_fn(nt, n, |i, s| y.at(i, s) + d * (1.0 + tree.w(s, i, 0)));
        let other = StochasticControlledPath::with_defaults(
            yk,
            y.map(f64::sin).map(|v| v + d),
            Drive::single(sine_lift(&grid, 0.5 * (1.0 + d))?),
        )?;
        pairs.push((base.clone(), other));
    }
    let report = stability_audit(&pairs, 2.0, &tree, &IntegralOptions::quiet())?;
    report.write_csv(create(dir, "integral_stability.csv", &mut out)?)?;
    let mut integral = ConvergenceTable::new("input_distance", "output_distance");
    for r in &report.rows {
        integral.push(r.input_distance, r.lhs);
    }

    let ltree = BinomialTree::with_substeps(4.min(steps), 1, 1.0, 3)?;
    let lgrid = ltree.grid().clone();
    let (lnt, ln) = (lgrid.len(), ltree.n_samples());
    let lbase = LinearRoughBsdeProblem::new(
        terminal_of(&ltree, |w| w.sin() + 0.3),
        Driver::new(0.5, |_, _, _, y, z| 0.25 * y + 0.25 * z[0]),
        EssBoundedControlledPath::constant(0.3, lnt),
        Drive::single(sine_lift(&lgrid, 0.4)?),
    )?;
    let pert = Process::deterministic(lnt, ln, |i| 1.0 + i as f64 / lnt as f64);
    let family = ks
        .iter()
        .map(|k| {
            LinearRoughBsdeProblem { xi: lbase.xi.iter().map(|v| v + delta / k).collect(), ..lbase.clone() }
                .with_h(pert.scale(delta / k), Process::zeros(lnt, ln))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let linear = continuity_audit(&lbase, &family, &ltree, &LinearOptions::default())?;
    write_table(dir, "linear_continuity.csv", &linear, &mut out)?;

    let qtree = BinomialTree::new(steps, 1, 1.0)?;
    let quad = QuadraticOptions { c1: Some(0.75), c2: Some(0.75), ..Default::default() };
    let xi = terminal_of(&qtree, |w| 0.02 * w.cos());
    let f = Driver::quadratic_z(0.25);
    let small = 0.2 * delta;
    let qfamily: Vec<(Vec<f64>, Driver, f64)> =
        ks.iter().map(|&k| (xi.iter().map(|v| v + small / k).collect(), f.clone(), small / k)).collect();
    let quadratic = bsde_continuity_audit((&xi, &f), &qfamily, &qtree, BsdeKind::Quadratic(quad))?;
    write_table(dir, "bsde_continuity.csv", &quadratic, &mut out)?;

    for (name, table) in [("integral", &integral), ("linear", &linear), ("quadratic", &quadratic)] {
        out.checks.push(Check::at_most(&format!("{name}_last_over_first"), table.last_over_first(), ratio_max));
    }
    Ok(out)
}
