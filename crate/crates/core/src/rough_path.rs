//! Two-step rough paths on a time grid: level-1 samples, level-2 cell
//! increments, Chen reconstruction, lifts, p-variation and the rough distance.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::models::{BrownianEnsemble, ProbabilityModel};

/// Default number of grid points fed to the variation DP per window.
pub const DEFAULT_COARSE_CAP: usize = 64;

/// Chen's relation is checked to this relative tolerance.
pub const CHEN_TOL: f64 = 1e-12;

/// Strictly increasing partition of `[0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least 2 points".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first point must be 0, got {}", points[0])));
        }
        if let Some(w) = points.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid(format!("not strictly increasing at {} -> {}", w[0], w[1])));
        }
        if !points.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite point".into()));
        }
        Ok(Self { points })
    }

    /// `n_cells` equal cells on `[0, horizon]`.
    pub fn uniform(n_cells: usize, horizon: f64) -> Result<Self> {
        if n_cells == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("uniform grid with {n_cells} cells on [0, {horizon}]")));
        }
        let mut pts: Vec<f64> = (0..=n_cells).map(|i| horizon * i as f64 / n_cells as f64).collect();
        pts[n_cells] = horizon;
        Self::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    pub fn mesh(&self) -> f64 {
        self.points.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Index of a grid time, matching within a tiny relative tolerance.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * self.horizon().max(1.0);
        let k = self.points.partition_point(|&p| p < t - tol);
        if k < self.points.len() && (self.points[k] - t).abs() <= tol {
            Ok(k)
        } else {
            Err(Error::OffGrid(t))
        }
    }

    /// Grid made of the given point indices (must start at 0 and end at the last point).
    pub fn subgrid(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Points `a..=b` shifted to start at 0.
    pub fn window(&self, a: usize, b: usize) -> Self {
        let t0 = self.points[a];
        Self { points: self.points[a..=b].iter().map(|t| t - t0).collect() }
    }

    /// Indices of `coarse` inside `self`; errors if some coarse point is missing.
    pub fn embed(&self, coarse: &TimeGrid) -> Result<Vec<usize>> {
        coarse.points.iter().map(|&t| self.index_of(t)).collect()
    }

    /// Each cell split into `factor` equal sub-cells.
    pub fn refine(&self, factor: usize) -> Self {
        let mut pts = Vec::with_capacity(self.n_cells() * factor + 1);
        for w in self.points.windows(2) {
            for k in 0..factor {
                pts.push(w[0] + (w[1] - w[0]) * k as f64 / factor as f64);
            }
        }
        pts.push(self.horizon());
        Self { points: pts }
    }
}

/// Evenly spread grid indices in `[a, b]` (both included), at most `cap` of them.
pub fn capped_indices(a: usize, b: usize, cap: usize) -> Vec<usize> {
    let n = b - a + 1;
    if n <= cap.max(2) {
        return (a..=b).collect();
    }
    let cap = cap.max(2);
    let mut out: Vec<usize> = (0..cap).map(|k| a + (k * (n - 1) + (cap - 1) / 2) / (cap - 1)).collect();
    out[0] = a;
    out[cap - 1] = b;
    out.dedup();
    out
}

/// Vector-valued samples of a path on a grid, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl SampledPath {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} values for {} grid points", values.len(), grid.len())));
        }
        let dim = values[0].len();
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(Error::Precondition("path values must share a positive dimension".into()));
        }
        Ok(Self { grid, dim, values: values.concat() })
    }

    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, values.into_iter().map(|v| vec![v]).collect())
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        Self::new(grid, values).and_then(|p| {
            if p.dim == dim {
                Ok(p)
            } else {
                Err(Error::Precondition(format!("expected dimension {dim}, got {}", p.dim)))
            }
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// First component at index `i`; the common case for scalar drives.
    pub fn x(&self, i: usize) -> f64 {
        self.values[i * self.dim]
    }

    pub fn increment(&self, i: usize, j: usize) -> Vec<f64> {
        self.value(j).iter().zip(self.value(i)).map(|(b, a)| b - a).collect()
    }

    /// Same path shifted so that its first value is 0.
    pub fn normalized(&self) -> Self {
        let x0 = self.value(0).to_vec();
        let values = self.values.chunks(self.dim).flat_map(|v| v.iter().zip(&x0).map(|(a, b)| a - b)).collect();
        Self { grid: self.grid.clone(), dim: self.dim, values }
    }

    /// Piecewise-linear interpolation at time `t` inside `[0, T]`.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let pts = self.grid.points();
        if t <= 0.0 {
            return self.value(0).to_vec();
        }
        if t >= self.grid.horizon() {
            return self.value(pts.len() - 1).to_vec();
        }
        let k = pts.partition_point(|&p| p <= t) - 1;
        let w = (t - pts[k]) / (pts[k + 1] - pts[k]);
        self.value(k).iter().zip(self.value(k + 1)).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// Piecewise-linear interpolant through the values at `knots`, resampled on this grid.
    pub fn interpolant_through(&self, knots: &[usize]) -> Result<Self> {
        let coarse = SampledPath::new(
            self.grid.subgrid(knots)?,
            knots.iter().map(|&k| self.value(k).to_vec()).collect(),
        )?;
        let values = self.grid.points().iter().map(|&t| coarse.interpolate(t)).collect();
        Self::new(self.grid.clone(), values)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x_{k}")));
        wtr.write_record(&header)?;
        for i in 0..self.grid.len() {
            let mut rec = vec![fmt_f64(self.grid.t(i))];
            rec.extend(self.value(i).iter().map(|&v| fmt_f64(v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut ts = Vec::new();
        let mut vals = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let nums = parse_record(&rec)?;
            if nums.len() < 2 {
                return Err(Error::Io("path row needs t and at least one component".into()));
            }
            ts.push(nums[0]);
            vals.push(nums[1..].to_vec());
        }
        Self::new(TimeGrid::new(ts)?, vals)
    }
}

/// Level-1 path (with X₀ = 0) and one e×e level-2 matrix per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RoughPath {
    path: SampledPath,
    cells: Vec<f64>,
    p: f64,
}

impl RoughPath {
    /// `cells[i]` is the row-major e×e matrix 𝕏 over cell i.
    pub fn new(path: SampledPath, cells: Vec<Vec<f64>>, p: f64) -> Result<Self> {
        check_p(p)?;
        let e = path.dim();
        if cells.len() != path.grid().n_cells() {
            return Err(Error::GridMismatch(format!("{} level-2 cells for {} grid cells", cells.len(), path.grid().n_cells())));
        }
        if cells.iter().any(|c| c.len() != e * e) {
            return Err(Error::Precondition(format!("level-2 cells must have {} entries", e * e)));
        }
        Ok(Self { path: path.normalized(), cells: cells.concat(), p })
    }

    /// Lift of the piecewise-linear interpolant: 𝕏 = ½ δX⊗δX on each cell.
    pub fn canonical_lift(path: &SampledPath, p: f64) -> Result<Self> {
        check_p(p)?;
        let e = path.dim();
        let n = path.grid().n_cells();
        let mut cells = vec![0.0; n * e * e];
        for i in 0..n {
            let d = path.increment(i, i + 1);
            let c = &mut cells[i * e * e..(i + 1) * e * e];
            for a in 0..e {
                for b in 0..e {
                    c[a * e + b] = 0.5 * d[a] * d[b];
                }
            }
        }
        Ok(Self { path: path.normalized(), cells, p })
    }

    /// Itô lift of every ensemble sample onto `target`, by left-point sums on
    /// the simulation grid inside each target cell.
    pub fn ito_brownian_lift(ens: &BrownianEnsemble, target: &TimeGrid, p: f64) -> Result<Vec<Self>> {
        check_p(p)?;
        let idx = ens.grid().embed(target)?;
        let d = ens.dim();
        let lifts = crate::par::map_indexed(ens.n_samples(), |s| {
            let mut cells = vec![0.0; target.n_cells() * d * d];
            for (c, w) in idx.windows(2).enumerate() {
                let cell = &mut cells[c * d * d..(c + 1) * d * d];
                let mut acc = vec![0.0; d];
                for k in w[0]..w[1] {
                    for a in 0..d {
                        for b in 0..d {
                            cell[a * d + b] += acc[a] * ens.dw(s, k, b);
                        }
                    }
                    for (a, v) in acc.iter_mut().enumerate() {
                        *v += ens.dw(s, k, a);
                    }
                }
            }
            let values = idx.iter().map(|&k| (0..d).map(|a| ens.w(s, k, a)).collect()).collect();
            let path = SampledPath::new(target.clone(), values).expect("grid sizes agree");
            Self { path: path.normalized(), cells, p }
        });
        Ok(lifts)
    }

    pub fn path(&self) -> &SampledPath {
        &self.path
    }

    pub fn grid(&self) -> &TimeGrid {
        self.path.grid()
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        let e2 = self.dim() * self.dim();
        &self.cells[i * e2..(i + 1) * e2]
    }

    /// Scalar level-1 value at index i (first component).
    pub fn x(&self, i: usize) -> f64 {
        self.path.x(i)
    }

    /// Scalar level-2 value over `[t_i, t_j]` (first entry).
    pub fn xx(&self, i: usize, j: usize) -> f64 {
        if self.dim() == 1 {
            let mut acc = 0.0;
            let xi = self.x(i);
            for k in i..j {
                acc += self.cells[k] + (self.x(k) - xi) * (self.x(k + 1) - self.x(k));
            }
            acc
        } else {
            self.reconstruct_idx(i, j)[0]
        }
    }

    /// 𝕏_{s,t} for grid times `s ≤ t`, composed from the cells by Chen's relation.
    pub fn reconstruct_level2(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        if s > t {
            return Err(Error::Reversed { s, t });
        }
        let i = self.grid().index_of(s)?;
        let j = self.grid().index_of(t)?;
        Ok(self.reconstruct_idx(i, j))
    }

    /// 𝕏 over `[t_i, t_j]` by index, `i ≤ j`.
    pub fn reconstruct_idx(&self, i: usize, j: usize) -> Vec<f64> {
        let e = self.dim();
        let mut out = vec![0.0; e * e];
        let xi = self.path.value(i).to_vec();
        for k in i..j {
            let a = self.path.value(k);
            let b = self.path.value(k + 1);
            let c = self.cell(k);
            for r in 0..e {
                let left = a[r] - xi[r];
                for q in 0..e {
                    out[r * e + q] += c[r * e + q] + left * (b[q] - a[q]);
                }
            }
        }
        out
    }

    /// Largest relative Chen defect over all grid triples `i ≤ u ≤ j`, relative
    /// to the magnitude of the terms (including the squared 1-variation on `[i, j]`).
    pub fn chen_defect(&self) -> f64 {
        let n = self.grid().len();
        let e = self.dim();
        let mut worst: f64 = 0.0;
        let all: Vec<Vec<Vec<f64>>> = (0..n).map(|i| self.level2_row(i)).collect();
        let mut one_var = vec![0.0; n];
        for k in 1..n {
            one_var[k] = one_var[k - 1] + euclid(&self.path.increment(k - 1, k));
        }
        for i in 0..n {
            for u in i..n {
                let dx_iu = self.path.increment(i, u);
                for j in u..n {
                    let dx_uj = self.path.increment(u, j);
                    let (a, b, c) = (&all[i][j - i], &all[i][u - i], &all[u][j - u]);
                    for r in 0..e {
                        for q in 0..e {
                            let k = r * e + q;
                            let outer = dx_iu[r] * dx_uj[q];
                            let lhs = a[k] - b[k] - c[k];
                            let var = one_var[j] - one_var[i];
                            let scale = a[k].abs() + b[k].abs() + c[k].abs() + outer.abs() + var * var;
                            if scale > 0.0 {
                                worst = worst.max((lhs - outer).abs() / scale);
                            }
                        }
                    }
                }
            }
        }
        worst
    }

    /// 𝕏_{t_i, t_j} for all j ≥ i, built incrementally.
    pub fn level2_row(&self, i: usize) -> Vec<Vec<f64>> {
        let e = self.dim();
        let n = self.grid().len();
        let xi = self.path.value(i).to_vec();
        let mut acc = vec![0.0; e * e];
        let mut out = Vec::with_capacity(n - i);
        out.push(acc.clone());
        for k in i..n - 1 {
            let a = self.path.value(k);
            let b = self.path.value(k + 1);
            let c = self.cell(k);
            for r in 0..e {
                for q in 0..e {
                    acc[r * e + q] += c[r * e + q] + (a[r] - xi[r]) * (b[q] - a[q]);
                }
            }
            out.push(acc.clone());
        }
        out
    }

    /// |δX|_{p-var} over `[t_a, t_b]`.
    pub fn level1_pvar(&self, a: usize, b: usize) -> f64 {
        let idx = capped_indices(a, b, DEFAULT_COARSE_CAP);
        p_variation_on(&idx, self.p, |i, j| euclid(&self.path.increment(i, j))).expect("p ≥ 2")
    }

    /// |𝕏|_{p/2-var} over `[t_a, t_b]`.
    pub fn level2_pvar(&self, a: usize, b: usize) -> f64 {
        let idx = capped_indices(a, b, DEFAULT_COARSE_CAP);
        let rows: Vec<Vec<Vec<f64>>> = idx.iter().map(|&i| self.level2_row(i)).collect();
        let pos = |i: usize| idx.binary_search(&i).unwrap();
        p_variation_on(&idx, self.p / 2.0, |i, j| euclid(&rows[pos(i)][j - i])).expect("p/2 ≥ 1")
    }

    /// |𝐗|_{p-var} over `[t_a, t_b]` split into its two levels.
    pub fn metrics_window(&self, a: usize, b: usize) -> RoughPathMetrics {
        let p_var_level1 = self.level1_pvar(a, b);
        let p2_var_level2 = self.level2_pvar(a, b);
        RoughPathMetrics { p_var_level1, p2_var_level2, total: p_var_level1 + p2_var_level2 }
    }

    pub fn metrics(&self) -> RoughPathMetrics {
        self.metrics_window(0, self.grid().n_cells())
    }

    /// Pointwise difference (level 1 and cells), used for the rough distance.
    fn difference(&self, other: &Self) -> Result<Self> {
        if self.grid() != other.grid() {
            return Err(Error::GridMismatch("rough paths live on different grids".into()));
        }
        if self.dim() != other.dim() || self.p != other.p {
            return Err(Error::GridMismatch("rough paths differ in dimension or p".into()));
        }
        let values = self.path.values.iter().zip(&other.path.values).map(|(a, b)| a - b).collect();
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| a - b).collect();
        let path = SampledPath { grid: self.grid().clone(), dim: self.dim(), values };
        Ok(Self { path, cells, p: self.p })
    }

    /// Sub-path on `[t_a, t_b]`, renormalized to start at 0 on a shifted grid.
    pub fn window(&self, a: usize, b: usize) -> Self {
        let grid = self.grid().window(a, b);
        let e = self.dim();
        let values = self.path.values[a * e..(b + 1) * e].to_vec();
        let path = SampledPath { grid, dim: e, values }.normalized();
        Self { path, cells: self.cells[a * e * e..b * e * e].to_vec(), p: self.p }
    }

    pub fn write_cells_csv<W: Write>(&self, w: W) -> Result<()> {
        let e = self.dim();
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t_i".to_string(), "t_ip1".to_string()];
        for r in 1..=e {
            for q in 1..=e {
                header.push(format!("xx_{r}{q}"));
            }
        }
        wtr.write_record(&header)?;
        for i in 0..self.grid().n_cells() {
            let mut rec = vec![fmt_f64(self.grid().t(i)), fmt_f64(self.grid().t(i + 1))];
            rec.extend(self.cell(i).iter().map(|&v| fmt_f64(v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Rebuilds a rough path from a path CSV and a cells CSV.
    pub fn read_csv<R1: Read, R2: Read>(path_csv: R1, cells_csv: R2, p: f64) -> Result<Self> {
        let path = SampledPath::read_csv(path_csv)?;
        let mut rdr = csv::Reader::from_reader(cells_csv);
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let nums = parse_record(&rec?)?;
            if nums.len() < 2 || path.grid().index_of(nums[0])? != i || path.grid().index_of(nums[1])? != i + 1 {
                return Err(Error::GridMismatch(format!("cell row {i} does not match the path grid")));
            }
            cells.push(nums[2..].to_vec());
        }
        Self::new(path, cells, p)
    }
}

/// |δX|_{p-var}, |𝕏|_{p/2-var} and their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoughPathMetrics {
    pub p_var_level1: f64,
    pub p2_var_level2: f64,
    pub total: f64,
}

/// ρ_{p-var}(a, b) = |δ(X − X̄)|_{p-var} + |𝕏 − 𝕏̄|_{p/2-var}.
pub fn rough_distance(a: &RoughPath, b: &RoughPath) -> Result<f64> {
    Ok(a.difference(b)?.metrics().total)
}

fn check_p(p: f64) -> Result<()> {
    if (2.0..3.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Precondition(format!("p must lie in [2, 3), got {p}")))
    }
}

pub(crate) fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Grid-restricted q-variation of a two-parameter quantity over `[a, b]`:
/// `V[j] = max_{i<j} (V[i] + |A_{t_i,t_j}|^q)`, answer `V[b]^{1/q}`.
pub fn p_variation<F: Fn(usize, usize) -> f64>(a: usize, b: usize, q: f64, dist: F) -> Result<f64> {
    let idx: Vec<usize> = (a..=b).collect();
    p_variation_on(&idx, q, dist)
}

/// Same DP restricted to breakpoints in `indices` (sorted, first and last are the window ends).
pub fn p_variation_on<F: Fn(usize, usize) -> f64>(indices: &[usize], q: f64, dist: F) -> Result<f64> {
    if !(q >= 1.0) {
        return Err(Error::Exponent(q));
    }
    let n = indices.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut best = vec![0.0f64; n];
    for j in 1..n {
        let mut m = f64::NEG_INFINITY;
        for i in 0..j {
            let v = best[i] + dist(indices[i], indices[j]).powf(q);
            if v > m {
                m = v;
            }
        }
        best[j] = m;
    }
    Ok(best[n - 1].powf(1.0 / q))
}

/// q-variation of a scalar sample sequence with `|x_j − x_i|` increments.
pub fn p_variation_of_values(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Ok(0.0);
    }
    p_variation(0, values.len() - 1, q, |i, j| (values[j] - values[i]).abs())
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn parse_record(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Io(format!("bad number {f:?}: {e}"))))
        .collect()
}
