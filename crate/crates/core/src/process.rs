//! Scalar processes sampled on a time grid, one value per (time, sample).

use crate::par;

/// Row-major `[time][sample]` storage of a real-valued process.
#[derive(Clone, Debug, PartialEq)]
pub struct Process {
    n_times: usize,
    n_samples: usize,
    data: Vec<f64>,
}

impl Process {
    pub fn zeros(n_times: usize, n_samples: usize) -> Self {
        Self { n_times, n_samples, data: vec![0.0; n_times * n_samples] }
    }

    pub fn constant(n_times: usize, n_samples: usize, c: f64) -> Self {
        Self { n_times, n_samples, data: vec![c; n_times * n_samples] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_times = rows.len();
        let n_samples = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_samples), "ragged rows");
        Self { n_times, n_samples, data: rows.concat() }
    }

    /// Builds `value(i, s)` for every time `i` and sample `s`.
    pub fn from_fn<F>(n_times: usize, n_samples: usize, value: F) -> Self
    where
        F: Fn(usize, usize) -> f64 + Sync + Send,
    {
        let mut data = vec![0.0; n_times * n_samples];
        par::for_each_chunk(&mut data, n_samples.max(1), |i, row| {
            for (s, v) in row.iter_mut().enumerate() {
                *v = value(i, s);
            }
        });
        Self { n_times, n_samples, data }
    }

    /// A deterministic time function repeated over samples.
    pub fn deterministic<F: Fn(usize) -> f64>(n_times: usize, n_samples: usize, value: F) -> Self {
        let mut data = Vec::with_capacity(n_times * n_samples);
        for i in 0..n_times {
            data.extend(std::iter::repeat_n(value(i), n_samples));
        }
        Self { n_times, n_samples, data }
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    #[inline]
    pub fn at(&self, i: usize, s: usize) -> f64 {
        self.data[i * self.n_samples + s]
    }

    #[inline]
    pub fn set(&mut self, i: usize, s: usize, v: f64) {
        self.data[i * self.n_samples + s] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn set_row(&mut self, i: usize, values: &[f64]) {
        self.row_mut(i).copy_from_slice(values);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn last_row(&self) -> &[f64] {
        self.row(self.n_times - 1)
    }

    /// Path of one sample across time.
    pub fn sample_path(&self, s: usize) -> Vec<f64> {
        (0..self.n_times).map(|i| self.at(i, s)).collect()
    }

    /// Rows `a..=b` as a new process.
    pub fn rows(&self, a: usize, b: usize) -> Self {
        let n = self.n_samples;
        Self { n_times: b - a + 1, n_samples: n, data: self.data[a * n..(b + 1) * n].to_vec() }
    }

    /// Overwrites rows starting at `a` with the rows of `src`.
    pub fn put_rows(&mut self, a: usize, src: &Self) {
        let n = self.n_samples;
        assert_eq!(n, src.n_samples, "sample count mismatch");
        self.data[a * n..(a + src.n_times) * n].copy_from_slice(&src.data);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.n_times, self.n_samples), (other.n_times, other.n_samples), "shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { data, ..*self }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn sup_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Empirical L^m norm `(mean |v|^m)^{1/m}`; `m = ∞` gives the max.
pub fn lm_norm(values: &[f64], m: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    if m.is_infinite() {
        return sup_norm(values);
    }
    if m == 2.0 {
        let s: f64 = values.iter().map(|v| v * v).sum();
        return (s / values.len() as f64).sqrt();
    }
    let s: f64 = values.iter().map(|v| v.abs().powf(m)).sum();
    (s / values.len() as f64).powf(1.0 / m)
}

/// Empirical L^m norm of the difference of two equally sized sample vectors.
pub fn lm_dist(a: &[f64], b: &[f64], m: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if m.is_infinite() {
        return a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(m)).sum();
    (s / a.len().max(1) as f64).powf(1.0 / m)
}

pub fn sup_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
