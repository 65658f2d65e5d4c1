//! Convergence tables and log-log rate fits with a 95% band.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rough_path::fmt_f64;

/// Rows of (input size, output size), e.g. (mesh, error) or (input distance, output distance).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceTable {
    pub x_label: String,
    pub y_label: String,
    pub rows: Vec<(f64, f64)>,
}

impl ConvergenceTable {
    pub fn new(x_label: &str, y_label: &str) -> Self {
        Self { x_label: x_label.into(), y_label: y_label.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, x: f64, y: f64) {
        self.rows.push((x, y));
    }

    pub fn ys(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.1).collect()
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].1 < w[0].1)
    }

    /// Last output over first output (∞ when the first is zero and the last is not).
    pub fn last_over_first(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) if a.1 > 0.0 => b.1 / a.1,
            (Some(_), Some(b)) if b.1 == 0.0 => 0.0,
            _ => f64::INFINITY,
        }
    }

    pub fn fit(&self) -> Result<RateFit> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self.rows.iter().copied().unzip();
        fit_rate(&xs, &ys)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([&self.x_label, &self.y_label])?;
        for &(x, y) in &self.rows {
            wtr.write_record([fmt_f64(x), fmt_f64(y)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Least-squares fit of log y = intercept + slope · log x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% Student-t band for the slope.
    pub slope_low: f64,
    pub slope_high: f64,
    pub n: usize,
}

/// Needs at least three rows, all with positive x and y.
pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::Precondition(format!("rate fit got {} inputs and {} outputs", xs.len(), ys.len())));
    }
    if let Some((x, y)) = xs.iter().zip(ys).find(|(x, y)| !(**x > 0.0 && **y > 0.0)) {
        return Err(Error::Precondition(format!("rate fit needs positive rows, got ({x:e}, {y:e})")));
    }
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len();
    if n < 3 {
        return Err(Error::Precondition(format!("rate fit needs 3 rows, got {n}")));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("rate fit needs distinct x values".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0).map_err(|e| Error::Precondition(e.to_string()))?.inverse_cdf(0.975);
    Ok(RateFit { slope, intercept, slope_low: slope - t * se, slope_high: slope + t * se, n })
}
