//! Principal-component projection of flattened windows, plus the CSV
//! exports used to eyeball real-versus-synthetic overlap.

use std::path::Path;

use ndarray::Array2;

use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::metrics::frechet::mean_and_cov;

const HISTOGRAM_BINS: usize = 20;

/// A fitted linear projection onto the leading principal components.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One component per row, `k x D`.
    pub components: Array2<f64>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits `k` components to row observations.
    pub fn fit(data: &Array2<f64>, k: usize) -> Result<Pca> {
        let (n, d) = data.dim();
        if n < 3 {
            return Err(Error::argument(format!(
                "PCA needs >= 3 observations, got {n}"
            )));
        }
        if k == 0 || k > d {
            return Err(Error::argument(format!(
                "PCA component count {k} must be in 1..={d}"
            )));
        }
        let (mean, cov) = mean_and_cov(data)?;
        let (eigenvalues, vectors) = sym_eigen(&cov)?;
        let mut components = Array2::zeros((k, d));
        for c in 0..k {
            for j in 0..d {
                components[[c, j]] = vectors[[j, c]];
            }
        }
        Ok(Pca {
            mean,
            components,
            eigenvalues: eigenvalues[..k].to_vec(),
        })
    }

    /// Projects row observations onto the fitted components, `n x k`.
    pub fn project(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        let (n, d) = data.dim();
        if d != self.mean.len() {
            return Err(Error::argument(format!(
                "PCA projection expects {} features, got {d}",
                self.mean.len()
            )));
        }
        let k = self.components.nrows();
        let mut out = Array2::zeros((n, k));
        for (i, row) in data.rows().into_iter().enumerate() {
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += (row[j] - self.mean[j]) * self.components[[c, j]];
                }
                out[[i, c]] = acc;
            }
        }
        Ok(out)
    }

    /// Maps projected coordinates back to the original feature space.
    pub fn reconstruct(&self, projected: &Array2<f64>) -> Result<Array2<f64>> {
        let (n, k) = projected.dim();
        if k != self.components.nrows() {
            return Err(Error::argument(format!(
                "PCA reconstruction expects {} coordinates, got {k}",
                self.components.nrows()
            )));
        }
        let d = self.mean.len();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let mut acc = self.mean[j];
                for c in 0..k {
                    acc += projected[[i, c]] * self.components[[c, j]];
                }
                out[[i, j]] = acc;
            }
        }
        Ok(out)
    }
}

/// Stacks each window into one row, `n x (tau * d)`.
pub fn flatten_windows(windows: &[TimeSeriesWindow]) -> Result<Array2<f64>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::argument("flatten_windows: empty window set"))?;
    let (tau, d) = first.values.dim();
    let mut out = Array2::zeros((windows.len(), tau * d));
    for (i, w) in windows.iter().enumerate() {
        if w.values.dim() != (tau, d) {
            return Err(Error::argument("flatten_windows: inconsistent shapes"));
        }
        for t in 0..tau {
            for j in 0..d {
                out[[i, t * d + j]] = w.values[[t, j]];
            }
        }
    }
    Ok(out)
}

/// Fits a two-component PCA on the union of both sets and writes the
/// projected coordinates with a `set` label per row.
pub fn export_pca_csv(
    real: &[TimeSeriesWindow],
    synth: &[TimeSeriesWindow],
    path: &Path,
) -> Result<()> {
    super::check_pair(real, synth)?;
    let flat_r = flatten_windows(real)?;
    let flat_s = flatten_windows(synth)?;
    let mut combined = Array2::zeros((flat_r.nrows() + flat_s.nrows(), flat_r.ncols()));
    for (i, row) in flat_r.rows().into_iter().enumerate() {
        combined.row_mut(i).assign(&row);
    }
    for (i, row) in flat_s.rows().into_iter().enumerate() {
        combined.row_mut(flat_r.nrows() + i).assign(&row);
    }
    let k = 2.min(combined.ncols());
    let pca = Pca::fit(&combined, k)?;
    let proj_r = pca.project(&flat_r)?;
    let proj_s = pca.project(&flat_s)?;

    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["set", "pc1", "pc2"])?;
    for (label, proj) in [("real", &proj_r), ("synthetic", &proj_s)] {
        for row in proj.rows() {
            let pc2 = if row.len() > 1 { row[1] } else { 0.0 };
            writer.write_record([label, &row[0].to_string(), &pc2.to_string()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Writes per-feature histograms of the time-pooled values, binned over
/// the combined range of both sets.
pub fn export_histograms_csv(
    real: &[TimeSeriesWindow],
    synth: &[TimeSeriesWindow],
    path: &Path,
) -> Result<()> {
    let (_, d) = super::check_pair(real, synth)?;
    let pooled_r = super::pool_time(real);
    let pooled_s = super::pool_time(synth);

    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "feature",
        "bin_start",
        "bin_end",
        "real_count",
        "synthetic_count",
    ])?;
    for j in 0..d {
        let col_r = pooled_r.column(j);
        let col_s = pooled_s.column(j);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in col_r.iter().chain(col_s.iter()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let bin_of = |v: f64| -> usize {
            let b = ((v - lo) / width) as usize;
            b.min(HISTOGRAM_BINS - 1)
        };
        let mut counts_r = [0usize; HISTOGRAM_BINS];
        let mut counts_s = [0usize; HISTOGRAM_BINS];
        for &v in col_r.iter() {
            counts_r[bin_of(v)] += 1;
        }
        for &v in col_s.iter() {
            counts_s[bin_of(v)] += 1;
        }
        for b in 0..HISTOGRAM_BINS {
            let start = lo + b as f64 * width;
            writer.write_record([
                &j.to_string(),
                &start.to_string(),
                &(start + width).to_string(),
                &counts_r[b].to_string(),
                &counts_s[b].to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}
