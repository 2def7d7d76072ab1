//! Fréchet distance between Gaussian fits of two feature sets, and the
//! context distance that applies it to learned window encodings.

use ndarray::Array2;

use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::linalg::{sqrtm_psd, trace};
use crate::metrics::encoder::FeatureEncoder;

/// Regularizer added to both covariance diagonals before the matrix
/// square root; small sample sets make the estimates near-singular.
const COV_REG: f64 = 1e-6;

/// Column means and the sample covariance of row observations.
pub fn mean_and_cov(x: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::argument("covariance needs >= 2 observations"));
    }
    let nf = n as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / nf).collect();
    let mut cov = Array2::zeros((d, d));
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[[i, j]] += di * (row[j] - mean[j]);
            }
        }
    }
    cov /= nf - 1.0;
    for i in 0..d {
        for j in 0..i {
            cov[[i, j]] = cov[[j, i]];
        }
    }
    Ok((mean, cov))
}

/// `||mu_r - mu_s||^2 + tr(C_r + C_s - 2 (C_r C_s)^{1/2})`, the distance
/// between the Gaussians `N(mu_r, C_r)` and `N(mu_s, C_s)`. The cross
/// term is computed through the symmetric product
/// `sqrt(C_r) C_s sqrt(C_r)`, which has the same eigenvalues.
pub fn frechet_distance(
    mu_r: &[f64],
    cov_r: &Array2<f64>,
    mu_s: &[f64],
    cov_s: &Array2<f64>,
) -> Result<f64> {
    let d = mu_r.len();
    if mu_s.len() != d || cov_r.dim() != (d, d) || cov_s.dim() != (d, d) {
        return Err(Error::argument("frechet_distance: dimension mismatch"));
    }
    let reg = Array2::<f64>::eye(d) * COV_REG;
    let cr = cov_r + &reg;
    let cs = cov_s + &reg;
    let root_r = sqrtm_psd(&cr)?;
    let cross = root_r.dot(&cs).dot(&root_r);
    let cross_root = sqrtm_psd(&cross)?;
    let mean_term: f64 = mu_r.iter().zip(mu_s).map(|(a, b)| (a - b) * (a - b)).sum();
    let dist = mean_term + trace(&cr) + trace(&cs) - 2.0 * trace(&cross_root);
    Ok(dist.max(0.0))
}

/// Fréchet distance between the encoded representations of the two
/// window sets.
pub fn context_fid(
    real: &[TimeSeriesWindow],
    synth: &[TimeSeriesWindow],
    encoder: &FeatureEncoder,
) -> Result<f64> {
    super::check_pair(real, synth)?;
    let reps_r = encoder.encode_set(real)?;
    let reps_s = encoder.encode_set(synth)?;
    let (mu_r, cov_r) = mean_and_cov(&reps_r)?;
    let (mu_s, cov_s) = mean_and_cov(&reps_s)?;
    frechet_distance(&mu_r, &cov_r, &mu_s, &cov_s)
}
