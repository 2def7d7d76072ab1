//! Dataset ingestion, normalization, windowing, and batch scheduling.
//!
//! Real datasets enter as CSV files and are cut into fixed-length windows
//! after per-feature min-max normalization to `[0, 1]`. The synthetic sine
//! benchmark is generated directly in the normalized range. All randomness
//! is seeded and reproducible; generation and loading are pure enough to
//! parallelize per sample or per file.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{self, Domain};

/// A raw multivariate series as loaded from disk: rows are time steps,
/// columns are features.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub feature_names: Vec<String>,
    pub source_id: String,
}

impl RawSeries {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// One training sample: a fixed-shape window with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub values: Array2<f64>,
    pub window_index: usize,
}

impl TimeSeriesWindow {
    pub fn steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-feature min/max of the raw series the windows were cut from.
///
/// Features with `max == min` are flagged constant; their normalized value
/// is pinned to 0.5 and denormalization maps back to the constant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Identity stats for data that is already in `[0, 1]`.
    pub fn identity(dim: usize) -> Self {
        NormalizationStats {
            min: vec![0.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn is_constant(&self, feature: usize) -> bool {
        self.max[feature] == self.min[feature]
    }
}

// ---------------------------------------------------------------------------
// Synthetic sine benchmark
// ---------------------------------------------------------------------------

/// Value of one sine feature at integer step `i`.
///
/// Frequency is in cycles per `length / (2pi)` units; the raw sine in
/// `[-1, 1]` is rescaled to `[0, 1]`.
fn sine_value(freq: f64, phase: f64, step: usize, length: usize) -> f64 {
    let raw = (2.0 * std::f64::consts::PI * freq * step as f64 / length as f64 + phase).sin();
    (raw + 1.0) / 2.0
}

/// Generate the synthetic sine benchmark: per sample and feature a random
/// frequency `U(0,1)` and phase `U(-pi,pi)`, evaluated over `length` steps.
///
/// Deterministic for a fixed seed; samples are generated on independent
/// derived streams so the output does not depend on scheduling.
pub fn generate_sines(
    n_samples: usize,
    length: usize,
    n_features: usize,
    seed: u64,
) -> Result<Vec<TimeSeriesWindow>> {
    if n_samples < 1 {
        return Err(Error::argument("generate_sines: n_samples must be >= 1"));
    }
    if length < 2 {
        return Err(Error::argument("generate_sines: length must be >= 2"));
    }
    if n_features < 1 {
        return Err(Error::argument("generate_sines: n_features must be >= 1"));
    }
    let windows = parallel::map_indexed(n_samples, |s| {
        let mut rng = rng::derive(seed, Domain::Sines, s as u64);
        let mut values = Array2::zeros((length, n_features));
        for j in 0..n_features {
            let freq: f64 = rng.gen::<f64>();
            let phase: f64 = rng.gen::<f64>() * 2.0 * std::f64::consts::PI - std::f64::consts::PI;
            for i in 0..length {
                values[[i, j]] = sine_value(freq, phase, i, length);
            }
        }
        TimeSeriesWindow {
            values,
            window_index: s,
        }
    });
    Ok(windows)
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

/// Load a rectangular numeric CSV into a [`RawSeries`].
///
/// Rejects ragged rows, non-numeric cells, NaN/Inf values, and empty files,
/// reporting the offending 1-based row/column.
pub fn load_csv(path: &Path, has_header: bool) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;

    let feature_names: Vec<String> = if has_header {
        reader.headers()?.iter().map(|s| s.to_string()).collect()
    } else {
        Vec::new()
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    let header_offset = if has_header { 1 } else { 0 };
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let file_row = r + 1 + header_offset;
        if rows.is_empty() {
            width = record.len();
            if width == 0 {
                return Err(Error::format_at("empty row", file_row, 1));
            }
        } else if record.len() != width {
            return Err(Error::format_at(
                format!(
                    "ragged row: expected {} columns, found {}",
                    width,
                    record.len()
                ),
                file_row,
                record.len().min(width) + 1,
            ));
        }
        let mut row = Vec::with_capacity(width);
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::format_at(format!("non-numeric cell {cell:?}"), file_row, c + 1)
            })?;
            if !v.is_finite() {
                return Err(Error::format_at(
                    format!("non-finite value {cell:?}"),
                    file_row,
                    c + 1,
                ));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(format!("{}: no data rows", path.display())));
    }

    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, width), flat)
        .map_err(|e| Error::format(format!("shape error: {e}")))?;
    let feature_names = if feature_names.is_empty() {
        (0..width).map(|j| format!("f{j}")).collect()
    } else {
        feature_names
    };
    Ok(RawSeries {
        values,
        feature_names,
        source_id: path.display().to_string(),
    })
}

// ---------------------------------------------------------------------------
// Windowing and normalization
// ---------------------------------------------------------------------------

/// Number of windows produced by a sliding cut.
pub fn window_count(rows: usize, window_len: usize, stride: usize) -> usize {
    (rows - window_len) / stride + 1
}

/// Compute global per-feature min-max stats, normalize to `[0, 1]`, and cut
/// windows at offsets `0, stride, 2*stride, ...`.
pub fn window_and_normalize(
    series: &RawSeries,
    window_len: usize,
    stride: usize,
) -> Result<(Vec<TimeSeriesWindow>, NormalizationStats)> {
    if stride < 1 {
        return Err(Error::argument("window_and_normalize: stride must be >= 1"));
    }
    if window_len < 1 {
        return Err(Error::argument(
            "window_and_normalize: window_len must be >= 1",
        ));
    }
    let rows = series.rows();
    if window_len > rows {
        return Err(Error::argument(format!(
            "window_and_normalize: window_len {} exceeds {} rows",
            window_len, rows
        )));
    }
    let d = series.dim();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in series.values.rows() {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    let stats = NormalizationStats { min, max };

    let count = window_count(rows, window_len, stride);
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut values = Array2::zeros((window_len, d));
        for i in 0..window_len {
            for j in 0..d {
                let raw = series.values[[start + i, j]];
                values[[i, j]] = if stats.is_constant(j) {
                    0.5
                } else {
                    (raw - stats.min[j]) / (stats.max[j] - stats.min[j])
                };
            }
        }
        windows.push(TimeSeriesWindow {
            values,
            window_index: w,
        });
    }
    Ok((windows, stats))
}

/// Invert the min-max map, recovering values in the raw series' units.
pub fn denormalize(window: &TimeSeriesWindow, stats: &NormalizationStats) -> Result<Array2<f64>> {
    let d = window.dim();
    if d != stats.dim() {
        return Err(Error::argument(format!(
            "denormalize: window has {} features, stats have {}",
            d,
            stats.dim()
        )));
    }
    let mut out = window.values.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if stats.is_constant(j) {
                stats.min[j]
            } else {
                stats.min[j] + *v * (stats.max[j] - stats.min[j])
            };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batch scheduling
// ---------------------------------------------------------------------------

/// Shuffled index order for one epoch. Stateless in the epoch number, so
/// any iteration of a run can be reconstructed without replaying others.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::derive(seed, Domain::EpochShuffle, epoch);
    order.shuffle(&mut rng);
    order
}

/// Batches per epoch; the trailing short batch counts.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Window indices making up one global iteration of the batch schedule.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, iter: u64) -> Vec<usize> {
    let per_epoch = batches_per_epoch(n, batch_size) as u64;
    let epoch = iter / per_epoch;
    let slot = (iter % per_epoch) as usize;
    let order = epoch_permutation(n, seed, epoch);
    let start = slot * batch_size;
    let end = (start + batch_size).min(n);
    order[start..end].to_vec()
}

/// Endless epoch-shuffled batch stream over a window list.
pub struct BatchIter<'a> {
    windows: &'a [TimeSeriesWindow],
    batch_size: usize,
    seed: u64,
    iter: u64,
}

impl<'a> BatchIter<'a> {
    pub fn new(windows: &'a [TimeSeriesWindow], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::argument("batch_iter: batch_size must be >= 1"));
        }
        if windows.is_empty() {
            return Err(Error::argument("batch_iter: empty window list"));
        }
        Ok(BatchIter {
            windows,
            batch_size,
            seed,
            iter: 0,
        })
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<&'a TimeSeriesWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = batch_indices(self.windows.len(), self.batch_size, self.seed, self.iter);
        self.iter += 1;
        Some(idx.into_iter().map(|i| &self.windows[i]).collect())
    }
}

/// Deterministic 90/10 train/test split by shuffled window index.
pub fn split_train_test(
    windows: &[TimeSeriesWindow],
    seed: u64,
) -> (Vec<TimeSeriesWindow>, Vec<TimeSeriesWindow>) {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng = rng::derive(seed, Domain::Split, 0);
    order.shuffle(&mut rng);
    let n_test = windows.len() / 10;
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| idx.iter().map(|&i| windows[i].clone()).collect();
    (pick(train_idx), pick(test_idx))
}

// ---------------------------------------------------------------------------
// Window / stats file formats
// ---------------------------------------------------------------------------

/// Write windows as CSV rows `sample_id,timestep,f0..f{d-1}`.
pub fn write_windows_csv(path: &Path, windows: &[TimeSeriesWindow]) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::argument("write_windows_csv: no windows"));
    }
    let d = windows[0].dim();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "sample_id,timestep")?;
    for j in 0..d {
        write!(out, ",f{j}")?;
    }
    writeln!(out)?;
    for (s, w) in windows.iter().enumerate() {
        for i in 0..w.steps() {
            write!(out, "{s},{i}")?;
            for j in 0..d {
                write!(out, ",{}", w.values[[i, j]])?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Read windows written by [`write_windows_csv`].
pub fn read_windows_csv(path: &Path) -> Result<Vec<TimeSeriesWindow>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty file", path.display())))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "timestep" {
        return Err(Error::format(format!(
            "{}: expected header sample_id,timestep,f0..",
            path.display()
        )));
    }
    let d = cols.len() - 2;

    let mut samples: Vec<Vec<Vec<f64>>> = Vec::new();
    for (r, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 2 {
            return Err(Error::format_at("ragged row", r + 2, cells.len()));
        }
        let sid: usize = cells[0]
            .parse()
            .map_err(|_| Error::format_at("bad sample_id", r + 2, 1))?;
        let mut feat = Vec::with_capacity(d);
        for (c, cell) in cells[2..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::format_at(format!("non-numeric cell {cell:?}"), r + 2, c + 3)
            })?;
            feat.push(v);
        }
        if sid == samples.len() {
            samples.push(Vec::new());
        } else if sid > samples.len() {
            return Err(Error::format_at("sample_id out of order", r + 2, 1));
        }
        samples[sid].push(feat);
    }
    let mut windows = Vec::with_capacity(samples.len());
    for (s, rows) in samples.into_iter().enumerate() {
        let steps = rows.len();
        if steps == 0 {
            return Err(Error::format(format!("sample {s} has no rows")));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((steps, d), flat)
            .map_err(|e| Error::format(format!("shape error: {e}")))?;
        windows.push(TimeSeriesWindow {
            values,
            window_index: s,
        });
    }
    Ok(windows)
}

/// Write normalization stats as CSV `feature,min,max`.
pub fn write_stats_csv(path: &Path, stats: &NormalizationStats) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "feature,min,max")?;
    for j in 0..stats.dim() {
        writeln!(out, "{j},{},{}", stats.min[j], stats.max[j])?;
    }
    Ok(())
}

/// Read stats written by [`write_stats_csv`].
pub fn read_stats_csv(path: &Path) -> Result<NormalizationStats> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut min = Vec::new();
    let mut max = Vec::new();
    for (r, line) in reader.lines().enumerate() {
        let line = line?;
        if r == 0 {
            if line != "feature,min,max" {
                return Err(Error::format("stats file: expected header feature,min,max"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(Error::format_at("expected 3 columns", r + 1, cells.len()));
        }
        let lo: f64 = cells[1]
            .parse()
            .map_err(|_| Error::format_at("bad min", r + 1, 2))?;
        let hi: f64 = cells[2]
            .parse()
            .map_err(|_| Error::format_at("bad max", r + 1, 3))?;
        min.push(lo);
        max.push(hi);
    }
    if min.is_empty() {
        return Err(Error::format("stats file: no feature rows"));
    }
    Ok(NormalizationStats { min, max })
}
