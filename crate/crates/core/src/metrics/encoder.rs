//! Feature encoder behind the context distance: a small causal
//! convolution stack trained on the real windows with a next-step
//! reconstruction objective. The representation of a window is the
//! time-averaged final hidden layer.

use ndarray::Array2;

use crate::autodiff::{backward, Tape, Var};
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::nn::{self, Binding, ParamSet};
use crate::rng::{self, Domain};
use crate::trainer::{adam_step, clip_global_norm, zero_moments};

pub const REPR_DIM: usize = 64;
const KERNEL: usize = 3;
const STEPS: usize = 200;
const BATCH: usize = 16;
const LR: f64 = 1e-3;
const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    params: ParamSet,
    d_in: usize,
}

impl FeatureEncoder {
    fn init(d_in: usize, seed: u64) -> FeatureEncoder {
        let mut set = ParamSet::new();
        let mut r = rng::derive(seed, Domain::NetInit, 0);
        nn::init_conv(&mut set, &mut r, "c0", KERNEL, d_in, REPR_DIM);
        nn::init_conv(&mut set, &mut r, "c1", KERNEL, REPR_DIM, REPR_DIM);
        nn::init_linear(&mut set, &mut r, "head", REPR_DIM, d_in);
        FeatureEncoder { params: set, d_in }
    }

    fn features<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let h = nn::conv1d_causal(x, p, "c0", KERNEL).gelu();
        nn::conv1d_causal(h, p, "c1", KERNEL).gelu()
    }

    /// Time-averaged hidden features of one window.
    pub fn encode(&self, window: &Array2<f64>) -> Result<Vec<f64>> {
        if window.ncols() != self.d_in {
            return Err(Error::argument(format!(
                "encoder expects {} features, window has {}",
                self.d_in,
                window.ncols()
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let h = self.features(&p, tape.input(window.clone())).value();
        let tau = h.nrows() as f64;
        Ok((0..REPR_DIM).map(|j| h.column(j).sum() / tau).collect())
    }

    /// Encode a whole set into an `n x 64` matrix of representations.
    pub fn encode_set(&self, windows: &[TimeSeriesWindow]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((windows.len(), REPR_DIM));
        for (i, w) in windows.iter().enumerate() {
            let rep = self.encode(&w.values)?;
            for (j, v) in rep.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        Ok(out)
    }
}

/// Next-step reconstruction loss for a batch of windows on one tape.
fn batch_loss<'t>(
    enc: &FeatureEncoder,
    tape: &'t Tape,
    p: &Binding<'t>,
    batch: &[&Array2<f64>],
) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for &w in batch {
        let tau = w.nrows();
        let h = enc.features(p, tape.input(w.clone()));
        let pred = nn::linear(h, p, "head").gather_rows((0..tau - 1).collect());
        let target = tape.input(w.slice(ndarray::s![1..tau, ..]).to_owned());
        let diff = pred.sub(target);
        let term = diff.mul(diff).mean_all();
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.expect("non-empty batch")
        .scale(1.0 / batch.len() as f64)
}

/// Train the encoder on real windows for a fixed number of steps.
/// Deterministic in `seed`.
pub fn train_feature_encoder(real: &[TimeSeriesWindow], seed: u64) -> Result<FeatureEncoder> {
    if real.len() < 100 {
        return Err(Error::argument(format!(
            "feature encoder needs >= 100 windows, got {}",
            real.len()
        )));
    }
    if real[0].values.nrows() < 2 {
        return Err(Error::argument(
            "feature encoder needs windows of >= 2 steps",
        ));
    }
    let d = real[0].values.ncols();
    let mut enc = FeatureEncoder::init(d, seed);
    let mut m = zero_moments(&enc.params);
    let mut v = zero_moments(&enc.params);
    for step in 1..=STEPS {
        use rand::Rng;
        let mut r = rng::derive(seed, Domain::EncoderTrain, step as u64);
        let batch: Vec<&Array2<f64>> = (0..BATCH)
            .map(|_| &real[r.gen_range(0..real.len())].values)
            .collect();
        let tape = Tape::new();
        let p = enc.params.bind(&tape);
        let loss = batch_loss(&enc, &tape, &p, &batch);
        let grads = backward(loss);
        let mut named = p.gradients(&grads);
        clip_global_norm(&mut named, GRAD_CLIP);
        adam_step(&mut enc.params, &mut m, &mut v, &named, step, LR);
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::super::frechet;
    use super::*;
    use crate::data::generate_sines;

    #[test]
    fn encoding_shape_and_determinism() {
        let real = generate_sines(120, 12, 2, 3).unwrap();
        let enc = train_feature_encoder(&real, 5).unwrap();
        let reps = enc.encode_set(&real[..10]).unwrap();
        assert_eq!(reps.dim(), (10, REPR_DIM));
        let a = enc.encode(&real[0].values).unwrap();
        let b = enc.encode(&real[0].values).unwrap();
        assert_eq!(a, b);

        let enc2 = train_feature_encoder(&real, 5).unwrap();
        let c = enc2.encode(&real[0].values).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn too_few_windows_rejected() {
        let real = generate_sines(50, 12, 2, 3).unwrap();
        assert!(train_feature_encoder(&real, 0).is_err());
    }

    #[test]
    fn separates_sines_from_noise() {
        use rand::Rng;
        let sines = generate_sines(360, 12, 2, 7).unwrap();
        let noise: Vec<TimeSeriesWindow> = (0..120)
            .map(|k| {
                let mut r = rng::derive(8, Domain::MetricRun, 30_000 + k as u64);
                TimeSeriesWindow {
                    values: Array2::from_shape_simple_fn((12, 2), || r.gen::<f64>()),
                    window_index: k,
                }
            })
            .collect();
        let (train, held) = sines.split_at(120);
        let enc = train_feature_encoder(train, 1).unwrap();

        // Two disjoint held-out halves of the same process set the noise
        // floor of the estimator; unstructured noise must sit clearly
        // above it.
        let (half_a, half_b) = held.split_at(120);
        let within = frechet::context_fid(half_a, half_b, &enc).unwrap();
        let across = frechet::context_fid(half_a, &noise, &enc).unwrap();
        assert!(across > 5.0 * within, "across {across} vs within {within}");
    }
}
