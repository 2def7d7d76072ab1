//! Recurrent models behind the discriminative and predictive scores:
//! a two-layer GRU with hidden width equal to the feature count, trained
//! with early stopping on a held-out validation split.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{backward, Tape, Var};
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::nn::{self, Binding, ParamSet};
use crate::rng::{self, Domain};
use crate::trainer::{adam_step, clip_global_norm, zero_moments};

const LAYERS: usize = 2;
const BATCH: usize = 32;
const MAX_STEPS: usize = 5000;
const EVAL_EVERY: usize = 50;
const PATIENCE: usize = 10;
const MIN_IMPROVEMENT: f64 = 1e-4;
const LR: f64 = 5e-3;
const GRAD_CLIP: f64 = 5.0;

struct GruModel {
    params: ParamSet,
    hidden: usize,
}

impl GruModel {
    fn new(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> GruModel {
        let mut set = ParamSet::new();
        let mut r = rng::derive(seed, Domain::NetInit, 0);
        nn::init_gru_cell(&mut set, &mut r, "l0", d_in, hidden);
        nn::init_gru_cell(&mut set, &mut r, "l1", hidden, hidden);
        nn::init_linear(&mut set, &mut r, "head", hidden, d_out);
        GruModel {
            params: set,
            hidden,
        }
    }

    /// Stack timestep `t` of each window into a `batch x d` matrix.
    fn step_input(windows: &[&Array2<f64>], t: usize) -> Array2<f64> {
        let d = windows[0].ncols();
        let mut out = Array2::zeros((windows.len(), d));
        for (b, w) in windows.iter().enumerate() {
            for j in 0..d {
                out[[b, j]] = w[[t, j]];
            }
        }
        out
    }

    /// Run the stacked GRU over full sequences; returns the top-layer
    /// hidden state after every timestep.
    fn hidden_states<'t>(
        &self,
        tape: &'t Tape,
        p: &Binding<'t>,
        windows: &[&Array2<f64>],
    ) -> Vec<Var<'t>> {
        let tau = windows[0].nrows();
        let batch = windows.len();
        let mut h = [tape.input(Array2::zeros((batch, self.hidden))); LAYERS];
        let mut states = Vec::with_capacity(tau);
        for t in 0..tau {
            let mut x = tape.input(Self::step_input(windows, t));
            for (l, h_l) in h.iter_mut().enumerate() {
                *h_l = nn::gru_cell(x, *h_l, p, &format!("l{l}"));
                x = *h_l;
            }
            states.push(h[LAYERS - 1]);
        }
        states
    }
}

fn shuffled_split<T: Clone>(
    items: &[T],
    fraction: f64,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let n_tail = ((items.len() as f64) * fraction).round() as usize;
    let n_tail = n_tail.clamp(1, items.len() - 1);
    let (tail, head) = order.split_at(n_tail);
    (
        head.iter().map(|&i| items[i].clone()).collect(),
        tail.iter().map(|&i| items[i].clone()).collect(),
    )
}

fn batch_of<'a, T>(items: &'a [T], rng: &mut rand_chacha::ChaCha20Rng) -> Vec<&'a T> {
    (0..BATCH.min(items.len()))
        .map(|_| &items[rng.gen_range(0..items.len())])
        .collect()
}

/// Train a real-vs-synthetic classifier and return `|test accuracy - 0.5|`.
pub fn discriminative_run(
    real: &[TimeSeriesWindow],
    synth: &[TimeSeriesWindow],
    run_seed: u64,
) -> Result<f64> {
    super::check_pair(real, synth)?;
    if real.len() < 20 || synth.len() < 20 {
        return Err(Error::argument(format!(
            "discriminative score needs >= 20 windows per side, got {} real / {} synthetic",
            real.len(),
            synth.len()
        )));
    }
    let d = real[0].values.ncols();
    let labeled: Vec<(Array2<f64>, f64)> = real
        .iter()
        .map(|w| (w.values.clone(), 1.0))
        .chain(synth.iter().map(|w| (w.values.clone(), 0.0)))
        .collect();
    let mut split_rng = rng::derive(run_seed, Domain::Split, 0);
    let (train_full, test) = shuffled_split(&labeled, 0.2, &mut split_rng);
    let (train, val) = shuffled_split(&train_full, 0.1, &mut split_rng);

    let mut model = GruModel::new(d, d, 1, run_seed);
    let mut m = zero_moments(&model.params);
    let mut v = zero_moments(&model.params);

    let loss_on = |model: &GruModel, set: &[(Array2<f64>, f64)]| -> f64 {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        classifier_loss(model, &tape, &p, set).value()[[0, 0]]
    };

    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for step in 1..=MAX_STEPS {
        let mut batch_rng = rng::derive(run_seed, Domain::TrainIter, step as u64);
        let batch: Vec<(Array2<f64>, f64)> = batch_of(&train, &mut batch_rng)
            .into_iter()
            .cloned()
            .collect();
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let loss = classifier_loss(&model, &tape, &p, &batch);
        let grads = backward(loss);
        let mut named = p.gradients(&grads);
        clip_global_norm(&mut named, GRAD_CLIP);
        adam_step(&mut model.params, &mut m, &mut v, &named, step, LR);

        if step % EVAL_EVERY == 0 {
            let val_loss = loss_on(&model, &val);
            if val_loss < best_val - MIN_IMPROVEMENT {
                best_val = val_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= PATIENCE {
                    break;
                }
            }
        }
    }

    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let views: Vec<&Array2<f64>> = test.iter().map(|(w, _)| w).collect();
    let logits = nn::linear(
        *model.hidden_states(&tape, &p, &views).last().unwrap(),
        &p,
        "head",
    )
    .value();
    let correct = test
        .iter()
        .zip(logits.column(0))
        .filter(|((_, label), &logit)| (logit > 0.0) == (*label > 0.5))
        .count();
    let accuracy = correct as f64 / test.len() as f64;
    Ok((accuracy - 0.5).abs())
}

fn classifier_loss<'t>(
    model: &GruModel,
    tape: &'t Tape,
    p: &Binding<'t>,
    set: &[(Array2<f64>, f64)],
) -> Var<'t> {
    let views: Vec<&Array2<f64>> = set.iter().map(|(w, _)| w).collect();
    let last = *model.hidden_states(tape, p, &views).last().unwrap();
    let logits = nn::linear(last, p, "head");
    let labels = Array2::from_shape_fn((set.len(), 1), |(i, _)| set[i].1);
    logits.bce_with_logits(labels)
}

/// Train a next-step forecaster on synthetic windows, return its mean
/// absolute error on the real windows.
pub fn predictive_run(
    real: &[TimeSeriesWindow],
    synth: &[TimeSeriesWindow],
    run_seed: u64,
) -> Result<f64> {
    let (tau, d) = super::check_pair(real, synth)?;
    if tau < 2 {
        return Err(Error::argument(
            "predictive score needs windows of >= 2 steps",
        ));
    }
    if synth.len() < 2 {
        return Err(Error::argument(
            "predictive score needs >= 2 synthetic windows for the validation split",
        ));
    }
    let windows: Vec<Array2<f64>> = synth.iter().map(|w| w.values.clone()).collect();
    let mut split_rng = rng::derive(run_seed, Domain::Split, 0);
    let (train, val) = shuffled_split(&windows, 0.1, &mut split_rng);

    let mut model = GruModel::new(d, d, d, run_seed);
    let mut m = zero_moments(&model.params);
    let mut v = zero_moments(&model.params);

    let loss_on = |model: &GruModel, set: &[Array2<f64>]| -> f64 {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        predictor_loss(model, &tape, &p, set).value()[[0, 0]]
    };

    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for step in 1..=MAX_STEPS {
        let mut batch_rng = rng::derive(run_seed, Domain::TrainIter, step as u64);
        let batch: Vec<Array2<f64>> = batch_of(&train, &mut batch_rng)
            .into_iter()
            .cloned()
            .collect();
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let loss = predictor_loss(&model, &tape, &p, &batch);
        let grads = backward(loss);
        let mut named = p.gradients(&grads);
        clip_global_norm(&mut named, GRAD_CLIP);
        adam_step(&mut model.params, &mut m, &mut v, &named, step, LR);

        if step % EVAL_EVERY == 0 {
            let val_loss = loss_on(&model, &val);
            if val_loss < best_val - MIN_IMPROVEMENT {
                best_val = val_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= PATIENCE {
                    break;
                }
            }
        }
    }

    let real_values: Vec<Array2<f64>> = real.iter().map(|w| w.values.clone()).collect();
    Ok(loss_on(&model, &real_values))
}

/// Mean absolute error of one-step-ahead forecasts over a window set.
fn predictor_loss<'t>(
    model: &GruModel,
    tape: &'t Tape,
    p: &Binding<'t>,
    set: &[Array2<f64>],
) -> Var<'t> {
    let views: Vec<&Array2<f64>> = set.iter().collect();
    let tau = views[0].nrows();
    let states = model.hidden_states(tape, p, &views);
    let mut acc: Option<Var<'t>> = None;
    for (t, &state) in states.iter().enumerate().take(tau - 1) {
        let pred = nn::linear(state, p, "head");
        let target = tape.input(GruModel::step_input(&views, t + 1));
        let err = pred.sub(target).abs().mean_all();
        acc = Some(match acc {
            Some(a) => a.add(err),
            None => err,
        });
    }
    acc.unwrap().scale(1.0 / (tau - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::super::synthetic_windows;
    use super::*;

    #[test]
    fn indistinguishable_halves_score_low() {
        let all = synthetic_windows(120, 8, 2, 42, |r, _, _, _| r.gen::<f64>());
        let (a, b) = all.split_at(60);
        let score = discriminative_run(a, b, 7).unwrap();
        assert!(score < 0.25, "split of one distribution scored {score}");
    }

    #[test]
    fn offset_sets_are_trivially_separable() {
        let real = synthetic_windows(40, 8, 2, 1, |r, _, _, _| r.gen::<f64>());
        let synth = synthetic_windows(40, 8, 2, 2, |r, _, _, _| r.gen::<f64>() + 10.0);
        let score = discriminative_run(&real, &synth, 3).unwrap();
        assert!(score > 0.45, "offset sets scored only {score}");
    }

    #[test]
    fn too_few_windows_rejected() {
        let few = synthetic_windows(10, 8, 2, 1, |r, _, _, _| r.gen::<f64>());
        let enough = synthetic_windows(25, 8, 2, 2, |r, _, _, _| r.gen::<f64>());
        assert!(discriminative_run(&few, &enough, 0).is_err());
    }

    #[test]
    fn constant_series_are_perfectly_predictable() {
        let set = synthetic_windows(60, 8, 2, 5, |_, _, _, j| 0.25 + 0.5 * j as f64);
        let score = predictive_run(&set, &set, 11).unwrap();
        // Early stopping halts once val improvement stalls, leaving a
        // small residual; the MAE must still be far below the signal
        // scale (0.25 and 0.75).
        assert!(score < 5e-3, "constant series MAE {score}");
    }

    #[test]
    fn ar1_forecast_approaches_optimal_mae() {
        // x_{t+1} = 0.7 x_t + 0.2 eps: the best one-step MAE is
        // E|0.2 eps| = 0.2 sqrt(2/pi) ~= 0.1596.
        let phi = 0.7;
        let noise = 0.2;
        let gen = |seed: u64| {
            let mut windows = Vec::new();
            for k in 0..200 {
                let mut r = rng::derive(seed, Domain::MetricRun, 20_000 + k);
                let mut x = [0.0f64; 2];
                for x_e in &mut x {
                    *x_e = r.gen::<f64>() - 0.5;
                }
                let mut w = Array2::zeros((12, 2));
                for i in 0..12 {
                    for j in 0..2 {
                        w[[i, j]] = x[j];
                    }
                    for x_e in &mut x {
                        let e: f64 =
                            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                        *x_e = phi * *x_e + noise * e;
                    }
                }
                windows.push(TimeSeriesWindow {
                    values: w,
                    window_index: k as usize,
                });
            }
            windows
        };
        let real = gen(100);
        let synth = gen(200);
        let score = predictive_run(&real, &synth, 9).unwrap();
        let optimal = noise * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (score - optimal).abs() < 0.05,
            "AR(1) MAE {score}, optimal {optimal}"
        );
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let real = synthetic_windows(30, 6, 2, 1, |r, _, _, _| r.gen::<f64>());
        let synth = synthetic_windows(30, 6, 2, 2, |r, _, _, _| r.gen::<f64>() * 0.8);
        let a = discriminative_run(&real, &synth, 5).unwrap();
        let b = discriminative_run(&real, &synth, 5).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = predictive_run(&real, &synth, 5).unwrap();
        let d = predictive_run(&real, &synth, 5).unwrap();
        assert_eq!(c.to_bits(), d.to_bits());
    }
}
