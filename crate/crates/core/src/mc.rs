//! Monte-Carlo oracles: European prices by exact simulation of the terminal
//! state, and empirical transition rows of a quantization tree.

use nalgebra::Vector4;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{drift_state, psd_sqrt, state_cov, substream, ModelParams, WD, WF, X, Y};
use crate::payoff::{ObstacleFactors, Payoff};
use crate::sum::pairwise_sum;
use crate::tree::{count_arrivals, step_samples, Mode, QuantTree};

const BATCH: usize = 4096;

/// Stream offset separating the source-state draws of a 2D row estimate from
/// the increment draws.
const STATE_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    /// Sample standard deviation over `√n`, where `n` counts independent
    /// draws (antithetic pairs when antithetic sampling is on).
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Price at 0 of the coupon paid on the last date of `payoff`, as the mean of
/// `h(X_T, Y_T)` over exact Gaussian draws of the terminal state. With
/// `antithetic`, each draw is paired with its reflection and `n_paths` counts
/// both members of every pair (rounded up to even).
pub fn mc_european<P: Payoff + ?Sized>(
    params: &ModelParams,
    payoff: &P,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<McEstimate> {
    if n_paths < 2 {
        return Err(Error::InvalidParameter(format!(
            "n_paths must be >= 2, got {n_paths}"
        )));
    }
    let k = payoff
        .dates()
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidParameter("payoff has no dates".into()))?;
    let t = payoff.dates()[k];
    let root = psd_sqrt(&state_cov(params, t)?.0)?;
    let f = ObstacleFactors::new(params, t);
    let h = |xi: &Vector4<f64>| {
        let s = root * xi;
        f.eval(payoff, k, s[X], s[Y])
    };

    let draws = if antithetic {
        n_paths.div_ceil(2)
    } else {
        n_paths
    };
    let mut vals = vec![0.0; draws];
    vals.par_chunks_mut(BATCH)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = substream(seed, b as u64);
            for v in chunk {
                let xi = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                *v = if antithetic {
                    0.5 * (h(&xi) + h(&-xi))
                } else {
                    h(&xi)
                };
            }
        });
    let (value, stderr) = mean_stderr(&vals);
    Ok(McEstimate {
        value,
        stderr,
        n_paths: if antithetic { 2 * draws } else { draws },
        seed,
    })
}

/// Empirical arrival frequencies over layer `k + 1` from node `source` of
/// layer `k`. In 4D the step starts from the node's exact coordinates. In 2D
/// the node fixes `(x, y)` while `(W^f, W^d)` are drawn from their law at
/// `t_k`, which is the one-step law the 2D tree approximates.
pub fn mc_transition_row(
    tree: &QuantTree,
    k: usize,
    source: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if k >= tree.n_steps() {
        return Err(Error::MissingTransition(k));
    }
    let src = &tree.layers[k];
    if source >= src.len() {
        return Err(Error::Dimension(format!(
            "node {source} outside layer {k} of size {}",
            src.len()
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    let state = src.state(tree.mode, source);
    let incs = step_samples(tree, k, n_samples, seed)?;
    let mut row = vec![0.0; tree.layers[k + 1].len()];
    match tree.mode {
        Mode::FourD => {
            for (j, p) in count_arrivals(tree, k, &state, &incs) {
                row[j] = p;
            }
        }
        Mode::TwoD => {
            let root = psd_sqrt(&state_cov(&tree.params, src.t)?.0)?;
            let delta = tree.layers[k + 1].t - src.t;
            let mut hits = vec![0u64; row.len()];
            let chunks: Vec<Vec<usize>> = incs
                .par_chunks(BATCH)
                .enumerate()
                .map(|(b, chunk)| {
                    let mut rng = substream(seed, STATE_STREAM + b as u64);
                    chunk
                        .iter()
                        .map(|g| {
                            let xi = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                            let w = root * xi;
                            let s = [state[X], w[WF], state[Y], w[WD]];
                            let d = drift_state(&tree.params, delta, s);
                            let next = [d[0] + g[0], d[1] + g[1], d[2] + g[2], d[3] + g[3]];
                            tree.layers[k + 1].locate(tree.mode, &next)
                        })
                        .collect()
                })
                .collect();
            for j in chunks.into_iter().flatten() {
                hits[j] += 1;
            }
            for (r, h) in row.iter_mut().zip(&hits) {
                *r = *h as f64 / n_samples as f64;
            }
        }
    }
    Ok(row)
}
