//! Posterior summaries and DIC.

use super::mcmc::SampleChain;
use crate::error::{Error, Result};
use crate::likelihood::{loglik, ThetaState};
use crate::model::JointModel;
use crate::scalar::Real;
use crate::spline::quantile_sorted;
use serde::{Deserialize, Serialize};

/// Mean, standard deviation and quantiles of one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub probs: Vec<f64>,
    pub quantiles: Vec<f64>,
}

impl ScalarSummary {
    pub fn from_draws(name: impl Into<String>, draws: &[f64], probs: &[f64]) -> Self {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = if draws.len() > 1 {
            (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            name: name.into(),
            mean,
            sd,
            probs: probs.to_vec(),
            quantiles: probs.iter().map(|&p| quantile_sorted(&sorted, p)).collect(),
        }
    }
}

/// Summaries of arbitrary draws; `draws[d][j]` is scalar `j` in draw `d`.
pub fn summarize_draws(names: &[String], draws: &[Vec<f64>], probs: &[f64]) -> Result<Vec<ScalarSummary>> {
    if draws.is_empty() {
        return Err(Error::Usage("cannot summarise an empty chain".into()));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Usage("quantile probabilities must lie in [0, 1]".into()));
    }
    let mut column = vec![0.0; draws.len()];
    Ok(names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            for (c, d) in column.iter_mut().zip(draws) {
                *c = d[j];
            }
            ScalarSummary::from_draws(name.clone(), &column, probs)
        })
        .collect())
}

/// Per-scalar summaries of every coefficient (`block[k]`) and variance
/// (`block.tau2[k]`) in the chain.
pub fn summarize<T: Real>(chain: &SampleChain<T>, probs: &[f64]) -> Result<Vec<ScalarSummary>> {
    let width = chain.draws.first().map_or(0, |d| d.len());
    let mut names = vec![String::new(); width];
    for l in &chain.layout {
        for k in 0..l.width {
            names[l.offset + k] = format!("{}[{k}]", l.name);
        }
        for k in 0..l.n_variances {
            names[l.var_offset + k] = format!("{}.tau2[{k}]", l.name);
        }
    }
    let draws: Vec<Vec<f64>> = chain
        .draws
        .iter()
        .map(|d| d.iter().map(|v| v.as_f64()).collect())
        .collect();
    summarize_draws(&names, &draws, probs)
}

/// `(1/n) Σ η′_α(η_μ(T_i))`, the association slope averaged over the
/// fitted marker values at the follow-up times.
pub fn average_slope<T: Real>(model: &JointModel<T>, st: &ThetaState<T>) -> T {
    let n = model.n_subjects;
    let sum = (0..n).fold(T::zero(), |acc, i| acc + st.alpha_d1[model.surv_points(i).end - 1]);
    sum / T::lit(n.max(1) as f64)
}

/// Summary of the average association slope over the draws of a chain.
pub fn summarize_average_slope<T: Real>(chain: &SampleChain<T>, model: &JointModel<T>, probs: &[f64]) -> Result<ScalarSummary> {
    if chain.is_empty() {
        return Err(Error::Usage("cannot summarise an empty chain".into()));
    }
    let draws = (0..chain.len())
        .map(|d| chain.state(model, d).map(|st| average_slope(model, &st).as_f64()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalarSummary::from_draws("alpha.average_slope", &draws, probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    /// Posterior mean deviance.
    pub dbar: f64,
    pub pd: f64,
    /// Deviance at the posterior mean.
    pub d_at_mean: f64,
}

/// `DIC = D̄ + p_D` with deviance `−2ℓ` and `p_D = D̄ − D(θ̄)`.
pub fn dic<T: Real>(chain: &SampleChain<T>, model: &JointModel<T>) -> Result<Dic> {
    if chain.is_empty() {
        return Err(Error::Usage("cannot compute DIC from an empty chain".into()));
    }
    let dbar = chain.loglik.iter().map(|l| -2.0 * l.as_f64()).sum::<f64>() / chain.len() as f64;
    let mean = chain.mean_state(model)?;
    let d_at_mean = -2.0 * loglik(model, &mean).as_f64();
    let pd = dbar - d_at_mean;
    Ok(Dic {
        dic: dbar + pd,
        dbar,
        pd,
        d_at_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_draws_give_zero_width() {
        let s = ScalarSummary::from_draws("c", &[2.5; 40], &[0.025, 0.975]);
        assert_eq!(s.quantiles, vec![2.5, 2.5]);
        assert_eq!(s.sd, 0.0);
    }

    #[test]
    fn standard_normal_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = ScalarSummary::from_draws("z", &d, &[0.025, 0.5, 0.975]);
        assert!((s.quantiles[0] + 1.96).abs() < 0.03);
        assert!((s.quantiles[2] - 1.96).abs() < 0.03);
        assert!((s.quantiles[1] - s.mean).abs() < 0.02);
    }

    #[test]
    fn rejects_empty_and_bad_probs() {
        assert!(summarize_draws(&["a".into()], &[], &[0.5]).is_err());
        assert!(summarize_draws(&["a".into()], &[vec![1.0]], &[1.5]).is_err());
    }
}
