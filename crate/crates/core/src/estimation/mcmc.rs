//! Metropolis–Hastings with second-order Taylor proposals for coefficient
//! blocks, Gibbs draws for isotropic variances and slice sampling for
//! anisotropic ones.

use super::{half_log_det, precision_factor};
use crate::error::{Error, Result};
use crate::likelihood::{
    block_derivs, group_log_posterior, log_ig, log_posterior, loglik, ThetaState, IG_RATE,
    IG_SHAPE,
};
use crate::model::{JointModel, Prior};
use crate::scalar::Real;
use nalgebra::{Cholesky, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burnin: usize,
    pub thin: usize,
    pub rng_seed: u64,
    pub ridge_boost: f64,
    pub ridge_doublings: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 13000,
            burnin: 3000,
            thin: 2,
            rng_seed: 1,
            ridge_boost: 1e-6,
            ridge_doublings: 8,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burnin >= self.n_iter {
            return Err(Error::Config("burnin must be smaller than n_iter".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        (self.n_iter - self.burnin) / self.thin
    }
}

/// Position of one block inside a flattened draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub name: String,
    pub offset: usize,
    pub width: usize,
    pub var_offset: usize,
    pub n_variances: usize,
}

/// Kept draws: every row holds all coefficients followed by all variances.
#[derive(Debug, Clone)]
pub struct SampleChain<T> {
    pub layout: Vec<BlockLayout>,
    pub iterations: Vec<usize>,
    pub draws: Vec<Vec<T>>,
    pub log_posterior: Vec<T>,
    pub loglik: Vec<T>,
    /// Acceptance rate per block (averaged over subjects for per-subject
    /// blocks); variance-only updates are not counted.
    pub acceptance: Vec<f64>,
    /// Iterations in which some proposal precision stayed indefinite after
    /// the ridge.
    pub flagged_iterations: usize,
}

impl<T: Real> SampleChain<T> {
    pub fn layout_for(model: &JointModel<T>) -> Vec<BlockLayout> {
        let mut off = 0;
        let total: usize = model.blocks.iter().map(|b| b.width).sum();
        let mut voff = total;
        model
            .blocks
            .iter()
            .map(|b| {
                let l = BlockLayout {
                    name: b.name.clone(),
                    offset: off,
                    width: b.width,
                    var_offset: voff,
                    n_variances: b.n_variances(),
                };
                off += b.width;
                voff += b.n_variances();
                l
            })
            .collect()
    }

    pub fn flatten(state: &ThetaState<T>) -> Vec<T> {
        let mut v: Vec<T> = state.beta.iter().flat_map(|b| b.iter().copied()).collect();
        v.extend(state.tau2.iter().flat_map(|t| t.iter().copied()));
        v
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&BlockLayout> {
        self.layout.iter().find(|l| l.name == name)
    }

    /// Coefficients of block `b` in draw `d`.
    pub fn beta(&self, d: usize, b: usize) -> &[T] {
        let l = &self.layout[b];
        &self.draws[d][l.offset..l.offset + l.width]
    }

    pub fn tau2(&self, d: usize, b: usize) -> &[T] {
        let l = &self.layout[b];
        &self.draws[d][l.var_offset..l.var_offset + l.n_variances]
    }

    /// State rebuilt from draw `d`.
    pub fn state(&self, model: &JointModel<T>, d: usize) -> Result<ThetaState<T>> {
        let beta = (0..self.layout.len())
            .map(|b| DVector::from_column_slice(self.beta(d, b)))
            .collect();
        let tau2 = (0..self.layout.len()).map(|b| self.tau2(d, b).to_vec()).collect();
        ThetaState::new(model, beta, tau2)
    }

    /// State at the posterior mean of every coefficient and variance.
    pub fn mean_state(&self, model: &JointModel<T>) -> Result<ThetaState<T>> {
        let n = T::from_usize_lossy(self.draws.len());
        let width = self.draws.first().map_or(0, |d| d.len());
        let mut mean = vec![T::zero(); width];
        for d in &self.draws {
            for (m, &v) in mean.iter_mut().zip(d) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let beta = self
            .layout
            .iter()
            .map(|l| DVector::from_column_slice(&mean[l.offset..l.offset + l.width]))
            .collect();
        let tau2 = self
            .layout
            .iter()
            .map(|l| mean[l.var_offset..l.var_offset + l.n_variances].to_vec())
            .collect();
        ThetaState::new(model, beta, tau2)
    }
}

/// Result of one MH proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhOutcome<T> {
    pub accepted: bool,
    /// `log π(β*) − log π(β) + log q(β|β*) − log q(β*|β)`.
    pub log_ratio: T,
    /// The proposal precision could not be made positive definite.
    pub flagged: bool,
}

struct Proposal<T: Real> {
    mean: DVector<T>,
    chol: Cholesky<T, Dyn>,
}

impl<T: Real> Proposal<T> {
    fn log_density(&self, x: &DVector<T>) -> T {
        let l = self.chol.l();
        let v = l.transpose() * (x - &self.mean);
        half_log_det(&self.chol) - T::lit(0.5) * v.dot(&v)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<T> {
        let z = DVector::from_fn(self.mean.len(), |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        });
        let l = self.chol.l();
        let x = l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("triangular factor is nonsingular");
        &self.mean + x
    }
}

fn proposal<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    b: usize,
    group: Option<usize>,
    cfg: &McmcConfig,
) -> Option<Proposal<T>> {
    let d = block_derivs(model, st, b, group);
    let (_, chol) = precision_factor(&d.hessian(), cfg.ridge_boost, cfg.ridge_doublings, "")
        .ok()?;
    let mean = &d.beta + chol.solve(&d.score());
    Some(Proposal { mean, chol })
}

/// MH update of a whole (non per-subject) block.
pub fn mh_block_update<T: Real>(
    model: &JointModel<T>,
    st: &mut ThetaState<T>,
    b: usize,
    cfg: &McmcConfig,
    rng: &mut ChaCha8Rng,
) -> MhOutcome<T> {
    let reject = |flagged| MhOutcome {
        accepted: false,
        log_ratio: T::zero(),
        flagged,
    };
    let Some(fwd) = proposal(model, st, b, None, cfg) else {
        return reject(true);
    };
    let old = st.beta[b].clone();
    let lp_old = log_posterior(model, st);
    let cand = fwd.sample(rng);
    st.set_block(model, b, cand.clone());
    let lp_new = log_posterior(model, st);
    let Some(bwd) = proposal(model, st, b, None, cfg) else {
        st.set_block(model, b, old);
        return reject(true);
    };
    let log_ratio = lp_new - lp_old + bwd.log_density(&old) - fwd.log_density(&cand);
    finish(rng, log_ratio, || st.set_block(model, b, old))
}

/// MH update of subject `i` in a per-subject block.
pub fn mh_group_update<T: Real>(
    model: &JointModel<T>,
    st: &mut ThetaState<T>,
    b: usize,
    i: usize,
    cfg: &McmcConfig,
    rng: &mut ChaCha8Rng,
) -> MhOutcome<T> {
    let reject = |flagged| MhOutcome {
        accepted: false,
        log_ratio: T::zero(),
        flagged,
    };
    let Some(fwd) = proposal(model, st, b, Some(i), cfg) else {
        return reject(true);
    };
    let w = model.blocks[b].group_width();
    let old = st.beta[b].rows(i * w, w).into_owned();
    let lp_old = group_log_posterior(model, st, b, i);
    let cand = fwd.sample(rng);
    st.set_group(model, b, i, cand.as_slice());
    let lp_new = group_log_posterior(model, st, b, i);
    let Some(bwd) = proposal(model, st, b, Some(i), cfg) else {
        st.set_group(model, b, i, old.as_slice());
        return reject(true);
    };
    let log_ratio = lp_new - lp_old + bwd.log_density(&old) - fwd.log_density(&cand);
    finish(rng, log_ratio, || st.set_group(model, b, i, old.as_slice()))
}

fn finish<T: Real>(rng: &mut ChaCha8Rng, log_ratio: T, revert: impl FnOnce()) -> MhOutcome<T> {
    let u: f64 = rng.random();
    let accepted = log_ratio.is_finite() && u.ln() < log_ratio.as_f64();
    if !accepted {
        revert();
    }
    MhOutcome {
        accepted,
        log_ratio,
        flagged: false,
    }
}

/// Draw from the inverse-gamma full conditional
/// `IG(a + rank/2, b + βᵀKβ/2)` of an isotropic block.
pub fn gibbs_variance<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    let blk = &model.blocks[b];
    if !matches!(blk.prior, Prior::Isotropic { .. }) {
        return Err(Error::Config(format!(
            "block {} has no isotropic variance",
            blk.name
        )));
    }
    let q = blk.quad_forms(&st.beta[b])[0];
    let shape = IG_SHAPE + blk.prior_rank() as f64 / 2.0;
    let rate = IG_RATE + q.as_f64() / 2.0;
    Ok(T::lit(sample_inv_gamma(shape, rate, rng)))
}

pub(crate) fn sample_inv_gamma(shape: f64, rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

/// Log full conditional of `u = log τ²_comp` (including the Jacobian).
fn log_variance_conditional<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    b: usize,
    comp: usize,
    u: f64,
) -> f64 {
    let blk = &model.blocks[b];
    let mut tau2 = st.tau2[b].clone();
    tau2[comp] = T::lit(u.exp());
    (blk.log_prior(&st.beta[b], &tau2) + log_ig(tau2[comp])).as_f64() + u
}

/// Support of slice-sampled variances. With a full-rank marginal penalty the
/// full conditional of the other component flattens out to the hyperprior
/// tail, so the support is bounded.
pub const SLICE_VARIANCE_BOUNDS: (f64, f64) = (1e-8, 1e8);

/// Univariate slice sample of one variance component on the log scale
/// (stepping out with unit width, at most 100 steps, then shrinkage),
/// restricted to [`SLICE_VARIANCE_BOUNDS`].
pub fn slice_variance<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    b: usize,
    comp: usize,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    const WIDTH: f64 = 1.0;
    const MAX_STEPS: usize = 100;
    let name = &model.blocks[b].name;
    let (lower, upper) = (SLICE_VARIANCE_BOUNDS.0.ln(), SLICE_VARIANCE_BOUNDS.1.ln());
    let u0 = st.tau2[b][comp].as_f64().ln().clamp(lower, upper);
    let f = |u: f64| log_variance_conditional(model, st, b, comp, u);
    let e: f64 = rng.random();
    let level = f(u0) + (1.0 - e).ln();
    let r: f64 = rng.random();
    let mut lo = (u0 - WIDTH * r).max(lower);
    let mut hi = (u0 - WIDTH * r + WIDTH).min(upper);
    let mut steps = 0;
    while lo > lower && f(lo) > level {
        lo = (lo - WIDTH).max(lower);
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::Numerical {
                block: name.clone(),
                message: "slice expansion exceeded 100 steps".into(),
            });
        }
    }
    steps = 0;
    while hi < upper && f(hi) > level {
        hi = (hi + WIDTH).min(upper);
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::Numerical {
                block: name.clone(),
                message: "slice expansion exceeded 100 steps".into(),
            });
        }
    }
    loop {
        let r: f64 = rng.random();
        let u = lo + r * (hi - lo);
        if f(u) > level {
            return Ok(T::lit(u.exp()));
        }
        if u < u0 {
            lo = u;
        } else {
            hi = u;
        }
        if hi - lo < 1e-12 {
            return Ok(T::lit(u0.exp()));
        }
    }
}

/// Runs the sampler from `start`: each iteration updates every coefficient
/// block in model order by MH, then every variance by Gibbs (isotropic) or
/// slice sampling (anisotropic).
pub fn posterior_mean<T: Real>(
    model: &JointModel<T>,
    start: ThetaState<T>,
    cfg: &McmcConfig,
) -> Result<SampleChain<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut st = start;
    let nb = model.blocks.len();
    let mut accepted = vec![0usize; nb];
    let mut proposed = vec![0usize; nb];
    let mut chain = SampleChain {
        layout: SampleChain::layout_for(model),
        iterations: Vec::with_capacity(cfg.n_kept()),
        draws: Vec::with_capacity(cfg.n_kept()),
        log_posterior: Vec::with_capacity(cfg.n_kept()),
        loglik: Vec::with_capacity(cfg.n_kept()),
        acceptance: vec![0.0; nb],
        flagged_iterations: 0,
    };
    for it in 1..=cfg.n_iter {
        let mut flagged = false;
        for b in 0..nb {
            if model.blocks[b].per_subject.is_some() {
                for i in 0..model.n_subjects {
                    let o = mh_group_update(model, &mut st, b, i, cfg, &mut rng);
                    proposed[b] += 1;
                    accepted[b] += o.accepted as usize;
                    flagged |= o.flagged;
                }
            } else {
                let o = mh_block_update(model, &mut st, b, cfg, &mut rng);
                proposed[b] += 1;
                accepted[b] += o.accepted as usize;
                flagged |= o.flagged;
            }
        }
        for b in 0..nb {
            match model.blocks[b].prior {
                Prior::Vague => {}
                Prior::Isotropic { .. } => {
                    let v = gibbs_variance(model, &st, b, &mut rng)?;
                    st.set_variances(b, vec![v]);
                }
                Prior::Anisotropic { .. } => {
                    for comp in 0..2 {
                        let v = slice_variance(model, &st, b, comp, &mut rng)?;
                        let mut t = st.tau2[b].clone();
                        t[comp] = v;
                        st.set_variances(b, t);
                    }
                }
            }
        }
        chain.flagged_iterations += flagged as usize;
        if it > cfg.burnin && (it - cfg.burnin) % cfg.thin == 0 {
            st.check_finite()?;
            chain.iterations.push(it);
            chain.draws.push(SampleChain::flatten(&st));
            chain.log_posterior.push(log_posterior(model, &st));
            chain.loglik.push(loglik(model, &st));
        }
    }
    chain.acceptance = accepted
        .iter()
        .zip(&proposed)
        .map(|(&a, &p)| if p == 0 { 0.0 } else { a as f64 / p as f64 })
        .collect();
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariates, Dataset};
    use crate::model::{JointModelSpec, TermSpec};

    fn tiny() -> JointModel<f64> {
        let n = 6;
        let (mut s, mut lt, mut y) = (vec![], vec![], vec![]);
        for i in 0..n {
            for j in 0..4 {
                s.push(i);
                lt.push(j as f64);
                y.push((i as f64 * 0.7 + j as f64).sin());
            }
        }
        let d = Dataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            vec![5.0; n],
            (0..n).map(|i| i % 2 == 0).collect(),
            Covariates::default(),
            s,
            lt,
            y,
            Covariates::default(),
        )
        .unwrap();
        let spec = JointModelSpec {
            lambda: vec![],
            gamma: vec![TermSpec::Intercept],
            mu: vec![TermSpec::Intercept, TermSpec::RandomIntercept],
            sigma: vec![TermSpec::Intercept],
            quadrature_nodes: 5,
            ..JointModelSpec::default()
        };
        JointModel::build(&spec, &d).unwrap()
    }

    #[test]
    fn gaussian_conditional_has_zero_log_ratio() {
        let m = tiny();
        let mut st = ThetaState::zeros(&m);
        let b = m.block_index("mu.intercept").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = McmcConfig::default();
        for _ in 0..50 {
            let o = mh_block_update(&m, &mut st, b, &cfg, &mut rng);
            assert!(o.log_ratio.abs() < 1e-8, "{}", o.log_ratio);
            assert!(o.accepted);
        }
    }

    #[test]
    fn chain_is_reproducible() {
        let m = tiny();
        let cfg = McmcConfig {
            n_iter: 60,
            burnin: 20,
            thin: 2,
            rng_seed: 9,
            ..McmcConfig::default()
        };
        let a = posterior_mean(&m, ThetaState::zeros(&m), &cfg).unwrap();
        let b = posterior_mean(&m, ThetaState::zeros(&m), &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.len(), 20);
        assert!(a.acceptance.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }
}
