//! Blockwise Newton–Raphson for the posterior mode with AICc-selected
//! variances.

use super::precision_factor;
use crate::error::{Error, Result};
use crate::likelihood::{
    block_derivs, group_log_posterior, log_posterior, loglik, BlockDerivs, ThetaState,
};
use crate::model::{JointModel, Predictor, TermKind};
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeFitConfig {
    pub max_outer_iters: usize,
    pub logpost_rel_tol: f64,
    pub steplength_grid: Vec<f64>,
    /// Candidate values of `log10 τ²`.
    pub variance_search_grid: Vec<f64>,
    /// Sweeps in which variances are re-selected; later sweeps keep them
    /// fixed so that coupled variances cannot cycle.
    pub variance_sweeps: usize,
    /// Fit all non-association blocks first (association held at zero),
    /// then the full model.
    pub staged_start: bool,
    pub ridge_boost: f64,
    pub ridge_doublings: usize,
    /// Standard deviation of the coefficient jitter used for restarts.
    pub restart_jitter: f64,
}

impl Default for ModeFitConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 200,
            logpost_rel_tol: 1e-7,
            steplength_grid: (1..=10).map(|k| k as f64 / 10.0).collect(),
            variance_search_grid: (0..31).map(|k| -4.0 + 8.0 * k as f64 / 30.0).collect(),
            variance_sweeps: 25,
            staged_start: true,
            ridge_boost: 1e-6,
            ridge_doublings: 8,
            restart_jitter: 0.1,
        }
    }
}

impl ModeFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || !(self.logpost_rel_tol > 0.0) {
            return Err(Error::Config(
                "max_outer_iters and logpost_rel_tol must be positive".into(),
            ));
        }
        if self.steplength_grid.is_empty()
            || self.steplength_grid.iter().any(|&v| !(v > 0.0 && v <= 1.0))
        {
            return Err(Error::Config("steplength_grid must be non-empty within (0, 1]".into()));
        }
        if self.variance_search_grid.is_empty() {
            return Err(Error::Config("variance_search_grid must be non-empty".into()));
        }
        Ok(())
    }
}

/// Posterior mode with curvature.
#[derive(Debug, Clone)]
pub struct FitResult<T: nalgebra::Scalar> {
    pub state: ThetaState<T>,
    pub log_posterior: T,
    pub iterations: usize,
    pub converged: bool,
    /// Log-posterior after every sweep.
    pub trace: Vec<T>,
    /// `(before, after)` log-posterior of every accepted Newton update.
    pub newton_steps: Vec<(T, T)>,
    /// Approximate posterior standard deviations from `[-H(β̂)]⁻¹` per block.
    pub sd: Vec<DVector<T>>,
}

impl<T: Real> FitResult<T> {
    /// Normal-approximation credible interval of every coefficient.
    pub fn intervals(&self, z: T) -> Vec<(DVector<T>, DVector<T>)> {
        self.state
            .beta
            .iter()
            .zip(&self.sd)
            .map(|(b, s)| (b - s * z, b + s * z))
            .collect()
    }
}

/// Data-driven starting values: intercepts at simple moment estimates, all
/// other coefficients zero, unit variances. With `jitter = Some((seed, sd))`
/// every coefficient is perturbed by `N(0, sd²)` noise.
pub fn initial_state<T: Real>(model: &JointModel<T>, jitter: Option<(u64, f64)>) -> ThetaState<T> {
    let mut st = ThetaState::zeros(model);
    let n_obs = model.n_obs();
    let intercept = |k: Predictor| {
        model
            .blocks_of(k)
            .find(|&b| model.blocks[b].kind == TermKind::Intercept)
    };
    if n_obs > 0 {
        let mean = model.y.iter().fold(T::zero(), |a, &v| a + v) / T::from_usize_lossy(n_obs);
        if let Some(b) = intercept(Predictor::Mu) {
            st.set_block(model, b, DVector::from_element(1, mean));
        }
        if n_obs > 1 {
            let var = model
                .y
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / T::from_usize_lossy(n_obs - 1);
            if let Some(b) = intercept(Predictor::Sigma) {
                if var > T::zero() {
                    st.set_block(model, b, DVector::from_element(1, T::lit(0.5) * var.ln()));
                }
            }
        }
    }
    if let Some(b) = intercept(Predictor::Gamma) {
        let events = model.event.iter().filter(|&&e| e).count().max(1);
        let exposure = model.surv_time.iter().fold(T::zero(), |a, &t| a + t);
        let rate = T::from_usize_lossy(events) / exposure;
        st.set_block(model, b, DVector::from_element(1, rate.ln()));
    }
    if let Some((seed, sd)) = jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in 0..model.blocks.len() {
            let mut beta = st.beta[b].clone();
            for v in beta.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += T::lit(sd * z);
            }
            st.set_block(model, b, beta);
        }
    }
    st
}

fn newton_direction<T: Real>(
    d: &BlockDerivs<T>,
    cfg: &ModeFitConfig,
    name: &str,
) -> Result<DVector<T>> {
    let (_, ch) = precision_factor(&d.hessian(), cfg.ridge_boost, cfg.ridge_doublings, name)?;
    Ok(ch.solve(&d.score()))
}

/// One line-searched Newton step for block `b`. Returns the log-posterior
/// before and after; the state is unchanged when no step improves it.
pub fn newton_update<T: Real>(
    model: &JointModel<T>,
    st: &mut ThetaState<T>,
    b: usize,
    cfg: &ModeFitConfig,
) -> Result<(T, T)> {
    let blk = &model.blocks[b];
    if blk.per_subject.is_some() {
        let before = log_posterior(model, st);
        for i in 0..model.n_subjects {
            newton_group_update(model, st, b, i, cfg)?;
        }
        return Ok((before, log_posterior(model, st)));
    }
    let d = block_derivs(model, st, b, None);
    let delta = newton_direction(&d, cfg, &blk.name)?;
    let old = st.beta[b].clone();
    let lp0 = log_posterior(model, st);
    let mut best = (lp0, None);
    for &nu in &cfg.steplength_grid {
        let cand = &old + &delta * T::lit(nu);
        st.set_block(model, b, cand);
        let lp = log_posterior(model, st);
        if lp.is_finite() && lp > best.0 {
            best = (lp, Some(nu));
        }
    }
    match best.1 {
        Some(nu) => st.set_block(model, b, &old + &delta * T::lit(nu)),
        None => st.set_block(model, b, old),
    }
    Ok((lp0, best.0))
}

/// Newton step for the coefficients of subject `i` in a per-subject block,
/// judged by the subject's share of the log-posterior.
pub fn newton_group_update<T: Real>(
    model: &JointModel<T>,
    st: &mut ThetaState<T>,
    b: usize,
    i: usize,
    cfg: &ModeFitConfig,
) -> Result<(T, T)> {
    let w = model.blocks[b].group_width();
    let d = block_derivs(model, st, b, Some(i));
    let delta = newton_direction(&d, cfg, &model.blocks[b].name)?;
    let old = d.beta.clone();
    let lp0 = group_log_posterior(model, st, b, i);
    let mut best = (lp0, None);
    for &nu in &cfg.steplength_grid {
        let cand = &old + &delta * T::lit(nu);
        st.set_group(model, b, i, cand.as_slice());
        let lp = group_log_posterior(model, st, b, i);
        if lp.is_finite() && lp > best.0 {
            best = (lp, Some(nu));
        }
    }
    let chosen = match best.1 {
        Some(nu) => &old + &delta * T::lit(nu),
        None => old,
    };
    debug_assert_eq!(chosen.len(), w);
    st.set_group(model, b, i, chosen.as_slice());
    Ok((lp0, best.0))
}

fn effective_n<T: Real>(model: &JointModel<T>, b: usize) -> usize {
    match model.blocks[b].predictor {
        Predictor::Mu | Predictor::Sigma => model.n_obs(),
        _ => model.n_subjects,
    }
}

/// AICc with `edf` effective degrees of freedom; infinite when the
/// correction is undefined.
pub(crate) fn aicc(loglik: f64, edf: f64, n_eff: f64) -> f64 {
    let denom = n_eff - edf - 1.0;
    if denom <= 0.0 || !loglik.is_finite() {
        return f64::INFINITY;
    }
    -2.0 * loglik + 2.0 * edf + 2.0 * edf * (edf + 1.0) / denom
}

/// Newton step and `tr[(-H_pen)⁻¹(-H_lik)]` for one coefficient group at
/// candidate variances.
fn candidate_step<T: Real>(
    d: &BlockDerivs<T>,
    precision: &DMatrix<T>,
) -> Option<(DVector<T>, T)> {
    let neg_pen = precision - &d.lik_hessian;
    let ch = nalgebra::Cholesky::new(neg_pen)?;
    let s = &d.lik_score - precision * &d.beta;
    let step = ch.solve(&s);
    let edf = ch.solve(&(-&d.lik_hessian)).trace();
    Some((&d.beta + step, edf))
}

/// Grid search over `log10 τ²` (one component at a time for anisotropic
/// blocks) minimising AICc, then a line-searched Newton step at the chosen
/// variances. Returns the selected variances.
pub fn optimize_variance<T: Real>(
    model: &JointModel<T>,
    st: &mut ThetaState<T>,
    b: usize,
    cfg: &ModeFitConfig,
) -> Result<Vec<T>> {
    let blk = &model.blocks[b];
    let nv = blk.n_variances();
    if nv == 0 {
        return Ok(Vec::new());
    }
    let groups: Vec<Option<usize>> = match blk.per_subject {
        Some(_) => (0..model.n_subjects).map(Some).collect(),
        None => vec![None],
    };
    let derivs: Vec<BlockDerivs<T>> = groups
        .iter()
        .map(|&g| block_derivs(model, st, b, g))
        .collect();
    let old_beta = st.beta[b].clone();
    let n_eff = effective_n(model, b) as f64;
    let gw = blk.group_width();
    let mut tau2 = st.tau2[b].clone();
    for comp in 0..nv {
        let mut best: Option<(f64, T)> = None;
        for &lg in &cfg.variance_search_grid {
            let mut cand_tau = tau2.clone();
            cand_tau[comp] = T::lit(10f64.powf(lg));
            let p = blk.prior.precision(gw, &cand_tau);
            let mut edf = T::zero();
            let mut beta = old_beta.clone();
            let mut ok = true;
            for (g, d) in groups.iter().zip(&derivs) {
                match candidate_step(d, &p) {
                    Some((bc, e)) => {
                        edf += e;
                        let off = g.map_or(0, |i| i * gw);
                        beta.rows_mut(off, bc.len()).copy_from(&bc);
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            st.set_block(model, b, beta);
            let score = aicc(loglik(model, st).as_f64(), edf.as_f64(), n_eff);
            if score.is_finite() && best.is_none_or(|(s, _)| score < s) {
                best = Some((score, cand_tau[comp]));
            }
        }
        st.set_block(model, b, old_beta.clone());
        match best {
            Some((_, v)) => tau2[comp] = v,
            None => {
                return Err(Error::NonConcaveBlock {
                    block: blk.name.clone(),
                })
            }
        }
    }
    st.set_variances(b, tau2.clone());
    newton_update(model, st, b, cfg)?;
    Ok(tau2)
}

/// Newton sweeps over all blocks not skipped, with variance selection in
/// the first `variance_sweeps` sweeps; returns the sweep count and whether
/// the relative change fell below the tolerance.
fn sweeps<T: Real>(
    model: &JointModel<T>,
    st: &mut ThetaState<T>,
    cfg: &ModeFitConfig,
    skip: &dyn Fn(usize) -> bool,
    trace: &mut Vec<T>,
    steps: &mut Vec<(T, T)>,
    lp_old: &mut T,
) -> Result<(usize, bool)> {
    for sweep in 0..cfg.max_outer_iters {
        let mut variances_moved = false;
        for b in (0..model.blocks.len()).filter(|&b| !skip(b)) {
            steps.push(newton_update(model, st, b, cfg)?);
            if model.blocks[b].n_variances() > 0 && sweep < cfg.variance_sweeps {
                let old = st.tau2[b].clone();
                variances_moved |= optimize_variance(model, st, b, cfg)? != old;
            }
        }
        st.check_finite()?;
        let lp = log_posterior(model, st);
        trace.push(lp);
        let rel = ((lp - *lp_old) / lp_old.abs().max(T::one())).abs();
        *lp_old = lp;
        if !variances_moved && rel.as_f64() < cfg.logpost_rel_tol {
            return Ok((sweep + 1, true));
        }
    }
    Ok((cfg.max_outer_iters, false))
}

/// Blockwise Newton–Raphson from `start` until the relative log-posterior
/// change of a full sweep falls below the tolerance.
pub fn posterior_mode<T: Real>(
    model: &JointModel<T>,
    start: ThetaState<T>,
    cfg: &ModeFitConfig,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    let mut st = start;
    let mut trace = Vec::new();
    let mut steps = Vec::new();
    let mut lp_old = log_posterior(model, &st);
    if !lp_old.is_finite() {
        return Err(Error::Numerical {
            block: "start".into(),
            message: "log-posterior is not finite at the starting values".into(),
        });
    }
    let mut iterations = 0;
    if cfg.staged_start {
        let skip = |b: usize| model.blocks[b].predictor == Predictor::Alpha;
        iterations += sweeps(model, &mut st, cfg, &skip, &mut trace, &mut steps, &mut lp_old)?.0;
    }
    let (n, converged) = sweeps(model, &mut st, cfg, &|_| false, &mut trace, &mut steps, &mut lp_old)?;
    iterations += n;
    let sd = posterior_sd(model, &st, cfg)?;
    Ok(FitResult {
        log_posterior: log_posterior(model, &st),
        state: st,
        iterations,
        converged,
        trace,
        newton_steps: steps,
        sd,
    })
}

fn posterior_sd<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    cfg: &ModeFitConfig,
) -> Result<Vec<DVector<T>>> {
    (0..model.blocks.len())
        .map(|b| {
            let blk = &model.blocks[b];
            let groups: Vec<Option<usize>> = match blk.per_subject {
                Some(_) => (0..model.n_subjects).map(Some).collect(),
                None => vec![None],
            };
            let mut sd = DVector::zeros(blk.width);
            let gw = blk.group_width();
            for g in groups {
                let d = block_derivs(model, st, b, g);
                let (_, ch) =
                    precision_factor(&d.hessian(), cfg.ridge_boost, cfg.ridge_doublings, &blk.name)?;
                let cov = ch.inverse();
                let off = g.map_or(0, |i| i * gw);
                for j in 0..cov.nrows() {
                    sd[off + j] = cov[(j, j)].max(T::zero()).sqrt();
                }
            }
            Ok(sd)
        })
        .collect()
}
