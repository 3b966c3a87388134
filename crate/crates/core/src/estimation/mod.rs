//! Posterior-mode and posterior-mean estimation.

mod mcmc;
mod mode;
mod summary;

pub use mcmc::{
    gibbs_variance, mh_block_update, mh_group_update, posterior_mean, slice_variance, BlockLayout,
    McmcConfig,
    MhOutcome, SampleChain,
};
pub use mode::{
    initial_state, newton_group_update, newton_update, optimize_variance, posterior_mode, FitResult,
    ModeFitConfig,
};
pub use summary::{
    average_slope, dic, summarize, summarize_average_slope, summarize_draws, Dic, ScalarSummary,
};

use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::{Cholesky, DMatrix, Dyn};

/// `-H` made positive definite: plain Cholesky first, then a ridge of
/// `boost * max|diag|` doubled up to `doublings` times.
pub(crate) fn precision_factor<T: Real>(
    hessian: &DMatrix<T>,
    boost: f64,
    doublings: usize,
    block: &str,
) -> Result<(DMatrix<T>, Cholesky<T, Dyn>)> {
    let p = -hessian;
    if let Some(ch) = Cholesky::new(p.clone()) {
        return Ok((p, ch));
    }
    let n = p.nrows();
    let max_diag = (0..n).fold(T::zero(), |a, i| a.max(p[(i, i)].abs()));
    let mut lambda = T::lit(boost) * if max_diag > T::zero() { max_diag } else { T::one() };
    for _ in 0..=doublings {
        let mut q = p.clone();
        for i in 0..n {
            q[(i, i)] += lambda;
        }
        if let Some(ch) = Cholesky::new(q.clone()) {
            return Ok((q, ch));
        }
        lambda *= T::lit(2.0);
    }
    Err(Error::NonConcaveBlock {
        block: block.to_string(),
    })
}

/// `Σ log L_ii`, i.e. `½ log |P|`.
pub(crate) fn half_log_det<T: Real>(ch: &Cholesky<T, Dyn>) -> T {
    ch.l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |a, &d| a + d.ln())
}
