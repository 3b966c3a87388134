//! Parameter state with cached predictor evaluations, the joint
//! log-likelihood and log-posterior, and blockwise analytic scores and
//! Hessians.
//!
//! The cumulative hazard is the Gauss–Legendre sum over each subject's
//! survival points; scores and Hessians differentiate that sum, so they are
//! exact derivatives of the objective that is actually evaluated.

use crate::error::{Error, Result};
use crate::model::{AssocScratch, Block, Design, JointModel, Predictor, Prior, TermKind};
use crate::quadrature::QuadratureRule;
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use std::cell::Cell;

/// Shape and rate of the inverse-gamma hyperprior on every variance.
pub const IG_SHAPE: f64 = 0.001;
pub const IG_RATE: f64 = 0.001;

/// Coefficients and variances of all blocks plus predictor caches.
#[derive(Debug, Clone)]
pub struct ThetaState<T: nalgebra::Scalar> {
    pub beta: Vec<DVector<T>>,
    pub tau2: Vec<Vec<T>>,
    long_contrib: Vec<Vec<T>>,
    surv_contrib: Vec<Vec<T>>,
    subject_contrib: Vec<Vec<T>>,
    pub eta_mu_long: Vec<T>,
    pub eta_sigma_long: Vec<T>,
    pub eta_mu_surv: Vec<T>,
    pub eta_lambda_surv: Vec<T>,
    /// `η_α` and its first two derivatives in `η_μ` at the survival points.
    pub eta_alpha_surv: Vec<T>,
    pub alpha_d1: Vec<T>,
    pub alpha_d2: Vec<T>,
    /// Subject-level part of the log-hazard: γ plus α group intercepts.
    pub offset: Vec<T>,
    suspect: Cell<bool>,
}

impl<T: Real> ThetaState<T> {
    /// State with all coefficients zero and unit variances.
    pub fn zeros(model: &JointModel<T>) -> Self {
        let beta = model
            .blocks
            .iter()
            .map(|b| DVector::zeros(b.width))
            .collect();
        let tau2 = model
            .blocks
            .iter()
            .map(|b| vec![T::one(); b.n_variances()])
            .collect();
        Self::new(model, beta, tau2).expect("consistent dimensions")
    }

    pub fn new(model: &JointModel<T>, beta: Vec<DVector<T>>, tau2: Vec<Vec<T>>) -> Result<Self> {
        if beta.len() != model.blocks.len() || tau2.len() != model.blocks.len() {
            return Err(Error::Dimension("one coefficient vector per block expected".into()));
        }
        for (b, (bt, t2)) in model.blocks.iter().zip(beta.iter().zip(&tau2)) {
            if bt.len() != b.width || t2.len() != b.n_variances() {
                return Err(Error::Dimension(format!(
                    "block {}: expected {} coefficients and {} variances",
                    b.name,
                    b.width,
                    b.n_variances()
                )));
            }
            if t2.iter().any(|v| !(*v > T::zero())) {
                return Err(Error::Domain(format!(
                    "block {}: variances must be positive",
                    b.name
                )));
            }
        }
        let nb = model.blocks.len();
        let n_long = model.n_obs();
        let n_surv = model.n_surv_points();
        let n = model.n_subjects;
        let mut st = Self {
            beta,
            tau2,
            long_contrib: vec![Vec::new(); nb],
            surv_contrib: vec![Vec::new(); nb],
            subject_contrib: vec![Vec::new(); nb],
            eta_mu_long: vec![T::zero(); n_long],
            eta_sigma_long: vec![T::zero(); n_long],
            eta_mu_surv: vec![T::zero(); n_surv],
            eta_lambda_surv: vec![T::zero(); n_surv],
            eta_alpha_surv: vec![T::zero(); n_surv],
            alpha_d1: vec![T::zero(); n_surv],
            alpha_d2: vec![T::zero(); n_surv],
            offset: vec![T::zero(); n],
            suspect: Cell::new(false),
        };
        for b in 0..nb {
            st.compute_contrib(model, b);
        }
        for k in [Predictor::Lambda, Predictor::Gamma, Predictor::Mu, Predictor::Sigma] {
            st.refresh(model, k, None);
        }
        Ok(st)
    }

    fn compute_contrib(&mut self, model: &JointModel<T>, b: usize) {
        let blk = &model.blocks[b];
        let beta = &self.beta[b];
        if let Some(d) = &blk.long {
            self.long_contrib[b] = d.eval(beta);
        }
        if let Some(d) = &blk.surv {
            self.surv_contrib[b] = d.eval(beta);
        }
        if let Some(d) = &blk.subject {
            self.subject_contrib[b] = d.eval(beta);
        }
    }

    /// Recomputes the caches of predictor `k`, for one subject or all.
    fn refresh(&mut self, model: &JointModel<T>, k: Predictor, subject: Option<usize>) {
        let blocks: Vec<usize> = model.blocks_of(k).collect();
        let (long_rows, surv_rows) = match subject {
            Some(i) => (model.subject_rows[i].clone(), model.surv_points(i)),
            None => (0..model.n_obs(), 0..model.n_surv_points()),
        };
        let sum_into = |target: &mut [T], contrib: &[Vec<T>], rows: std::ops::Range<usize>| {
            for r in rows {
                let mut acc = T::zero();
                for &b in &blocks {
                    if !contrib[b].is_empty() {
                        acc += contrib[b][r];
                    }
                }
                target[r] = acc;
            }
        };
        match k {
            Predictor::Mu => {
                sum_into(&mut self.eta_mu_long, &self.long_contrib, long_rows);
                sum_into(&mut self.eta_mu_surv, &self.surv_contrib, surv_rows.clone());
                self.refresh_alpha(model, surv_rows);
            }
            Predictor::Sigma => sum_into(&mut self.eta_sigma_long, &self.long_contrib, long_rows),
            Predictor::Lambda => sum_into(&mut self.eta_lambda_surv, &self.surv_contrib, surv_rows),
            Predictor::Gamma | Predictor::Alpha => {
                let subj = match subject {
                    Some(i) => i..i + 1,
                    None => 0..model.n_subjects,
                };
                for i in subj {
                    let mut acc = T::zero();
                    for b in model.blocks_of(Predictor::Gamma).chain(model.blocks_of(Predictor::Alpha)) {
                        if !self.subject_contrib[b].is_empty() {
                            acc += self.subject_contrib[b][i];
                        }
                    }
                    self.offset[i] = acc;
                }
                if k == Predictor::Alpha {
                    self.refresh_alpha(model, surv_rows);
                }
            }
        }
    }

    fn refresh_alpha(&mut self, model: &JointModel<T>, rows: std::ops::Range<usize>) {
        let beta = self.beta[model.assoc_block].as_slice();
        let mut scratch = AssocScratch::new(model.assoc.p1);
        for r in rows {
            let g2 = crate::model::column_slice(&model.assoc.g2_surv, r);
            let (a, a1, a2) = model
                .assoc
                .eval_point(self.eta_mu_surv[r], g2, beta, &mut scratch, None);
            self.eta_alpha_surv[r] = a;
            self.alpha_d1[r] = a1;
            self.alpha_d2[r] = a2;
        }
    }

    /// Replaces the coefficients of block `b` and updates all caches.
    pub fn set_block(&mut self, model: &JointModel<T>, b: usize, beta: DVector<T>) {
        assert_eq!(beta.len(), model.blocks[b].width, "coefficient length");
        self.beta[b] = beta;
        self.compute_contrib(model, b);
        self.refresh(model, model.blocks[b].predictor, None);
    }

    /// Replaces the coefficients of subject `i` in a per-subject block.
    pub fn set_group(&mut self, model: &JointModel<T>, b: usize, i: usize, beta_i: &[T]) {
        let blk = &model.blocks[b];
        let w = blk.per_subject.expect("per-subject block");
        assert_eq!(beta_i.len(), w, "coefficient length");
        self.beta[b].as_mut_slice()[i * w..(i + 1) * w].copy_from_slice(beta_i);
        let beta = &self.beta[b];
        if let Some(d) = &blk.long {
            for r in model.subject_rows[i].clone() {
                self.long_contrib[b][r] = d.eval_point(r, beta);
            }
        }
        if let Some(d) = &blk.surv {
            for r in model.surv_points(i) {
                self.surv_contrib[b][r] = d.eval_point(r, beta);
            }
        }
        self.refresh(model, blk.predictor, Some(i));
    }

    pub fn set_variances(&mut self, b: usize, tau2: Vec<T>) {
        assert_eq!(tau2.len(), self.tau2[b].len(), "variance count");
        self.tau2[b] = tau2;
    }

    /// Whether an exponent had to be capped since the flag was last cleared.
    pub fn is_suspect(&self) -> bool {
        self.suspect.get()
    }

    pub fn clear_suspect(&self) {
        self.suspect.set(false);
    }

    fn exp_guarded(&self, x: T) -> T {
        let (v, capped) = x.exp_capped();
        if capped {
            self.suspect.set(true);
        }
        v
    }

    /// Fails with the offending predictor when a cache holds a non-finite
    /// value.
    pub fn check_finite(&self) -> Result<()> {
        let checks: [(&str, &[T]); 5] = [
            ("mu", &self.eta_mu_long),
            ("sigma", &self.eta_sigma_long),
            ("lambda", &self.eta_lambda_surv),
            ("alpha", &self.eta_alpha_surv),
            ("gamma", &self.offset),
        ];
        for (name, v) in checks {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical {
                    block: name.into(),
                    message: "non-finite predictor evaluation".into(),
                });
            }
        }
        if self.eta_mu_surv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                block: "mu".into(),
                message: "non-finite predictor at survival points".into(),
            });
        }
        Ok(())
    }

    /// Contribution of block `b` to its predictor at `(subject, t)`.
    pub fn eval_block_at(&self, model: &JointModel<T>, b: usize, subject: usize, t: T) -> T {
        model.eval_block_at(b, &self.beta[b], subject, t)
    }

    /// `η_k` at `(subject, t)` for λ, γ and μ.
    pub fn eval_predictor_at(&self, model: &JointModel<T>, k: Predictor, subject: usize, t: T) -> T {
        model
            .blocks_of(k)
            .fold(T::zero(), |acc, b| acc + self.eval_block_at(model, b, subject, t))
    }

    /// Log-hazard of subject `i` at time `t`, evaluated from the
    /// coefficients rather than the caches.
    pub fn log_hazard_at(&self, model: &JointModel<T>, i: usize, t: T) -> T {
        let lambda = self.eval_predictor_at(model, Predictor::Lambda, i, t);
        let mu = self.eval_predictor_at(model, Predictor::Mu, i, t);
        lambda + self.offset[i] + self.eval_association(model, mu, i, t)
    }

    /// `η_α` at marker value `eta_mu` for subject `i` at time `t`.
    pub fn eval_association(&self, model: &JointModel<T>, eta_mu: T, i: usize, t: T) -> T {
        let mut g2 = vec![T::zero(); model.assoc.p2];
        model.assoc.g2_row(i, t, &mut g2);
        let mut scratch = AssocScratch::new(model.assoc.p1);
        model
            .assoc
            .eval_point(eta_mu, &g2, self.beta[model.assoc_block].as_slice(), &mut scratch, None)
            .0
    }
}

/// Evaluates `η_α` for a vector of marker values with a shared `g₂` row.
pub fn eval_association<T: Real>(model: &JointModel<T>, beta: &[T], eta_mu: &[T], g2: &[T]) -> Result<Vec<T>> {
    let mut scratch = AssocScratch::new(model.assoc.p1);
    eta_mu
        .iter()
        .map(|&e| {
            if !e.is_finite() {
                return Err(Error::Numerical {
                    block: "alpha".into(),
                    message: "non-finite marker value".into(),
                });
            }
            Ok(model.assoc.eval_point(e, g2, beta, &mut scratch, None).0)
        })
        .collect()
}

/// Per-subject pieces of the log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectLik<T> {
    pub long: T,
    pub surv: T,
    pub cumhaz: T,
}

fn half_ln_2pi<T: Real>() -> T {
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Log-likelihood contributions of subject `i`.
pub fn subject_loglik<T: Real>(model: &JointModel<T>, st: &ThetaState<T>, i: usize) -> SubjectLik<T> {
    let mut long = T::zero();
    let half = T::lit(0.5);
    for r in model.subject_rows[i].clone() {
        let s = st.eta_sigma_long[r];
        let res = model.y[r] - st.eta_mu_long[r];
        long += -half_ln_2pi::<T>() - s - half * res * res * (-(s + s)).exp();
    }
    let mut cumhaz = T::zero();
    let pts = model.surv_points(i);
    for p in pts.clone() {
        let w = model.surv_point_weight[p];
        if w != T::zero() {
            cumhaz += w * st.exp_guarded(st.offset[i] + st.eta_lambda_surv[p] + st.eta_alpha_surv[p]);
        }
    }
    let t_pt = pts.end - 1;
    let mut surv = -cumhaz;
    if model.event[i] {
        surv += st.offset[i] + st.eta_lambda_surv[t_pt] + st.eta_alpha_surv[t_pt];
    }
    SubjectLik { long, surv, cumhaz }
}

pub fn long_loglik<T: Real>(model: &JointModel<T>, st: &ThetaState<T>) -> T {
    (0..model.n_subjects).fold(T::zero(), |acc, i| acc + subject_loglik(model, st, i).long)
}

pub fn surv_loglik<T: Real>(model: &JointModel<T>, st: &ThetaState<T>) -> T {
    (0..model.n_subjects).fold(T::zero(), |acc, i| acc + subject_loglik(model, st, i).surv)
}

pub fn loglik<T: Real>(model: &JointModel<T>, st: &ThetaState<T>) -> T {
    (0..model.n_subjects).fold(T::zero(), |acc, i| {
        let s = subject_loglik(model, st, i);
        acc + s.long + s.surv
    })
}

/// `Λ_i(T_i)` with the model's quadrature rule.
pub fn cumulative_hazard<T: Real>(model: &JointModel<T>, st: &ThetaState<T>, i: usize) -> T {
    subject_loglik(model, st, i).cumhaz
}

/// `Λ_i(T_i)` with an arbitrary rule, evaluating the predictors directly.
pub fn cumulative_hazard_with<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    i: usize,
    rule: &QuadratureRule<T>,
) -> T {
    rule.integrate(T::zero(), model.surv_time[i], |u| {
        st.exp_guarded(st.log_hazard_at(model, i, u))
    })
}

/// Log inverse-gamma hyperprior kernel of one variance.
pub fn log_ig<T: Real>(tau2: T) -> T {
    -(T::lit(IG_SHAPE) + T::one()) * tau2.ln() - T::lit(IG_RATE) / tau2
}

/// Log prior of block `b`: coefficient prior plus variance hyperpriors.
pub fn block_log_prior<T: Real>(model: &JointModel<T>, st: &ThetaState<T>, b: usize) -> T {
    let blk = &model.blocks[b];
    let tau2 = &st.tau2[b];
    blk.log_prior(&st.beta[b], tau2) + tau2.iter().fold(T::zero(), |a, &t| a + log_ig(t))
}

pub fn log_prior<T: Real>(model: &JointModel<T>, st: &ThetaState<T>) -> T {
    (0..model.blocks.len()).fold(T::zero(), |acc, b| acc + block_log_prior(model, st, b))
}

pub fn log_posterior<T: Real>(model: &JointModel<T>, st: &ThetaState<T>) -> T {
    loglik(model, st) + log_prior(model, st)
}

/// Part of the log-posterior that depends on the coefficients of subject
/// `i` in a per-subject block.
pub fn group_log_posterior<T: Real>(model: &JointModel<T>, st: &ThetaState<T>, b: usize, i: usize) -> T {
    let s = subject_loglik(model, st, i);
    let blk = &model.blocks[b];
    let w = blk.group_width();
    let beta_i = st.beta[b].rows(i * w, w).into_owned();
    let p = blk.prior.precision(w, &st.tau2[b]);
    s.long + s.surv - T::lit(0.5) * (&p * &beta_i).dot(&beta_i)
}

/// Per-point first and second derivative weights of subject `i` with
/// respect to predictor `k`.
#[derive(Debug, Clone, Default)]
struct Weights<T> {
    long1: Vec<T>,
    long2: Vec<T>,
    surv1: Vec<T>,
    surv2: Vec<T>,
    subj1: T,
    subj2: T,
}

fn subject_weights<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    k: Predictor,
    kind: TermKind,
    i: usize,
    w: &mut Weights<T>,
) {
    w.long1.clear();
    w.long2.clear();
    w.surv1.clear();
    w.surv2.clear();
    let rows = model.subject_rows[i].clone();
    let pts = model.surv_points(i);
    let t_pt = pts.end - 1;
    let ev = |p: usize| {
        if p == t_pt && model.event[i] {
            T::one()
        } else {
            T::zero()
        }
    };
    let c = |p: usize| {
        let wt = model.surv_point_weight[p];
        if wt == T::zero() {
            T::zero()
        } else {
            wt * st.exp_guarded(st.offset[i] + st.eta_lambda_surv[p] + st.eta_alpha_surv[p])
        }
    };
    match (k, kind) {
        (Predictor::Mu, _) => {
            for r in rows {
                let prec = (-(st.eta_sigma_long[r] + st.eta_sigma_long[r])).exp();
                w.long1.push((model.y[r] - st.eta_mu_long[r]) * prec);
                w.long2.push(-prec);
            }
            for p in pts {
                let (cp, e) = (c(p), ev(p));
                let (a1, a2) = (st.alpha_d1[p], st.alpha_d2[p]);
                w.surv1.push((e - cp) * a1);
                w.surv2.push(e * a2 - cp * (a1 * a1 + a2));
            }
        }
        (Predictor::Sigma, _) => {
            for r in rows {
                let prec = (-(st.eta_sigma_long[r] + st.eta_sigma_long[r])).exp();
                let res = model.y[r] - st.eta_mu_long[r];
                let q = res * res * prec;
                w.long1.push(q - T::one());
                w.long2.push(-(q + q));
            }
        }
        (Predictor::Gamma, _) | (Predictor::Alpha, TermKind::GroupIntercepts) => {
            let lam = pts.fold(T::zero(), |a, p| a + c(p));
            w.subj1 = if model.event[i] { T::one() } else { T::zero() } - lam;
            w.subj2 = -lam;
        }
        (Predictor::Lambda, _) | (Predictor::Alpha, _) => {
            for p in pts {
                let cp = c(p);
                w.surv1.push(ev(p) - cp);
                w.surv2.push(-cp);
            }
        }
    }
}

fn add_point<T: Real>(
    s: &mut DVector<T>,
    h: Option<&mut DMatrix<T>>,
    off: usize,
    row: &[T],
    w1: T,
    w2: T,
) {
    for (j, &x) in row.iter().enumerate() {
        s[off + j] += x * w1;
    }
    if let Some(h) = h {
        for (j, &xj) in row.iter().enumerate() {
            let f = xj * w2;
            if f == T::zero() {
                continue;
            }
            for (l, &xl) in row.iter().enumerate().skip(j) {
                h[(off + j, off + l)] += f * xl;
            }
        }
    }
}

fn accumulate_design<T: Real>(
    d: &Design<T>,
    points: std::ops::Range<usize>,
    w1: &[T],
    w2: &[T],
    shift: usize,
    s: &mut DVector<T>,
    mut h: Option<&mut DMatrix<T>>,
) {
    for (idx, r) in points.enumerate() {
        let (off, row) = d.point(r);
        add_point(s, h.as_deref_mut(), off - shift, row, w1[idx], w2[idx]);
    }
}

/// Log-likelihood gradient and (upper-triangle filled, then symmetrised)
/// Hessian of block `b`, over all subjects or only subject `group` of a
/// per-subject block (then in local coordinates).
fn lik_derivs<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    b: usize,
    group: Option<usize>,
    want_hessian: bool,
) -> (DVector<T>, Option<DMatrix<T>>) {
    let blk: &Block<T> = &model.blocks[b];
    let dim = match group {
        Some(_) => blk.group_width(),
        None => blk.width,
    };
    let mut s = DVector::zeros(dim);
    let mut h = if want_hessian {
        Some(DMatrix::zeros(dim, dim))
    } else {
        None
    };
    let subjects = match group {
        Some(i) => i..i + 1,
        None => 0..model.n_subjects,
    };
    let mut w = Weights::default();
    let is_assoc = b == model.assoc_block;
    let mut scratch = AssocScratch::new(model.assoc.p1);
    let mut xrow = vec![T::zero(); if is_assoc { blk.width } else { 0 }];
    for i in subjects {
        let shift = match group {
            Some(_) => i * blk.group_width(),
            None => 0,
        };
        subject_weights(model, st, blk.predictor, blk.kind, i, &mut w);
        if let Some(d) = &blk.long {
            accumulate_design(d, model.subject_rows[i].clone(), &w.long1, &w.long2, shift, &mut s, h.as_mut());
        }
        if let Some(d) = &blk.surv {
            accumulate_design(d, model.surv_points(i), &w.surv1, &w.surv2, shift, &mut s, h.as_mut());
        }
        if let Some(d) = &blk.subject {
            accumulate_design(d, i..i + 1, &[w.subj1], &[w.subj2], shift, &mut s, h.as_mut());
        }
        if is_assoc {
            let beta = st.beta[b].as_slice();
            for (idx, p) in model.surv_points(i).enumerate() {
                let g2 = crate::model::column_slice(&model.assoc.g2_surv, p);
                model
                    .assoc
                    .eval_point(st.eta_mu_surv[p], g2, beta, &mut scratch, Some(&mut xrow));
                add_point(&mut s, h.as_mut(), 0, &xrow, w.surv1[idx], w.surv2[idx]);
            }
        }
    }
    if let Some(h) = h.as_mut() {
        symmetrize_upper(h);
    }
    (s, h)
}

fn symmetrize_upper<T: Real>(h: &mut DMatrix<T>) {
    let n = h.nrows();
    for j in 0..n {
        for l in j + 1..n {
            h[(l, j)] = h[(j, l)];
        }
    }
}

/// Prior precision of block `b` (or of one subject group) at the current
/// variances.
pub fn prior_precision<T: Real>(model: &JointModel<T>, st: &ThetaState<T>, b: usize, group: Option<usize>) -> DMatrix<T> {
    let blk = &model.blocks[b];
    let gw = blk.group_width();
    let p = blk.prior.precision(gw, &st.tau2[b]);
    if group.is_some() || blk.per_subject.is_none() {
        return p;
    }
    let mut full = DMatrix::zeros(blk.width, blk.width);
    for g in 0..blk.n_groups() {
        full.view_mut((g * gw, g * gw), (gw, gw)).copy_from(&p);
    }
    full
}

/// Curvature pieces of one block: log-likelihood gradient and Hessian, and
/// the prior precision.
#[derive(Debug, Clone)]
pub struct BlockDerivs<T: nalgebra::Scalar> {
    pub lik_score: DVector<T>,
    pub lik_hessian: DMatrix<T>,
    pub precision: DMatrix<T>,
    pub beta: DVector<T>,
}

impl<T: Real> BlockDerivs<T> {
    /// Log-posterior gradient `s − P β`.
    pub fn score(&self) -> DVector<T> {
        &self.lik_score - &self.precision * &self.beta
    }

    /// Log-posterior Hessian `H − P`.
    pub fn hessian(&self) -> DMatrix<T> {
        &self.lik_hessian - &self.precision
    }
}

pub fn block_derivs<T: Real>(
    model: &JointModel<T>,
    st: &ThetaState<T>,
    b: usize,
    group: Option<usize>,
) -> BlockDerivs<T> {
    let (s, h) = lik_derivs(model, st, b, group, true);
    let beta = match group {
        Some(i) => {
            let w = model.blocks[b].group_width();
            st.beta[b].rows(i * w, w).into_owned()
        }
        None => st.beta[b].clone(),
    };
    BlockDerivs {
        lik_score: s,
        lik_hessian: h.expect("hessian requested"),
        precision: prior_precision(model, st, b, group),
        beta,
    }
}

/// Log-posterior gradient of block `b`.
pub fn score<T: Real>(model: &JointModel<T>, st: &ThetaState<T>, b: usize) -> DVector<T> {
    let (s, _) = lik_derivs(model, st, b, None, false);
    s - prior_precision(model, st, b, None) * &st.beta[b]
}

/// Log-posterior Hessian of block `b`.
pub fn hessian<T: Real>(model: &JointModel<T>, st: &ThetaState<T>, b: usize) -> DMatrix<T> {
    block_derivs(model, st, b, None).hessian()
}

/// Whether block `b` uses the vague parametric prior.
pub fn is_parametric<T: Real>(model: &JointModel<T>, b: usize) -> bool {
    matches!(model.blocks[b].prior, Prior::Vague)
}
