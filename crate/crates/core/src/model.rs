//! Model specification and its compiled form.
//!
//! A [`JointModelSpec`] lists the additive terms of the predictors λ, γ, μ and
//! σ and the association structure of α. [`JointModel::build`] turns it into
//! coefficient blocks with design matrices evaluated at
//!
//! * the `N` longitudinal measurement times (μ, σ),
//! * `n (Q + 1)` survival points: for every subject `Q` quadrature nodes on
//!   `[0, T_i]` followed by `T_i` itself (λ, μ, α),
//! * the `n` subjects (γ and the group intercepts of α).
//!
//! Designs are stored transposed (`p × rows`) so one evaluation point is a
//! contiguous column.

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;
use crate::scalar::Real;
use crate::spline::{
    alpha_constraint_grid, column_sums, difference_penalty, BasisEvaluator, BasisSpec,
    ConstraintTransform,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::ops::Range;

pub const DEFAULT_QUADRATURE_NODES: usize = 15;
pub const DEFAULT_ALPHA_GRID_SIZE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Lambda,
    Gamma,
    Alpha,
    Mu,
    Sigma,
}

impl Predictor {
    pub const ALL: [Predictor; 5] = [
        Predictor::Lambda,
        Predictor::Gamma,
        Predictor::Alpha,
        Predictor::Mu,
        Predictor::Sigma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predictor::Lambda => "lambda",
            Predictor::Gamma => "gamma",
            Predictor::Alpha => "alpha",
            Predictor::Mu => "mu",
            Predictor::Sigma => "sigma",
        }
    }
}

impl std::fmt::Display for Predictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Predictor::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown predictor `{s}`")))
    }
}

/// Size of a P-spline basis; unset fields take the defaults of the context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_basis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff_order: Option<usize>,
}

impl SmoothSpec {
    pub fn with_basis(n_basis: usize) -> Self {
        Self {
            n_basis: Some(n_basis),
            ..Self::default()
        }
    }

    /// Raw basis size, degree and difference order.
    pub fn resolve(&self, default_n_basis: usize) -> (usize, usize, usize) {
        (
            self.n_basis.unwrap_or(default_n_basis),
            self.degree.unwrap_or(3),
            self.diff_order.unwrap_or(2),
        )
    }

    fn basis<T: Real>(&self, default_n_basis: usize, lower: T, upper: T) -> Result<BasisSpec<T>> {
        let (p, l, r) = self.resolve(default_n_basis);
        BasisSpec::equidistant(lower, upper, p, l, r)
    }
}

/// One additive term as written in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermSpec {
    Intercept,
    LinearCovariate {
        covariate: String,
    },
    PsplineCovariate {
        covariate: String,
        #[serde(flatten)]
        smooth: SmoothSpec,
    },
    PsplineTime {
        #[serde(flatten)]
        smooth: SmoothSpec,
    },
    RandomIntercept,
    FunctionalRandomIntercept {
        #[serde(flatten)]
        smooth: SmoothSpec,
    },
    /// Smooth function of time multiplying a baseline covariate.
    TimeVaryingCovariate {
        covariate: String,
        #[serde(flatten)]
        smooth: SmoothSpec,
    },
}

impl TermSpec {
    pub fn kind(&self) -> TermKind {
        match self {
            TermSpec::Intercept => TermKind::Intercept,
            TermSpec::LinearCovariate { .. } => TermKind::LinearCovariate,
            TermSpec::PsplineCovariate { .. } => TermKind::PsplineCovariate,
            TermSpec::PsplineTime { .. } => TermKind::PsplineTime,
            TermSpec::RandomIntercept => TermKind::RandomIntercept,
            TermSpec::FunctionalRandomIntercept { .. } => TermKind::FunctionalRandomIntercept,
            TermSpec::TimeVaryingCovariate { .. } => TermKind::TimeVaryingCovariate,
        }
    }

    fn label(&self) -> String {
        match self {
            TermSpec::Intercept => "intercept".into(),
            TermSpec::LinearCovariate { covariate } => covariate.clone(),
            TermSpec::PsplineCovariate { covariate, .. } => format!("s({covariate})"),
            TermSpec::PsplineTime { .. } => "s(time)".into(),
            TermSpec::RandomIntercept => "re(id)".into(),
            TermSpec::FunctionalRandomIntercept { .. } => "fre(id,time)".into(),
            TermSpec::TimeVaryingCovariate { covariate, .. } => format!("s(time):{covariate}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    LinearCovariate,
    PsplineCovariate,
    PsplineTime,
    RandomIntercept,
    FunctionalRandomIntercept,
    TimeVaryingCovariate,
    AssocLinear,
    AssocNonlinear,
    GroupIntercepts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum G1Spec {
    Identity,
    Pspline {
        #[serde(flatten)]
        smooth: SmoothSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum G2Spec {
    Constant,
    Covariate {
        covariate: String,
    },
    GroupFactor {
        covariate: String,
    },
    PsplineTime {
        #[serde(flatten)]
        smooth: SmoothSpec,
    },
}

/// Association `η_α = [g₁(η_μ) ⊙ g₂(x, t)] β_α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssocSpec {
    pub g1: G1Spec,
    #[serde(default = "constant_g2")]
    pub g2: G2Spec,
}

fn constant_g2() -> G2Spec {
    G2Spec::Constant
}

impl AssocSpec {
    pub fn linear() -> Self {
        Self {
            g1: G1Spec::Identity,
            g2: G2Spec::Constant,
        }
    }

    pub fn nonlinear() -> Self {
        Self {
            g1: G1Spec::Pspline {
                smooth: SmoothSpec::default(),
            },
            g2: G2Spec::Constant,
        }
    }

    pub fn is_nonlinear(&self) -> bool {
        matches!(self.g1, G1Spec::Pspline { .. })
    }
}

fn default_quadrature_nodes() -> usize {
    DEFAULT_QUADRATURE_NODES
}

fn default_alpha_grid_size() -> usize {
    DEFAULT_ALPHA_GRID_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointModelSpec {
    #[serde(default)]
    pub lambda: Vec<TermSpec>,
    #[serde(default)]
    pub gamma: Vec<TermSpec>,
    #[serde(default)]
    pub mu: Vec<TermSpec>,
    #[serde(default)]
    pub sigma: Vec<TermSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AssocSpec>,
    #[serde(default = "default_quadrature_nodes")]
    pub quadrature_nodes: usize,
    #[serde(default = "default_alpha_grid_size")]
    pub alpha_grid_size: usize,
}

pub const LAMBDA_BASIS: usize = 10;
pub const MU_TIME_BASIS: usize = 6;
pub const FUNCTIONAL_BASIS: usize = 6;
pub const ALPHA_BASIS: usize = 6;
pub const COVARIATE_BASIS: usize = 8;

impl Default for JointModelSpec {
    /// Smooth baseline hazard, intercept-only γ and σ, smooth mean trajectory
    /// with functional random intercepts, and a linear association.
    fn default() -> Self {
        Self {
            lambda: vec![TermSpec::PsplineTime {
                smooth: SmoothSpec::default(),
            }],
            gamma: vec![TermSpec::Intercept],
            mu: vec![
                TermSpec::Intercept,
                TermSpec::PsplineTime {
                    smooth: SmoothSpec::default(),
                },
                TermSpec::RandomIntercept,
                TermSpec::FunctionalRandomIntercept {
                    smooth: SmoothSpec::default(),
                },
            ],
            sigma: vec![TermSpec::Intercept],
            alpha: Some(AssocSpec::linear()),
            quadrature_nodes: DEFAULT_QUADRATURE_NODES,
            alpha_grid_size: DEFAULT_ALPHA_GRID_SIZE,
        }
    }
}

impl JointModelSpec {
    pub fn terms(&self, k: Predictor) -> &[TermSpec] {
        match k {
            Predictor::Lambda => &self.lambda,
            Predictor::Gamma => &self.gamma,
            Predictor::Mu => &self.mu,
            Predictor::Sigma => &self.sigma,
            Predictor::Alpha => &[],
        }
    }

    pub fn association(&self) -> Result<&AssocSpec> {
        self.alpha
            .as_ref()
            .ok_or_else(|| Error::Config("the association (alpha) section is required".into()))
    }

    /// Checks which term kinds each predictor may hold and the intercept
    /// placement: γ, μ and σ carry exactly one intercept, λ none (the
    /// survival intercept lives in γ).
    pub fn validate(&self) -> Result<()> {
        use TermKind as K;
        self.association()?;
        if self.quadrature_nodes == 0 {
            return Err(Error::Config("quadrature_nodes must be positive".into()));
        }
        if self.alpha_grid_size < 2 {
            return Err(Error::Config("alpha_grid_size must be at least 2".into()));
        }
        let allowed: [(Predictor, &[K]); 4] = [
            (Predictor::Lambda, &[K::PsplineTime, K::TimeVaryingCovariate]),
            (
                Predictor::Gamma,
                &[K::Intercept, K::LinearCovariate, K::PsplineCovariate],
            ),
            (
                Predictor::Mu,
                &[
                    K::Intercept,
                    K::LinearCovariate,
                    K::PsplineCovariate,
                    K::PsplineTime,
                    K::RandomIntercept,
                    K::FunctionalRandomIntercept,
                ],
            ),
            (
                Predictor::Sigma,
                &[K::Intercept, K::LinearCovariate, K::PsplineCovariate, K::PsplineTime],
            ),
        ];
        for (k, kinds) in allowed {
            let terms = self.terms(k);
            for t in terms {
                if !kinds.contains(&t.kind()) {
                    return Err(Error::Config(format!(
                        "term kind {:?} is not allowed in predictor {k}",
                        t.kind()
                    )));
                }
            }
            let intercepts = terms.iter().filter(|t| t.kind() == K::Intercept).count();
            if k != Predictor::Lambda && intercepts != 1 {
                return Err(Error::Config(format!(
                    "predictor {k} needs exactly one intercept (found {intercepts})"
                )));
            }
            for unique in [K::RandomIntercept, K::FunctionalRandomIntercept, K::PsplineTime] {
                if terms.iter().filter(|t| t.kind() == unique).count() > 1 {
                    return Err(Error::Config(format!(
                        "predictor {k} holds more than one {unique:?} term"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Transposed design: column `r` holds the row of evaluation point `r`.
#[derive(Debug, Clone)]
pub enum Design<T: nalgebra::Scalar> {
    Dense(DMatrix<T>),
    /// Indicator-by-basis tensor: point `r` only touches coefficients
    /// `owner[r] * width .. (owner[r] + 1) * width`.
    PerSubject {
        width: usize,
        owner: Vec<usize>,
        xt: DMatrix<T>,
    },
}

impl<T: Real> Design<T> {
    pub fn n_points(&self) -> usize {
        match self {
            Design::Dense(xt) => xt.ncols(),
            Design::PerSubject { xt, .. } => xt.ncols(),
        }
    }

    /// Local row of point `r` and the offset of its first coefficient.
    pub fn point(&self, r: usize) -> (usize, &[T]) {
        match self {
            Design::Dense(xt) => (0, column_slice(xt, r)),
            Design::PerSubject { width, owner, xt } => (owner[r] * width, column_slice(xt, r)),
        }
    }

    pub fn eval(&self, beta: &DVector<T>) -> Vec<T> {
        (0..self.n_points()).map(|r| self.eval_point(r, beta)).collect()
    }

    pub fn eval_point(&self, r: usize, beta: &DVector<T>) -> T {
        let (off, row) = self.point(r);
        row.iter()
            .zip(beta.as_slice()[off..].iter())
            .fold(T::zero(), |acc, (&x, &b)| acc + x * b)
    }

    /// Dense `rows × p` matrix.
    pub fn to_dense(&self, p: usize) -> DMatrix<T> {
        let mut x = DMatrix::zeros(self.n_points(), p);
        for r in 0..self.n_points() {
            let (off, row) = self.point(r);
            for (j, &v) in row.iter().enumerate() {
                x[(r, off + j)] = v;
            }
        }
        x
    }
}

/// Column `r` of a column-major matrix as a slice.
pub(crate) fn column_slice<T: nalgebra::Scalar>(m: &DMatrix<T>, r: usize) -> &[T] {
    let p = m.nrows();
    &m.as_slice()[r * p..(r + 1) * p]
}

/// Gaussian prior of one block, before scaling by the variances.
#[derive(Debug, Clone)]
pub enum Prior<T: nalgebra::Scalar> {
    /// `N(0, 1000² I)`.
    Vague,
    /// Precision `K / τ²`.
    Isotropic { k: DMatrix<T>, rank: usize },
    /// Precision `(K₁ ⊗ I) / τ₁² + (I ⊗ K₂) / τ₂²`; `e1`, `e2` are the
    /// marginal eigenvalues and a pair `(i, j)` is null when both are zero.
    Anisotropic {
        k1: DMatrix<T>,
        k2: DMatrix<T>,
        e1: Vec<T>,
        e2: Vec<T>,
        null1: Vec<bool>,
        null2: Vec<bool>,
    },
}

impl<T: Real> Prior<T> {
    pub fn n_variances(&self) -> usize {
        match self {
            Prior::Vague => 0,
            Prior::Isotropic { .. } => 1,
            Prior::Anisotropic { .. } => 2,
        }
    }

    pub fn anisotropic(k1m: &DMatrix<T>, k2m: &DMatrix<T>) -> Self {
        let (p1, p2) = (k1m.nrows(), k2m.nrows());
        let k1 = k1m.kronecker(&DMatrix::identity(p2, p2));
        let k2 = DMatrix::identity(p1, p1).kronecker(k2m);
        let (e1, null1) = eigen_with_nulls(k1m);
        let (e2, null2) = eigen_with_nulls(k2m);
        Prior::Anisotropic {
            k1,
            k2,
            e1,
            e2,
            null1,
            null2,
        }
    }

    /// Number of non-null directions of the precision.
    pub fn rank(&self, width: usize) -> usize {
        match self {
            Prior::Vague => width,
            Prior::Isotropic { rank, .. } => *rank,
            Prior::Anisotropic { null1, null2, .. } => null1
                .iter()
                .map(|&a| null2.iter().filter(|&&b| !(a && b)).count())
                .sum(),
        }
    }

    /// Precision matrix for the given variances.
    pub fn precision(&self, width: usize, tau2: &[T]) -> DMatrix<T> {
        match self {
            Prior::Vague => DMatrix::identity(width, width) * vague_precision::<T>(),
            Prior::Isotropic { k, .. } => k / tau2[0],
            Prior::Anisotropic { k1, k2, .. } => k1 / tau2[0] + k2 / tau2[1],
        }
    }

    /// `½ log |P|₊` over the non-null directions.
    pub fn half_log_det(&self, width: usize, tau2: &[T]) -> T {
        let half = T::lit(0.5);
        match self {
            Prior::Vague => T::zero(),
            Prior::Isotropic { rank, .. } => {
                -half * T::from_usize_lossy(*rank) * tau2[0].ln()
            }
            Prior::Anisotropic {
                e1,
                e2,
                null1,
                null2,
                ..
            } => {
                let _ = width;
                let mut acc = T::zero();
                for (i, &a) in e1.iter().enumerate() {
                    for (j, &b) in e2.iter().enumerate() {
                        if null1[i] && null2[j] {
                            continue;
                        }
                        acc += (a / tau2[0] + b / tau2[1]).ln();
                    }
                }
                half * acc
            }
        }
    }
}

pub fn vague_precision<T: Real>() -> T {
    T::lit(1e-6)
}

fn eigen_with_nulls<T: Real>(k: &DMatrix<T>) -> (Vec<T>, Vec<bool>) {
    let eig = SymmetricEigen::new(k.clone());
    let vals: Vec<T> = eig.eigenvalues.iter().map(|&v| v.max(T::zero())).collect();
    let max = vals.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let tol = max * T::lit(1e-10);
    let nulls = vals.iter().map(|&v| v <= tol).collect();
    (vals, nulls)
}

/// Pointwise evaluation of one term at `(subject, time)` on the survival
/// side.
#[derive(Debug, Clone)]
pub enum TermBuilder<T: nalgebra::Scalar> {
    Intercept,
    /// Design columns per subject.
    Covariate { columns: Vec<Vec<T>> },
    Smooth {
        basis: BasisEvaluator<T>,
        z: ConstraintTransform<T>,
        values: Vec<T>,
    },
    Time {
        basis: BasisEvaluator<T>,
        z: ConstraintTransform<T>,
    },
    TimeVarying {
        basis: BasisEvaluator<T>,
        values: Vec<T>,
    },
    RandomIntercept,
    Functional {
        basis: BasisEvaluator<T>,
        z: ConstraintTransform<T>,
    },
    GroupIntercepts { codes: Vec<usize> },
    /// Survival-side evaluation is unavailable (σ terms, longitudinal-only
    /// covariates) or handled by [`Association`].
    None,
}

impl<T: Real> TermBuilder<T> {
    /// Width of one local row.
    pub fn local_width(&self, width: usize) -> usize {
        width
    }

    /// Writes the local row at `(subject, t)`; returns `false` when the term
    /// has no survival-side evaluation.
    pub fn row_into(&self, subject: usize, t: T, out: &mut [T]) -> bool {
        let mut raw = Vec::new();
        match self {
            TermBuilder::Intercept => out[0] = T::one(),
            TermBuilder::Covariate { columns } => {
                for (o, c) in out.iter_mut().zip(columns) {
                    *o = c[subject];
                }
            }
            TermBuilder::Smooth { basis, z, values } => {
                raw_row(basis, values[subject], &mut raw);
                z.apply_row(&raw, out);
            }
            TermBuilder::Time { basis, z } | TermBuilder::Functional { basis, z } => {
                raw_row(basis, t, &mut raw);
                z.apply_row(&raw, out);
            }
            TermBuilder::TimeVarying { basis, values } => {
                raw_row(basis, t, &mut raw);
                for (o, r) in out.iter_mut().zip(&raw) {
                    *o = *r * values[subject];
                }
            }
            TermBuilder::RandomIntercept => out[0] = T::one(),
            TermBuilder::GroupIntercepts { codes } => {
                out.iter_mut().for_each(|o| *o = T::zero());
                if codes[subject] > 0 {
                    out[codes[subject] - 1] = T::one();
                }
            }
            TermBuilder::None => return false,
        }
        true
    }
}

fn raw_row<T: Real>(basis: &BasisEvaluator<T>, x: T, out: &mut Vec<T>) {
    let mut vals = Vec::new();
    let first = basis.eval_into(x, 0, &mut vals);
    out.clear();
    out.resize(basis.n_basis(), T::zero());
    for (o, v) in vals.into_iter().enumerate() {
        out[first + o] = v;
    }
}

/// One coefficient block.
#[derive(Debug, Clone)]
pub struct Block<T: nalgebra::Scalar> {
    pub name: String,
    pub predictor: Predictor,
    pub kind: TermKind,
    /// Total number of coefficients.
    pub width: usize,
    /// `Some(w)` when coefficients split into independent per-subject groups
    /// of size `w` (random intercepts, functional random intercepts).
    pub per_subject: Option<usize>,
    pub long: Option<Design<T>>,
    pub surv: Option<Design<T>>,
    pub subject: Option<Design<T>>,
    /// Prior precision of one coefficient group (the whole block unless
    /// `per_subject` is set).
    pub prior: Prior<T>,
    pub builder: TermBuilder<T>,
}

impl<T: Real> Block<T> {
    pub fn n_variances(&self) -> usize {
        self.prior.n_variances()
    }

    pub fn group_width(&self) -> usize {
        self.per_subject.unwrap_or(self.width)
    }

    pub fn n_groups(&self) -> usize {
        self.width / self.group_width()
    }

    pub fn prior_rank(&self) -> usize {
        self.prior.rank(self.group_width()) * self.n_groups()
    }

    /// `βᵀ K β` per variance component.
    pub fn quad_forms(&self, beta: &DVector<T>) -> Vec<T> {
        let w = self.group_width();
        let mut out = vec![T::zero(); self.n_variances().max(1)];
        for g in 0..self.n_groups() {
            let b = beta.rows(g * w, w);
            match &self.prior {
                Prior::Vague => out[0] += b.dot(&b),
                Prior::Isotropic { k, .. } => out[0] += (k * b).dot(&b),
                Prior::Anisotropic { k1, k2, .. } => {
                    out[0] += (k1 * b).dot(&b);
                    out[1] += (k2 * b).dot(&b);
                }
            }
        }
        out
    }

    /// Log prior density of the coefficients (normal kernel plus the
    /// variance-dependent normaliser).
    pub fn log_prior(&self, beta: &DVector<T>, tau2: &[T]) -> T {
        let q = self.quad_forms(beta);
        let half = T::lit(0.5);
        match &self.prior {
            Prior::Vague => -half * q[0] * vague_precision::<T>(),
            Prior::Isotropic { .. } => {
                self.prior.half_log_det(self.group_width(), tau2) * T::from_usize_lossy(self.n_groups())
                    - half * q[0] / tau2[0]
            }
            Prior::Anisotropic { .. } => {
                self.prior.half_log_det(self.group_width(), tau2) * T::from_usize_lossy(self.n_groups())
                    - half * (q[0] / tau2[0] + q[1] / tau2[1])
            }
        }
    }
}

/// First factor of the association.
#[derive(Debug, Clone)]
pub enum G1<T: nalgebra::Scalar> {
    Identity,
    Spline {
        basis: BasisEvaluator<T>,
        z: ConstraintTransform<T>,
        spec: BasisSpec<T>,
    },
}

/// Second factor of the association, evaluated per survival point.
#[derive(Debug, Clone)]
pub enum G2<T: nalgebra::Scalar> {
    Constant,
    /// `(1, x)` with `x` the design columns of a baseline covariate.
    Covariate { columns: Vec<Vec<T>> },
    /// One indicator per level (all levels).
    Group { codes: Vec<usize>, levels: Vec<String> },
    Time { basis: BasisEvaluator<T> },
}

#[derive(Debug, Clone)]
pub struct Association<T: nalgebra::Scalar> {
    pub g1: G1<T>,
    pub g2: G2<T>,
    pub p1: usize,
    pub p2: usize,
    /// Fixed response grid of the identifiability constraint (nonlinear g₁).
    pub grid: Vec<T>,
    /// `g₂` rows at the survival points, `p2 × n(Q+1)`.
    pub g2_surv: DMatrix<T>,
}

impl<T: Real> Association<T> {
    pub fn width(&self) -> usize {
        self.p1 * self.p2
    }

    pub fn is_nonlinear(&self) -> bool {
        matches!(self.g1, G1::Spline { .. })
    }

    /// `g₁` row and its first two derivatives at `eta`.
    pub fn g1_derivs(&self, eta: T, g: &mut [T], d1: &mut [T], d2: &mut [T]) {
        match &self.g1 {
            G1::Identity => {
                g[0] = eta;
                d1[0] = T::one();
                d2[0] = T::zero();
            }
            G1::Spline { basis, z, .. } => {
                let mut vals = Vec::new();
                let mut raw = vec![T::zero(); basis.n_basis()];
                for (order, out) in [(0usize, &mut *g), (1, &mut *d1), (2, &mut *d2)] {
                    raw.iter_mut().for_each(|v| *v = T::zero());
                    let first = basis.eval_into(eta, order, &mut vals);
                    for (o, &v) in vals.iter().enumerate() {
                        raw[first + o] = v;
                    }
                    z.apply_row(&raw, out);
                }
            }
        }
    }

    /// Whole-vector form returning `(g₁, g₁′, g₁″)` as `len × p1` matrices.
    pub fn g1_matrices(&self, eta: &[T]) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let p1 = self.p1;
        let mut g = DMatrix::zeros(eta.len(), p1);
        let mut d1 = DMatrix::zeros(eta.len(), p1);
        let mut d2 = DMatrix::zeros(eta.len(), p1);
        let (mut a, mut b, mut c) = (vec![T::zero(); p1], vec![T::zero(); p1], vec![T::zero(); p1]);
        for (i, &e) in eta.iter().enumerate() {
            self.g1_derivs(e, &mut a, &mut b, &mut c);
            for j in 0..p1 {
                g[(i, j)] = a[j];
                d1[(i, j)] = b[j];
                d2[(i, j)] = c[j];
            }
        }
        (g, d1, d2)
    }

    /// `g₂` row at `(subject, t)`.
    pub fn g2_row(&self, subject: usize, t: T, out: &mut [T]) {
        match &self.g2 {
            G2::Constant => out[0] = T::one(),
            G2::Covariate { columns } => {
                out[0] = T::one();
                for (o, c) in out[1..].iter_mut().zip(columns) {
                    *o = c[subject];
                }
            }
            G2::Group { codes, .. } => {
                out.iter_mut().for_each(|o| *o = T::zero());
                out[codes[subject]] = T::one();
            }
            G2::Time { basis } => {
                let mut raw = Vec::new();
                raw_row(basis, t, &mut raw);
                out.copy_from_slice(&raw);
            }
        }
    }

    /// `(a, a′, a″)` with `a = g₁(η)ᵀ M g₂` and `M` the `p1 × p2`
    /// coefficient matrix; the design row `g₁ ⊗ g₂` is written to `x`
    /// when given.
    pub fn eval_point(
        &self,
        eta: T,
        g2: &[T],
        beta: &[T],
        scratch: &mut AssocScratch<T>,
        x: Option<&mut [T]>,
    ) -> (T, T, T) {
        let p2 = self.p2;
        self.g1_derivs(eta, &mut scratch.g, &mut scratch.d1, &mut scratch.d2);
        let (mut a, mut a1, mut a2) = (T::zero(), T::zero(), T::zero());
        for j in 0..self.p1 {
            let mut mg = T::zero();
            for k in 0..p2 {
                mg += beta[j * p2 + k] * g2[k];
            }
            a += scratch.g[j] * mg;
            a1 += scratch.d1[j] * mg;
            a2 += scratch.d2[j] * mg;
        }
        if let Some(x) = x {
            for j in 0..self.p1 {
                for k in 0..p2 {
                    x[j * p2 + k] = scratch.g[j] * g2[k];
                }
            }
        }
        (a, a1, a2)
    }

    /// Sum of each `g₂`-column curve over the constraint grid; zero for a
    /// correctly constrained nonlinear association.
    pub fn grid_sums(&self, beta: &[T]) -> Vec<T> {
        let mut scratch = AssocScratch::new(self.p1);
        let mut sums = vec![T::zero(); self.p2];
        for &y in &self.grid {
            self.g1_derivs(y, &mut scratch.g, &mut scratch.d1, &mut scratch.d2);
            for (k, s) in sums.iter_mut().enumerate() {
                for j in 0..self.p1 {
                    *s += scratch.g[j] * beta[j * self.p2 + k];
                }
            }
        }
        sums
    }
}

#[derive(Debug, Clone)]
pub struct AssocScratch<T> {
    pub g: Vec<T>,
    pub d1: Vec<T>,
    pub d2: Vec<T>,
}

impl<T: Real> AssocScratch<T> {
    pub fn new(p1: usize) -> Self {
        Self {
            g: vec![T::zero(); p1],
            d1: vec![T::zero(); p1],
            d2: vec![T::zero(); p1],
        }
    }
}

/// Compiled joint model: data in working precision, evaluation points,
/// blocks and the association.
#[derive(Debug, Clone)]
pub struct JointModel<T: nalgebra::Scalar> {
    pub spec: JointModelSpec,
    pub n_subjects: usize,
    pub rule: QuadratureRule<T>,
    pub y: Vec<T>,
    pub long_time: Vec<T>,
    pub long_subject: Vec<usize>,
    pub subject_rows: Vec<Range<usize>>,
    pub surv_time: Vec<T>,
    pub event: Vec<bool>,
    /// Time and quadrature weight of every survival point (weight 0 at `T_i`).
    pub surv_point_time: Vec<T>,
    pub surv_point_weight: Vec<T>,
    pub blocks: Vec<Block<T>>,
    pub assoc: Association<T>,
    /// Index of the association block in `blocks`.
    pub assoc_block: usize,
    /// Covariate names used by the model, for reporting.
    pub subject_labels: Vec<String>,
}

struct BuildCtx<'a, T: nalgebra::Scalar> {
    data: &'a Dataset,
    long_time: Vec<T>,
    surv_point_time: Vec<T>,
    surv_point_owner: Vec<usize>,
    surv_time: Vec<T>,
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn dense_from_rows<T: Real>(rows: usize, p: usize, mut f: impl FnMut(usize, &mut [T])) -> DMatrix<T> {
    let mut xt = DMatrix::zeros(p, rows);
    let mut buf = vec![T::zero(); p];
    for r in 0..rows {
        buf.iter_mut().for_each(|b| *b = T::zero());
        f(r, &mut buf);
        xt.column_mut(r).copy_from_slice(&buf);
    }
    xt
}

fn numeric_values(col: &Column, name: &str) -> Result<Vec<f64>> {
    match col {
        Column::Numeric(v) => Ok(v.clone()),
        Column::Factor { .. } => Err(Error::Data(format!(
            "covariate `{name}` must be numeric for a smooth term"
        ))),
    }
}

fn range_of(v: &[f64], what: &str) -> Result<(f64, f64)> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Data(format!("{what} has no spread to place knots on")));
    }
    Ok((lo, hi))
}

impl<T: Real> JointModel<T> {
    pub fn build(spec: &JointModelSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        let n = data.n_subjects();
        if n == 0 {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        let rule = QuadratureRule::<T>::gauss_legendre(spec.quadrature_nodes)?;
        let q = rule.len();
        let surv_time: Vec<T> = to_t(&data.surv_time);
        let mut surv_point_time = Vec::with_capacity(n * (q + 1));
        let mut surv_point_weight = Vec::with_capacity(n * (q + 1));
        let mut surv_point_owner = Vec::with_capacity(n * (q + 1));
        for (i, &ti) in surv_time.iter().enumerate() {
            for (u, w) in rule.on_interval(T::zero(), ti) {
                surv_point_time.push(u);
                surv_point_weight.push(w);
                surv_point_owner.push(i);
            }
            surv_point_time.push(ti);
            surv_point_weight.push(T::zero());
            surv_point_owner.push(i);
        }
        let ctx = BuildCtx {
            data,
            long_time: to_t(&data.long_time),
            surv_point_time,
            surv_point_owner,
            surv_time,
        };

        let mut blocks = Vec::new();
        for k in [Predictor::Lambda, Predictor::Gamma] {
            for t in spec.terms(k) {
                blocks.push(build_term(&ctx, k, t)?);
            }
        }
        let assoc_spec = spec.association()?;
        let (assoc, assoc_blocks) = build_association(&ctx, assoc_spec, spec.alpha_grid_size)?;
        let assoc_block = blocks.len();
        blocks.extend(assoc_blocks);
        for k in [Predictor::Mu, Predictor::Sigma] {
            for t in spec.terms(k) {
                blocks.push(build_term(&ctx, k, t)?);
            }
        }

        Ok(Self {
            spec: spec.clone(),
            n_subjects: n,
            rule,
            y: to_t(&data.y),
            long_time: ctx.long_time,
            long_subject: data.long_subject.clone(),
            subject_rows: data.subject_ranges(),
            surv_time: ctx.surv_time,
            event: data.event.clone(),
            surv_point_time: ctx.surv_point_time,
            surv_point_weight,
            blocks,
            assoc,
            assoc_block,
            subject_labels: data.ids.clone(),
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_quad(&self) -> usize {
        self.rule.len()
    }

    /// Survival points of subject `i`; the last one is `T_i`.
    pub fn surv_points(&self, i: usize) -> Range<usize> {
        let q1 = self.n_quad() + 1;
        i * q1..(i + 1) * q1
    }

    pub fn n_surv_points(&self) -> usize {
        self.n_subjects * (self.n_quad() + 1)
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn blocks_of(&self, k: Predictor) -> impl Iterator<Item = usize> + '_ {
        self.blocks
            .iter()
            .enumerate()
            .filter(move |(_, b)| b.predictor == k)
            .map(|(i, _)| i)
    }

    /// Dense longitudinal design (`N × p`) of a μ or σ block.
    pub fn long_design(&self, block: usize) -> Option<DMatrix<T>> {
        let b = &self.blocks[block];
        b.long.as_ref().map(|d| d.to_dense(b.width))
    }

    /// Survival-side design (`n × p`) of a λ, γ or μ block with subject `i`
    /// evaluated at `times[i]`.
    pub fn surv_design(&self, block: usize, times: &[T]) -> Result<DMatrix<T>> {
        if times.len() != self.n_subjects {
            return Err(Error::Dimension(format!(
                "{} times given for {} subjects",
                times.len(),
                self.n_subjects
            )));
        }
        let b = &self.blocks[block];
        let gw = b.group_width();
        let mut x = DMatrix::zeros(self.n_subjects, b.width);
        let mut buf = vec![T::zero(); gw];
        for (i, &t) in times.iter().enumerate() {
            if !b.builder.row_into(i, t, &mut buf) {
                return Err(Error::Config(format!(
                    "block {} has no survival-time evaluation",
                    b.name
                )));
            }
            let off = if b.per_subject.is_some() { i * gw } else { 0 };
            for (j, &v) in buf.iter().enumerate() {
                x[(i, off + j)] = v;
            }
        }
        Ok(x)
    }

    /// Contribution of a λ, γ or μ block at `(subject, t)`.
    pub fn eval_block_at(&self, block: usize, beta: &DVector<T>, subject: usize, t: T) -> T {
        let b = &self.blocks[block];
        let gw = b.group_width();
        let mut buf = vec![T::zero(); gw];
        if !b.builder.row_into(subject, t, &mut buf) {
            return T::zero();
        }
        let off = if b.per_subject.is_some() { subject * gw } else { 0 };
        buf.iter()
            .zip(beta.as_slice()[off..].iter())
            .fold(T::zero(), |acc, (&x, &c)| acc + x * c)
    }
}

fn build_term<T: Real>(ctx: &BuildCtx<'_, T>, k: Predictor, term: &TermSpec) -> Result<Block<T>> {
    let data = ctx.data;
    let n = data.n_subjects();
    let name = format!("{}.{}", k.name(), term.label());
    let on_long = matches!(k, Predictor::Mu | Predictor::Sigma);
    let on_surv = matches!(k, Predictor::Lambda | Predictor::Mu);
    let on_subject = k == Predictor::Gamma;
    let n_long = data.n_obs();
    let n_surv = ctx.surv_point_time.len();

    let subject_col = |cov: &str| -> Result<Column> {
        data.baseline.get(cov).cloned().ok_or_else(|| {
            Error::Data(format!(
                "covariate `{cov}` must be a baseline (survival table) column for predictor {k}"
            ))
        })
    };
    let long_col = |cov: &str| -> Result<Column> {
        data.long_column(cov)
            .ok_or_else(|| Error::Data(format!("covariate `{cov}` not found in the data")))
    };

    let mut block = Block {
        name,
        predictor: k,
        kind: term.kind(),
        width: 0,
        per_subject: None,
        long: None,
        surv: None,
        subject: None,
        prior: Prior::Vague,
        builder: TermBuilder::None,
    };

    // Survival-side builder, when the predictor is evaluated in the hazard.
    let needs_subject_values = on_surv || on_subject;
    match term {
        TermSpec::Intercept => {
            block.width = 1;
            block.builder = TermBuilder::Intercept;
            if on_long {
                block.long = Some(Design::Dense(DMatrix::from_element(1, n_long, T::one())));
            }
        }
        TermSpec::LinearCovariate { covariate } => {
            if on_long {
                let (_, cols) = long_col(covariate)?.design_columns();
                block.width = cols.len();
                block.long = Some(Design::Dense(dense_from_rows(n_long, cols.len(), |r, b| {
                    for (j, c) in cols.iter().enumerate() {
                        b[j] = T::lit(c[r]);
                    }
                })));
            }
            if needs_subject_values {
                let (_, cols) = subject_col(covariate)?.design_columns();
                block.width = cols.len();
                block.builder = TermBuilder::Covariate {
                    columns: cols.iter().map(|c| to_t(c)).collect(),
                };
            }
            if block.width == 0 {
                return Err(Error::Data(format!(
                    "covariate `{covariate}` yields no design columns"
                )));
            }
        }
        TermSpec::PsplineCovariate { covariate, smooth } => {
            let rows: Vec<f64> = if on_long {
                numeric_values(&long_col(covariate)?, covariate)?
            } else {
                numeric_values(&subject_col(covariate)?, covariate)?
            };
            let (lo, hi) = range_of(&rows, covariate)?;
            let spec = smooth.basis(COVARIATE_BASIS, T::lit(lo), T::lit(hi))?;
            let basis = BasisEvaluator::new(&spec)?;
            let x = basis.matrix(&to_t(&rows), 0);
            let z = ConstraintTransform::from_constraint(&column_sums(&x))?;
            let pen = difference_penalty::<T>(spec.n_basis(), spec.diff_order)?;
            let kdot = z.apply_penalty(&pen.k);
            block.width = z.n_constrained();
            block.prior = Prior::Isotropic {
                rank: spec.n_basis() - spec.diff_order,
                k: kdot,
            };
            if on_long {
                let xd = z.apply_design(&x);
                block.long = Some(Design::Dense(xd.transpose()));
            }
            if needs_subject_values {
                let values = to_t(&numeric_values(&subject_col(covariate)?, covariate)?);
                block.builder = TermBuilder::Smooth { basis, z, values };
            }
        }
        TermSpec::PsplineTime { smooth } => {
            // constraint over the rows of the predictor's own data design
            let (default_p, rows, upper) = match k {
                Predictor::Lambda => (LAMBDA_BASIS, ctx.surv_time.clone(), data.max_time()),
                _ => (MU_TIME_BASIS, ctx.long_time.clone(), data.max_time()),
            };
            if rows.is_empty() {
                return Err(Error::Data(format!(
                    "no evaluation times for the time effect of predictor {k}"
                )));
            }
            let spec = smooth.basis(default_p, T::zero(), T::lit(upper))?;
            let basis = BasisEvaluator::new(&spec)?;
            let x = basis.matrix(&rows, 0);
            let z = ConstraintTransform::from_constraint(&column_sums(&x))?;
            let pen = difference_penalty::<T>(spec.n_basis(), spec.diff_order)?;
            block.width = z.n_constrained();
            block.prior = Prior::Isotropic {
                rank: spec.n_basis() - spec.diff_order,
                k: z.apply_penalty(&pen.k),
            };
            if on_long {
                block.long = Some(Design::Dense(z.apply_design(&basis.matrix(&ctx.long_time, 0)).transpose()));
            }
            block.builder = TermBuilder::Time { basis, z };
        }
        TermSpec::TimeVaryingCovariate { covariate, smooth } => {
            let values = to_t(&numeric_values(&subject_col(covariate)?, covariate)?);
            let spec = smooth.basis(LAMBDA_BASIS, T::zero(), T::lit(data.max_time()))?;
            let basis = BasisEvaluator::new(&spec)?;
            let pen = difference_penalty::<T>(spec.n_basis(), spec.diff_order)?;
            block.width = spec.n_basis();
            block.prior = Prior::Isotropic {
                rank: pen.rank,
                k: pen.k,
            };
            block.builder = TermBuilder::TimeVarying { basis, values };
        }
        TermSpec::RandomIntercept => {
            block.width = n;
            block.per_subject = Some(1);
            block.prior = Prior::Isotropic {
                k: DMatrix::identity(1, 1),
                rank: 1,
            };
            if on_long {
                block.long = Some(Design::PerSubject {
                    width: 1,
                    owner: data.long_subject.clone(),
                    xt: DMatrix::from_element(1, n_long, T::one()),
                });
            }
            block.builder = TermBuilder::RandomIntercept;
        }
        TermSpec::FunctionalRandomIntercept { smooth } => {
            if ctx.long_time.is_empty() {
                return Err(Error::Data(
                    "functional random intercepts need longitudinal measurements".into(),
                ));
            }
            let spec = smooth.basis(FUNCTIONAL_BASIS, T::zero(), T::lit(data.max_time()))?;
            let basis = BasisEvaluator::new(&spec)?;
            let x = basis.matrix(&ctx.long_time, 0);
            let z = ConstraintTransform::from_constraint(&column_sums(&x))?;
            let pen = difference_penalty::<T>(spec.n_basis(), spec.diff_order)?;
            let w = z.n_constrained();
            block.width = w * n;
            block.per_subject = Some(w);
            block.prior = Prior::anisotropic(&DMatrix::identity(1, 1), &z.apply_penalty(&pen.k));
            block.long = Some(Design::PerSubject {
                width: w,
                owner: data.long_subject.clone(),
                xt: z.apply_design(&x).transpose(),
            });
            block.builder = TermBuilder::Functional { basis, z };
        }
    }

    if on_surv {
        let gw = block.group_width();
        let xt = dense_from_rows(n_surv, gw, |r, buf| {
            let ok = block
                .builder
                .row_into(ctx.surv_point_owner[r], ctx.surv_point_time[r], buf);
            debug_assert!(ok);
        });
        block.surv = Some(match block.per_subject {
            Some(w) => Design::PerSubject {
                width: w,
                owner: ctx.surv_point_owner.clone(),
                xt,
            },
            None => Design::Dense(xt),
        });
    }
    if on_subject {
        let w = block.width;
        block.subject = Some(Design::Dense(dense_from_rows(n, w, |i, buf| {
            block.builder.row_into(i, T::zero(), buf);
        })));
    }
    if k == Predictor::Sigma {
        block.builder = TermBuilder::None;
    }
    Ok(block)
}

fn build_association<T: Real>(
    ctx: &BuildCtx<'_, T>,
    spec: &AssocSpec,
    grid_size: usize,
) -> Result<(Association<T>, Vec<Block<T>>)> {
    let data = ctx.data;
    let n = data.n_subjects();
    let (g1, p1, k1, grid) = match &spec.g1 {
        G1Spec::Identity => (G1::Identity, 1, None, Vec::new()),
        G1Spec::Pspline { smooth } => {
            if data.y.is_empty() {
                return Err(Error::Data(
                    "a nonlinear association needs longitudinal responses".into(),
                ));
            }
            let (lo, hi) = range_of(&data.y, "the longitudinal response")?;
            let bspec = smooth.basis(ALPHA_BASIS, T::lit(lo), T::lit(hi))?;
            let basis = BasisEvaluator::new(&bspec)?;
            let grid = alpha_constraint_grid(&to_t::<T>(&data.y), grid_size)?;
            let z = ConstraintTransform::from_constraint(&column_sums(&basis.matrix(&grid, 0)))?;
            let pen = difference_penalty::<T>(bspec.n_basis(), bspec.diff_order)?;
            let kdot = z.apply_penalty(&pen.k);
            let p1 = z.n_constrained();
            (
                G1::Spline {
                    basis,
                    z,
                    spec: bspec,
                },
                p1,
                Some(kdot),
                grid,
            )
        }
    };
    let subject_col = |cov: &str| -> Result<Column> {
        data.baseline.get(cov).cloned().ok_or_else(|| {
            Error::Data(format!(
                "association covariate `{cov}` must be a baseline column"
            ))
        })
    };
    let mut group_levels = None;
    let (g2, p2, k2) = match &spec.g2 {
        G2Spec::Constant => (G2::Constant, 1, None),
        G2Spec::Covariate { covariate } => {
            let (_, cols) = subject_col(covariate)?.design_columns();
            let p2 = cols.len() + 1;
            (
                G2::Covariate {
                    columns: cols.iter().map(|c| to_t(c)).collect(),
                },
                p2,
                None,
            )
        }
        G2Spec::GroupFactor { covariate } => {
            let (levels, codes) = subject_col(covariate)?.as_factor();
            if levels.len() < 2 {
                return Err(Error::Data(format!(
                    "group factor `{covariate}` has a single level"
                )));
            }
            group_levels = Some((codes.clone(), levels.len()));
            let p2 = levels.len();
            (G2::Group { codes, levels }, p2, None)
        }
        G2Spec::PsplineTime { smooth } => {
            let bspec = smooth.basis(LAMBDA_BASIS, T::zero(), T::lit(data.max_time()))?;
            let basis = BasisEvaluator::new(&bspec)?;
            let pen = difference_penalty::<T>(bspec.n_basis(), bspec.diff_order)?;
            (G2::Time { basis }, bspec.n_basis(), Some(pen))
        }
    };

    let n_surv = ctx.surv_point_time.len();
    let mut assoc = Association {
        g1,
        g2,
        p1,
        p2,
        grid,
        g2_surv: DMatrix::zeros(p2, n_surv),
    };
    let mut buf = vec![T::zero(); p2];
    for r in 0..n_surv {
        assoc.g2_row(ctx.surv_point_owner[r], ctx.surv_point_time[r], &mut buf);
        assoc.g2_surv.column_mut(r).copy_from_slice(&buf);
    }

    let prior = match (k1, k2) {
        (None, None) => Prior::Vague,
        (Some(k1), None) => Prior::Isotropic {
            rank: crate::spline::numerical_rank(&k1) * p2,
            k: k1.kronecker(&DMatrix::identity(p2, p2)),
        },
        (None, Some(pen)) => Prior::Isotropic {
            rank: pen.rank,
            k: pen.k,
        },
        (Some(k1), Some(pen)) => Prior::anisotropic(&k1, &pen.k),
    };
    let kind = if assoc.is_nonlinear() {
        TermKind::AssocNonlinear
    } else {
        TermKind::AssocLinear
    };
    let mut blocks = vec![Block {
        name: "alpha.assoc".into(),
        predictor: Predictor::Alpha,
        kind,
        width: p1 * p2,
        per_subject: None,
        long: None,
        surv: None,
        subject: None,
        prior,
        builder: TermBuilder::None,
    }];
    if let (true, Some((codes, n_levels))) = (assoc.is_nonlinear(), group_levels) {
        let builder = TermBuilder::GroupIntercepts { codes };
        let w = n_levels - 1;
        let xt = dense_from_rows(n, w, |i, b| {
            builder.row_into(i, T::zero(), b);
        });
        blocks.push(Block {
            name: "alpha.group".into(),
            predictor: Predictor::Alpha,
            kind: TermKind::GroupIntercepts,
            width: w,
            per_subject: None,
            long: None,
            surv: None,
            subject: Some(Design::Dense(xt)),
            prior: Prior::Vague,
            builder,
        });
    }
    Ok((assoc, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Covariates;
    use approx::assert_abs_diff_eq;

    pub(crate) fn small_data() -> Dataset {
        let mut base = Covariates::default();
        base.push("x", Column::Numeric(vec![0.5, -1.0, 2.0]));
        base.push(
            "g",
            Column::Factor {
                levels: vec!["a".into(), "b".into()],
                codes: vec![0, 1, 1],
            },
        );
        Dataset::new(
            vec!["1".into(), "2".into(), "3".into()],
            vec![4.0, 6.0, 5.0],
            vec![true, false, true],
            base,
            vec![0, 0, 1, 2, 2, 2],
            vec![0.0, 3.0, 1.0, 0.5, 2.0, 4.5],
            vec![0.3, 0.8, -0.2, 1.1, 0.4, 0.9],
            Covariates::default(),
        )
        .unwrap()
    }

    #[test]
    fn random_intercept_indicator_design() {
        let d = small_data();
        let mut spec = JointModelSpec::default();
        spec.mu = vec![TermSpec::Intercept, TermSpec::RandomIntercept];
        let m = JointModel::<f64>::build(&spec, &d).unwrap();
        let b = m.block_index("mu.re(id)").unwrap();
        let x = m.long_design(b).unwrap();
        assert_eq!(x.shape(), (6, 3));
        let sums: Vec<f64> = (0..3).map(|j| x.column(j).sum()).collect();
        assert_eq!(sums, vec![2.0, 1.0, 3.0]);
        let ic = m.long_design(m.block_index("mu.intercept").unwrap()).unwrap();
        assert_eq!(ic, DMatrix::from_element(6, 1, 1.0));
    }

    #[test]
    fn functional_random_intercept_width() {
        let d = small_data();
        let mut spec = JointModelSpec::default();
        spec.mu = vec![
            TermSpec::Intercept,
            TermSpec::FunctionalRandomIntercept {
                smooth: SmoothSpec::with_basis(5),
            },
        ];
        let m = JointModel::<f64>::build(&spec, &d).unwrap();
        let b = &m.blocks[m.block_index("mu.fre(id,time)").unwrap()];
        assert_eq!(b.width, 4 * 3);
        let times: Vec<f64> = m.surv_time.clone();
        let x = m.surv_design(m.block_index("mu.fre(id,time)").unwrap(), &times).unwrap();
        for i in 0..3 {
            for j in 0..12 {
                if j / 4 != i {
                    assert_eq!(x[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn time_constant_gamma_design() {
        let d = small_data();
        let mut spec = JointModelSpec::default();
        spec.gamma = vec![
            TermSpec::Intercept,
            TermSpec::LinearCovariate {
                covariate: "x".into(),
            },
        ];
        let m = JointModel::<f64>::build(&spec, &d).unwrap();
        let b = m.block_index("gamma.x").unwrap();
        let a = m.surv_design(b, &[0.1, 0.2, 0.3]).unwrap();
        let c = m.surv_design(b, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.column(0).as_slice(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn constrained_smooths_sum_to_zero() {
        let d = small_data();
        let m = JointModel::<f64>::build(&JointModelSpec::default(), &d).unwrap();
        let beta = DVector::from_fn(4, |i, _| (i as f64 * 1.3).sin() + 0.2);
        let lam = m.block_index("lambda.s(time)").unwrap();
        let x = m.surv_design(lam, &m.surv_time.clone());
        // λ basis has 9 constrained columns by default
        let x = x.unwrap();
        assert_eq!(x.ncols(), 9);
        let b9 = DVector::from_fn(9, |i, _| (i as f64).cos());
        assert_abs_diff_eq!((&x * &b9).sum(), 0.0, epsilon = 1e-10);
        let mu = m.block_index("mu.s(time)").unwrap();
        let xl = m.long_design(mu).unwrap();
        assert_eq!(xl.ncols(), 5);
        let b5 = beta.rows(0, 4).iter().copied().chain([0.7]).collect::<Vec<_>>();
        assert_abs_diff_eq!((&xl * DVector::from_vec(b5)).sum(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn association_widths() {
        let d = small_data();
        let cases = [
            (G1Spec::Identity, G2Spec::Constant, 1),
            (
                G1Spec::Identity,
                G2Spec::Covariate {
                    covariate: "x".into(),
                },
                2,
            ),
            (
                G1Spec::Identity,
                G2Spec::PsplineTime {
                    smooth: SmoothSpec::with_basis(7),
                },
                7,
            ),
            (
                G1Spec::Pspline {
                    smooth: SmoothSpec::default(),
                },
                G2Spec::Constant,
                5,
            ),
            (
                G1Spec::Pspline {
                    smooth: SmoothSpec::default(),
                },
                G2Spec::Covariate {
                    covariate: "x".into(),
                },
                10,
            ),
            (
                G1Spec::Pspline {
                    smooth: SmoothSpec::default(),
                },
                G2Spec::PsplineTime {
                    smooth: SmoothSpec::with_basis(7),
                },
                35,
            ),
        ];
        for (g1, g2, width) in cases {
            let mut spec = JointModelSpec::default();
            spec.alpha = Some(AssocSpec { g1, g2 });
            let m = JointModel::<f64>::build(&spec, &d).unwrap();
            assert_eq!(m.blocks[m.assoc_block].width, width);
            assert_eq!(m.assoc.width(), width);
        }
    }

    #[test]
    fn group_factor_adds_group_intercepts_for_nonlinear_g1() {
        let d = small_data();
        let mut spec = JointModelSpec::default();
        spec.alpha = Some(AssocSpec {
            g1: G1Spec::Pspline {
                smooth: SmoothSpec::default(),
            },
            g2: G2Spec::GroupFactor {
                covariate: "g".into(),
            },
        });
        let m = JointModel::<f64>::build(&spec, &d).unwrap();
        assert_eq!(m.blocks[m.assoc_block].width, 10);
        let gi = m.block_index("alpha.group").unwrap();
        assert_eq!(m.blocks[gi].width, 1);
        // zero curve plus group intercept c → constant c in group "b"
        let x = m.surv_design(gi, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(x.column(0).as_slice(), &[0.0, 1.0, 1.0]);

        spec.alpha = Some(AssocSpec {
            g1: G1Spec::Identity,
            g2: G2Spec::GroupFactor {
                covariate: "g".into(),
            },
        });
        let m = JointModel::<f64>::build(&spec, &d).unwrap();
        assert!(m.block_index("alpha.group").is_none());
        assert_eq!(m.blocks[m.assoc_block].width, 2);
    }

    #[test]
    fn nonlinear_assoc_respects_grid_constraint() {
        let d = small_data();
        let mut spec = JointModelSpec::default();
        spec.alpha = Some(AssocSpec::nonlinear());
        let m = JointModel::<f64>::build(&spec, &d).unwrap();
        let beta = [0.3, -1.2, 0.8, 2.0, -0.4];
        let sums = m.assoc.grid_sums(&beta);
        assert_abs_diff_eq!(sums[0], 0.0, epsilon = 1e-8);
        assert_eq!(m.assoc.grid.len(), 100);
    }

    #[test]
    fn identity_association_is_linear() {
        let d = small_data();
        let m = JointModel::<f64>::build(&JointModelSpec::default(), &d).unwrap();
        let mut s = AssocScratch::new(1);
        for eta in [0.5, -0.2] {
            let (a, a1, a2) = m.assoc.eval_point(eta, &[1.0], &[1.0], &mut s, None);
            assert_eq!((a, a1, a2), (eta, 1.0, 0.0));
        }
    }

    #[test]
    fn validation_rules() {
        let d = small_data();
        let mut spec = JointModelSpec::default();
        spec.alpha = None;
        assert!(matches!(JointModel::<f64>::build(&spec, &d), Err(Error::Config(_))));
        let mut spec = JointModelSpec::default();
        spec.gamma.push(TermSpec::RandomIntercept);
        assert!(spec.validate().is_err());
        let mut spec = JointModelSpec::default();
        spec.sigma.clear();
        assert!(spec.validate().is_err());
        let mut spec = JointModelSpec::default();
        spec.lambda.push(TermSpec::Intercept);
        assert!(spec.validate().is_err());
        let mut spec = JointModelSpec::default();
        spec.gamma.push(TermSpec::LinearCovariate {
            covariate: "missing".into(),
        });
        assert!(matches!(JointModel::<f64>::build(&spec, &d), Err(Error::Data(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let mut spec = JointModelSpec::default();
        spec.alpha = Some(AssocSpec {
            g1: G1Spec::Pspline {
                smooth: SmoothSpec::with_basis(6),
            },
            g2: G2Spec::GroupFactor {
                covariate: "g".into(),
            },
        });
        let text = toml::to_string(&spec).unwrap();
        let back: JointModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn default_sizes() {
        let d = small_data();
        let mut spec = JointModelSpec::default();
        spec.alpha = Some(AssocSpec::nonlinear());
        let m = JointModel::<f64>::build(&spec, &d).unwrap();
        assert_eq!(m.blocks[m.block_index("lambda.s(time)").unwrap()].width, 9);
        assert_eq!(m.blocks[m.assoc_block].width, 5);
        assert_eq!(m.blocks[m.block_index("mu.fre(id,time)").unwrap()].group_width(), 5);
        assert_eq!(m.n_surv_points(), 3 * 16);
    }
}
