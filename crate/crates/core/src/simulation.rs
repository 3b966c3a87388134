//! Simulated joint data with linear, nonlinear and group-specific
//! associations, plus error metrics against the generating truth.

use crate::data::{Column, Covariates, Dataset};
use crate::error::{Error, Result};
use crate::estimation::SampleChain;
use crate::likelihood::ThetaState;
use crate::model::{
    AssocScratch, AssocSpec, G1Spec, G2Spec, JointModel, JointModelSpec, Predictor, SmoothSpec,
    TermKind, TermSpec,
};
use crate::quadrature::QuadratureRule;
use crate::spline::{difference_penalty, quantile_sorted, BasisEvaluator, BasisSpec};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// End of the measurement grid and administrative censoring time.
pub const T_MAX: f64 = 120.0;
/// Bisection tolerance on time for survival-time inversion.
pub const INVERSION_TOL: f64 = 1e-8;
pub const ETA_GRID_LOWER: f64 = -0.5;
pub const ETA_GRID_UPPER: f64 = 2.0;
pub const ETA_GRID_SIZE: usize = 120;
const FRI_BASIS: usize = 4;
const FRI_TAU2_S: f64 = 1.0;
const FRI_TAU2_T: f64 = 0.2;
const FRI_JITTER: f64 = 1e-8;
const INVERSION_NODES: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSetting {
    /// 1: linear, 2: nonlinear, 3: group-specific nonlinear association.
    pub setting: u8,
    pub n: usize,
    /// Fraction of grid measurements kept.
    pub keep: f64,
    pub seed: u64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    /// Variance of the scalar random intercept.
    #[serde(default = "default_ri_var")]
    pub random_intercept_var: f64,
}

fn default_noise_sd() -> f64 {
    0.3
}

fn default_ri_var() -> f64 {
    0.25
}

impl SimSetting {
    pub fn new(setting: u8, n: usize, keep: f64, seed: u64) -> Self {
        Self {
            setting,
            n,
            keep,
            seed,
            noise_sd: default_noise_sd(),
            random_intercept_var: default_ri_var(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.setting) {
            return Err(Error::Usage(format!("unknown setting {} (expected 1, 2 or 3)", self.setting)));
        }
        if self.n == 0 {
            return Err(Error::Usage("need at least one subject".into()));
        }
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Usage(format!("keep fraction must lie in (0, 1], got {}", self.keep)));
        }
        if !(self.noise_sd >= 0.0) || !(self.random_intercept_var >= 0.0) {
            return Err(Error::Usage("noise sd and random intercept variance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Generating values of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub x1: f64,
    pub x2: f64,
    pub group: Option<u8>,
    pub random_intercept: f64,
    pub fri: Vec<f64>,
    /// Uncensored event time; `None` when no event occurs before the grid end.
    pub event_time: Option<f64>,
    pub censor_time: f64,
}

/// Closed-form truth of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub setting: u8,
    pub noise_sd: f64,
    pub subjects: Vec<SubjectTruth>,
}

/// Mean time trend of the marker.
pub fn mu_time_effect(t: f64) -> f64 {
    0.1 * (t + 2.0) * (-0.075 * t).exp()
}

pub fn true_lambda(t: f64) -> f64 {
    1.4 * ((t + 10.0) / 1000.0).ln()
}

/// True association at marker value `eta`; `group` is used by setting 3 only.
pub fn true_association(setting: u8, eta: f64, group: Option<u8>) -> f64 {
    let concave = -0.1 * (eta + 3.0).powi(2) + eta + 1.8;
    match (setting, group) {
        (1, _) => eta,
        (3, Some(0)) => 0.1 * (eta - 3.0).powi(2) + 0.75 * eta - 0.8,
        _ => concave,
    }
}

/// Derivative of [`true_association`] in `eta`.
pub fn true_association_slope(setting: u8, eta: f64, group: Option<u8>) -> f64 {
    match (setting, group) {
        (1, _) => 1.0,
        (3, Some(0)) => 0.2 * (eta - 3.0) + 0.75,
        _ => -0.2 * (eta + 3.0) + 1.0,
    }
}

fn fri_basis() -> BasisEvaluator<f64> {
    let spec = BasisSpec::equidistant(0.0, T_MAX, FRI_BASIS, 3, 2).expect("valid basis");
    BasisEvaluator::new(&spec).expect("valid basis")
}

impl Truth {
    pub fn eta_mu(&self, i: usize, t: f64) -> f64 {
        self.eta_mu_with(&fri_basis(), i, t)
    }

    fn eta_mu_with(&self, basis: &BasisEvaluator<f64>, i: usize, t: f64) -> f64 {
        let s = &self.subjects[i];
        let fri: f64 = basis.row(t, 0).iter().zip(&s.fri).map(|(b, c)| b * c).sum();
        mu_time_effect(t) + s.random_intercept + fri + 0.5 + 0.6 * s.x2.sin()
    }

    pub fn eta_gamma(&self, i: usize) -> f64 {
        0.3 * self.subjects[i].x1
    }

    pub fn eta_alpha(&self, i: usize, eta_mu: f64) -> f64 {
        true_association(self.setting, eta_mu, self.subjects[i].group)
    }

    pub fn log_hazard(&self, i: usize, t: f64) -> f64 {
        true_lambda(t) + self.eta_gamma(i) + self.eta_alpha(i, self.eta_mu(i, t))
    }

    pub fn eta_sigma(&self) -> f64 {
        self.noise_sd.ln()
    }
}

/// Generated dataset with its truth and the true predictor values at the
/// observation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulated {
    pub setting: SimSetting,
    pub data: Dataset,
    pub truth: Truth,
    pub tables: TruthTables,
}

/// True predictor evaluations for the metrics pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTables {
    /// `η_μ` at each longitudinal row (sorted as in the dataset).
    pub eta_mu_long: Vec<f64>,
    /// Per subject, evaluated at the follow-up time `T_i`.
    pub eta_mu_at_t: Vec<f64>,
    pub eta_lambda_at_t: Vec<f64>,
    pub eta_gamma: Vec<f64>,
    pub eta_alpha_at_t: Vec<f64>,
}

/// Survival time by inversion of `Λ(t) = −log u`, with `Λ` accumulated by
/// Gauss–Legendre quadrature on unit-width panels and the root located by
/// bisection. Returns `None` when `Λ(t_max) < −log u`.
pub fn invert_survival(log_hazard: impl Fn(f64) -> f64, u: f64, t_max: f64) -> Option<f64> {
    let target = -u.ln();
    if target <= 0.0 {
        return Some(0.0);
    }
    let rule = QuadratureRule::<f64>::gauss_legendre(INVERSION_NODES).expect("valid rule");
    let hazard = |t: f64| log_hazard(t).exp();
    let panels = t_max.ceil().max(1.0) as usize;
    let width = t_max / panels as f64;
    let mut cum = 0.0;
    for k in 0..panels {
        let a = k as f64 * width;
        let b = a + width;
        let panel = rule.integrate(a, b, hazard);
        if cum + panel >= target {
            let (mut lo, mut hi) = (a, b);
            while hi - lo > INVERSION_TOL {
                let mid = 0.5 * (lo + hi);
                if cum + rule.integrate(a, mid, hazard) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        cum += panel;
    }
    None
}

/// Per-replicate RNG stream derived from `(seed, replicate)`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Coefficients of one functional random intercept drawn from
/// `N(0, (I/τ²_s + K_t/τ²_t + εI)⁻¹)`.
pub fn draw_fri_coefficients(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = difference_penalty::<f64>(FRI_BASIS, 2).expect("valid penalty").k;
    let prec = DMatrix::<f64>::identity(FRI_BASIS, FRI_BASIS) * (1.0 / FRI_TAU2_S + FRI_JITTER)
        + k / FRI_TAU2_T;
    let l = Cholesky::new(prec).expect("positive definite precision").l();
    let z = DVector::from_fn(FRI_BASIS, |_, _| StandardNormal.sample(rng));
    l.transpose()
        .solve_upper_triangular(&z)
        .expect("nonsingular factor")
        .as_slice()
        .to_vec()
}

/// Generates one dataset: marker trajectories on the grid `1..120`, event
/// times by inversion, censoring at 120 and uniformly on `(0, 180)`,
/// Bernoulli thinning of grid measurements before `T_i`, and Gaussian noise.
pub fn simulate(setting: &SimSetting) -> Result<Simulated> {
    simulate_with_rng(setting, &mut ChaCha8Rng::seed_from_u64(setting.seed))
}

pub fn simulate_with_rng(setting: &SimSetting, rng: &mut ChaCha8Rng) -> Result<Simulated> {
    setting.validate()?;
    let basis = fri_basis();
    let mut truth = Truth {
        setting: setting.setting,
        noise_sd: setting.noise_sd,
        subjects: Vec::with_capacity(setting.n),
    };
    let ri_sd = setting.random_intercept_var.sqrt();
    for _ in 0..setting.n {
        let x1 = rng.random_range(-3.0..3.0);
        let x2 = rng.random_range(-3.0..3.0);
        let group = (setting.setting == 3).then(|| rng.random_range(0..2u8));
        let z: f64 = StandardNormal.sample(rng);
        let fri = draw_fri_coefficients(rng);
        truth.subjects.push(SubjectTruth {
            x1,
            x2,
            group,
            random_intercept: ri_sd * z,
            fri,
            event_time: None,
            censor_time: 0.0,
        });
    }
    let mut ids = Vec::with_capacity(setting.n);
    let mut surv_time = Vec::with_capacity(setting.n);
    let mut event = Vec::with_capacity(setting.n);
    let (mut ls, mut lt, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..setting.n {
        let u: f64 = 1.0 - rng.random::<f64>();
        let t_event = invert_survival(
            |t| {
                let mu = truth.eta_mu_with(&basis, i, t);
                true_lambda(t) + truth.eta_gamma(i) + truth.eta_alpha(i, mu)
            },
            u,
            T_MAX,
        );
        let c = rng.random_range(0.0..1.5 * T_MAX);
        let admin = t_event.unwrap_or(T_MAX);
        let (ti, di) = if admin <= c { (admin, t_event.is_some()) } else { (c, false) };
        truth.subjects[i].event_time = t_event;
        truth.subjects[i].censor_time = c;
        ids.push(format!("{}", i + 1));
        surv_time.push(ti.max(f64::MIN_POSITIVE));
        event.push(di);
        for g in 1..=T_MAX as usize {
            let t = g as f64;
            let keep = rng.random::<f64>() < setting.keep;
            let eps: f64 = StandardNormal.sample(rng);
            if keep && t < ti {
                ls.push(i);
                lt.push(t);
                y.push(truth.eta_mu_with(&basis, i, t) + setting.noise_sd * eps);
            }
        }
    }
    let mut baseline = Covariates::default();
    baseline.push("x1", Column::Numeric(truth.subjects.iter().map(|s| s.x1).collect()));
    baseline.push("x2", Column::Numeric(truth.subjects.iter().map(|s| s.x2).collect()));
    if setting.setting == 3 {
        baseline.push(
            "g",
            Column::Numeric(truth.subjects.iter().map(|s| f64::from(s.group.unwrap_or(0))).collect()),
        );
    }
    let data = Dataset::new(ids, surv_time, event, baseline, ls, lt, y, Covariates::default())?;
    let tables = truth_tables(&truth, &data);
    Ok(Simulated {
        setting: setting.clone(),
        data,
        truth,
        tables,
    })
}

pub fn truth_tables(truth: &Truth, data: &Dataset) -> TruthTables {
    let basis = fri_basis();
    let eta_mu_long = data
        .long_subject
        .iter()
        .zip(&data.long_time)
        .map(|(&i, &t)| truth.eta_mu_with(&basis, i, t))
        .collect();
    let eta_mu_at_t: Vec<f64> = (0..data.n_subjects())
        .map(|i| truth.eta_mu_with(&basis, i, data.surv_time[i]))
        .collect();
    TruthTables {
        eta_mu_long,
        eta_lambda_at_t: data.surv_time.iter().map(|&t| true_lambda(t)).collect(),
        eta_gamma: (0..data.n_subjects()).map(|i| truth.eta_gamma(i)).collect(),
        eta_alpha_at_t: eta_mu_at_t.iter().enumerate().map(|(i, &m)| truth.eta_alpha(i, m)).collect(),
        eta_mu_at_t,
    }
}

/// Model specification matching the generating structure of a setting:
/// smooth baseline hazard, linear `x1` in γ, smooth trend, random and
/// functional random intercepts and a smooth `x2` effect in μ, and a
/// linear, nonlinear or group-specific nonlinear association.
pub fn simulation_spec(setting: u8) -> JointModelSpec {
    let alpha = match setting {
        1 => AssocSpec::linear(),
        2 => AssocSpec::nonlinear(),
        _ => AssocSpec {
            g1: G1Spec::Pspline {
                smooth: SmoothSpec::default(),
            },
            g2: G2Spec::GroupFactor {
                covariate: "g".into(),
            },
        },
    };
    JointModelSpec {
        gamma: vec![
            TermSpec::Intercept,
            TermSpec::LinearCovariate {
                covariate: "x1".into(),
            },
        ],
        mu: vec![
            TermSpec::Intercept,
            TermSpec::PsplineTime {
                smooth: SmoothSpec::default(),
            },
            TermSpec::RandomIntercept,
            TermSpec::FunctionalRandomIntercept {
                smooth: SmoothSpec::default(),
            },
            TermSpec::PsplineCovariate {
                covariate: "x2".into(),
                smooth: SmoothSpec::default(),
            },
        ],
        alpha: Some(alpha),
        ..JointModelSpec::default()
    }
}

/// The fixed marker grid used for association errors.
pub fn eta_grid() -> Vec<f64> {
    let step = (ETA_GRID_UPPER - ETA_GRID_LOWER) / (ETA_GRID_SIZE - 1) as f64;
    (0..ETA_GRID_SIZE).map(|k| ETA_GRID_LOWER + step * k as f64).collect()
}

/// Point estimate or posterior sample to be scored against the truth.
#[derive(Debug, Clone, Copy)]
pub enum Estimate<'a> {
    Mode(&'a ThetaState<f64>),
    Chain(&'a SampleChain<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMetric {
    pub name: String,
    pub mse: f64,
    pub bias: f64,
    /// Share of points whose 95% interval covers the truth (chains only).
    pub coverage: Option<f64>,
    /// Squared error per grid point, where the effect has a grid.
    pub per_point_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub effects: Vec<EffectMetric>,
    /// Estimated `(1/n) Σ η′_α(η_μ(T_i))` at the true marker values.
    pub average_slope: f64,
    pub true_average_slope: f64,
}

impl SimMetrics {
    pub fn effect(&self, name: &str) -> Option<&EffectMetric> {
        self.effects.iter().find(|e| e.name == name)
    }
}

/// Estimated predictor values at every scored point, in a fixed order.
struct Evaluations {
    groups: Vec<Vec<f64>>,
    slope: f64,
}

const EFFECTS: [&str; 7] = [
    "mu",
    "sigma",
    "lambda",
    "lambda_grid",
    "gamma",
    "alpha",
    "alpha_grid",
];

fn alpha_extra(model: &JointModel<f64>, st: &ThetaState<f64>, i: usize) -> f64 {
    model
        .blocks_of(Predictor::Alpha)
        .filter(|&b| model.blocks[b].kind == TermKind::GroupIntercepts)
        .map(|b| st.eval_block_at(model, b, i, 0.0))
        .sum()
}

/// Representative subject per association group (one for ungrouped fits).
fn group_representatives(model: &JointModel<f64>, truth: &Truth) -> Vec<(usize, Option<u8>)> {
    if truth.setting == 3 {
        (0..2u8)
            .filter_map(|g| {
                truth
                    .subjects
                    .iter()
                    .position(|s| s.group == Some(g))
                    .map(|i| (i, Some(g)))
            })
            .collect()
    } else {
        vec![(0, None)].into_iter().take(model.n_subjects.min(1)).collect()
    }
}

fn evaluate(model: &JointModel<f64>, st: &ThetaState<f64>, data: &Dataset, tables: &TruthTables, reps: &[(usize, Option<u8>)]) -> Evaluations {
    let n = model.n_subjects;
    let t_grid: Vec<f64> = (1..=T_MAX as usize).map(|t| t as f64).collect();
    let mut scratch = AssocScratch::new(model.assoc.p1);
    let mut g2 = vec![0.0; model.assoc.p2];
    let beta_a = st.beta[model.assoc_block].as_slice();
    let mut alpha_t = Vec::with_capacity(n);
    let mut slope = 0.0;
    for i in 0..n {
        let ti = data.surv_time[i];
        model.assoc.g2_row(i, ti, &mut g2);
        let (a, a1, _) = model.assoc.eval_point(tables.eta_mu_at_t[i], &g2, beta_a, &mut scratch, None);
        alpha_t.push(a + alpha_extra(model, st, i));
        slope += a1;
    }
    let mut alpha_grid = Vec::new();
    for &(i, _) in reps {
        model.assoc.g2_row(i, data.surv_time[i], &mut g2);
        let extra = alpha_extra(model, st, i);
        for e in eta_grid() {
            alpha_grid.push(model.assoc.eval_point(e, &g2, beta_a, &mut scratch, None).0 + extra);
        }
    }
    Evaluations {
        groups: vec![
            st.eta_mu_long.clone(),
            st.eta_sigma_long.clone(),
            (0..n).map(|i| st.eval_predictor_at(model, Predictor::Lambda, i, data.surv_time[i])).collect(),
            t_grid.iter().map(|&t| st.eval_predictor_at(model, Predictor::Lambda, 0, t)).collect(),
            (0..n).map(|i| st.eval_predictor_at(model, Predictor::Gamma, i, data.surv_time[i])).collect(),
            alpha_t,
            alpha_grid,
        ],
        slope: slope / n as f64,
    }
}

/// True values aligned with [`evaluate`], shifted to the identifiability
/// constraints of the fitted model: the baseline hazard is centred over the
/// follow-up times, a nonlinear association is centred over the model's
/// constraint grid for the reference group, and both constants move to γ.
fn true_values(model: &JointModel<f64>, truth: &Truth, data: &Dataset, tables: &TruthTables, reps: &[(usize, Option<u8>)]) -> Vec<Vec<f64>> {
    let n = data.n_subjects();
    let lambda_shift = tables.eta_lambda_at_t.iter().sum::<f64>() / n as f64;
    let ref_group = reps.first().and_then(|r| r.1);
    let alpha_shift = if model.assoc.is_nonlinear() && !model.assoc.grid.is_empty() {
        model
            .assoc
            .grid
            .iter()
            .map(|&y| true_association(truth.setting, y, ref_group))
            .sum::<f64>()
            / model.assoc.grid.len() as f64
    } else {
        0.0
    };
    let mut alpha_grid = Vec::new();
    for &(_, g) in reps {
        alpha_grid.extend(eta_grid().iter().map(|&e| true_association(truth.setting, e, g) - alpha_shift));
    }
    vec![
        tables.eta_mu_long.clone(),
        vec![truth.eta_sigma(); data.n_obs()],
        tables.eta_lambda_at_t.iter().map(|l| l - lambda_shift).collect(),
        (1..=T_MAX as usize).map(|t| true_lambda(t as f64) - lambda_shift).collect(),
        tables.eta_gamma.iter().map(|g| g + lambda_shift + alpha_shift).collect(),
        tables.eta_alpha_at_t.iter().map(|a| a - alpha_shift).collect(),
        alpha_grid,
    ]
}

type Band = Vec<(f64, f64)>;

fn score(point: &[Vec<f64>], bands: Option<&[Band]>, target: &[Vec<f64>]) -> Vec<EffectMetric> {
    EFFECTS
        .iter()
        .enumerate()
        .map(|(g, name)| {
            let (est, tru) = (&point[g], &target[g]);
            let m = est.len().max(1) as f64;
            let per_point: Vec<f64> = est.iter().zip(tru).map(|(e, t)| (t - e).powi(2)).collect();
            let coverage = bands.map(|b| {
                b[g].iter().zip(tru).filter(|((lo, hi), t)| lo <= t && *t <= hi).count() as f64 / m
            });
            EffectMetric {
                name: name.to_string(),
                mse: per_point.iter().sum::<f64>() / m,
                bias: est.iter().zip(tru).map(|(e, t)| e - t).sum::<f64>() / m,
                coverage,
                per_point_mse: if name.ends_with("grid") { per_point } else { Vec::new() },
            }
        })
        .collect()
}

/// MSE, bias and 95% coverage of every predictor, the association on the
/// fixed marker grid and the average association slope.
pub fn metrics(model: &JointModel<f64>, data: &Dataset, sim: &Simulated, est: Estimate<'_>) -> Result<SimMetrics> {
    let truth = &sim.truth;
    let tables = &sim.tables;
    if tables.eta_mu_long.len() != data.n_obs() || truth.subjects.len() != data.n_subjects() {
        return Err(Error::Dimension("truth does not match the dataset".into()));
    }
    let reps = group_representatives(model, truth);
    let target = true_values(model, truth, data, tables, &reps);
    let true_slope = (0..data.n_subjects())
        .map(|i| true_association_slope(truth.setting, tables.eta_mu_at_t[i], truth.subjects[i].group))
        .sum::<f64>()
        / data.n_subjects() as f64;
    let (point, bands, slope) = match est {
        Estimate::Mode(st) => {
            let e = evaluate(model, st, data, tables, &reps);
            (e.groups, None, e.slope)
        }
        Estimate::Chain(chain) => {
            if chain.is_empty() {
                return Err(Error::Usage("cannot score an empty chain".into()));
            }
            let evals: Vec<Evaluations> = (0..chain.len())
                .map(|d| chain.state(model, d).map(|st| evaluate(model, &st, data, tables, &reps)))
                .collect::<Result<_>>()?;
            let nd = evals.len() as f64;
            let slope = evals.iter().map(|e| e.slope).sum::<f64>() / nd;
            let mut point = Vec::new();
            let mut bands = Vec::new();
            for g in 0..EFFECTS.len() {
                let m = evals[0].groups[g].len();
                let mut mean = vec![0.0; m];
                let mut band = Vec::with_capacity(m);
                let mut col = vec![0.0; evals.len()];
                for j in 0..m {
                    for (c, e) in col.iter_mut().zip(&evals) {
                        *c = e.groups[g][j];
                    }
                    mean[j] = col.iter().sum::<f64>() / nd;
                    col.sort_by(f64::total_cmp);
                    band.push((quantile_sorted(&col, 0.025), quantile_sorted(&col, 0.975)));
                }
                point.push(mean);
                bands.push(band);
            }
            (point, Some(bands), slope)
        }
    };
    let effects = score(&point, bands.as_deref(), &target);
    Ok(SimMetrics {
        effects,
        average_slope: slope,
        true_average_slope: true_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((mu_time_effect(0.0) - 0.2).abs() < 1e-15);
        assert_eq!(true_association(1, 0.7, None), 0.7);
        assert!((true_association(2, 0.0, None) - 0.9).abs() < 1e-12);
        assert!((true_association(3, 0.0, Some(0)) - 0.1).abs() < 1e-12);
        assert!((true_association(3, 0.0, Some(1)) - 0.9).abs() < 1e-12);
        let g = eta_grid();
        assert_eq!(g.len(), 120);
        assert_eq!((g[0], g[119]), (-0.5, 2.0));
    }

    #[test]
    fn slopes_match_finite_differences() {
        for (s, g) in [(1, None), (2, None), (3, Some(0)), (3, Some(1))] {
            for &e in &[-0.4, 0.3, 1.7] {
                let h = 1e-6;
                let fd = (true_association(s, e + h, g) - true_association(s, e - h, g)) / (2.0 * h);
                assert!((fd - true_association_slope(s, e, g)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constant_hazard_inverts_exactly() {
        let h: f64 = 0.05;
        for &u in &[0.9, 0.5, 0.1, 0.01] {
            let t = invert_survival(|_| h.ln(), u, 1000.0).unwrap();
            assert!((t - (-u.ln() / h)).abs() < 1e-7, "{t}");
        }
        assert_eq!(invert_survival(|_| h.ln(), 1.0, 120.0), Some(0.0));
        assert_eq!(invert_survival(|_| h.ln(), 1e-6, 120.0), None);
    }

    #[test]
    fn replay_is_deterministic() {
        let s = SimSetting::new(3, 12, 0.2, 4);
        let a = simulate(&s).unwrap();
        let b = simulate(&s).unwrap();
        assert_eq!(a, b);
        assert!(a.data.baseline.get("g").is_some());
        let c = simulate(&SimSetting::new(3, 12, 0.2, 5)).unwrap();
        assert_ne!(a.data.y, c.data.y);
    }

    #[test]
    fn noise_free_observations_equal_truth() {
        let mut s = SimSetting::new(1, 15, 1.0, 2);
        s.noise_sd = 0.0;
        let sim = simulate(&s).unwrap();
        for (y, m) in sim.data.y.iter().zip(&sim.tables.eta_mu_long) {
            assert!((y - m).abs() < 1e-12);
        }
        for i in 0..15 {
            let before = (1..=120).filter(|&t| (t as f64) < sim.data.surv_time[i]).count();
            let r = &sim.data.subject_ranges()[i];
            assert_eq!(r.end - r.start, before);
        }
    }

    #[test]
    fn random_intercept_variance() {
        let sim = simulate(&SimSetting::new(1, 600, 0.1, 11)).unwrap();
        let r: Vec<f64> = sim.truth.subjects.iter().map(|s| s.random_intercept).collect();
        let m = r.iter().sum::<f64>() / 600.0;
        let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 599.0;
        assert!((v - 0.25).abs() < 0.05, "{v}");
        let rate = sim.data.n_events() as f64 / 600.0;
        assert!(rate > 0.1 && rate < 0.9, "{rate}");
    }

    #[test]
    fn fri_draw_matches_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = difference_penalty::<f64>(FRI_BASIS, 2).unwrap().k;
        let prec = DMatrix::<f64>::identity(4, 4) * (1.0 + FRI_JITTER) + k / FRI_TAU2_T;
        let cov = prec.try_inverse().unwrap();
        let n = 40_000;
        let mut emp = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n {
            let b = DVector::from_vec(draw_fri_coefficients(&mut rng));
            emp += &b * b.transpose();
        }
        emp /= n as f64;
        assert!((emp - cov).abs().max() < 0.02);
    }

    #[test]
    fn thinning_keeps_requested_fraction() {
        for keep in [0.1, 0.2] {
            let sim = simulate(&SimSetting::new(2, 300, keep, 21)).unwrap();
            let eligible: usize = sim
                .data
                .surv_time
                .iter()
                .map(|&t| (1..=120).filter(|&g| (g as f64) < t).count())
                .sum();
            let frac = sim.data.n_obs() as f64 / eligible as f64;
            let se = (keep * (1.0 - keep) / eligible as f64).sqrt();
            assert!((frac - keep).abs() < 4.0 * se, "keep {keep}: realised {frac}");
        }
    }

    #[test]
    fn perfect_fit_scores_zero() {
        let sim = simulate(&SimSetting::new(1, 30, 0.2, 3)).unwrap();
        let model = JointModel::build(&simulation_spec(1), &sim.data).unwrap();
        let reps = group_representatives(&model, &sim.truth);
        let t = true_values(&model, &sim.truth, &sim.data, &sim.tables, &reps);
        assert_eq!(t.len(), EFFECTS.len());
        assert_eq!(t[6].len(), ETA_GRID_SIZE);
        assert!(t[2].iter().sum::<f64>().abs() < 1e-9);
        let bands: Vec<Band> = t.iter().map(|v| v.iter().map(|&x| (x, x)).collect()).collect();
        for e in score(&t, Some(&bands), &t) {
            assert_eq!((e.mse, e.bias, e.coverage), (0.0, 0.0, Some(1.0)), "{}", e.name);
        }
    }
}
