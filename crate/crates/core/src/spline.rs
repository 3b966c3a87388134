//! B-spline bases, difference penalties, tensor products and identifiability
//! constraints.
//!
//! Knot vectors are built P-spline style: the interior knots are augmented
//! with the two boundary knots and `degree` additional outer knots on each
//! side, all strictly increasing. Evaluation outside `[lower, upper]` uses the
//! outermost polynomial pieces, so bases and their derivatives stay smooth in
//! the argument everywhere.

use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// One marginal B-spline basis together with the order of its difference
/// penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec<T> {
    pub interior_knots: Vec<T>,
    pub degree: usize,
    pub diff_order: usize,
    pub lower: T,
    pub upper: T,
}

impl<T: Real> BasisSpec<T> {
    pub fn new(
        interior_knots: Vec<T>,
        degree: usize,
        diff_order: usize,
        lower: T,
        upper: T,
    ) -> Result<Self> {
        let spec = Self {
            interior_knots,
            degree,
            diff_order,
            lower,
            upper,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Basis with `n_basis` functions and equidistant interior knots over
    /// `[lower, upper]`.
    pub fn equidistant(
        lower: T,
        upper: T,
        n_basis: usize,
        degree: usize,
        diff_order: usize,
    ) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        if n_basis < degree + 1 {
            return Err(Error::Config(format!(
                "{n_basis} basis functions cannot carry a degree-{degree} spline"
            )));
        }
        if !(lower < upper) {
            return Err(Error::Config(format!(
                "spline domain [{lower}, {upper}] is empty"
            )));
        }
        let n_int = n_basis - degree - 1;
        let h = (upper - lower) / T::from_usize_lossy(n_int + 1);
        let interior = (1..=n_int)
            .map(|j| lower + h * T::from_usize_lossy(j))
            .collect();
        Self::new(interior, degree, diff_order, lower, upper)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        if self.diff_order < 1 {
            return Err(Error::Config("difference order must be at least 1".into()));
        }
        if !(self.lower < self.upper) {
            return Err(Error::Config(format!(
                "spline domain [{}, {}] is empty",
                self.lower, self.upper
            )));
        }
        let mut prev = self.lower;
        for &k in self.interior_knots.iter().chain(std::iter::once(&self.upper)) {
            if !(k > prev) {
                return Err(Error::Config(
                    "knots must be strictly increasing inside the domain".into(),
                ));
            }
            prev = k;
        }
        if self.n_basis() <= self.diff_order {
            return Err(Error::Config(format!(
                "{} basis functions do not support a difference penalty of order {}",
                self.n_basis(),
                self.diff_order
            )));
        }
        Ok(())
    }

    pub fn n_basis(&self) -> usize {
        self.interior_knots.len() + self.degree + 1
    }

    /// Full knot vector including the `2 * degree` outer knots.
    pub fn knots(&self) -> Vec<T> {
        let l = self.degree;
        let first = self
            .interior_knots
            .first()
            .copied()
            .unwrap_or(self.upper)
            - self.lower;
        let last = self.upper
            - self
                .interior_knots
                .last()
                .copied()
                .unwrap_or(self.lower);
        let mut knots = Vec::with_capacity(self.interior_knots.len() + 2 + 2 * l);
        for j in (1..=l).rev() {
            knots.push(self.lower - first * T::from_usize_lossy(j));
        }
        knots.push(self.lower);
        knots.extend(self.interior_knots.iter().copied());
        knots.push(self.upper);
        for j in 1..=l {
            knots.push(self.upper + last * T::from_usize_lossy(j));
        }
        knots
    }
}

/// Precomputed knot vector for repeated pointwise evaluation.
#[derive(Debug, Clone)]
pub struct BasisEvaluator<T> {
    knots: Vec<T>,
    degree: usize,
    n_basis: usize,
}

impl<T: Real> BasisEvaluator<T> {
    pub fn new(spec: &BasisSpec<T>) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            knots: spec.knots(),
            degree: spec.degree,
            n_basis: spec.n_basis(),
        })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    fn span(&self, x: T) -> usize {
        let l = self.degree;
        let lo = l;
        let hi = self.knots.len() - l - 2;
        if x < self.knots[lo + 1] {
            return lo;
        }
        if x >= self.knots[hi] {
            return hi;
        }
        // knots[lo + 1] <= x < knots[hi]
        let (mut a, mut b) = (lo + 1, hi);
        while b - a > 1 {
            let mid = (a + b) / 2;
            if x >= self.knots[mid] {
                a = mid;
            } else {
                b = mid;
            }
        }
        a
    }

    /// Nonzero degree-`deg` basis values on span `k` (indices `k-deg..=k`).
    fn basis_funs(&self, k: usize, x: T, deg: usize, out: &mut Vec<T>) {
        let t = &self.knots;
        out.clear();
        out.resize(deg + 1, T::zero());
        out[0] = T::one();
        let mut left = vec![T::zero(); deg + 1];
        let mut right = vec![T::zero(); deg + 1];
        for j in 1..=deg {
            left[j] = x - t[k + 1 - j];
            right[j] = t[k + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Values of the `order`-th derivative of all basis functions that are
    /// nonzero at `x`. Returns the index of the first one and writes
    /// `degree + 1` values into `out`.
    pub fn eval_into(&self, x: T, order: usize, out: &mut Vec<T>) -> usize {
        let l = self.degree;
        let k = self.span(x);
        if order > l {
            out.clear();
            out.resize(l + 1, T::zero());
            return k - l;
        }
        let mut vals = Vec::with_capacity(l + 1);
        self.basis_funs(k, x, l - order, &mut vals);
        let t = &self.knots;
        for deg in (l - order + 1)..=l {
            // vals holds indices k-deg+1..=k; produce indices k-deg..=k
            let mut next = vec![T::zero(); deg + 1];
            let d = T::from_usize_lossy(deg);
            for (pos, slot) in next.iter_mut().enumerate() {
                let j = k - deg + pos;
                let v_j = if pos >= 1 { vals[pos - 1] } else { T::zero() };
                let v_j1 = if pos < deg { vals[pos] } else { T::zero() };
                let a = v_j / (t[j + deg] - t[j]);
                let b = v_j1 / (t[j + deg + 1] - t[j + 1]);
                *slot = d * (a - b);
            }
            vals = next;
        }
        out.clear();
        out.extend_from_slice(&vals);
        k - l
    }

    /// Full row of length `n_basis`.
    pub fn row(&self, x: T, order: usize) -> Vec<T> {
        let mut vals = Vec::new();
        let first = self.eval_into(x, order, &mut vals);
        let mut row = vec![T::zero(); self.n_basis];
        for (o, v) in vals.into_iter().enumerate() {
            row[first + o] = v;
        }
        row
    }

    pub fn matrix(&self, x: &[T], order: usize) -> DMatrix<T> {
        let mut m = DMatrix::zeros(x.len(), self.n_basis);
        let mut vals = Vec::new();
        for (i, &xi) in x.iter().enumerate() {
            let first = self.eval_into(xi, order, &mut vals);
            for (o, &v) in vals.iter().enumerate() {
                m[(i, first + o)] = v;
            }
        }
        m
    }
}

/// B-spline design matrix, `x.len() × p`.
pub fn bspline_basis<T: Real>(x: &[T], spec: &BasisSpec<T>) -> Result<DMatrix<T>> {
    Ok(BasisEvaluator::new(spec)?.matrix(x, 0))
}

/// First or second derivative of the B-spline basis with respect to its
/// argument.
pub fn bspline_deriv<T: Real>(x: &[T], spec: &BasisSpec<T>, order: usize) -> Result<DMatrix<T>> {
    if order == 0 || order > 2 {
        return Err(Error::Config(format!(
            "derivative order {order} not supported (1 or 2)"
        )));
    }
    if order > spec.degree {
        return Err(Error::Config(format!(
            "derivative order {order} exceeds spline degree {}",
            spec.degree
        )));
    }
    Ok(BasisEvaluator::new(spec)?.matrix(x, order))
}

/// Symmetric penalty matrix with its rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix<T: nalgebra::Scalar> {
    pub k: DMatrix<T>,
    pub rank: usize,
}

/// `r`-th order difference matrix, `(p - r) × p`.
pub fn difference_matrix<T: Real>(p: usize, r: usize) -> Result<DMatrix<T>> {
    if r < 1 || p <= r {
        return Err(Error::Config(format!(
            "difference penalty needs p > r >= 1 (p = {p}, r = {r})"
        )));
    }
    let mut d = DMatrix::<T>::identity(p, p);
    for _ in 0..r {
        let rows = d.nrows() - 1;
        let next = DMatrix::from_fn(rows, p, |i, j| d[(i + 1, j)] - d[(i, j)]);
        d = next;
    }
    Ok(d)
}

/// `K = D_rᵀ D_r`.
pub fn difference_penalty<T: Real>(p: usize, r: usize) -> Result<PenaltyMatrix<T>> {
    let d = difference_matrix::<T>(p, r)?;
    Ok(PenaltyMatrix {
        k: d.transpose() * &d,
        rank: p - r,
    })
}

/// Number of eigenvalues above `1e-10 · λ_max`.
pub fn numerical_rank<T: Real>(k: &DMatrix<T>) -> usize {
    positive_eigenvalues(k).len()
}

/// Eigenvalues of a symmetric PSD matrix that exceed `1e-10 · λ_max`.
pub fn positive_eigenvalues<T: Real>(k: &DMatrix<T>) -> Vec<T> {
    if k.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(k.clone()).eigenvalues;
    let max = eig.iter().fold(T::zero(), |m, &v| m.max(v));
    if max <= T::zero() {
        return Vec::new();
    }
    let tol = max * T::lit(1e-10);
    eig.iter().copied().filter(|&v| v > tol).collect()
}

/// Log pseudo-determinant over eigenvalues above `1e-10 · λ_max`.
pub fn log_pseudo_det<T: Real>(k: &DMatrix<T>) -> T {
    positive_eigenvalues(k)
        .into_iter()
        .fold(T::zero(), |acc, v| acc + v.ln())
}

/// Row-wise Kronecker product of two matrices with equal row counts.
pub fn row_tensor<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "row tensor of {}-row and {}-row matrices",
            a.nrows(),
            b.nrows()
        )));
    }
    let (pa, pb) = (a.ncols(), b.ncols());
    Ok(DMatrix::from_fn(a.nrows(), pa * pb, |i, j| {
        a[(i, j / pb)] * b[(i, j % pb)]
    }))
}

pub fn kronecker<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// `(1/τ₁²)(K₁ ⊗ I) + (1/τ₂²)(I ⊗ K₂)`.
pub fn anisotropic_penalty<T: Real>(
    k1: &DMatrix<T>,
    k2: &DMatrix<T>,
    tau1_sq: T,
    tau2_sq: T,
) -> Result<DMatrix<T>> {
    if !(tau1_sq > T::zero()) || !(tau2_sq > T::zero()) {
        return Err(Error::Domain(format!(
            "variance parameters must be positive (got {tau1_sq}, {tau2_sq})"
        )));
    }
    let i1 = DMatrix::<T>::identity(k1.nrows(), k1.nrows());
    let i2 = DMatrix::<T>::identity(k2.nrows(), k2.nrows());
    Ok(k1.kronecker(&i2) / tau1_sq + i1.kronecker(k2) / tau2_sq)
}

/// Reparameterisation `β = Z β̇` that removes one linear constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTransform<T: nalgebra::Scalar> {
    pub z: DMatrix<T>,
}

impl<T: Real> ConstraintTransform<T> {
    /// Null-space basis of `cᵀ` from a Householder reflection of `c`; the
    /// columns of `Z` are orthonormal.
    pub fn from_constraint(c: &DVector<T>) -> Result<Self> {
        let p = c.len();
        let norm = c.norm();
        let scale = c.amax();
        if p < 2 || !(norm > T::zero()) || !(scale > T::zero()) {
            return Err(Error::Config(
                "sum-to-zero constraint is vacuous (zero column sums)".into(),
            ));
        }
        let mut v = c.clone();
        if v[0] >= T::zero() {
            v[0] += norm;
        } else {
            v[0] -= norm;
        }
        let vtv = v.dot(&v);
        let two = T::lit(2.0);
        let z = DMatrix::from_fn(p, p - 1, |i, j| {
            let col = j + 1;
            let id = if i == col { T::one() } else { T::zero() };
            id - two * v[i] * v[col] / vtv
        });
        Ok(Self { z })
    }

    pub fn n_raw(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_constrained(&self) -> usize {
        self.z.ncols()
    }

    pub fn apply_design(&self, x: &DMatrix<T>) -> DMatrix<T> {
        x * &self.z
    }

    pub fn apply_penalty(&self, k: &DMatrix<T>) -> DMatrix<T> {
        self.z.transpose() * k * &self.z
    }

    /// Maps a constrained row (`p` raw values) to `p - 1` values.
    pub fn apply_row(&self, raw: &[T], out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (i, &r) in raw.iter().enumerate() {
                acc += r * self.z[(i, j)];
            }
            *o = acc;
        }
    }
}

/// Sum-to-zero constraint over the rows of `x`.
pub fn sum_to_zero<T: Real>(
    x: &DMatrix<T>,
    k: &PenaltyMatrix<T>,
) -> Result<(DMatrix<T>, PenaltyMatrix<T>, ConstraintTransform<T>)> {
    if k.k.nrows() != x.ncols() {
        return Err(Error::Dimension(format!(
            "design has {} columns, penalty is {}×{}",
            x.ncols(),
            k.k.nrows(),
            k.k.ncols()
        )));
    }
    let c = column_sums(x);
    let zt = ConstraintTransform::from_constraint(&c)?;
    let kdot = zt.apply_penalty(&k.k);
    let rank = if k.rank == 0 { 0 } else { numerical_rank(&kdot) };
    Ok((zt.apply_design(x), PenaltyMatrix { k: kdot, rank }, zt))
}

pub fn column_sums<T: Real>(x: &DMatrix<T>) -> DVector<T> {
    DVector::from_fn(x.ncols(), |j, _| x.column(j).sum())
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: T) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = T::from_usize_lossy(n - 1) * p;
    let lo = h.floor();
    let idx = lo.as_f64() as usize;
    if idx + 1 >= n {
        return sorted[n - 1];
    }
    sorted[idx] + (h - lo) * (sorted[idx + 1] - sorted[idx])
}

/// Equidistant grid between the 2.5% and 97.5% empirical quantiles.
pub fn alpha_constraint_grid<T: Real>(y_obs: &[T], grid_size: usize) -> Result<Vec<T>> {
    if grid_size < 2 {
        return Err(Error::Config("constraint grid needs at least 2 points".into()));
    }
    let mut sorted: Vec<T> = y_obs.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if sorted.len() < 2 || !(sorted[sorted.len() - 1] > sorted[0]) {
        return Err(Error::Data(
            "observed responses need at least two distinct values".into(),
        ));
    }
    let lo = quantile_sorted(&sorted, T::lit(0.025));
    let hi = quantile_sorted(&sorted, T::lit(0.975));
    if !(hi > lo) {
        return Err(Error::Data(
            "2.5% and 97.5% response quantiles coincide".into(),
        ));
    }
    let step = (hi - lo) / T::from_usize_lossy(grid_size - 1);
    Ok((0..grid_size)
        .map(|j| lo + step * T::from_usize_lossy(j))
        .collect())
}

/// Constraint making `Σ_g B(y*_g) Z β̇ = 0` on the fixed response grid.
pub fn alpha_grid_constraint<T: Real>(
    spec: &BasisSpec<T>,
    y_obs: &[T],
    grid_size: usize,
) -> Result<ConstraintTransform<T>> {
    let grid = alpha_constraint_grid(y_obs, grid_size)?;
    let b = bspline_basis(&grid, spec)?;
    ConstraintTransform::from_constraint(&column_sums(&b))
}
