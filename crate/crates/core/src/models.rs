//! Likelihood models.
//!
//! Every model exposes the negative log-likelihood `ℓ(y | x, θ)`, its gradient
//! and its Hessian. The Hessian takes no label: all supported models have a
//! curvature that depends on the feature and the parameter only, which is what
//! lets the sampling design be computed before any label is queried.

use std::fmt;
use std::ops::{Deref, DerefMut};

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::fisher_design::FisherMatrix;

/// A model parameter `θ ∈ ℝᵈ`.
#[derive(Clone, PartialEq)]
pub struct ParamVec(DVector<f64>);

impl ParamVec {
    pub fn new(values: DVector<f64>) -> Self {
        ParamVec(values)
    }

    pub fn from_slice(values: &[f64]) -> Self {
        ParamVec(DVector::from_column_slice(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVec(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &ParamVec) -> f64 {
        (&self.0 - &other.0).norm()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for ParamVec {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl DerefMut for ParamVec {
    fn deref_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }
}

impl fmt::Debug for ParamVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl From<DVector<f64>> for ParamVec {
    fn from(v: DVector<f64>) -> Self {
        ParamVec(v)
    }
}

/// An input vector `x`.
#[derive(Clone, PartialEq)]
pub struct Feature(DVector<f64>);

impl Feature {
    pub fn new(values: DVector<f64>) -> Self {
        Feature(values)
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Feature(DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

impl Deref for Feature {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl fmt::Debug for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// A label: a real response for regression, `±1` for the logistic models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label(pub f64);

impl Label {
    pub const POSITIVE: Label = Label(1.0);
    pub const NEGATIVE: Label = Label(-1.0);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_binary(self) -> bool {
        self.0 == 1.0 || self.0 == -1.0
    }
}

/// The compact parameter set `Θ`, realized as a closed L2 ball.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDomain {
    center: ParamVec,
    diameter: f64,
}

impl ParamDomain {
    pub fn new(center: ParamVec, diameter: f64) -> Result<Self> {
        if !(diameter.is_finite() && diameter > 0.0) {
            return Err(Error::invalid(format!(
                "domain diameter must be positive, got {diameter}"
            )));
        }
        if !center.is_finite() {
            return Err(Error::invalid("domain center must be finite"));
        }
        Ok(ParamDomain { center, diameter })
    }

    /// Ball of the given diameter around the origin.
    pub fn centered(dim: usize, diameter: f64) -> Result<Self> {
        Self::new(ParamVec::zeros(dim), diameter)
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn center(&self) -> &ParamVec {
        &self.center
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    pub fn contains(&self, theta: &ParamVec) -> bool {
        theta.distance(&self.center) <= self.radius() * (1.0 + 1e-12)
    }

    /// Euclidean projection onto the ball.
    pub fn project(&self, theta: &ParamVec) -> ParamVec {
        assert_eq!(theta.dim(), self.dim(), "parameter/domain dimension mismatch");
        let offset = &theta.0 - &self.center.0;
        let norm = offset.norm();
        if norm <= self.radius() {
            return theta.clone();
        }
        ParamVec(&self.center.0 + offset * (self.radius() / norm))
    }

    /// A point drawn uniformly from the ball.
    pub fn sample_uniform(&self, rng: &mut dyn RngCore) -> ParamVec {
        let d = self.dim();
        let dir = random_unit_vector(d, rng);
        let u: f64 = rng.random();
        let r = self.radius() * u.powf(1.0 / d as f64);
        ParamVec(&self.center.0 + dir * r)
    }
}

/// Free-function form of [`ParamDomain::project`].
pub fn project(domain: &ParamDomain, theta: &ParamVec) -> ParamVec {
    domain.project(theta)
}

/// Uniform direction on the unit sphere in `ℝᵈ`.
pub fn random_unit_vector(dim: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut *rng));
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Negative log-likelihood model with label-free curvature.
pub trait LikelihoodModel: Send + Sync {
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;

    fn loss(&self, x: &Feature, y: Label, theta: &ParamVec) -> f64;

    fn grad(&self, x: &Feature, y: Label, theta: &ParamVec) -> ParamVec;

    fn hessian(&self, x: &Feature, theta: &ParamVec) -> FisherMatrix;

    /// Draws `y ~ p(· | x, θ*)`.
    fn sample_label(&self, x: &Feature, theta_star: &ParamVec, rng: &mut dyn RngCore) -> Label;

    /// `E_{y ~ p(·|x, θ*)} ℓ(y | x, θ)`, in closed form.
    fn expected_loss(&self, x: &Feature, theta: &ParamVec, theta_star: &ParamVec) -> f64;

    /// Probability that the plug-in classifier at `θ` mislabels `x` when labels
    /// come from `θ*`. `None` for models without a decision rule.
    fn expected_error(&self, _x: &Feature, _theta: &ParamVec, _theta_star: &ParamVec) -> Option<f64> {
        None
    }
}

fn check_dims(model_dim: usize, x: &Feature, theta: &ParamVec) {
    assert_eq!(theta.dim(), model_dim, "parameter dimension mismatch");
    assert_eq!(x.dim(), model_dim, "feature dimension mismatch");
}

fn outer(x: &Feature, weight: f64) -> FisherMatrix {
    FisherMatrix::new(x.as_vector() * x.as_vector().transpose() * weight)
}

/// Linear-Gaussian regression with loss `(y − θᵀx)²`.
///
/// The Gaussian normalization constant is dropped; it cancels in every
/// excess-risk difference. With noise variance 1/2 the loss is exactly the
/// negative log-likelihood up to that constant.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionModel {
    dim: usize,
    noise_var: f64,
}

impl RegressionModel {
    pub const DEFAULT_NOISE_VAR: f64 = 0.5;

    pub fn new(dim: usize, noise_var: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("model dimension must be positive"));
        }
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return Err(Error::invalid(format!("noise variance must be >= 0, got {noise_var}")));
        }
        Ok(RegressionModel { dim, noise_var })
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

impl LikelihoodModel for RegressionModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, x: &Feature, y: Label, theta: &ParamVec) -> f64 {
        check_dims(self.dim, x, theta);
        let r = y.0 - theta.dot(x);
        r * r
    }

    fn grad(&self, x: &Feature, y: Label, theta: &ParamVec) -> ParamVec {
        check_dims(self.dim, x, theta);
        let r = y.0 - theta.dot(x);
        ParamVec(x.as_vector() * (-2.0 * r))
    }

    fn hessian(&self, x: &Feature, theta: &ParamVec) -> FisherMatrix {
        check_dims(self.dim, x, theta);
        outer(x, 2.0)
    }

    fn sample_label(&self, x: &Feature, theta_star: &ParamVec, rng: &mut dyn RngCore) -> Label {
        check_dims(self.dim, x, theta_star);
        let mean = theta_star.dot(x);
        if self.noise_var == 0.0 {
            return Label(mean);
        }
        let noise = Normal::new(0.0, self.noise_var.sqrt()).expect("finite noise variance");
        Label(mean + noise.sample(rng))
    }

    fn expected_loss(&self, x: &Feature, theta: &ParamVec, theta_star: &ParamVec) -> f64 {
        check_dims(self.dim, x, theta);
        let gap = (theta.as_vector() - theta_star.as_vector()).dot(x);
        self.noise_var + gap * gap
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eᶻ)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logistic_sample(z: f64, rng: &mut dyn RngCore) -> Label {
    let u: f64 = rng.random();
    if u < sigmoid(z) {
        Label::POSITIVE
    } else {
        Label::NEGATIVE
    }
}

fn logistic_expected_loss(z: f64, z_star: f64) -> f64 {
    let p = sigmoid(z_star);
    p * softplus(-z) + (1.0 - p) * softplus(z)
}

fn logistic_expected_error(z: f64, z_star: f64) -> f64 {
    let p = sigmoid(z_star);
    if z >= 0.0 {
        1.0 - p
    } else {
        p
    }
}

/// Binary logistic regression, `ℓ = log(1 + exp(−y θᵀx))`, `y ∈ {−1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    dim: usize,
}

impl LogisticModel {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("model dimension must be positive"));
        }
        Ok(LogisticModel { dim })
    }
}

impl LikelihoodModel for LogisticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, x: &Feature, y: Label, theta: &ParamVec) -> f64 {
        check_dims(self.dim, x, theta);
        debug_assert!(y.is_binary(), "logistic labels must be ±1");
        softplus(-y.0 * theta.dot(x))
    }

    fn grad(&self, x: &Feature, y: Label, theta: &ParamVec) -> ParamVec {
        check_dims(self.dim, x, theta);
        debug_assert!(y.is_binary(), "logistic labels must be ±1");
        let s = sigmoid(-y.0 * theta.dot(x));
        ParamVec(x.as_vector() * (-y.0 * s))
    }

    fn hessian(&self, x: &Feature, theta: &ParamVec) -> FisherMatrix {
        check_dims(self.dim, x, theta);
        let s = sigmoid(theta.dot(x));
        outer(x, s * (1.0 - s))
    }

    fn sample_label(&self, x: &Feature, theta_star: &ParamVec, rng: &mut dyn RngCore) -> Label {
        check_dims(self.dim, x, theta_star);
        logistic_sample(theta_star.dot(x), rng)
    }

    fn expected_loss(&self, x: &Feature, theta: &ParamVec, theta_star: &ParamVec) -> f64 {
        check_dims(self.dim, x, theta);
        logistic_expected_loss(theta.dot(x), theta_star.dot(x))
    }

    fn expected_error(&self, x: &Feature, theta: &ParamVec, theta_star: &ParamVec) -> Option<f64> {
        check_dims(self.dim, x, theta);
        Some(logistic_expected_error(theta.dot(x), theta_star.dot(x)))
    }
}

/// Logistic matrix factorization seen from one user.
///
/// `p(R | φ_b, φ_u) = 1 / (1 + exp(−R φ_uᵀ φ_b))`. Item factors `φ_b` are
/// frozen features; the tracked parameter is the user vector `φ_u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticMfModel {
    inner: LogisticModel,
}

impl LogisticMfModel {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(LogisticMfModel {
            inner: LogisticModel::new(dim)?,
        })
    }
}

impl LikelihoodModel for LogisticMfModel {
    fn dim(&self) -> usize {
        self.inner.dim
    }

    fn loss(&self, item: &Feature, rating: Label, user: &ParamVec) -> f64 {
        self.inner.loss(item, rating, user)
    }

    fn grad(&self, item: &Feature, rating: Label, user: &ParamVec) -> ParamVec {
        self.inner.grad(item, rating, user)
    }

    fn hessian(&self, item: &Feature, user: &ParamVec) -> FisherMatrix {
        self.inner.hessian(item, user)
    }

    fn sample_label(&self, item: &Feature, user: &ParamVec, rng: &mut dyn RngCore) -> Label {
        self.inner.sample_label(item, user, rng)
    }

    fn expected_loss(&self, item: &Feature, user: &ParamVec, user_star: &ParamVec) -> f64 {
        self.inner.expected_loss(item, user, user_star)
    }

    fn expected_error(&self, item: &Feature, user: &ParamVec, user_star: &ParamVec) -> Option<f64> {
        self.inner.expected_error(item, user, user_star)
    }
}

/// Closed set of the shipped models, for config-driven callers.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Regression(RegressionModel),
    Logistic(LogisticModel),
    LogisticMf(LogisticMfModel),
}

impl AnyModel {
    fn inner(&self) -> &dyn LikelihoodModel {
        match self {
            AnyModel::Regression(m) => m,
            AnyModel::Logistic(m) => m,
            AnyModel::LogisticMf(m) => m,
        }
    }
}

impl LikelihoodModel for AnyModel {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn loss(&self, x: &Feature, y: Label, theta: &ParamVec) -> f64 {
        self.inner().loss(x, y, theta)
    }

    fn grad(&self, x: &Feature, y: Label, theta: &ParamVec) -> ParamVec {
        self.inner().grad(x, y, theta)
    }

    fn hessian(&self, x: &Feature, theta: &ParamVec) -> FisherMatrix {
        self.inner().hessian(x, theta)
    }

    fn sample_label(&self, x: &Feature, theta_star: &ParamVec, rng: &mut dyn RngCore) -> Label {
        self.inner().sample_label(x, theta_star, rng)
    }

    fn expected_loss(&self, x: &Feature, theta: &ParamVec, theta_star: &ParamVec) -> f64 {
        self.inner().expected_loss(x, theta, theta_star)
    }

    fn expected_error(&self, x: &Feature, theta: &ParamVec, theta_star: &ParamVec) -> Option<f64> {
        self.inner().expected_error(x, theta, theta_star)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(v: &[f64]) -> ParamVec {
        ParamVec::from_slice(v)
    }

    fn f(v: &[f64]) -> Feature {
        Feature::from_slice(v)
    }

    #[test]
    fn regression_loss_examples() {
        let m = RegressionModel::new(2, 0.5).unwrap();
        assert_eq!(m.loss(&f(&[1.0, 0.0]), Label(0.0), &p(&[0.0, 0.0])), 0.0);
        assert_eq!(m.loss(&f(&[1.0, 2.0]), Label(3.0), &p(&[1.0, 1.0])), 0.0);
    }

    #[test]
    fn logistic_loss_at_origin_is_ln2() {
        let m = LogisticModel::new(3).unwrap();
        let l = m.loss(&f(&[0.3, -2.0, 5.0]), Label::POSITIVE, &ParamVec::zeros(3));
        assert_relative_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn gradient_examples() {
        let reg = RegressionModel::new(2, 0.5).unwrap();
        let g = reg.grad(&f(&[1.0, 0.0]), Label(1.0), &p(&[0.0, 0.0]));
        assert_eq!(g.as_slice(), &[-2.0, 0.0]);

        let log = LogisticModel::new(2).unwrap();
        let g = log.grad(&f(&[1.0, 1.0]), Label::POSITIVE, &p(&[0.0, 0.0]));
        assert_relative_eq!(g[0], -0.5);
        assert_relative_eq!(g[1], -0.5);
    }

    #[test]
    fn hessian_examples() {
        let reg = RegressionModel::new(2, 0.5).unwrap();
        let h = reg.hessian(&f(&[1.0, 0.0]), &p(&[0.0, 0.0]));
        assert_eq!(h.as_matrix().as_slice(), &[2.0, 0.0, 0.0, 0.0]);
        let h2 = reg.hessian(&f(&[1.0, 0.0]), &p(&[7.0, -3.0]));
        assert_eq!(h, h2);

        let log = LogisticModel::new(2).unwrap();
        let h = log.hessian(&f(&[1.0, 0.0]), &p(&[0.0, 4.0]));
        assert_relative_eq!(h[(0, 0)], 0.25);
        assert_eq!(h[(0, 1)], 0.0);
        assert_eq!(h[(1, 1)], 0.0);
    }

    #[test]
    fn noiseless_regression_labels_are_exact() {
        let m = RegressionModel::new(2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = m.sample_label(&f(&[1.5, -2.0]), &p(&[2.0, 1.0]), &mut rng);
        assert_eq!(y.0, 1.0);
    }

    #[test]
    fn saturated_logistic_labels_are_positive() {
        let m = LogisticModel::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert_eq!(m.sample_label(&f(&[1.0]), &p(&[60.0]), &mut rng), Label::POSITIVE);
        }
    }

    #[test]
    fn logistic_labels_at_origin_are_balanced() {
        let m = LogisticModel::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = f(&[0.4, 1.0]);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| m.sample_label(&x, &ParamVec::zeros(2), &mut rng).0)
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.02, "mean label {mean}");
    }

    #[test]
    fn projection_examples() {
        let dom = ParamDomain::centered(2, 2.0).unwrap();
        let inside = p(&[0.3, -0.4]);
        assert_eq!(dom.project(&inside), inside);
        assert_eq!(dom.project(&p(&[3.0, 0.0])).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn domain_rejects_nonpositive_diameter() {
        assert!(ParamDomain::centered(2, 0.0).is_err());
        assert!(ParamDomain::centered(2, f64::NAN).is_err());
    }

    #[test]
    fn uniform_domain_samples_are_feasible() {
        let dom = ParamDomain::new(p(&[1.0, 2.0, 3.0]), 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            assert!(dom.contains(&dom.sample_uniform(&mut rng)));
        }
    }

    #[test]
    fn expected_error_follows_decision_rule() {
        let m = LogisticModel::new(1).unwrap();
        let x = f(&[1.0]);
        let e = m.expected_error(&x, &p(&[1.0]), &p(&[2.0])).unwrap();
        assert_relative_eq!(e, 1.0 - sigmoid(2.0));
        let e = m.expected_error(&x, &p(&[-1.0]), &p(&[2.0])).unwrap();
        assert_relative_eq!(e, sigmoid(2.0));
        assert!(RegressionModel::new(1, 0.5)
            .unwrap()
            .expected_error(&x, &p(&[1.0]), &p(&[2.0]))
            .is_none());
    }
}
