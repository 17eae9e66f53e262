//! Simulated drifting worlds.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::fisher_design::SamplePool;
use crate::models::{
    random_unit_vector, AnyModel, Feature, Label, LikelihoodModel, LogisticMfModel, LogisticModel, ParamDomain,
    ParamVec, RegressionModel,
};
use crate::sampling::LabelSource;
use crate::session::{SamplingMode, SessionConfig, World};

/// Which simulator drives a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    Regression,
    Classification,
    Preference,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Regression => "regression",
            ScenarioKind::Classification => "classification",
            ScenarioKind::Preference => "preference",
        }
    }

    pub fn is_binary(self) -> bool {
        !matches!(self, ScenarioKind::Regression)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" => Ok(ScenarioKind::Regression),
            "classification" => Ok(ScenarioKind::Classification),
            "preference" => Ok(ScenarioKind::Preference),
            _ => Err(Error::invalid(format!("unknown scenario {s:?}"))),
        }
    }
}

/// Pretrained latent factors used by the preference scenario.
#[derive(Clone, Debug)]
pub struct PreferenceData {
    pub item_factors: Vec<Feature>,
    pub user_factors: Vec<ParamVec>,
}

impl PreferenceData {
    pub fn new(item_factors: Vec<Feature>, user_factors: Vec<ParamVec>) -> Result<Self> {
        let d = item_factors
            .first()
            .ok_or_else(|| Error::invalid("no item factors"))?
            .dim();
        if user_factors.is_empty() {
            return Err(Error::invalid("no user factors"));
        }
        if item_factors.iter().any(|f| f.dim() != d) || user_factors.iter().any(|u| u.dim() != d) {
            return Err(Error::invalid("factor dimensions disagree"));
        }
        Ok(PreferenceData {
            item_factors,
            user_factors,
        })
    }

    pub fn dim(&self) -> usize {
        self.item_factors[0].dim()
    }
}

/// Parameters of a simulated world.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub dim: usize,
    pub pool_size: usize,
    pub horizon: usize,
    /// Per-step drift of the true parameter.
    pub rho_true: f64,
    /// Default target excess risk.
    pub eps: f64,
    /// Label noise variance (regression).
    pub noise_var: f64,
    /// Feature variance: isotropic for regression, per class for classification.
    pub feature_var: f64,
    /// Norm of the class means (classification).
    pub mean_norm: f64,
    /// Diameter of the parameter ball `Θ`, centered at the origin.
    pub diameter: f64,
    /// Size of the frozen pool defining the classification optimum.
    pub reference_size: usize,
    pub preference: Option<Arc<PreferenceData>>,
}

impl Scenario {
    /// Drifting linear-Gaussian regression: d=5, N=500, ρ=10, ε=1.
    pub fn regression() -> Self {
        Scenario {
            kind: ScenarioKind::Regression,
            dim: 5,
            pool_size: 500,
            horizon: 25,
            rho_true: 10.0,
            eps: 1.0,
            noise_var: RegressionModel::DEFAULT_NOISE_VAR,
            feature_var: 0.1,
            mean_norm: 0.0,
            diameter: 200.0,
            reference_size: 0,
            preference: None,
        }
    }

    /// Two rotating Gaussian classes: d=2, ‖μ‖=2, variance 0.25, ρ=0.1, ε=0.5.
    pub fn classification() -> Self {
        Scenario {
            kind: ScenarioKind::Classification,
            dim: 2,
            pool_size: 500,
            horizon: 25,
            rho_true: 0.1,
            eps: 0.5,
            noise_var: 0.0,
            feature_var: 0.25,
            mean_norm: 2.0,
            diameter: 40.0,
            reference_size: 10_000,
            preference: None,
        }
    }

    /// A drifting user in a pretrained factor model, sampled top-K.
    pub fn preference(data: Arc<PreferenceData>) -> Self {
        let max_user = data.user_factors.iter().map(|u| u.norm()).fold(0.0, f64::max);
        let horizon = 25;
        let rho_true = 0.1;
        let radius = (max_user + rho_true * horizon as f64).ceil() + 1.0;
        Scenario {
            kind: ScenarioKind::Preference,
            dim: data.dim(),
            pool_size: 500.min(data.item_factors.len().saturating_sub(1)).max(1),
            horizon,
            rho_true,
            eps: 1.0,
            noise_var: 0.0,
            feature_var: 0.0,
            mean_norm: 0.0,
            diameter: 2.0 * radius,
            reference_size: 0,
            preference: Some(data),
        }
    }

    pub fn domain(&self) -> Result<ParamDomain> {
        ParamDomain::centered(self.dim, self.diameter)
    }

    pub fn model(&self) -> Result<AnyModel> {
        Ok(match self.kind {
            ScenarioKind::Regression => AnyModel::Regression(RegressionModel::new(self.dim, self.noise_var)?),
            ScenarioKind::Classification => AnyModel::Logistic(LogisticModel::new(self.dim)?),
            ScenarioKind::Preference => AnyModel::LogisticMf(LogisticMfModel::new(self.dim)?),
        })
    }

    /// Session defaults for this scenario.
    pub fn session_config(&self, seed: u64) -> Result<SessionConfig> {
        let mut cfg = SessionConfig::new(self.domain()?, self.eps, self.horizon, seed);
        if self.kind == ScenarioKind::Preference {
            cfg.sampling = SamplingMode::TopK;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.horizon == 0 || self.dim == 0 {
            return Err(Error::invalid("pool size, horizon and dimension must be positive"));
        }
        if !(self.rho_true >= 0.0) {
            return Err(Error::invalid("true drift must be nonnegative"));
        }
        if self.kind == ScenarioKind::Classification && self.dim < 2 {
            return Err(Error::invalid("classification rotates in a plane and needs d >= 2"));
        }
        if self.kind == ScenarioKind::Preference {
            let data = self.preference.as_ref().ok_or_else(|| Error::invalid("preference scenario needs factors"))?;
            if self.pool_size >= data.item_factors.len() {
                return Err(Error::invalid(format!(
                    "pool size {} leaves no held-out items out of {}",
                    self.pool_size,
                    data.item_factors.len()
                )));
            }
        }
        Ok(())
    }

    /// Generates the full horizon for one trial.
    pub fn build_world(&self, seed: u64) -> Result<SimWorld> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(WORLD_STREAM);
        let domain = self.domain()?;
        let mut pools = Vec::with_capacity(self.horizon);
        let mut stars: Vec<ParamVec> = Vec::with_capacity(self.horizon);
        let mut eval = None;
        match self.kind {
            ScenarioKind::Regression => {
                for t in 1..=self.horizon {
                    let (pool, star) = gen_regression_step(t, stars.last(), self, &domain, &mut rng)?;
                    pools.push(pool);
                    stars.push(star);
                }
            }
            ScenarioKind::Classification => {
                let reference = ReferencePool::new(self.dim, self.reference_size, &mut rng);
                let start = random_unit_vector(self.dim, &mut rng) * self.mean_norm;
                let angle = calibrate_rotation(&start, &reference, self)?;
                let mut mu = start;
                for t in 1..=self.horizon {
                    if t > 1 {
                        mu = rotate(&mu, angle);
                    }
                    let (pool, star) = gen_classification_step(t, &mu, &reference, self, &mut rng)?;
                    pools.push(pool);
                    stars.push(star);
                }
            }
            ScenarioKind::Preference => {
                let data = self.preference.as_ref().expect("validated");
                let n_items = data.item_factors.len();
                let chosen = sample_indices(&mut rng, n_items, n_items);
                let order: Vec<usize> = chosen.into_iter().collect();
                let pool_items: Vec<Feature> =
                    order[..self.pool_size].iter().map(|&i| data.item_factors[i].clone()).collect();
                let held_out: Vec<Feature> =
                    order[self.pool_size..].iter().map(|&i| data.item_factors[i].clone()).collect();
                let user = rng.random_range(0..data.user_factors.len());
                let mut prev = domain.project(&data.user_factors[user]);
                for t in 1..=self.horizon {
                    let star = if t == 1 {
                        prev.clone()
                    } else {
                        gen_preference_drift(&prev, self, &domain, &mut rng)?
                    };
                    pools.push(SamplePool::new(pool_items.clone(), t)?);
                    prev = star.clone();
                    stars.push(star);
                }
                eval = Some(SamplePool::new(held_out, 0)?);
            }
        }
        Ok(SimWorld {
            model: self.model()?,
            pools,
            theta_stars: stars,
            eval,
        })
    }
}

const WORLD_STREAM: u64 = 11;
const LABEL_STREAM: u64 = 12;

/// Fresh regression pool and the next true parameter.
pub fn gen_regression_step(
    t: usize,
    prev: Option<&ParamVec>,
    scen: &Scenario,
    domain: &ParamDomain,
    rng: &mut dyn RngCore,
) -> Result<(SamplePool, ParamVec)> {
    let normal = Normal::new(0.0, scen.feature_var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let features = (0..scen.pool_size)
        .map(|_| Feature::new(DVector::from_fn(scen.dim, |_, _| normal.sample(&mut *rng))))
        .collect();
    let star = match prev {
        None => {
            let inner = ParamDomain::new(domain.center().clone(), domain.diameter() / 8.0)?;
            inner.sample_uniform(rng)
        }
        Some(p) => {
            let u = random_unit_vector(scen.dim, rng);
            domain.project(&ParamVec::new(p.as_vector() + u * scen.rho_true))
        }
    };
    Ok((SamplePool::new(features, t)?, star))
}

/// Frozen standardized draws defining the classification optimum.
#[derive(Clone, Debug)]
pub struct ReferencePool {
    noise: Vec<DVector<f64>>,
    classes: Vec<f64>,
}

impl ReferencePool {
    pub fn new(dim: usize, size: usize, rng: &mut dyn RngCore) -> Self {
        let noise = (0..size)
            .map(|_| DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut *rng)))
            .collect();
        let classes = (0..size).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        ReferencePool { noise, classes }
    }

    fn features(&self, mu: &DVector<f64>, var: f64) -> Vec<DVector<f64>> {
        let sd = var.sqrt();
        self.noise
            .iter()
            .zip(&self.classes)
            .map(|(z, c)| mu * *c + z * sd)
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Minimizer of the expected logistic loss over the reference pool, labels
/// following the two-class posterior.
pub fn population_minimizer(mu: &DVector<f64>, reference: &ReferencePool, var: f64) -> Result<ParamVec> {
    let xs = reference.features(mu, var);
    if xs.is_empty() {
        return Err(Error::invalid("reference pool is empty"));
    }
    let d = mu.len();
    let posterior: Vec<f64> = xs.iter().map(|x| sigmoid(2.0 * mu.dot(x) / var)).collect();
    let n = xs.len() as f64;
    let objective = |theta: &DVector<f64>| -> f64 {
        xs.iter()
            .zip(&posterior)
            .map(|(x, p)| {
                let z = theta.dot(x);
                p * softplus(-z) + (1.0 - p) * softplus(z)
            })
            .sum::<f64>()
            / n
    };
    // Newton from the Bayes log-odds direction, with backtracking.
    let mut theta = mu * (2.0 / var);
    let mut value = objective(&theta);
    for _ in 0..100 {
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for (x, p) in xs.iter().zip(&posterior) {
            let s = sigmoid(theta.dot(x));
            grad += x * (s - p);
            hess += x * x.transpose() * (s * (1.0 - s));
        }
        grad /= n;
        hess /= n;
        if grad.norm() < 1e-13 {
            break;
        }
        let scale = hess.trace() / d as f64;
        for i in 0..d {
            hess[(i, i)] += 1e-12 * scale.max(f64::MIN_POSITIVE);
        }
        let step = match hess.cholesky() {
            Some(c) => c.solve(&grad),
            None => grad.clone(),
        };
        let mut lr = 1.0;
        let mut improved = false;
        while lr > 1e-10 {
            let cand = &theta - &step * lr;
            let v = objective(&cand);
            if v <= value {
                theta = cand;
                value = v;
                improved = true;
                break;
            }
            lr *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(ParamVec::new(theta))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Rotation by `angle` in the plane of the first two coordinates.
pub fn rotate(v: &DVector<f64>, angle: f64) -> DVector<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.clone();
    out[0] = c * v[0] - s * v[1];
    out[1] = s * v[0] + c * v[1];
    out
}

/// Largest rotation angle whose induced optimum steps stay within `ρ`.
pub fn calibrate_rotation(start: &DVector<f64>, reference: &ReferencePool, scen: &Scenario) -> Result<f64> {
    if scen.rho_true == 0.0 || scen.horizon < 2 {
        return Ok(0.0);
    }
    let max_step = |angle: f64| -> Result<f64> {
        let mut mu = start.clone();
        let mut prev = population_minimizer(&mu, reference, scen.feature_var)?;
        let mut worst: f64 = 0.0;
        for _ in 1..scen.horizon {
            mu = rotate(&mu, angle);
            let next = population_minimizer(&mu, reference, scen.feature_var)?;
            worst = worst.max(next.distance(&prev));
            prev = next;
        }
        Ok(worst)
    };
    let radius = population_minimizer(start, reference, scen.feature_var)?.norm();
    let mut angle = 2.0 * (scen.rho_true / (2.0 * radius)).min(1.0).asin();
    for _ in 0..20 {
        let worst = max_step(angle)?;
        if worst <= scen.rho_true {
            return Ok(angle);
        }
        angle *= 0.999 * scen.rho_true / worst;
    }
    Err(Error::invalid("rotation calibration did not converge"))
}

/// Two-class pool around `±μ` and the induced optimum.
pub fn gen_classification_step(
    t: usize,
    mu: &DVector<f64>,
    reference: &ReferencePool,
    scen: &Scenario,
    rng: &mut dyn RngCore,
) -> Result<(SamplePool, ParamVec)> {
    let sd = scen.feature_var.sqrt();
    let features = (0..scen.pool_size)
        .map(|_| {
            let c = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let z = DVector::from_fn(scen.dim, |_, _| StandardNormal.sample(&mut *rng));
            Feature::new(mu * c + z * sd)
        })
        .collect();
    let star = population_minimizer(mu, reference, scen.feature_var)?;
    Ok((SamplePool::new(features, t)?, star))
}

/// Next user vector: a normal step clipped to norm `ρ`, kept inside `Θ`.
pub fn gen_preference_drift(
    prev: &ParamVec,
    scen: &Scenario,
    domain: &ParamDomain,
    rng: &mut dyn RngCore,
) -> Result<ParamVec> {
    if scen.rho_true == 0.0 {
        return Ok(prev.clone());
    }
    let normal =
        Normal::new(0.0, scen.rho_true / (scen.dim as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut step = DVector::from_fn(scen.dim, |_, _| normal.sample(&mut *rng));
    let norm = step.norm();
    if norm > scen.rho_true {
        step *= scen.rho_true / norm;
    }
    Ok(domain.project(&ParamVec::new(prev.as_vector() + step)))
}

/// One trial's pools, true parameters and optional held-out evaluation set.
#[derive(Clone, Debug)]
pub struct SimWorld {
    pub model: AnyModel,
    pub pools: Vec<SamplePool>,
    pub theta_stars: Vec<ParamVec>,
    /// Items not in the pool, for held-out error.
    pub eval: Option<SamplePool>,
}

struct SimLabels<'w> {
    model: &'w AnyModel,
    stars: &'w [ParamVec],
    rng: ChaCha8Rng,
}

impl LabelSource for SimLabels<'_> {
    fn label(&mut self, t: usize, _pool_index: usize, x: &Feature) -> Result<Label> {
        let star = self
            .stars
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::invalid(format!("no true parameter for step {t}")))?;
        Ok(self.model.sample_label(x, star, &mut self.rng))
    }
}

impl World for SimWorld {
    fn horizon(&self) -> usize {
        self.pools.len()
    }

    fn pool(&self, t: usize) -> &SamplePool {
        &self.pools[t - 1]
    }

    fn theta_star(&self, t: usize) -> Option<&ParamVec> {
        self.theta_stars.get(t - 1)
    }

    fn labels(&self, seed: u64) -> Box<dyn LabelSource + '_> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(LABEL_STREAM);
        Box::new(SimLabels {
            model: &self.model,
            stars: &self.theta_stars,
            rng,
        })
    }
}

impl SimWorld {
    /// Expected misclassification on the held-out set (or the pool) at step `t`.
    pub fn classification_error(&self, t: usize, theta_hat: &ParamVec) -> Option<f64> {
        let set = self.eval.as_ref().unwrap_or(&self.pools[t - 1]);
        let star = self.theta_stars.get(t - 1)?;
        let mut total = 0.0;
        for x in set.features() {
            total += self.model.expected_error(x, theta_hat, star)?;
        }
        Some(total / set.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_drift_has_exact_magnitude() {
        let scen = Scenario::regression();
        let world = scen.build_world(4).unwrap();
        for w in world.theta_stars.windows(2) {
            assert!((w[1].distance(&w[0]) - scen.rho_true).abs() < 1e-9);
        }
    }

    #[test]
    fn static_regression_world() {
        let mut scen = Scenario::regression();
        scen.rho_true = 0.0;
        scen.horizon = 4;
        let world = scen.build_world(1).unwrap();
        assert!(world.theta_stars.iter().all(|s| s == &world.theta_stars[0]));
    }

    #[test]
    fn rotation_preserves_norm() {
        let v = DVector::from_vec(vec![2.0, 0.0]);
        let r = rotate(&v, 0.3);
        assert!((r.norm() - 2.0).abs() < 1e-12);
        assert_eq!(rotate(&v, 0.0), v);
    }

    #[test]
    fn classification_optimum_is_bayes_consistent_and_bounded() {
        let mut scen = Scenario::classification();
        scen.horizon = 6;
        scen.reference_size = 2000;
        let world = scen.build_world(8).unwrap();
        for w in world.theta_stars.windows(2) {
            assert!(w[1].distance(&w[0]) <= scen.rho_true + 1e-12);
        }
        for (pool, star) in world.pools.iter().zip(&world.theta_stars) {
            // Points far on the positive side of the optimum carry label +1.
            let x = pool.features().iter().max_by(|a, b| star.dot(a).total_cmp(&star.dot(b))).unwrap();
            assert!(star.dot(x) > 0.0);
        }
    }
}
