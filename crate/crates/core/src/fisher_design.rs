//! Fisher information matrices and the trace-ratio sampling design.
//!
//! The design problem is
//!
//! ```text
//!   minimize   Tr[(I_Γ(θ) + λI)⁻¹ I_U(θ)]
//!   over       Γ in the probability simplex on the pool,
//!   where      I_Γ(θ) = Σᵢ Γᵢ H(xᵢ, θ),  I_U = I_Γ at the uniform Γ.
//! ```
//!
//! It is convex in Γ, and the feasible set is a simplex, so it is solved with
//! away-step Frank–Wolfe: the linear minimization oracle is a coordinate pick
//! and every iterate stays exactly on the simplex.

use std::ops::Index;

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::models::{Feature, LikelihoodModel, ParamDomain, ParamVec};

/// A symmetric positive semidefinite `d × d` information matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix(DMatrix<f64>);

impl FisherMatrix {
    pub fn new(entries: DMatrix<f64>) -> Self {
        assert!(entries.is_square(), "information matrix must be square");
        FisherMatrix(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        FisherMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..i).all(|j| (self.0[(i, j)] - self.0[(j, i)]).abs() <= tol))
    }

    fn eigenvalues(&self) -> nalgebra::DVector<f64> {
        SymmetricEigen::new(self.0.clone()).eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    /// Frobenius inner product `Tr(A B)` for symmetric `B`.
    fn dot(&self, other: &DMatrix<f64>) -> f64 {
        self.0.dot(other)
    }
}

impl Index<(usize, usize)> for FisherMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// The unlabeled pool `S_t` at one time step.
#[derive(Clone, Debug)]
pub struct SamplePool {
    features: Vec<Feature>,
    time_index: usize,
}

impl SamplePool {
    pub fn new(features: Vec<Feature>, time_index: usize) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::invalid("sample pool must not be empty"))?;
        let dim = first.dim();
        if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
            return Err(Error::SizeMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        if features.iter().any(|f| !f.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("pool features must be finite"));
        }
        Ok(SamplePool {
            features,
            time_index,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn get(&self, i: usize) -> &Feature {
        &self.features[i]
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }
}

/// A probability vector over pool indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexDist {
    weights: Vec<f64>,
}

impl SimplexDist {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("distribution over an empty pool"));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::invalid(format!("weight {w} outside [0, 1]")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(SimplexDist { weights })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over an empty pool");
        SimplexDist {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, index: usize) -> Self {
        assert!(index < n, "point mass index out of range");
        let mut weights = vec![0.0; n];
        weights[index] = 1.0;
        SimplexDist { weights }
    }

    /// Clamps negative round-off to zero and rescales to unit mass.
    pub(crate) fn renormalized(mut weights: Vec<f64>) -> Self {
        for w in weights.iter_mut() {
            if *w < 0.0 || !w.is_finite() {
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "cannot renormalize a zero vector");
        for w in weights.iter_mut() {
            *w = (*w / total).min(1.0);
        }
        SimplexDist { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// `H(xᵢ, θ)` for every pool element.
pub fn pool_hessians<M: LikelihoodModel + ?Sized>(
    model: &M,
    pool: &SamplePool,
    theta: &ParamVec,
) -> Vec<FisherMatrix> {
    pool.features().iter().map(|x| model.hessian(x, theta)).collect()
}

/// `Σᵢ wᵢ Aᵢ`.
pub fn weighted_fisher(atoms: &[FisherMatrix], weights: &[f64]) -> Result<FisherMatrix> {
    if atoms.len() != weights.len() {
        return Err(Error::SizeMismatch {
            expected: atoms.len(),
            actual: weights.len(),
        });
    }
    let d = atoms.first().map(FisherMatrix::dim).unwrap_or(0);
    let mut acc = DMatrix::zeros(d, d);
    for (a, &w) in atoms.iter().zip(weights) {
        if w != 0.0 {
            acc += &a.0 * w;
        }
    }
    Ok(FisherMatrix(acc))
}

/// `I_Γ(θ) = Σᵢ Γᵢ H(xᵢ, θ)`.
pub fn pool_fisher<M: LikelihoodModel + ?Sized>(
    model: &M,
    pool: &SamplePool,
    dist: &SimplexDist,
    theta: &ParamVec,
) -> Result<FisherMatrix> {
    if dist.len() != pool.len() {
        return Err(Error::SizeMismatch {
            expected: pool.len(),
            actual: dist.len(),
        });
    }
    weighted_fisher(&pool_hessians(model, pool, theta), dist.weights())
}

fn ridged_cholesky(m: &DMatrix<f64>, ridge: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut a = m.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    Cholesky::new(a)
}

/// `Tr[(I_Γ + ridge·I)⁻¹ I_U]` from precomputed matrices.
pub fn trace_ratio_of(info: &FisherMatrix, reference: &FisherMatrix, ridge: f64) -> Result<f64> {
    assert_eq!(info.dim(), reference.dim(), "information matrix dimension mismatch");
    let chol = ridged_cholesky(&info.0, ridge).ok_or(Error::SingularInformation)?;
    let value = chol.solve(&reference.0).trace();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::SingularInformation)
    }
}

/// `Tr[(I_Γ(θ) + ridge·I)⁻¹ I_U(θ)]` on a pool.
pub fn trace_ratio<M: LikelihoodModel + ?Sized>(
    model: &M,
    pool: &SamplePool,
    dist: &SimplexDist,
    theta: &ParamVec,
    ridge: f64,
) -> Result<f64> {
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("ridge must be >= 0, got {ridge}")));
    }
    let atoms = pool_hessians(model, pool, theta);
    let info = weighted_fisher(&atoms, dist.weights())?;
    let uniform = weighted_fisher(&atoms, SimplexDist::uniform(pool.len()).weights())?;
    trace_ratio_of(&info, &uniform, ridge)
}

/// Solver settings for [`optimize_design`].
#[derive(Clone, Debug, PartialEq)]
pub struct DesignConfig {
    pub max_iters: usize,
    /// Frank–Wolfe duality-gap tolerance; `None` means `1e-6 · d`.
    pub tol: Option<f64>,
    /// Ridge added before inversion; `None` means `1e-8 · Tr(I_U) / d`.
    pub ridge: Option<f64>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            max_iters: 500,
            tol: None,
            ridge: None,
        }
    }
}

/// Output of the design solver.
#[derive(Clone, Debug)]
pub struct DesignSolution {
    pub dist: SimplexDist,
    /// Trace ratio at `dist` (with the ridge applied).
    pub objective: f64,
    pub iterations: usize,
    pub ridge_used: f64,
    /// Final Frank–Wolfe duality gap.
    pub gap: f64,
    /// Objective after each accepted iterate, starting with the uniform design.
    pub history: Vec<f64>,
}

/// Minimizes the trace ratio over the simplex for explicit Hessian atoms.
pub fn optimize_design_atoms(atoms: &[FisherMatrix], cfg: &DesignConfig) -> Result<DesignSolution> {
    let n = atoms.len();
    if n == 0 {
        return Err(Error::invalid("design over an empty pool"));
    }
    let d = atoms[0].dim();
    if let Some(bad) = atoms.iter().find(|a| a.dim() != d) {
        return Err(Error::SizeMismatch {
            expected: d,
            actual: bad.dim(),
        });
    }
    let uniform = weighted_fisher(atoms, SimplexDist::uniform(n).weights())?;
    let scale = uniform.trace();
    if !(scale > 0.0) || atoms.iter().all(|a| a.0.iter().all(|v| *v == 0.0)) {
        return Err(Error::DegenerateDesign);
    }
    let ridge = cfg.ridge.unwrap_or(1e-8 * scale / d as f64);
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("ridge must be >= 0, got {ridge}")));
    }
    let tol = cfg.tol.unwrap_or(1e-6 * d as f64);

    let objective_at = |m: &DMatrix<f64>| -> Option<f64> {
        let chol = ridged_cholesky(m, ridge)?;
        let v = chol.solve(&uniform.0).trace();
        v.is_finite().then_some(v)
    };

    let mut weights = vec![1.0 / n as f64; n];
    let mut info = uniform.0.clone();
    let mut objective = objective_at(&info).ok_or(Error::SingularInformation)?;
    let mut history = vec![objective];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut grads = vec![0.0; n];

    while iterations < cfg.max_iters {
        let chol = ridged_cholesky(&info, ridge).ok_or(Error::SingularInformation)?;
        let inv = chol.inverse();
        let sens = &inv * &uniform.0 * &inv;
        for (g, a) in grads.iter_mut().zip(atoms) {
            *g = -a.dot(&sens);
        }
        let mean_grad: f64 = weights.iter().zip(&grads).map(|(w, g)| w * g).sum();

        // Lowest index wins ties in both oracles.
        let mut toward = 0;
        for i in 1..n {
            if grads[i] < grads[toward] {
                toward = i;
            }
        }
        let mut away: Option<usize> = None;
        for i in 0..n {
            if weights[i] > 0.0 && away.is_none_or(|a| grads[i] > grads[a]) {
                away = Some(i);
            }
        }
        gap = mean_grad - grads[toward];
        if gap <= tol {
            break;
        }
        let away = away.expect("simplex iterate has nonempty support");
        let away_gap = grads[away] - mean_grad;

        // Direction in matrix space and the largest feasible step.
        let (direction, max_step, is_away) = if gap >= away_gap || weights[away] >= 1.0 {
            (&atoms[toward].0 - &info, 1.0, false)
        } else {
            let wa = weights[away];
            (&info - &atoms[away].0, wa / (1.0 - wa), true)
        };

        // Along the segment the objective is Σ_j w_j / (1 + γ λ_j), from the
        // eigenpairs of L⁻¹ D L⁻ᵀ with A + ridge·I = L Lᵀ.
        let profile = LineProfile::new(&chol, &direction, &uniform.0);
        let step = golden_section(&|g| profile.value(g), max_step);
        let along = |step: f64| -> f64 {
            objective_at(&(&info + &direction * step)).unwrap_or(f64::INFINITY)
        };
        let candidate = along(step);
        let at_end = along(max_step);
        let (step, candidate) = if at_end <= candidate {
            (max_step, at_end)
        } else {
            (step, candidate)
        };
        iterations += 1;
        if !(candidate < objective) {
            break;
        }

        if is_away {
            for w in weights.iter_mut() {
                *w *= 1.0 + step;
            }
            weights[away] -= step;
            if step == max_step {
                weights[away] = 0.0;
            }
        } else {
            for w in weights.iter_mut() {
                *w *= 1.0 - step;
            }
            weights[toward] += step;
        }
        info += &direction * step;
        objective = candidate;
        history.push(objective);
    }

    let dist = SimplexDist::renormalized(weights);
    let final_info = weighted_fisher(atoms, dist.weights())?;
    let objective = objective_at(&final_info.0).ok_or(Error::SingularInformation)?;
    Ok(DesignSolution {
        dist,
        objective,
        iterations,
        ridge_used: ridge,
        gap,
        history,
    })
}

struct LineProfile {
    weights: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl LineProfile {
    fn new(chol: &Cholesky<f64, Dyn>, direction: &DMatrix<f64>, reference: &DMatrix<f64>) -> Self {
        let d = direction.nrows();
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("Cholesky factor has a positive diagonal");
        let whiten = |m: &DMatrix<f64>| {
            let w = &l_inv * m * l_inv.transpose();
            (&w + w.transpose()) * 0.5
        };
        let eig = SymmetricEigen::new(whiten(direction));
        let p = whiten(reference);
        let q = &eig.eigenvectors;
        let weights = (0..d).map(|j| q.column(j).dot(&(&p * q.column(j)))).collect();
        LineProfile {
            weights,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
        }
    }

    fn value(&self, step: f64) -> f64 {
        let mut total = 0.0;
        for (w, l) in self.weights.iter().zip(&self.eigenvalues) {
            let denom = 1.0 + step * l;
            if denom <= 0.0 {
                return f64::INFINITY;
            }
            total += w / denom;
        }
        total
    }
}

/// Minimum of a convex function on `[0, hi]` by golden-section search.
fn golden_section(f: &dyn Fn(f64) -> f64, hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (0.0, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if (b - a) <= 1e-12 * hi.max(1e-300) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Step 1: the trace-ratio design on a pool at the reference point `θ_ref`.
pub fn optimize_design<M: LikelihoodModel + ?Sized>(
    model: &M,
    pool: &SamplePool,
    theta_ref: &ParamVec,
    cfg: &DesignConfig,
) -> Result<DesignSolution> {
    if !theta_ref.is_finite() {
        return Err(Error::invalid("design reference point is not finite"));
    }
    optimize_design_atoms(&pool_hessians(model, pool, theta_ref), cfg)
}

/// The design reference point: the previous estimate, or the domain center
/// before any estimate exists.
pub fn replace_reference(previous: Option<&ParamVec>, domain: &ParamDomain) -> ParamVec {
    previous.cloned().unwrap_or_else(|| domain.center().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LogisticModel, RegressionModel};
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> FisherMatrix {
        FisherMatrix::new(DMatrix::from_element(1, 1, v))
    }

    fn pool(rows: &[&[f64]]) -> SamplePool {
        SamplePool::new(rows.iter().map(|r| Feature::from_slice(r)).collect(), 1).unwrap()
    }

    #[test]
    fn pool_fisher_singleton_and_linearity() {
        let m = RegressionModel::new(2, 0.5).unwrap();
        let theta = ParamVec::zeros(2);
        let single = pool(&[&[1.0, 2.0]]);
        let info = pool_fisher(&m, &single, &SimplexDist::uniform(1), &theta).unwrap();
        assert_eq!(info, m.hessian(single.get(0), &theta));

        let two = pool(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let dist = SimplexDist::new(vec![0.25, 0.75]).unwrap();
        let info = pool_fisher(&m, &two, &dist, &theta).unwrap();
        assert_relative_eq!(info[(0, 0)], 0.25 * 2.0);
        assert_relative_eq!(info[(1, 1)], 0.75 * 8.0);
        assert_eq!(info[(0, 1)], 0.0);
    }

    #[test]
    fn pool_fisher_size_mismatch() {
        let m = RegressionModel::new(1, 0.5).unwrap();
        let p = pool(&[&[1.0], &[2.0]]);
        let err = pool_fisher(&m, &p, &SimplexDist::uniform(3), &ParamVec::zeros(1));
        assert!(matches!(err, Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn trace_ratio_scalar_example() {
        let atoms = [scalar(2.0), scalar(4.0)];
        let info = weighted_fisher(&atoms, &[1.0, 0.0]).unwrap();
        let uniform = weighted_fisher(&atoms, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(trace_ratio_of(&info, &uniform, 0.0).unwrap(), 1.5);
    }

    #[test]
    fn trace_ratio_singular_without_ridge() {
        let m = RegressionModel::new(2, 0.5).unwrap();
        let p = pool(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let dist = SimplexDist::point_mass(2, 0);
        let err = trace_ratio(&m, &p, &dist, &ParamVec::zeros(2), 0.0);
        assert!(matches!(err, Err(Error::SingularInformation)));
        assert!(trace_ratio(&m, &p, &dist, &ParamVec::zeros(2), 1e-6).is_ok());
    }

    #[test]
    fn trace_ratio_uniform_equals_dimension() {
        let m = LogisticModel::new(2).unwrap();
        let p = pool(&[&[1.0, 0.2], &[-0.3, 1.0], &[0.5, 0.5]]);
        let t = trace_ratio(&m, &p, &SimplexDist::uniform(3), &ParamVec::from_slice(&[0.4, -1.0]), 0.0)
            .unwrap();
        assert_relative_eq!(t, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn scalar_design_puts_all_mass_on_largest_curvature() {
        let sol = optimize_design_atoms(&[scalar(1.0), scalar(4.0)], &DesignConfig::default()).unwrap();
        assert_relative_eq!(sol.objective, 0.625, epsilon = 1e-6);
        assert_relative_eq!(sol.dist.prob(1), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_atoms_keep_uniform() {
        let a = FisherMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        let sol = optimize_design_atoms(&vec![a; 4], &DesignConfig::default()).unwrap();
        assert_relative_eq!(sol.objective, 2.0, epsilon = 1e-6);
        for &w in sol.dist.weights() {
            assert_relative_eq!(w, 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_hessians_are_degenerate() {
        let z = FisherMatrix::zeros(2);
        let err = optimize_design_atoms(&[z.clone(), z], &DesignConfig::default());
        assert!(matches!(err, Err(Error::DegenerateDesign)));
    }

    #[test]
    fn simplex_dist_validation() {
        assert!(SimplexDist::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexDist::new(vec![-0.1, 1.1]).is_err());
        assert!(SimplexDist::new(vec![]).is_err());
        assert!(SimplexDist::new(vec![0.3, 0.7]).is_ok());
    }

    #[test]
    fn reference_falls_back_to_center() {
        let dom = ParamDomain::new(ParamVec::from_slice(&[1.0, -1.0]), 3.0).unwrap();
        assert_eq!(replace_reference(None, &dom), *dom.center());
        let prev = ParamVec::from_slice(&[0.2, 0.1]);
        assert_eq!(replace_reference(Some(&prev), &dom), prev);
    }
}
