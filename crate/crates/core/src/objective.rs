//! Negative log-posterior, its analytic gradients and the closed-form
//! covariance solutions under the trace-one constraint.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{log_det, normalize_trace, psd_inverse, sym_sqrt, SymMatrix};
use crate::model::{bernoulli_nll, hadamard_scaled, lambda_and_slope, sigmoid, Dataset, FeatureGrouping, Hyperparams, ModelParams};

/// Everything the objective is evaluated against, apart from the parameters.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub data: &'a Dataset,
    pub grouping: &'a FeatureGrouping,
    pub hyper: &'a Hyperparams,
    /// Relative jitter for inversions and log-determinants.
    pub jitter: f64,
}

impl<'a> Problem<'a> {
    pub fn new(data: &'a Dataset, grouping: &'a FeatureGrouping, hyper: &'a Hyperparams, jitter: f64) -> Result<Self> {
        if grouping.n_features() != data.n_features() {
            return Err(Error::dims("grouping features", data.n_features(), grouping.n_features()));
        }
        if hyper.omega0.dim() != data.n_tasks() {
            return Err(Error::dims("Ω₀ dimension", data.n_tasks(), hyper.omega0.dim()));
        }
        Ok(Self {
            data,
            grouping,
            hyper,
            jitter,
        })
    }

    /// `ξ = 2M + K + ν + 1`, the coefficient on `log|Ω|`.
    pub fn xi(&self) -> f64 {
        2.0 * self.data.n_features() as f64 + self.data.n_tasks() as f64 + self.hyper.nu + 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveBreakdown {
    pub nll: f64,
    pub mvn_prior: f64,
    pub omega_logdet_terms: f64,
    pub omega_iw_trace: f64,
    pub sigma_logdet: f64,
    pub u_prior: f64,
    pub tau_prior: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    /// Objective with the log-determinant penalties removed; this is what the
    /// trace-constrained alternation actually decreases.
    pub fn surrogate(&self) -> f64 {
        self.nll + self.mvn_prior + self.omega_iw_trace + self.u_prior + self.tau_prior
    }
}

/// Jittered inverses of `Ω` and every `Σ_z`, fixed between covariance updates.
#[derive(Debug, Clone)]
pub struct Precisions {
    pub omega_inv: SymMatrix,
    pub sigma_inv: Vec<SymMatrix>,
}

impl Precisions {
    pub fn new(params: &ModelParams, jitter: f64) -> Result<Self> {
        Ok(Self {
            omega_inv: psd_inverse(&params.omega, params.omega.jitter_for(jitter))?,
            sigma_inv: params
                .sigma_blocks
                .iter()
                .map(|s| psd_inverse(s, s.jitter_for(jitter)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Parameter state in dense `M × K` form together with `Λ` and `dΛ/dU`.
#[derive(Debug, Clone)]
pub struct Expanded {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub slope: DMatrix<f64>,
    pub tau: f64,
    pub omega_diag: Vec<f64>,
    pub prec: Precisions,
}

impl Expanded {
    pub fn new(params: &ModelParams, grouping: &FeatureGrouping, jitter: f64) -> Result<Self> {
        params.check(grouping)?;
        let k = params.n_tasks();
        let m = grouping.n_features();
        let mut ex = Self {
            w: params.w(grouping),
            u: params.u.clone(),
            lambda: DMatrix::zeros(m, k),
            slope: DMatrix::zeros(m, k),
            tau: params.tau,
            omega_diag: (0..k).map(|i| params.omega[(i, i)]).collect(),
            prec: Precisions::new(params, jitter)?,
        };
        for c in 0..k {
            ex.refresh_lambda(c);
        }
        Ok(ex)
    }

    /// Recomputes `λ` and its slope for task column `k` from `U`.
    pub fn refresh_lambda(&mut self, k: usize) {
        let okk = self.omega_diag[k];
        for j in 0..self.u.nrows() {
            let (l, s) = lambda_and_slope(self.u[(j, k)], okk);
            self.lambda[(j, k)] = l;
            self.slope[(j, k)] = s;
        }
    }

    pub fn beta(&self) -> DMatrix<f64> {
        hadamard_scaled(self.tau, &self.lambda, &self.w)
    }

    /// `β_kᵀ x_i` for one task and patient.
    pub fn logit(&self, data: &Dataset, k: usize, i: usize) -> f64 {
        let x = data.features();
        let mut acc = 0.0;
        for j in 0..self.w.nrows() {
            acc += self.lambda[(j, k)] * self.w[(j, k)] * x[(i, j)];
        }
        self.tau * acc
    }

    /// Column `k` of the `W` prior gradient, `[Σ_z⁻¹ W_z Ω⁻¹]_k`, in feature order.
    pub fn w_prior_column(&self, grouping: &FeatureGrouping, k: usize) -> DVector<f64> {
        let oinv_k = self.prec.omega_inv.matrix().column(k);
        let mut out = DVector::zeros(self.w.nrows());
        for z in 0..grouping.n_groups() {
            let rows = grouping.members(z);
            let v = DVector::from_iterator(rows.len(), rows.iter().map(|&j| self.w.row(j).dot(&oinv_k.transpose())));
            let sv = self.prec.sigma_inv[z].matrix() * v;
            for (r, &j) in rows.iter().enumerate() {
                out[j] = sv[r];
            }
        }
        out
    }

    /// Column `k` of `U Ω⁻¹`.
    pub fn u_prior_column(&self, k: usize) -> DVector<f64> {
        &self.u * self.prec.omega_inv.matrix().column(k)
    }

    /// Writes the dense coefficients back into the parameter blocks.
    pub fn store(&self, params: &mut ModelParams, grouping: &FeatureGrouping) {
        params.set_w(grouping, &self.w);
        params.u.copy_from(&self.u);
        params.tau = self.tau;
    }
}

/// Residuals `c_ki − σ(β_kᵀ x_i)` with zeros at missing labels, and the
/// negative log-likelihood.
fn residuals(data: &Dataset, beta: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let logits = data.features() * beta;
    let (n, k) = logits.shape();
    let mut r = DMatrix::zeros(n, k);
    let mut nll = 0.0;
    for i in 0..n {
        for t in 0..k {
            if let Some(c) = data.label(i, t) {
                let z = logits[(i, t)];
                r[(i, t)] = f64::from(c) - sigmoid(z);
                nll += bernoulli_nll(z, c);
            }
        }
    }
    (r, nll)
}

pub fn objective(problem: &Problem, params: &ModelParams) -> Result<ObjectiveBreakdown> {
    let ex = Expanded::new(params, problem.grouping, problem.jitter)?;
    objective_expanded(problem, params, &ex)
}

pub(crate) fn objective_expanded(problem: &Problem, params: &ModelParams, ex: &Expanded) -> Result<ObjectiveBreakdown> {
    let k = params.n_tasks() as f64;
    let (_, nll) = residuals(problem.data, &ex.beta());
    let oinv = ex.prec.omega_inv.matrix();

    let mut mvn_prior = 0.0;
    for (z, wz) in params.w_blocks.iter().enumerate() {
        let inner = wz.transpose() * ex.prec.sigma_inv[z].matrix() * wz;
        mvn_prior += (oinv * inner).trace();
    }
    mvn_prior *= 0.5;

    let omega_logdet = log_det(&params.omega, params.omega.jitter_for(problem.jitter))
        .map_err(|e| Error::NumericalFailure(format!("log|Ω|: {e}")))?;
    let omega_logdet_terms = 0.5 * problem.xi() * omega_logdet;
    let omega_iw_trace = 0.5 * problem.hyper.delta * (problem.hyper.omega0.matrix() * oinv).trace();

    let mut sigma_logdet = 0.0;
    for (z, s) in params.sigma_blocks.iter().enumerate() {
        sigma_logdet += log_det(s, s.jitter_for(problem.jitter))
            .map_err(|e| Error::NumericalFailure(format!("log|Σ_{z}|: {e}")))?;
    }
    sigma_logdet *= 0.5 * k;

    let u_prior = 0.5 * (&params.u * oinv * params.u.transpose()).trace();
    let tau_prior = 2.0 * params.tau.powi(2).ln_1p();

    let total = nll + mvn_prior + omega_logdet_terms + omega_iw_trace + sigma_logdet + u_prior + tau_prior;
    if !total.is_finite() {
        return Err(Error::NumericalFailure(format!("objective is {total}")));
    }
    Ok(ObjectiveBreakdown {
        nll,
        mvn_prior,
        omega_logdet_terms,
        omega_iw_trace,
        sigma_logdet,
        u_prior,
        tau_prior,
        total,
    })
}

/// Gradient of the objective with `W` and `U` in dense `M × K` form.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub tau: f64,
}

/// Likelihood part only: `∂ nll / ∂β = −Xᵀ R`, mapped onto `W`, `U`, `τ`.
pub fn likelihood_gradient(problem: &Problem, ex: &Expanded) -> Gradient {
    let (r, _) = residuals(problem.data, &ex.beta());
    let g_beta = -(problem.data.features().transpose() * r);
    Gradient {
        w: g_beta.component_mul(&ex.lambda) * ex.tau,
        u: g_beta.component_mul(&ex.slope).component_mul(&ex.w) * ex.tau,
        tau: g_beta.component_mul(&ex.lambda).component_mul(&ex.w).sum(),
    }
}

/// Exact full-batch gradient with respect to `W`, `U` and `τ`.
pub fn full_gradient(problem: &Problem, ex: &Expanded) -> Gradient {
    let mut g = likelihood_gradient(problem, ex);
    for k in 0..ex.w.ncols() {
        let wp = ex.w_prior_column(problem.grouping, k);
        let up = ex.u_prior_column(k);
        let mut gw = g.w.column_mut(k);
        gw += wp;
        let mut gu = g.u.column_mut(k);
        gu += up;
    }
    g.tau += tau_prior_slope(ex.tau);
    g
}

pub fn tau_prior_slope(tau: f64) -> f64 {
    4.0 * tau / (1.0 + tau * tau)
}

/// Stochastic gradient for one observed `(task, patient)` pair: the
/// likelihood part of that instance plus `prior_scale` times the prior part.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGradient {
    /// `∂O/∂w_k` in feature order.
    pub w: DVector<f64>,
    /// `∂O/∂u_k`.
    pub u: DVector<f64>,
}

pub fn instance_gradient(problem: &Problem, ex: &Expanded, k: usize, i: usize, prior_scale: f64) -> Result<InstanceGradient> {
    let c = problem.data.label(i, k).ok_or_else(|| {
        Error::Validation(format!("patient {i} has no label for task {k}"))
    })?;
    let resid = f64::from(c) - sigmoid(ex.logit(problem.data, k, i));
    let x = problem.data.features().row(i);
    let m = ex.w.nrows();
    let mut w = ex.w_prior_column(problem.grouping, k) * prior_scale;
    let mut u = ex.u_prior_column(k) * prior_scale;
    for j in 0..m {
        let xj = x[j];
        if xj != 0.0 {
            w[j] -= resid * ex.tau * ex.lambda[(j, k)] * xj;
            u[j] -= resid * ex.tau * ex.slope[(j, k)] * ex.w[(j, k)] * xj;
        }
    }
    Ok(InstanceGradient { w, u })
}

/// `∂O/∂w_k^{G_z}` for every group, from a single instance with the full prior term.
pub fn grad_w_block(problem: &Problem, params: &ModelParams, k: usize, i: usize) -> Result<Vec<DVector<f64>>> {
    let ex = Expanded::new(params, problem.grouping, problem.jitter)?;
    let g = instance_gradient(problem, &ex, k, i, 1.0)?;
    Ok((0..problem.grouping.n_groups())
        .map(|z| {
            let rows = problem.grouping.members(z);
            DVector::from_iterator(rows.len(), rows.iter().map(|&j| g.w[j]))
        })
        .collect())
}

/// `∂O/∂u_k` from a single instance with the full prior term.
pub fn grad_u_col(problem: &Problem, params: &ModelParams, k: usize, i: usize) -> Result<DVector<f64>> {
    let ex = Expanded::new(params, problem.grouping, problem.jitter)?;
    Ok(instance_gradient(problem, &ex, k, i, 1.0)?.u)
}

/// `∂O/∂τ = −Σ_k Σ_i (c_ki − σ)(λ_k ∘ w_k)ᵀ x_i + 4τ/(1+τ²)`.
pub fn grad_tau(problem: &Problem, params: &ModelParams) -> Result<f64> {
    let ex = Expanded::new(params, problem.grouping, problem.jitter)?;
    Ok(likelihood_gradient(problem, &ex).tau + tau_prior_slope(ex.tau))
}

/// `½ Σ_z W_zᵀ Σ_z⁻¹ W_z + (δ/2) Ω₀`, the matrix whose square root gives the Ω update.
pub fn omega_update_target(params: &ModelParams, hyper: &Hyperparams, jitter: f64) -> Result<SymMatrix> {
    let k = params.n_tasks();
    let mut a = hyper.omega0.matrix() * (0.5 * hyper.delta);
    for (wz, s) in params.w_blocks.iter().zip(&params.sigma_blocks) {
        let sinv = psd_inverse(s, s.jitter_for(jitter))?;
        a += wz.transpose() * sinv.matrix() * wz * 0.5;
    }
    debug_assert_eq!(a.nrows(), k);
    SymMatrix::new(a)
}

/// Minimizer of `tr(Ω⁻¹ A)` over trace-one PSD matrices: `A^{1/2} / tr(A^{1/2})`.
pub fn closed_form_omega(params: &ModelParams, hyper: &Hyperparams, jitter: f64) -> Result<SymMatrix> {
    normalize_trace(&sym_sqrt(&omega_update_target(params, hyper, jitter)?)?)
}

/// `W_z Ω⁻¹ W_zᵀ + jitter·I`, the matrix whose square root gives the Σ_z update.
pub fn sigma_update_target(params: &ModelParams, z: usize, jitter: f64) -> Result<SymMatrix> {
    let oinv = psd_inverse(&params.omega, params.omega.jitter_for(jitter))?;
    let wz = &params.w_blocks[z];
    let c = SymMatrix::new(wz * oinv.matrix() * wz.transpose())?;
    let j = c.jitter_for(jitter);
    let g = c.dim();
    SymMatrix::new(c.into_matrix() + DMatrix::identity(g, g) * j)
}

/// Minimizer of `tr(Σ_z⁻¹ C)` over trace-one PSD matrices.
pub fn closed_form_sigma(params: &ModelParams, z: usize, jitter: f64) -> Result<SymMatrix> {
    normalize_trace(&sym_sqrt(&sigma_update_target(params, z, jitter)?)?)
}

/// `tr(X⁻¹ A)` for a candidate covariance `X` (exact inverse).
pub fn restricted_objective(candidate: &SymMatrix, target: &SymMatrix) -> Result<f64> {
    let inv = psd_inverse(candidate, 0.0)?;
    Ok((inv.matrix() * target.matrix()).trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_beta, lambda_from_u, TAU_MIN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const JIT: f64 = 1e-6;

    pub(crate) fn random_instance(k: usize, m: usize, z: usize, n: usize, seed: u64) -> (Dataset, FeatureGrouping, Hyperparams, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grouping = FeatureGrouping::contiguous(m, z).unwrap();
        let x = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let mut labels = Vec::with_capacity(n * k);
        for i in 0..n {
            for _ in 0..k {
                // first two patients pin both classes for every task
                let c = match i {
                    0 => Some(0),
                    1 => Some(1),
                    _ if rng.random_bool(0.15) => None,
                    _ => Some(u8::from(rng.random_bool(0.5))),
                };
                labels.push(c);
            }
        }
        let data = Dataset::new(
            (0..n).map(|i| format!("p{i}")).collect(),
            x,
            labels,
            (0..m).map(|j| format!("f{j}")).collect(),
            (0..k).map(|t| format!("t{t}")).collect(),
        )
        .unwrap();
        let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let omega0 = SymMatrix::new(&b * b.transpose() + DMatrix::identity(k, k)).unwrap();
        let hyper = Hyperparams::new(omega0, 1.5, k as f64 + 2.0).unwrap();
        let params = random_params(&grouping, k, &mut rng);
        (data, grouping, hyper, params)
    }

    pub(crate) fn random_params(grouping: &FeatureGrouping, k: usize, rng: &mut ChaCha8Rng) -> ModelParams {
        let m = grouping.n_features();
        let mut p = ModelParams::neutral(grouping, k);
        let w = DMatrix::from_fn(m, k, |_, _| rng.random_range(-1.0..1.0));
        p.set_w(grouping, &w);
        p.u = DMatrix::from_fn(m, k, |_, _| rng.random_range(-0.8..0.8));
        p.tau = rng.random_range(0.3..1.5);
        let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        p.omega = normalize_trace(&SymMatrix::new(&b * b.transpose() + DMatrix::identity(k, k) * 0.5).unwrap()).unwrap();
        p.sigma_blocks = grouping
            .group_sizes()
            .iter()
            .map(|&g| {
                let b = DMatrix::from_fn(g, g, |_, _| rng.random_range(-1.0..1.0));
                normalize_trace(&SymMatrix::new(&b * b.transpose() + DMatrix::identity(g, g) * 0.5).unwrap()).unwrap()
            })
            .collect();
        p
    }

    /// Second implementation of every objective term using scalar loops only.
    fn scalar_objective(data: &Dataset, grouping: &FeatureGrouping, hyper: &Hyperparams, p: &ModelParams) -> f64 {
        let (n, m, k) = (data.n_patients(), data.n_features(), data.n_tasks());
        let w = p.w(grouping);
        let x = data.features();
        let mut nll = 0.0;
        for t in 0..k {
            for i in 0..n {
                if let Some(c) = data.label(i, t) {
                    let mut s = 0.0;
                    for j in 0..m {
                        s += p.tau * lambda_from_u(p.u[(j, t)], p.omega[(t, t)]) * w[(j, t)] * x[(i, j)];
                    }
                    let prob = 1.0 / (1.0 + (-s).exp());
                    nll -= if c == 1 { prob.ln() } else { (1.0 - prob).ln() };
                }
            }
        }
        let oinv = psd_inverse(&p.omega, p.omega.jitter_for(JIT)).unwrap();
        let mut mvn = 0.0;
        for (z, wz) in p.w_blocks.iter().enumerate() {
            let sinv = psd_inverse(&p.sigma_blocks[z], p.sigma_blocks[z].jitter_for(JIT)).unwrap();
            let g = wz.nrows();
            for a in 0..k {
                for b in 0..k {
                    let mut inner = 0.0;
                    for r in 0..g {
                        for s in 0..g {
                            inner += wz[(r, b)] * sinv[(r, s)] * wz[(s, a)];
                        }
                    }
                    mvn += oinv[(a, b)] * inner;
                }
            }
        }
        mvn *= 0.5;
        let xi = 2.0 * m as f64 + k as f64 + hyper.nu + 1.0;
        let ldo = log_det(&p.omega, p.omega.jitter_for(JIT)).unwrap();
        let mut iw = 0.0;
        for a in 0..k {
            for b in 0..k {
                iw += hyper.omega0[(a, b)] * oinv[(b, a)];
            }
        }
        let lds: f64 = p.sigma_blocks.iter().map(|s| log_det(s, s.jitter_for(JIT)).unwrap()).sum();
        let mut up = 0.0;
        for j in 0..m {
            for a in 0..k {
                for b in 0..k {
                    up += p.u[(j, a)] * oinv[(a, b)] * p.u[(j, b)];
                }
            }
        }
        nll + mvn + 0.5 * xi * ldo + 0.5 * hyper.delta * iw + 0.5 * k as f64 * lds + 0.5 * up + 2.0 * (1.0 + p.tau * p.tau).ln()
    }

    #[test]
    fn objective_matches_scalar_recomputation() {
        for seed in 0..5 {
            let (data, g, hyper, p) = random_instance(3, 8, 2, 10, seed);
            let prob = Problem::new(&data, &g, &hyper, JIT).unwrap();
            let o = objective(&prob, &p).unwrap();
            let want = scalar_objective(&data, &g, &hyper, &p);
            assert!(((o.total - want) / want).abs() < 1e-10, "{} vs {want}", o.total);
            let sum = o.nll + o.mvn_prior + o.omega_logdet_terms + o.omega_iw_trace + o.sigma_logdet + o.u_prior + o.tau_prior;
            assert!(((o.total - sum) / sum).abs() < 1e-10);
        }
    }

    #[test]
    fn single_patient_nll_is_ln2() {
        let data = Dataset::unchecked(vec!["a".into()], DMatrix::from_element(1, 1, 2.0), vec![Some(1)], vec!["f".into()], vec!["t".into()]).unwrap();
        let g = FeatureGrouping::single(1);
        let hyper = Hyperparams::default_for(1);
        let mut p = ModelParams::neutral(&g, 1);
        p.tau = TAU_MIN;
        let prob = Problem::new(&data, &g, &hyper, JIT).unwrap();
        let o = objective(&prob, &p).unwrap();
        assert!((o.nll - 2.0_f64.ln()).abs() < 1e-15);
        assert!(o.tau_prior < 1e-11);
        assert_eq!(o.mvn_prior, 0.0);
        assert_eq!(o.u_prior, 0.0);
    }

    #[test]
    fn zero_features_leave_prior_gradient() {
        let (data, g, hyper, p) = random_instance(3, 8, 2, 10, 4);
        let zero = data.with_features(DMatrix::zeros(10, 8), data.feature_names().to_vec()).unwrap();
        let prob = Problem::new(&zero, &g, &hyper, JIT).unwrap();
        let ex = Expanded::new(&p, &g, JIT).unwrap();
        let blocks = grad_w_block(&prob, &p, 1, 0).unwrap();
        let prior = ex.w_prior_column(&g, 1);
        for z in 0..2 {
            for (r, &j) in g.members(z).iter().enumerate() {
                assert_eq!(blocks[z][r], prior[j]);
            }
        }
        let gu = grad_u_col(&prob, &p, 2, 0).unwrap();
        let want = &p.u * ex.prec.omega_inv.matrix().column(2);
        assert!((gu - want).amax() < 1e-15);
    }

    #[test]
    fn w_gradient_at_neutral_point() {
        let (data, g, hyper, _) = random_instance(2, 4, 2, 6, 8);
        let p = ModelParams::neutral(&g, 2);
        let prob = Problem::new(&data, &g, &hyper, JIT).unwrap();
        let i = 1; // labelled positive for every task
        let blocks = grad_w_block(&prob, &p, 0, i).unwrap();
        for z in 0..2 {
            for (r, &j) in g.members(z).iter().enumerate() {
                let want = -data.features()[(i, j)] / 2.0;
                assert!((blocks[z][r] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn u_gradient_slope_at_zero() {
        // With W = 1 at one coordinate the likelihood slope exposes f'(0).
        let data = Dataset::unchecked(vec!["a".into()], DMatrix::from_element(1, 1, 1.0), vec![Some(1)], vec!["f".into()], vec!["t".into()]).unwrap();
        let g = FeatureGrouping::single(1);
        let hyper = Hyperparams::default_for(1);
        let mut p = ModelParams::neutral(&g, 1);
        p.w_blocks[0][(0, 0)] = 1.0;
        p.omega = SymMatrix::identity(1);
        let prob = Problem::new(&data, &g, &hyper, 0.0).unwrap();
        let gu = grad_u_col(&prob, &p, 0, 0).unwrap();
        let resid = 1.0 - sigmoid(1.0);
        let fprime = std::f64::consts::PI / (2.0 * std::f64::consts::PI).sqrt();
        assert!((gu[0] + resid * fprime).abs() < 1e-14);
    }

    #[test]
    fn tau_gradient_without_signal() {
        let (data, g, hyper, mut p) = random_instance(3, 8, 2, 10, 1);
        let prob = Problem::new(&data, &g, &hyper, JIT).unwrap();
        p.tau = 1.0;
        let zero_w: Vec<_> = p.w_blocks.iter().map(|b| DMatrix::zeros(b.nrows(), b.ncols())).collect();
        p.w_blocks = zero_w;
        assert!((grad_tau(&prob, &p).unwrap() - 2.0).abs() < 1e-15);

        let missing = Dataset::unchecked(
            data.ids().to_vec(),
            data.features().clone(),
            vec![None; data.labels().len()],
            data.feature_names().to_vec(),
            data.task_names().to_vec(),
        )
        .unwrap();
        let (_, _, _, q) = random_instance(3, 8, 2, 10, 2);
        let prob = Problem::new(&missing, &g, &hyper, JIT).unwrap();
        let want = tau_prior_slope(q.tau);
        assert!((grad_tau(&prob, &q).unwrap() - want).abs() < 1e-15);
    }

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-3 {
            (analytic - numeric).abs() <= 1e-7
        } else {
            (analytic - numeric).abs() / scale <= 1e-5
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..3 {
            let (data, g, hyper, p) = random_instance(3, 8, 2, 20, 100 + seed);
            let prob = Problem::new(&data, &g, &hyper, JIT).unwrap();
            let ex = Expanded::new(&p, &g, JIT).unwrap();
            let grad = full_gradient(&prob, &ex);
            let w0 = p.w(&g);
            for j in 0..8 {
                for k in 0..3 {
                    let f = |v: f64| {
                        let mut q = p.clone();
                        let mut w = w0.clone();
                        w[(j, k)] = v;
                        q.set_w(&g, &w);
                        objective(&prob, &q).unwrap().total
                    };
                    let num = fd(f, w0[(j, k)], h);
                    assert!(close(grad.w[(j, k)], num), "w[{j},{k}] {} vs {num}", grad.w[(j, k)]);
                    let f = |v: f64| {
                        let mut q = p.clone();
                        q.u[(j, k)] = v;
                        objective(&prob, &q).unwrap().total
                    };
                    let num = fd(f, p.u[(j, k)], h);
                    assert!(close(grad.u[(j, k)], num), "u[{j},{k}] {} vs {num}", grad.u[(j, k)]);
                }
            }
            let f = |v: f64| {
                let mut q = p.clone();
                q.tau = v;
                objective(&prob, &q).unwrap().total
            };
            let num = fd(f, p.tau, h);
            assert!(close(grad.tau, num));
            assert_eq!(grad.tau, grad_tau(&prob, &p).unwrap());
        }
    }

    #[test]
    fn instance_likelihood_parts_sum_to_full_batch() {
        let (data, g, hyper, p) = random_instance(3, 8, 2, 12, 21);
        let prob = Problem::new(&data, &g, &hyper, JIT).unwrap();
        let ex = Expanded::new(&p, &g, JIT).unwrap();
        let full = likelihood_gradient(&prob, &ex);
        let mut w = DMatrix::zeros(8, 3);
        let mut u = DMatrix::zeros(8, 3);
        for (k, i) in data.instances() {
            let gi = instance_gradient(&prob, &ex, k, i, 0.0).unwrap();
            let mut wc = w.column_mut(k);
            wc += &gi.w;
            let mut uc = u.column_mut(k);
            uc += &gi.u;
        }
        assert!((w - &full.w).amax() < 1e-12);
        assert!((u - &full.u).amax() < 1e-12);
    }

    #[test]
    fn omega_closed_form_examples() {
        let g = FeatureGrouping::contiguous(4, 2).unwrap();
        let p = ModelParams::neutral(&g, 3);
        let hyper = Hyperparams::new(SymMatrix::identity(3), 0.7, 5.0).unwrap();
        let o = closed_form_omega(&p, &hyper, JIT).unwrap();
        assert!((o.matrix() - SymMatrix::scaled_identity(3).matrix()).amax() < 1e-15);

        let p = ModelParams::neutral(&g, 2);
        let hyper = Hyperparams::new(SymMatrix::from_diagonal(&[4.0, 1.0]).unwrap(), 2.0, 4.0).unwrap();
        let o = closed_form_omega(&p, &hyper, JIT).unwrap();
        assert!((o[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((o[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(o[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn sigma_closed_form_examples() {
        let k = 3;
        let g = FeatureGrouping::single(k);
        let mut p = ModelParams::neutral(&g, k);
        p.w_blocks[0] = DMatrix::identity(k, k);
        let s = closed_form_sigma(&p, 0, JIT).unwrap();
        assert!((s.matrix() - SymMatrix::scaled_identity(k).matrix()).amax() < 1e-12);

        let g = FeatureGrouping::single(4);
        let p = ModelParams::neutral(&g, 2);
        let s = closed_form_sigma(&p, 0, JIT).unwrap();
        assert!((s.matrix() - SymMatrix::scaled_identity(4).matrix()).amax() < 1e-15);
    }

    #[test]
    fn closed_forms_do_not_increase_restricted_objectives() {
        for seed in 0..10 {
            let (_, g, hyper, p) = random_instance(3, 8, 2, 4, 300 + seed);
            let target = omega_update_target(&p, &hyper, JIT).unwrap();
            let before = restricted_objective(&p.omega, &target).unwrap();
            let omega = closed_form_omega(&p, &hyper, JIT).unwrap();
            assert!((omega.trace() - 1.0).abs() < 1e-12);
            let after = restricted_objective(&omega, &target).unwrap();
            assert!(after <= before + 1e-12 * before.abs());
            for z in 0..g.n_groups() {
                let target = sigma_update_target(&p, z, JIT).unwrap();
                let before = restricted_objective(&p.sigma_blocks[z], &target).unwrap();
                let s = closed_form_sigma(&p, z, JIT).unwrap();
                let after = restricted_objective(&s, &target).unwrap();
                assert!(after <= before + 1e-12 * before.abs());
            }
        }
    }

    #[test]
    fn objective_finite_on_random_states() {
        let (data, g, hyper, _) = random_instance(3, 8, 2, 10, 77);
        let prob = Problem::new(&data, &g, &hyper, JIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..1000 {
            let mut p = random_params(&g, 3, &mut rng);
            p.u *= rng.random_range(0.0..8.0);
            p.tau = rng.random_range(TAU_MIN..50.0);
            let o = objective(&prob, &p).unwrap();
            assert!(o.total.is_finite());
            assert!(compute_beta(&p, &g).iter().all(|v| v.is_finite()));
        }
    }
}
