//! Alternating MAP estimation: stochastic (or full-batch) gradient steps on
//! the coefficients and the latent shrinkage field, a gradient step on the
//! global scale, then closed-form task and feature covariance updates.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{SymMatrix, DEFAULT_JITTER};
use crate::model::{bernoulli_nll, sigmoid, Dataset, FeatureGrouping, FittedModel, Hyperparams, ModelParams, TAU_MIN};
use crate::objective::{
    closed_form_omega, closed_form_sigma, full_gradient, instance_gradient, likelihood_gradient, objective_expanded,
    tau_prior_slope, Expanded, Problem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    PlainSgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Stochastic,
    FullBatch,
}

/// Visiting order of the `(task, patient)` instances inside a stochastic epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceOrder {
    /// One shuffle across all tasks.
    Shuffled,
    /// Tasks in index order, patients shuffled within each task.
    TasksOuter,
}

/// Degenerate configurations used as baselines. Flags combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    /// `Λ = 1` and `τ = 1` are frozen; only the Gaussian prior remains.
    pub no_shrinkage: bool,
    /// `Σ_z` frozen at `I / G_z`.
    pub identity_sigma: bool,
    /// `Ω` frozen at `I / K` and `Σ_z` at `I / G_z`.
    pub independent_tasks: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        no_shrinkage: false,
        identity_sigma: false,
        independent_tasks: false,
    };

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }

    fn updates_omega(&self) -> bool {
        !self.independent_tasks
    }

    fn updates_sigma(&self) -> bool {
        !self.independent_tasks && !self.identity_sigma
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma-separated list of `none`, `no_shrinkage`, `identity_sigma`, `independent_tasks`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.replace('-', "_").as_str() {
                "none" => {}
                "no_shrinkage" => a.no_shrinkage = true,
                "identity_sigma" => a.identity_sigma = true,
                "independent_tasks" => a.independent_tasks = true,
                other => return Err(Error::InvalidConfig(format!("unknown ablation '{other}'"))),
            }
        }
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.no_shrinkage {
            parts.push("no_shrinkage");
        }
        if self.identity_sigma {
            parts.push("identity_sigma");
        }
        if self.independent_tasks {
            parts.push("independent_tasks");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_iter: usize,
    /// Relative change of the per-epoch objective below which training stops.
    pub tol: f64,
    pub batch_mode: BatchMode,
    pub order: InstanceOrder,
    pub seed: u64,
    pub tau_min: f64,
    pub jitter: f64,
    /// Apply the full prior gradient on every sampled instance instead of `1/|N_k|` of it.
    pub paper_sgd_scaling: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_iter: 200,
            tol: 1e-5,
            batch_mode: BatchMode::Stochastic,
            order: InstanceOrder::Shuffled,
            seed: 0,
            tau_min: TAU_MIN,
            jitter: DEFAULT_JITTER,
            paper_sgd_scaling: false,
            ablation: Ablation::NONE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if !(self.tau_min > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::InvalidConfig("tau_min must be positive and jitter nonnegative".into()));
        }
        Ok(())
    }

    /// Key/value echo stored alongside fitted models.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("optimizer".into(), format!("{:?}", self.optimizer)),
            ("max_iter".into(), self.max_iter.to_string()),
            ("tol".into(), self.tol.to_string()),
            ("batch_mode".into(), format!("{:?}", self.batch_mode)),
            ("order".into(), format!("{:?}", self.order)),
            ("seed".into(), self.seed.to_string()),
            ("tau_min".into(), self.tau_min.to_string()),
            ("jitter".into(), self.jitter.to_string()),
            ("paper_sgd_scaling".into(), self.paper_sgd_scaling.to_string()),
            ("ablation".into(), self.ablation.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations_run: usize,
    pub final_objective: f64,
    /// Surrogate objective after each epoch.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub wall_time_seconds: f64,
}

/// First/second moment state for a dense parameter, with one step counter
/// per column so sparse column updates get the right bias correction.
struct Moments {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    steps: Vec<i32>,
}

impl Moments {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            steps: vec![0; cols],
        }
    }
}

struct Stepper {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Stepper {
    fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn column(&self, state: &mut Moments, param: &mut DMatrix<f64>, k: usize, grad: &DVector<f64>) {
        match self.kind {
            OptimizerKind::PlainSgd => {
                for j in 0..grad.len() {
                    param[(j, k)] -= self.lr * grad[j];
                }
            }
            OptimizerKind::Adam => {
                state.steps[k] += 1;
                let t = state.steps[k];
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for j in 0..grad.len() {
                    let g = grad[j];
                    let m = self.beta1 * state.m[(j, k)] + (1.0 - self.beta1) * g;
                    let v = self.beta2 * state.v[(j, k)] + (1.0 - self.beta2) * g * g;
                    state.m[(j, k)] = m;
                    state.v[(j, k)] = v;
                    param[(j, k)] -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                }
            }
        }
    }

    fn all(&self, state: &mut Moments, param: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
        for k in 0..grad.ncols() {
            let g = grad.column(k).into_owned();
            self.column(state, param, k, &g);
        }
    }

    fn scalar(&self, state: &mut Moments, param: &mut f64, grad: f64) {
        let mut p = DMatrix::from_element(1, 1, *param);
        self.column(state, &mut p, 0, &DVector::from_element(1, grad));
        *param = p[(0, 0)];
    }
}

/// Starting point: `W ~ N(0, 0.01²)`, `U = 0`, `τ = 1`, `Ω = I/K`, `Σ_z = I/G_z`.
pub fn initial_params(grouping: &FeatureGrouping, n_tasks: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::neutral(grouping, n_tasks);
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let w = DMatrix::from_fn(grouping.n_features(), n_tasks, |_, _| normal.sample(rng));
    p.set_w(grouping, &w);
    p
}

/// Runs the alternating estimator to convergence or `max_iter` epochs.
pub fn fit(
    data: &Dataset,
    grouping: &FeatureGrouping,
    hyper: &Hyperparams,
    config: &TrainConfig,
) -> Result<(FittedModel, TrainReport)> {
    config.validate()?;
    data.validate()?;
    let problem = Problem::new(data, grouping, hyper, config.jitter)?;
    let started = Instant::now();
    let k_tasks = data.n_tasks();
    let m = data.n_features();
    let ablation = config.ablation;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut params = initial_params(grouping, k_tasks, &mut rng);
    let mut ex = Expanded::new(&params, grouping, config.jitter)?;
    let stepper = Stepper::from_config(config);
    let mut w_state = Moments::new(m, k_tasks);
    let mut u_state = Moments::new(m, k_tasks);
    let mut tau_state = Moments::new(1, 1);

    let instances = data.instances();
    let prior_scale: Vec<f64> = (0..k_tasks)
        .map(|k| {
            if config.paper_sgd_scaling {
                1.0
            } else {
                1.0 / data.observed(k).len().max(1) as f64
            }
        })
        .collect();

    let mut previous = objective_expanded(&problem, &params, &ex)?.surrogate();
    let mut trace = Vec::with_capacity(config.max_iter);
    let mut converged = false;

    for epoch in 1..=config.max_iter {
        match config.batch_mode {
            BatchMode::Stochastic => {
                let order = epoch_order(&instances, k_tasks, config.order, &mut rng);
                for &(k, i) in &order {
                    let g = instance_gradient(&problem, &ex, k, i, prior_scale[k])?;
                    stepper.column(&mut w_state, &mut ex.w, k, &g.w);
                    if !ablation.no_shrinkage {
                        stepper.column(&mut u_state, &mut ex.u, k, &g.u);
                        ex.refresh_lambda(k);
                    }
                }
            }
            BatchMode::FullBatch => {
                let g = full_gradient(&problem, &ex);
                stepper.all(&mut w_state, &mut ex.w, &g.w);
                if !ablation.no_shrinkage {
                    stepper.all(&mut u_state, &mut ex.u, &g.u);
                    for k in 0..k_tasks {
                        ex.refresh_lambda(k);
                    }
                }
            }
        }
        if !ablation.no_shrinkage {
            let g_tau = likelihood_gradient(&problem, &ex).tau + tau_prior_slope(ex.tau);
            stepper.scalar(&mut tau_state, &mut ex.tau, g_tau);
            ex.tau = ex.tau.max(config.tau_min);
        }
        ex.store(&mut params, grouping);

        if ablation.updates_omega() {
            params.omega = closed_form_omega(&params, hyper, config.jitter)?;
        }
        if ablation.updates_sigma() {
            for z in 0..grouping.n_groups() {
                params.sigma_blocks[z] = closed_form_sigma(&params, z, config.jitter)?;
            }
        }
        ex = Expanded::new(&params, grouping, config.jitter)?;

        let value = objective_expanded(&problem, &params, &ex)?.surrogate();
        if !value.is_finite() {
            return Err(Error::NumericalFailure(format!("objective became {value} at epoch {epoch}")));
        }
        trace.push(value);
        log::debug!("epoch {epoch}: objective {value:.6} tau {:.4}", params.tau);
        let rel = (previous - value).abs() / previous.abs().max(1e-12);
        previous = value;
        if rel < config.tol {
            converged = true;
            break;
        }
    }

    let report = TrainReport {
        iterations_run: trace.len(),
        final_objective: previous,
        objective_trace: trace.clone(),
        converged,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let mut model = FittedModel::from_params(
        params,
        grouping.clone(),
        data.feature_names().to_vec(),
        data.task_names().to_vec(),
    )?;
    model.history = trace.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect();
    model.metadata = config.echo();
    Ok((model, report))
}

fn epoch_order(
    instances: &[(usize, usize)],
    n_tasks: usize,
    order: InstanceOrder,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut out = instances.to_vec();
    match order {
        InstanceOrder::Shuffled => out.shuffle(rng),
        InstanceOrder::TasksOuter => {
            out.clear();
            for k in 0..n_tasks {
                let mut task: Vec<_> = instances.iter().copied().filter(|&(t, _)| t == k).collect();
                task.shuffle(rng);
                out.extend(task);
            }
        }
    }
    out
}

/// Minimum step budget of [`stl_fit`].
pub const STL_MIN_ITER: usize = 10_000;

/// Ridge-penalized logistic regression for a single task, fitted with
/// full-batch steps of the configured optimizer on
/// `nll + (l2 / 2) ‖w‖²`. Stops once the largest gradient entry is below
/// `tol` times the number of labeled patients.
pub fn stl_fit(data: &Dataset, task: usize, l2: f64, config: &TrainConfig) -> Result<DVector<f64>> {
    config.validate()?;
    if task >= data.n_tasks() {
        return Err(Error::dims("task index", data.n_tasks(), task));
    }
    let (pos, neg) = data.class_counts(task);
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(format!(
            "task '{}' needs both classes",
            data.task_names()[task]
        )));
    }
    if !(l2 >= 0.0) {
        return Err(Error::InvalidConfig("l2 must be nonnegative".into()));
    }
    let rows = data.observed(task);
    let x = data.features().select_rows(rows.iter());
    let y: Vec<u8> = rows.iter().map(|&i| data.label(i, task).expect("observed")).collect();
    let m = data.n_features();

    let stepper = Stepper::from_config(config);
    let mut state = Moments::new(m, 1);
    let mut w = DMatrix::zeros(m, 1);
    let eval = |w: &DMatrix<f64>| -> (f64, DVector<f64>) {
        let logits = &x * w;
        let mut nll = 0.0;
        let mut r = DVector::zeros(rows.len());
        for (i, &c) in y.iter().enumerate() {
            nll += bernoulli_nll(logits[(i, 0)], c);
            r[i] = f64::from(c) - sigmoid(logits[(i, 0)]);
        }
        let wv = w.column(0);
        let grad = -(x.transpose() * r) + wv * l2;
        (nll + 0.5 * l2 * wv.norm_squared(), grad)
    };
    let (_, mut grad) = eval(&w);
    let grad_tol = config.tol * rows.len() as f64;
    for _ in 0..config.max_iter.max(STL_MIN_ITER) {
        if grad.amax() <= grad_tol {
            break;
        }
        stepper.column(&mut state, &mut w, 0, &grad);
        let (value, g) = eval(&w);
        if !value.is_finite() {
            return Err(Error::NumericalFailure("single-task objective diverged".into()));
        }
        grad = g;
    }
    Ok(w.column(0).into_owned())
}

/// Single-task baseline for every task, packed into a model with `Ω = I/K`.
pub fn stl_fit_all(
    data: &Dataset,
    grouping: &FeatureGrouping,
    l2: f64,
    config: &TrainConfig,
) -> Result<FittedModel> {
    let k_tasks = data.n_tasks();
    let mut beta = DMatrix::zeros(data.n_features(), k_tasks);
    for k in 0..k_tasks {
        beta.set_column(k, &stl_fit(data, k, l2, config)?);
    }
    let mut params = ModelParams::neutral(grouping, k_tasks);
    params.set_w(grouping, &beta);
    let mut model = FittedModel::from_params(
        params,
        grouping.clone(),
        data.feature_names().to_vec(),
        data.task_names().to_vec(),
    )?;
    model.omega = SymMatrix::scaled_identity(k_tasks);
    model.metadata = vec![("baseline".into(), "stl".into()), ("l2".into(), l2.to_string())];
    Ok(model)
}
