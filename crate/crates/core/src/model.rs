//! Data and parameter types, the correlated Horseshoe transform, effective
//! coefficients and risk prediction.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::DMatrix;
use statrs::function::erf::erfc;

use crate::analysis::cov_to_corr;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

pub const LAMBDA_MIN: f64 = 1e-12;
pub const LAMBDA_MAX: f64 = 1e12;
pub const TAU_MIN: f64 = 1e-6;

pub const INTERCEPT_NAME: &str = "(intercept)";

/// Per-task observations. Labels are stored row-major (`N × K`) with `None`
/// marking a patient that is not part of the task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    features: DMatrix<f64>,
    labels: Vec<Option<u8>>,
    feature_names: Vec<String>,
    task_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        features: DMatrix<f64>,
        labels: Vec<Option<u8>>,
        feature_names: Vec<String>,
        task_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Self::unchecked(ids, features, labels, feature_names, task_names)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Shape checks only; task-level invariants are left to [`Dataset::validate`].
    pub(crate) fn unchecked(
        ids: Vec<String>,
        features: DMatrix<f64>,
        labels: Vec<Option<u8>>,
        feature_names: Vec<String>,
        task_names: Vec<String>,
    ) -> Result<Self> {
        let (n, m) = features.shape();
        let k = task_names.len();
        if ids.len() != n {
            return Err(Error::dims("patient ids", n, ids.len()));
        }
        if feature_names.len() != m {
            return Err(Error::dims("feature names", m, feature_names.len()));
        }
        if labels.len() != n * k {
            return Err(Error::dims("label cells", n * k, labels.len()));
        }
        if m == 0 {
            return Err(Error::Validation("dataset has no features".into()));
        }
        if k == 0 {
            return Err(Error::Validation("dataset has no tasks".into()));
        }
        if let Some(bad) = labels.iter().flatten().find(|c| **c > 1) {
            return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
        }
        for i in 0..n {
            for j in 0..m {
                if !features[(i, j)].is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite feature '{}' for patient '{}'",
                        feature_names[j], ids[i]
                    )));
                }
            }
        }
        Ok(Self {
            ids,
            features,
            labels,
            feature_names,
            task_names,
        })
    }

    /// Every task needs at least one positive and one negative label.
    pub fn validate(&self) -> Result<()> {
        if self.n_patients() == 0 {
            return Err(Error::Validation("dataset has no patients".into()));
        }
        for k in 0..self.n_tasks() {
            let (pos, neg) = self.class_counts(k);
            if pos + neg == 0 {
                return Err(Error::Validation(format!(
                    "task '{}' has no observed labels",
                    self.task_names[k]
                )));
            }
            if pos == 0 || neg == 0 {
                return Err(Error::Validation(format!(
                    "task '{}' has only {} examples",
                    self.task_names[k],
                    if pos == 0 { "negative" } else { "positive" }
                )));
            }
        }
        Ok(())
    }

    pub fn n_patients(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn label(&self, patient: usize, task: usize) -> Option<u8> {
        self.labels[patient * self.n_tasks() + task]
    }

    /// Patients observed for `task`, in index order.
    pub fn observed(&self, task: usize) -> Vec<usize> {
        (0..self.n_patients())
            .filter(|&i| self.label(i, task).is_some())
            .collect()
    }

    /// `(positives, negatives)` for `task`.
    pub fn class_counts(&self, task: usize) -> (usize, usize) {
        (0..self.n_patients()).fold((0, 0), |(p, n), i| match self.label(i, task) {
            Some(1) => (p + 1, n),
            Some(_) => (p, n + 1),
            None => (p, n),
        })
    }

    /// All observed `(task, patient)` pairs, tasks outermost.
    pub fn instances(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.n_tasks() {
            for i in 0..self.n_patients() {
                if self.label(i, k).is_some() {
                    out.push((k, i));
                }
            }
        }
        out
    }

    /// Row subset without task-level validation (held-out folds may lack a class).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let k = self.n_tasks();
        let features = self.features.select_rows(rows.iter());
        let mut labels = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            labels.extend_from_slice(&self.labels[r * k..(r + 1) * k]);
        }
        Dataset {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            features,
            labels,
            feature_names: self.feature_names.clone(),
            task_names: self.task_names.clone(),
        }
    }

    pub fn with_features(&self, features: DMatrix<f64>, feature_names: Vec<String>) -> Result<Dataset> {
        Dataset::unchecked(
            self.ids.clone(),
            features,
            self.labels.clone(),
            feature_names,
            self.task_names.clone(),
        )
    }
}

/// Partition of the features into groups, indexed densely from zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGrouping {
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl FeatureGrouping {
    pub fn new(group_of: Vec<usize>) -> Result<Self> {
        if group_of.is_empty() {
            return Err(Error::Validation("grouping covers no features".into()));
        }
        let z = group_of.iter().max().map_or(0, |g| g + 1);
        let mut members = vec![Vec::new(); z];
        for (j, &g) in group_of.iter().enumerate() {
            members[g].push(j);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!("group {empty} is empty")));
        }
        Ok(Self { group_of, members })
    }

    pub fn single(n_features: usize) -> Self {
        Self::new(vec![0; n_features]).expect("nonempty")
    }

    /// Contiguous groups of near-equal size.
    pub fn contiguous(n_features: usize, n_groups: usize) -> Result<Self> {
        if n_groups == 0 || n_groups > n_features {
            return Err(Error::InvalidConfig(format!(
                "cannot split {n_features} features into {n_groups} groups"
            )));
        }
        Self::new((0..n_features).map(|j| j * n_groups / n_features).collect())
    }

    pub fn n_groups(&self) -> usize {
        self.members.len()
    }

    pub fn n_features(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    /// Feature indices of group `z`, ascending.
    pub fn members(&self, z: usize) -> &[usize] {
        &self.members[z]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Appends one feature in a group of its own.
    pub fn with_extra_group(&self) -> Self {
        let mut g = self.group_of.clone();
        g.push(self.n_groups());
        Self::new(g).expect("extra group is nonempty")
    }

    /// Gathers the rows of `w` (`M × K`) into per-group blocks.
    pub fn split_rows(&self, w: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        self.members
            .iter()
            .map(|rows| w.select_rows(rows.iter()))
            .collect()
    }

    /// Scatters per-group blocks back to an `M × K` matrix in feature order.
    pub fn join_rows(&self, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
        let k = blocks.first().map_or(0, |b| b.ncols());
        let mut w = DMatrix::zeros(self.n_features(), k);
        for (rows, block) in self.members.iter().zip(blocks) {
            for (r, &j) in rows.iter().enumerate() {
                w.row_mut(j).copy_from(&block.row(r));
            }
        }
        w
    }
}

/// The estimated quantities: coefficient blocks, latent shrinkage field,
/// global scale and the two kinds of covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_blocks: Vec<DMatrix<f64>>,
    pub u: DMatrix<f64>,
    pub tau: f64,
    pub omega: SymMatrix,
    pub sigma_blocks: Vec<SymMatrix>,
}

impl ModelParams {
    /// Neutral state: `W = 0`, `U = 0`, `τ = 1`, `Ω = I/K`, `Σ_z = I/G_z`.
    pub fn neutral(grouping: &FeatureGrouping, n_tasks: usize) -> Self {
        let sizes = grouping.group_sizes();
        Self {
            w_blocks: sizes.iter().map(|&g| DMatrix::zeros(g, n_tasks)).collect(),
            u: DMatrix::zeros(grouping.n_features(), n_tasks),
            tau: 1.0,
            omega: SymMatrix::scaled_identity(n_tasks),
            sigma_blocks: sizes.iter().map(|&g| SymMatrix::scaled_identity(g)).collect(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.omega.dim()
    }

    pub fn w(&self, grouping: &FeatureGrouping) -> DMatrix<f64> {
        grouping.join_rows(&self.w_blocks)
    }

    pub fn set_w(&mut self, grouping: &FeatureGrouping, w: &DMatrix<f64>) {
        self.w_blocks = grouping.split_rows(w);
    }

    pub fn check(&self, grouping: &FeatureGrouping) -> Result<()> {
        let k = self.n_tasks();
        let m = grouping.n_features();
        if self.u.shape() != (m, k) {
            return Err(Error::dims("U rows", m, self.u.nrows()));
        }
        if self.w_blocks.len() != grouping.n_groups() {
            return Err(Error::dims("W blocks", grouping.n_groups(), self.w_blocks.len()));
        }
        if self.sigma_blocks.len() != grouping.n_groups() {
            return Err(Error::dims("Σ blocks", grouping.n_groups(), self.sigma_blocks.len()));
        }
        for (z, g) in grouping.group_sizes().into_iter().enumerate() {
            if self.w_blocks[z].shape() != (g, k) {
                return Err(Error::dims(format!("W block {z} rows"), g, self.w_blocks[z].nrows()));
            }
            if self.sigma_blocks[z].dim() != g {
                return Err(Error::dims(format!("Σ block {z}"), g, self.sigma_blocks[z].dim()));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::NumericalFailure(format!("tau = {}", self.tau)));
        }
        Ok(())
    }
}

/// Prior matrix over task associations plus the inverse-Wishart scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub omega0: SymMatrix,
    pub delta: f64,
    pub nu: f64,
}

impl Hyperparams {
    pub fn new(omega0: SymMatrix, delta: f64, nu: f64) -> Result<Self> {
        if !(delta > 0.0) || !(nu > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "delta and nu must be positive (got {delta}, {nu})"
            )));
        }
        let min_ev = omega0.eigenvalues()[0];
        if min_ev < -1e-10 * omega0.eigenvalues().last().unwrap().abs().max(1.0) {
            return Err(Error::NonPsd {
                min_eigenvalue: min_ev,
            });
        }
        Ok(Self { omega0, delta, nu })
    }

    /// `Ω₀ = I`, `δ = 1`, `ν = K + 2`.
    pub fn default_for(n_tasks: usize) -> Self {
        Self {
            omega0: SymMatrix::identity(n_tasks),
            delta: 1.0,
            nu: n_tasks as f64 + 2.0,
        }
    }
}

/// Column-wise z-scoring of continuous features; binary columns pass through.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaling {
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let (n, m) = features.shape();
        let mut mean = vec![0.0; m];
        let mut scale = vec![1.0; m];
        for j in 0..m {
            let col = features.column(j);
            let binary = col.iter().all(|&v| v == 0.0 || v == 1.0);
            if binary || n < 2 {
                continue;
            }
            let mu = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
            mean[j] = mu;
            if var > 0.0 {
                scale[j] = var.sqrt();
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.scale[j]
        })
    }
}

/// Transformations applied to raw feature tables before the linear predictor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Preprocess {
    pub scaling: Option<FeatureScaling>,
    pub intercept: bool,
}

impl Preprocess {
    pub fn n_raw_features(&self, n_model_features: usize) -> usize {
        n_model_features - usize::from(self.intercept)
    }

    pub fn apply(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let scaled = match &self.scaling {
            Some(s) => s.apply(raw),
            None => raw.clone(),
        };
        if self.intercept {
            let at = scaled.ncols();
            scaled.insert_column(at, 1.0)
        } else {
            scaled
        }
    }

    /// Applies to a dataset, extending names and grouping when an intercept is added.
    pub fn apply_dataset(
        &self,
        data: &Dataset,
        grouping: &FeatureGrouping,
    ) -> Result<(Dataset, FeatureGrouping)> {
        let x = self.apply(data.features());
        let mut names = data.feature_names().to_vec();
        let mut grouping = grouping.clone();
        if self.intercept {
            names.push(INTERCEPT_NAME.to_string());
            grouping = grouping.with_extra_group();
        }
        Ok((data.with_features(x, names)?, grouping))
    }
}

/// Trained estimator with everything needed to predict and to interpret.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub beta: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub omega: SymMatrix,
    pub corr: SymMatrix,
    pub params: ModelParams,
    pub history: Vec<(usize, f64)>,
    pub feature_names: Vec<String>,
    pub task_names: Vec<String>,
    pub grouping: FeatureGrouping,
    pub preprocess: Preprocess,
    /// Free-form key/value training metadata echoed into archives.
    pub metadata: Vec<(String, String)>,
}

impl FittedModel {
    pub fn from_params(
        params: ModelParams,
        grouping: FeatureGrouping,
        feature_names: Vec<String>,
        task_names: Vec<String>,
    ) -> Result<Self> {
        params.check(&grouping)?;
        let lambda = compute_lambda(&params.u, &params.omega);
        let beta = compute_beta(&params, &grouping);
        let corr = cov_to_corr(&params.omega)?;
        Ok(Self {
            beta,
            lambda,
            omega: params.omega.clone(),
            corr,
            params,
            history: Vec::new(),
            feature_names,
            task_names,
            grouping,
            preprocess: Preprocess::default(),
            metadata: Vec::new(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.beta.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.beta.ncols()
    }
}

/// `λ = tan(π Φ(u) / 2)` with `Φ` the `Normal(0, ω)` CDF, clamped to
/// `[LAMBDA_MIN, LAMBDA_MAX]`.
pub fn lambda_from_u(u_val: f64, omega_kk: f64) -> f64 {
    lambda_and_slope(u_val, omega_kk).0
}

/// `λ(u)` and `dλ/du`. The slope is zero wherever the clamp is active.
pub fn lambda_and_slope(u_val: f64, omega_kk: f64) -> (f64, f64) {
    let sd = omega_kk.sqrt();
    let z = u_val / sd;
    // Evaluate in whichever tail keeps the CDF accurate.
    let raw = if z == 0.0 {
        1.0
    } else if z < 0.0 {
        let cdf = 0.5 * erfc(-z * FRAC_1_SQRT_2);
        (0.5 * PI * cdf).tan()
    } else {
        let upper = 0.5 * erfc(z * FRAC_1_SQRT_2);
        1.0 / (0.5 * PI * upper).tan()
    };
    if !(raw > LAMBDA_MIN) {
        return (LAMBDA_MIN, 0.0);
    }
    if !(raw < LAMBDA_MAX) {
        return (LAMBDA_MAX, 0.0);
    }
    // sec²(πΦ/2) = 1 + λ²
    let pdf = (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt());
    (raw, 0.5 * PI * (1.0 + raw * raw) * pdf)
}

/// Elementwise `λ_jk` with `Ω_kk` taken from column `k`.
pub fn compute_lambda(u: &DMatrix<f64>, omega: &SymMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(u.nrows(), u.ncols(), |j, k| lambda_from_u(u[(j, k)], omega[(k, k)]))
}

/// `β = τ Λ ∘ W` with `W` assembled in original feature order.
pub fn compute_beta(params: &ModelParams, grouping: &FeatureGrouping) -> DMatrix<f64> {
    let w = params.w(grouping);
    let lambda = compute_lambda(&params.u, &params.omega);
    hadamard_scaled(params.tau, &lambda, &w)
}

/// `τ · λ_jk · w_jk` evaluated left to right for every entry.
pub fn hadamard_scaled(tau: f64, lambda: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    lambda.zip_map(w, |l, v| tau * l * v)
}

/// Logistic function kept strictly inside `(0, 1)`.
pub fn sigmoid(t: f64) -> f64 {
    let p = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `log(1 + eᵗ)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Negative log-likelihood of one Bernoulli label under logit `t`.
pub fn bernoulli_nll(t: f64, label: u8) -> f64 {
    if label == 1 {
        softplus(-t)
    } else {
        softplus(t)
    }
}

pub fn predict_risk(beta_col: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(beta_col.len(), x.len());
    sigmoid(beta_col.iter().zip(x).map(|(b, v)| b * v).sum())
}

/// Risk for every patient and task. `features` are raw (pre-processing is
/// applied from the model).
pub fn predict_all(model: &FittedModel, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let expected = model.preprocess.n_raw_features(model.n_features());
    if features.ncols() != expected {
        return Err(Error::dims("feature columns", expected, features.ncols()));
    }
    let x = model.preprocess.apply(features);
    Ok(predict_scores(&model.beta, &x))
}

/// `σ(X β)` for prepared features.
pub fn predict_scores(beta: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    (x * beta).map(sigmoid)
}
