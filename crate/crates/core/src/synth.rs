//! Synthetic cohorts drawn from the model's own generative story.

use nalgebra::{Cholesky, DMatrix};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::cov_to_corr;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::{compute_lambda, hadamard_scaled, sigmoid, Dataset, FeatureGrouping};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_tasks: usize,
    pub n_features: usize,
    pub n_groups: usize,
    pub n_patients: usize,
    pub omega_true: SymMatrix,
    /// Fraction of coefficients forced to zero.
    pub sparsity: f64,
    /// Global scale `τ` of the coefficients.
    pub signal_scale: f64,
    pub feature_corr: f64,
    pub missing_rate: f64,
    /// Zero whole feature rows so every task shares one support.
    pub shared_support: bool,
    pub seed: u64,
}

impl SynthSpec {
    /// Identity-correlated tasks with moderate defaults.
    pub fn new(n_tasks: usize, n_features: usize, n_groups: usize, n_patients: usize) -> Self {
        Self {
            n_tasks,
            n_features,
            n_groups,
            n_patients,
            omega_true: SymMatrix::identity(n_tasks),
            sparsity: 0.0,
            signal_scale: 1.0,
            feature_corr: 0.0,
            missing_rate: 0.0,
            shared_support: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_tasks == 0 || self.n_features == 0 || self.n_groups == 0 || self.n_patients == 0 {
            return bad("all synthetic dimensions must be positive");
        }
        if self.n_groups > self.n_features {
            return bad("more groups than features");
        }
        if self.omega_true.dim() != self.n_tasks {
            return Err(Error::dims("omega_true", self.n_tasks, self.omega_true.dim()));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return bad("sparsity must lie in [0, 1]");
        }
        if !(self.signal_scale > 0.0) {
            return bad("signal_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.feature_corr) || !(0.0..1.0).contains(&self.missing_rate) {
            return bad("feature_corr and missing_rate must lie in [0, 1)");
        }
        let min = self.omega_true.eigenvalues()[0];
        if !(min > 0.0) {
            return Err(Error::NonPsd { min_eigenvalue: min });
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (line_no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", line_no + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", line_no + 1)))?;
        }
        Ok(())
    }

    /// Sets one field by name. `omega` accepts `identity`, `equicorr:<r>`
    /// or `two_block:<within>:<across>`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("bad value '{v}' for {key}")))
        }
        match key {
            "n_tasks" => {
                self.n_tasks = num(key, value)?;
                self.omega_true = SymMatrix::identity(self.n_tasks);
            }
            "n_features" => self.n_features = num(key, value)?,
            "n_groups" => self.n_groups = num(key, value)?,
            "n_patients" => self.n_patients = num(key, value)?,
            "sparsity" => self.sparsity = num(key, value)?,
            "signal_scale" => self.signal_scale = num(key, value)?,
            "feature_corr" => self.feature_corr = num(key, value)?,
            "missing_rate" => self.missing_rate = num(key, value)?,
            "shared_support" => self.shared_support = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "omega" => self.omega_true = parse_omega(value, self.n_tasks)?,
            other => return Err(Error::InvalidConfig(format!("unknown spec key '{other}'"))),
        }
        Ok(())
    }
}

fn parse_omega(value: &str, k: usize) -> Result<SymMatrix> {
    let parts: Vec<&str> = value.split(':').collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("bad omega parameter '{s}'")))
    };
    match parts.as_slice() {
        ["identity"] => Ok(SymMatrix::identity(k)),
        ["equicorr", r] => Ok(equicorrelation(k, num(r)?)),
        ["two_block", w, a] => Ok(two_block(k, num(w)?, num(a)?)),
        _ => Err(Error::InvalidConfig(format!("unknown omega form '{value}'"))),
    }
}

pub fn equicorrelation(k: usize, r: f64) -> SymMatrix {
    SymMatrix::new(DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { r })).expect("symmetric by construction")
}

/// Unit diagonal; tasks `0..⌈k/2⌉` and the rest form two blocks.
pub fn two_block(k: usize, within: f64, across: f64) -> SymMatrix {
    let half = k.div_ceil(2);
    SymMatrix::new(DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else if (i < half) == (j < half) {
            within
        } else {
            across
        }
    }))
    .expect("symmetric by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beta_true: DMatrix<f64>,
    pub omega_true: SymMatrix,
    pub support: DMatrix<bool>,
    pub u_true: DMatrix<f64>,
    pub lambda_true: DMatrix<f64>,
    pub w_true: DMatrix<f64>,
}

fn correlated_rows(rows: usize, cov: &SymMatrix, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let k = cov.dim();
    let chol = Cholesky::new(cov.matrix().clone()).ok_or(Error::NonPsd {
        min_eigenvalue: cov.eigenvalues()[0],
    })?;
    let z = DMatrix::from_fn(rows, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(z * chol.l().transpose())
}

/// Draws features, coefficients and labels.
///
/// Coefficient rows `u^j ~ N(0, Ω)` set the local scales, rows of `W` are
/// drawn with the task correlation of `Ω`, and `β = τ Λ∘W` before the
/// sparsity mask is applied.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, FeatureGrouping, GroundTruth)> {
    spec.validate()?;
    let (n, m, k) = (spec.n_patients, spec.n_features, spec.n_tasks);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grouping = FeatureGrouping::contiguous(m, spec.n_groups)?;

    let shared = spec.feature_corr.sqrt();
    let own = (1.0 - spec.feature_corr).sqrt();
    let mut x = DMatrix::zeros(n, m);
    for i in 0..n {
        let common: Vec<f64> = (0..spec.n_groups).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..m {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = shared * common[grouping.group_of()[j]] + own * e;
        }
    }

    let u_true = correlated_rows(m, &spec.omega_true, &mut rng)?;
    let lambda_true = compute_lambda(&u_true, &spec.omega_true);
    let w_true = correlated_rows(m, &cov_to_corr(&spec.omega_true)?, &mut rng)?;
    let mut beta_true = hadamard_scaled(spec.signal_scale, &lambda_true, &w_true);

    if spec.shared_support {
        let zeros = (spec.sparsity * m as f64).round() as usize;
        for j in sample(&mut rng, m, zeros) {
            beta_true.row_mut(j).fill(0.0);
        }
    } else {
        let zeros = (spec.sparsity * (m * k) as f64).round() as usize;
        for idx in sample(&mut rng, m * k, zeros) {
            beta_true[(idx % m, idx / m)] = 0.0;
        }
    }
    let support = beta_true.map(|b| b != 0.0);

    let logits = &x * &beta_true;
    let mut labels = Vec::with_capacity(n * k);
    for i in 0..n {
        for t in 0..k {
            let c = u8::from(rng.random_bool(sigmoid(logits[(i, t)])));
            let missing = spec.missing_rate > 0.0 && rng.random_bool(spec.missing_rate);
            labels.push(if missing { None } else { Some(c) });
        }
    }

    let data = Dataset::new(
        (0..n).map(|i| format!("p{i}")).collect(),
        x,
        labels,
        (0..m).map(|j| format!("x{j}")).collect(),
        (0..k).map(|t| format!("task{t}")).collect(),
    )?;
    let truth = GroundTruth {
        beta_true,
        omega_true: spec.omega_true.clone(),
        support,
        u_true,
        lambda_true,
        w_true,
    };
    Ok((data, grouping, truth))
}
