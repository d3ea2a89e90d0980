//! AUC and stratified k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{predict_scores, Dataset, FeatureGrouping, FeatureScaling, FittedModel, Hyperparams, Preprocess};
use crate::trainer::{fit, stl_fit_all, TrainConfig};

/// Area under the ROC curve via average ranks. Ties get half credit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("auc labels", scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&c| c == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NumericalFailure("NaN score passed to auc".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let twice_mid = (start + 1 + end) as u128;
        let pos_in_run = idx[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_run;
        start = end;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// What a cross-validation run fits on each training fold.
#[derive(Debug, Clone, PartialEq)]
pub enum Learner {
    Trefles(TrainConfig),
    /// Independent ridge logistic regressions with the given penalty.
    Stl { l2: f64, config: TrainConfig },
}

impl Learner {
    pub fn name(&self) -> String {
        match self {
            Learner::Trefles(c) if c.ablation.is_none() => "trefles".into(),
            Learner::Trefles(c) => c.ablation.to_string(),
            Learner::Stl { .. } => "stl".into(),
        }
    }

    fn fit(
        &self,
        data: &Dataset,
        grouping: &FeatureGrouping,
        hyper: &Hyperparams,
        fold: usize,
    ) -> Result<FittedModel> {
        match self {
            Learner::Trefles(c) => {
                let cfg = TrainConfig {
                    seed: c.seed.wrapping_add(fold as u64),
                    ..c.clone()
                };
                Ok(fit(data, grouping, hyper, &cfg)?.0)
            }
            Learner::Stl { l2, config } => stl_fit_all(data, grouping, *l2, config),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Upper bound on concurrently running folds; 0 means one per fold.
    pub threads: usize,
    /// Z-score continuous features with training-fold statistics.
    pub standardize: bool,
    pub intercept: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            threads: 0,
            standardize: true,
            intercept: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAuc {
    pub task_name: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub fold_aucs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub model: String,
    pub per_task: Vec<TaskAuc>,
    /// Mean of the per-task means.
    pub overall_mean: f64,
    /// Standard deviation across folds of the task-averaged AUC.
    pub overall_std: f64,
    pub folds: usize,
    pub seed: u64,
}

impl CvReport {
    pub fn to_text(&self) -> String {
        format_table(std::slice::from_ref(self))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Tab-separated table: one column per model, one row per task plus an
/// `overall` row, cells as `mean (std)`.
pub fn format_table(reports: &[CvReport]) -> String {
    let mut out = String::from("task");
    for r in reports {
        out.push('\t');
        out.push_str(&r.model);
    }
    out.push('\n');
    let Some(first) = reports.first() else {
        return out;
    };
    for (k, t) in first.per_task.iter().enumerate() {
        out.push_str(&t.task_name);
        for r in reports {
            let row = &r.per_task[k];
            out.push_str(&format!("\t{:.4} ({:.4})", row.mean_auc, row.std_auc));
        }
        out.push('\n');
    }
    out.push_str("overall");
    for r in reports {
        out.push_str(&format!("\t{:.4} ({:.4})", r.overall_mean, r.overall_std));
    }
    out.push('\n');
    out
}

/// Fold index for every patient, stratified on the task with the fewest
/// positives. Patients unlabeled for that task are dealt round-robin after
/// a shuffle.
pub fn assign_folds(data: &Dataset, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
    }
    if data.n_patients() < folds {
        return Err(Error::InvalidConfig(format!(
            "{} patients cannot fill {folds} folds",
            data.n_patients()
        )));
    }
    let strat = (0..data.n_tasks())
        .min_by_key(|&k| data.class_counts(k).0)
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut missing = Vec::new();
    for i in 0..data.n_patients() {
        match data.label(i, strat) {
            Some(1) => pos.push(i),
            Some(_) => neg.push(i),
            None => missing.push(i),
        }
    }
    let mut fold_of = vec![0; data.n_patients()];
    let mut next = 0;
    for mut part in [pos, neg, missing] {
        part.shuffle(&mut rng);
        for i in part {
            fold_of[i] = next % folds;
            next += 1;
        }
    }
    check_feasible(data, &fold_of, folds)?;
    Ok(fold_of)
}

fn check_feasible(data: &Dataset, fold_of: &[usize], folds: usize) -> Result<()> {
    for k in 0..data.n_tasks() {
        let mut counts = vec![[0usize; 2]; folds];
        let (total_pos, total_neg) = data.class_counts(k);
        for i in data.observed(k) {
            counts[fold_of[i]][usize::from(data.label(i, k) == Some(1))] += 1;
        }
        for (f, c) in counts.iter().enumerate() {
            let infeasible = |part| Error::InfeasibleStratification {
                task: data.task_names()[k].clone(),
                fold: f,
                part,
            };
            if c[0] == 0 || c[1] == 0 {
                return Err(infeasible("test"));
            }
            if c[1] == total_pos || c[0] == total_neg {
                return Err(infeasible("train"));
            }
        }
    }
    Ok(())
}

/// Cross-validated AUC of the full estimator.
pub fn kfold_cv(
    data: &Dataset,
    grouping: &FeatureGrouping,
    hyper: &Hyperparams,
    config: &TrainConfig,
    folds: usize,
    seed: u64,
) -> Result<CvReport> {
    let opts = CvOptions {
        folds,
        seed,
        ..CvOptions::default()
    };
    kfold_cv_with(data, grouping, hyper, &Learner::Trefles(config.clone()), &opts)
}

pub fn kfold_cv_with(
    data: &Dataset,
    grouping: &FeatureGrouping,
    hyper: &Hyperparams,
    learner: &Learner,
    opts: &CvOptions,
) -> Result<CvReport> {
    data.validate()?;
    let fold_of = assign_folds(data, opts.folds, opts.seed)?;
    let threads = if opts.threads == 0 { opts.folds } else { opts.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let per_fold: Vec<Result<Vec<f64>>> = pool.install(|| {
        (0..opts.folds)
            .into_par_iter()
            .map(|f| run_fold(data, grouping, hyper, learner, opts, &fold_of, f))
            .collect()
    });
    let per_fold = per_fold.into_iter().collect::<Result<Vec<_>>>()?;

    let per_task = (0..data.n_tasks())
        .map(|k| {
            let fold_aucs: Vec<f64> = per_fold.iter().map(|f| f[k]).collect();
            let (mean_auc, std_auc) = mean_std(&fold_aucs);
            TaskAuc {
                task_name: data.task_names()[k].clone(),
                mean_auc,
                std_auc,
                fold_aucs,
            }
        })
        .collect::<Vec<_>>();
    let fold_means: Vec<f64> = per_fold
        .iter()
        .map(|f| f.iter().sum::<f64>() / f.len() as f64)
        .collect();
    let overall_mean = per_task.iter().map(|t| t.mean_auc).sum::<f64>() / per_task.len() as f64;
    let (_, overall_std) = mean_std(&fold_means);
    Ok(CvReport {
        model: learner.name(),
        per_task,
        overall_mean,
        overall_std,
        folds: opts.folds,
        seed: opts.seed,
    })
}

fn run_fold(
    data: &Dataset,
    grouping: &FeatureGrouping,
    hyper: &Hyperparams,
    learner: &Learner,
    opts: &CvOptions,
    fold_of: &[usize],
    fold: usize,
) -> Result<Vec<f64>> {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.n_patients()).partition(|&i| fold_of[i] == fold);
    let train_data = data.select_rows(&train);
    let preprocess = Preprocess {
        scaling: opts.standardize.then(|| FeatureScaling::fit(train_data.features())),
        intercept: opts.intercept,
    };
    let (train_data, train_groups) = preprocess.apply_dataset(&train_data, grouping)?;
    let model = learner.fit(&train_data, &train_groups, hyper, fold)?;
    let x_test = preprocess.apply(&data.features().select_rows(test.iter()));
    let scores = predict_scores(&model.beta, &x_test);
    (0..data.n_tasks())
        .map(|k| {
            let mut s = Vec::new();
            let mut y = Vec::new();
            for (row, &i) in test.iter().enumerate() {
                if let Some(c) = data.label(i, k) {
                    s.push(scores[(row, k)]);
                    y.push(c);
                }
            }
            auc(&s, &y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sigmoid;
    use nalgebra::DMatrix;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    pub(crate) fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    credit += 1.0;
                } else if si == sj {
                    credit += 0.5;
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::DegenerateLabels)));
    }

    proptest! {
        #[test]
        fn auc_matches_pairs_and_reflects(
            raw in proptest::collection::vec((0u8..12, proptest::bool::ANY), 2..120)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 4.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|(_, l)| u8::from(*l)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auc(&scores, &labels).unwrap();
            prop_assert_eq!(a, pair_count_auc(&scores, &labels));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() <= 1e-12);
            let ex: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let aff: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
            prop_assert_eq!(auc(&ex, &labels).unwrap(), a);
            prop_assert_eq!(auc(&aff, &labels).unwrap(), a);
        }
    }

    fn labelled(seed: u64, n: usize, k: usize, missing: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 4;
        let x = DMatrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0));
        let mut labels = Vec::new();
        for i in 0..n {
            for t in 0..k {
                let p = sigmoid(2.0 * x[(i, t % m)] + x[(i, 3)]);
                labels.push(if rng.random_bool(missing) { None } else { Some(u8::from(rng.random_bool(p))) });
            }
        }
        Dataset::new(
            (0..n).map(|i| format!("p{i}")).collect(),
            x,
            labels,
            (0..m).map(|j| format!("f{j}")).collect(),
            (0..k).map(|t| format!("t{t}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn folds_partition_and_repeat() {
        let data = labelled(1, 101, 3, 0.2);
        let a = assign_folds(&data, 5, 7).unwrap();
        assert_eq!(a, assign_folds(&data, 5, 7).unwrap());
        assert!(a.iter().all(|&f| f < 5));
        let sizes: Vec<usize> = (0..5).map(|f| a.iter().filter(|&&x| x == f).count()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 101);
        assert!(sizes.iter().all(|&s| s == 20 || s == 21));
        assert!(assign_folds(&data, 1, 7).is_err());
    }

    #[test]
    fn rare_task_is_infeasible() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let labels = (0..10).map(|i| Some(u8::from(i == 0))).collect();
        let data = Dataset::new(
            (0..10).map(|i| i.to_string()).collect(),
            x,
            labels,
            vec!["x".into()],
            vec!["rare".into()],
        )
        .unwrap();
        match assign_folds(&data, 2, 0) {
            Err(Error::InfeasibleStratification { task, .. }) => assert_eq!(task, "rare"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cv_report_shape_and_signal() {
        let data = labelled(2, 200, 2, 0.1);
        let g = FeatureGrouping::contiguous(4, 2).unwrap();
        let cfg = TrainConfig {
            max_iter: 30,
            ..TrainConfig::default()
        };
        let report = kfold_cv(&data, &g, &Hyperparams::default_for(2), &cfg, 5, 3).unwrap();
        assert_eq!(report.per_task.len(), 2);
        for t in &report.per_task {
            assert_eq!(t.fold_aucs.len(), 5);
            assert!(t.fold_aucs.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!(t.mean_auc > 0.65, "{}", t.mean_auc);
        }
        let again = kfold_cv(&data, &g, &Hyperparams::default_for(2), &cfg, 5, 3).unwrap();
        assert_eq!(report, again);
        let stl = kfold_cv_with(
            &data,
            &g,
            &Hyperparams::default_for(2),
            &Learner::Stl { l2: 1.0, config: cfg },
            &CvOptions {
                threads: 1,
                intercept: true,
                ..CvOptions::default()
            },
        )
        .unwrap();
        let table = format_table(&[report, stl]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "task\ttrefles\tstl");
        assert!(lines[3].starts_with("overall\t"));
    }
}
