//! Command-line interface.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{cut, hcluster, top_k_indices, RankBy};
use crate::dataio::{
    fmt_f64, load_dataset, load_features, load_groups, load_model, load_omega0, save_model, save_scores,
    save_simulation, write_atomic,
};
use crate::error::{Error, Result};
use crate::evaluation::{format_table, kfold_cv_with, CvOptions, Learner};
use crate::model::{predict_all, FeatureScaling, Hyperparams, Preprocess, INTERCEPT_NAME};
use crate::synth::{generate, SynthSpec};
use crate::trainer::{fit, Ablation, BatchMode, OptimizerKind, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "trefles", version, about = "Multi-task risk modeling with correlated shrinkage")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Repeat for more log output on standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Cap on concurrently running cross-validation folds.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and save it.
    Fit(FitArgs),
    /// Score patients with a saved model.
    Predict(PredictArgs),
    /// Cross-validated AUC for the model and requested baselines.
    Cv(CvArgs),
    /// Draw a synthetic cohort with known coefficients.
    Simulate(SimulateArgs),
    /// Task correlations, clustering and top risk factors of a saved model.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BatchArg {
    Stochastic,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub groups: PathBuf,
    /// Prior task-relatedness matrix; identity when omitted.
    #[arg(long)]
    pub omega0: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Inverse-Wishart degrees of freedom; defaults to K + 2.
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = BatchArg::Stochastic)]
    pub batch_mode: BatchArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Full prior gradient on every sampled instance.
    #[arg(long)]
    pub paper_sgd_scaling: bool,
    /// Keep continuous features on their raw scale.
    #[arg(long)]
    pub no_standardize: bool,
    /// Add an intercept column in its own group.
    #[arg(long)]
    pub intercept: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Comma-separated subset of no_shrinkage, identity_sigma, independent_tasks.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub folds: u64,
    /// Comma-separated: stl, no_shrinkage, identity_sigma, independent_tasks, ablations.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Ridge penalty of the single-task baseline.
    #[arg(long, default_value_t = 1.0)]
    pub l2: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `key = value` lines; flags given on the command line override it.
    #[arg(long)]
    pub spec_file: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long = "n-groups")]
    pub n_groups: Option<usize>,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub signal_scale: Option<f64>,
    #[arg(long)]
    pub feature_corr: Option<f64>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long)]
    pub shared_support: bool,
    /// identity, equicorr:<r> or two_block:<within>:<across>.
    #[arg(long)]
    pub omega: Option<String>,
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RankArg {
    Value,
    Magnitude,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, value_enum, default_value_t = RankArg::Value)]
    pub rank_by: RankArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(&cli) {
        Ok(text) => {
            if out.write_all(text.as_bytes()).is_err() {
                return EXIT_DATA;
            }
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn dispatch(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Predict(a) => cmd_predict(a),
        Command::Cv(a) => cmd_cv(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

struct Prepared {
    data: crate::model::Dataset,
    grouping: crate::model::FeatureGrouping,
    hyper: Hyperparams,
    config: TrainConfig,
}

fn prepare(cli: &Cli, inputs: &ModelInputs) -> Result<Prepared> {
    let data = load_dataset(&inputs.data)?;
    let grouping = load_groups(&inputs.groups, data.feature_names())?;
    let omega0 = load_omega0(inputs.omega0.as_deref(), data.task_names())?;
    let nu = inputs.nu.unwrap_or(data.n_tasks() as f64 + 2.0);
    let hyper = Hyperparams::new(omega0, inputs.delta, nu)?;
    let config = TrainConfig {
        learning_rate: inputs.lr,
        max_iter: inputs.max_iter,
        tol: inputs.tol,
        batch_mode: match inputs.batch_mode {
            BatchArg::Stochastic => BatchMode::Stochastic,
            BatchArg::Full => BatchMode::FullBatch,
        },
        optimizer: match inputs.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::PlainSgd,
        },
        paper_sgd_scaling: inputs.paper_sgd_scaling,
        seed: cli.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    Ok(Prepared {
        data,
        grouping,
        hyper,
        config,
    })
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> Result<String> {
    let mut p = prepare(cli, &a.inputs)?;
    if let Some(s) = &a.ablation {
        p.config.ablation = s.parse()?;
    }
    let preprocess = Preprocess {
        scaling: (!a.inputs.no_standardize).then(|| FeatureScaling::fit(p.data.features())),
        intercept: a.inputs.intercept,
    };
    let (data, grouping) = preprocess.apply_dataset(&p.data, &p.grouping)?;
    let (mut model, report) = fit(&data, &grouping, &p.hyper, &p.config)?;
    model.preprocess = preprocess;
    model.metadata.push(("delta".into(), p.hyper.delta.to_string()));
    model.metadata.push(("nu".into(), p.hyper.nu.to_string()));
    save_model(&model, &a.out)?;
    log::info!("fit finished in {:.2}s", report.wall_time_seconds);
    let mut s = String::new();
    let _ = writeln!(s, "model\t{}", a.out.display());
    let _ = writeln!(s, "epochs\t{}", report.iterations_run);
    let _ = writeln!(s, "converged\t{}", report.converged);
    let _ = writeln!(s, "final_objective\t{}", fmt_f64(report.final_objective));
    let _ = writeln!(s, "tau\t{}", fmt_f64(model.params.tau));
    Ok(s)
}

fn cmd_predict(a: &PredictArgs) -> Result<String> {
    let model = load_model(&a.model)?;
    let table = load_features(&a.data)?;
    let expected: Vec<&String> = model
        .feature_names
        .iter()
        .take(model.preprocess.n_raw_features(model.n_features()))
        .collect();
    if table.feature_names.len() != expected.len() {
        return Err(Error::dims("feature columns", expected.len(), table.feature_names.len()));
    }
    if let Some((got, want)) = table.feature_names.iter().zip(&expected).find(|(g, w)| g != *w) {
        return Err(Error::Schema(format!("feature column '{got}' where the model expects '{want}'")));
    }
    let scores = predict_all(&model, &table.features)?;
    save_scores(&table.ids, &model.task_names, &scores, &a.out)?;
    Ok(format!("scores\t{}\npatients\t{}\n", a.out.display(), table.ids.len()))
}

fn learners(base: &TrainConfig, baseline: Option<&str>, l2: f64) -> Result<Vec<Learner>> {
    let mut out = vec![Learner::Trefles(base.clone())];
    let with = |ablation: Ablation| {
        Learner::Trefles(TrainConfig {
            ablation,
            ..base.clone()
        })
    };
    for item in baseline.unwrap_or("").split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let add: Vec<Learner> = match item {
            "trefles" => vec![],
            "stl" => vec![Learner::Stl {
                l2,
                config: base.clone(),
            }],
            "ablations" | "trefles-ablations" | "treffles-ablations" => ["no_shrinkage", "identity_sigma", "independent_tasks"]
                .iter()
                .map(|s| with(s.parse().expect("known ablation")))
                .collect(),
            other => vec![with(other.parse()?)],
        };
        for l in add {
            if !out.contains(&l) {
                out.push(l);
            }
        }
    }
    Ok(out)
}

fn cmd_cv(cli: &Cli, a: &CvArgs) -> Result<String> {
    let p = prepare(cli, &a.inputs)?;
    let opts = CvOptions {
        folds: a.folds as usize,
        seed: cli.seed,
        threads: cli.threads.unwrap_or(0),
        standardize: !a.inputs.no_standardize,
        intercept: a.inputs.intercept,
    };
    let reports = learners(&p.config, a.baseline.as_deref(), a.l2)?
        .iter()
        .map(|l| kfold_cv_with(&p.data, &p.grouping, &p.hyper, l, &opts))
        .collect::<Result<Vec<_>>>()?;
    let table = format_table(&reports);
    if let Some(path) = &a.out {
        write_atomic(path, table.as_bytes())?;
    }
    Ok(table)
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<String> {
    let mut spec = SynthSpec::new(4, 20, 4, 500);
    if let Some(path) = &a.spec_file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        spec.apply_kv(&text)?;
    }
    let mut set = |key: &str, v: Option<String>| -> Result<()> {
        match v {
            Some(v) => spec.set(key, &v),
            None => Ok(()),
        }
    };
    set("n_tasks", a.tasks.map(|v| v.to_string()))?;
    set("n_features", a.features.map(|v| v.to_string()))?;
    set("n_groups", a.n_groups.map(|v| v.to_string()))?;
    set("n_patients", a.patients.map(|v| v.to_string()))?;
    set("sparsity", a.sparsity.map(|v| v.to_string()))?;
    set("signal_scale", a.signal_scale.map(|v| v.to_string()))?;
    set("feature_corr", a.feature_corr.map(|v| v.to_string()))?;
    set("missing_rate", a.missing_rate.map(|v| v.to_string()))?;
    set("omega", a.omega.clone())?;
    if a.shared_support {
        spec.shared_support = true;
    }
    spec.seed = cli.seed;
    let (data, grouping, truth) = generate(&spec)?;
    let paths = save_simulation(&data, &grouping, &truth, &a.out_prefix)?;
    let mut s = String::new();
    for (label, p) in ["data", "groups", "beta", "omega"].iter().zip(&paths) {
        let _ = writeln!(s, "{label}\t{}", p.display());
    }
    Ok(s)
}

fn matrix_text(names: &[String], m: &nalgebra::DMatrix<f64>) -> String {
    let mut s = String::from("task");
    for n in names {
        let _ = write!(s, "\t{n}");
    }
    s.push('\n');
    for (i, n) in names.iter().enumerate() {
        s.push_str(n);
        for v in m.row(i).iter() {
            let _ = write!(s, "\t{v:.6}");
        }
        s.push('\n');
    }
    s
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<String> {
    let model = load_model(&a.model)?;
    let k = model.n_tasks();
    let mut s = String::from("# correlation\n");
    s.push_str(&matrix_text(&model.task_names, model.corr.matrix()));
    s.push_str("# dendrogram\n");
    if k < 2 {
        s.push_str("note\ta single task has no dendrogram\n");
    } else {
        let d = hcluster(&model.corr, &model.task_names);
        s.push_str(&d.to_text());
        if let Some(n) = a.clusters {
            let labels = cut(&d, n)?;
            let _ = writeln!(s, "# clusters {n}");
            s.push_str("task\tcluster\n");
            for (name, l) in model.task_names.iter().zip(labels) {
                let _ = writeln!(s, "{name}\t{l}");
            }
        }
    }
    let rank_by = match a.rank_by {
        RankArg::Value => RankBy::Value,
        RankArg::Magnitude => RankBy::Magnitude,
    };
    let features: Vec<usize> = (0..model.n_features())
        .filter(|&j| model.feature_names[j] != INTERCEPT_NAME)
        .collect();
    for (t, task) in model.task_names.iter().enumerate() {
        let _ = writeln!(s, "# top {} {task}", a.top);
        s.push_str("rank\tfeature\tcoefficient\n");
        let col: Vec<f64> = features.iter().map(|&j| model.beta[(j, t)]).collect();
        for (r, i) in top_k_indices(&col, a.top, rank_by).into_iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{:.6}", r + 1, model.feature_names[features[i]], col[i]);
        }
    }
    if let Some(path) = &a.out {
        write_atomic(path, s.as_bytes())?;
    }
    Ok(s)
}

