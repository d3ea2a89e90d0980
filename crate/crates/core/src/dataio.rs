//! File formats: datasets, group maps, prior matrices, model archives,
//! score tables and synthetic ground truth.
//!
//! Every writer goes through a temporary file in the target directory and
//! renames it into place, so a failed write never leaves partial output.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::analysis::cov_to_corr;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::{Dataset, FeatureGrouping, FeatureScaling, FittedModel, ModelParams, Preprocess};
use crate::synth::GroundTruth;

pub const FORMAT_VERSION: u32 = 1;
const ARCHIVE_MAGIC: &str = "trefles-model";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` to `path` atomically.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

fn finite(path: &Path, line: usize, column: usize, cell: &str) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(parse_err(path, line, column, format!("non-finite value '{cell}'"))),
        Err(_) => Err(parse_err(path, line, column, format!("'{cell}' is not a number"))),
    }
}

/// Records with their 1-based line numbers; blank lines are skipped.
fn csv_records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, 0, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn csv_bytes(rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for r in rows {
        w.write_record(r)
            .map_err(|e| Error::Validation(format!("cannot encode row: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("cannot encode table: {e}")))
}

/// Patient feature table without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub features: DMatrix<f64>,
}

struct ParsedTable {
    ids: Vec<String>,
    feature_names: Vec<String>,
    task_names: Vec<String>,
    features: DMatrix<f64>,
    labels: Vec<Option<u8>>,
}

fn parse_table(path: &Path) -> Result<ParsedTable> {
    let records = csv_records(path)?;
    let Some((_, header)) = records.first() else {
        return Err(Error::Schema(format!("{} is empty", path.display())));
    };
    if header.first().map(String::as_str) != Some("id") {
        return Err(Error::Schema("first column must be 'id'".into()));
    }
    let mut feature_names = Vec::new();
    let mut task_names = Vec::new();
    for (c, h) in header.iter().enumerate().skip(1) {
        if let Some(name) = h.strip_prefix("f:") {
            if !task_names.is_empty() {
                return Err(Error::Schema(format!("feature column '{h}' follows a label column")));
            }
            feature_names.push(name.to_string());
        } else if let Some(name) = h.strip_prefix("y:") {
            task_names.push(name.to_string());
        } else {
            return Err(Error::Schema(format!(
                "column {} header '{h}' needs an 'f:' or 'y:' prefix",
                c + 1
            )));
        }
    }
    for names in [&feature_names, &task_names] {
        let mut seen = std::collections::HashSet::new();
        if let Some(d) = names.iter().find(|n| !seen.insert(*n)) {
            return Err(Error::Schema(format!("duplicate column name '{d}'")));
        }
    }
    let (m, k) = (feature_names.len(), task_names.len());
    let rows = &records[1..];
    let mut ids = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * m);
    let mut labels = Vec::with_capacity(rows.len() * k);
    for (line, rec) in rows {
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                *line,
                rec.len().min(header.len()) + 1,
                format!("expected {} cells, found {}", header.len(), rec.len()),
            ));
        }
        ids.push(rec[0].clone());
        for c in 0..m {
            values.push(finite(path, *line, c + 2, &rec[c + 1])?);
        }
        for t in 0..k {
            let cell = rec[1 + m + t].as_str();
            labels.push(match cell {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => {
                    return Err(parse_err(
                        path,
                        *line,
                        m + t + 2,
                        format!("label '{other}' for task '{}' must be 0, 1 or empty", task_names[t]),
                    ))
                }
            });
        }
    }
    let features = DMatrix::from_row_slice(ids.len(), m, &values);
    Ok(ParsedTable {
        ids,
        feature_names,
        task_names,
        features,
        labels,
    })
}

/// Header `id,f:<name>...,y:<task>...`; label cells are `0`, `1` or empty.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let t = parse_table(path)?;
    Dataset::new(t.ids, t.features, t.labels, t.feature_names, t.task_names)
}

/// Reads only the id and feature columns of a dataset file; label columns
/// are optional and ignored.
pub fn load_features(path: &Path) -> Result<FeatureTable> {
    let t = parse_table(path)?;
    Ok(FeatureTable {
        ids: t.ids,
        feature_names: t.feature_names,
        features: t.features,
    })
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut header = vec!["id".to_string()];
    header.extend(data.feature_names().iter().map(|n| format!("f:{n}")));
    header.extend(data.task_names().iter().map(|n| format!("y:{n}")));
    let mut rows = vec![header];
    for i in 0..data.n_patients() {
        let mut row = vec![data.ids()[i].clone()];
        row.extend(data.features().row(i).iter().map(|v| fmt_f64(*v)));
        row.extend((0..data.n_tasks()).map(|k| data.label(i, k).map_or(String::new(), |c| c.to_string())));
        rows.push(row);
    }
    write_atomic(path, &csv_bytes(&rows)?)
}

/// Two columns `feature,group`; groups are numbered by first appearance.
pub fn load_groups(path: &Path, feature_names: &[String]) -> Result<FeatureGrouping> {
    let records = csv_records(path)?;
    let Some((_, header)) = records.first() else {
        return Err(Error::Schema(format!("{} is empty", path.display())));
    };
    if header.len() != 2 || header[0] != "feature" || header[1] != "group" {
        return Err(Error::Schema("group map header must be 'feature,group'".into()));
    }
    let index: HashMap<&str, usize> = feature_names.iter().enumerate().map(|(j, n)| (n.as_str(), j)).collect();
    let mut group_ids: HashMap<String, usize> = HashMap::new();
    let mut group_of: Vec<Option<usize>> = vec![None; feature_names.len()];
    for (line, rec) in &records[1..] {
        if rec.len() != 2 {
            return Err(parse_err(path, *line, 1, format!("expected 2 cells, found {}", rec.len())));
        }
        let j = *index
            .get(rec[0].as_str())
            .ok_or_else(|| Error::UnknownFeature(rec[0].clone()))?;
        if group_of[j].is_some() {
            return Err(Error::DuplicateFeature(rec[0].clone()));
        }
        let next = group_ids.len();
        group_of[j] = Some(*group_ids.entry(rec[1].clone()).or_insert(next));
    }
    let group_of = group_of
        .iter()
        .enumerate()
        .map(|(j, g)| g.ok_or_else(|| Error::MissingFeature(feature_names[j].clone())))
        .collect::<Result<Vec<_>>>()?;
    FeatureGrouping::new(group_of)
}

/// Writes a group map labelling group `z` as `g<z>`.
pub fn save_groups(grouping: &FeatureGrouping, feature_names: &[String], path: &Path) -> Result<()> {
    let mut rows = vec![vec!["feature".to_string(), "group".to_string()]];
    for (name, z) in feature_names.iter().zip(grouping.group_of()) {
        rows.push(vec![name.clone(), format!("g{z}")]);
    }
    write_atomic(path, &csv_bytes(&rows)?)
}

fn load_named_square(path: &Path, names: &[String]) -> Result<DMatrix<f64>> {
    let records = csv_records(path)?;
    let Some((_, header)) = records.first() else {
        return Err(Error::Schema(format!("{} is empty", path.display())));
    };
    let cols: Vec<String> = header.iter().skip(1).cloned().collect();
    let k = names.len();
    if cols.len() != k || records.len() - 1 != k {
        return Err(Error::dims("task matrix size", k, cols.len().max(records.len() - 1)));
    }
    let pos = |n: &str| -> Result<usize> {
        names
            .iter()
            .position(|t| t == n)
            .ok_or_else(|| Error::Schema(format!("unknown task '{n}' in matrix header")))
    };
    let col_pos = cols.iter().map(|c| pos(c)).collect::<Result<Vec<_>>>()?;
    let mut out = DMatrix::from_element(k, k, f64::NAN);
    for (line, rec) in &records[1..] {
        if rec.len() != k + 1 {
            return Err(parse_err(path, *line, 1, format!("expected {} cells, found {}", k + 1, rec.len())));
        }
        let i = pos(&rec[0])?;
        if !out[(i, 0)].is_nan() {
            return Err(Error::Schema(format!("task '{}' appears twice", rec[0])));
        }
        for (c, &j) in col_pos.iter().enumerate() {
            out[(i, j)] = finite(path, *line, c + 2, &rec[c + 1])?;
        }
    }
    Ok(out)
}

fn save_named_square(m: &DMatrix<f64>, names: &[String], path: &Path) -> Result<()> {
    let mut header = vec!["task".to_string()];
    header.extend(names.iter().cloned());
    let mut rows = vec![header];
    for (i, n) in names.iter().enumerate() {
        let mut row = vec![n.clone()];
        row.extend(m.row(i).iter().map(|v| fmt_f64(*v)));
        rows.push(row);
    }
    write_atomic(path, &csv_bytes(&rows)?)
}

/// Prior task-relatedness matrix with a header row and column of task
/// names, reordered to `task_names`. `None` gives the identity.
pub fn load_omega0(path: Option<&Path>, task_names: &[String]) -> Result<SymMatrix> {
    let Some(path) = path else {
        return Ok(SymMatrix::identity(task_names.len()));
    };
    let m = load_named_square(path, task_names)?;
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let difference = (m[(i, j)] - m[(j, i)]).abs();
            if difference > 1e-9 {
                return Err(Error::AsymmetricMatrix { row: i, col: j, difference });
            }
        }
    }
    let s = SymMatrix::new(m)?;
    let min = s.eigenvalues()[0];
    if min < -1e-10 * s.eigenvalues()[k - 1].abs().max(1.0) {
        return Err(Error::NonPsd { min_eigenvalue: min });
    }
    Ok(s)
}

pub fn save_task_matrix(m: &SymMatrix, task_names: &[String], path: &Path) -> Result<()> {
    save_named_square(m.matrix(), task_names, path)
}

/// Score table `id,<task>...`.
pub fn save_scores(ids: &[String], task_names: &[String], scores: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut header = vec!["id".to_string()];
    header.extend(task_names.iter().cloned());
    let mut rows = vec![header];
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(scores.row(i).iter().map(|v| fmt_f64(*v)));
        rows.push(row);
    }
    write_atomic(path, &csv_bytes(&rows)?)
}

/// Coefficient table `feature,<task>...`.
pub fn save_coefficients(
    beta: &DMatrix<f64>,
    feature_names: &[String],
    task_names: &[String],
    path: &Path,
) -> Result<()> {
    let mut header = vec!["feature".to_string()];
    header.extend(task_names.iter().cloned());
    let mut rows = vec![header];
    for (j, f) in feature_names.iter().enumerate() {
        let mut row = vec![f.clone()];
        row.extend(beta.row(j).iter().map(|v| fmt_f64(*v)));
        rows.push(row);
    }
    write_atomic(path, &csv_bytes(&rows)?)
}

pub fn load_coefficients(path: &Path) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let records = csv_records(path)?;
    let Some((_, header)) = records.first() else {
        return Err(Error::Schema(format!("{} is empty", path.display())));
    };
    if header.first().map(String::as_str) != Some("feature") {
        return Err(Error::Schema("first column must be 'feature'".into()));
    }
    let tasks: Vec<String> = header[1..].to_vec();
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in &records[1..] {
        if rec.len() != header.len() {
            return Err(parse_err(path, *line, 1, format!("expected {} cells", header.len())));
        }
        names.push(rec[0].clone());
        for c in 1..rec.len() {
            values.push(finite(path, *line, c + 1, &rec[c])?);
        }
    }
    let beta = DMatrix::from_row_slice(names.len(), tasks.len(), &values);
    Ok((names, tasks, beta))
}

/// Writes `<prefix>.data.csv`, `<prefix>.groups.csv`, `<prefix>.beta.csv`
/// and `<prefix>.omega.csv`.
pub fn save_simulation(
    data: &Dataset,
    grouping: &FeatureGrouping,
    truth: &GroundTruth,
    prefix: &str,
) -> Result<Vec<std::path::PathBuf>> {
    let paths: Vec<std::path::PathBuf> = ["data", "groups", "beta", "omega"]
        .iter()
        .map(|s| format!("{prefix}.{s}.csv").into())
        .collect();
    save_dataset(data, &paths[0])?;
    save_groups(grouping, data.feature_names(), &paths[1])?;
    save_coefficients(&truth.beta_true, data.feature_names(), data.task_names(), &paths[2])?;
    save_task_matrix(&truth.omega_true, data.task_names(), &paths[3])?;
    Ok(paths)
}

fn check_token(s: &str) -> Result<&str> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::Validation(format!("name '{s}' cannot be stored in a model archive")));
    }
    Ok(s)
}

struct ArchiveWriter {
    out: String,
}

impl ArchiveWriter {
    fn line(&mut self, key: &str, values: impl IntoIterator<Item = String>) {
        self.out.push_str(key);
        for v in values {
            self.out.push('\t');
            self.out.push_str(&v);
        }
        self.out.push('\n');
    }

    fn matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.line(
            "matrix",
            [name.to_string(), m.nrows().to_string(), m.ncols().to_string()],
        );
        for i in 0..m.nrows() {
            self.line("row", m.row(i).iter().map(|v| fmt_f64(*v)));
        }
    }
}

pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    for n in model.feature_names.iter().chain(&model.task_names) {
        check_token(n)?;
    }
    for (k, v) in &model.metadata {
        check_token(k)?;
        check_token(v)?;
    }
    let p = &model.params;
    let mut w = ArchiveWriter { out: String::new() };
    w.line(ARCHIVE_MAGIC, []);
    w.line("format_version", [FORMAT_VERSION.to_string()]);
    w.line(
        "dims",
        [
            model.n_features().to_string(),
            model.n_tasks().to_string(),
            model.grouping.n_groups().to_string(),
        ],
    );
    w.line("feature_names", model.feature_names.iter().cloned());
    w.line("task_names", model.task_names.iter().cloned());
    w.line("group_of", model.grouping.group_of().iter().map(|z| z.to_string()));
    w.line("tau", [fmt_f64(p.tau)]);
    w.line("intercept", [model.preprocess.intercept.to_string()]);
    match &model.preprocess.scaling {
        Some(s) => {
            w.line("scaling_mean", s.mean.iter().map(|v| fmt_f64(*v)));
            w.line("scaling_scale", s.scale.iter().map(|v| fmt_f64(*v)));
        }
        None => w.line("scaling_none", []),
    }
    for (z, b) in p.w_blocks.iter().enumerate() {
        w.matrix(&format!("w_block_{z}"), b);
    }
    w.matrix("u", &p.u);
    w.matrix("omega", p.omega.matrix());
    for (z, s) in p.sigma_blocks.iter().enumerate() {
        w.matrix(&format!("sigma_block_{z}"), s.matrix());
    }
    w.matrix("beta", &model.beta);
    w.matrix("lambda", &model.lambda);
    w.matrix("model_omega", model.omega.matrix());
    w.matrix("corr", model.corr.matrix());
    for (k, v) in &model.metadata {
        w.line("meta", [k.clone(), v.clone()]);
    }
    for (epoch, v) in &model.history {
        w.line("history", [epoch.to_string(), fmt_f64(*v)]);
    }
    w.line("end", []);
    write_atomic(path, w.out.as_bytes())
}

struct ArchiveReader<'a> {
    path: &'a Path,
    lines: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
}

impl<'a> ArchiveReader<'a> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        parse_err(self.path, line, 1, msg)
    }

    fn next(&mut self) -> Result<(usize, Vec<&'a str>)> {
        let last = self.lines.last().map_or(1, |l| l.0);
        let item = self
            .lines
            .get(self.pos)
            .cloned()
            .ok_or_else(|| self.err(last + 1, "unexpected end of archive"))?;
        self.pos += 1;
        Ok(item)
    }

    fn expect(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, fields) = self.next()?;
        if fields[0] != key {
            return Err(self.err(line, format!("expected '{key}', found '{}'", fields[0])));
        }
        Ok((line, fields[1..].to_vec()))
    }

    fn peek_key(&self) -> Option<&'a str> {
        self.lines.get(self.pos).map(|l| l.1[0])
    }

    fn usize(&self, line: usize, s: &str) -> Result<usize> {
        s.parse().map_err(|_| self.err(line, format!("'{s}' is not a count")))
    }

    fn floats(&self, line: usize, cells: &[&str]) -> Result<Vec<f64>> {
        cells
            .iter()
            .enumerate()
            .map(|(c, s)| finite(self.path, line, c + 2, s))
            .collect()
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let (line, f) = self.expect("matrix")?;
        if f.len() != 3 || f[0] != name {
            return Err(self.err(line, format!("expected matrix '{name}'")));
        }
        let rows = self.usize(line, f[1])?;
        let cols = self.usize(line, f[2])?;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (line, cells) = self.expect("row")?;
            if cells.len() != cols {
                return Err(self.err(line, format!("expected {cols} values, found {}", cells.len())));
            }
            values.extend(self.floats(line, &cells)?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }

    fn sym(&mut self, name: &str) -> Result<SymMatrix> {
        let m = self.matrix(name)?;
        if m != m.transpose() {
            return Err(Error::Validation(format!("archived matrix '{name}' is not symmetric")));
        }
        SymMatrix::new(m)
    }
}

/// Reads a model archive. Truncated or malformed files are rejected
/// before any model is returned.
pub fn load_model(path: &Path) -> Result<FittedModel> {
    let text = read_text(path)?;
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
        .collect();
    let mut r = ArchiveReader { path, lines, pos: 0 };
    r.expect(ARCHIVE_MAGIC)?;
    let (line, v) = r.expect("format_version")?;
    let found: u32 = v
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| r.err(line, "missing format version"))?;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let (line, dims) = r.expect("dims")?;
    if dims.len() != 3 {
        return Err(r.err(line, "dims needs M, K and Z"));
    }
    let (m, k, z) = (r.usize(line, dims[0])?, r.usize(line, dims[1])?, r.usize(line, dims[2])?);
    let feature_names: Vec<String> = r.expect("feature_names")?.1.iter().map(|s| s.to_string()).collect();
    let task_names: Vec<String> = r.expect("task_names")?.1.iter().map(|s| s.to_string()).collect();
    let (line, g) = r.expect("group_of")?;
    let group_of = g.iter().map(|s| r.usize(line, s)).collect::<Result<Vec<_>>>()?;
    if feature_names.len() != m || task_names.len() != k || group_of.len() != m {
        return Err(r.err(line, "names or groups disagree with dims"));
    }
    let grouping = FeatureGrouping::new(group_of)?;
    if grouping.n_groups() != z {
        return Err(r.err(line, "group count disagrees with dims"));
    }
    let (line, t) = r.expect("tau")?;
    let tau = *r.floats(line, &t)?.first().ok_or_else(|| r.err(line, "missing tau"))?;
    let (line, ic) = r.expect("intercept")?;
    let intercept = match ic.first().copied() {
        Some("true") => true,
        Some("false") => false,
        _ => return Err(r.err(line, "intercept must be true or false")),
    };
    let scaling = if r.peek_key() == Some("scaling_none") {
        r.expect("scaling_none")?;
        None
    } else {
        let (l1, mean) = r.expect("scaling_mean")?;
        let mean = r.floats(l1, &mean)?;
        let (l2, scale) = r.expect("scaling_scale")?;
        let scale = r.floats(l2, &scale)?;
        Some(FeatureScaling { mean, scale })
    };
    let w_blocks = (0..z)
        .map(|i| r.matrix(&format!("w_block_{i}")))
        .collect::<Result<Vec<_>>>()?;
    let u = r.matrix("u")?;
    let omega = r.sym("omega")?;
    let sigma_blocks = (0..z)
        .map(|i| r.sym(&format!("sigma_block_{i}")))
        .collect::<Result<Vec<_>>>()?;
    let beta = r.matrix("beta")?;
    let lambda = r.matrix("lambda")?;
    let model_omega = r.sym("model_omega")?;
    let corr = r.sym("corr")?;
    let mut metadata = Vec::new();
    let mut history = Vec::new();
    loop {
        let (line, f) = r.next()?;
        match f[0] {
            "meta" if f.len() == 3 => metadata.push((f[1].to_string(), f[2].to_string())),
            "history" if f.len() == 3 => {
                let v = finite(path, line, 3, f[2])?;
                history.push((r.usize(line, f[1])?, v));
            }
            "end" => break,
            other => return Err(r.err(line, format!("unexpected entry '{other}'"))),
        }
    }
    if r.pos != r.lines.len() {
        return Err(r.err(r.lines[r.pos].0, "content after end marker"));
    }

    let params = ModelParams {
        w_blocks,
        u,
        tau,
        omega,
        sigma_blocks,
    };
    params.check(&grouping)?;
    if beta.shape() != (m, k) || lambda.shape() != (m, k) || model_omega.dim() != k || corr.dim() != k {
        return Err(Error::Validation("archived derived matrices have the wrong shape".into()));
    }
    if let Some(s) = &scaling {
        let raw = m - usize::from(intercept);
        if s.mean.len() != raw || s.scale.len() != raw {
            return Err(Error::dims("scaling columns", raw, s.mean.len()));
        }
    }
    cov_to_corr(&model_omega)?;
    Ok(FittedModel {
        beta,
        lambda,
        omega: model_omega,
        corr,
        params,
        history,
        feature_names,
        task_names,
        grouping,
        preprocess: Preprocess { scaling, intercept },
        metadata,
    })
}
