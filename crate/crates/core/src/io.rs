//! CSV ingestion, run configuration, chain persistence and effect export.
//!
//! Survival table columns: `id`, `time`, `event` (0/1) followed by baseline
//! covariates. Longitudinal table columns: `id`, `time`, `y` followed by
//! time-varying covariates. Chain files are tidy CSV with one scalar per row
//! (`iteration,block,index,value`) preceded by a `# config_hash=` line.

use crate::data::{Column, Covariates, Dataset};
use crate::error::{Error, Result};
use crate::estimation::{average_slope, FitResult, McmcConfig, ModeFitConfig, SampleChain, ScalarSummary};
use crate::simulation::{SimSetting, Simulated, Truth, TruthTables};
use crate::model::{JointModel, JointModelSpec, Predictor, TermKind, G2};
use crate::spline::quantile_sorted;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const SURV_KEYS: [&str; 3] = ["id", "time", "event"];
const LONG_KEYS: [&str; 3] = ["id", "time", "y"];

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), r + 1)))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

fn key_columns(path: &Path, headers: &[String], keys: &[&str]) -> Result<Vec<usize>> {
    keys.iter()
        .map(|k| {
            headers.iter().position(|h| h == k).ok_or_else(|| {
                Error::Data(format!("{}: missing required column `{k}`", path.display()))
            })
        })
        .collect()
}

fn parse_num(path: &Path, row: usize, col: &str, cell: &str) -> Result<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        Error::Data(format!(
            "{}: row {}: column `{col}` is not a finite number (`{cell}`)",
            path.display(),
            row + 1
        ))
    })
}

fn covariates(headers: &[String], rows: &[Vec<String>], skip: &[usize]) -> Covariates {
    let mut cov = Covariates::default();
    for (c, name) in headers.iter().enumerate() {
        if skip.contains(&c) {
            continue;
        }
        let cells: Vec<String> = rows.iter().map(|r| r[c].clone()).collect();
        cov.push(name.clone(), Column::from_strings(&cells));
    }
    cov
}

/// Reads and validates the survival and longitudinal tables.
pub fn load_dataset(surv_path: &Path, long_path: &Path) -> Result<Dataset> {
    let (sh, srows) = read_table(surv_path)?;
    let sk = key_columns(surv_path, &sh, &SURV_KEYS)?;
    let mut index = HashMap::new();
    let mut ids = Vec::with_capacity(srows.len());
    let mut surv_time = Vec::with_capacity(srows.len());
    let mut event = Vec::with_capacity(srows.len());
    for (r, row) in srows.iter().enumerate() {
        let id = row[sk[0]].clone();
        if index.insert(id.clone(), r).is_some() {
            return Err(Error::Data(format!(
                "{}: row {}: duplicate subject id `{id}`",
                surv_path.display(),
                r + 1
            )));
        }
        ids.push(id);
        surv_time.push(parse_num(surv_path, r, "time", &row[sk[1]])?);
        event.push(match row[sk[2]].as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Data(format!(
                    "{}: row {}: event must be 0 or 1 (`{other}`)",
                    surv_path.display(),
                    r + 1
                )))
            }
        });
    }
    let baseline = covariates(&sh, &srows, &sk);
    let (lh, lrows) = read_table(long_path)?;
    let lk = key_columns(long_path, &lh, &LONG_KEYS)?;
    let mut long_subject = Vec::with_capacity(lrows.len());
    let mut long_time = Vec::with_capacity(lrows.len());
    let mut y = Vec::with_capacity(lrows.len());
    for (r, row) in lrows.iter().enumerate() {
        let id = &row[lk[0]];
        let s = *index.get(id).ok_or_else(|| {
            Error::Data(format!(
                "{}: row {}: subject `{id}` is not in the survival table",
                long_path.display(),
                r + 1
            ))
        })?;
        let t = parse_num(long_path, r, "time", &row[lk[1]])?;
        if t < 0.0 || t > surv_time[s] {
            return Err(Error::Data(format!(
                "{}: row {}: time {t} outside [0, {}] for subject `{id}`",
                long_path.display(),
                r + 1,
                surv_time[s]
            )));
        }
        long_subject.push(s);
        long_time.push(t);
        y.push(parse_num(long_path, r, "y", &row[lk[2]])?);
    }
    let long_covariates = covariates(&lh, &lrows, &lk);
    Dataset::new(ids, surv_time, event, baseline, long_subject, long_time, y, long_covariates)
}

fn cell(c: &Column, r: usize) -> String {
    match c {
        Column::Numeric(v) => format!("{}", v[r]),
        Column::Factor { levels, codes } => levels[codes[r]].clone(),
    }
}

/// Writes a dataset in the format read by [`load_dataset`].
pub fn write_dataset(data: &Dataset, surv_path: &Path, long_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(surv_path)?;
    let mut header: Vec<String> = SURV_KEYS.iter().map(|s| s.to_string()).collect();
    header.extend(data.baseline.names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n_subjects() {
        let mut rec = vec![
            data.ids[i].clone(),
            format!("{}", data.surv_time[i]),
            if data.event[i] { "1" } else { "0" }.to_string(),
        ];
        rec.extend(data.baseline.columns.iter().map(|c| cell(c, i)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(long_path)?;
    let mut header: Vec<String> = LONG_KEYS.iter().map(|s| s.to_string()).collect();
    header.extend(data.long_covariates.names.iter().cloned());
    w.write_record(&header)?;
    for r in 0..data.n_obs() {
        let mut rec = vec![
            data.ids[data.long_subject[r]].clone(),
            format!("{}", data.long_time[r]),
            format!("{}", data.y[r]),
        ];
        rec.extend(data.long_covariates.columns.iter().map(|c| cell(c, r)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a fit needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: JointModelSpec,
    #[serde(default)]
    pub mode: ModeFitConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
}

impl RunConfig {
    pub fn new(model: JointModelSpec) -> Self {
        Self {
            model,
            mode: ModeFitConfig::default(),
            mcmc: McmcConfig::default(),
        }
    }

    /// SHA-256 of the canonical JSON form, so formatting and key order in
    /// the source file do not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn smooth_keys() -> [&'static str; 3] {
    ["n_basis", "degree", "diff_order"]
}

fn allowed_keys(kind: &str) -> Option<Vec<&'static str>> {
    let mut keys = vec!["kind"];
    match kind {
        "intercept" | "random_intercept" | "identity" | "constant" => {}
        "linear_covariate" | "covariate" | "group_factor" => keys.push("covariate"),
        "pspline_covariate" | "time_varying_covariate" => {
            keys.push("covariate");
            keys.extend(smooth_keys());
        }
        "pspline_time" | "functional_random_intercept" | "pspline" => keys.extend(smooth_keys()),
        _ => return None,
    }
    Some(keys)
}

fn check_keys(table: &toml::Table, context: &str) -> Result<()> {
    let kind = table
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::Config(format!("{context}: missing `kind`")))?;
    let keys = allowed_keys(kind)
        .ok_or_else(|| Error::Config(format!("{context}: unknown kind `{kind}`")))?;
    for k in table.keys() {
        if !keys.contains(&k.as_str()) {
            return Err(Error::Config(format!(
                "{context}: unknown key `{k}` for kind `{kind}`"
            )));
        }
    }
    Ok(())
}

/// Parses a TOML run configuration. Missing sections take their defaults;
/// the `[model.alpha]` association section is mandatory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(model) = value.get("model").and_then(|m| m.as_table()) {
        for p in ["lambda", "gamma", "mu", "sigma"] {
            if let Some(terms) = model.get(p).and_then(|t| t.as_array()) {
                for (j, t) in terms.iter().enumerate() {
                    let t = t
                        .as_table()
                        .ok_or_else(|| Error::Config(format!("model.{p}[{j}] must be a table")))?;
                    check_keys(t, &format!("model.{p}[{j}]"))?;
                }
            }
        }
        match model.get("alpha").and_then(|a| a.as_table()) {
            Some(alpha) if !alpha.is_empty() => {
                for (part, t) in alpha {
                    let t = t
                        .as_table()
                        .ok_or_else(|| Error::Config(format!("model.alpha.{part} must be a table")))?;
                    check_keys(t, &format!("model.alpha.{part}"))?;
                }
            }
            _ => {
                return Err(Error::Config(
                    "the association section [model.alpha] is required".into(),
                ))
            }
        }
    } else {
        return Err(Error::Config("missing [model] section".into()));
    }
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.model.validate()?;
    cfg.mode.validate()?;
    cfg.mcmc.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Writes `contents` to `path` through a temporary sibling file and a
/// rename, so a failed run never leaves a partial file behind.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = fs::File::create(&tmp)
        .map_err(Error::from)
        .and_then(|mut f| {
            write(&mut f)?;
            f.sync_all()?;
            Ok(())
        });
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Tidy chain file: variances appear as block `<name>.tau2`, the
/// log-likelihood and log-posterior as blocks `loglik` and `logpost`.
/// Per-subject blocks are skipped when `omit_per_subject` is set.
pub fn write_chain(
    path: &Path,
    chain: &SampleChain<f64>,
    model: &JointModel<f64>,
    config_hash: &str,
    omit_per_subject: bool,
) -> Result<()> {
    let names: Vec<(String, String)> = chain
        .layout
        .iter()
        .map(|l| (csv_field(&l.name), csv_field(&format!("{}.tau2", l.name))))
        .collect();
    write_atomic(path, |f| {
        let mut out = std::io::BufWriter::new(f);
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "iteration,block,index,value")?;
        for (d, it) in chain.iterations.iter().enumerate() {
            for (b, (name, tau_name)) in names.iter().enumerate() {
                if omit_per_subject && model.blocks[b].per_subject.is_some() {
                    continue;
                }
                for (k, v) in chain.beta(d, b).iter().enumerate() {
                    writeln!(out, "{it},{name},{k},{v}")?;
                }
                for (k, v) in chain.tau2(d, b).iter().enumerate() {
                    writeln!(out, "{it},{tau_name},{k},{v}")?;
                }
            }
            writeln!(out, "{it},loglik,0,{}", chain.loglik[d])?;
            writeln!(out, "{it},logpost,0,{}", chain.log_posterior[d])?;
        }
        out.flush()?;
        Ok(())
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Chain read back from disk: `blocks[name][d]` is the vector of block
/// `name` in draw `d`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainTable {
    pub config_hash: String,
    pub iterations: Vec<usize>,
    pub blocks: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ChainTable {
    pub fn block(&self, name: &str) -> Option<&Vec<Vec<f64>>> {
        self.blocks.get(name)
    }

    pub fn n_draws(&self) -> usize {
        self.iterations.len()
    }
}

pub fn read_chain(path: &Path) -> Result<ChainTable> {
    let first = {
        use std::io::BufRead;
        let mut line = String::new();
        std::io::BufReader::new(fs::File::open(path)?).read_line(&mut line)?;
        line
    };
    let config_hash = first
        .trim_end()
        .strip_prefix("# config_hash=")
        .ok_or_else(|| Error::Data(format!("{}: missing config hash line", path.display())))?
        .to_string();
    let mut table = ChainTable {
        config_hash,
        ..ChainTable::default()
    };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut last_it = None;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), r + 1)))?;
        let bad = || Error::Data(format!("{}: row {}: malformed chain row", path.display(), r + 1));
        let it: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let block = rec.get(1).ok_or_else(bad)?.to_string();
        let k: usize = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let v: f64 = rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if last_it != Some(it) {
            table.iterations.push(it);
            last_it = Some(it);
        }
        let d = table.iterations.len() - 1;
        let draws = table.blocks.entry(block).or_default();
        while draws.len() <= d {
            draws.push(Vec::new());
        }
        let row = &mut draws[d];
        if row.len() != k {
            return Err(bad());
        }
        row.push(v);
    }
    Ok(table)
}

/// Grid for effect export: `n` equidistant points on `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lower];
        }
        let step = (self.upper - self.lower) / (self.n - 1) as f64;
        (0..self.n).map(|k| self.lower + step * k as f64).collect()
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    /// `lower,upper,n`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Usage(format!("grid must be `lower,upper,n`, got `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lower: f64 = parts[0].parse().map_err(|_| bad())?;
        let upper: f64 = parts[1].parse().map_err(|_| bad())?;
        let n: usize = parts[2].parse().map_err(|_| bad())?;
        if n == 0 || !(upper >= lower) {
            return Err(bad());
        }
        Ok(Self { lower, upper, n })
    }
}

/// One exported curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectPoint {
    /// Association level label for group-specific associations.
    pub group: Option<String>,
    pub x: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

fn pointwise(curves: &[Vec<f64>], grid: &[f64], group: Option<String>) -> Vec<EffectPoint> {
    let nd = curves.len() as f64;
    let mut col = vec![0.0; curves.len()];
    grid.iter()
        .enumerate()
        .map(|(j, &x)| {
            for (c, curve) in col.iter_mut().zip(curves) {
                *c = curve[j];
            }
            let mean = col.iter().sum::<f64>() / nd;
            col.sort_by(f64::total_cmp);
            EffectPoint {
                group: group.clone(),
                x,
                mean,
                lower: quantile_sorted(&col, 0.025),
                upper: quantile_sorted(&col, 0.975),
            }
        })
        .collect()
}

/// Pointwise posterior mean and 95% band of `η_α` over a marker grid or of
/// `η_λ` over a time grid. Group-specific associations yield one curve per
/// level including its group intercept.
pub fn export_effects(
    model: &JointModel<f64>,
    chain: &ChainTable,
    which: &str,
    grid: &GridSpec,
) -> Result<Vec<EffectPoint>> {
    let predictor: Predictor = which.parse()?;
    if chain.n_draws() == 0 {
        return Err(Error::Usage("the chain holds no draws".into()));
    }
    let xs = grid.points();
    let draws_of = |name: &str| {
        chain
            .block(name)
            .ok_or_else(|| Error::Data(format!("block `{name}` is missing from the chain")))
    };
    match predictor {
        Predictor::Lambda => {
            let blocks: Vec<usize> = model.blocks_of(Predictor::Lambda).collect();
            let mut curves = vec![vec![0.0; xs.len()]; chain.n_draws()];
            for &b in &blocks {
                if model.blocks[b].kind != TermKind::PsplineTime {
                    return Err(Error::Usage(
                        "lambda export supports baseline-hazard smooths of time only".into(),
                    ));
                }
                let draws = draws_of(&model.blocks[b].name)?;
                for (curve, beta) in curves.iter_mut().zip(draws) {
                    let beta = nalgebra::DVector::from_column_slice(beta);
                    for (c, &t) in curve.iter_mut().zip(&xs) {
                        *c += model.eval_block_at(b, &beta, 0, t);
                    }
                }
            }
            Ok(pointwise(&curves, &xs, None))
        }
        Predictor::Alpha => {
            let assoc = &model.assoc;
            let beta = draws_of(&model.blocks[model.assoc_block].name)?;
            let mut scratch = crate::model::AssocScratch::new(assoc.p1);
            let curves_for = |g2: &[f64], shift: &dyn Fn(usize) -> f64, scratch: &mut crate::model::AssocScratch<f64>| {
                beta.iter()
                    .enumerate()
                    .map(|(d, bd)| {
                        xs.iter()
                            .map(|&x| assoc.eval_point(x, g2, bd, scratch, None).0 + shift(d))
                            .collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>()
            };
            match &assoc.g2 {
                G2::Constant => Ok(pointwise(&curves_for(&[1.0], &|_| 0.0, &mut scratch), &xs, None)),
                G2::Group { levels, .. } => {
                    let group_block = model
                        .blocks_of(Predictor::Alpha)
                        .find(|&b| model.blocks[b].kind == TermKind::GroupIntercepts);
                    let intercepts = match group_block {
                        Some(b) => Some(draws_of(&model.blocks[b].name)?),
                        None => None,
                    };
                    let mut out = Vec::new();
                    for (l, label) in levels.iter().enumerate() {
                        let mut g2 = vec![0.0; levels.len()];
                        g2[l] = 1.0;
                        let shift = |d: usize| match (&intercepts, l) {
                            (Some(ic), l) if l > 0 => ic[d][l - 1],
                            _ => 0.0,
                        };
                        out.extend(pointwise(&curves_for(&g2, &shift, &mut scratch), &xs, Some(label.clone())));
                    }
                    Ok(out)
                }
                _ => Err(Error::Usage(
                    "alpha export supports constant and group-specific associations".into(),
                )),
            }
        }
        other => Err(Error::Usage(format!(
            "effect export is available for lambda and alpha, not {other}"
        ))),
    }
}

/// Effect table headed by the config hash of the fit it came from.
pub fn write_effects(path: &Path, points: &[EffectPoint], config_hash: &str) -> Result<()> {
    let grouped = points.iter().any(|p| p.group.is_some());
    write_atomic(path, |f| {
        writeln!(f, "# config_hash={config_hash}")?;
        let mut w = csv::Writer::from_writer(f);
        if grouped {
            w.write_record(["group", "x", "mean", "q025", "q975"])?;
        } else {
            w.write_record(["x", "mean", "q025", "q975"])?;
        }
        for p in points {
            let nums = [p.x, p.mean, p.lower, p.upper].map(|v| format!("{v}"));
            if grouped {
                let mut rec = vec![p.group.clone().unwrap_or_default()];
                rec.extend(nums);
                w.write_record(&rec)?;
            } else {
                w.write_record(&nums)?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

/// Fit status recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum FitStatus {
    Running,
    Converged,
    Restarted { restarts: usize },
    Failed { restarts: usize, error: String },
}

impl FitStatus {
    fn rank(&self) -> u8 {
        match self {
            FitStatus::Running => 0,
            FitStatus::Restarted { .. } => 1,
            FitStatus::Converged | FitStatus::Failed { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: Option<u64>,
    pub status: FitStatus,
    pub surv_path: PathBuf,
    pub long_path: PathBuf,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64, surv_path: PathBuf, long_path: PathBuf) -> Self {
        Self {
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: unix_now(),
            finished: None,
            status: FitStatus::Running,
            surv_path,
            long_path,
        }
    }

    /// Moves the status forward; backwards transitions are rejected.
    pub fn advance(&mut self, status: FitStatus) -> Result<()> {
        if status.rank() < self.status.rank() || self.status.rank() == 2 {
            return Err(Error::Usage(format!(
                "manifest status cannot move from {:?} to {:?}",
                self.status, status
            )));
        }
        if status.rank() == 2 {
            self.finished = Some(unix_now());
        }
        self.status = status;
        Ok(())
    }

    /// Stamps the end time of a run that finished after restarts.
    pub fn finish(&mut self) {
        self.finished.get_or_insert_with(unix_now);
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_atomic(path, |f| {
        serde_json::to_writer_pretty(&mut *f, value)?;
        f.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Posterior summary document written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub config_hash: String,
    pub draws: usize,
    pub acceptance: BTreeMap<String, f64>,
    pub flagged_iterations: usize,
    pub dic: crate::estimation::Dic,
    pub scalars: Vec<ScalarSummary>,
}

/// Mode estimate of one block with normal-approximation standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBlock {
    pub name: String,
    pub beta: Vec<f64>,
    pub sd: Vec<f64>,
    pub tau2: Vec<f64>,
}

/// Posterior-mode document written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDoc {
    pub config_hash: String,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub log_posterior: f64,
    pub average_slope: f64,
    pub blocks: Vec<ModeBlock>,
}

impl ModeDoc {
    pub fn new(model: &JointModel<f64>, fit: &FitResult<f64>, config_hash: &str, seed: u64, omit_per_subject: bool) -> Self {
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| !(omit_per_subject && b.per_subject.is_some()))
            .map(|(b, blk)| ModeBlock {
                name: blk.name.clone(),
                beta: fit.state.beta[b].iter().copied().collect(),
                sd: fit.sd[b].iter().copied().collect(),
                tau2: fit.state.tau2[b].clone(),
            })
            .collect();
        Self {
            config_hash: config_hash.to_string(),
            seed,
            converged: fit.converged,
            iterations: fit.iterations,
            log_posterior: fit.log_posterior,
            average_slope: average_slope(model, &fit.state),
            blocks,
        }
    }
}

/// Truth sidecar of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDoc {
    pub setting: SimSetting,
    pub truth: Truth,
    pub tables: TruthTables,
}

/// Writes `surv.csv`, `long.csv` and `truth.json` into `dir`.
pub fn write_simulation(sim: &Simulated, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(&sim.data, &dir.join("surv.csv"), &dir.join("long.csv"))?;
    write_json(
        &dir.join("truth.json"),
        &TruthDoc {
            setting: sim.setting.clone(),
            truth: sim.truth.clone(),
            tables: sim.tables.clone(),
        },
    )
}
