//! In-memory joint dataset: one survival record per subject plus long-format
//! longitudinal measurements.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A covariate column, either numeric or categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Level labels in sorted order; the first level is the reference.
    Factor { levels: Vec<String>, codes: Vec<usize> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Factor { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a column from raw text cells; numeric when every cell parses.
    pub fn from_strings(cells: &[String]) -> Self {
        let parsed: Option<Vec<f64>> = cells.iter().map(|c| c.trim().parse().ok()).collect();
        match parsed {
            Some(v) => Column::Numeric(v),
            None => {
                let mut levels: Vec<String> = cells.iter().map(|c| c.trim().to_string()).collect();
                levels.sort();
                levels.dedup();
                let codes = cells
                    .iter()
                    .map(|c| levels.binary_search(&c.trim().to_string()).expect("level present"))
                    .collect();
                Column::Factor { levels, codes }
            }
        }
    }

    /// Factor view of the column; numeric columns become one level per
    /// distinct value, sorted ascending.
    pub fn as_factor(&self) -> (Vec<String>, Vec<usize>) {
        match self {
            Column::Factor { levels, codes } => (levels.clone(), codes.clone()),
            Column::Numeric(v) => {
                let mut distinct: Vec<f64> = v.clone();
                distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite covariate"));
                distinct.dedup();
                let codes = v
                    .iter()
                    .map(|x| distinct.iter().position(|d| d == x).expect("value present"))
                    .collect();
                (distinct.iter().map(|d| format!("{d}")).collect(), codes)
            }
        }
    }

    /// Design columns: the value itself for numeric columns, reference-coded
    /// dummies for factors.
    pub fn design_columns(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        match self {
            Column::Numeric(v) => (vec![String::new()], vec![v.clone()]),
            Column::Factor { levels, codes } => {
                let mut names = Vec::new();
                let mut cols = Vec::new();
                for (l, name) in levels.iter().enumerate().skip(1) {
                    names.push(name.clone());
                    cols.push(codes.iter().map(|&c| if c == l { 1.0 } else { 0.0 }).collect());
                }
                (names, cols)
            }
        }
    }

    fn select(&self, idx: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(idx.iter().map(|&i| v[i]).collect()),
            Column::Factor { levels, codes } => Column::Factor {
                levels: levels.clone(),
                codes: idx.iter().map(|&i| codes[i]).collect(),
            },
        }
    }
}

/// Named covariate columns sharing one row count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub names: Vec<String>,
    pub columns: Vec<Column>,
}

impl Covariates {
    pub fn get(&self, name: &str) -> Option<&Column> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    pub fn push(&mut self, name: impl Into<String>, column: Column) {
        self.names.push(name.into());
        self.columns.push(column);
    }

    fn select(&self, idx: &[usize]) -> Covariates {
        Covariates {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(idx)).collect(),
        }
    }
}

/// Survival table (one row per subject) and longitudinal table (one row per
/// measurement, grouped by subject and sorted by time within subject).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub surv_time: Vec<f64>,
    pub event: Vec<bool>,
    pub baseline: Covariates,
    /// Subject index (into `ids`) of each longitudinal row.
    pub long_subject: Vec<usize>,
    pub long_time: Vec<f64>,
    pub y: Vec<f64>,
    pub long_covariates: Covariates,
}

impl Dataset {
    /// Validates the tables and sorts longitudinal rows by subject and time.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ids: Vec<String>,
        surv_time: Vec<f64>,
        event: Vec<bool>,
        baseline: Covariates,
        long_subject: Vec<usize>,
        long_time: Vec<f64>,
        y: Vec<f64>,
        long_covariates: Covariates,
    ) -> Result<Self> {
        let n = ids.len();
        if surv_time.len() != n || event.len() != n {
            return Err(Error::Data("survival columns have unequal lengths".into()));
        }
        for c in &baseline.columns {
            if c.len() != n {
                return Err(Error::Data("baseline covariate length mismatch".into()));
            }
        }
        let nl = long_subject.len();
        if long_time.len() != nl || y.len() != nl {
            return Err(Error::Data("longitudinal columns have unequal lengths".into()));
        }
        for c in &long_covariates.columns {
            if c.len() != nl {
                return Err(Error::Data("longitudinal covariate length mismatch".into()));
            }
        }
        for (i, &t) in surv_time.iter().enumerate() {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Data(format!(
                    "subject `{}`: follow-up time must be positive (got {t})",
                    ids[i]
                )));
            }
        }
        for r in 0..nl {
            let s = long_subject[r];
            if s >= n {
                return Err(Error::Data(format!("longitudinal row {r}: unknown subject")));
            }
            let t = long_time[r];
            if !(t >= 0.0) || t > surv_time[s] {
                return Err(Error::Data(format!(
                    "longitudinal row {r}: time {t} outside [0, {}] for subject `{}`",
                    surv_time[s], ids[s]
                )));
            }
            if !y[r].is_finite() {
                return Err(Error::Data(format!("longitudinal row {r}: non-finite response")));
            }
        }
        let mut order: Vec<usize> = (0..nl).collect();
        order.sort_by(|&a, &b| {
            long_subject[a]
                .cmp(&long_subject[b])
                .then(long_time[a].partial_cmp(&long_time[b]).expect("finite time"))
        });
        Ok(Self {
            ids,
            surv_time,
            event,
            baseline,
            long_subject: order.iter().map(|&i| long_subject[i]).collect(),
            long_time: order.iter().map(|&i| long_time[i]).collect(),
            y: order.iter().map(|&i| y[i]).collect(),
            long_covariates: long_covariates.select(&order),
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Row range of each subject's longitudinal measurements.
    pub fn subject_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = vec![0..0; self.n_subjects()];
        let mut start = 0;
        while start < self.long_subject.len() {
            let s = self.long_subject[start];
            let mut end = start;
            while end < self.long_subject.len() && self.long_subject[end] == s {
                end += 1;
            }
            ranges[s] = start..end;
            start = end;
        }
        for (s, r) in ranges.iter_mut().enumerate() {
            if r.start == r.end {
                let pos = self.long_subject.partition_point(|&x| x < s);
                *r = pos..pos;
            }
        }
        ranges
    }

    /// Subjects without any longitudinal measurement.
    pub fn subjects_without_observations(&self) -> Vec<usize> {
        self.subject_ranges()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.start == r.end)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    pub fn max_time(&self) -> f64 {
        self.surv_time.iter().copied().fold(0.0, f64::max)
    }

    /// Covariate values per longitudinal row, taken from the longitudinal
    /// table when present there and broadcast from the baseline table
    /// otherwise.
    pub fn long_column(&self, name: &str) -> Option<Column> {
        if let Some(c) = self.long_covariates.get(name) {
            return Some(c.clone());
        }
        self.baseline.get(name).map(|c| c.select(&self.long_subject))
    }
}
