//! Orthogonal-array hyperparameter search and range analysis.
//!
//! A plan assigns one level of every factor to each run. After the runs are
//! scored, range analysis sums the scores per factor level; the spread of
//! those sums ranks factor influence and the largest sum picks the level.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OaError {
    #[error("plan: {0}")]
    Plan(String),
    #[error("plan is not orthogonal: {0}")]
    NotOrthogonal(String),
    #[error("runs without a result: {0:?}")]
    Missing(Vec<usize>),
    #[error("results line {line}: {reason}")]
    Results { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<f64>,
}

/// Factors plus the run-by-factor level assignment (0-based level indices).
#[derive(Debug, Clone, PartialEq)]
pub struct OaPlan {
    factors: Vec<Factor>,
    assignment: Vec<Vec<usize>>,
}

/// File form of a plan; `assignment` holds 1-based level numbers.
#[derive(Debug, Serialize, Deserialize)]
struct PlanFile {
    #[serde(rename = "factor")]
    factors: Vec<Factor>,
    assignment: Vec<Vec<usize>>,
}

// Standard L16(4^5), 1-based, one row per run.
const L16: [[usize; 5]; 16] = [
    [1, 1, 1, 1, 1],
    [1, 2, 2, 2, 2],
    [1, 3, 3, 3, 3],
    [1, 4, 4, 4, 4],
    [2, 1, 2, 3, 4],
    [2, 2, 1, 4, 3],
    [2, 3, 4, 1, 2],
    [2, 4, 3, 2, 1],
    [3, 1, 3, 4, 2],
    [3, 2, 4, 3, 1],
    [3, 3, 1, 2, 4],
    [3, 4, 2, 1, 3],
    [4, 1, 4, 2, 3],
    [4, 2, 3, 1, 4],
    [4, 3, 2, 4, 1],
    [4, 4, 1, 3, 2],
];

impl OaPlan {
    pub fn new(factors: Vec<Factor>, assignment: Vec<Vec<usize>>) -> Result<Self, OaError> {
        let plan = Self { factors, assignment };
        plan.validate()?;
        Ok(plan)
    }

    /// The 16-run, five-factor, four-level plan over λ, learning rate,
    /// width `K`, layer count `I` and batch count `n_b`.
    pub fn l16() -> Self {
        let f = |name: &str, levels: [f64; 4]| Factor { name: name.into(), levels: levels.to_vec() };
        Self::new(
            vec![
                f("lambda", [0.002, 0.004, 0.006, 0.008]),
                f("lr", [0.005, 0.01, 0.015, 0.02]),
                f("width", [16.0, 32.0, 48.0, 64.0]),
                f("layers", [5.0, 6.0, 7.0, 8.0]),
                f("n_b", [1.0, 3.0, 6.0, 13.0]),
            ],
            L16.iter().map(|r| r.iter().map(|l| l - 1).collect()).collect(),
        )
        .expect("L16 is a valid plan")
    }

    pub fn from_toml(text: &str) -> Result<Self, OaError> {
        let file: PlanFile = toml::from_str(text).map_err(|e| OaError::Plan(e.to_string()))?;
        let mut assignment = Vec::with_capacity(file.assignment.len());
        for (r, row) in file.assignment.iter().enumerate() {
            let row: Option<Vec<usize>> = row.iter().map(|&l| l.checked_sub(1)).collect();
            assignment.push(row.ok_or_else(|| OaError::Plan(format!("run {}: levels are numbered from 1", r + 1)))?);
        }
        Self::new(file.factors, assignment)
    }

    pub fn to_toml(&self) -> String {
        let file = PlanFile {
            factors: self.factors.clone(),
            assignment: self.assignment.iter().map(|r| r.iter().map(|l| l + 1).collect()).collect(),
        };
        toml::to_string(&file).expect("plan serialises")
    }

    /// Checks indices and that every pair of columns is balanced.
    pub fn validate(&self) -> Result<(), OaError> {
        if self.factors.is_empty() || self.assignment.is_empty() {
            return Err(OaError::Plan("needs at least one factor and one run".into()));
        }
        for f in &self.factors {
            if f.levels.is_empty() {
                return Err(OaError::Plan(format!("factor `{}` has no levels", f.name)));
            }
        }
        for (r, row) in self.assignment.iter().enumerate() {
            if row.len() != self.factors.len() {
                return Err(OaError::Plan(format!(
                    "run {} has {} entries for {} factors",
                    r + 1,
                    row.len(),
                    self.factors.len()
                )));
            }
            for (l, f) in row.iter().zip(&self.factors) {
                if *l >= f.levels.len() {
                    return Err(OaError::Plan(format!(
                        "run {}: level {} of `{}` out of 1..={}",
                        r + 1,
                        l + 1,
                        f.name,
                        f.levels.len()
                    )));
                }
            }
        }
        self.check_orthogonal()
    }

    /// Every level appears equally often in each column, and every level
    /// pair appears equally often in each pair of columns.
    pub fn check_orthogonal(&self) -> Result<(), OaError> {
        let runs = self.assignment.len();
        for (j, f) in self.factors.iter().enumerate() {
            let mut counts = vec![0usize; f.levels.len()];
            self.assignment.iter().for_each(|r| counts[r[j]] += 1);
            if counts.iter().any(|&c| c * f.levels.len() != runs) {
                return Err(OaError::NotOrthogonal(format!("column `{}` level counts {counts:?}", f.name)));
            }
        }
        for a in 0..self.factors.len() {
            for b in a + 1..self.factors.len() {
                let (la, lb) = (self.factors[a].levels.len(), self.factors[b].levels.len());
                let mut counts = vec![0usize; la * lb];
                self.assignment.iter().for_each(|r| counts[r[a] * lb + r[b]] += 1);
                if counts.iter().any(|&c| c * la * lb != runs) {
                    return Err(OaError::NotOrthogonal(format!(
                        "columns `{}` and `{}` are not balanced",
                        self.factors[a].name, self.factors[b].name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn runs(&self) -> usize {
        self.assignment.len()
    }

    /// 0-based level indices of run `run` (1-based).
    pub fn levels(&self, run: usize) -> &[usize] {
        &self.assignment[run - 1]
    }

    /// Factor values of run `run` (1-based).
    pub fn values(&self, run: usize) -> Vec<f64> {
        self.levels(run)
            .iter()
            .zip(&self.factors)
            .map(|(&l, f)| f.levels[l])
            .collect()
    }

    /// Size of the full factorial design this plan stands in for.
    pub fn full_factorial(&self) -> f64 {
        self.factors.iter().map(|f| f.levels.len() as f64).product()
    }

    /// Fraction of full-factorial runs avoided.
    pub fn savings(&self) -> f64 {
        savings(self.runs(), self.full_factorial())
    }
}

/// `1 − runs / full`.
pub fn savings(runs: usize, full: f64) -> f64 {
    1.0 - runs as f64 / full
}

/// Scores per run; `None` marks a run that is pending or failed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResults {
    scores: BTreeMap<usize, Option<f64>>,
    runs: usize,
}

impl RunResults {
    pub fn new(runs: usize) -> Self {
        Self { scores: BTreeMap::new(), runs }
    }

    pub fn from_scores(scores: &[f64]) -> Self {
        let mut r = Self::new(scores.len());
        for (i, &s) in scores.iter().enumerate() {
            r.set(i + 1, Some(s));
        }
        r
    }

    pub fn set(&mut self, run: usize, score: Option<f64>) {
        self.scores.insert(run, score);
    }

    pub fn get(&self, run: usize) -> Option<f64> {
        self.scores.get(&run).copied().flatten()
    }

    /// Runs with no successful score, ascending.
    pub fn missing(&self) -> Vec<usize> {
        (1..=self.runs).filter(|&r| self.get(r).is_none()).collect()
    }

    /// Writes `run,<factor…>,accuracy`; failed runs have an empty score.
    pub fn write_csv<W: Write>(&self, plan: &OaPlan, out: W) -> Result<(), OaError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["run".to_string()];
        header.extend(plan.factors.iter().map(|f| f.name.clone()));
        header.push("accuracy".into());
        w.write_record(&header)?;
        for (&run, score) in &self.scores {
            let mut row = vec![run.to_string()];
            row.extend(plan.values(run).iter().map(|v| v.to_string()));
            row.push(score.map(|s| s.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`write_csv`](Self::write_csv), or a bare
    /// `run,accuracy` table. Rows must agree with `plan`.
    pub fn read_csv<R: Read>(plan: &OaPlan, input: R) -> Result<Self, OaError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let bad = |line, reason: String| OaError::Results { line, reason };
        let run_col = header.iter().position(|h| h == "run").ok_or_else(|| bad(1, "no `run` column".into()))?;
        let acc_col = header
            .iter()
            .position(|h| h == "accuracy")
            .ok_or_else(|| bad(1, "no `accuracy` column".into()))?;
        let factor_cols: Vec<Option<usize>> =
            plan.factors.iter().map(|f| header.iter().position(|h| h == f.name)).collect();
        let mut out = Self::new(plan.runs());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let run: usize = rec[run_col].trim().parse().map_err(|_| bad(line, format!("run `{}`", &rec[run_col])))?;
            if run == 0 || run > plan.runs() {
                return Err(bad(line, format!("run {run} outside 1..={}", plan.runs())));
            }
            let values = plan.values(run);
            for (j, col) in factor_cols.iter().enumerate() {
                if let Some(c) = col {
                    let v: f64 = rec[*c].trim().parse().map_err(|_| bad(line, format!("`{}`", &rec[*c])))?;
                    if v != values[j] {
                        return Err(bad(
                            line,
                            format!("{} = {v} but the plan has {}", plan.factors[j].name, values[j]),
                        ));
                    }
                }
            }
            let field = rec[acc_col].trim();
            let score = if field.is_empty() {
                None
            } else {
                let s: f64 = field.parse().map_err(|_| bad(line, format!("accuracy `{field}`")))?;
                if !s.is_finite() {
                    return Err(bad(line, format!("accuracy `{field}`")));
                }
                Some(s)
            };
            out.set(run, score);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Scores every run still missing from `results` with `objective`, which
/// receives the 1-based run number and its factor values. Failures are
/// logged and left missing; their messages are returned.
pub fn execute<F>(plan: &OaPlan, results: &mut RunResults, mode: Execution, objective: F) -> Vec<(usize, String)>
where
    F: Fn(usize, &[f64]) -> Result<f64, String> + Sync,
{
    let pending = results.missing();
    let run = |&r: &usize| {
        let out = objective(r, &plan.values(r)).and_then(|s| {
            if s.is_finite() {
                Ok(s)
            } else {
                Err(format!("non-finite score {s}"))
            }
        });
        (r, out)
    };
    let outcomes: Vec<(usize, Result<f64, String>)> = match mode {
        Execution::Sequential => pending.iter().map(run).collect(),
        Execution::Parallel => pending.par_iter().map(run).collect(),
    };
    let mut failures = Vec::new();
    for (r, out) in outcomes {
        match out {
            Ok(s) => results.set(r, Some(s)),
            Err(e) => {
                log::warn!("run {r} failed: {e}");
                results.set(r, None);
                failures.push((r, e));
            }
        }
    }
    failures
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorAnalysis {
    pub name: String,
    /// Sum of scores over the runs at each level.
    pub sums: Vec<f64>,
    /// `sums` divided by the runs at each level.
    pub means: Vec<f64>,
    /// Largest minus smallest level sum.
    pub range: f64,
    /// Level with the largest sum, 0-based; ties go to the lower level.
    pub best_level: usize,
    pub best_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeAnalysis {
    pub factors: Vec<FactorAnalysis>,
}

impl RangeAnalysis {
    pub fn best_values(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.best_value).collect()
    }

    /// Factor names from most to least influential by range.
    pub fn ranking(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.factors.len()).collect();
        idx.sort_by(|&a, &b| self.factors[b].range.total_cmp(&self.factors[a].range).then(a.cmp(&b)));
        idx.into_iter().map(|i| self.factors[i].name.as_str()).collect()
    }
}

/// Level sums and ranges; refuses to run while any score is missing.
pub fn range_analysis(plan: &OaPlan, results: &RunResults) -> Result<RangeAnalysis, OaError> {
    let missing = results.missing();
    if !missing.is_empty() {
        return Err(OaError::Missing(missing));
    }
    let factors = plan
        .factors
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let mut sums = vec![0.0; f.levels.len()];
            let mut counts = vec![0usize; f.levels.len()];
            for run in 1..=plan.runs() {
                let l = plan.levels(run)[j];
                sums[l] += results.get(run).expect("checked above");
                counts[l] += 1;
            }
            let means = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
            let mut best = 0;
            for (l, &s) in sums.iter().enumerate() {
                if s > sums[best] {
                    best = l;
                }
            }
            let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
            FactorAnalysis {
                name: f.name.clone(),
                range: sums[best] - min,
                means,
                best_level: best,
                best_value: f.levels[best],
                sums,
            }
        })
        .collect();
    Ok(RangeAnalysis { factors })
}
