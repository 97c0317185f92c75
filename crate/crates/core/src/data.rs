//! Longitudinal count panels and PMELM design matrices.
//!
//! A panel holds one record per subject: treatment arm, the 8-week baseline
//! count, age, and four 2-week period counts. The derived covariates `lbase`
//! and `lage` are always recomputed from `base` and `age`, so any edit to a
//! subject's baseline re-centers the whole column.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of follow-up periods per subject.
pub const PERIODS: usize = 4;

/// CSV column names, in file order.
pub const CSV_COLUMNS: [&str; 8] = ["id", "trt", "base", "age", "y1", "y2", "y3", "y4"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: column `{column}` is not an integer: {value:?}")]
    NonIntegerCount {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: column `{column}` is negative ({value})")]
    NegativeCount {
        line: u64,
        column: String,
        value: i64,
    },
    #[error("subject {id} has more than one row for its periods")]
    DuplicatePeriod { id: u32 },
    #[error("subject {id} is missing period counts")]
    SubjectWithMissingPeriods { id: u32 },
    #[error("subject {id}: {reason}")]
    InvalidSubject { id: u32, reason: String },
    #[error("panel has no subjects")]
    EmptyPanel,
    #[error("design has no terms")]
    EmptyDesign,
    #[error("design term `{0}` listed twice")]
    DuplicateTerm(Term),
    #[error("intercept must be the first design term")]
    InterceptNotFirst,
    #[error("unknown design term `{0}`")]
    UnknownTerm(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One subject of the panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u32,
    /// 0 = placebo, 1 = treatment.
    pub trt: u8,
    /// Baseline count over the 8-week pre-randomization window.
    pub base: u32,
    pub age: u32,
    pub y: [u32; PERIODS],
}

impl SubjectRecord {
    fn validate(&self) -> Result<(), DataError> {
        if self.trt > 1 {
            return Err(DataError::InvalidSubject {
                id: self.id,
                reason: format!("trt must be 0 or 1, got {}", self.trt),
            });
        }
        if self.age == 0 {
            return Err(DataError::InvalidSubject {
                id: self.id,
                reason: "age must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Baseline on the 2-week scale of the period counts; zero baselines are
/// continuity-corrected by half a count.
fn log_base_rate(base: u32) -> f64 {
    if base == 0 {
        (0.5_f64 / 4.0).ln()
    } else {
        (base as f64 / 4.0).ln()
    }
}

fn centered(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = values.collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.into_iter().map(|x| x - mean).collect()
}

/// A complete longitudinal panel with derived, centered covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    subjects: Vec<SubjectRecord>,
    lbase: Vec<f64>,
    lage: Vec<f64>,
}

impl PanelDataset {
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::EmptyPanel);
        }
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            s.validate()?;
            if !seen.insert(s.id) {
                return Err(DataError::DuplicatePeriod { id: s.id });
            }
        }
        let lbase = centered(subjects.iter().map(|s| log_base_rate(s.base)));
        let lage = centered(subjects.iter().map(|s| (s.age as f64).ln()));
        Ok(Self {
            subjects,
            lbase,
            lage,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn lbase(&self) -> &[f64] {
        &self.lbase
    }

    pub fn lage(&self) -> &[f64] {
        &self.lage
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Total number of period observations.
    pub fn n_obs(&self) -> usize {
        self.subjects.len() * PERIODS
    }

    pub fn position_of(&self, id: u32) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    /// Rebuilds the panel after editing subjects, recomputing derived columns.
    pub fn map_subjects(
        &self,
        f: impl FnOnce(&mut Vec<SubjectRecord>),
    ) -> Result<Self, DataError> {
        let mut subjects = self.subjects.clone();
        f(&mut subjects);
        Self::new(subjects)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut cols = [0usize; 8];
        for (slot, name) in cols.iter_mut().zip(CSV_COLUMNS) {
            *slot = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
        }

        let mut subjects: Vec<SubjectRecord> = Vec::new();
        let mut seen = HashSet::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let field = |k: usize| row.get(cols[k]).unwrap_or("");
            let int = |k: usize| -> Result<Option<u32>, DataError> {
                let raw = field(k);
                if raw.is_empty() {
                    return Ok(None);
                }
                let v: i64 = raw.parse().map_err(|_| DataError::NonIntegerCount {
                    line,
                    column: CSV_COLUMNS[k].to_string(),
                    value: raw.to_string(),
                })?;
                if v < 0 {
                    return Err(DataError::NegativeCount {
                        line,
                        column: CSV_COLUMNS[k].to_string(),
                        value: v,
                    });
                }
                u32::try_from(v)
                    .map(Some)
                    .map_err(|_| DataError::NonIntegerCount {
                        line,
                        column: CSV_COLUMNS[k].to_string(),
                        value: raw.to_string(),
                    })
            };
            let required = |k: usize| -> Result<u32, DataError> {
                int(k)?.ok_or_else(|| DataError::NonIntegerCount {
                    line,
                    column: CSV_COLUMNS[k].to_string(),
                    value: String::new(),
                })
            };

            let id = required(0)?;
            if !seen.insert(id) {
                return Err(DataError::DuplicatePeriod { id });
            }
            let trt = required(1)?;
            let base = required(2)?;
            let age = required(3)?;
            let mut y = [0u32; PERIODS];
            for (j, slot) in y.iter_mut().enumerate() {
                *slot = int(4 + j)?.ok_or(DataError::SubjectWithMissingPeriods { id })?;
            }
            let trt = u8::try_from(trt).map_err(|_| DataError::InvalidSubject {
                id,
                reason: format!("trt must be 0 or 1, got {trt}"),
            })?;
            subjects.push(SubjectRecord {
                id,
                trt,
                base,
                age,
                y,
            });
        }
        Self::new(subjects)
    }

    /// Writes the panel in the canonical CSV schema. `comments` are emitted as
    /// leading `# ` lines, which the reader skips.
    pub fn to_writer<W: Write>(&self, mut out: W, comments: &[String]) -> Result<(), DataError> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "{}", CSV_COLUMNS.join(","))?;
        for s in &self.subjects {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.id, s.trt, s.base, s.age, s.y[0], s.y[1], s.y[2], s.y[3]
            )?;
        }
        Ok(())
    }
}

pub fn load_panel(path: impl AsRef<Path>) -> Result<PanelDataset, DataError> {
    let file = std::fs::File::open(path)?;
    PanelDataset::from_reader(std::io::BufReader::new(file))
}

pub fn write_panel(
    path: impl AsRef<Path>,
    panel: &PanelDataset,
    comments: &[String],
) -> Result<(), DataError> {
    let mut buf = Vec::new();
    panel.to_writer(&mut buf, comments)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// A column of the fixed-effect design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Lbase,
    Trt,
    LbaseTrt,
    Lage,
    /// Raw baseline count, unlogged and uncentered.
    Base,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Intercept => "intercept",
            Term::Lbase => "lbase",
            Term::Trt => "trt",
            Term::LbaseTrt => "lbase_trt",
            Term::Lage => "lage",
            Term::Base => "base",
        }
    }

    fn value(self, data: &PanelDataset, i: usize) -> f64 {
        let s = &data.subjects[i];
        match self {
            Term::Intercept => 1.0,
            Term::Lbase => data.lbase[i],
            Term::Trt => s.trt as f64,
            Term::LbaseTrt => data.lbase[i] * s.trt as f64,
            Term::Lage => data.lage[i],
            Term::Base => s.base as f64,
        }
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Term {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "intercept" | "1" => Term::Intercept,
            "lbase" => Term::Lbase,
            "trt" => Term::Trt,
            "lbase_trt" | "lbase:trt" | "lbase*trt" => Term::LbaseTrt,
            "lage" => Term::Lage,
            "base" => Term::Base,
            other => return Err(DataError::UnknownTerm(other.to_string())),
        })
    }
}

/// Ordered list of fixed-effect terms; fixes the length of beta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Term>", into = "Vec<Term>")]
pub struct DesignSpec {
    terms: Vec<Term>,
}

impl DesignSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self, DataError> {
        if terms.is_empty() {
            return Err(DataError::EmptyDesign);
        }
        let mut seen = HashSet::new();
        for &t in &terms {
            if !seen.insert(t) {
                return Err(DataError::DuplicateTerm(t));
            }
        }
        if terms.iter().skip(1).any(|&t| t == Term::Intercept) {
            return Err(DataError::InterceptNotFirst);
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Number of fixed effects.
    pub fn p(&self) -> usize {
        self.terms.len()
    }
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            terms: vec![
                Term::Intercept,
                Term::Lbase,
                Term::Trt,
                Term::LbaseTrt,
                Term::Lage,
            ],
        }
    }
}

impl TryFrom<Vec<Term>> for DesignSpec {
    type Error = DataError;

    fn try_from(terms: Vec<Term>) -> Result<Self, Self::Error> {
        Self::new(terms)
    }
}

impl From<DesignSpec> for Vec<Term> {
    fn from(spec: DesignSpec) -> Self {
        spec.terms
    }
}

impl std::str::FromStr for DesignSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let terms = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(terms)
    }
}

/// Fixed-effect and random-intercept design for a complete panel. Rows are
/// ordered by subject, then period.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Row → subject position.
    pub subject_index: Vec<usize>,
    pub subject_ids: Vec<u32>,
    pub trt: Vec<u8>,
    pub spec: DesignSpec,
}

impl DesignMatrices {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Row range of subject `i`.
    pub fn rows(&self, i: usize) -> std::ops::Range<usize> {
        i * PERIODS..(i + 1) * PERIODS
    }
}

pub fn build_design(data: &PanelDataset, spec: &DesignSpec) -> Result<DesignMatrices, DataError> {
    if spec.terms.is_empty() {
        return Err(DataError::EmptyDesign);
    }
    let m = data.len();
    let n = m * PERIODS;
    let p = spec.p();
    let mut x = DMatrix::zeros(n, p);
    let mut z = DMatrix::zeros(n, m);
    let mut y = DVector::zeros(n);
    let mut subject_index = Vec::with_capacity(n);
    for (i, s) in data.subjects.iter().enumerate() {
        let row: Vec<f64> = spec.terms.iter().map(|t| t.value(data, i)).collect();
        for j in 0..PERIODS {
            let r = i * PERIODS + j;
            for (k, v) in row.iter().enumerate() {
                x[(r, k)] = *v;
            }
            z[(r, i)] = 1.0;
            y[r] = s.y[j] as f64;
            subject_index.push(i);
        }
    }
    Ok(DesignMatrices {
        x,
        z,
        y,
        subject_index,
        subject_ids: data.subjects.iter().map(|s| s.id).collect(),
        trt: data.subjects.iter().map(|s| s.trt).collect(),
        spec: spec.clone(),
    })
}
