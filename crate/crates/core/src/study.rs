//! Detection experiment over the simulation grid.
//!
//! Every cell generates a clean panel, plants an outlier in the target
//! subject, fits, diagnoses, and records the target's rank under each
//! statistic. Detection rates are the share of replicates in which the
//! target ranks first (or within the top three).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DesignSpec;
use crate::influence::{self, rank_of, DiagnosticRecord, InfluenceError, Stat};
use crate::model::{self, FitSummary, ModelError, QuadratureRule};
use crate::simulate::{CellCoord, GridOptions, SimulateError};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("cell sigma1={sigma1} method={method} replicate={replicate}: {source}")]
    Cell {
        sigma1: f64,
        method: u8,
        replicate: usize,
        #[source]
        source: Box<StudyError>,
    },
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StudyError {
    /// True when the root cause is a failed Newton fit.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            StudyError::Cell { source, .. } => source.is_non_convergence(),
            StudyError::Model(ModelError::NonConvergence { .. }) => true,
            StudyError::Influence(InfluenceError::Model(ModelError::NonConvergence { .. })) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub grid: GridOptions,
    pub design: DesignSpec,
    pub rule: QuadratureRule,
    /// Drop failing cells from the rates instead of aborting.
    pub skip_failures: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            grid: GridOptions::default(),
            design: DesignSpec::default(),
            rule: QuadratureRule::default(),
            skip_failures: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub coord: CellCoord,
    /// Rank of the target under each of [`Stat::ALL`].
    pub ranks: Vec<(Stat, usize)>,
    pub records: Vec<DiagnosticRecord>,
    pub fit: FitSummary,
    pub target_index: usize,
}

impl CellResult {
    pub fn rank(&self, stat: Stat) -> usize {
        self.ranks
            .iter()
            .find(|(s, _)| *s == stat)
            .map(|(_, r)| *r)
            .expect("every stat is ranked")
    }

    pub fn target(&self) -> &DiagnosticRecord {
        &self.records[self.target_index]
    }
}

pub fn run_cell(config: &StudyConfig, coord: CellCoord) -> Result<CellResult, StudyError> {
    let wrap = |e: StudyError| StudyError::Cell {
        sigma1: coord.sigma1,
        method: coord.method,
        replicate: coord.replicate,
        source: Box::new(e),
    };
    let inner = || -> Result<CellResult, StudyError> {
        let cell = config.grid.make_cell(coord, &config.design)?;
        let fit = model::fit_ml(&cell.contaminated, &config.design, &config.rule, None)?;
        let records = influence::diagnose(&fit)?;
        let target_index = config.grid.target - 1;
        let ranks = Stat::ALL
            .iter()
            .map(|&s| (s, rank_of(&records, target_index, s)))
            .collect();
        Ok(CellResult {
            coord,
            ranks,
            records,
            fit: fit.summary(),
            target_index,
        })
    };
    inner().map_err(wrap)
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    /// Successful cells in grid order.
    pub cells: Vec<CellResult>,
    pub failures: Vec<(CellCoord, String)>,
    pub detection: Vec<DetectionRow>,
}

/// Runs every cell on the current rayon pool; results keep grid order.
pub fn run_study(config: &StudyConfig) -> Result<StudyOutcome, StudyError> {
    let coords = config.grid.coordinates();
    let results: Vec<Result<CellResult, StudyError>> = coords
        .par_iter()
        .map(|&c| run_cell(config, c))
        .collect();
    let mut cells = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (coord, r) in coords.iter().zip(results) {
        match r {
            Ok(c) => cells.push(c),
            Err(e) if config.skip_failures => failures.push((*coord, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let detection = detection_table(&config.grid, &cells);
    Ok(StudyOutcome {
        cells,
        failures,
        detection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub sigma1: f64,
    pub method: u8,
    pub stat: Stat,
    /// Successful replicates behind the rates.
    pub replicates: usize,
    pub rank1_rate: f64,
    pub rank3_rate: f64,
}

/// One row per (σ₁, method, statistic) in grid order.
pub fn detection_table(grid: &GridOptions, cells: &[CellResult]) -> Vec<DetectionRow> {
    let mut rows = Vec::new();
    for &sigma1 in &grid.sigmas {
        for &method in &grid.methods {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.coord.sigma1 == sigma1 && c.coord.method == method)
                .collect();
            for stat in Stat::ALL {
                let n = group.len();
                let share = |k: usize| {
                    if n == 0 {
                        f64::NAN
                    } else {
                        group.iter().filter(|c| c.rank(stat) <= k).count() as f64 / n as f64
                    }
                };
                rows.push(DetectionRow {
                    sigma1,
                    method,
                    stat,
                    replicates: n,
                    rank1_rate: share(1),
                    rank3_rate: share(3),
                });
            }
        }
    }
    rows
}

pub fn write_detection_csv<W: Write>(out: W, rows: &[DetectionRow]) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_rows_cover_the_grid() {
        let grid = GridOptions {
            replicates: 1,
            ..GridOptions::default()
        };
        let rows = detection_table(&grid, &[]);
        assert_eq!(rows.len(), 3 * 4 * 5);
        assert!(rows.iter().all(|r| r.replicates == 0 && r.rank1_rate.is_nan()));
    }
}
