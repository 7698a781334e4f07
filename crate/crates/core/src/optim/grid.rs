use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value sets whose Cartesian product is searched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub conv_kernels: Vec<usize>,
    pub pool_kernels: Vec<usize>,
}

impl GridSpec {
    /// Learning rates {0.1, 0.001, 0.0001}, dropout 0 to 0.6 in steps of 0.1,
    /// convolution kernels {1, 2, 3, 5} and pooling kernels {1, 2}.
    pub fn reference() -> Self {
        GridSpec {
            learning_rates: vec![0.1, 0.001, 0.0001],
            dropouts: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            conv_kernels: vec![1, 2, 3, 5],
            pool_kernels: vec![1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty()
            || self.dropouts.is_empty()
            || self.conv_kernels.is_empty()
            || self.pool_kernels.is_empty()
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.learning_rates.len() * self.dropouts.len() * self.conv_kernels.len() * self.pool_kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All cells in row-major order (learning rate outermost).
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.len());
        for &lr in &self.learning_rates {
            for &dropout in &self.dropouts {
                for &conv_kernel in &self.conv_kernels {
                    for &pool_kernel in &self.pool_kernels {
                        out.push(GridCell {
                            index: out.len(),
                            lr,
                            dropout,
                            conv_kernel,
                            pool_kernel,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub lr: f64,
    pub dropout: f64,
    pub conv_kernel: usize,
    pub pool_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub metric: Option<f64>,
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    /// Cells ranked best first; failed cells last, in cell order.
    pub ranked: Vec<CellResult>,
}

impl GridResult {
    pub fn best(&self) -> Option<&CellResult> {
        self.ranked.first().filter(|r| r.status == CellStatus::Ok)
    }
}

fn rank(a: &CellResult, b: &CellResult) -> Ordering {
    match (a.metric, b.metric) {
        (Some(x), Some(y)) => y
            .partial_cmp(&x)
            .unwrap_or(Ordering::Equal)
            .then(a.cell.lr.total_cmp(&b.cell.lr))
            .then(a.cell.dropout.total_cmp(&b.cell.dropout))
            .then(a.cell.index.cmp(&b.cell.index)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cell.index.cmp(&b.cell.index),
    }
}

/// Evaluates `objective` on every cell of `spec` (higher metric is better).
///
/// Cells run in parallel and are merged by cell index, so the ranking does not
/// depend on evaluation order. A failing or non-finite cell is recorded as
/// failed and the search continues. Ties break toward the smaller learning
/// rate, then the smaller dropout.
pub fn grid_search<F>(spec: &GridSpec, budget: usize, objective: F) -> Result<GridResult>
where
    F: Fn(&GridCell, usize) -> Result<f64> + Sync,
{
    spec.validate()?;
    let mut results: Vec<CellResult> = spec
        .cells()
        .into_par_iter()
        .map(|cell| match objective(&cell, budget) {
            Ok(m) if m.is_finite() => CellResult {
                cell,
                metric: Some(m),
                status: CellStatus::Ok,
            },
            Ok(m) => CellResult {
                cell,
                metric: None,
                status: CellStatus::Failed(format!("non-finite metric {m}")),
            },
            Err(e) => CellResult {
                cell,
                metric: None,
                status: CellStatus::Failed(e.to_string()),
            },
        })
        .collect();
    results.sort_by(rank);
    Ok(GridResult { ranked: results })
}

/// One CSV row per cell: `lr,dropout,conv_kernel,pool_kernel,metric,status`.
pub fn write_grid_csv(result: &GridResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["lr", "dropout", "conv_kernel", "pool_kernel", "metric", "status"])
        .map_err(|e| csv_err(path, e))?;
    for r in &result.ranked {
        let status = match &r.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Failed(msg) => format!("failed: {msg}"),
        };
        w.write_record([
            r.cell.lr.to_string(),
            r.cell.dropout.to_string(),
            r.cell.conv_kernel.to_string(),
            r.cell.pool_kernel.to_string(),
            r.metric.map(|m| m.to_string()).unwrap_or_default(),
            status,
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

    #[test]
    fn reference_grid_has_168_cells() {
        let spec = GridSpec::reference();
        assert_eq!(spec.len(), 3 * 7 * 4 * 2);
        assert_eq!(spec.cells().len(), 168);
    }

    #[test]
    fn single_cell_is_best() {
        let spec = GridSpec {
            learning_rates: vec![0.01],
            dropouts: vec![0.2],
            conv_kernels: vec![3],
            pool_kernels: vec![2],
        };
        let r = grid_search(&spec, 1, |_, _| Ok(0.5)).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.best().unwrap().cell.lr, 0.01);
    }

    #[test]
    fn rigged_objective_selects_lr_0_001() {
        let spec = GridSpec::reference();
        let visits = AtomicUsize::new(0);
        let r = grid_search(&spec, 1, |c, _| {
            visits.fetch_add(1, AtomicOrdering::Relaxed);
            Ok(-(c.lr - 0.001).abs())
        })
        .unwrap();
        assert_eq!(visits.load(AtomicOrdering::Relaxed), 168);
        let best = r.best().unwrap();
        assert_eq!(best.cell.lr, 0.001);
        // Tie on the metric breaks toward the smaller dropout.
        assert_eq!(best.cell.dropout, 0.0);
    }

    #[test]
    fn failures_are_recorded_and_ranked_last() {
        let spec = GridSpec {
            learning_rates: vec![0.1, 0.01],
            dropouts: vec![0.0],
            conv_kernels: vec![3, 5],
            pool_kernels: vec![2],
        };
        let r = grid_search(&spec, 1, |c, _| {
            if c.conv_kernel == 5 {
                Err(Error::Tiling("too small".into()))
            } else {
                Ok(c.lr)
            }
        })
        .unwrap();
        assert_eq!(r.ranked.len(), 4);
        assert_eq!(r.best().unwrap().cell.lr, 0.1);
        assert!(matches!(r.ranked[2].status, CellStatus::Failed(_)));
        assert!(matches!(r.ranked[3].status, CellStatus::Failed(_)));
    }

    #[test]
    fn ranking_is_order_independent() {
        let spec = GridSpec::reference();
        let f = |c: &GridCell, _| Ok(((c.index * 37) % 11) as f64);
        let a = grid_search(&spec, 1, f).unwrap();
        let b = grid_search(&spec, 1, f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let spec = GridSpec::reference();
        let r = grid_search(&spec, 1, |c, _| Ok(c.lr)).unwrap();
        write_grid_csv(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 169);
        assert!(text.starts_with("lr,dropout,conv_kernel,pool_kernel,metric,status"));
    }
}
