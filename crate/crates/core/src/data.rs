use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::types::{TestState, VisitedSet};

/// Labeled states stored row-major: one row per state, `true` = failure.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Vec<bool>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<bool>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Empty("dataset dimension"));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i % x.ncols()));
        }
        Ok(Self { x, y })
    }

    pub fn from_states(states: &[TestState], labels: Vec<bool>) -> Result<Self> {
        let first = states.first().ok_or(Error::Empty("dataset"))?;
        let d = first.dim();
        let mut flat = Vec::with_capacity(states.len() * d);
        for s in states {
            s.check_dim(d)?;
            flat.extend_from_slice(s.as_slice());
        }
        let x = Array2::from_shape_vec((states.len(), d), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(x, labels)
    }

    pub fn from_visited(visited: &VisitedSet) -> Result<Self> {
        let states: Vec<TestState> = visited.records().iter().map(|r| r.state.clone()).collect();
        let labels = visited.records().iter().map(|r| r.outcome.failed).collect();
        Self::from_states(&states, labels)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn labels(&self) -> &[bool] {
        &self.y
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn state(&self, i: usize) -> TestState {
        TestState::new(self.x.row(i).to_vec()).expect("rows are validated finite")
    }

    pub fn states(&self) -> Vec<TestState> {
        (0..self.len()).map(|i| self.state(i)).collect()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&b| b).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.len() as f64
        }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Concatenate datasets of equal dimension.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let d = first.dim();
        let mut views = Vec::with_capacity(parts.len());
        let mut y = Vec::new();
        for p in parts {
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: p.dim(),
                });
            }
            views.push(p.x.view());
            y.extend_from_slice(&p.y);
        }
        let x = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Dataset { x, y })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Outcome, VisitedRecord};

    #[test]
    fn from_visited_keeps_order() {
        let mut v = VisitedSet::new();
        for i in 0..4 {
            v.push(VisitedRecord {
                state: TestState::new(vec![i as f64, 0.0]).unwrap(),
                outcome: Outcome { failed: i % 2 == 0 },
                sampled_critical: false,
                round_index: 0,
            })
            .unwrap();
        }
        let d = Dataset::from_visited(&v).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.labels(), &[true, false, true, false]);
        assert_eq!(d.row(3)[0], 3.0);
        let s = d.subset(&[2, 0]);
        assert_eq!(s.labels(), &[true, true]);
        assert_eq!(s.row(0)[0], 2.0);
        assert_eq!(Dataset::concat(&[&d, &s]).unwrap().len(), 6);
    }

    #[test]
    fn rejects_mismatched_labels() {
        assert!(Dataset::new(Array2::zeros((3, 2)), vec![true]).is_err());
        assert!(Dataset::from_visited(&VisitedSet::new()).is_err());
    }
}
