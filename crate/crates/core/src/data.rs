//! Tabular dataset container shared by generators, ingestion and the model.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::Data(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Predictor matrix (row-major `n x d`) and response vector. Class labels are
/// stored as integral `f64` values in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub categorical: Vec<bool>,
    pub task: TaskKind,
    /// Number of classes for classification, 0 for regression.
    pub num_classes: usize,
    /// Per-cell missing indicator, row-major, when the source had gaps.
    pub missing: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(
        n: usize,
        d: usize,
        x: Vec<f64>,
        y: Vec<f64>,
        task: TaskKind,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            n,
            d,
            x,
            y,
            categorical: vec![false; d],
            task,
            num_classes,
            missing: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.n * self.d {
            return Err(Error::Data(format!(
                "predictor matrix has {} values, expected {}x{}",
                self.x.len(),
                self.n,
                self.d
            )));
        }
        if self.y.len() != self.n {
            return Err(Error::Data(format!(
                "response has {} values, expected {}",
                self.y.len(),
                self.n
            )));
        }
        if self.categorical.len() != self.d {
            return Err(Error::Data("categorical mask length differs from d".into()));
        }
        if let Some(m) = &self.missing {
            if m.len() != self.x.len() {
                return Err(Error::Data("missing mask length differs from n*d".into()));
            }
        }
        if self.task == TaskKind::Classification {
            if self.num_classes < 2 {
                return Err(Error::Data(format!(
                    "classification needs at least 2 classes, got {}",
                    self.num_classes
                )));
            }
            for &v in &self.y {
                if v.fract() != 0.0 || v < 0.0 || v >= self.num_classes as f64 {
                    return Err(Error::Data(format!(
                        "label {v} outside 0..{}",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.d + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.x[i * self.d + j]).collect()
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing.as_ref().map_or(false, |m| m[i * self.d + j])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.y.iter().map(|&v| v as usize).collect()
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        let mut missing = self.missing.as_ref().map(|_| Vec::with_capacity(idx.len() * self.d));
        for &i in idx {
            x.extend_from_slice(self.row(i));
            if let (Some(out), Some(m)) = (missing.as_mut(), self.missing.as_ref()) {
                out.extend_from_slice(&m[i * self.d..(i + 1) * self.d]);
            }
        }
        Dataset {
            n: idx.len(),
            d: self.d,
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            categorical: self.categorical.clone(),
            task: self.task,
            num_classes: self.num_classes,
            missing,
        }
    }

    /// Columns `cols` in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        let d = cols.len();
        let mut x = Vec::with_capacity(self.n * d);
        let mut missing = self.missing.as_ref().map(|_| Vec::with_capacity(self.n * d));
        for i in 0..self.n {
            for &j in cols {
                x.push(self.get(i, j));
                if let (Some(out), Some(m)) = (missing.as_mut(), self.missing.as_ref()) {
                    out.push(m[i * self.d + j]);
                }
            }
        }
        Dataset {
            n: self.n,
            d,
            x,
            y: self.y.clone(),
            categorical: cols.iter().map(|&j| self.categorical[j]).collect(),
            task: self.task,
            num_classes: self.num_classes,
            missing,
        }
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.num_classes.max(1)];
        for &v in &self.y {
            if let Some(s) = seen.get_mut(v as usize) {
                *s = true;
            }
        }
        seen.iter().filter(|&&s| s).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_labels() {
        let err = Dataset::new(2, 1, vec![0.0, 1.0], vec![0.0, 2.0], TaskKind::Classification, 2);
        assert!(err.is_err());
        assert!(Dataset::new(2, 1, vec![0.0, 1.0], vec![0.0, 1.0], TaskKind::Classification, 2).is_ok());
        assert!(Dataset::new(2, 1, vec![0.0, 1.0], vec![0.0, 1.0], TaskKind::Classification, 1).is_err());
    }

    #[test]
    fn row_and_column_selection() {
        let ds = Dataset::new(3, 2, vec![1., 2., 3., 4., 5., 6.], vec![0., 1., 2.], TaskKind::Regression, 0)
            .unwrap();
        let r = ds.select_rows(&[2, 0]);
        assert_eq!(r.x, vec![5., 6., 1., 2.]);
        assert_eq!(r.y, vec![2., 0.]);
        let c = ds.select_columns(&[1]);
        assert_eq!(c.x, vec![2., 4., 6.]);
    }
}
