//! Per-dataset z-scoring with clipping to four standard deviations.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskKind};
use crate::stats;
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

pub const CLIP: f64 = 4.0;

/// Column statistics fitted on one dataset (typically the training rows)
/// and applied to others. Missing cells are excluded from the fit and set
/// to 0 after normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    /// Population standard deviations; 0 marks a constant column.
    pub stds: Vec<f64>,
    /// Response statistics, regression only.
    pub y_stats: Option<(f64, f64)>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.n < 2 {
            return Err(Error::Data(format!("normalization needs at least 2 rows, got {}", ds.n)));
        }
        let mut means = Vec::with_capacity(ds.d);
        let mut stds = Vec::with_capacity(ds.d);
        for j in 0..ds.d {
            let col: Vec<f64> = (0..ds.n)
                .filter(|&i| !ds.is_missing(i, j))
                .map(|i| ds.get(i, j))
                .collect();
            means.push(stats::mean(&col));
            stds.push(if stats::is_constant(&col) {
                0.0
            } else {
                stats::variance(&col).sqrt()
            });
        }
        let y_stats = match ds.task {
            TaskKind::Regression => {
                let s = if stats::is_constant(&ds.y) {
                    0.0
                } else {
                    stats::variance(&ds.y).sqrt()
                };
                Some((stats::mean(&ds.y), s))
            }
            TaskKind::Classification => None,
        };
        Ok(Self {
            means,
            stds,
            y_stats,
        })
    }

    pub fn transform_value(&self, j: usize, v: f64) -> f64 {
        let centered = v - self.means[j];
        if self.stds[j] == 0.0 {
            0.0
        } else {
            (centered / self.stds[j]).clamp(-CLIP, CLIP)
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.d != self.means.len() {
            return Err(Error::Data(format!(
                "normalizer fitted on {} columns, dataset has {}",
                self.means.len(),
                ds.d
            )));
        }
        let mut out = ds.clone();
        for i in 0..ds.n {
            for j in 0..ds.d {
                let idx = i * ds.d + j;
                out.x[idx] = if ds.is_missing(i, j) {
                    0.0
                } else {
                    self.transform_value(j, ds.x[idx])
                };
            }
        }
        if let Some((m, s)) = self.y_stats {
            for v in out.y.iter_mut() {
                *v = if s == 0.0 {
                    0.0
                } else {
                    ((*v - m) / s).clamp(-CLIP, CLIP)
                };
            }
        }
        Ok(out)
    }

    /// Maps a normalized regression prediction back to the response scale.
    pub fn denormalize_y(&self, v: f64) -> f64 {
        match self.y_stats {
            Some((m, s)) if s != 0.0 => v * s + m,
            Some((m, _)) => m,
            None => v,
        }
    }

    pub fn y_scale(&self) -> f64 {
        match self.y_stats {
            Some((_, s)) if s != 0.0 => s,
            _ => 1.0,
        }
    }
}

/// Z-scores every column within the dataset, clips to `[-4, 4]`. Constant
/// columns become zeros. Regression responses are normalized as well.
pub fn normalize_dataset(ds: &Dataset) -> Result<Dataset> {
    Normalizer::fit(ds)?.apply(ds)
}

/// On-tape version of column normalization for an `n x d` matrix.
pub fn normalize_columns<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Data(format!("normalize_columns expects n x d with n >= 2, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let values = x.to_vec();
    let constant: Vec<bool> = (0..d)
        .map(|j| (1..n).all(|i| values[i * d + j] == values[j]))
        .collect();
    let guard: Vec<f64> = constant.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let keep: Vec<f64> = constant.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect();
    let tape = x.tape();
    let mean = x.mean_axis(0)?;
    let std = x.var_axis(0)?.add(tape.constant(Tensor::vector(guard)))?.sqrt();
    let z = x.sub(mean)?.div(std)?.clip(-CLIP, CLIP);
    Ok(z.mul(tape.constant(Tensor::vector(keep)))?)
}

/// On-tape normalization of a response vector.
pub fn normalize_vector<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let n = y.shape().iter().product::<usize>();
    normalize_columns(y.reshape(vec![n, 1])?)?
        .reshape(vec![n])
        .map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn ds(x: Vec<f64>, n: usize, d: usize) -> Dataset {
        Dataset::new(n, d, x, vec![0.0; n], TaskKind::Regression, 0).unwrap()
    }

    #[test]
    fn two_point_column() {
        let out = normalize_dataset(&ds(vec![0.0, 10.0], 2, 1)).unwrap();
        assert_eq!(out.x, vec![-1.0, 1.0]);
    }

    #[test]
    fn outlier_clipped() {
        let mut x: Vec<f64> = (0..99).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        x.push(100.0);
        let out = normalize_dataset(&ds(x, 100, 1)).unwrap();
        assert_eq!(out.x[99], 4.0);
        assert!(out.x.iter().all(|v| v.abs() <= 4.0));
    }

    #[test]
    fn constant_column_to_zeros() {
        let out = normalize_dataset(&ds(vec![3.0, 3.0, 3.0], 3, 1)).unwrap();
        assert_eq!(out.x, vec![0.0; 3]);
        // 0.1 summed three times and divided by 3 is not 0.1
        let out = normalize_dataset(&ds(vec![0.1; 3], 3, 1)).unwrap();
        assert_eq!(out.x, vec![0.0; 3]);
        let tape = Tape::new();
        let v = tape.param(Tensor::new(vec![3, 1], vec![0.1; 3]).unwrap());
        assert_eq!(normalize_columns(v).unwrap().to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn standardized_column_unchanged() {
        let x = vec![-1.0, 1.0, -1.0, 1.0];
        let out = normalize_dataset(&ds(x.clone(), 4, 1)).unwrap();
        assert_eq!(out.x, x);
    }

    #[test]
    fn missing_cells_excluded_and_zeroed() {
        let mut d = ds(vec![0.0, f64::NAN, 10.0, 1.0], 2, 2);
        d.missing = Some(vec![false, true, false, false]);
        let out = normalize_dataset(&d).unwrap();
        assert_eq!(out.x, vec![-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_row_rejected() {
        assert!(normalize_dataset(&ds(vec![1.0], 1, 1)).is_err());
    }

    #[test]
    fn tape_and_plain_paths_agree_bitwise() {
        let x = vec![0.3, -2.0, 0.1, 5.0, 1.7, 0.1, 9.0, 5.0, 0.1, 60.0, 2.2, 0.1];
        let plain = normalize_dataset(&ds(x.clone(), 4, 3)).unwrap();
        let tape = Tape::new();
        let v = tape.param(Tensor::new(vec![4, 3], x).unwrap());
        let out = normalize_columns(v).unwrap().to_vec();
        assert_eq!(out, plain.x);
    }
}
