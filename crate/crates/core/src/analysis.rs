//! PCA of encoding matrices and the sum-collision diagnostic.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{ArrayView2, Axis};

use crate::encodings::{PeMatrix, SegmentTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Column-covariance eigenvalues, descending, negatives clamped to 0.
    pub eigenvalues: Vec<f64>,
    /// `cumulative[i]` is the variance share of the first `i + 1` components.
    pub cumulative: Vec<f64>,
    /// The input had no variance; every ratio is reported as 1.
    pub degenerate: bool,
}

impl Pca {
    /// Smallest 1-based `m` with `cumulative[m-1] >= threshold`.
    pub fn components_for(&self, threshold: f64) -> Option<usize> {
        self.cumulative.iter().position(|&c| c >= threshold).map(|i| i + 1)
    }

    /// `component_index,eigenvalue,cumulative_ratio`, 1-based index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component_index,eigenvalue,cumulative_ratio\n");
        for (i, (e, c)) in self.eigenvalues.iter().zip(&self.cumulative).enumerate() {
            writeln!(out, "{},{e:.12e},{c:.12}", i + 1).expect("writing to a String");
        }
        out
    }
}

/// Cumulative explained-variance ratios of the mean-centered columns.
pub fn pca_cumulative_variance(matrix: ArrayView2<'_, f64>) -> Result<Pca> {
    let (rows, cols) = matrix.dim();
    if rows < 2 || cols == 0 {
        return Err(Error::Shape(format!(
            "PCA needs at least 2 rows and 1 column, got {rows}x{cols}"
        )));
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::Malformed("PCA input has non-finite entries".into()));
    }
    let mean = matrix.mean_axis(Axis(0)).expect("rows >= 2");
    let centered = &matrix - &mean.insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (rows - 1) as f64;
    let dm = DMatrix::from_fn(cols, cols, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(dm)
        .eigenvalues
        .iter()
        .map(|&e| e.max(0.0))
        .collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eigenvalues.iter().sum();
    let scale = matrix.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    if total <= 1e-24 * scale * scale {
        return Ok(Pca {
            cumulative: vec![1.0; cols],
            eigenvalues,
            degenerate: true,
        });
    }
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = eigenvalues
        .iter()
        .map(|&e| {
            acc += e;
            (acc / total).min(1.0)
        })
        .collect();
    *cumulative.last_mut().expect("cols >= 1") = 1.0;
    Ok(Pca {
        eigenvalues,
        cumulative,
        degenerate: false,
    })
}

/// Pairs `t != k` (`t` in `1..=t_max`, `k` in `1..=k_max`) for which
/// `PE_t + SE_k` and `PE_k + SE_t` differ by at most `tol` in every
/// coordinate. `SE_t` beyond the table uses the table's natural extension;
/// tables without one (learned) skip those pairs.
pub fn sum_collision_check(
    pe: &PeMatrix,
    se: &SegmentTable,
    k_max: usize,
    t_max: usize,
    tol: f64,
) -> Result<Vec<(usize, usize)>> {
    if se.dim() != pe.dim() {
        return Err(Error::Shape(format!(
            "segment width {} differs from position width {}",
            se.dim(),
            pe.dim()
        )));
    }
    let top = t_max.max(k_max);
    if top >= pe.rows() {
        return Err(Error::PositionOutOfRange {
            position: top,
            max: pe.rows(),
        });
    }
    let mut out = Vec::new();
    for t in 1..=t_max {
        let Some(se_t) = se.extended_row(t) else { continue };
        for k in 1..=k_max {
            if t == k {
                continue;
            }
            let Some(se_k) = se.extended_row(k) else { continue };
            let lhs = &pe.row(t) + &se_k;
            let rhs = &pe.row(k) + &se_t;
            let diff = lhs
                .iter()
                .zip(rhs.iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if diff <= tol {
                out.push((t, k));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::sinusoidal_pe;
    use ndarray::{array, Array2};

    #[test]
    fn rank_one_and_degenerate() {
        let u = array![1.0, -2.0, 3.0, 0.5];
        let v = array![2.0, 1.0, -1.0];
        let m = Array2::from_shape_fn((4, 3), |(i, j)| u[i] * v[j]);
        let p = pca_cumulative_variance(m.view()).unwrap();
        assert!(p.cumulative.iter().all(|&c| (c - 1.0).abs() < 1e-9));
        let flat = Array2::from_elem((5, 3), 2.5);
        let p = pca_cumulative_variance(flat.view()).unwrap();
        assert!(p.degenerate && p.cumulative == vec![1.0; 3]);
        assert!(pca_cumulative_variance(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn two_equal_uncorrelated_columns() {
        // columns +-1 in all four sign combinations: equal variance, zero covariance
        let m = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let p = pca_cumulative_variance(m.view()).unwrap();
        assert!((p.cumulative[0] - 0.5).abs() < 1e-12);
        assert_eq!(p.cumulative[1], 1.0);
        assert!((p.eigenvalues[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!(p
            .to_csv()
            .starts_with("component_index,eigenvalue,cumulative_ratio\n1,"));
    }

    #[test]
    fn collisions() {
        let pe = sinusoidal_pe(80, 16).unwrap();
        let sin = SegmentTable::sinusoidal(4, 16).unwrap();
        let found = sum_collision_check(&pe, &sin, 4, 4, 0.0).unwrap();
        // every ordered pair of distinct indices in 1..=4
        assert_eq!(found.len(), 12);
        assert!(sum_collision_check(&pe, &sin, 1, 1, 0.0).unwrap().is_empty());
        assert_eq!(sum_collision_check(&pe, &sin, 1, 8, 0.0).unwrap().len(), 7);
        let one = SegmentTable::onehot(4, 16).unwrap();
        assert!(sum_collision_check(&pe, &one, 4, 64, 1e-9).unwrap().is_empty());
        assert!(sum_collision_check(&pe, &one, 1, 1, 1e-9).unwrap().is_empty());
        let narrow = SegmentTable::onehot(4, 8).unwrap();
        assert!(sum_collision_check(&pe, &narrow, 4, 4, 0.0).is_err());
    }
}
