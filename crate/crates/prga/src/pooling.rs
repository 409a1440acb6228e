//! Learnable multi-aggregation pooling of refined patch features.
//!
//! Each aggregator reduces the P x d patch matrix to one d-vector column
//! statistic, projects it with its own matrix, and scales it by a learnable
//! coefficient; the branches are summed into the image embedding.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Column statistic over patch rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Max,
    Min,
    Std,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::Mean,
        Aggregator::Max,
        Aggregator::Min,
        Aggregator::Std,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Min => "min",
            Aggregator::Std => "std",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            "min" => Ok(Aggregator::Min),
            "std" => Ok(Aggregator::Std),
            other => Err(Error::Config(format!("unknown aggregator {other:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One pooling branch: statistic, learnable weight, projection (d_out x d_in).
#[derive(Debug, Clone, PartialEq)]
pub struct AggBranch {
    pub kind: Aggregator,
    pub gamma: f64,
    pub w: Mat,
}

/// Ordered set of pooling branches sharing projection dims.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub branches: Vec<AggBranch>,
}

impl PoolingParams {
    pub fn new(branches: Vec<AggBranch>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Config("pooling needs at least one aggregator".into()));
        }
        let (d_out, d_in) = (branches[0].w.rows(), branches[0].w.cols());
        for b in &branches {
            if b.w.rows() != d_out || b.w.cols() != d_in {
                return Err(Error::dim(
                    "pooling",
                    format!(
                        "projection {}x{} differs from {}x{}",
                        b.w.rows(),
                        b.w.cols(),
                        d_out,
                        d_in
                    ),
                ));
            }
            if !b.gamma.is_finite() || !b.w.is_finite() {
                return Err(Error::Config("pooling parameters must be finite".into()));
            }
        }
        Ok(Self { branches })
    }

    pub fn d_in(&self) -> usize {
        self.branches[0].w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.branches[0].w.rows()
    }

    pub fn kinds(&self) -> Vec<Aggregator> {
        self.branches.iter().map(|b| b.kind).collect()
    }
}

/// Default aggregator trio.
pub const DEFAULT_AGGREGATORS: [Aggregator; 3] =
    [Aggregator::Mean, Aggregator::Max, Aggregator::Std];

/// Column statistic of a P x d matrix as a 1 x d row. Std is the population
/// standard deviation; a single row has std zero.
pub fn aggregate(kind: Aggregator, f: &Mat) -> Result<Mat> {
    let (p, d) = (f.rows(), f.cols());
    if p == 0 || d == 0 {
        return Err(Error::EmptyInput {
            op: format!("aggregate({kind})"),
        });
    }
    let mut out = Mat::zeros(1, d);
    match kind {
        Aggregator::Mean => {
            for row in 0..p {
                for (o, x) in out.row_mut(0).iter_mut().zip(f.row(row)) {
                    *o += x;
                }
            }
            for o in out.data_mut() {
                *o /= p as f64;
            }
        }
        Aggregator::Max => {
            out.row_mut(0).copy_from_slice(f.row(0));
            for row in 1..p {
                for (o, &x) in out.row_mut(0).iter_mut().zip(f.row(row)) {
                    if x > *o {
                        *o = x;
                    }
                }
            }
        }
        Aggregator::Min => {
            out.row_mut(0).copy_from_slice(f.row(0));
            for row in 1..p {
                for (o, &x) in out.row_mut(0).iter_mut().zip(f.row(row)) {
                    if x < *o {
                        *o = x;
                    }
                }
            }
        }
        Aggregator::Std => {
            let mean = aggregate(Aggregator::Mean, f)?;
            for row in 0..p {
                for j in 0..d {
                    let diff = f[(row, j)] - mean[(0, j)];
                    out[(0, j)] += diff * diff;
                }
            }
            for o in out.data_mut() {
                *o = (*o / p as f64).sqrt();
            }
        }
    }
    Ok(out)
}

/// Weighted sum of projected statistics: `sum_m gamma_m * (aggregate_m(F) W_m^T)`.
/// The caller normalizes the result before it queries the cache.
pub fn multi_aggregate(f: &Mat, params: &PoolingParams) -> Result<Mat> {
    if f.cols() != params.d_in() {
        return Err(Error::dim(
            "multi_aggregate",
            format!("features have dim {}, pooling expects {}", f.cols(), params.d_in()),
        ));
    }
    let mut out = Mat::zeros(1, params.d_out());
    for branch in &params.branches {
        let pooled = aggregate(branch.kind, f)?;
        let projected = pooled.matmul_nt(&branch.w);
        out.add_assign(&projected.scale(branch.gamma));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_rows() -> Mat {
        Mat::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]])
    }

    #[test]
    fn mean_max_min_std_examples() {
        let f = two_rows();
        assert_eq!(aggregate(Aggregator::Mean, &f).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(aggregate(Aggregator::Max, &f).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(aggregate(Aggregator::Min, &f).unwrap().data(), &[1.0, 1.0]);
        // population std of {1,3} is 1
        assert_eq!(aggregate(Aggregator::Std, &f).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn std_of_single_row_is_zero() {
        let f = Mat::from_rows(&[vec![5.0, -2.0, 0.25]]);
        assert_eq!(
            aggregate(Aggregator::Std, &f).unwrap().data(),
            &[0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn empty_input_rejected() {
        let f = Mat::zeros(0, 3);
        assert!(matches!(
            aggregate(Aggregator::Mean, &f),
            Err(Error::EmptyInput { .. })
        ));
    }

    fn identity_branch(kind: Aggregator, gamma: f64, d: usize) -> AggBranch {
        AggBranch {
            kind,
            gamma,
            w: Mat::identity(d),
        }
    }

    #[test]
    fn mean_identity_branch_is_column_mean() {
        let f = two_rows();
        let params = PoolingParams::new(vec![identity_branch(Aggregator::Mean, 1.0, 2)]).unwrap();
        assert_eq!(multi_aggregate(&f, &params).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_gammas_give_zero_vector() {
        let f = two_rows();
        let params = PoolingParams::new(vec![
            identity_branch(Aggregator::Mean, 0.0, 2),
            identity_branch(Aggregator::Max, 0.0, 2),
            identity_branch(Aggregator::Std, 0.0, 2),
        ])
        .unwrap();
        assert_eq!(multi_aggregate(&f, &params).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_max_combination_cancels() {
        // 2*mean - 1*max over {[1,0],[0,1]} = 2*[0.5,0.5] - [1,1] = [0,0]
        let f = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let params = PoolingParams::new(vec![
            identity_branch(Aggregator::Mean, 2.0, 2),
            identity_branch(Aggregator::Max, -1.0, 2),
        ])
        .unwrap();
        assert_eq!(multi_aggregate(&f, &params).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_in_gamma() {
        let f = Mat::from_rows(&[vec![0.2, -1.0], vec![2.0, 0.5], vec![-0.3, 0.9]]);
        let w = Mat::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]);
        let at = |g1: f64, g2: f64| {
            let params = PoolingParams::new(vec![
                AggBranch { kind: Aggregator::Mean, gamma: g1, w: w.clone() },
                AggBranch { kind: Aggregator::Std, gamma: g2, w: w.clone() },
            ])
            .unwrap();
            multi_aggregate(&f, &params).unwrap()
        };
        let a = at(1.0, 0.0);
        let b = at(0.0, 1.0);
        let combo = at(3.0, -2.0);
        let expect = a.scale(3.0).add(&b.scale(-2.0));
        assert!(combo.max_abs_diff(&expect) < 1e-12);
    }
}
