use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numkit::{Matrix, RngStream};
use crate::synthdata::AttributedMixture;

/// Size of the fresh true-sample set MMD is measured against.
pub const MMD_REFERENCE_SIZE: usize = 10_000;

/// Cap on points used for the median-distance bandwidth.
const MEDIAN_SUBSAMPLE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub mean_log_density: f64,
    pub mmd2: f64,
    pub n: usize,
}

/// Fresh true samples with their kernel bandwidth and precomputed
/// within-set kernel mean, reusable across many scored sample sets.
#[derive(Debug, Clone)]
pub struct MmdReference {
    points: Matrix,
    bandwidth: f64,
    self_term: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over (at most the first 1000) rows.
pub fn median_heuristic(points: &Matrix) -> f64 {
    let m = points.rows().min(MEDIAN_SUBSAMPLE);
    let mut d = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(points.row(i), points.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, v, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *v > 0.0 {
        *v
    } else {
        1.0
    }
}

/// Mean of `k(a_i, b_j)` over all pairs, skipping `i == j` when `same`.
fn kernel_mean(a: &Matrix, b: &Matrix, bandwidth: f64, same: bool) -> f64 {
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    // collected in order so the sum does not depend on thread scheduling
    let per_row: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            let mut s = 0.0;
            for j in 0..b.rows() {
                if same && i == j {
                    continue;
                }
                s += (-gamma * sq_dist(x, b.row(j))).exp();
            }
            s
        })
        .collect();
    let total: f64 = per_row.iter().sum();
    let pairs = if same {
        a.rows() * (a.rows() - 1)
    } else {
        a.rows() * b.rows()
    };
    total / pairs as f64
}

/// Unbiased squared MMD with a Gaussian kernel of the given bandwidth.
pub fn mmd2_unbiased(x: &Matrix, y: &Matrix, bandwidth: f64) -> Result<f64> {
    check_dim("mmd widths", x.cols(), y.cols())?;
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::InvalidArgument("unbiased MMD needs two points per set".into()));
    }
    Ok(kernel_mean(x, x, bandwidth, true) + kernel_mean(y, y, bandwidth, true)
        - 2.0 * kernel_mean(x, y, bandwidth, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub p_value: f64,
}

/// Null distribution of the MMD statistic under random relabeling of the
/// pooled points.
pub fn mmd_permutation_test(
    x: &Matrix,
    y: &Matrix,
    bandwidth: f64,
    permutations: usize,
    rng: &mut RngStream,
) -> Result<PermutationTest> {
    let statistic = mmd2_unbiased(x, y, bandwidth)?;
    let pooled = Matrix::vstack(&[x.clone(), y.clone()])?;
    let mut idx: Vec<usize> = (0..pooled.rows()).collect();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        rng.shuffle(&mut idx);
        let a = pooled.select_rows(&idx[..x.rows()]);
        let b = pooled.select_rows(&idx[x.rows()..]);
        null.push(mmd2_unbiased(&a, &b, bandwidth)?);
    }
    let n = null.len().max(1) as f64;
    let null_mean = null.iter().sum::<f64>() / n;
    let null_std = (null.iter().map(|v| (v - null_mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest {
        statistic,
        null_mean,
        null_std,
        p_value: (exceed + 1) as f64 / (null.len() + 1) as f64,
    })
}

impl MmdReference {
    pub fn new(points: Matrix) -> Result<Self> {
        if points.rows() < 2 {
            return Err(Error::InvalidArgument("MMD reference needs two points".into()));
        }
        let bandwidth = median_heuristic(&points);
        let self_term = kernel_mean(&points, &points, bandwidth, true);
        Ok(Self {
            points,
            bandwidth,
            self_term,
        })
    }

    /// `MMD_REFERENCE_SIZE` fresh draws from `mix`.
    pub fn draw(mix: &AttributedMixture, rng: &mut RngStream) -> Result<Self> {
        Self::new(mix.sample_points(MMD_REFERENCE_SIZE, rng))
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn mmd2(&self, x: &Matrix) -> Result<f64> {
        check_dim("mmd widths", self.points.cols(), x.cols())?;
        if x.rows() < 2 {
            return Err(Error::InvalidArgument("unbiased MMD needs two points per set".into()));
        }
        Ok(kernel_mean(x, x, self.bandwidth, true) + self.self_term
            - 2.0 * kernel_mean(x, &self.points, self.bandwidth, false))
    }
}

pub fn mean_log_density(mix: &AttributedMixture, samples: &Matrix) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(Error::Empty("quality samples"));
    }
    let total: f64 = samples.row_iter().map(|x| mix.log_density(x)).sum::<Result<f64>>()?;
    Ok(total / samples.rows() as f64)
}

/// Mean true log-density and squared MMD against `reference`.
pub fn quality_score(mix: &AttributedMixture, samples: &Matrix, reference: &MmdReference) -> Result<QualityScore> {
    Ok(QualityScore {
        mean_log_density: mean_log_density(mix, samples)?,
        mmd2: reference.mmd2(samples)?,
        n: samples.rows(),
    })
}
