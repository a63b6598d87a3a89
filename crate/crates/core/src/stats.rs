//! Descriptive statistics and two-sample tests.
//!
//! Voxels of one scan are spatially correlated, so p-values computed here
//! treat them as exchangeable samples and should be read as descriptive.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Linear-interpolation quantile (R type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("mean of an empty set".into()));
        }
        Ok(Self {
            n: values.len(),
            mean: mean(values),
            se: (sample_variance(values) / values.len() as f64).sqrt(),
        })
    }

    /// `self − other`, standard errors combined in quadrature.
    pub fn difference(&self, other: &MeanSe) -> (f64, f64) {
        (self.mean - other.mean, self.se.hypot(other.se))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Welch,
    Permutation { n_perm: usize, seed: u64 },
}

pub fn significance(a: &[f64], b: &[f64], method: TestMethod) -> Result<f64> {
    match method {
        TestMethod::Welch => welch_p(a, b),
        TestMethod::Permutation { n_perm, seed } => permutation_p(a, b, n_perm, seed),
    }
}

/// Two-sided unequal-variance t-test.
pub fn welch_p(a: &[f64], b: &[f64]) -> Result<f64> {
    check_sizes(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (qa, qb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    if t == 0.0 {
        return Ok(1.0);
    }
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::numeric(format!("t distribution with df {df}: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Two-sided permutation test on the difference of means, with the
/// add-one estimator `(1 + #{|Δ*| ≥ |Δ|}) / (1 + n_perm)`.
pub fn permutation_p(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    check_sizes(a, b)?;
    if n_perm == 0 {
        return Err(Error::Config("permutation test needs n_perm ≥ 1".into()));
    }
    let observed = (mean(a) - mean(b)).abs();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let total: f64 = pooled.iter().sum();
    let (na, nb) = (a.len(), b.len());
    // Shuffle only the smaller group's worth of labels.
    let k = na.min(nb);
    let tol = 1e-12 * observed.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        let (chosen, _) = pooled.partial_shuffle(&mut rng, k);
        let s: f64 = chosen.iter().sum();
        let (sa, sb) = if k == na {
            (s, total - s)
        } else {
            (total - s, s)
        };
        let diff = (sa / na as f64 - sb / nb as f64).abs();
        if diff >= observed - tol {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + n_perm) as f64)
}

fn check_sizes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input(format!(
            "two-sample test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Location summary and fixed-width histogram of one scalar field.
///
/// The histogram has `HIST_BINS` equal bins spanning `[min, max]`; bin `i`
/// covers `[min + i·w, min + (i+1)·w)` and the last bin is closed. When all
/// values coincide every count lands in bin 0 and the width is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p01: f64,
    pub p25: f64,
    pub p75: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

pub const HIST_BINS: usize = 32;

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("summary of an empty set".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        // Sum in sorted order so the result does not depend on row order.
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        let bin_width = (max - min) / HIST_BINS as f64;
        let mut counts = vec![0usize; HIST_BINS];
        for v in &sorted {
            let bin = if bin_width > 0.0 {
                (((v - min) / bin_width) as usize).min(HIST_BINS - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Ok(Self {
            n: sorted.len(),
            mean,
            median: quantile_sorted(&sorted, 0.5),
            p01: quantile_sorted(&sorted, 0.01),
            p25: quantile_sorted(&sorted, 0.25),
            p75: quantile_sorted(&sorted, 0.75),
            p99: quantile_sorted(&sorted, 0.99),
            min,
            max,
            bin_width,
            counts,
        })
    }
}
