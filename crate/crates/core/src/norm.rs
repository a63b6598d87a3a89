//! Per-channel intensity normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;
use crate::table::VoxelTable;

/// IQR of the standard normal distribution.
pub const NORMAL_IQR: f64 = 1.348_979_500_392_163_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    /// Median and IQR / 1.349.
    Robust,
    /// Mean and sample standard deviation.
    Zscore,
    None,
}

impl std::str::FromStr for NormMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robust" => Ok(Self::Robust),
            "zscore" => Ok(Self::Zscore),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown normalization method {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub method: NormMethod,
    pub per_channel_center: Vec<f64>,
    pub per_channel_scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(d: usize) -> Self {
        Self {
            method: NormMethod::None,
            per_channel_center: vec![0.0; d],
            per_channel_scale: vec![1.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.per_channel_center.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_channel_center.len() != self.per_channel_scale.len() {
            return Err(Error::Validation(
                "normalization center and scale lengths differ".into(),
            ));
        }
        if self.per_channel_center.iter().any(|c| !c.is_finite())
            || self
                .per_channel_scale
                .iter()
                .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Validation(
                "normalization centers must be finite and scales positive".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, raw: &[f64], out: &mut [f64]) {
        for k in 0..raw.len() {
            out[k] = (raw[k] - self.per_channel_center[k]) / self.per_channel_scale[k];
        }
    }

    pub fn invert(&self, normalized: &[f64], out: &mut [f64]) {
        for k in 0..normalized.len() {
            out[k] = normalized[k] * self.per_channel_scale[k] + self.per_channel_center[k];
        }
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; raw.len()];
        self.apply(raw, &mut out);
        out
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; normalized.len()];
        self.invert(normalized, &mut out);
        out
    }

    pub fn normalize_table(&self, table: &VoxelTable) -> Result<VoxelTable> {
        table.check_dim(self.d())?;
        table.map_rows(|src, dst| self.apply(src, dst))
    }
}

/// Per-channel statistics over all rows of `table`.
pub fn compute_norm_stats(table: &VoxelTable, method: NormMethod) -> Result<NormStats> {
    let d = table.d();
    if method == NormMethod::None {
        return Ok(NormStats::identity(d));
    }
    let n = table.n();
    if n < 2 {
        return Err(Error::Input(format!(
            "normalization needs at least 2 rows, got {n}"
        )));
    }
    let mut center = Vec::with_capacity(d);
    let mut scale = Vec::with_capacity(d);
    let mut column = Vec::with_capacity(n);
    for k in 0..d {
        column.clear();
        column.extend(table.rows().map(|r| r[k]));
        let (c, s) = match method {
            NormMethod::Robust => {
                column.sort_by(f64::total_cmp);
                let median = quantile_sorted(&column, 0.5);
                let iqr = quantile_sorted(&column, 0.75) - quantile_sorted(&column, 0.25);
                (median, iqr / NORMAL_IQR)
            }
            NormMethod::Zscore => {
                let mean = column.iter().sum::<f64>() / n as f64;
                let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (mean, var.sqrt())
            }
            NormMethod::None => unreachable!(),
        };
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateScale {
                channel: k,
                name: table.channels()[k].clone(),
            });
        }
        center.push(c);
        scale.push(s);
    }
    Ok(NormStats {
        method,
        per_channel_center: center,
        per_channel_scale: scale,
    })
}
