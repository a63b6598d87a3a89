//! Voxel tables: N sequence vectors in ℝ^d with optional grid coordinates
//! and a brain-mask flag per row.

use crate::error::{Error, Result};

/// Channel order used when a table is created without explicit names.
pub const DEFAULT_CHANNELS: [&str; 5] = ["T1", "T1c", "T2", "FLAIR", "ADC"];

pub fn default_channels(d: usize) -> Vec<String> {
    if d == DEFAULT_CHANNELS.len() {
        DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..d).map(|k| format!("c{k}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelTable {
    channels: Vec<String>,
    values: Vec<f64>,
    coords: Option<Vec<[i64; 3]>>,
    mask: Option<Vec<bool>>,
}

impl VoxelTable {
    /// Builds a table from row-major values. Every value must be finite and
    /// the channel names unique.
    pub fn new(channels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let d = channels.len();
        if d == 0 {
            return Err(Error::Input(
                "a voxel table needs at least one channel".into(),
            ));
        }
        for (i, name) in channels.iter().enumerate() {
            if channels[..i].contains(name) {
                return Err(Error::Input(format!("duplicate channel name {name:?}")));
            }
        }
        if values.is_empty() || !values.len().is_multiple_of(d) {
            return Err(Error::Input(format!(
                "{} values do not form a nonempty table with {d} channels",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite intensity in row {}, channel {}",
                pos / d,
                channels[pos % d]
            )));
        }
        Ok(Self {
            channels,
            values,
            coords: None,
            mask: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(channels: Vec<String>, rows: &[R]) -> Result<Self> {
        let d = channels.len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Input(format!(
                    "row {i} has {} entries, expected {d}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(channels, values)
    }

    pub fn with_coords(mut self, coords: Vec<[i64; 3]>) -> Result<Self> {
        if coords.len() != self.n() {
            return Err(Error::Input(format!(
                "{} coordinates for {} rows",
                coords.len(),
                self.n()
            )));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n() {
            return Err(Error::Input(format!(
                "{} mask flags for {} rows",
                mask.len(),
                self.n()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.d()
    }

    pub fn d(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.d())
    }

    pub fn coords(&self) -> Option<&[[i64; 3]]> {
        self.coords.as_deref()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Indices of rows inside the brain mask (all rows when no mask is set).
    pub fn masked_indices(&self) -> Vec<usize> {
        match &self.mask {
            Some(m) => (0..self.n()).filter(|&i| m[i]).collect(),
            None => (0..self.n()).collect(),
        }
    }

    /// New table holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Input("row selection is empty".into()));
        }
        let d = self.d();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.n() {
                return Err(Error::Input(format!(
                    "row index {i} out of range for {} rows",
                    self.n()
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Ok(Self {
            channels: self.channels.clone(),
            values,
            coords: self
                .coords
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            mask: self
                .mask
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        })
    }

    /// Copy of the table with every row passed through `f`. Coordinates and
    /// mask are kept.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<Self> {
        let d = self.d();
        let mut values = vec![0.0; self.values.len()];
        for (src, dst) in self.rows().zip(values.chunks_exact_mut(d)) {
            f(src, dst);
        }
        let mut out = Self::new(self.channels.clone(), values)?;
        out.coords = self.coords.clone();
        out.mask = self.mask.clone();
        Ok(out)
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.d() != d {
            return Err(Error::Input(format!(
                "table has {} channels, expected {d}",
                self.d()
            )));
        }
        Ok(())
    }
}
