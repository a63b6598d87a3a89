//! Longitudinal evaluation against a frozen baseline landscape.
//!
//! Two ROIs anchor the healthy and tumour regimes at baseline; their
//! centroids define the healthy→tumour axis. Every later scan is evaluated
//! under the baseline model, never retrained, and summarized by
//!
//! * δE: mean energy of healthy-basin voxels minus the baseline healthy-basin
//!   mean (the whole-mask difference is reported alongside), and
//! * drift: mean projection of all follow-up voxels onto the axis minus the
//!   mean projection of the baseline healthy-basin voxels. Positive drift
//!   means displacement toward the tumour centroid.
//!
//! Uncertainties are standard errors of the mean combined in quadrature.
//! p-values compare the two healthy-basin energy samples and treat voxels as
//! independent, which they are not; read them as descriptive.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{
    barrier_height, basin_width, find_basins, line_profile, BasinMap, FlowConfig, LineProfile,
};
use crate::io::sha256_hex;
use crate::model::{EnergyModel, Want};
use crate::norm::{compute_norm_stats, NormStats};
use crate::stats::{permutation_p, welch_p, MeanSe};
use crate::table::VoxelTable;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub struct VoxelBox {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

/// How an ROI picks its voxels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum RoiSelector {
    /// Explicit row indices into the baseline table.
    Rows(Vec<usize>),
    /// Inclusive axis-aligned box in voxel coordinates (masked rows only).
    Box(VoxelBox),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roi {
    pub name: String,
    pub selector: RoiSelector,
}

impl Roi {
    pub fn resolve(&self, table: &VoxelTable) -> Result<Vec<usize>> {
        let rows = match &self.selector {
            RoiSelector::Rows(rows) => {
                let mut seen = rows.clone();
                seen.sort_unstable();
                if seen.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Input(format!("ROI {} lists a row twice", self.name)));
                }
                if let Some(&bad) = rows.iter().find(|&&i| i >= table.n()) {
                    return Err(Error::Input(format!(
                        "ROI {} row {bad} is out of range ({} rows)",
                        self.name,
                        table.n()
                    )));
                }
                rows.clone()
            }
            RoiSelector::Box(b) => {
                let coords = table.coords().ok_or_else(|| {
                    Error::Input(format!(
                        "ROI {} is a box but the table has no x,y,z columns",
                        self.name
                    ))
                })?;
                table
                    .masked_indices()
                    .into_iter()
                    .filter(|&i| (0..3).all(|a| (b.min[a]..=b.max[a]).contains(&coords[i][a])))
                    .collect()
            }
        };
        if rows.is_empty() {
            return Err(Error::Input(format!("ROI {} selects no voxels", self.name)));
        }
        Ok(rows)
    }
}

/// ROI file: `{"version":1,"healthy":{"rows":[…]},"tumour":{"box":{…}}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiFile {
    pub version: u32,
    pub healthy: RoiSelector,
    pub tumour: RoiSelector,
}

impl RoiFile {
    pub fn rois(&self) -> (Roi, Roi) {
        (
            Roi {
                name: "healthy".into(),
                selector: self.healthy.clone(),
            },
            Roi {
                name: "tumour".into(),
                selector: self.tumour.clone(),
            },
        )
    }
}

pub fn roi_centroid(table: &VoxelTable, roi: &Roi) -> Result<Vec<f64>> {
    let rows = roi.resolve(table)?;
    let mut c = vec![0.0; table.d()];
    for &i in &rows {
        for (acc, v) in c.iter_mut().zip(table.row(i)) {
            *acc += v;
        }
    }
    let n = rows.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    Ok(c)
}

/// Healthy→tumour axis in normalized sequence space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisFrame {
    pub c_h: Vec<f64>,
    pub c_t: Vec<f64>,
    pub direction: Vec<f64>,
    pub length: f64,
}

pub fn build_axis(c_h: &[f64], c_t: &[f64]) -> Result<AxisFrame> {
    if c_h.len() != c_t.len() {
        return Err(Error::Input("centroids have different dimensions".into()));
    }
    let diff: Vec<f64> = c_t.iter().zip(c_h).map(|(t, h)| t - h).collect();
    let length = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(length > 0.0) {
        return Err(Error::Geometry(
            "degenerate axis: healthy and tumour centroids coincide".into(),
        ));
    }
    Ok(AxisFrame {
        c_h: c_h.to_vec(),
        c_t: c_t.to_vec(),
        direction: diff.iter().map(|v| v / length).collect(),
        length,
    })
}

impl AxisFrame {
    /// `⟨u − c_H, d̂⟩`: 0 at the healthy centroid, `length` at the tumour one.
    pub fn project(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.c_h)
            .zip(&self.direction)
            .map(|((x, h), d)| (x - h) * d)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEnergy {
    pub delta: f64,
    pub se: f64,
    pub baseline: MeanSe,
    pub followup: MeanSe,
    pub baseline_energies: Vec<f64>,
    pub followup_energies: Vec<f64>,
}

/// Mean energy shift of `followup` relative to `baseline`, both already in
/// the model's normalized space.
pub fn delta_energy(
    model: &EnergyModel,
    baseline: &VoxelTable,
    followup: &VoxelTable,
) -> Result<DeltaEnergy> {
    let energies = |t: &VoxelTable| -> Result<Vec<f64>> {
        t.check_dim(model.d())?;
        t.rows().map(|u| model.energy(u)).collect()
    };
    let baseline_energies = energies(baseline)?;
    let followup_energies = energies(followup)?;
    delta_from_energies(baseline_energies, followup_energies)
}

fn delta_from_energies(
    baseline_energies: Vec<f64>,
    followup_energies: Vec<f64>,
) -> Result<DeltaEnergy> {
    let b = MeanSe::of(&baseline_energies)?;
    let f = MeanSe::of(&followup_energies)?;
    let (delta, se) = f.difference(&b);
    Ok(DeltaEnergy {
        delta,
        se,
        baseline: b,
        followup: f,
        baseline_energies,
        followup_energies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub drift: f64,
    pub se: f64,
    pub baseline: MeanSe,
    pub followup: MeanSe,
}

/// Change of the mean axis projection from `baseline` to `followup`.
pub fn drift(frame: &AxisFrame, baseline: &VoxelTable, followup: &VoxelTable) -> Result<Drift> {
    let proj = |t: &VoxelTable| -> Result<Vec<f64>> {
        t.check_dim(frame.c_h.len())?;
        Ok(t.rows().map(|u| frame.project(u)).collect())
    };
    let b = MeanSe::of(&proj(baseline)?)?;
    let f = MeanSe::of(&proj(followup)?)?;
    let (drift, se) = f.difference(&b);
    Ok(Drift {
        drift,
        se,
        baseline: b,
        followup: f,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPolicy {
    /// Follow-ups use the baseline statistics embedded in the model.
    Baseline,
    /// Follow-ups are normalized with their own statistics (same method).
    PerScan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    /// Follow the gradient flow until a known minimum is reached.
    Descent,
    /// Nearest minimum in sequence space (cheap approximation).
    NearestMinimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongitudinalConfig {
    pub norm_policy: NormPolicy,
    pub membership: Membership,
    /// Baseline rows used as descent seeds for basin detection.
    pub basin_seeds: usize,
    pub n_perm: usize,
    pub seed: u64,
    pub profile_samples: usize,
    pub profile_margin: f64,
    /// Level offset for the healthy basin width along the axis.
    pub width_level: f64,
    pub flow: FlowConfig,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        Self {
            norm_policy: NormPolicy::Baseline,
            membership: Membership::Descent,
            basin_seeds: 2000,
            n_perm: 10_000,
            seed: 0,
            profile_samples: crate::geometry::PROFILE_SAMPLES,
            profile_margin: crate::geometry::PROFILE_MARGIN,
            width_level: 0.5,
            flow: FlowConfig::default(),
        }
    }
}

impl LongitudinalConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if self.basin_seeds == 0 || self.n_perm == 0 || self.profile_samples < 2 {
            return Err(Error::Config(
                "basin_seeds and n_perm must be ≥ 1, profile_samples ≥ 2".into(),
            ));
        }
        if !(self.profile_margin >= 0.0) || !(self.width_level > 0.0) {
            return Err(Error::Config(
                "profile_margin ≥ 0 and width_level > 0 required".into(),
            ));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSummary {
    #[serde(rename = "c_H")]
    pub c_h: Vec<f64>,
    #[serde(rename = "c_T")]
    pub c_t: Vec<f64>,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSummary {
    /// Masked voxels.
    pub n: usize,
    /// Voxels in the healthy basin.
    pub n_healthy: usize,
    /// Mean energy over the healthy basin, with its standard error.
    #[serde(rename = "mean_E")]
    pub mean_e: f64,
    pub se: f64,
    #[serde(rename = "mean_E_mask")]
    pub mean_e_mask: f64,
    pub se_mask: f64,
    /// Mean axis projection of the healthy-basin voxels.
    pub mean_projection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimepointResult {
    pub label: String,
    pub n: usize,
    pub n_healthy: usize,
    #[serde(rename = "mean_E")]
    pub mean_e: f64,
    #[serde(rename = "delta_E")]
    pub delta_e: f64,
    #[serde(rename = "se_delta_E")]
    pub se_delta_e: f64,
    #[serde(rename = "delta_E_mask")]
    pub delta_e_mask: f64,
    #[serde(rename = "se_delta_E_mask")]
    pub se_delta_e_mask: f64,
    pub mean_projection: f64,
    pub drift: f64,
    pub se_drift: f64,
    pub p_welch: f64,
    pub p_perm: f64,
}

/// Last time point against baseline, or `None` without follow-ups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalSummary {
    pub label: String,
    pub drift: f64,
    pub se_drift: f64,
    #[serde(rename = "delta_E")]
    pub delta_e: f64,
    #[serde(rename = "se_delta_E")]
    pub se_delta_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSummary {
    pub barrier_height: Option<f64>,
    pub healthy_basin_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Digests {
    pub model: String,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongitudinalReport {
    pub version: u32,
    pub axis: AxisSummary,
    pub baseline: BaselineSummary,
    pub timepoints: Vec<TimepointResult>,
    #[serde(rename = "final")]
    pub final_summary: Option<FinalSummary>,
    pub profile: ProfileSummary,
    pub digests: Digests,
}

impl LongitudinalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = crate::io::from_json(text)?;
        if report.version != REPORT_VERSION {
            return Err(Error::Validation(format!(
                "report version {} is not supported",
                report.version
            )));
        }
        Ok(report)
    }
}

/// One scatter point per masked voxel: axis projection, energy, ‖∇E‖.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub label: String,
    pub projection: Vec<f64>,
    pub energy: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalOutput {
    pub report: LongitudinalReport,
    pub frame: AxisFrame,
    pub basins: BasinMap,
    pub healthy_basin: usize,
    pub profile: LineProfile,
    /// Baseline first, then each follow-up.
    pub plots: Vec<PlotTable>,
}

struct ScanEval {
    n: usize,
    energies: Vec<f64>,
    projections: Vec<f64>,
    grad_norm: Vec<f64>,
    healthy: Vec<bool>,
}

fn evaluate_scan(
    model: &EnergyModel,
    frame: &AxisFrame,
    basins: &BasinMap,
    healthy_basin: usize,
    table: &VoxelTable,
    cfg: &LongitudinalConfig,
) -> Result<ScanEval> {
    let mut out = ScanEval {
        n: table.n(),
        energies: Vec::with_capacity(table.n()),
        projections: Vec::with_capacity(table.n()),
        grad_norm: Vec::with_capacity(table.n()),
        healthy: Vec::with_capacity(table.n()),
    };
    for u in table.rows() {
        let ev = model.evaluate(u, Want::SCORE)?;
        out.energies.push(ev.energy);
        out.grad_norm.push(
            ev.score
                .unwrap_or_default()
                .iter()
                .map(|s| s * s)
                .sum::<f64>()
                .sqrt(),
        );
        out.projections.push(frame.project(u));
        let basin = match cfg.membership {
            Membership::Descent => basins.assign(model, u, &cfg.flow)?,
            Membership::NearestMinimum => basins.nearest_within(u, f64::INFINITY),
        };
        out.healthy.push(basin == Some(healthy_basin));
    }
    Ok(out)
}

fn pick(values: &[f64], keep: &[bool]) -> Vec<f64> {
    values
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .collect()
}

fn masked_normalized(table: &VoxelTable, stats: &NormStats) -> Result<VoxelTable> {
    let rows = table.masked_indices();
    stats.normalize_table(&table.select(&rows)?)
}

/// Runs the full protocol. `baseline` and `followups` hold raw intensities;
/// ROI rows index the baseline table.
pub fn run_longitudinal(
    model: &EnergyModel,
    baseline: &VoxelTable,
    healthy: &Roi,
    tumour: &Roi,
    followups: &[(String, VoxelTable)],
    cfg: &LongitudinalConfig,
) -> Result<LongitudinalOutput> {
    cfg.validate()?;
    let d = model.d();
    baseline.check_dim(d)?;
    for (label, t) in followups {
        t.check_dim(d).map_err(|_| {
            Error::Input(format!(
                "follow-up {label} has {} channels, expected {d}",
                t.d()
            ))
        })?;
    }
    let model_digest = sha256_hex(checkpoint::to_json(model).as_bytes());
    let stats = &model.meta.norm;

    let baseline_norm = stats.normalize_table(baseline)?;
    let c_h = roi_centroid(&baseline_norm, healthy)?;
    let c_t = roi_centroid(&baseline_norm, tumour)?;
    let frame = build_axis(&c_h, &c_t)?;

    let masked = baseline_norm.select(&baseline.masked_indices())?;
    let mut seed_rows: Vec<usize> = (0..masked.n()).collect();
    seed_rows.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    seed_rows.truncate(cfg.basin_seeds);
    let mut seeds: Vec<Vec<f64>> = seed_rows.iter().map(|&i| masked.row(i).to_vec()).collect();
    seeds.push(c_h.clone());
    seeds.push(c_t.clone());
    let seeds = VoxelTable::from_rows(masked.channels().to_vec(), &seeds)?;
    let basins = find_basins(model, &seeds, &cfg.flow)?;
    let healthy_basin = basins.assign(model, &c_h, &cfg.flow)?.ok_or_else(|| {
        Error::Geometry("the healthy centroid does not reach a detected minimum".into())
    })?;

    let profile = line_profile(model, &c_h, &c_t, cfg.profile_samples, cfg.profile_margin)?;
    let healthy_width = {
        // Profile minimum closest to the healthy end of the axis.
        let minima = profile.local_minima();
        let near = minima
            .iter()
            .copied()
            .min_by(|&a, &b| profile.t[a].abs().total_cmp(&profile.t[b].abs()));
        match near {
            Some(i) => Some(basin_width(&profile, i, cfg.width_level)?.width),
            None => None,
        }
    };

    let base = evaluate_scan(model, &frame, &basins, healthy_basin, &masked, cfg)?;
    let base_healthy_e = pick(&base.energies, &base.healthy);
    let base_healthy_p = pick(&base.projections, &base.healthy);
    if base_healthy_e.len() < 2 {
        return Err(Error::Geometry(
            "fewer than 2 baseline voxels fall in the healthy basin".into(),
        ));
    }
    let base_e = MeanSe::of(&base_healthy_e)?;
    let base_e_mask = MeanSe::of(&base.energies)?;
    let base_p = MeanSe::of(&base_healthy_p)?;

    let mut plots = vec![PlotTable {
        label: "baseline".into(),
        projection: base.projections.clone(),
        energy: base.energies.clone(),
        grad_norm: base.grad_norm.clone(),
    }];
    let mut timepoints = Vec::with_capacity(followups.len());
    for (k, (label, raw)) in followups.iter().enumerate() {
        let table = match cfg.norm_policy {
            NormPolicy::Baseline => masked_normalized(raw, stats)?,
            NormPolicy::PerScan => {
                let own = compute_norm_stats(&raw.select(&raw.masked_indices())?, stats.method)?;
                masked_normalized(raw, &own)?
            }
        };
        let scan = evaluate_scan(model, &frame, &basins, healthy_basin, &table, cfg)?;
        let healthy_e = pick(&scan.energies, &scan.healthy);
        if healthy_e.len() < 2 {
            return Err(Error::Geometry(format!(
                "follow-up {label}: fewer than 2 voxels fall in the healthy basin"
            )));
        }
        let de = delta_from_energies(base_healthy_e.clone(), healthy_e)?;
        let de_mask = delta_from_energies(base.energies.clone(), scan.energies.clone())?;
        let proj = MeanSe::of(&scan.projections)?;
        let (dr, se_dr) = proj.difference(&base_p);
        let p_welch = welch_p(&de.followup_energies, &de.baseline_energies)?;
        let p_perm = permutation_p(
            &de.followup_energies,
            &de.baseline_energies,
            cfg.n_perm,
            cfg.seed.wrapping_add(k as u64 + 1),
        )?;
        timepoints.push(TimepointResult {
            label: label.clone(),
            n: scan.n,
            n_healthy: de.followup.n,
            mean_e: de.followup.mean,
            delta_e: de.delta,
            se_delta_e: de.se,
            delta_e_mask: de_mask.delta,
            se_delta_e_mask: de_mask.se,
            mean_projection: proj.mean,
            drift: dr,
            se_drift: se_dr,
            p_welch,
            p_perm,
        });
        plots.push(PlotTable {
            label: label.clone(),
            projection: scan.projections,
            energy: scan.energies,
            grad_norm: scan.grad_norm,
        });
        if sha256_hex(checkpoint::to_json(model).as_bytes()) != model_digest {
            return Err(Error::Validation(
                "baseline model changed during evaluation".into(),
            ));
        }
    }

    let report = LongitudinalReport {
        version: REPORT_VERSION,
        axis: AxisSummary {
            c_h: frame.c_h.clone(),
            c_t: frame.c_t.clone(),
            length: frame.length,
        },
        baseline: BaselineSummary {
            n: base.n,
            n_healthy: base_e.n,
            mean_e: base_e.mean,
            se: base_e.se,
            mean_e_mask: base_e_mask.mean,
            se_mask: base_e_mask.se,
            mean_projection: base_p.mean,
        },
        final_summary: timepoints.last().map(|t| FinalSummary {
            label: t.label.clone(),
            drift: t.drift,
            se_drift: t.se_drift,
            delta_e: t.delta_e,
            se_delta_e: t.se_delta_e,
        }),
        timepoints,
        profile: ProfileSummary {
            barrier_height: barrier_height(&profile).map(|b| b.height),
            healthy_basin_width: healthy_width,
        },
        digests: Digests {
            model: model_digest,
            config: cfg.digest(),
        },
    };
    Ok(LongitudinalOutput {
        report,
        frame,
        basins,
        healthy_basin,
        profile,
        plots,
    })
}
