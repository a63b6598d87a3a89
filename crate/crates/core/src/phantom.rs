//! Gaussian-mixture phantoms with closed-form noise-convolved densities,
//! plus longitudinal scenarios built from them.
//!
//! All randomness derives from one seed: the baseline table uses ChaCha
//! stream 0 of `ChaCha8Rng::seed_from_u64(seed)` and follow-up `k` uses
//! stream `k + 1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{default_channels, VoxelTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
}

impl MixtureSpec {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            var,
        }])
    }

    /// Healthy mode at the origin and a tumour mode at `4e₁`, both with
    /// covariance `0.25·I₅`, weights 0.9 / 0.1.
    pub fn desk_scale() -> Self {
        let mut tumour = vec![0.0; 5];
        tumour[0] = 4.0;
        Self {
            components: vec![
                Component {
                    weight: 0.9,
                    mean: vec![0.0; 5],
                    var: vec![0.25; 5],
                },
                Component {
                    weight: 0.1,
                    mean: tumour,
                    var: vec![0.25; 5],
                },
            ],
        }
    }

    pub fn d(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.components.first() else {
            return Err(Error::Config("mixture has no components".into()));
        };
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::Config("mixture dimension must be ≥ 1".into()));
        }
        let mut total = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.var.len() != d {
                return Err(Error::Config(format!(
                    "component {i} has inconsistent dimension"
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Config(format!(
                    "component {i} weight must be positive"
                )));
            }
            if c.var.iter().any(|v| !(*v > 0.0 && v.is_finite()))
                || c.mean.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Config(format!(
                    "component {i} needs finite mean and positive variances"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Per-component `log wᵢ + log N(u; μᵢ, diag(vᵢ + σ²))` and the
    /// log-sum-exp over them.
    fn log_terms(&self, sigma: f64, u: &[f64]) -> (Vec<f64>, f64) {
        let s2 = sigma * sigma;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let mut acc = c.weight.ln();
                for k in 0..u.len() {
                    let v = c.var[k] + s2;
                    let r = u[k] - c.mean[k];
                    acc -= 0.5 * (r * r / v + v.ln() + ln_2pi);
                }
                acc
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        (terms, lse)
    }

    /// `log p_σ(u)` where every covariance is inflated by `σ²I`.
    pub fn log_density(&self, sigma: f64, u: &[f64]) -> f64 {
        self.log_terms(sigma, u).1
    }

    /// Oracle energy `−log p_σ(u)`.
    pub fn analytic_energy(&self, sigma: f64, u: &[f64]) -> f64 {
        -self.log_density(sigma, u)
    }

    /// `∇ log p_σ(u)`, responsibilities computed in log space.
    pub fn analytic_score(&self, sigma: f64, u: &[f64]) -> Vec<f64> {
        let s2 = sigma * sigma;
        let (terms, lse) = self.log_terms(sigma, u);
        let mut out = vec![0.0; u.len()];
        for (c, t) in self.components.iter().zip(&terms) {
            let r = (t - lse).exp();
            for k in 0..u.len() {
                out[k] -= r * (u[k] - c.mean[k]) / (c.var[k] + s2);
            }
        }
        out
    }

    /// Draws `n` labelled samples from the mixture.
    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
        let d = self.d();
        let mut values = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen();
            let mut acc = 0.0;
            let mut label = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if x < acc {
                    label = i;
                    break;
                }
            }
            let c = &self.components[label];
            for k in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                values.push(c.mean[k] + c.var[k].sqrt() * z);
            }
            labels.push(label);
        }
        (values, labels)
    }
}

/// Samples with their generating component, kept for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledTable {
    pub table: VoxelTable,
    pub labels: Vec<usize>,
}

fn grid_coords(n: usize) -> Vec<[i64; 3]> {
    (0..n)
        .map(|i| {
            let i = i as i64;
            [i % 64, (i / 64) % 64, i / 4096]
        })
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` i.i.d. draws; rows carry fake grid coordinates.
pub fn sample(spec: &MixtureSpec, n: usize, seed: u64) -> Result<LabelledTable> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample size must be ≥ 1".into()));
    }
    let (values, labels) = spec.sample_with(n, &mut stream_rng(seed, 0));
    let table = VoxelTable::new(default_channels(spec.d()), values)?.with_coords(grid_coords(n))?;
    Ok(LabelledTable { table, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Edit {
    /// Drop a component (e.g. resected tumour).
    Remove { component: usize },
    /// Move a fraction of the healthy rows by `alpha` along a unit vector;
    /// without an explicit direction, toward the tumour mean.
    Displace {
        fraction: f64,
        alpha: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        direction: Option<Vec<f64>>,
    },
    /// Draw fresh samples instead of copying the baseline rows.
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowupSpec {
    pub label: String,
    pub edits: Vec<Edit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub baseline: MixtureSpec,
    pub healthy: usize,
    pub tumour: usize,
    pub n_baseline: usize,
    pub n_followup: usize,
    /// Rows per ROI, taken from the labelled component within `roi_radius`
    /// of its mean.
    pub roi_size: usize,
    pub roi_radius: f64,
    /// Noise level used for oracle energies.
    pub sigma: f64,
    pub followups: Vec<FollowupSpec>,
    pub seed: u64,
}

impl ScenarioSpec {
    fn desk(n: usize, seed: u64, followups: Vec<FollowupSpec>) -> Self {
        Self {
            baseline: MixtureSpec::desk_scale(),
            healthy: 0,
            tumour: 1,
            n_baseline: n,
            n_followup: n,
            roi_size: 1000.min(n / 20).max(1),
            roi_radius: 1.0,
            sigma: 0.1,
            followups,
            seed,
        }
    }

    /// Three post-resection follow-ups resampled from the healthy mode.
    pub fn stable(n: usize, seed: u64) -> Self {
        let followups = (1..=3)
            .map(|k| FollowupSpec {
                label: format!("t{k}"),
                edits: vec![Edit::Resample, Edit::Remove { component: 1 }],
            })
            .collect();
        Self::desk(n, seed, followups)
    }

    /// Post-resection follow-ups in which 0 %, 10 % and 20 % of the healthy
    /// rows move halfway toward the tumour mode.
    pub fn recurrence(n: usize, seed: u64) -> Self {
        let spec = MixtureSpec::desk_scale();
        let half = 0.5 * distance(&spec.components[0].mean, &spec.components[1].mean);
        let followups = [0.0, 0.1, 0.2]
            .iter()
            .enumerate()
            .map(|(k, &f)| FollowupSpec {
                label: format!("t{}", k + 1),
                edits: vec![
                    Edit::Resample,
                    Edit::Remove { component: 1 },
                    Edit::Displace {
                        fraction: f,
                        alpha: half,
                        direction: None,
                    },
                ],
            })
            .collect();
        Self::desk(n, seed, followups)
    }

    pub fn validate(&self) -> Result<()> {
        self.baseline.validate()?;
        let nc = self.baseline.components.len();
        let d = self.baseline.d();
        if self.healthy >= nc || self.tumour >= nc || self.healthy == self.tumour {
            return Err(Error::Config(
                "healthy and tumour must be distinct components".into(),
            ));
        }
        if self.n_baseline < 2 || self.n_followup < 2 || self.roi_size == 0 {
            return Err(Error::Config("scenario sizes too small".into()));
        }
        if !(self.roi_radius > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config(
                "roi_radius must be positive and sigma ≥ 0".into(),
            ));
        }
        for f in &self.followups {
            for e in &f.edits {
                match e {
                    Edit::Remove { component } if *component >= nc => {
                        return Err(Error::Config(format!(
                            "{}: no component {component} to remove",
                            f.label
                        )))
                    }
                    Edit::Displace {
                        fraction,
                        alpha,
                        direction,
                    } => {
                        if !(0.0..=1.0).contains(fraction) || !alpha.is_finite() {
                            return Err(Error::Config(format!(
                                "{}: displacement needs fraction in [0,1] and finite alpha",
                                f.label
                            )));
                        }
                        if let Some(v) = direction {
                            if v.len() != d {
                                return Err(Error::Config(format!(
                                    "{}: displacement direction has dimension {}, expected {d}",
                                    f.label,
                                    v.len()
                                )));
                            }
                            if !(norm(v) > 0.0) {
                                return Err(Error::Config(format!(
                                    "{}: zero displacement direction",
                                    f.label
                                )));
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Ground truth recorded for one follow-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowupTruth {
    pub label: String,
    pub n: usize,
    pub displaced: usize,
    /// Mean displacement projected on the true healthy→tumour unit vector,
    /// in raw intensity units.
    pub expected_drift: f64,
    /// Mean oracle energy of the follow-up minus that of the baseline
    /// healthy rows.
    pub oracle_delta_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTruth {
    pub axis_direction: Vec<f64>,
    pub axis_length: f64,
    pub followups: Vec<FollowupTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub baseline: LabelledTable,
    pub healthy_rows: Vec<usize>,
    pub tumour_rows: Vec<usize>,
    pub followups: Vec<(String, LabelledTable)>,
    pub truth: ScenarioTruth,
}

pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mix = &spec.baseline;
    let d = mix.d();
    let baseline = sample(mix, spec.n_baseline, spec.seed)?;

    let roi = |component: usize| -> Result<Vec<usize>> {
        let mean = &mix.components[component].mean;
        let rows: Vec<usize> = (0..baseline.table.n())
            .filter(|&i| {
                baseline.labels[i] == component
                    && distance(baseline.table.row(i), mean) <= spec.roi_radius
            })
            .take(spec.roi_size)
            .collect();
        if rows.is_empty() {
            return Err(Error::Config(format!(
                "no baseline samples of component {component} within the ROI radius"
            )));
        }
        Ok(rows)
    };
    let healthy_rows = roi(spec.healthy)?;
    let tumour_rows = roi(spec.tumour)?;

    let h_mean = &mix.components[spec.healthy].mean;
    let t_mean = &mix.components[spec.tumour].mean;
    let axis_length = distance(h_mean, t_mean);
    let axis: Vec<f64> = t_mean
        .iter()
        .zip(h_mean)
        .map(|(t, h)| (t - h) / axis_length)
        .collect();

    let oracle_mean = |rows: &mut dyn Iterator<Item = &[f64]>| -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for r in rows {
            s += mix.analytic_energy(spec.sigma, r);
            n += 1;
        }
        s / n as f64
    };
    let baseline_healthy_energy = oracle_mean(
        &mut (0..baseline.table.n())
            .filter(|&i| baseline.labels[i] == spec.healthy)
            .map(|i| baseline.table.row(i)),
    );

    let mut followups = Vec::with_capacity(spec.followups.len());
    let mut truths = Vec::with_capacity(spec.followups.len());
    for (k, f) in spec.followups.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, k as u64 + 1);
        let removed: Vec<usize> = f
            .edits
            .iter()
            .filter_map(|e| match e {
                Edit::Remove { component } => Some(*component),
                _ => None,
            })
            .collect();
        let (mut values, labels) = if f.edits.contains(&Edit::Resample) {
            let kept: Vec<Component> = mix
                .components
                .iter()
                .enumerate()
                .map(|(i, c)| Component {
                    weight: if removed.contains(&i) { 0.0 } else { c.weight },
                    ..c.clone()
                })
                .collect();
            let total: f64 = kept.iter().map(|c| c.weight).sum();
            if total <= 0.0 {
                return Err(Error::Config(format!(
                    "{}: every component removed",
                    f.label
                )));
            }
            let edited = MixtureSpec {
                components: kept
                    .into_iter()
                    .map(|c| Component {
                        weight: c.weight / total,
                        ..c
                    })
                    .collect(),
            };
            edited.sample_with(spec.n_followup, &mut rng)
        } else {
            let mut values = Vec::new();
            let mut labels = Vec::new();
            for i in 0..baseline.table.n() {
                if !removed.contains(&baseline.labels[i]) {
                    values.extend_from_slice(baseline.table.row(i));
                    labels.push(baseline.labels[i]);
                }
            }
            (values, labels)
        };
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "{}: fewer than 2 rows remain",
                f.label
            )));
        }

        let mut displaced = 0usize;
        let mut shift_sum = 0.0;
        for e in &f.edits {
            if let Edit::Displace {
                fraction,
                alpha,
                direction,
            } = e
            {
                let dir: Vec<f64> = match direction {
                    Some(v) => {
                        let n = norm(v);
                        v.iter().map(|x| x / n).collect()
                    }
                    None => axis.clone(),
                };
                let mut healthy: Vec<usize> = (0..labels.len())
                    .filter(|&i| labels[i] == spec.healthy)
                    .collect();
                healthy.shuffle(&mut rng);
                let count = (fraction * healthy.len() as f64).round() as usize;
                for &i in &healthy[..count] {
                    for c in 0..d {
                        values[i * d + c] += alpha * dir[c];
                    }
                }
                let along: f64 = dir.iter().zip(&axis).map(|(a, b)| a * b).sum();
                displaced += count;
                shift_sum += count as f64 * alpha * along;
            }
        }

        let n = labels.len();
        let table = VoxelTable::new(default_channels(d), values)?.with_coords(grid_coords(n))?;
        let energy = oracle_mean(&mut table.rows());
        truths.push(FollowupTruth {
            label: f.label.clone(),
            n,
            displaced,
            expected_drift: shift_sum / n as f64,
            oracle_delta_energy: energy - baseline_healthy_energy,
        });
        followups.push((f.label.clone(), LabelledTable { table, labels }));
    }

    Ok(Scenario {
        baseline,
        healthy_rows,
        tumour_rows,
        followups,
        truth: ScenarioTruth {
            axis_direction: axis,
            axis_length,
            followups: truths,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanishing_covariance_samples_the_mean() {
        let spec = MixtureSpec::gaussian(vec![1.0, -2.0, 3.0], vec![1e-12; 3]).unwrap();
        let s = sample(&spec, 200, 4).unwrap();
        for r in s.table.rows() {
            assert!(distance(r, &[1.0, -2.0, 3.0]) < 1e-5);
        }
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let spec = MixtureSpec::desk_scale();
        let s = sample(&spec, 100_000, 8).unwrap();
        let tumour = s.labels.iter().filter(|&&l| l == 1).count() as f64 / 1e5;
        assert!((tumour - 0.1).abs() < 0.01);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = MixtureSpec::desk_scale();
        assert_eq!(
            sample(&spec, 500, 3).unwrap(),
            sample(&spec, 500, 3).unwrap()
        );
        assert_ne!(
            sample(&spec, 500, 3).unwrap(),
            sample(&spec, 500, 4).unwrap()
        );
    }

    #[test]
    fn single_gaussian_score_is_closed_form() {
        let spec = MixtureSpec::gaussian(vec![1.0, -1.0], vec![0.5, 2.0]).unwrap();
        let u = [0.3, 0.7];
        let s = spec.analytic_score(0.2, &u);
        assert!((s[0] + (0.3 - 1.0) / 0.54).abs() < 1e-14);
        assert!((s[1] + (0.7 + 1.0) / 2.04).abs() < 1e-14);
    }

    #[test]
    fn symmetric_midpoint_has_zero_axial_score() {
        let spec = MixtureSpec::new(vec![
            Component {
                weight: 0.5,
                mean: vec![-2.0, 0.0],
                var: vec![0.25, 0.25],
            },
            Component {
                weight: 0.5,
                mean: vec![2.0, 0.0],
                var: vec![0.25, 0.25],
            },
        ])
        .unwrap();
        assert!(spec.analytic_score(0.1, &[0.0, 0.4])[0].abs() < 1e-15);
    }

    #[test]
    fn standard_gaussian_energy_is_half_squared_norm() {
        let spec = MixtureSpec::gaussian(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let u = [0.5, -1.0, 2.0];
        let de = spec.analytic_energy(0.0, &u) - spec.analytic_energy(0.0, &[0.0; 3]);
        assert!((de - 0.5 * 5.25).abs() < 1e-13);
    }

    #[test]
    fn energy_difference_is_negative_log_density_ratio() {
        let spec = MixtureSpec::desk_scale();
        let (a, b) = ([0.3, 0.1, 0.0, -0.2, 0.5], [3.1, 0.0, 0.2, 0.0, -0.1]);
        let lhs = spec.analytic_energy(0.1, &a) - spec.analytic_energy(0.1, &b);
        let rhs = -(spec.log_density(0.1, &a) - spec.log_density(0.1, &b));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn scenario_truths() {
        let stable = build_scenario(&ScenarioSpec::stable(4000, 1)).unwrap();
        assert!(stable
            .truth
            .followups
            .iter()
            .all(|t| t.expected_drift == 0.0));
        for (_, f) in &stable.followups {
            assert!(f.labels.iter().all(|&l| l == 0));
        }

        let mut spec = ScenarioSpec::stable(4000, 1);
        spec.followups = vec![FollowupSpec {
            label: "t1".into(),
            edits: vec![
                Edit::Remove { component: 1 },
                Edit::Displace {
                    fraction: 0.2,
                    alpha: 2.0,
                    direction: None,
                },
            ],
        }];
        let s = build_scenario(&spec).unwrap();
        assert!((s.truth.followups[0].expected_drift - 0.4).abs() < 1e-3);
        assert!(s.followups[0].1.labels.iter().all(|&l| l == 0));
        assert!(s.healthy_rows.iter().all(|&i| s.baseline.labels[i] == 0));
    }

    #[test]
    fn inconsistent_displacement_dimension_is_rejected() {
        let mut spec = ScenarioSpec::stable(100, 1);
        spec.followups[0].edits.push(Edit::Displace {
            fraction: 0.1,
            alpha: 1.0,
            direction: Some(vec![1.0, 0.0]),
        });
        assert!(matches!(build_scenario(&spec), Err(Error::Config(_))));
    }
}
