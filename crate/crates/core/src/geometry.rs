//! Geometry of a trained landscape: gradient-flow descent, basin attractors,
//! line profiles, barrier heights and basin widths.
//!
//! All coordinates here are normalized sequence-space coordinates, i.e. the
//! space the model was trained in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EnergyModel, Want};
use crate::stats::Summary;
use crate::table::VoxelTable;

/// Discretization of `u̇ = −∇E(u)`.
///
/// Each step tries `u − η∇E`, halving `η` (by `backtrack`) until the energy
/// strictly decreases. After an accepted step `η` grows by `1/backtrack` up
/// to `max_step_size`, and no step moves farther than `max_move`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub step_size: f64,
    pub max_step_size: f64,
    pub max_move: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub energy_tol: f64,
    pub backtrack: f64,
    pub merge_radius: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            max_step_size: 1.0,
            max_move: 0.1,
            max_steps: 2000,
            grad_tol: 1e-4,
            energy_tol: 1e-8,
            backtrack: 0.5,
            merge_radius: 0.05,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.step_size,
            self.max_step_size,
            self.max_move,
            self.grad_tol,
            self.energy_tol,
            self.merge_radius,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || self.max_steps == 0
            || !(self.backtrack > 0.0 && self.backtrack < 1.0)
            || self.max_step_size < self.step_size
        {
            return Err(Error::Config(
                "flow parameters must be positive, backtrack in (0,1), max_step_size ≥ step_size"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descent {
    pub endpoint: Vec<f64>,
    pub energy: f64,
    pub steps: usize,
    pub converged: bool,
    /// Energy at the start and after every accepted step.
    pub energies: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Gradient descent from `u0` with backtracking.
pub fn descend(model: &EnergyModel, u0: &[f64], cfg: &FlowConfig) -> Result<Descent> {
    descend_until(model, u0, cfg, |_| false)
}

/// Like [`descend`], but stops (as converged) as soon as `stop` accepts the
/// current point.
fn descend_until(
    model: &EnergyModel,
    u0: &[f64],
    cfg: &FlowConfig,
    stop: impl Fn(&[f64]) -> bool,
) -> Result<Descent> {
    cfg.validate()?;
    let (mut energy, mut grad) = model.energy_and_gradient(u0)?;
    if !energy.is_finite() {
        return Err(Error::Numeric {
            message: "non-finite energy at the starting point".into(),
            index: Some(0),
            last_valid: None,
        });
    }
    let mut u = u0.to_vec();
    let mut energies = vec![energy];
    let mut eta = cfg.step_size;
    let mut steps = 0;
    let mut candidate = vec![0.0; u.len()];
    let converged = loop {
        let g = norm(&grad);
        if g < cfg.grad_tol || stop(&u) {
            break true;
        }
        if steps == cfg.max_steps {
            break false;
        }
        let mut trial = eta;
        let accepted = loop {
            let step = trial.min(cfg.max_move / g);
            for k in 0..u.len() {
                candidate[k] = u[k] - step * grad[k];
            }
            if step * g <= 1e-15 * (1.0 + norm(&u)) {
                break None;
            }
            let (e, g_new) = model.energy_and_gradient(&candidate)?;
            if !e.is_finite() {
                return Err(Error::Numeric {
                    message: "non-finite energy during descent".into(),
                    index: Some(steps),
                    last_valid: Some(u),
                });
            }
            if e < energy {
                break Some((e, g_new));
            }
            trial *= cfg.backtrack;
        };
        // No representable step lowers the energy any further.
        let Some((e, g_new)) = accepted else {
            break true;
        };
        let decrease = energy - e;
        std::mem::swap(&mut u, &mut candidate);
        energy = e;
        energies.push(e);
        steps += 1;
        eta = (trial / cfg.backtrack).min(cfg.max_step_size);
        grad = g_new;
        if decrease < cfg.energy_tol {
            break true;
        }
    };
    Ok(Descent {
        endpoint: u,
        energy,
        steps,
        converged,
        energies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub location: Vec<f64>,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinMap {
    /// Ordered by increasing energy.
    pub minima: Vec<Minimum>,
    /// Minimum reached from each seed; `None` for non-converged seeds.
    pub assignment: Vec<Option<usize>>,
    pub steps: Vec<usize>,
    pub converged: Vec<bool>,
}

impl BasinMap {
    /// Index of the minimum within `radius` of `u`, nearest first.
    pub fn nearest_within(&self, u: &[f64], radius: f64) -> Option<usize> {
        self.minima
            .iter()
            .enumerate()
            .map(|(i, m)| (i, distance(&m.location, u)))
            .filter(|(_, dist)| *dist <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// Basin of a new point: descend until the trajectory comes within
    /// `merge_radius` of a known minimum. Points whose flow ends elsewhere
    /// (or does not converge) are unassigned.
    pub fn assign(
        &self,
        model: &EnergyModel,
        u: &[f64],
        cfg: &FlowConfig,
    ) -> Result<Option<usize>> {
        let r = cfg.merge_radius;
        let run = descend_until(model, u, cfg, |p| self.nearest_within(p, r).is_some())?;
        Ok(if run.converged {
            self.nearest_within(&run.endpoint, r)
        } else {
            None
        })
    }

    pub fn assign_table(
        &self,
        model: &EnergyModel,
        table: &VoxelTable,
        cfg: &FlowConfig,
    ) -> Result<Vec<Option<usize>>> {
        table.check_dim(model.d())?;
        table.rows().map(|u| self.assign(model, u, cfg)).collect()
    }
}

/// Minimal disjoint-set forest.
struct Forest(Vec<usize>);

impl Forest {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Single-linkage clusters of `points` at distance `radius`.
///
/// Points are bucketed on a grid of cell size `radius/√d`, so everything in
/// one cell is linked outright; only pairs of occupied cells close enough to
/// hold a linking pair are compared point by point.
fn single_linkage(points: &[Vec<f64>], radius: f64) -> Vec<usize> {
    let n = points.len();
    let mut forest = Forest((0..n).collect());
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let cell = radius / (d as f64).sqrt();
    let reach = (d as f64).sqrt().ceil() as i64;
    let mut cells: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = p.iter().map(|x| (x / cell).floor() as i64).collect();
        cells.entry(key).or_default().push(i);
    }
    let occupied: Vec<(&Vec<i64>, &Vec<usize>)> = cells.iter().collect();
    for (_, members) in &occupied {
        for w in members.windows(2) {
            forest.union(w[0], w[1]);
        }
    }
    for a in 0..occupied.len() {
        for b in a + 1..occupied.len() {
            let (ka, ma) = occupied[a];
            let (kb, mb) = occupied[b];
            if ka.iter().zip(kb).any(|(x, y)| (x - y).abs() > reach) {
                continue;
            }
            if forest.find(ma[0]) == forest.find(mb[0]) {
                continue;
            }
            'pairs: for &i in ma {
                for &j in mb {
                    if distance(&points[i], &points[j]) <= radius {
                        forest.union(i, j);
                        break 'pairs;
                    }
                }
            }
        }
    }
    (0..n).map(|i| forest.find(i)).collect()
}

/// Descends every seed row and merges the endpoints into basin attractors.
pub fn find_basins(model: &EnergyModel, seeds: &VoxelTable, cfg: &FlowConfig) -> Result<BasinMap> {
    cfg.validate()?;
    seeds.check_dim(model.d())?;
    let runs: Vec<Descent> = seeds
        .rows()
        .map(|u| descend(model, u, cfg))
        .collect::<Result<_>>()?;
    let converged_idx: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].converged).collect();
    if converged_idx.is_empty() {
        return Err(Error::Geometry("no seed converged to a minimum".into()));
    }
    let endpoints: Vec<Vec<f64>> = converged_idx
        .iter()
        .map(|&i| runs[i].endpoint.clone())
        .collect();
    let roots = single_linkage(&endpoints, cfg.merge_radius);

    // Representative of each cluster: its lowest-energy endpoint.
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, &root) in roots.iter().enumerate() {
        let e = runs[converged_idx[k]].energy;
        best.entry(root)
            .and_modify(|b| {
                if e < runs[converged_idx[*b]].energy {
                    *b = k;
                }
            })
            .or_insert(k);
    }
    let mut clusters: Vec<(usize, usize)> = best.into_iter().collect();
    clusters.sort_by(|a, b| {
        runs[converged_idx[a.1]]
            .energy
            .total_cmp(&runs[converged_idx[b.1]].energy)
            .then(a.0.cmp(&b.0))
    });
    let minima: Vec<Minimum> = clusters
        .iter()
        .map(|&(_, k)| Minimum {
            location: endpoints[k].clone(),
            energy: runs[converged_idx[k]].energy,
        })
        .collect();
    let rank: BTreeMap<usize, usize> = clusters
        .iter()
        .enumerate()
        .map(|(i, &(root, _))| (root, i))
        .collect();

    let mut assignment = vec![None; runs.len()];
    for (k, &i) in converged_idx.iter().enumerate() {
        assignment[i] = Some(rank[&roots[k]]);
    }
    Ok(BasinMap {
        minima,
        assignment,
        steps: runs.iter().map(|r| r.steps).collect(),
        converged: runs.iter().map(|r| r.converged).collect(),
    })
}

/// Energy, gradient norm and Laplacian sampled along `p0 + t(p1 − p0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineProfile {
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    pub t: Vec<f64>,
    pub energy: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub laplacian: Vec<f64>,
}

impl LineProfile {
    /// Profile from precomputed samples; derivative rows are zero-filled
    /// when not supplied.
    pub fn from_samples(p0: Vec<f64>, p1: Vec<f64>, t: Vec<f64>, energy: Vec<f64>) -> Result<Self> {
        if t.len() < 2 || t.len() != energy.len() || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input(
                "a profile needs at least 2 samples with strictly increasing t".into(),
            ));
        }
        let k = t.len();
        Ok(Self {
            p0,
            p1,
            t,
            energy,
            grad_norm: vec![0.0; k],
            laplacian: vec![0.0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn segment_length(&self) -> f64 {
        distance(&self.p0, &self.p1)
    }

    pub fn point(&self, t: f64) -> Vec<f64> {
        self.p0
            .iter()
            .zip(&self.p1)
            .map(|(a, b)| a + t * (b - a))
            .collect()
    }

    /// Interior samples that are local minima; on a plateau only the first
    /// sample counts.
    pub fn local_minima(&self) -> Vec<usize> {
        let e = &self.energy;
        (1..e.len() - 1)
            .filter(|&i| e[i] < e[i - 1] && e[i] <= e[i + 1])
            .collect()
    }
}

pub const PROFILE_SAMPLES: usize = 512;
pub const PROFILE_MARGIN: f64 = 0.1;

pub fn line_profile(
    model: &EnergyModel,
    p0: &[f64],
    p1: &[f64],
    samples: usize,
    margin: f64,
) -> Result<LineProfile> {
    if p0.len() != model.d() || p1.len() != model.d() {
        return Err(Error::Input(
            "profile endpoints have the wrong dimension".into(),
        ));
    }
    if p0 == p1 {
        return Err(Error::Input("profile endpoints coincide".into()));
    }
    if samples < 2 || !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Input(
            "profile needs K ≥ 2 and a finite margin ≥ 0".into(),
        ));
    }
    let span = 1.0 + 2.0 * margin;
    let t: Vec<f64> = (0..samples)
        .map(|i| -margin + span * i as f64 / (samples - 1) as f64)
        .collect();
    let mut profile = LineProfile::from_samples(p0.to_vec(), p1.to_vec(), t, vec![0.0; samples])?;
    for i in 0..samples {
        let u = profile.point(profile.t[i]);
        let ev = model.evaluate(&u, Want::ALL)?;
        profile.energy[i] = ev.energy;
        profile.grad_norm[i] = norm(ev.score.as_deref().unwrap_or_default());
        profile.laplacian[i] = ev.laplacian.unwrap_or_default();
    }
    Ok(profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Barrier {
    /// Ridge energy minus the lower of the two flanking minima.
    pub height: f64,
    pub ridge_index: usize,
    pub minima: (usize, usize),
}

/// Barrier between the two lowest local minima of the profile, or `None`
/// when the profile has fewer than two.
pub fn barrier_height(profile: &LineProfile) -> Option<Barrier> {
    let mut minima = profile.local_minima();
    if minima.len() < 2 {
        return None;
    }
    let e = &profile.energy;
    minima.sort_by(|&a, &b| e[a].total_cmp(&e[b]).then(a.cmp(&b)));
    let (a, b) = (minima[0].min(minima[1]), minima[0].max(minima[1]));
    let ridge = (a + 1..b).max_by(|&i, &j| e[i].total_cmp(&e[j]))?;
    Some(Barrier {
        height: e[ridge] - e[a].min(e[b]),
        ridge_index: ridge,
        minima: (a, b),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasinWidth {
    /// In sequence-space units (t-interval times segment length).
    pub width: f64,
    pub t_left: f64,
    pub t_right: f64,
    /// The level set ran into a ridge before reaching `E_min + λ`.
    pub truncated: bool,
    /// The profile is flat; the width is the whole sampled interval.
    pub degenerate: bool,
}

/// Width of the sublevel interval `E ≤ E_min + λ` around the minimum at
/// sample `index`, crossings located by linear interpolation.
pub fn basin_width(profile: &LineProfile, index: usize, level: f64) -> Result<BasinWidth> {
    if !(level > 0.0 && level.is_finite()) {
        return Err(Error::Input("level offset must be positive".into()));
    }
    let e = &profile.energy;
    let t = &profile.t;
    let k = e.len();
    if index >= k {
        return Err(Error::Input(format!("sample {index} outside the profile")));
    }
    let (lo, hi) = e
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let seg = profile.segment_length();
    if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
        return Ok(BasinWidth {
            width: (t[k - 1] - t[0]) * seg,
            t_left: t[0],
            t_right: t[k - 1],
            truncated: false,
            degenerate: true,
        });
    }
    let is_min =
        (index == 0 || e[index] <= e[index - 1]) && (index + 1 == k || e[index] <= e[index + 1]);
    if !is_min {
        return Err(Error::Input(format!(
            "sample {index} is not a local minimum"
        )));
    }
    let target = e[index] + level;
    let mut truncated = false;

    let mut edge = |step: isize| -> f64 {
        let mut j = index as isize;
        loop {
            let next = j + step;
            if next < 0 || next >= k as isize {
                return t[j as usize];
            }
            let (cur, nxt) = (e[j as usize], e[next as usize]);
            if nxt > target {
                let f = (target - cur) / (nxt - cur);
                return t[j as usize] + f * (t[next as usize] - t[j as usize]);
            }
            if nxt < cur && j != index as isize {
                // Descending again: `j` is a ridge toward another minimum.
                truncated = true;
                return t[j as usize];
            }
            j = next;
        }
    };
    let t_left = edge(-1);
    let t_right = edge(1);
    Ok(BasinWidth {
        width: (t_right - t_left) * seg,
        t_left,
        t_right,
        truncated,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub energy: Summary,
    pub grad_norm: Summary,
    pub laplacian: Summary,
}

pub fn field_summary(model: &EnergyModel, table: &VoxelTable) -> Result<FieldSummary> {
    let evals = model.energy_batch(table, Want::ALL)?;
    let energy: Vec<f64> = evals.iter().map(|e| e.energy).collect();
    let grad: Vec<f64> = evals
        .iter()
        .map(|e| norm(e.score.as_deref().unwrap_or_default()))
        .collect();
    let lap: Vec<f64> = evals
        .iter()
        .map(|e| e.laplacian.unwrap_or_default())
        .collect();
    Ok(FieldSummary {
        energy: Summary::of(&energy)?,
        grad_norm: Summary::of(&grad)?,
        laplacian: Summary::of(&lap)?,
    })
}
