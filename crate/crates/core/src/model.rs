//! The γ-INR energy network.
//!
//! `E(u) = head ∘ f_L ∘ … ∘ f_1 ∘ γ(u)` with a learnable Fourier encoding
//! `γ(u) = [sin(2πBu), cos(2πBu)]` and sine layers `f(x) = sin(ω₀(Wx + b))`.
//! Input derivatives are propagated exactly as first- and second-order
//! directional jets alongside the forward pass; nothing is finite-differenced.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::NormStats;
use crate::table::VoxelTable;

pub const TWO_PI: f64 = 2.0 * PI;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dot product with four interleaved accumulators. The summation order only
/// depends on the length, so results are reproducible bit for bit.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Learnable Gaussian Fourier features. `b` is `m × d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoder {
    pub m: usize,
    pub d: usize,
    pub b: Vec<f64>,
}

impl FourierEncoder {
    pub fn new(m: usize, d: usize, b: Vec<f64>) -> Result<Self> {
        if m == 0 || d == 0 || b.len() != m * d {
            return Err(Error::Config(format!(
                "frequency matrix with {} entries is not {m}×{d}",
                b.len()
            )));
        }
        Ok(Self { m, d, b })
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.b[j * self.d..(j + 1) * self.d]
    }

    /// `[sin 2πBu, cos 2πBu]`, length `2m`.
    pub fn encode(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.d {
            return Err(Error::Config(format!(
                "input of length {} does not match encoder dimension {}",
                u.len(),
                self.d
            )));
        }
        let mut out = vec![0.0; 2 * self.m];
        for j in 0..self.m {
            let phase = TWO_PI * dot(self.row(j), u);
            out[j] = phase.sin();
            out[self.m + j] = phase.cos();
        }
        Ok(out)
    }
}

/// `x ↦ sin(ω₀(Wx + b))` with `W` stored `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SirenLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub omega0: f64,
}

impl SirenLayer {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.inputs..(i + 1) * self.inputs]
    }
}

/// Final affine map to the scalar energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub d: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub widths: Vec<usize>,
    pub omega0: f64,
    pub sigma_train: f64,
    pub seed: u64,
    pub norm: NormStats,
}

/// Shape and initialization of a fresh network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub m: usize,
    pub widths: Vec<usize>,
    pub omega0: f64,
    /// Standard deviation of the initial frequencies.
    pub fourier_scale: f64,
    /// Head weights start uniform in ±`head_scale`·√(6/width).
    pub head_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            m: 64,
            widths: vec![64; 4],
            omega0: 1.0,
            fourier_scale: 0.05,
            head_scale: 0.1,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(
                "architecture needs m ≥ 1 and at least one nonempty hidden layer".into(),
            ));
        }
        for (name, v) in [
            ("omega0", self.omega0),
            ("fourier_scale", self.fourier_scale),
            ("head_scale", self.head_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) || (name == "omega0" && v == 0.0) {
                return Err(Error::Config(format!("invalid {name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    pub meta: ModelMeta,
    pub encoder: FourierEncoder,
    pub layers: Vec<SirenLayer>,
    pub head: Head,
}

/// Which quantities to compute per point. The energy is always returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Want {
    pub score: bool,
    pub laplacian: bool,
}

impl Want {
    pub const ENERGY: Want = Want {
        score: false,
        laplacian: false,
    };
    pub const SCORE: Want = Want {
        score: true,
        laplacian: false,
    };
    pub const ALL: Want = Want {
        score: true,
        laplacian: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEvaluation {
    pub energy: f64,
    /// `−∇E(u)`.
    pub score: Option<Vec<f64>>,
    /// `ΔE(u)`.
    pub laplacian: Option<f64>,
}

enum Directions<'a> {
    Axes,
    Given(&'a [&'a [f64]]),
}

struct Jet {
    energy: f64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl EnergyModel {
    /// Random initialization: Gaussian frequencies, SIREN-uniform hidden
    /// weights `±√(6/fan_in)/ω₀`, zero biases, small uniform head weights.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        arch: &Architecture,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if d == 0 {
            return Err(Error::Config("input dimension must be ≥ 1".into()));
        }
        let b = (0..arch.m * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                arch.fourier_scale * z
            })
            .collect();
        let encoder = FourierEncoder::new(arch.m, d, b)?;
        let mut layers = Vec::with_capacity(arch.widths.len());
        let mut fan_in = 2 * arch.m;
        for &width in &arch.widths {
            let bound = (6.0 / fan_in as f64).sqrt() / arch.omega0;
            let dist = Uniform::new_inclusive(-bound, bound);
            layers.push(SirenLayer {
                inputs: fan_in,
                outputs: width,
                w: (0..width * fan_in).map(|_| dist.sample(rng)).collect(),
                b: vec![0.0; width],
                omega0: arch.omega0,
            });
            fan_in = width;
        }
        let bound = arch.head_scale * (6.0 / fan_in as f64).sqrt();
        let head = Head {
            w: if bound > 0.0 {
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..fan_in).map(|_| dist.sample(rng)).collect()
            } else {
                vec![0.0; fan_in]
            },
            b: 0.0,
        };
        let model = Self {
            meta: ModelMeta {
                d,
                m: arch.m,
                l: arch.widths.len(),
                widths: arch.widths.clone(),
                omega0: arch.omega0,
                sigma_train: 0.0,
                seed,
                norm: NormStats::identity(d),
            },
            encoder,
            layers,
            head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn d(&self) -> usize {
        self.meta.d
    }

    /// Structural and numeric consistency of parameters and metadata.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        let meta = &self.meta;
        if meta.d != self.encoder.d {
            return bad(format!(
                "meta.d = {} but the frequency matrix has {} columns",
                meta.d, self.encoder.d
            ));
        }
        if meta.m != self.encoder.m || self.encoder.b.len() != meta.m * meta.d {
            return bad(format!(
                "meta.m = {} disagrees with the frequency matrix",
                meta.m
            ));
        }
        if meta.l != self.layers.len() || meta.widths.len() != meta.l {
            return bad(format!(
                "meta.L = {} but {} layers and {} widths are present",
                meta.l,
                self.layers.len(),
                meta.widths.len()
            ));
        }
        if meta.norm.d() != meta.d {
            return bad("normalization statistics have the wrong dimension".into());
        }
        meta.norm.validate()?;
        let mut fan_in = 2 * meta.m;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.inputs != fan_in
                || layer.outputs != meta.widths[i]
                || layer.w.len() != layer.inputs * layer.outputs
                || layer.b.len() != layer.outputs
            {
                return bad(format!(
                    "layer {i} does not chain ({fan_in} inputs expected)"
                ));
            }
            if !(layer.omega0.is_finite() && layer.omega0 > 0.0) {
                return bad(format!("layer {i} has invalid omega0"));
            }
            fan_in = layer.outputs;
        }
        if self.head.w.len() != fan_in {
            return bad(format!(
                "head has {} weights, last hidden width is {fan_in}",
                self.head.w.len()
            ));
        }
        if !self.params().iter().all(|p| p.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if !(meta.sigma_train.is_finite() && meta.sigma_train >= 0.0) {
            return bad("sigma_train must be finite and non-negative".into());
        }
        Ok(())
    }

    fn check_input(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.meta.d {
            return Err(Error::Input(format!(
                "input has dimension {}, model expects {}",
                u.len(),
                self.meta.d
            )));
        }
        if let Some(k) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite input component {k}")));
        }
        Ok(())
    }

    /// Forward pass carrying first (and optionally second) directional
    /// derivatives along every requested direction.
    fn jet(&self, u: &[f64], dirs: Directions<'_>, second: bool) -> Jet {
        let d = self.meta.d;
        let enc = &self.encoder;
        let m = enc.m;
        let n_dir = match dirs {
            Directions::Axes => d,
            Directions::Given(v) => v.len(),
        };

        let mut h = vec![0.0; 2 * m];
        let mut t = vec![vec![0.0; 2 * m]; n_dir];
        let mut s = if second {
            vec![vec![0.0; 2 * m]; n_dir]
        } else {
            Vec::new()
        };
        for j in 0..m {
            let row = enc.row(j);
            let phase = TWO_PI * dot(row, u);
            let (sn, cs) = phase.sin_cos();
            h[j] = sn;
            h[m + j] = cs;
            for k in 0..n_dir {
                let zp = TWO_PI
                    * match dirs {
                        Directions::Axes => row[k],
                        Directions::Given(v) => dot(row, v[k]),
                    };
                t[k][j] = cs * zp;
                t[k][m + j] = -sn * zp;
                if second {
                    let zp2 = zp * zp;
                    s[k][j] = -sn * zp2;
                    s[k][m + j] = -cs * zp2;
                }
            }
        }

        for layer in &self.layers {
            let w0 = layer.omega0;
            let mut hn = vec![0.0; layer.outputs];
            let mut tn = vec![vec![0.0; layer.outputs]; n_dir];
            let mut sn_ = if second {
                vec![vec![0.0; layer.outputs]; n_dir]
            } else {
                Vec::new()
            };
            for i in 0..layer.outputs {
                let row = layer.row(i);
                let a = dot(row, &h) + layer.b[i];
                let (sa, ca) = (w0 * a).sin_cos();
                hn[i] = sa;
                for k in 0..n_dir {
                    let ap = dot(row, &t[k]);
                    tn[k][i] = w0 * ca * ap;
                    if second {
                        let app = dot(row, &s[k]);
                        sn_[k][i] = -w0 * w0 * sa * ap * ap + w0 * ca * app;
                    }
                }
            }
            h = hn;
            t = tn;
            s = sn_;
        }

        let energy = dot(&self.head.w, &h) + self.head.b;
        let first = t.iter().map(|tk| dot(&self.head.w, tk)).collect();
        let second_out = s.iter().map(|sk| dot(&self.head.w, sk)).collect();
        Jet {
            energy,
            first,
            second: second_out,
        }
    }

    pub fn energy(&self, u: &[f64]) -> Result<f64> {
        self.check_input(u)?;
        Ok(self.jet(u, Directions::Given(&[]), false).energy)
    }

    /// `E(u)` together with `∇E(u)`.
    pub fn energy_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(u)?;
        Ok(self.backprop(u))
    }

    /// Energy and input gradient by reverse accumulation; cheaper than the
    /// tangent pass once `d` exceeds two or three.
    fn backprop(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let enc = &self.encoder;
        let m = enc.m;
        let mut enc_sin = vec![0.0; m];
        let mut enc_cos = vec![0.0; m];
        let mut h = vec![0.0; 2 * m];
        for j in 0..m {
            let (sn, cs) = (TWO_PI * dot(enc.row(j), u)).sin_cos();
            enc_sin[j] = sn;
            enc_cos[j] = cs;
            h[j] = sn;
            h[m + j] = cs;
        }
        let mut cosines = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w0 = layer.omega0;
            let mut hn = vec![0.0; layer.outputs];
            let mut cn = vec![0.0; layer.outputs];
            for i in 0..layer.outputs {
                let (sa, ca) = (w0 * (dot(layer.row(i), &h) + layer.b[i])).sin_cos();
                hn[i] = sa;
                cn[i] = w0 * ca;
            }
            h = hn;
            cosines.push(cn);
        }
        let energy = dot(&self.head.w, &h) + self.head.b;

        let mut h_bar = self.head.w.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let mut prev = vec![0.0; layer.inputs];
            for i in 0..layer.outputs {
                let a_bar = h_bar[i] * cosines[li][i];
                for (p, w) in prev.iter_mut().zip(layer.row(i)) {
                    *p += a_bar * w;
                }
            }
            h_bar = prev;
        }
        let mut grad = vec![0.0; enc.d];
        for j in 0..m {
            let z_bar = TWO_PI * (enc_cos[j] * h_bar[j] - enc_sin[j] * h_bar[m + j]);
            for (g, b) in grad.iter_mut().zip(enc.row(j)) {
                *g += z_bar * b;
            }
        }
        (energy, grad)
    }

    /// `−∇E(u)`.
    pub fn score(&self, u: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = self.energy_and_gradient(u)?;
        Ok(g.into_iter().map(|v| -v).collect())
    }

    /// `vᵀ ∇²E(u) v`.
    pub fn second_directional(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check_input(u)?;
        if v.len() != self.meta.d {
            return Err(Error::Input("direction has the wrong dimension".into()));
        }
        Ok(self.jet(u, Directions::Given(&[v]), true).second[0])
    }

    /// Second derivative along each coordinate axis; their sum is the
    /// Laplacian.
    pub fn axis_curvatures(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_input(u)?;
        Ok(self.jet(u, Directions::Axes, true).second)
    }

    pub fn laplacian(&self, u: &[f64]) -> Result<f64> {
        Ok(self.axis_curvatures(u)?.iter().sum())
    }

    pub fn evaluate(&self, u: &[f64], want: Want) -> Result<EnergyEvaluation> {
        self.check_input(u)?;
        if !want.score && !want.laplacian {
            return Ok(EnergyEvaluation {
                energy: self.jet(u, Directions::Given(&[]), false).energy,
                score: None,
                laplacian: None,
            });
        }
        if !want.laplacian {
            let (energy, grad) = self.backprop(u);
            if !energy.is_finite() {
                return Err(Error::numeric("non-finite energy"));
            }
            return Ok(EnergyEvaluation {
                energy,
                score: Some(grad.into_iter().map(|v| -v).collect()),
                laplacian: None,
            });
        }
        let jet = self.jet(u, Directions::Axes, want.laplacian);
        let out = EnergyEvaluation {
            energy: jet.energy,
            score: want.score.then(|| jet.first.iter().map(|v| -v).collect()),
            laplacian: want.laplacian.then(|| jet.second.iter().sum()),
        };
        if !out.energy.is_finite() {
            return Err(Error::numeric("non-finite energy"));
        }
        Ok(out)
    }

    /// Row-wise [`evaluate`](Self::evaluate); element `i` is exactly the
    /// single-point result for row `i`.
    pub fn energy_batch(&self, table: &VoxelTable, want: Want) -> Result<Vec<EnergyEvaluation>> {
        table.check_dim(self.meta.d)?;
        table.rows().map(|u| self.evaluate(u, want)).collect()
    }

    /// Evaluates an un-normalized intensity vector: the embedded
    /// normalization is applied first and the score is expressed in raw
    /// intensity units.
    pub fn evaluate_raw(&self, raw: &[f64], want: Want) -> Result<EnergyEvaluation> {
        self.check_input(raw)?;
        let u = self.meta.norm.normalize(raw);
        let mut out = self.evaluate(&u, want)?;
        let scale = &self.meta.norm.per_channel_scale;
        if let Some(score) = out.score.as_mut() {
            for (s, c) in score.iter_mut().zip(scale) {
                *s /= c;
            }
        }
        if let Some(lap) = out.laplacian.as_mut() {
            let curv = self.axis_curvatures(&u)?;
            *lap = curv.iter().zip(scale).map(|(c, s)| c / (s * s)).sum();
        }
        Ok(out)
    }

    /// Total number of learnable parameters.
    pub fn param_count(&self) -> usize {
        self.encoder.b.len()
            + self
                .layers
                .iter()
                .map(|l| l.w.len() + l.b.len())
                .sum::<usize>()
            + self.head.w.len()
            + 1
    }

    /// Flat parameter vector in canonical order: B row-major, then for each
    /// layer W row-major followed by b, then head weights and head bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.encoder.b);
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out.extend_from_slice(&self.head.w);
        out.push(self.head.b);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Config(format!(
                "{} parameters supplied, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(&mut self.encoder.b);
        for l in &mut self.layers {
            take(&mut l.w);
            take(&mut l.b);
        }
        take(&mut self.head.w);
        let mut hb = [0.0];
        take(&mut hb);
        self.head.b = hb[0];
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> EnergyModel {
        let arch = Architecture {
            m: 6,
            widths: vec![8, 7],
            omega0: 1.3,
            fourier_scale: 0.8,
            head_scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EnergyModel::init(3, &arch, seed, &mut rng).unwrap()
    }

    #[test]
    fn encode_origin_and_half_period() {
        let enc = FourierEncoder::new(3, 2, vec![0.3, -1.0, 2.0, 0.5, 7.0, 1.0]).unwrap();
        assert_eq!(
            enc.encode(&[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
        let half = FourierEncoder::new(1, 1, vec![0.5]).unwrap();
        let e = half.encode(&[1.0]).unwrap();
        assert!(e[0].abs() < 1e-15);
        assert_eq!(e[1], -1.0);
        assert!(matches!(enc.encode(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_constant_energy() {
        let mut m = tiny(1);
        m.head.w.iter_mut().for_each(|w| *w = 0.0);
        m.head.b = 0.75;
        let u = [0.3, -1.2, 2.0];
        assert_eq!(m.energy(&u).unwrap(), 0.75);
        assert!(m.score(&u).unwrap().iter().all(|&s| s == 0.0));
        assert_eq!(m.laplacian(&u).unwrap(), 0.0);
    }

    #[test]
    fn laplacian_is_sum_of_axis_second_derivatives() {
        let m = tiny(2);
        let u = [0.1, 0.4, -0.9];
        let total = m.laplacian(&u).unwrap();
        let mut sum = 0.0;
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            sum += m.second_directional(&u, &e).unwrap();
        }
        assert!((total - sum).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny(3);
        assert!(matches!(m.energy(&[0.0, 1.0]), Err(Error::Input(_))));
        assert!(matches!(
            m.energy(&[0.0, f64::NAN, 1.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn params_round_trip() {
        let mut m = tiny(4);
        let p = m.params();
        assert_eq!(p.len(), m.param_count());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        m.set_params(&shifted).unwrap();
        assert_eq!(m.params(), shifted);
        assert_eq!(m.head.b, p[p.len() - 1] + 1.0);
        assert!(m.set_params(&p[1..]).is_err());
    }

    #[test]
    fn meta_dimension_mismatch_fails_validation() {
        let mut m = tiny(5);
        m.meta.d = 4;
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn raw_evaluation_applies_normalization() {
        let mut m = tiny(6);
        m.meta.norm = NormStats {
            method: crate::norm::NormMethod::Zscore,
            per_channel_center: vec![1.0, -2.0, 0.5],
            per_channel_scale: vec![2.0, 0.5, 3.0],
        };
        let raw = [1.4, -2.3, 2.0];
        let u = m.meta.norm.normalize(&raw);
        let a = m.evaluate_raw(&raw, Want::ALL).unwrap();
        let b = m.evaluate(&u, Want::ALL).unwrap();
        assert!((a.energy - b.energy).abs() < 1e-12);
        let sa = a.score.unwrap();
        let sb = b.score.unwrap();
        for k in 0..3 {
            let s = m.meta.norm.per_channel_scale[k];
            assert!((sa[k] * s - sb[k]).abs() < 1e-12);
        }
    }
}
