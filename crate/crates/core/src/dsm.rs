//! Denoising score matching loss and its exact parameter gradient.
//!
//! For clean rows `u`, noise `ε` and `a = u + ε` the per-row loss is
//! `‖−∇ₐE(a) + ε/σ²‖² = ‖g − t‖²` with `g = ∇ₐE(a)` and `t = ε/σ²`.
//! Because `g` is itself a derivative of the network, the parameter gradient
//! is obtained by reverse accumulation through the forward pass *and* its
//! input tangents. The batched path below runs that computation on matrices
//! (one GEMM per layer and direction block), in fixed-size row chunks that
//! are reduced in order, so results are reproducible.

use crate::error::{Error, Result};
use crate::model::{EnergyModel, TWO_PI};

const CHUNK_ROWS: usize = 128;

/// `C (m×n) = alpha·op(A)·op(B) + beta·C`, every operand row-major.
/// With `a_t`, `a` holds the `k×m` matrix whose transpose is used; likewise
/// `b_t` means `b` holds `n×k`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the asserted extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_batch(model: &EnergyModel, clean: &[f64], noise: &[f64], sigma: f64) -> Result<usize> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise level must be positive, got {sigma}"
        )));
    }
    let d = model.d();
    if clean.len() != noise.len() {
        return Err(Error::Input(format!(
            "clean batch has {} values, noise batch {}",
            clean.len(),
            noise.len()
        )));
    }
    if clean.is_empty() || !clean.len().is_multiple_of(d) {
        return Err(Error::Input(format!(
            "batch of {} values is not a nonempty set of {d}-vectors",
            clean.len()
        )));
    }
    Ok(clean.len() / d)
}

/// Mean over rows of `‖−∇E(u + ε) + ε/σ²‖²`, evaluated through the
/// single-point score path.
pub fn dsm_loss(model: &EnergyModel, clean: &[f64], noise: &[f64], sigma: f64) -> Result<f64> {
    let n = check_batch(model, clean, noise, sigma)?;
    let d = model.d();
    let inv_var = 1.0 / (sigma * sigma);
    let mut total = 0.0;
    let mut a = vec![0.0; d];
    for r in 0..n {
        let u = &clean[r * d..(r + 1) * d];
        let e = &noise[r * d..(r + 1) * d];
        for k in 0..d {
            a[k] = u[k] + e[k];
        }
        let (_, g) = model.energy_and_gradient(&a).map_err(|err| match err {
            Error::Input(msg) => Error::Numeric {
                message: msg,
                index: Some(r),
                last_valid: None,
            },
            other => other,
        })?;
        let row: f64 = (0..d).map(|k| (g[k] - e[k] * inv_var).powi(2)).sum();
        if !row.is_finite() {
            return Err(Error::Numeric {
                message: "non-finite score-matching residual".into(),
                index: Some(r),
                last_valid: None,
            });
        }
        total += row;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsmGradient {
    pub loss: f64,
    /// Gradient in the canonical order of [`EnergyModel::params`].
    pub grad: Vec<f64>,
}

/// Loss and exact gradient with respect to every parameter.
pub fn loss_param_gradient(
    model: &EnergyModel,
    clean: &[f64],
    noise: &[f64],
    sigma: f64,
) -> Result<DsmGradient> {
    let n = check_batch(model, clean, noise, sigma)?;
    let d = model.d();
    let mut acc = Accumulator::new(model);
    let mut loss = 0.0;
    let scale = 2.0 / n as f64;
    let mut start = 0;
    while start < n {
        let rows = CHUNK_ROWS.min(n - start);
        let range = start * d..(start + rows) * d;
        loss += chunk(
            model,
            &clean[range.clone()],
            &noise[range],
            sigma,
            scale,
            &mut acc,
        )
        .map_err(|err| match err {
            Error::Numeric { message, index, .. } => Error::Numeric {
                message,
                index: index.map(|i| i + start),
                last_valid: None,
            },
            other => other,
        })?;
        start += rows;
    }
    Ok(DsmGradient {
        loss: loss / n as f64,
        grad: acc.flatten(),
    })
}

struct Accumulator {
    b: Vec<f64>,
    w: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
    head_w: Vec<f64>,
}

impl Accumulator {
    fn new(model: &EnergyModel) -> Self {
        Self {
            b: vec![0.0; model.encoder.b.len()],
            w: model.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            head_w: vec![0.0; model.head.w.len()],
        }
    }

    fn flatten(self) -> Vec<f64> {
        let mut out = self.b;
        for (w, b) in self.w.into_iter().zip(self.bias) {
            out.extend(w);
            out.extend(b);
        }
        out.extend(self.head_w);
        // The loss never sees the energy itself, only its input gradient.
        out.push(0.0);
        out
    }
}

/// Tensors kept from the forward pass of one layer.
struct LayerCache {
    /// Layer input, `rows × inputs`.
    x: Vec<f64>,
    /// Input tangents, `(rows·d) × inputs`, row `r·d + k` is direction `k`.
    tx: Vec<f64>,
    sin: Vec<f64>,
    cos: Vec<f64>,
    /// Pre-activation tangents `W·tx`, `(rows·d) × outputs`.
    ap: Vec<f64>,
}

/// Forward and backward pass over one chunk. Adds `scale`-weighted
/// gradients into `acc` and returns the summed (not averaged) loss.
fn chunk(
    model: &EnergyModel,
    clean: &[f64],
    noise: &[f64],
    sigma: f64,
    scale: f64,
    acc: &mut Accumulator,
) -> Result<f64> {
    let d = model.d();
    let rows = clean.len() / d;
    let nd = rows * d;
    let m = model.encoder.m;
    let two_m = 2 * m;
    let fb = &model.encoder.b;
    let inv_var = 1.0 / (sigma * sigma);

    let a: Vec<f64> = clean.iter().zip(noise).map(|(u, e)| u + e).collect();

    // Encoding: z = aBᵀ, h0 = [sin 2πz, cos 2πz], tangents along each axis.
    let mut z = vec![0.0; rows * m];
    gemm(rows, d, m, &a, false, fb, true, 0.0, &mut z);
    let mut enc_sin = vec![0.0; rows * m];
    let mut enc_cos = vec![0.0; rows * m];
    let mut h = vec![0.0; rows * two_m];
    let mut t = vec![0.0; nd * two_m];
    for r in 0..rows {
        for j in 0..m {
            let (s, c) = (TWO_PI * z[r * m + j]).sin_cos();
            enc_sin[r * m + j] = s;
            enc_cos[r * m + j] = c;
            h[r * two_m + j] = s;
            h[r * two_m + m + j] = c;
            for k in 0..d {
                let bjk = TWO_PI * fb[j * d + k];
                let row = (r * d + k) * two_m;
                t[row + j] = c * bjk;
                t[row + m + j] = -s * bjk;
            }
        }
    }

    let mut caches = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (inp, out, w0) = (layer.inputs, layer.outputs, layer.omega0);
        let mut pre = vec![0.0; rows * out];
        gemm(rows, inp, out, &h, false, &layer.w, true, 0.0, &mut pre);
        let mut ap = vec![0.0; nd * out];
        gemm(nd, inp, out, &t, false, &layer.w, true, 0.0, &mut ap);
        let mut sin = vec![0.0; rows * out];
        let mut cos = vec![0.0; rows * out];
        let mut hn = vec![0.0; rows * out];
        let mut tn = vec![0.0; nd * out];
        for r in 0..rows {
            for i in 0..out {
                let (s, c) = (w0 * (pre[r * out + i] + layer.b[i])).sin_cos();
                sin[r * out + i] = s;
                cos[r * out + i] = c;
                hn[r * out + i] = s;
                for k in 0..d {
                    let idx = (r * d + k) * out + i;
                    tn[idx] = w0 * c * ap[idx];
                }
            }
        }
        caches.push(LayerCache {
            x: std::mem::replace(&mut h, hn),
            tx: std::mem::replace(&mut t, tn),
            sin,
            cos,
            ap,
        });
    }

    // g = ∇E along each axis, residual r = g − ε/σ².
    let width = model.head.w.len();
    let mut loss = 0.0;
    let mut t_bar = vec![0.0; nd * width];
    for r in 0..rows {
        let mut row_loss = 0.0;
        for k in 0..d {
            let idx = r * d + k;
            let tk = &t[idx * width..(idx + 1) * width];
            let g = crate::model::dot(&model.head.w, tk);
            let res = g - noise[idx] * inv_var;
            row_loss += res * res;
            let g_bar = scale * res;
            for i in 0..width {
                acc.head_w[i] += tk[i] * g_bar;
                t_bar[idx * width + i] = model.head.w[i] * g_bar;
            }
        }
        if !row_loss.is_finite() {
            return Err(Error::Numeric {
                message: "non-finite score-matching residual".into(),
                index: Some(r),
                last_valid: None,
            });
        }
        loss += row_loss;
    }

    // Reverse through the sine layers. h_bar starts at zero: the loss does
    // not depend on the energy value.
    let mut h_bar = vec![0.0; rows * width];
    for (li, layer) in model.layers.iter().enumerate().rev() {
        let cache = &caches[li];
        let (inp, out, w0) = (layer.inputs, layer.outputs, layer.omega0);
        let mut ap_bar = vec![0.0; nd * out];
        let mut a_bar = vec![0.0; rows * out];
        for r in 0..rows {
            for i in 0..out {
                let (s, c) = (cache.sin[r * out + i], cache.cos[r * out + i]);
                let mut curv = 0.0;
                for k in 0..d {
                    let idx = (r * d + k) * out + i;
                    ap_bar[idx] = w0 * c * t_bar[idx];
                    curv += t_bar[idx] * cache.ap[idx];
                }
                a_bar[r * out + i] = -w0 * w0 * s * curv + w0 * c * h_bar[r * out + i];
            }
        }
        let wg = &mut acc.w[li];
        gemm(out, nd, inp, &ap_bar, true, &cache.tx, false, 1.0, wg);
        gemm(out, rows, inp, &a_bar, true, &cache.x, false, 1.0, wg);
        let bg = &mut acc.bias[li];
        for r in 0..rows {
            for i in 0..out {
                bg[i] += a_bar[r * out + i];
            }
        }
        let mut t_prev = vec![0.0; nd * inp];
        gemm(
            nd,
            out,
            inp,
            &ap_bar,
            false,
            &layer.w,
            false,
            0.0,
            &mut t_prev,
        );
        let mut h_prev = vec![0.0; rows * inp];
        gemm(
            rows,
            out,
            inp,
            &a_bar,
            false,
            &layer.w,
            false,
            0.0,
            &mut h_prev,
        );
        t_bar = t_prev;
        h_bar = h_prev;
    }

    // Reverse through the encoding.
    let four_pi2 = TWO_PI * TWO_PI;
    for r in 0..rows {
        for j in 0..m {
            let (s, c) = (enc_sin[r * m + j], enc_cos[r * m + j]);
            let mut z_bar = TWO_PI * (c * h_bar[r * two_m + j] - s * h_bar[r * two_m + m + j]);
            for k in 0..d {
                let row = (r * d + k) * two_m;
                let (ts, tc) = (t_bar[row + j], t_bar[row + m + j]);
                let bjk = fb[j * d + k];
                z_bar -= four_pi2 * bjk * (ts * s + tc * c);
                acc.b[j * d + k] += TWO_PI * (ts * c - tc * s);
            }
            for k in 0..d {
                acc.b[j * d + k] += z_bar * a[r * d + k];
            }
        }
    }
    Ok(loss)
}
