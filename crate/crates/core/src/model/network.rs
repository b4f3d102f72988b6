// Per-sequence forward and reverse-mode evaluation.
//
// Each example is processed only up to its own length, so padding never
// reaches the recurrence and batching cannot change a result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GruOffsets, HaltModel};
use crate::error::{HaltError, Result};
use crate::features::FEATURE_DIM;

const LN_EPS: f64 = 1e-5;

/// Forward state of one sequence.
pub struct SequenceCache {
    len: usize,
    x: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    a1: Vec<f64>,
    g1: Vec<f64>,
    layers: Vec<LayerCache>,
    pub(crate) selected: Vec<usize>,
    pooled: Vec<f64>,
    out_norm: Option<(Vec<f64>, f64)>,
    head_in: Vec<f64>,
    pub logit: f64,
}

impl SequenceCache {
    /// Timesteps averaged by the pooling stage, in selection order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Top-layer output rows (`len x output_dim`).
    pub fn top_output(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").output
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Input rows after the column mask (`len x FEATURE_DIM`).
    pub fn input(&self) -> &[f64] {
        &self.x
    }
}

struct LayerCache {
    input: Vec<f64>,
    in_dim: usize,
    dirs: Vec<DirCache>,
    output: Vec<f64>,
    /// Inverted-dropout multipliers applied to `output` before the next layer.
    dropout: Option<Vec<f64>>,
}

struct DirCache {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    super::sigmoid(x)
}

fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + libm::erf(a * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(a: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(a * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + a * pdf
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[i] = bias[i] + sum_j w[i, j] x[j]`
fn affine(w: &[f64], bias: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&w[i * cols..(i + 1) * cols], x) + bias.map_or(0.0, |b| b[i]);
    }
}

/// `dx[j] += sum_i w[i, j] dy[i]`
fn affine_t(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (i, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (x, &wv) in dx.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *x += d * wv;
        }
    }
}

/// `dw[i, j] += dy[i] x[j]`
fn outer_acc(dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let cols = x.len();
    for (i, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (w, &xv) in dw[i * cols..(i + 1) * cols].iter_mut().zip(x) {
            *w += d * xv;
        }
    }
}

/// LayerNorm of one vector; returns (xhat, inv_std) and writes `gain*xhat+bias`.
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], y: &mut [f64], xhat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv;
        y[i] = gain[i] * xhat[i] + bias[i];
    }
    inv
}

/// Accumulates gain/bias gradients and returns dL/dx.
fn layer_norm_backward(dy: &[f64], xhat: &[f64], inv: f64, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dot(&dxhat, xhat) / n;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, xh)| inv * (d - mean_d - xh * mean_dx))
        .collect()
}

fn ensure_finite(values: &[f64], stage: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HaltError::numeric(stage()))
    }
}

/// Number of timesteps averaged by top-q pooling for a sequence of `len`.
///
/// `max(1, ceil(q * len))`; the product is nudged down by 1e-9 so that exact
/// multiples such as `0.15 * 20` are not pushed to the next integer by
/// floating-point error.
pub fn pool_count(top_q: f64, len: usize) -> usize {
    let k = (top_q * len as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(len)
}

/// Indices of the `k` highest scores; earlier timesteps win ties.
fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn gru_direction(p: &[f64], off: GruOffsets, hidden: usize, input: &[f64], len: usize, reverse: bool) -> DirCache {
    let h = hidden;
    let in_dim = off.input_dim;
    let w_in = &p[off.w_input..off.w_input + 3 * h * in_dim];
    let w_rec = &p[off.w_recurrent..off.w_recurrent + 3 * h * h];
    let bias = &p[off.bias..off.bias + 3 * h];

    let mut gx = vec![0.0; len * 3 * h];
    for t in 0..len {
        affine(w_in, Some(bias), &input[t * in_dim..(t + 1) * in_dim], &mut gx[t * 3 * h..(t + 1) * 3 * h]);
    }

    let mut cache = DirCache {
        z: vec![0.0; len * h],
        r: vec![0.0; len * h],
        n: vec![0.0; len * h],
        h: vec![0.0; len * h],
    };
    let mut h_prev = vec![0.0; h];
    let mut gh = vec![0.0; 2 * h];
    let mut ghn = vec![0.0; h];
    let mut rh = vec![0.0; h];
    for step in 0..len {
        let t = if reverse { len - 1 - step } else { step };
        let g = &gx[t * 3 * h..(t + 1) * 3 * h];
        affine(&w_rec[..2 * h * h], None, &h_prev, &mut gh);
        for i in 0..h {
            let z = sigmoid(g[i] + gh[i]);
            let r = sigmoid(g[h + i] + gh[h + i]);
            cache.z[t * h + i] = z;
            cache.r[t * h + i] = r;
            rh[i] = r * h_prev[i];
        }
        affine(&w_rec[2 * h * h..], None, &rh, &mut ghn);
        for i in 0..h {
            let n = (g[2 * h + i] + ghn[i]).tanh();
            let z = cache.z[t * h + i];
            let hn = (1.0 - z) * h_prev[i] + z * n;
            cache.n[t * h + i] = n;
            cache.h[t * h + i] = hn;
            h_prev[i] = hn;
        }
    }
    cache
}

/// Reverse pass for one direction. `dout` holds dL/dh for every timestep of
/// this direction (`len x hidden`); gradients w.r.t. the layer input are added
/// to `dinput`.
#[allow(clippy::too_many_arguments)]
fn gru_direction_backward(
    p: &[f64],
    off: GruOffsets,
    hidden: usize,
    input: &[f64],
    cache: &DirCache,
    dout: &[f64],
    len: usize,
    reverse: bool,
    grads: &mut [f64],
    dinput: &mut [f64],
) {
    let h = hidden;
    let in_dim = off.input_dim;
    let w_in = &p[off.w_input..off.w_input + 3 * h * in_dim];
    let w_rec = &p[off.w_recurrent..off.w_recurrent + 3 * h * h];

    let mut dh_carry = vec![0.0; h];
    let mut dgx = vec![0.0; 3 * h];
    let mut d_rh = vec![0.0; h];
    let mut rh = vec![0.0; h];
    let zeros = vec![0.0; h];
    for step in (0..len).rev() {
        let t = if reverse { len - 1 - step } else { step };
        let h_prev: &[f64] = if step == 0 {
            &zeros
        } else {
            let tp = if reverse { t + 1 } else { t - 1 };
            &cache.h[tp * h..(tp + 1) * h]
        };
        let z = &cache.z[t * h..(t + 1) * h];
        let r = &cache.r[t * h..(t + 1) * h];
        let n = &cache.n[t * h..(t + 1) * h];

        let mut dh_prev = vec![0.0; h];
        for i in 0..h {
            let dh = dout[t * h + i] + dh_carry[i];
            let dn = dh * z[i];
            let dz = dh * (n[i] - h_prev[i]);
            dh_prev[i] = dh * (1.0 - z[i]);
            dgx[i] = dz * z[i] * (1.0 - z[i]);
            dgx[2 * h + i] = dn * (1.0 - n[i] * n[i]);
            rh[i] = r[i] * h_prev[i];
        }
        d_rh.fill(0.0);
        affine_t(&w_rec[2 * h * h..], &dgx[2 * h..], &mut d_rh);
        for i in 0..h {
            let dr = d_rh[i] * h_prev[i];
            dh_prev[i] += d_rh[i] * r[i];
            dgx[h + i] = dr * r[i] * (1.0 - r[i]);
        }

        let u = &input[t * in_dim..(t + 1) * in_dim];
        {
            let gb = &mut grads[off.bias..off.bias + 3 * h];
            for (g, d) in gb.iter_mut().zip(&dgx) {
                *g += d;
            }
        }
        outer_acc(&dgx, u, &mut grads[off.w_input..off.w_input + 3 * h * in_dim]);
        affine_t(w_in, &dgx, &mut dinput[t * in_dim..(t + 1) * in_dim]);

        let gr = &mut grads[off.w_recurrent..off.w_recurrent + 3 * h * h];
        outer_acc(&dgx[..2 * h], h_prev, &mut gr[..2 * h * h]);
        outer_acc(&dgx[2 * h..], &rh, &mut gr[2 * h * h..]);
        affine_t(&w_rec[..2 * h * h], &dgx[..2 * h], &mut dh_prev);

        dh_carry = dh_prev;
    }
}

/// Runs the network on one unpadded sequence (`len x FEATURE_DIM`).
///
/// `dropout_seed` is `Some` in training mode.
pub(crate) fn forward_sequence(model: &HaltModel, rows: &[f64], len: usize, dropout_seed: Option<u64>) -> Result<SequenceCache> {
    if len == 0 {
        return Err(HaltError::Precondition("sequence length 0".into()));
    }
    let cfg = &model.config;
    let p = &model.params;
    let off = &model.layout.offsets;
    let f = FEATURE_DIM;
    let pd = cfg.proj_dim;
    let hd = cfg.hidden_dim;
    let d = cfg.output_dim();

    let mut x = rows[..len * f].to_vec();
    for row in x.chunks_mut(f) {
        for (c, v) in row.iter_mut().enumerate() {
            if !cfg.column_mask.is_active(c) {
                *v = 0.0;
            }
        }
    }

    let gain = &p[off.ln_gain..off.ln_gain + f];
    let lbias = &p[off.ln_bias..off.ln_bias + f];
    let mut xhat = vec![0.0; len * f];
    let mut inv_std = vec![0.0; len];
    let mut y = vec![0.0; len * f];
    for t in 0..len {
        inv_std[t] = layer_norm(
            &x[t * f..(t + 1) * f],
            gain,
            lbias,
            &mut y[t * f..(t + 1) * f],
            &mut xhat[t * f..(t + 1) * f],
        );
    }
    ensure_finite(&y, || "input layer norm".into())?;

    let w1 = &p[off.w1..off.w1 + pd * f];
    let b1 = &p[off.b1..off.b1 + pd];
    let w2 = &p[off.w2..off.w2 + pd * pd];
    let b2 = &p[off.b2..off.b2 + pd];
    let mut a1 = vec![0.0; len * pd];
    let mut g1 = vec![0.0; len * pd];
    let mut e = vec![0.0; len * pd];
    for t in 0..len {
        let a = &mut a1[t * pd..(t + 1) * pd];
        affine(w1, Some(b1), &y[t * f..(t + 1) * f], a);
        for (g, &av) in g1[t * pd..(t + 1) * pd].iter_mut().zip(a.iter()) {
            *g = gelu(av);
        }
        affine(w2, Some(b2), &g1[t * pd..(t + 1) * pd], &mut e[t * pd..(t + 1) * pd]);
    }
    ensure_finite(&e, || "input projection".into())?;

    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut layers: Vec<LayerCache> = Vec::with_capacity(cfg.num_layers);
    let mut input = e;
    for (l, dirs_off) in off.gru.iter().enumerate() {
        let in_dim = dirs_off[0].input_dim;
        let dirs: Vec<DirCache> = dirs_off
            .iter()
            .enumerate()
            .map(|(dir, &o)| gru_direction(p, o, hd, &input, len, dir == 1))
            .collect();
        let mut output = vec![0.0; len * d];
        for t in 0..len {
            for (dir, c) in dirs.iter().enumerate() {
                output[t * d + dir * hd..t * d + (dir + 1) * hd].copy_from_slice(&c.h[t * hd..(t + 1) * hd]);
            }
        }
        ensure_finite(&output, || format!("gru layer {l}"))?;

        let last = l + 1 == cfg.num_layers;
        let dropout = match (&mut rng, last) {
            (Some(rng), false) if cfg.dropout_rate > 0.0 => {
                let keep = 1.0 - cfg.dropout_rate;
                Some(
                    (0..len * d)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let next_input = match &dropout {
            Some(m) => output.iter().zip(m).map(|(o, m)| o * m).collect(),
            None => output.clone(),
        };
        layers.push(LayerCache {
            input,
            in_dim,
            dirs,
            output,
            dropout,
        });
        input = next_input;
    }

    let top = &layers.last().expect("num_layers >= 1").output;
    let scores: Vec<f64> = top.chunks(d).map(|row| dot(row, row).sqrt()).collect();
    let k = pool_count(cfg.top_q, len);
    let selected = top_indices(&scores, k);
    let mut pooled = vec![0.0; d];
    for &t in &selected {
        for (pv, &o) in pooled.iter_mut().zip(&top[t * d..(t + 1) * d]) {
            *pv += o;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= k as f64);
    ensure_finite(&pooled, || "top-q pooling".into())?;

    let (out_norm, head_in) = match off.out_ln {
        Some((g, b)) => {
            let mut xh = vec![0.0; d];
            let mut yv = vec![0.0; d];
            let inv = layer_norm(&pooled, &p[g..g + d], &p[b..b + d], &mut yv, &mut xh);
            (Some((xh, inv)), yv)
        }
        None => (None, pooled.clone()),
    };
    let logit = dot(&p[off.head_w..off.head_w + d], &head_in) + p[off.head_b];
    if !logit.is_finite() {
        return Err(HaltError::numeric("classification head"));
    }

    Ok(SequenceCache {
        len,
        x,
        xhat,
        inv_std,
        a1,
        g1,
        layers,
        selected,
        pooled,
        out_norm,
        head_in,
        logit,
    })
}

/// Accumulates parameter gradients for one sequence given dL/dlogit and
/// returns dL/dinput (`len x FEATURE_DIM`, zero in masked columns).
pub(crate) fn backward_sequence(model: &HaltModel, c: &SequenceCache, dlogit: f64, grads: &mut [f64]) -> Vec<f64> {
    let cfg = &model.config;
    let p = &model.params;
    let off = &model.layout.offsets;
    let f = FEATURE_DIM;
    let pd = cfg.proj_dim;
    let hd = cfg.hidden_dim;
    let d = cfg.output_dim();
    let len = c.len;

    grads[off.head_b] += dlogit;
    for i in 0..d {
        grads[off.head_w + i] += dlogit * c.head_in[i];
    }
    let dhead_in: Vec<f64> = p[off.head_w..off.head_w + d].iter().map(|w| w * dlogit).collect();
    let dpooled = match (&c.out_norm, off.out_ln) {
        (Some((xh, inv)), Some((g, b))) => {
            let (dg, rest) = grads.split_at_mut(b);
            layer_norm_backward(&dhead_in, xh, *inv, &p[g..g + d], &mut dg[g..g + d], &mut rest[..d])
        }
        _ => dhead_in,
    };

    let k = c.selected.len() as f64;
    let mut dout = vec![0.0; len * d];
    for &t in &c.selected {
        for (g, &dp) in dout[t * d..(t + 1) * d].iter_mut().zip(&dpooled) {
            *g += dp / k;
        }
    }

    for (l, layer) in c.layers.iter().enumerate().rev() {
        if let Some(mask) = &layer.dropout {
            // dout currently holds gradients w.r.t. the dropped-out output
            for (g, m) in dout.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        let mut dinput = vec![0.0; len * layer.in_dim];
        for (dir, dc) in layer.dirs.iter().enumerate() {
            let mut dslice = vec![0.0; len * hd];
            for t in 0..len {
                dslice[t * hd..(t + 1) * hd].copy_from_slice(&dout[t * d + dir * hd..t * d + (dir + 1) * hd]);
            }
            gru_direction_backward(
                p,
                off.gru[l][dir],
                hd,
                &layer.input,
                dc,
                &dslice,
                len,
                dir == 1,
                grads,
                &mut dinput,
            );
        }
        dout = dinput;
    }

    // dout is now dL/de (projection output)
    let w1 = &p[off.w1..off.w1 + pd * f];
    let w2 = &p[off.w2..off.w2 + pd * pd];
    let gain = &p[off.ln_gain..off.ln_gain + f];
    let mut dx = vec![0.0; len * f];
    let mut dg1 = vec![0.0; pd];
    let mut dy = vec![0.0; f];
    for t in 0..len {
        let de = &dout[t * pd..(t + 1) * pd];
        let g1 = &c.g1[t * pd..(t + 1) * pd];
        for (g, v) in grads[off.b2..off.b2 + pd].iter_mut().zip(de) {
            *g += v;
        }
        outer_acc(de, g1, &mut grads[off.w2..off.w2 + pd * pd]);
        dg1.fill(0.0);
        affine_t(w2, de, &mut dg1);
        let da1: Vec<f64> = dg1
            .iter()
            .zip(&c.a1[t * pd..(t + 1) * pd])
            .map(|(g, &a)| g * gelu_grad(a))
            .collect();
        for (g, v) in grads[off.b1..off.b1 + pd].iter_mut().zip(&da1) {
            *g += v;
        }
        let y: Vec<f64> = (0..f)
            .map(|i| gain[i] * c.xhat[t * f + i] + p[off.ln_bias + i])
            .collect();
        outer_acc(&da1, &y, &mut grads[off.w1..off.w1 + pd * f]);
        dy.fill(0.0);
        affine_t(w1, &da1, &mut dy);
        let (gg, gb) = grads.split_at_mut(off.ln_bias);
        let dxt = layer_norm_backward(
            &dy,
            &c.xhat[t * f..(t + 1) * f],
            c.inv_std[t],
            gain,
            &mut gg[off.ln_gain..off.ln_gain + f],
            &mut gb[..f],
        );
        for (i, v) in dxt.into_iter().enumerate() {
            dx[t * f + i] = if cfg.column_mask.is_active(i) { v } else { 0.0 };
        }
    }
    dx
}

/// Per-example BCE-with-logits loss and its derivative w.r.t. the logit.
pub fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}
