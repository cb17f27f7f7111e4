//! Forward and backward passes. All products run sequentially so results
//! are bit-reproducible regardless of the global thread setting.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};
use rand::Rng;

use super::{AttentionConfig, AttentionParams, GateModuleParams, MhaBlockParams, Vectorize, WindowSet};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Rows evaluated per chunk when predicting a whole window set.
const PREDICT_CHUNK: usize = 256;

fn mm(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

fn add_bias(m: &mut Mat<f64>, b: &Mat<f64>) {
    for j in 0..m.ncols() {
        let bj = b[(0, j)];
        m.col_mut(j).iter_mut().for_each(|x| *x += bj);
    }
}

fn col_sums(m: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(1, m.ncols(), |_, j| m.col(j).iter().sum())
}

fn relu(m: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].max(0.0))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn all_finite(m: &Mat<f64>) -> bool {
    m.col_iter().all(|c| c.iter().all(|x| x.is_finite()))
}

/// Inverted-dropout multipliers for the two hidden head layers: each entry
/// is 0 (dropped) or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub h1: Mat<f64>,
    pub h2: Mat<f64>,
}

impl DropoutMasks {
    pub fn sample(rate: f64, batch: usize, hidden: (usize, usize), rng: &mut impl Rng) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |cols: usize| {
            let mut m = Mat::zeros(batch, cols);
            for i in 0..batch {
                for j in 0..cols {
                    m[(i, j)] = if rng.random::<f64>() < rate { 0.0 } else { keep };
                }
            }
            m
        };
        let h1 = draw(hidden.0);
        let h2 = draw(hidden.1);
        Self { h1, h2 }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    Train(&'a DropoutMasks),
}

pub struct MhaOutput {
    /// `N × D`.
    pub output: Mat<f64>,
    /// One `N × N` row-stochastic matrix per head.
    pub attention: Vec<Mat<f64>>,
}

pub struct GateOutput {
    pub output: Vec<f64>,
    pub gates: Vec<f64>,
}

struct BlockCache {
    x_in: Mat<f64>,
    x: Mat<f64>,
    q: Mat<f64>,
    k: Mat<f64>,
    v: Mat<f64>,
    /// Index `sample * heads + head`.
    attn: Vec<Mat<f64>>,
    heads: Mat<f64>,
    xhat: Mat<f64>,
    inv_std: Vec<f64>,
    y: Mat<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    fused: Mat<f64>,
    g_a1: Mat<f64>,
    g_r1: Mat<f64>,
    gate: Mat<f64>,
    h_a1: Mat<f64>,
    h1: Mat<f64>,
    h_a2: Mat<f64>,
    h2: Mat<f64>,
    out: Mat<f64>,
}

/// Attention, output projection, residual and layer norm over `batch`
/// stacked sequences of length `n` (`x` is `batch·n × D`).
fn mha_core(blk: &MhaBlockParams, x_in: Mat<f64>, x: Mat<f64>, n: usize, n_heads: usize) -> BlockCache {
    let (rows, d) = (x.nrows(), x.ncols());
    let batch = rows / n;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = mm(x.as_ref(), blk.w_q.as_ref());
    let k = mm(x.as_ref(), blk.w_k.as_ref());
    let v = mm(x.as_ref(), blk.w_v.as_ref());

    let mut attn = Vec::with_capacity(batch * n_heads);
    let mut heads = Mat::zeros(rows, d);
    for s in 0..batch {
        let off = s * n;
        for h in 0..n_heads {
            let c0 = h * dh;
            let mut a = Mat::zeros(n, n);
            for i in 0..n {
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in c0..c0 + dh {
                        dot += q[(off + i, c)] * k[(off + j, c)];
                    }
                    a[(i, j)] = dot * scale;
                    max = max.max(a[(i, j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (a[(i, j)] - max).exp();
                    a[(i, j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    a[(i, j)] /= sum;
                }
            }
            for i in 0..n {
                for c in c0..c0 + dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += a[(i, j)] * v[(off + j, c)];
                    }
                    heads[(off + i, c)] = acc;
                }
            }
            attn.push(a);
        }
    }

    let o = mm(heads.as_ref(), blk.w_o.as_ref());
    let mut xhat = Mat::zeros(rows, d);
    let mut y = Mat::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r: Vec<f64> = (0..d).map(|c| x[(i, c)] + o[(i, c)]).collect();
        let mu = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            let xh = (r[c] - mu) * inv;
            xhat[(i, c)] = xh;
            y[(i, c)] = blk.ln_gain[(0, c)] * xh + blk.ln_shift[(0, c)];
        }
        inv_std.push(inv);
    }
    BlockCache {
        x_in,
        x,
        q,
        k,
        v,
        attn,
        heads,
        xhat,
        inv_std,
        y,
    }
}

fn check_block_shapes(blk: &MhaBlockParams, d: usize, n_heads: usize) -> Result<()> {
    let square = |m: &Mat<f64>| m.nrows() == d && m.ncols() == d;
    let row = |m: &Mat<f64>| m.nrows() == 1 && m.ncols() == d;
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Shape(format!("model width {d} is not divisible by {n_heads} heads")));
    }
    if !(square(&blk.w_q) && square(&blk.w_k) && square(&blk.w_v) && square(&blk.w_o))
        || !(row(&blk.ln_gain) && row(&blk.ln_shift))
    {
        return Err(Error::Shape(format!("attention block tensors do not match width {d}")));
    }
    Ok(())
}

/// Self-attention block on one `N × D` sequence (already projected to the
/// model width): `layernorm(x + concat_h(softmax(Q_h K_hᵀ/√d_h) V_h) W_O)`.
pub fn mha_forward(blk: &MhaBlockParams, x: &Mat<f64>, n_heads: usize) -> Result<MhaOutput> {
    let d = blk.w_q.nrows();
    check_block_shapes(blk, d, n_heads)?;
    if x.ncols() != d || x.nrows() == 0 {
        return Err(Error::Shape(format!(
            "sequence is {}×{}, block expects N×{d} with N ≥ 1",
            x.nrows(),
            x.ncols()
        )));
    }
    let c = mha_core(blk, Mat::zeros(0, 0), x.clone(), x.nrows(), n_heads);
    if !all_finite(&c.y) {
        return Err(Error::NonFiniteNumeric("attention block output".into()));
    }
    Ok(MhaOutput {
        output: c.y,
        attention: c.attn,
    })
}

fn gate_core(gate: &GateModuleParams, fused: &Mat<f64>) -> (Mat<f64>, Mat<f64>, Mat<f64>) {
    let mut a1 = mm(fused.as_ref(), gate.w1.as_ref());
    add_bias(&mut a1, &gate.b1);
    let r1 = relu(&a1);
    let mut a2 = mm(r1.as_ref(), gate.w2.as_ref());
    add_bias(&mut a2, &gate.b2);
    let g = Mat::from_fn(a2.nrows(), a2.ncols(), |i, j| sigmoid(a2[(i, j)]));
    (a1, r1, g)
}

fn check_gate_shapes(gate: &GateModuleParams, f: usize) -> Result<()> {
    let g = gate.w1.ncols();
    if gate.w1.nrows() != f
        || gate.b1.shape() != (1, g)
        || gate.w2.shape() != (g, f)
        || gate.b2.shape() != (1, f)
        || g == 0
    {
        return Err(Error::Shape(format!("gate tensors do not match fused width {f}")));
    }
    Ok(())
}

/// `fused ⊙ sigmoid(relu(fused W1 + b1) W2 + b2)`.
pub fn gate_forward(gate: &GateModuleParams, fused: &[f64]) -> Result<GateOutput> {
    check_gate_shapes(gate, fused.len())?;
    let f = Mat::from_fn(1, fused.len(), |_, j| fused[j]);
    let (_, _, g) = gate_core(gate, &f);
    let gates: Vec<f64> = (0..fused.len()).map(|j| g[(0, j)]).collect();
    Ok(GateOutput {
        output: fused.iter().zip(&gates).map(|(x, g)| x * g).collect(),
        gates,
    })
}

fn check_inputs(cfg: &AttentionConfig, inputs: &[MatRef<'_, f64>]) -> Result<usize> {
    if inputs.len() != cfg.n_modalities() {
        return Err(Error::Shape(format!(
            "{} input modalities, model has {}",
            inputs.len(),
            cfg.n_modalities()
        )));
    }
    let rows = inputs[0].nrows();
    for (m, x) in inputs.iter().enumerate() {
        if x.nrows() != rows || x.ncols() != cfg.input_dims[m] || rows % cfg.window_len != 0 {
            return Err(Error::Shape(format!(
                "modality {m} input is {}×{}, expected (B·{})×{}",
                x.nrows(),
                x.ncols(),
                cfg.window_len,
                cfg.input_dims[m]
            )));
        }
    }
    Ok(rows / cfg.window_len)
}

fn forward_cached(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    inputs: &[MatRef<'_, f64>],
    mode: Mode<'_>,
) -> Result<Cache> {
    cfg.validate()?;
    p.check_shapes(cfg)?;
    let batch = check_inputs(cfg, inputs)?;
    let n = cfg.window_len;
    let d = cfg.d_model;
    let bvd = cfg.block_vector_dim();
    if let Mode::Train(masks) = mode {
        let (h1, h2) = cfg.head_hidden_dims;
        if masks.h1.shape() != (batch, h1) || masks.h2.shape() != (batch, h2) {
            return Err(Error::Shape("dropout masks do not match the batch".into()));
        }
    }

    let mut blocks = Vec::with_capacity(inputs.len());
    let mut fused = Mat::zeros(batch, cfg.fused_dim());
    for (m, (blk, x_in)) in p.blocks.iter().zip(inputs).enumerate() {
        let mut x = mm(*x_in, blk.w_in.as_ref());
        add_bias(&mut x, &blk.b_in);
        let c = mha_core(blk, x_in.to_owned(), x, n, cfg.n_heads);
        if !all_finite(&c.y) {
            return Err(Error::NonFiniteNumeric(format!("attention block {m} output")));
        }
        let off = m * bvd;
        for s in 0..batch {
            match cfg.vectorize {
                Vectorize::Flatten => {
                    for t in 0..n {
                        for j in 0..d {
                            fused[(s, off + t * d + j)] = c.y[(s * n + t, j)];
                        }
                    }
                }
                Vectorize::Mean => {
                    for j in 0..d {
                        let sum: f64 = (0..n).map(|t| c.y[(s * n + t, j)]).sum();
                        fused[(s, off + j)] = sum / n as f64;
                    }
                }
            }
        }
        blocks.push(c);
    }

    let (g_a1, g_r1, gate) = gate_core(&p.gate, &fused);
    let z = Mat::from_fn(batch, fused.ncols(), |i, j| fused[(i, j)] * gate[(i, j)]);

    let hd = &p.head;
    let mut h_a1 = mm(z.as_ref(), hd.w1.as_ref());
    add_bias(&mut h_a1, &hd.b1);
    let mut h1 = relu(&h_a1);
    if let Mode::Train(masks) = mode {
        h1 = Mat::from_fn(batch, h1.ncols(), |i, j| h1[(i, j)] * masks.h1[(i, j)]);
    }
    let mut h_a2 = mm(h1.as_ref(), hd.w2.as_ref());
    add_bias(&mut h_a2, &hd.b2);
    let mut h2 = relu(&h_a2);
    if let Mode::Train(masks) = mode {
        h2 = Mat::from_fn(batch, h2.ncols(), |i, j| h2[(i, j)] * masks.h2[(i, j)]);
    }
    let mut out = mm(h2.as_ref(), hd.w3.as_ref());
    add_bias(&mut out, &hd.b3);
    if !all_finite(&out) {
        return Err(Error::NonFiniteNumeric("attention model output".into()));
    }

    Ok(Cache {
        blocks,
        fused,
        g_a1,
        g_r1,
        gate,
        h_a1,
        h1,
        h_a2,
        h2,
        out,
    })
}

/// Predictions for a batch: each input is `B·N × d_m`, output `B × P`.
pub fn forward_batch(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    inputs: &[Mat<f64>],
    mode: Mode<'_>,
) -> Result<Mat<f64>> {
    let refs: Vec<MatRef<'_, f64>> = inputs.iter().map(|m| m.as_ref()).collect();
    Ok(forward_cached(p, cfg, &refs, mode)?.out)
}

/// Prediction for a single sample from its per-modality `N × d_m` windows.
pub fn forward(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    windows: &[&Mat<f64>],
    mode: Mode<'_>,
) -> Result<Vec<f64>> {
    let refs: Vec<MatRef<'_, f64>> = windows.iter().map(|m| m.as_ref()).collect();
    if refs.iter().any(|w| w.nrows() != cfg.window_len) {
        return Err(Error::Shape(format!("windows must have {} rows", cfg.window_len)));
    }
    let out = forward_cached(p, cfg, &refs, mode)?.out;
    Ok((0..out.ncols()).map(|j| out[(0, j)]).collect())
}

pub(crate) fn predict_all(p: &AttentionParams, cfg: &AttentionConfig, w: &WindowSet) -> Result<Mat<f64>> {
    let n = w.window_len();
    if n != cfg.window_len {
        return Err(Error::Shape(format!(
            "windows have {n} slots, model expects {}",
            cfg.window_len
        )));
    }
    let total = w.len();
    let mut out = Mat::zeros(total, cfg.n_parcels);
    let mut start = 0;
    while start < total {
        let len = PREDICT_CHUNK.min(total - start);
        let refs: Vec<MatRef<'_, f64>> = w
            .inputs()
            .iter()
            .map(|m| m.as_ref().subrows(start * n, len * n))
            .collect();
        let c = forward_cached(p, cfg, &refs, Mode::Eval)?;
        out.as_mut().subrows_mut(start, len).copy_from(c.out.as_ref());
        start += len;
    }
    Ok(out)
}

fn mse(out: &Mat<f64>, targets: &Mat<f64>) -> Result<f64> {
    if out.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "targets are {}×{}, predictions {}×{}",
            targets.nrows(),
            targets.ncols(),
            out.nrows(),
            out.ncols()
        )));
    }
    Ok((out - targets).squared_norm_l2() / (out.nrows() * out.ncols()) as f64)
}

/// Mean over batch and parcels of the squared prediction error.
pub fn loss(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    inputs: &[Mat<f64>],
    targets: &Mat<f64>,
    mode: Mode<'_>,
) -> Result<f64> {
    mse(&forward_batch(p, cfg, inputs, mode)?, targets)
}

pub(crate) fn loss_on_set(p: &AttentionParams, cfg: &AttentionConfig, w: &WindowSet) -> Result<f64> {
    let targets = w
        .targets()
        .ok_or_else(|| Error::Dataset("window set has no targets".into()))?;
    mse(&predict_all(p, cfg, w)?, targets)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradient(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    inputs: &[Mat<f64>],
    targets: &Mat<f64>,
    mode: Mode<'_>,
) -> Result<(f64, AttentionParams)> {
    let refs: Vec<MatRef<'_, f64>> = inputs.iter().map(|m| m.as_ref()).collect();
    let c = forward_cached(p, cfg, &refs, mode)?;
    let loss = mse(&c.out, targets)?;
    let batch = c.out.nrows();
    let n = cfg.window_len;
    let d = cfg.d_model;
    let mut g = AttentionParams::zeros(cfg);

    let scale = 2.0 / (batch * cfg.n_parcels) as f64;
    let d_out = Mat::from_fn(batch, cfg.n_parcels, |i, j| scale * (c.out[(i, j)] - targets[(i, j)]));

    // Prediction head.
    let hd = &p.head;
    g.head.w3 = mm(c.h2.transpose(), d_out.as_ref());
    g.head.b3 = col_sums(&d_out);
    let d_h2 = mm(d_out.as_ref(), hd.w3.transpose());
    let mask = |i: usize, j: usize, m: Option<&Mat<f64>>| m.map_or(1.0, |m| m[(i, j)]);
    let (m1, m2) = match mode {
        Mode::Train(ms) => (Some(&ms.h1), Some(&ms.h2)),
        Mode::Eval => (None, None),
    };
    let d_a2 = Mat::from_fn(batch, d_h2.ncols(), |i, j| {
        if c.h_a2[(i, j)] > 0.0 {
            d_h2[(i, j)] * mask(i, j, m2)
        } else {
            0.0
        }
    });
    g.head.w2 = mm(c.h1.transpose(), d_a2.as_ref());
    g.head.b2 = col_sums(&d_a2);
    let d_h1 = mm(d_a2.as_ref(), hd.w2.transpose());
    let d_a1 = Mat::from_fn(batch, d_h1.ncols(), |i, j| {
        if c.h_a1[(i, j)] > 0.0 {
            d_h1[(i, j)] * mask(i, j, m1)
        } else {
            0.0
        }
    });
    let z = Mat::from_fn(batch, c.fused.ncols(), |i, j| c.fused[(i, j)] * c.gate[(i, j)]);
    g.head.w1 = mm(z.transpose(), d_a1.as_ref());
    g.head.b1 = col_sums(&d_a1);
    let d_z = mm(d_a1.as_ref(), hd.w1.transpose());

    // Gate.
    let f = c.fused.ncols();
    let d_ga2 = Mat::from_fn(batch, f, |i, j| {
        let s = c.gate[(i, j)];
        d_z[(i, j)] * c.fused[(i, j)] * s * (1.0 - s)
    });
    g.gate.w2 = mm(c.g_r1.transpose(), d_ga2.as_ref());
    g.gate.b2 = col_sums(&d_ga2);
    let d_gr1 = mm(d_ga2.as_ref(), p.gate.w2.transpose());
    let d_ga1 = Mat::from_fn(batch, d_gr1.ncols(), |i, j| {
        if c.g_a1[(i, j)] > 0.0 {
            d_gr1[(i, j)]
        } else {
            0.0
        }
    });
    g.gate.w1 = mm(c.fused.transpose(), d_ga1.as_ref());
    g.gate.b1 = col_sums(&d_ga1);
    let mut d_fused = mm(d_ga1.as_ref(), p.gate.w1.transpose());
    for i in 0..batch {
        for j in 0..f {
            d_fused[(i, j)] += d_z[(i, j)] * c.gate[(i, j)];
        }
    }

    // Attention blocks.
    let bvd = cfg.block_vector_dim();
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    for (m, (bc, (blk, gb))) in c.blocks.iter().zip(p.blocks.iter().zip(g.blocks.iter_mut())).enumerate() {
        let off = m * bvd;
        let rows = batch * n;
        let d_y = Mat::from_fn(rows, d, |r, j| {
            let (s, t) = (r / n, r % n);
            match cfg.vectorize {
                Vectorize::Flatten => d_fused[(s, off + t * d + j)],
                Vectorize::Mean => d_fused[(s, off + j)] / n as f64,
            }
        });

        // Layer norm.
        let mut d_r = Mat::zeros(rows, d);
        let mut d_gain = Mat::zeros(1, d);
        let mut d_shift = Mat::zeros(1, d);
        for i in 0..rows {
            let mut mean_dx = 0.0;
            let mut mean_dx_xh = 0.0;
            for j in 0..d {
                let dy = d_y[(i, j)];
                let xh = bc.xhat[(i, j)];
                d_gain[(0, j)] += dy * xh;
                d_shift[(0, j)] += dy;
                let dx = dy * blk.ln_gain[(0, j)];
                mean_dx += dx;
                mean_dx_xh += dx * xh;
            }
            mean_dx /= d as f64;
            mean_dx_xh /= d as f64;
            for j in 0..d {
                let dx = d_y[(i, j)] * blk.ln_gain[(0, j)];
                d_r[(i, j)] = bc.inv_std[i] * (dx - mean_dx - bc.xhat[(i, j)] * mean_dx_xh);
            }
        }
        gb.ln_gain = d_gain;
        gb.ln_shift = d_shift;

        // Output projection; the residual passes d_r straight to x.
        gb.w_o = mm(bc.heads.transpose(), d_r.as_ref());
        let d_heads = mm(d_r.as_ref(), blk.w_o.transpose());

        let mut d_q = Mat::zeros(rows, d);
        let mut d_k = Mat::zeros(rows, d);
        let mut d_v = Mat::zeros(rows, d);
        let mut d_a = Mat::zeros(n, n);
        for s in 0..batch {
            let so = s * n;
            for h in 0..heads {
                let c0 = h * dh;
                let a = &bc.attn[s * heads + h];
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for cc in c0..c0 + dh {
                            acc += d_heads[(so + i, cc)] * bc.v[(so + j, cc)];
                        }
                        d_a[(i, j)] = acc;
                    }
                }
                for j in 0..n {
                    for cc in c0..c0 + dh {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += a[(i, j)] * d_heads[(so + i, cc)];
                        }
                        d_v[(so + j, cc)] = acc;
                    }
                }
                // Softmax backward, in place: d_a becomes d(scores)·scale.
                for i in 0..n {
                    let dot: f64 = (0..n).map(|j| d_a[(i, j)] * a[(i, j)]).sum();
                    for j in 0..n {
                        d_a[(i, j)] = a[(i, j)] * (d_a[(i, j)] - dot) * att_scale;
                    }
                }
                for i in 0..n {
                    for cc in c0..c0 + dh {
                        let mut acc_q = 0.0;
                        let mut acc_k = 0.0;
                        for j in 0..n {
                            acc_q += d_a[(i, j)] * bc.k[(so + j, cc)];
                            acc_k += d_a[(j, i)] * bc.q[(so + j, cc)];
                        }
                        d_q[(so + i, cc)] = acc_q;
                        d_k[(so + i, cc)] = acc_k;
                    }
                }
            }
        }
        gb.w_q = mm(bc.x.transpose(), d_q.as_ref());
        gb.w_k = mm(bc.x.transpose(), d_k.as_ref());
        gb.w_v = mm(bc.x.transpose(), d_v.as_ref());
        let mut d_x = d_r;
        for (dm, w) in [(&d_q, &blk.w_q), (&d_k, &blk.w_k), (&d_v, &blk.w_v)] {
            matmul(d_x.as_mut(), Accum::Add, dm.as_ref(), w.transpose(), 1.0, Par::Seq);
        }
        gb.w_in = mm(bc.x_in.transpose(), d_x.as_ref());
        gb.b_in = col_sums(&d_x);
    }

    for (name, t) in g.tensors() {
        if !all_finite(t) {
            return Err(Error::NonFiniteNumeric(format!("gradient of {name}")));
        }
    }
    Ok((loss, g))
}
