//! Hand-written reference computations shared by the integration tests.
//! Nothing here calls into the library's numerical code; matrices are
//! plain `Vec<Vec<f64>>` rows.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

#![allow(dead_code)]

use faer::Mat;

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &Mat<f64>) -> Rows {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn to_mat(r: &Rows) -> Mat<f64> {
    let cols = r.first().map_or(0, |x| x.len());
    Mat::from_fn(r.len(), cols, |i, j| r[i][j])
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for t in 0..k {
            let x = a[i][t];
            for j in 0..m {
                out[i][j] += x * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Rows) -> Rows {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Textbook sums-of-products Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Lagged design by direct indexing: for target `i`, each modality block
/// lists rows `i-1, i-2, ..., i-n_lags`.
pub fn lagged_design(blocks: &[Rows], n_lags: usize) -> (Rows, Vec<usize>) {
    let t = blocks[0].len();
    let mut rows = Vec::new();
    let mut idx = Vec::new();
    for i in n_lags..t {
        let mut r = Vec::new();
        for b in blocks {
            for k in 1..=n_lags {
                r.extend_from_slice(&b[i - k]);
            }
        }
        rows.push(r);
        idx.push(i);
    }
    (rows, idx)
}

/// Gaussian elimination with partial pivoting on `A X = B`.
pub fn gauss_solve(a: &Rows, b: &Rows) -> Rows {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Rows = a.iter().zip(b).map(|(ar, br)| ar.iter().chain(br).copied().collect()).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        assert!(p.abs() > 1e-300, "singular system");
        for i in col + 1..n {
            let f = aug[i][col] / p;
            if f != 0.0 {
                for j in col..n + m {
                    aug[i][j] -= f * aug[col][j];
                }
            }
        }
    }
    let mut x = vec![vec![0.0; m]; n];
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[i][n + c];
            for j in i + 1..n {
                s -= aug[i][j] * x[j][c];
            }
            x[i][c] = s / aug[i][i];
        }
    }
    x
}

/// One target's ridge fit from the normal equations of the design
/// augmented with an all-ones column; the bias is not penalized.
/// Returns `(w, b)`.
pub fn ridge_single(x: &Rows, y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let aug: Rows = x.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    let mut g = vec![vec![0.0; d + 1]; d + 1];
    let mut rhs = vec![vec![0.0]; d + 1];
    for (r, &yi) in aug.iter().zip(y) {
        for a in 0..=d {
            rhs[a][0] += r[a] * yi;
            for b in 0..=d {
                g[a][b] += r[a] * r[b];
            }
        }
    }
    for (a, row) in g.iter_mut().enumerate().take(d) {
        row[a] += lambda;
    }
    let sol = gauss_solve(&g, &rhs);
    let w = sol[..d].iter().map(|v| v[0]).collect();
    (w, sol[d][0])
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues sorted descending and matching unit eigenvectors as rows.
pub fn jacobi_eigen(a: &Rows) -> (Vec<f64>, Rows) {
    let n = a.len();
    let mut m = a.clone();
    let mut v: Rows = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let vals = order.iter().map(|&i| m[i][i]).collect();
    let vecs = order.iter().map(|&i| v.iter().map(|r| r[i]).collect()).collect();
    (vals, vecs)
}

/// Sample covariance with the `n - 1` denominator.
pub fn covariance(x: &Rows) -> (Vec<f64>, Rows) {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for a in 0..d {
            for b in 0..d {
                c[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    for row in c.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, c)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row(m: &Mat<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(0, j)]).collect()
}

fn cols(m: &Mat<f64>, c0: usize, c1: usize) -> Rows {
    (0..m.nrows()).map(|i| (c0..c1).map(|j| m[(i, j)]).collect()).collect()
}

pub struct MhaRef {
    pub output: Rows,
    pub attention: Vec<Rows>,
}

/// Attention block built head by head: slice each head's projection
/// columns out of the weights, form the full score matrix, softmax it,
/// then concatenate, project, add the input and layer-normalize.
pub fn mha(
    x: &Rows,
    w_q: &Mat<f64>,
    w_k: &Mat<f64>,
    w_v: &Mat<f64>,
    w_o: &Mat<f64>,
    gain: &Mat<f64>,
    shift: &Mat<f64>,
    n_heads: usize,
    eps: f64,
) -> MhaRef {
    let n = x.len();
    let d = x[0].len();
    let dh = d / n_heads;
    let mut concat = vec![Vec::with_capacity(d); n];
    let mut attention = Vec::new();
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let q = matmul(x, &cols(w_q, c0, c1));
        let k = matmul(x, &cols(w_k, c0, c1));
        let v = matmul(x, &cols(w_v, c0, c1));
        let kt = transpose(&k);
        let scores = matmul(&q, &kt);
        let a: Rows = scores
            .iter()
            .map(|r| {
                let e: Vec<f64> = r.iter().map(|s| (s / (dh as f64).sqrt()).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            })
            .collect();
        let head = matmul(&a, &v);
        for (i, r) in head.into_iter().enumerate() {
            concat[i].extend(r);
        }
        attention.push(a);
    }
    let o = matmul(&concat, &to_rows(w_o));
    let (g, s) = (row(gain), row(shift));
    let output = (0..n)
        .map(|i| {
            let r: Vec<f64> = (0..d).map(|j| x[i][j] + o[i][j]).collect();
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            (0..d).map(|j| g[j] * (r[j] - mu) / (var + eps).sqrt() + s[j]).collect()
        })
        .collect();
    MhaRef { output, attention }
}

/// Gate evaluated one scalar at a time.
pub fn gate(fused: &[f64], w1: &Mat<f64>, b1: &Mat<f64>, w2: &Mat<f64>, b2: &Mat<f64>) -> (Vec<f64>, Vec<f64>) {
    let f = fused.len();
    let g = w1.ncols();
    let mut hidden = vec![0.0; g];
    for (k, h) in hidden.iter_mut().enumerate() {
        let mut s = b1[(0, k)];
        for (j, x) in fused.iter().enumerate() {
            s += x * w1[(j, k)];
        }
        *h = s.max(0.0);
    }
    let mut gates = vec![0.0; f];
    for (j, gj) in gates.iter_mut().enumerate() {
        let mut s = b2[(0, j)];
        for (k, h) in hidden.iter().enumerate() {
            s += h * w2[(k, j)];
        }
        *gj = sigmoid(s);
    }
    let out = fused.iter().zip(&gates).map(|(x, g)| x * g).collect();
    (out, gates)
}

fn dense(x: &[f64], w: &Mat<f64>, b: &Mat<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|k| b[(0, k)] + x.iter().enumerate().map(|(j, v)| v * w[(j, k)]).sum::<f64>())
        .collect()
}

/// Tensor views the forward oracle needs for one attention block.
pub struct BlockRef<'a> {
    pub w_in: &'a Mat<f64>,
    pub b_in: &'a Mat<f64>,
    pub w_q: &'a Mat<f64>,
    pub w_k: &'a Mat<f64>,
    pub w_v: &'a Mat<f64>,
    pub w_o: &'a Mat<f64>,
    pub ln_gain: &'a Mat<f64>,
    pub ln_shift: &'a Mat<f64>,
}

pub struct NetRef<'a> {
    pub blocks: Vec<BlockRef<'a>>,
    pub gate: [&'a Mat<f64>; 4],
    pub head: [&'a Mat<f64>; 6],
    pub n_heads: usize,
    pub flatten: bool,
    pub eps: f64,
}

/// Whole-network forward for one sample, stage by stage. `masks` holds
/// the two inverted-dropout multiplier rows for the head, if any.
pub fn forward(net: &NetRef<'_>, windows: &[Rows], masks: Option<(&[f64], &[f64])>) -> Vec<f64> {
    let mut fused = Vec::new();
    for (blk, w) in net.blocks.iter().zip(windows) {
        let x: Rows = w.iter().map(|r| dense(r, blk.w_in, blk.b_in)).collect();
        let y = mha(&x, blk.w_q, blk.w_k, blk.w_v, blk.w_o, blk.ln_gain, blk.ln_shift, net.n_heads, net.eps).output;
        if net.flatten {
            fused.extend(y.into_iter().flatten());
        } else {
            let d = y[0].len();
            fused.extend((0..d).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / y.len() as f64));
        }
    }
    let [w1, b1, w2, b2] = net.gate;
    let (z, _) = gate(&fused, w1, b1, w2, b2);
    let [hw1, hb1, hw2, hb2, hw3, hb3] = net.head;
    let mut h1: Vec<f64> = dense(&z, hw1, hb1).into_iter().map(|v| v.max(0.0)).collect();
    if let Some((m1, _)) = masks {
        h1.iter_mut().zip(m1).for_each(|(h, m)| *h *= m);
    }
    let mut h2: Vec<f64> = dense(&h1, hw2, hb2).into_iter().map(|v| v.max(0.0)).collect();
    if let Some((_, m2)) = masks {
        h2.iter_mut().zip(m2).for_each(|(h, m)| *h *= m);
    }
    dense(&h2, hw3, hb3)
}

/// Mean squared error over samples and outputs.
pub fn mse(pred: &Rows, target: &Rows) -> f64 {
    let n = (pred.len() * pred[0].len()) as f64;
    pred.iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        / n
}
