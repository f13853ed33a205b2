//! Naive loop references for the attention family, written directly from the
//! formulas with nested `Vec` matrices and no shared code with the library.

#![allow(dead_code)]

use excitor_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Rotary rotation, pairing `d` with `d + hd/2` inside each head; row `i`
/// sits at position `i`.
pub fn rope(x: &Mat, heads: usize, base: f64) -> Mat {
    let c = x[0].len();
    let hd = c / heads;
    let half = hd / 2;
    let mut out = x.clone();
    for (pos, row) in x.iter().enumerate() {
        for h in 0..heads {
            for d in 0..half {
                let theta = pos as f64 * base.powf(-((2 * d) as f64) / hd as f64);
                let a = row[h * hd + d];
                let b = row[h * hd + d + half];
                out[pos][h * hd + d] = a * theta.cos() - b * theta.sin();
                out[pos][h * hd + d + half] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    out
}

pub fn head(x: &[f64], h: usize, hd: usize) -> &[f64] {
    &x[h * hd..(h + 1) * hd]
}

pub struct AttnRef {
    pub query: Mat,
    pub keys: Mat,
    pub values: Mat,
    /// `probs[h][i][j]`
    pub probs: Vec<Mat>,
    pub mixed: Mat,
    pub out: Mat,
}

/// Causal multi-head attention over one sequence `t`, with optional extra
/// scores `extra[h][i][j]` added before the mask.
pub fn attention(
    t: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    wo: &Mat,
    heads: usize,
    base: f64,
    extra: Option<&dyn Fn(&Mat) -> Vec<Mat>>,
) -> AttnRef {
    let m = t.len();
    let c = t[0].len();
    let hd = c / heads;
    let query = rope(&matmul(t, wq), heads, base);
    let keys = rope(&matmul(t, wk), heads, base);
    let values = matmul(t, wv);
    let ex = extra.map(|f| f(&query));
    let mut probs = Vec::new();
    let mut mixed = vec![vec![0.0; c]; m];
    for h in 0..heads {
        let mut ph = Vec::new();
        for i in 0..m {
            let mut s = vec![f64::NEG_INFINITY; m];
            for (j, sj) in s.iter_mut().enumerate().take(i + 1) {
                let mut v = dot(head(&query[i], h, hd), head(&keys[j], h, hd)) / (hd as f64).sqrt();
                if let Some(ex) = &ex {
                    v += ex[h][i][j];
                }
                *sj = v;
            }
            let p = softmax(&s);
            for j in 0..m {
                for d in 0..hd {
                    mixed[i][h * hd + d] += p[j] * values[j][h * hd + d];
                }
            }
            ph.push(p);
        }
        probs.push(ph);
    }
    let out = matmul(&mixed, wo);
    AttnRef {
        query,
        keys,
        values,
        probs,
        mixed,
        out,
    }
}

/// Inner attention from `q_ex` rows onto `key`/`value` rows, unmasked,
/// scaled by `1/√C`.
pub fn key_reconstruct(q_ex: &Mat, key: &Mat, value: &Mat) -> Mat {
    let c = q_ex[0].len();
    q_ex.iter()
        .map(|q| {
            let s: Vec<f64> = key.iter().map(|k| dot(q, k) / (c as f64).sqrt()).collect();
            let a = softmax(&s);
            (0..c)
                .map(|d| a.iter().zip(value).map(|(w, v)| w * v[d]).sum())
                .collect()
        })
        .collect()
}

/// `extra[h][i][j] = Q_h[i] · Kx_h[j] / √hd`
pub fn extra_scores(query: &Mat, key_extra: &Mat, heads: usize) -> Vec<Mat> {
    let c = query[0].len();
    let hd = c / heads;
    (0..heads)
        .map(|h| {
            query
                .iter()
                .map(|q| {
                    key_extra
                        .iter()
                        .map(|k| dot(head(q, h, hd), head(k, h, hd)) / (hd as f64).sqrt())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `[P; (I·kd)·ku]` and `[P; (I·vd)·vu]`
pub fn build_kv(p: &Mat, feats: &Mat, kd: &Mat, ku: &Mat, vd: &Mat, vu: &Mat) -> (Mat, Mat) {
    let mut key = p.clone();
    let mut value = p.clone();
    if !feats.is_empty() {
        key.extend(matmul(&matmul(feats, kd), ku));
        value.extend(matmul(&matmul(feats, vd), vu));
    }
    (key, value)
}

pub struct ExcitorRef<'a> {
    pub wq_down: &'a Mat,
    pub wq_up: &'a Mat,
    pub gate: &'a [f64],
    pub key: &'a Mat,
    pub value: &'a Mat,
}

/// Fused Excitor attention over one sequence.
pub fn fused(
    t: &Mat,
    w: [&Mat; 4],
    heads: usize,
    base: f64,
    ex: &ExcitorRef,
) -> AttnRef {
    let q_ex = matmul(&matmul(t, ex.wq_down), ex.wq_up);
    let kx = key_reconstruct(&q_ex, ex.key, ex.value);
    let f = |query: &Mat| {
        let s = extra_scores(query, &kx, heads);
        s.into_iter()
            .enumerate()
            .map(|(h, sh)| {
                let g = if ex.gate.len() == 1 { ex.gate[0] } else { ex.gate[h] };
                scale(&sh, g)
            })
            .collect()
    };
    attention(t, w[0], w[1], w[2], w[3], heads, base, Some(&f))
}

/// Prefix adapter: base attention plus `tanh(g_h) · softmax(Q_h · Kp_hᵀ/√hd) · Vp_h`
/// added to the mixed heads, with unrotated `Kp = P·Wk`, `Vp = P·Wv`.
pub fn prefix(t: &Mat, w: [&Mat; 4], heads: usize, base: f64, prefix: &Mat, gate: &[f64]) -> Mat {
    let b = attention(t, w[0], w[1], w[2], w[3], heads, base, None);
    let c = t[0].len();
    let hd = c / heads;
    let kp = matmul(prefix, w[1]);
    let vp = matmul(prefix, w[2]);
    let mut mixed = b.mixed.clone();
    for h in 0..heads {
        for (i, q) in b.query.iter().enumerate() {
            let s: Vec<f64> = kp
                .iter()
                .map(|k| dot(head(q, h, hd), head(k, h, hd)) / (hd as f64).sqrt())
                .collect();
            let a = softmax(&s);
            for d in 0..hd {
                let v: f64 = a.iter().zip(&vp).map(|(p, v)| p * v[h * hd + d]).sum();
                mixed[i][h * hd + d] += gate[h].tanh() * v;
            }
        }
    }
    matmul(&mixed, w[3])
}

pub fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
