//! Brute-force reference implementations: nested loops over every index,
//! sharing nothing with the einsum engine beyond `Tensor::get`.

#![allow(clippy::needless_range_loop)]

use thattn_core::attention::{AttentionParams, GbmaParams, Generator, HybridKind};
use thattn_core::Tensor;

/// Sum over every joint assignment of the labels, `out` labels held fixed.
/// Returns the output values in row-major order of `out`.
pub fn einsum(operands: &[(&Tensor, &[&str])], out: &[&str]) -> Vec<f64> {
    let mut labels: Vec<&str> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (t, ls) in operands {
        for (l, s) in ls.iter().zip(t.sizes()) {
            match labels.iter().position(|x| x == l) {
                Some(i) => assert_eq!(sizes[i], s, "label {l} bound twice"),
                None => {
                    labels.push(l);
                    sizes.push(s);
                }
            }
        }
    }
    let pos = |l: &str| {
        labels
            .iter()
            .position(|x| *x == l)
            .expect("output label bound")
    };
    let out_pos: Vec<usize> = out.iter().map(|l| pos(l)).collect();
    let out_len: usize = out_pos.iter().map(|&i| sizes[i]).product();
    let mut result = vec![0.0; out_len];
    let total: usize = sizes.iter().product();
    let mut idx = vec![0usize; labels.len()];
    for _ in 0..total {
        let mut prod = 1.0;
        for (t, ls) in operands {
            let at: Vec<usize> = ls.iter().map(|l| idx[pos(l)]).collect();
            prod *= t.get(&at);
        }
        let o = out_pos.iter().fold(0, |acc, &i| acc * sizes[i] + idx[i]);
        result[o] += prod;
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < sizes[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    result
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `softmax(X M^T) M` row by row.
pub fn dot_product(x: &Tensor, m: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (x.sizes()[0], x.sizes()[1]);
    let mm = m.sizes()[0];
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..mm)
                .map(|j| (0..d).map(|k| x.get(&[i, k]) * m.get(&[j, k])).sum())
                .collect();
            let w = softmax(&logits);
            (0..d)
                .map(|k| (0..mm).map(|j| w[j] * m.get(&[j, k])).sum())
                .collect()
        })
        .collect()
}

/// Output `Y[n][d_Y]` and weights `W[n][m][h]` of any variant.
pub struct Reference {
    pub y: Vec<Vec<f64>>,
    pub w: Vec<Vec<Vec<f64>>>,
}

pub fn attention(x: &Tensor, m: &Tensor, params: &AttentionParams) -> Reference {
    match params {
        AttentionParams::MultiHead(p) => talking_heads(
            x,
            m,
            [&p.p_q, &p.p_k, &p.p_v, &p.p_o],
            None,
            None,
            [None; 4],
        ),
        AttentionParams::TalkingHeads(p) => talking_heads(
            x,
            m,
            [&p.p_q, &p.p_k, &p.p_v, &p.p_o],
            Some(&p.p_l),
            Some(&p.p_w),
            [None; 4],
        ),
        AttentionParams::Hybrid(p) => {
            let four = [&p.p_q, &p.p_k, &p.p_v, &p.p_o];
            match p.kind {
                HybridKind::LogitsOnly => {
                    talking_heads(x, m, four, Some(&p.projection), None, [None; 4])
                }
                HybridKind::WeightsOnly => {
                    talking_heads(x, m, four, None, Some(&p.projection), [None; 4])
                }
            }
        }
        AttentionParams::Dynamic(p) => {
            let b = &p.base;
            talking_heads(
                x,
                m,
                [&b.p_q, &b.p_k, &b.p_v, &b.p_o],
                Some(&b.p_l),
                Some(&b.p_w),
                Generator::ALL.map(|g| p.generator(g)),
            )
        }
        AttentionParams::Gbma(p) => gbma(x, m, p),
    }
}

/// Talking-heads with optional head projections (identity when absent) and
/// optional generators `[Xl, Ml, Xw, Mw]`.
fn talking_heads(
    x: &Tensor,
    m: &Tensor,
    [pq, pk, pv, po]: [&Tensor; 4],
    pl: Option<&Tensor>,
    pw: Option<&Tensor>,
    [gxl, gml, gxw, gmw]: [Option<&Tensor>; 4],
) -> Reference {
    let n = x.sizes()[0];
    let mm = m.sizes()[0];
    let (dx, dk, hk) = (pq.sizes()[0], pq.sizes()[1], pq.sizes()[2]);
    let dm = pk.sizes()[0];
    let (dv, hv) = (pv.sizes()[1], pv.sizes()[2]);
    let dy = po.sizes()[0];
    let h = pl.map_or(pw.map_or(hk, |t| t.sizes()[0]), |t| t.sizes()[1]);
    let eye = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };

    let q = |i: usize, a: usize, e: usize| {
        (0..dx)
            .map(|c| x.get(&[i, c]) * pq.get(&[c, a, e]))
            .sum::<f64>()
    };
    let k = |j: usize, a: usize, e: usize| {
        (0..dm)
            .map(|c| m.get(&[j, c]) * pk.get(&[c, a, e]))
            .sum::<f64>()
    };
    let v = |j: usize, a: usize, e: usize| {
        (0..dm)
            .map(|c| m.get(&[j, c]) * pv.get(&[c, a, e]))
            .sum::<f64>()
    };
    let dot = |i: usize, j: usize, e: usize| (0..dk).map(|a| q(i, a, e) * k(j, a, e)).sum::<f64>();
    let gen_x = |g: Option<&Tensor>, i: usize, a: usize, b: usize| {
        g.map_or(0.0, |g| {
            (0..dx).map(|c| x.get(&[i, c]) * g.get(&[c, a, b])).sum()
        })
    };
    let gen_m = |g: Option<&Tensor>, j: usize, a: usize, b: usize| {
        g.map_or(0.0, |g| {
            (0..dm).map(|c| m.get(&[j, c]) * g.get(&[c, a, b])).sum()
        })
    };

    let mut y = vec![vec![0.0; dy]; n];
    let mut weights = vec![vec![vec![0.0; h]; mm]; n];
    for i in 0..n {
        let w = &mut weights[i];
        for s in 0..h {
            let logits: Vec<f64> = (0..mm)
                .map(|j| {
                    (0..hk)
                        .map(|e| {
                            let stat = pl.map_or(eye(e, s), |pl| pl.get(&[e, s]));
                            dot(i, j, e) * (stat + gen_x(gxl, i, e, s) + gen_m(gml, j, e, s))
                        })
                        .sum()
                })
                .collect();
            for (j, wv) in softmax(&logits).into_iter().enumerate() {
                w[j][s] = wv;
            }
        }
        for t in 0..hv {
            for a in 0..dv {
                let mut o = 0.0;
                for (j, wj) in w.iter().enumerate() {
                    let u: f64 = (0..h)
                        .map(|s| {
                            let stat = pw.map_or(eye(s, t), |pw| pw.get(&[s, t]));
                            wj[s] * (stat + gen_x(gxw, i, s, t) + gen_m(gmw, j, s, t))
                        })
                        .sum();
                    o += u * v(j, a, t);
                }
                for out in 0..dy {
                    y[i][out] += o * po.get(&[out, a, t]);
                }
            }
        }
    }
    Reference { y, w: weights }
}

fn gbma(x: &Tensor, m: &Tensor, p: &GbmaParams) -> Reference {
    let n = x.sizes()[0];
    let mm = m.sizes()[0];
    let (dx, dm, h) = (p.p.sizes()[0], p.p.sizes()[1], p.p.sizes()[2]);
    let dy = p.q.sizes()[1];
    let mut y = vec![vec![0.0; dy]; n];
    let mut weights = vec![vec![vec![0.0; h]; mm]; n];
    for i in 0..n {
        for s in 0..h {
            let logits: Vec<f64> = (0..mm)
                .map(|j| {
                    let mut acc = 0.0;
                    for a in 0..dx {
                        for b in 0..dm {
                            acc += x.get(&[i, a]) * m.get(&[j, b]) * p.p.get(&[a, b, s]);
                        }
                    }
                    acc
                })
                .collect();
            for (j, wj) in softmax(&logits).into_iter().enumerate() {
                weights[i][j][s] = wj;
                for b in 0..dm {
                    for out in 0..dy {
                        y[i][out] += wj * m.get(&[j, b]) * p.q.get(&[b, out, s]);
                    }
                }
            }
        }
    }
    Reference { y, w: weights }
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let [r, c] = t.sizes()[..] else {
        panic!("expected a matrix, got {} axes", t.rank())
    };
    (0..r)
        .map(|i| (0..c).map(|j| t.get(&[i, j])).collect())
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

/// Real roots' and complex pairs' magnitudes of `det(A - λI)` for a 3×3
/// `A`, by Cardano on the characteristic cubic.
pub fn eigen_magnitudes_3x3(a: &[Vec<f64>]) -> Vec<f64> {
    let tr = a[0][0] + a[1][1] + a[2][2];
    let minors = a[0][0] * a[1][1] - a[0][1] * a[1][0] + a[0][0] * a[2][2] - a[0][2] * a[2][0]
        + a[1][1] * a[2][2]
        - a[1][2] * a[2][1];
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    // λ³ + b λ² + c λ + d with b = -tr, c = minors, d = -det.
    let (b, c, d) = (-tr, minors, -det);
    let shift = -b / 3.0;
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let mut mags = if disc > 0.0 {
        let s = disc.sqrt();
        let u = (-q / 2.0 + s).cbrt();
        let v = (-q / 2.0 - s).cbrt();
        let real = u + v + shift;
        let re = -(u + v) / 2.0 + shift;
        let im = (u - v) * 3f64.sqrt() / 2.0;
        let pair = re.hypot(im);
        vec![real.abs(), pair, pair]
    } else {
        let r = (-p / 3.0).sqrt();
        let phi = if r == 0.0 {
            0.0
        } else {
            (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0).acos()
        };
        (0..3)
            .map(|k| {
                (2.0 * r * ((phi + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift)
                    .abs()
            })
            .collect()
    };
    mags.sort_by(f64::total_cmp);
    mags
}
