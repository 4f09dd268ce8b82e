#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use proptest::prelude::*;

use super::*;
use crate::autograd::{check_gradients, Tape, FD_STEP};
use crate::rng::{normal_init, Rng};
use crate::tensor::{axes, scale, Axis};

fn rand(spec: &[(&str, usize)], rng: &mut Rng) -> Tensor {
    normal_init(axes(spec), 1.0, rng).unwrap()
}

fn softmax_vec(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn as_matrix(y: &Tensor) -> Vec<Vec<f64>> {
    let [r, c] = y.sizes()[..] else {
        panic!("matrix")
    };
    (0..r)
        .map(|i| (0..c).map(|j| y.get(&[i, j])).collect())
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

// ---- loop oracles -------------------------------------------------------

fn oracle_dot_product(x: &Tensor, m: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (x.sizes()[0], x.sizes()[1]);
    let mm = m.sizes()[0];
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..mm)
                .map(|j| (0..d).map(|k| x.get(&[i, k]) * m.get(&[j, k])).sum())
                .collect();
            let w = softmax_vec(&logits);
            (0..d)
                .map(|k| (0..mm).map(|j| w[j] * m.get(&[j, k])).sum())
                .collect()
        })
        .collect()
}

/// Multi-head: per head, project, attend, project out, then sum heads.
fn oracle_multi_head(x: &Tensor, m: &Tensor, p: &MultiHeadParams) -> Vec<Vec<f64>> {
    let n = x.sizes()[0];
    let mm = m.sizes()[0];
    let [dx, dk, h] = p.p_q.sizes()[..] else {
        panic!()
    };
    let dm = p.p_k.sizes()[0];
    let dv = p.p_v.sizes()[1];
    let dy = p.p_o.sizes()[0];
    let mut y = vec![vec![0.0; dy]; n];
    for head in 0..h {
        let q = |i: usize, a: usize| {
            (0..dx)
                .map(|c| x.get(&[i, c]) * p.p_q.get(&[c, a, head]))
                .sum::<f64>()
        };
        let k = |j: usize, a: usize| {
            (0..dm)
                .map(|c| m.get(&[j, c]) * p.p_k.get(&[c, a, head]))
                .sum::<f64>()
        };
        let v = |j: usize, a: usize| {
            (0..dm)
                .map(|c| m.get(&[j, c]) * p.p_v.get(&[c, a, head]))
                .sum::<f64>()
        };
        for i in 0..n {
            let logits: Vec<f64> = (0..mm)
                .map(|j| (0..dk).map(|a| q(i, a) * k(j, a)).sum())
                .collect();
            let w = softmax_vec(&logits);
            for a in 0..dv {
                let o: f64 = (0..mm).map(|j| w[j] * v(j, a)).sum();
                for out in 0..dy {
                    y[i][out] += o * p.p_o.get(&[out, a, head]);
                }
            }
        }
    }
    y
}

/// Talking-heads with optional head projections (identity when absent) and
/// optional dynamic generators, written as explicit loops over J, L, W, U.
fn oracle_talking_heads(
    x: &Tensor,
    m: &Tensor,
    [pq, pk, pv, po]: [&Tensor; 4],
    pl: Option<&Tensor>,
    pw: Option<&Tensor>,
    gens: [Option<&Tensor>; 4],
) -> Vec<Vec<f64>> {
    let n = x.sizes()[0];
    let mm = m.sizes()[0];
    let [dx, dk, hk] = pq.sizes()[..] else {
        panic!()
    };
    let dm = pk.sizes()[0];
    let [_, dv, hv] = pv.sizes()[..] else {
        panic!()
    };
    let dy = po.sizes()[0];
    let h = pl.map_or(hk, |t| t.sizes()[1]);
    let eye = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let [gxl, gml, gxw, gmw] = gens;

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
    let jdot = |i: usize, j: usize, e: usize| (0..dk).map(|a| q(i, a, e) * k(j, a, e)).sum::<f64>();
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
    for i in 0..n {
        // L[i, j, s] for each softmax head s, then W by softmax over j.
        let mut w = vec![vec![0.0; h]; mm];
        for s in 0..h {
            let logits: Vec<f64> = (0..mm)
                .map(|j| {
                    (0..hk)
                        .map(|e| {
                            let stat = pl.map_or(eye(e, s), |pl| pl.get(&[e, s]));
                            jdot(i, j, e) * (stat + gen_x(gxl, i, e, s) + gen_m(gml, j, e, s))
                        })
                        .sum()
                })
                .collect();
            for (j, wv) in softmax_vec(&logits).into_iter().enumerate() {
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
    y
}

fn oracle_gbma(x: &Tensor, m: &Tensor, p: &GbmaParams) -> Vec<Vec<f64>> {
    let n = x.sizes()[0];
    let mm = m.sizes()[0];
    let [dx, dm, h] = p.p.sizes()[..] else {
        panic!()
    };
    let dy = p.q.sizes()[1];
    let mut y = vec![vec![0.0; dy]; n];
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
            let w = softmax_vec(&logits);
            for (j, wj) in w.iter().enumerate() {
                for b in 0..dm {
                    for out in 0..dy {
                        y[i][out] += wj * m.get(&[j, b]) * p.q.get(&[b, out, s]);
                    }
                }
            }
        }
    }
    y
}

// ---- fixtures -----------------------------------------------------------

fn th_params(dims: &AttentionDims, seed: u64) -> TalkingHeadsParams {
    match init_params(Variant::TalkingHeads, dims, &Rng::new(seed)).unwrap() {
        AttentionParams::TalkingHeads(p) => p,
        _ => unreachable!(),
    }
}

fn mh_params(dims: &AttentionDims, seed: u64) -> MultiHeadParams {
    match init_params(Variant::MultiHead, dims, &Rng::new(seed)).unwrap() {
        AttentionParams::MultiHead(p) => p,
        _ => unreachable!(),
    }
}

fn inputs(dims: &AttentionDims, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed).fork("inputs");
    (
        rand(&[("n", dims.n), ("d_X", dims.d_x)], &mut rng),
        rand(&[("m", dims.m), ("d_M", dims.d_m)], &mut rng),
    )
}

fn mh_from_th(p: &TalkingHeadsParams) -> MultiHeadParams {
    MultiHeadParams {
        p_q: p.p_q.clone(),
        p_k: p.p_k.clone(),
        p_v: p.p_v.clone(),
        p_o: p.p_o.clone(),
    }
}

fn with_identity(mut p: TalkingHeadsParams) -> TalkingHeadsParams {
    let [hk, h] = p.p_l.sizes()[..] else { panic!() };
    let hv = p.p_w.sizes()[1];
    p.p_l = Tensor::eye("h_k", hk, "h", h).unwrap();
    p.p_w = Tensor::eye("h", h, "h_v", hv).unwrap();
    p
}

fn dims(
    n: usize,
    m: usize,
    d: usize,
    dk: usize,
    dv: usize,
    hk: usize,
    h: usize,
    hv: usize,
) -> AttentionDims {
    AttentionDims::with_width(n, m, d, dk, dv, hk, h, hv)
}

// ---- dot-product attention ----------------------------------------------

#[test]
fn single_memory_row_is_returned_for_every_query() {
    let mut rng = Rng::new(1);
    let x = rand(&[("n", 3), ("d", 4)], &mut rng);
    let m = rand(&[("m", 1), ("d", 4)], &mut rng);
    let y = dot_product_attention(&x, &m).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            assert!((y.get(&[i, k]) - m.get(&[0, k])).abs() < 1e-15);
        }
    }
}

#[test]
fn identical_memory_rows_give_that_row() {
    let mut rng = Rng::new(2);
    let x = rand(&[("n", 2), ("d", 3)], &mut rng);
    let m = Tensor::from_fn(axes(&[("m", 4), ("d", 3)]), |i| [0.3, -1.0, 2.0][i[1]]).unwrap();
    let y = dot_product_attention(&x, &m).unwrap();
    for i in 0..2 {
        for k in 0..3 {
            assert!((y.get(&[i, k]) - m.get(&[0, k])).abs() < 1e-15);
        }
    }
}

#[test]
fn dot_product_matches_loop_oracle() {
    let mut rng = Rng::new(3);
    let x = rand(&[("n", 2), ("d", 2)], &mut rng);
    let m = rand(&[("m", 2), ("d", 2)], &mut rng);
    let y = dot_product_attention(&x, &m).unwrap();
    assert!(max_diff(&as_matrix(&y), &oracle_dot_product(&x, &m)) <= 1e-14);
    let wide = rand(&[("m", 2), ("d", 3)], &mut rng);
    assert!(matches!(
        dot_product_attention(&x, &wide),
        Err(Error::Dims(_))
    ));
}

#[test]
fn identity_projections_reduce_to_plain_attention() {
    let mut rng = Rng::new(4);
    let x = rand(&[("n", 3), ("d", 4)], &mut rng);
    let m = rand(&[("m", 5), ("d", 4)], &mut rng);
    let eye = Tensor::eye("a", 4, "b", 4).unwrap();
    let y = dot_product_attention_with_projections(&x, &m, &eye, &eye, &eye, &eye).unwrap();
    let plain = dot_product_attention(&x, &m).unwrap();
    assert!(
        y.max_abs_diff(&plain.relabel(&["n", "d_Y"]).unwrap())
            .unwrap()
            < 1e-15
    );
}

#[test]
fn zero_value_projection_zeroes_output() {
    let mut rng = Rng::new(5);
    let x = rand(&[("n", 3), ("d", 4)], &mut rng);
    let m = rand(&[("m", 2), ("d", 4)], &mut rng);
    let pq = rand(&[("d_X", 4), ("d_k", 2)], &mut rng);
    let pk = rand(&[("d_M", 4), ("d_k", 2)], &mut rng);
    let pv = Tensor::zeros(axes(&[("d_M", 4), ("d_v", 3)])).unwrap();
    let po = rand(&[("d_Y", 4), ("d_v", 3)], &mut rng);
    let y = dot_product_attention_with_projections(&x, &m, &pq, &pk, &pv, &po).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn projected_attention_matches_loop_oracle() {
    // (n, m, d, d_k, d_v) = (3, 4, 5, 2, 2)
    let mut rng = Rng::new(6);
    let x = rand(&[("n", 3), ("d", 5)], &mut rng);
    let m = rand(&[("m", 4), ("d", 5)], &mut rng);
    let pq = rand(&[("d_X", 5), ("d_k", 2)], &mut rng);
    let pk = rand(&[("d_M", 5), ("d_k", 2)], &mut rng);
    let pv = rand(&[("d_M", 5), ("d_v", 2)], &mut rng);
    let po = rand(&[("d_Y", 5), ("d_v", 2)], &mut rng);
    let y = dot_product_attention_with_projections(&x, &m, &pq, &pk, &pv, &po).unwrap();
    // Single-head multi-head oracle on the same weights.
    let as3 = |t: &Tensor, names: [&str; 3]| {
        let s = t.sizes();
        Tensor::new(
            axes(&[(names[0], s[0]), (names[1], s[1]), (names[2], 1)]),
            t.data().to_vec(),
        )
        .unwrap()
    };
    let p = MultiHeadParams {
        p_q: as3(&pq, ["d_X", "d_k", "h"]),
        p_k: as3(&pk, ["d_M", "d_k", "h"]),
        p_v: as3(&pv, ["d_M", "d_v", "h"]),
        p_o: as3(&po, ["d_Y", "d_v", "h"]),
    };
    assert!(max_diff(&as_matrix(&y), &oracle_multi_head(&x, &m, &p)) <= 1e-14);
    let bad = rand(&[("d_M", 3), ("d_v", 2)], &mut rng);
    assert!(dot_product_attention_with_projections(&x, &m, &pq, &pk, &bad, &po).is_err());
}

// ---- multi-head ---------------------------------------------------------

#[test]
fn single_head_equals_projected_attention() {
    let d = dims(3, 4, 5, 2, 3, 1, 1, 1);
    let p = mh_params(&d, 7);
    let (x, m) = inputs(&d, 7);
    let y = multi_head_attention(&x, &m, &p, false).unwrap().y;
    let squeeze = |t: &Tensor| {
        let s = t.sizes();
        Tensor::new(axes(&[("a", s[0]), ("b", s[1])]), t.data().to_vec()).unwrap()
    };
    let y1 = dot_product_attention_with_projections(
        &x,
        &m,
        &squeeze(&p.p_q),
        &squeeze(&p.p_k),
        &squeeze(&p.p_v),
        &squeeze(&p.p_o),
    )
    .unwrap();
    assert!(y.max_abs_diff(&y1).unwrap() <= 1e-15);
}

#[test]
fn multi_head_matches_loop_oracle_and_concise_form() {
    let d = dims(3, 4, 5, 2, 3, 3, 3, 3);
    let p = mh_params(&d, 8);
    let (x, m) = inputs(&d, 8);
    let y = multi_head_attention(&x, &m, &p, false).unwrap().y;
    assert!(max_diff(&as_matrix(&y), &oracle_multi_head(&x, &m, &p)) <= 1e-14);
    let concise = multi_head_attention_concise(&x, &m, &p).unwrap();
    assert!(y.max_abs_diff(&concise).unwrap() <= 1e-12);
}

#[test]
fn output_is_linear_in_output_projection() {
    let d = dims(2, 3, 4, 2, 2, 2, 2, 2);
    let mut p = mh_params(&d, 9);
    let (x, m) = inputs(&d, 9);
    let y = multi_head_attention(&x, &m, &p, false).unwrap().y;
    p.p_o = scale(&p.p_o, 2.0);
    let y2 = multi_head_attention(&x, &m, &p, false).unwrap().y;
    assert_eq!(y2, scale(&y, 2.0));
}

#[test]
fn multi_head_counter_labels_follow_the_schedule() {
    let d = dims(3, 4, 5, 2, 3, 2, 2, 2);
    let p = mh_params(&d, 10);
    let (x, m) = inputs(&d, 10);
    let out = multi_head_attention(&x, &m, &p, false).unwrap();
    let (n, mm, dx, dk, dv, h) = (3u64, 4, 5, 2, 3, 2);
    let expected = [
        ("queries".to_string(), h * n * dx * dk),
        ("keys".to_string(), h * mm * dx * dk),
        ("values".to_string(), h * mm * dx * dv),
        ("logits".to_string(), h * n * mm * dk),
        ("outputs-weighted-sum".to_string(), h * n * mm * dv),
        ("output-projection".to_string(), h * n * dx * dv),
    ];
    assert_eq!(out.counter.records(), &expected[..]);
}

#[test]
fn multi_head_rejects_unequal_heads() {
    let d = dims(2, 2, 3, 2, 2, 2, 3, 3);
    let p = th_params(&d, 11);
    let (x, m) = inputs(&d, 11);
    let mut mh = mh_from_th(&p);
    mh.p_q = rand(&[("d_X", 3), ("d_k", 2), ("h", 2)], &mut Rng::new(1));
    assert!(matches!(
        multi_head_attention(&x, &m, &mh, false),
        Err(Error::Dims(_))
    ));
}

// ---- talking-heads ------------------------------------------------------

#[test]
fn identity_head_projections_reduce_to_multi_head() {
    let d = dims(3, 4, 5, 2, 3, 3, 3, 3);
    let p = with_identity(th_params(&d, 12));
    let (x, m) = inputs(&d, 12);
    let th = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    let mh = multi_head_attention(&x, &m, &mh_from_th(&p), false)
        .unwrap()
        .y;
    assert!(th.max_abs_diff(&mh).unwrap() <= 1e-13);
}

#[test]
fn output_is_linear_in_weights_projection() {
    let d = dims(2, 3, 4, 2, 2, 2, 3, 2);
    let mut p = th_params(&d, 13);
    let (x, m) = inputs(&d, 13);
    let y = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    p.p_w = scale(&p.p_w, 0.5);
    let y2 = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    assert_eq!(y2, scale(&y, 0.5));
}

#[test]
fn talking_heads_matches_loop_oracle_and_concise_form() {
    let d = dims(3, 4, 3, 2, 3, 2, 3, 4);
    let p = th_params(&d, 14);
    let (x, m) = inputs(&d, 14);
    let y = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    let oracle = oracle_talking_heads(
        &x,
        &m,
        [&p.p_q, &p.p_k, &p.p_v, &p.p_o],
        Some(&p.p_l),
        Some(&p.p_w),
        [None; 4],
    );
    assert!(max_diff(&as_matrix(&y), &oracle) <= 1e-13);
    let concise = talking_heads_attention_concise(&x, &m, &p).unwrap();
    assert!(y.max_abs_diff(&concise).unwrap() <= 1e-12);
}

#[test]
fn talking_heads_counter_labels_follow_the_schedule() {
    let d = dims(3, 4, 5, 2, 3, 2, 6, 4);
    let p = th_params(&d, 15);
    let (x, m) = inputs(&d, 15);
    let out = talking_heads_attention(&x, &m, &p, false).unwrap();
    let (n, mm, dx, dk, dv, hk, h, hv) = (3u64, 4, 5, 2, 3, 2, 6, 4);
    let expected = [
        ("queries".to_string(), n * dx * dk * hk),
        ("keys".to_string(), mm * dx * dk * hk),
        ("values".to_string(), mm * dx * dv * hv),
        ("dot-products".to_string(), n * mm * dk * hk),
        ("logits-projection".to_string(), n * mm * h * hk),
        ("weights-projection".to_string(), n * mm * h * hv),
        ("outputs-weighted-sum".to_string(), n * mm * dv * hv),
        ("output-projection".to_string(), n * dx * dv * hv),
    ];
    assert_eq!(out.counter.records(), &expected[..]);
}

#[test]
fn talking_heads_matches_its_gbma_factoring() {
    let d = dims(3, 2, 4, 2, 3, 2, 3, 2);
    let p = th_params(&d, 16);
    let (x, m) = inputs(&d, 16);
    let y = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    let g = factor_to_gbma(&AttentionParams::TalkingHeads(p)).unwrap();
    let yg = gbma(&x, &m, &g, false).unwrap().y;
    assert!(y.max_abs_diff(&yg).unwrap() <= 1e-11);
}

#[test]
fn trace_shapes_and_weight_rows() {
    let d = dims(3, 4, 5, 2, 3, 2, 6, 4);
    let p = th_params(&d, 17);
    let (x, m) = inputs(&d, 17);
    let t = talking_heads_attention(&x, &m, &p, true)
        .unwrap()
        .trace
        .unwrap();
    let sizes = |t: &Option<Tensor>| t.as_ref().unwrap().sizes();
    assert_eq!(sizes(&t.q), vec![3, 2, 2]);
    assert_eq!(sizes(&t.k), vec![4, 2, 2]);
    assert_eq!(sizes(&t.v), vec![4, 3, 4]);
    assert_eq!(sizes(&t.j), vec![3, 4, 2]);
    assert_eq!(t.l.sizes(), vec![3, 4, 6]);
    assert_eq!(t.w.sizes(), vec![3, 4, 6]);
    assert_eq!(sizes(&t.u), vec![3, 4, 4]);
    assert_eq!(sizes(&t.o), vec![3, 3, 4]);
    assert_eq!(t.y.sizes(), vec![3, 5]);
    for i in 0..3 {
        for s in 0..6 {
            let total: f64 = (0..4).map(|j| t.w.get(&[i, j, s])).sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}

// ---- hybrids ------------------------------------------------------------

fn hybrid_from(p: &TalkingHeadsParams, kind: HybridKind) -> HybridParams {
    HybridParams {
        kind,
        p_q: p.p_q.clone(),
        p_k: p.p_k.clone(),
        p_v: p.p_v.clone(),
        p_o: p.p_o.clone(),
        projection: match kind {
            HybridKind::LogitsOnly => p.p_l.clone(),
            HybridKind::WeightsOnly => p.p_w.clone(),
        },
    }
}

#[test]
fn hybrids_with_identity_projection_equal_multi_head() {
    let d = dims(3, 4, 5, 2, 3, 3, 3, 3);
    let p = with_identity(th_params(&d, 18));
    let (x, m) = inputs(&d, 18);
    let mh = multi_head_attention(&x, &m, &mh_from_th(&p), false)
        .unwrap()
        .y;
    for kind in [HybridKind::LogitsOnly, HybridKind::WeightsOnly] {
        let y = hybrid_attention(&x, &m, &hybrid_from(&p, kind), false)
            .unwrap()
            .y;
        assert!(y.max_abs_diff(&mh).unwrap() <= 1e-13);
    }
}

#[test]
fn weights_only_equals_talking_heads_with_identity_logits_projection() {
    let d = dims(3, 4, 5, 2, 3, 3, 3, 2);
    let mut p = th_params(&d, 19);
    p.p_l = Tensor::eye("h_k", 3, "h", 3).unwrap();
    let (x, m) = inputs(&d, 19);
    let th = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    let wo = hybrid_attention(&x, &m, &hybrid_from(&p, HybridKind::WeightsOnly), false)
        .unwrap()
        .y;
    assert_eq!(th, wo);
}

#[test]
fn logits_only_equals_talking_heads_with_identity_weights_projection() {
    let d = dims(3, 4, 5, 2, 3, 2, 3, 3);
    let mut p = th_params(&d, 20);
    p.p_w = Tensor::eye("h", 3, "h_v", 3).unwrap();
    let (x, m) = inputs(&d, 20);
    let th = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    let lo = hybrid_attention(&x, &m, &hybrid_from(&p, HybridKind::LogitsOnly), false)
        .unwrap()
        .y;
    assert_eq!(th, lo);
}

#[test]
fn hybrid_rejects_heads_without_identity() {
    let d = dims(2, 2, 3, 2, 2, 2, 3, 4);
    let p = th_params(&d, 21);
    let (x, m) = inputs(&d, 21);
    for kind in [HybridKind::LogitsOnly, HybridKind::WeightsOnly] {
        assert!(matches!(
            hybrid_attention(&x, &m, &hybrid_from(&p, kind), false),
            Err(Error::Dims(_))
        ));
    }
}

#[test]
fn logits_only_parameter_count_at_table_scale() {
    let d = dims(1, 1, 768, 32, 32, 24, 24, 24);
    let p = init_params(Variant::LogitsOnly, &d, &Rng::new(0)).unwrap();
    assert_eq!(p.parameter_count(), 2_359_872);
}

// ---- GBMA ---------------------------------------------------------------

#[test]
fn zero_output_tensor_zeroes_gbma() {
    let d = dims(2, 3, 4, 1, 1, 2, 2, 2);
    let mut p = match init_params(Variant::Gbma, &d, &Rng::new(22)).unwrap() {
        AttentionParams::Gbma(p) => p,
        _ => unreachable!(),
    };
    p.q = Tensor::zeros(p.q.axes().to_vec()).unwrap();
    let (x, m) = inputs(&d, 22);
    assert!(gbma(&x, &m, &p, false)
        .unwrap()
        .y
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn single_head_factoring_equals_projected_attention() {
    let d = dims(3, 4, 5, 2, 3, 1, 1, 1);
    let p = mh_params(&d, 23);
    let (x, m) = inputs(&d, 23);
    let g = factor_to_gbma(&AttentionParams::MultiHead(p.clone())).unwrap();
    let yg = gbma(&x, &m, &g, false).unwrap().y;
    let y = multi_head_attention(&x, &m, &p, false).unwrap().y;
    assert!(y.max_abs_diff(&yg).unwrap() <= 1e-12);
}

#[test]
fn gbma_matches_loop_oracle() {
    let d = dims(2, 2, 2, 1, 1, 2, 2, 2);
    let p = match init_params(Variant::Gbma, &d, &Rng::new(24)).unwrap() {
        AttentionParams::Gbma(p) => p,
        _ => unreachable!(),
    };
    let (x, m) = inputs(&d, 24);
    let y = gbma(&x, &m, &p, false).unwrap().y;
    assert!(max_diff(&as_matrix(&y), &oracle_gbma(&x, &m, &p)) <= 1e-13);
}

#[test]
fn factoring_shapes_and_identity_absorption() {
    let d = AttentionDims {
        n: 1,
        m: 1,
        d_x: 3,
        d_m: 4,
        d_y: 5,
        d_k: 2,
        d_v: 2,
        h_k: 3,
        h: 3,
        h_v: 3,
    };
    let p = with_identity(th_params(&d, 25));
    let from_th = factor_to_gbma(&AttentionParams::TalkingHeads(p.clone())).unwrap();
    let from_mh = factor_to_gbma(&AttentionParams::MultiHead(mh_from_th(&p))).unwrap();
    assert_eq!(from_th.p.sizes(), vec![3, 4, 3]);
    assert_eq!(from_th.q.sizes(), vec![4, 5, 3]);
    assert!(from_th.p.max_abs_diff(&from_mh.p).unwrap() <= 1e-15);
    assert!(from_th.q.max_abs_diff(&from_mh.q).unwrap() <= 1e-15);
}

#[test]
fn dynamic_params_cannot_be_factored() {
    let d = dims(1, 1, 3, 2, 2, 2, 2, 2);
    let p = init_params(Variant::Dynamic(GeneratorSet::ALL), &d, &Rng::new(1)).unwrap();
    assert!(factor_to_gbma(&p).is_err());
}

// ---- dynamic projections ------------------------------------------------

fn dyn_params(d: &AttentionDims, set: GeneratorSet, seed: u64) -> DynamicProjectionParams {
    match init_params(Variant::Dynamic(set), d, &Rng::new(seed)).unwrap() {
        AttentionParams::Dynamic(p) => p,
        _ => unreachable!(),
    }
}

#[test]
fn zero_generators_reproduce_static_talking_heads_exactly() {
    let d = dims(3, 4, 5, 2, 3, 2, 3, 2);
    let mut p = dyn_params(&d, GeneratorSet::ALL, 26);
    for g in [&mut p.p_xl, &mut p.p_ml, &mut p.p_xw, &mut p.p_mw] {
        let t = g.as_mut().unwrap();
        *t = Tensor::zeros(t.axes().to_vec()).unwrap();
    }
    let (x, m) = inputs(&d, 26);
    let dy = dynamic_projection_attention(&x, &m, &p, false).unwrap().y;
    let th = talking_heads_attention(&x, &m, &p.base, false).unwrap().y;
    assert_eq!(dy, th);
    let none = DynamicProjectionParams {
        base: p.base.clone(),
        p_xl: None,
        p_ml: None,
        p_xw: None,
        p_mw: None,
    };
    assert_eq!(
        dynamic_projection_attention(&x, &m, &none, false)
            .unwrap()
            .y,
        th
    );
}

#[test]
fn dynamic_matches_loop_oracle_per_generator() {
    let d = dims(2, 2, 3, 2, 2, 2, 2, 2);
    let (x, m) = inputs(&d, 27);
    let mut sets: Vec<GeneratorSet> = Generator::ALL
        .iter()
        .map(|&g| GeneratorSet::only(g))
        .collect();
    sets.push(GeneratorSet::ALL);
    for set in sets {
        let mut p = dyn_params(&d, set, 27);
        // Scale generators up so their terms are not negligible.
        for g in [&mut p.p_xl, &mut p.p_ml, &mut p.p_xw, &mut p.p_mw]
            .into_iter()
            .flatten()
        {
            *g = scale(g, 30.0);
        }
        let y = dynamic_projection_attention(&x, &m, &p, false).unwrap().y;
        let b = &p.base;
        let oracle = oracle_talking_heads(
            &x,
            &m,
            [&b.p_q, &b.p_k, &b.p_v, &b.p_o],
            Some(&b.p_l),
            Some(&b.p_w),
            [
                p.p_xl.as_ref(),
                p.p_ml.as_ref(),
                p.p_xw.as_ref(),
                p.p_mw.as_ref(),
            ],
        );
        assert!(max_diff(&as_matrix(&y), &oracle) <= 1e-12, "{set}");
    }
}

#[test]
fn dynamic_trace_exposes_generated_projections() {
    let d = dims(3, 4, 5, 2, 2, 2, 3, 2);
    let p = dyn_params(&d, GeneratorSet::ALL, 28);
    let (x, m) = inputs(&d, 28);
    let t = dynamic_projection_attention(&x, &m, &p, true)
        .unwrap()
        .trace
        .unwrap();
    assert_eq!(t.r_xl.unwrap().sizes(), vec![3, 2, 3]);
    assert_eq!(t.r_ml.unwrap().sizes(), vec![4, 2, 3]);
    assert_eq!(t.r_xw.unwrap().sizes(), vec![3, 3, 2]);
    assert_eq!(t.r_mw.unwrap().sizes(), vec![4, 3, 2]);
}

// ---- initialization -----------------------------------------------------

fn sample_std(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.sum() / n;
    (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn generator_init_stds() {
    let d = dims(1, 1, 768, 1, 1, 12, 12, 12);
    let p = dyn_params(&d, GeneratorSet::ALL, 29);
    let target = 0.1 / (768.0f64 * 12.0).sqrt();
    assert!((target - 1.0417e-3).abs() < 1e-7);
    for g in Generator::ALL {
        let t = p.generator(g).unwrap();
        assert!(t.len() >= 100_000);
        let s = sample_std(t);
        assert!((s / target - 1.0).abs() <= 0.02, "{g:?}: {s}");
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let d = dims(1, 1, 6, 2, 3, 2, 3, 2);
    for v in [
        Variant::MultiHead,
        Variant::Gbma,
        Variant::Dynamic(GeneratorSet::ALL),
    ] {
        let d = if v == Variant::MultiHead {
            dims(1, 1, 6, 2, 3, 2, 2, 2)
        } else {
            d
        };
        assert_eq!(
            init_params(v, &d, &Rng::new(5)).unwrap(),
            init_params(v, &d, &Rng::new(5)).unwrap()
        );
        assert_ne!(
            init_params(v, &d, &Rng::new(5)).unwrap(),
            init_params(v, &d, &Rng::new(6)).unwrap()
        );
    }
}

#[test]
fn noise_free_init_starts_as_multi_head() {
    let d = dims(3, 4, 5, 2, 2, 3, 3, 3);
    let opts = InitOptions {
        projection_noise_std: 0.0,
    };
    let p = match init_params_with(Variant::TalkingHeads, &d, &Rng::new(30), opts).unwrap() {
        AttentionParams::TalkingHeads(p) => p,
        _ => unreachable!(),
    };
    assert_eq!(p.p_l, Tensor::eye("h_k", 3, "h", 3).unwrap());
    assert_eq!(p.p_w, Tensor::eye("h", 3, "h_v", 3).unwrap());
    let (x, m) = inputs(&d, 30);
    let th = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    let mh = multi_head_attention(&x, &m, &mh_from_th(&p), false)
        .unwrap()
        .y;
    assert!(th.max_abs_diff(&mh).unwrap() <= 1e-13);
}

#[test]
fn rectangular_head_projection_starts_near_padded_identity() {
    let d = dims(1, 1, 4, 2, 2, 2, 5, 3);
    let p = th_params(&d, 31);
    let eye = Tensor::eye("h_k", 2, "h", 5).unwrap();
    assert!(p.p_l.max_abs_diff(&eye).unwrap() < 0.2);
}

// ---- gradients ----------------------------------------------------------

fn grad_report(
    params: &AttentionParams,
    x: &Tensor,
    m: &Tensor,
) -> crate::autograd::GradientReport {
    let named: Vec<(&str, &Tensor)> = params.named();
    let mut inputs: Vec<(&str, &Tensor)> = vec![("X", x), ("M", m)];
    inputs.extend(named.iter().copied());
    check_gradients(
        &inputs,
        |tape: &mut Tape, vars| {
            // `named` and `try_map` visit parameters in the same order.
            let mut k = 2;
            let hp = params.try_map(|_, _| {
                k += 1;
                Ok::<_, Error>(vars[k - 1])
            })?;
            let t = attend(tape, Layout::default(), &vars[0], &vars[1], &hp)?;
            // Fixed random weighting so the loss is not a symmetric sum.
            let wts = Tensor::from_fn(tape.value(t.y).axes().to_vec(), |i| {
                1.0 + 0.1 * (i[0] as f64) - 0.2 * (i[1] as f64)
            })?;
            let c = tape.constant("weights", wts);
            tape.einsum("loss", &[(t.y, &["n", "d_Y"]), (c, &["n", "d_Y"])], &[])
        },
        FD_STEP,
    )
    .unwrap()
}

#[test]
fn talking_heads_gradients_match_finite_differences() {
    let d = dims(3, 2, 3, 2, 2, 2, 3, 2);
    let p = AttentionParams::TalkingHeads(th_params(&d, 32));
    let (x, m) = inputs(&d, 32);
    let r = grad_report(&p, &x, &m);
    assert!(r.passes(1e-5), "{r:?}");
    assert!(r.per_parameter.iter().any(|(n, _)| n == "P_l"));
}

#[test]
fn dynamic_gradients_match_finite_differences() {
    let d = dims(2, 3, 3, 2, 2, 2, 2, 2);
    let mut p = dyn_params(&d, GeneratorSet::ALL, 33);
    for g in [&mut p.p_xl, &mut p.p_ml, &mut p.p_xw, &mut p.p_mw]
        .into_iter()
        .flatten()
    {
        *g = scale(g, 20.0);
    }
    let (x, m) = inputs(&d, 33);
    let r = grad_report(&AttentionParams::Dynamic(p), &x, &m);
    assert!(r.passes(1e-5), "{r:?}");
    assert!(r.per_parameter.iter().any(|(n, _)| n == "P_Xw"));
}

// ---- properties ---------------------------------------------------------

fn all_variants(d: &AttentionDims, seed: u64) -> Vec<AttentionParams> {
    let rng = Rng::new(seed);
    let mut out = vec![
        init_params(Variant::TalkingHeads, d, &rng).unwrap(),
        init_params(Variant::Dynamic(GeneratorSet::ALL), d, &rng).unwrap(),
        init_params(Variant::Gbma, d, &rng).unwrap(),
    ];
    let square = AttentionDims {
        h_k: d.h,
        h_v: d.h,
        ..*d
    };
    out.push(init_params(Variant::MultiHead, &square, &rng).unwrap());
    out.push(init_params(Variant::LogitsOnly, &AttentionDims { h_v: d.h, ..*d }, &rng).unwrap());
    out.push(
        init_params(
            Variant::WeightsOnly,
            &AttentionDims { h_k: d.h, ..*d },
            &rng,
        )
        .unwrap(),
    );
    out
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.axes().to_vec(), |i| t.get(&[perm[i[0]], i[1]])).unwrap()
}

fn small_dims() -> impl Strategy<Value = (AttentionDims, u64)> {
    (
        1usize..=5,
        1usize..=5,
        1usize..=4,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        any::<u64>(),
    )
        .prop_map(|(n, m, d, dk, dv, hk, h, hv, seed)| (dims(n, m, d, dk, dv, hk, h, hv), seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_sum_to_one((d, seed) in small_dims()) {
        let (x, m) = inputs(&d, seed);
        for p in all_variants(&d, seed) {
            let t = attention(&x, &m, &p, true).unwrap().trace.unwrap();
            let [n, mm, h] = t.w.sizes()[..] else { panic!() };
            for i in 0..n {
                for s in 0..h {
                    let total: f64 = (0..mm).map(|j| t.w.get(&[i, j, s])).sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                    prop_assert!((0..mm).all(|j| (0.0..=1.0).contains(&t.w.get(&[i, j, s]))));
                }
            }
        }
    }

    #[test]
    fn memory_permutation_invariance((d, seed) in small_dims(), rot in 0usize..5) {
        let (x, m) = inputs(&d, seed);
        let perm: Vec<usize> = (0..d.m).map(|j| (j * 2 + rot) % d.m).collect::<std::collections::BTreeSet<_>>().into_iter().collect::<Vec<_>>();
        // Fall back to a rotation when the stride does not produce a permutation.
        let perm = if perm.len() == d.m { (0..d.m).map(|j| (j * 2 + rot) % d.m).collect() } else { (0..d.m).map(|j| (j + rot) % d.m).collect::<Vec<_>>() };
        let mp = permute_rows(&m, &perm);
        for p in all_variants(&d, seed) {
            let y = attention(&x, &m, &p, false).unwrap().y;
            let yp = attention(&x, &mp, &p, false).unwrap().y;
            prop_assert!(y.max_abs_diff(&yp).unwrap() <= 1e-12, "{}", p.variant());
        }
    }

    #[test]
    fn query_permutation_equivariance((d, seed) in small_dims(), rot in 0usize..5) {
        let (x, m) = inputs(&d, seed);
        let perm: Vec<usize> = (0..d.n).map(|i| (i + rot) % d.n).collect();
        let xp = permute_rows(&x, &perm);
        for p in all_variants(&d, seed) {
            let y = attention(&x, &m, &p, false).unwrap().y;
            let yp = attention(&xp, &m, &p, false).unwrap().y;
            prop_assert!(permute_rows(&y, &perm).max_abs_diff(&yp).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn gbma_factoring_equivalence((d, seed) in small_dims()) {
        let (x, m) = inputs(&d, seed);
        for p in all_variants(&d, seed) {
            if matches!(p, AttentionParams::Dynamic(_) | AttentionParams::Gbma(_)) {
                continue;
            }
            let y = attention(&x, &m, &p, false).unwrap().y;
            let yg = gbma(&x, &m, &factor_to_gbma(&p).unwrap(), false).unwrap().y;
            prop_assert!(y.max_abs_diff(&yg).unwrap() <= 1e-11, "{}", p.variant());
        }
    }

    #[test]
    fn homogeneity_in_value_side_tensors((d, seed) in small_dims(), which in 0usize..3) {
        let (x, m) = inputs(&d, seed);
        let mut p = th_params(&d, seed);
        let y = talking_heads_attention(&x, &m, &p, false).unwrap().y;
        let c = 4.0;
        match which {
            0 => p.p_o = scale(&p.p_o, c),
            1 => p.p_w = scale(&p.p_w, c),
            _ => p.p_v = scale(&p.p_v, c),
        }
        let y2 = talking_heads_attention(&x, &m, &p, false).unwrap().y;
        prop_assert_eq!(y2, scale(&y, c));
    }
}

#[test]
fn axis_names_do_not_affect_inputs() {
    let d = dims(2, 3, 4, 2, 2, 2, 2, 2);
    let p = th_params(&d, 40);
    let (x, m) = inputs(&d, 40);
    let y = talking_heads_attention(&x, &m, &p, false).unwrap().y;
    let x2 = x.relabel(&["rows", "cols"]).unwrap();
    let y2 = talking_heads_attention(&x2, &m, &p, false).unwrap().y;
    assert_eq!(y, y2);
    assert_eq!(y.axes(), &[Axis::new("n", 2), Axis::new("d_Y", 4)]);
}
