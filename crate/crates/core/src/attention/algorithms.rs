//! Engine-generic attention algorithms.
//!
//! Each step-by-step function issues one einsum per line of the canonical
//! schedule, labeled so the multiply counter reads like the per-line cost
//! annotations: `queries`, `keys`, `values`, `logits` (multi-head) or
//! `dot-products` / `logits-projection` / `weights-projection`
//! (talking-heads), `outputs-weighted-sum`, `output-projection`.

use crate::engine::Engine;
use crate::error::Result;

use super::params::{
    AttentionParams, DynamicProjectionParams, GbmaParams, Generator, HybridKind, MultiHeadParams,
    TalkingHeadsParams,
};

/// Optional leading batch axis on every input-dependent tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub batch: Option<&'static str>,
}

impl Layout {
    pub fn batched(axis: &'static str) -> Self {
        Self { batch: Some(axis) }
    }

    fn l(&self, names: &[&'static str]) -> Vec<&'static str> {
        self.batch
            .iter()
            .copied()
            .chain(names.iter().copied())
            .collect()
    }
}

/// Intermediates of one forward pass. Fields a variant does not compute are
/// `None`; for multi-head, `j` and `l` coincide.
#[derive(Clone, Debug)]
pub struct AttentionTrace<V = crate::tensor::Tensor> {
    pub q: Option<V>,
    pub k: Option<V>,
    pub v: Option<V>,
    pub j: Option<V>,
    pub l: V,
    pub w: V,
    pub u: Option<V>,
    pub o: Option<V>,
    pub y: V,
    pub r_xl: Option<V>,
    pub r_ml: Option<V>,
    pub r_xw: Option<V>,
    pub r_mw: Option<V>,
}

/// Runs the variant selected by `params`.
pub fn attend<E: Engine>(
    e: &mut E,
    layout: Layout,
    x: &E::Value,
    m: &E::Value,
    params: &AttentionParams<E::Value>,
) -> Result<AttentionTrace<E::Value>> {
    match params {
        AttentionParams::MultiHead(p) => multi_head(e, layout, x, m, p),
        AttentionParams::TalkingHeads(p) => talking_heads(
            e,
            layout,
            x,
            m,
            [&p.p_q, &p.p_k, &p.p_v, &p.p_o],
            Some(&p.p_l),
            Some(&p.p_w),
            None,
        ),
        AttentionParams::Hybrid(p) => {
            let (pl, pw) = match p.kind {
                HybridKind::LogitsOnly => (Some(&p.projection), None),
                HybridKind::WeightsOnly => (None, Some(&p.projection)),
            };
            talking_heads(
                e,
                layout,
                x,
                m,
                [&p.p_q, &p.p_k, &p.p_v, &p.p_o],
                pl,
                pw,
                None,
            )
        }
        AttentionParams::Dynamic(p) => {
            let b = &p.base;
            talking_heads(
                e,
                layout,
                x,
                m,
                [&b.p_q, &b.p_k, &b.p_v, &b.p_o],
                Some(&b.p_l),
                Some(&b.p_w),
                Some(p),
            )
        }
        AttentionParams::Gbma(p) => gbma(e, layout, x, m, p),
    }
}

pub fn dot_product<E: Engine>(e: &mut E, x: &E::Value, m: &E::Value) -> Result<E::Value> {
    let l = e.einsum("logits", &[(x, &["n", "d"]), (m, &["m", "d"])], &["n", "m"])?;
    let w = e.softmax(&l, "m")?;
    e.einsum(
        "outputs-weighted-sum",
        &[(&w, &["n", "m"]), (m, &["m", "d"])],
        &["n", "d"],
    )
}

pub fn projected<E: Engine>(
    e: &mut E,
    x: &E::Value,
    m: &E::Value,
    [p_q, p_k, p_v, p_o]: [&E::Value; 4],
) -> Result<E::Value> {
    let q = e.einsum(
        "queries",
        &[(x, &["n", "d_X"]), (p_q, &["d_X", "d_k"])],
        &["n", "d_k"],
    )?;
    let k = e.einsum(
        "keys",
        &[(m, &["m", "d_M"]), (p_k, &["d_M", "d_k"])],
        &["m", "d_k"],
    )?;
    let v = e.einsum(
        "values",
        &[(m, &["m", "d_M"]), (p_v, &["d_M", "d_v"])],
        &["m", "d_v"],
    )?;
    let l = e.einsum(
        "logits",
        &[(&q, &["n", "d_k"]), (&k, &["m", "d_k"])],
        &["n", "m"],
    )?;
    let w = e.softmax(&l, "m")?;
    let o = e.einsum(
        "outputs-weighted-sum",
        &[(&w, &["n", "m"]), (&v, &["m", "d_v"])],
        &["n", "d_v"],
    )?;
    e.einsum(
        "output-projection",
        &[(&o, &["n", "d_v"]), (p_o, &["d_Y", "d_v"])],
        &["n", "d_Y"],
    )
}

pub fn multi_head<E: Engine>(
    e: &mut E,
    lay: Layout,
    x: &E::Value,
    m: &E::Value,
    p: &MultiHeadParams<E::Value>,
) -> Result<AttentionTrace<E::Value>> {
    let q = e.einsum(
        "queries",
        &[(x, &lay.l(&["n", "d_X"])), (&p.p_q, &["d_X", "d_k", "h"])],
        &lay.l(&["n", "d_k", "h"]),
    )?;
    let k = e.einsum(
        "keys",
        &[(m, &lay.l(&["m", "d_M"])), (&p.p_k, &["d_M", "d_k", "h"])],
        &lay.l(&["m", "d_k", "h"]),
    )?;
    let v = e.einsum(
        "values",
        &[(m, &lay.l(&["m", "d_M"])), (&p.p_v, &["d_M", "d_v", "h"])],
        &lay.l(&["m", "d_v", "h"]),
    )?;
    let l = e.einsum(
        "logits",
        &[
            (&q, &lay.l(&["n", "d_k", "h"])),
            (&k, &lay.l(&["m", "d_k", "h"])),
        ],
        &lay.l(&["n", "m", "h"]),
    )?;
    let w = e.softmax(&l, "m")?;
    let o = e.einsum(
        "outputs-weighted-sum",
        &[
            (&w, &lay.l(&["n", "m", "h"])),
            (&v, &lay.l(&["m", "d_v", "h"])),
        ],
        &lay.l(&["n", "d_v", "h"]),
    )?;
    let y = e.einsum(
        "output-projection",
        &[
            (&o, &lay.l(&["n", "d_v", "h"])),
            (&p.p_o, &["d_Y", "d_v", "h"]),
        ],
        &lay.l(&["n", "d_Y"]),
    )?;
    Ok(AttentionTrace {
        q: Some(q),
        k: Some(k),
        v: Some(v),
        j: Some(l.clone()),
        l,
        w,
        u: None,
        o: Some(o),
        y,
        r_xl: None,
        r_ml: None,
        r_xw: None,
        r_mw: None,
    })
}

/// Talking-heads attention. A missing `p_l` or `p_w` is the identity, which
/// requires the head counts it connects to be equal. `dynamic` adds the
/// input-generated projection terms of every enabled generator.
#[allow(clippy::too_many_arguments)]
pub fn talking_heads<E: Engine>(
    e: &mut E,
    lay: Layout,
    x: &E::Value,
    m: &E::Value,
    [p_q, p_k, p_v, p_o]: [&E::Value; 4],
    p_l: Option<&E::Value>,
    p_w: Option<&E::Value>,
    dynamic: Option<&DynamicProjectionParams<E::Value>>,
) -> Result<AttentionTrace<E::Value>> {
    let gen = |g: Generator| dynamic.and_then(|d| d.generator(g));

    let q = e.einsum(
        "queries",
        &[(x, &lay.l(&["n", "d_X"])), (p_q, &["d_X", "d_k", "h_k"])],
        &lay.l(&["n", "d_k", "h_k"]),
    )?;
    let k = e.einsum(
        "keys",
        &[(m, &lay.l(&["m", "d_M"])), (p_k, &["d_M", "d_k", "h_k"])],
        &lay.l(&["m", "d_k", "h_k"]),
    )?;
    let v = e.einsum(
        "values",
        &[(m, &lay.l(&["m", "d_M"])), (p_v, &["d_M", "d_v", "h_v"])],
        &lay.l(&["m", "d_v", "h_v"]),
    )?;
    let j = e.einsum(
        "dot-products",
        &[
            (&q, &lay.l(&["n", "d_k", "h_k"])),
            (&k, &lay.l(&["m", "d_k", "h_k"])),
        ],
        &lay.l(&["n", "m", "h_k"]),
    )?;
    let mut l = match p_l {
        Some(p_l) => e.einsum(
            "logits-projection",
            &[(&j, &lay.l(&["n", "m", "h_k"])), (p_l, &["h_k", "h"])],
            &lay.l(&["n", "m", "h"]),
        )?,
        // Identity: relabel h_k as h (no multiplies).
        None => e.einsum(
            "logits-projection",
            &[(&j, &lay.l(&["n", "m", "h"]))],
            &lay.l(&["n", "m", "h"]),
        )?,
    };

    let mut r_xl = None;
    if let Some(p_xl) = gen(Generator::Xl) {
        let r = e.einsum(
            "generator-Xl",
            &[(x, &lay.l(&["n", "d_X"])), (p_xl, &["d_X", "h_k", "h"])],
            &lay.l(&["n", "h_k", "h"]),
        )?;
        let term = e.einsum(
            "dynamic-logits-Xl",
            &[
                (&j, &lay.l(&["n", "m", "h_k"])),
                (&r, &lay.l(&["n", "h_k", "h"])),
            ],
            &lay.l(&["n", "m", "h"]),
        )?;
        l = e.add(&l, &term)?;
        r_xl = Some(r);
    }
    let mut r_ml = None;
    if let Some(p_ml) = gen(Generator::Ml) {
        let r = e.einsum(
            "generator-Ml",
            &[(m, &lay.l(&["m", "d_M"])), (p_ml, &["d_M", "h_k", "h"])],
            &lay.l(&["m", "h_k", "h"]),
        )?;
        let term = e.einsum(
            "dynamic-logits-Ml",
            &[
                (&j, &lay.l(&["n", "m", "h_k"])),
                (&r, &lay.l(&["m", "h_k", "h"])),
            ],
            &lay.l(&["n", "m", "h"]),
        )?;
        l = e.add(&l, &term)?;
        r_ml = Some(r);
    }

    let w = e.softmax(&l, "m")?;

    let mut u = match p_w {
        Some(p_w) => e.einsum(
            "weights-projection",
            &[(&w, &lay.l(&["n", "m", "h"])), (p_w, &["h", "h_v"])],
            &lay.l(&["n", "m", "h_v"]),
        )?,
        None => e.einsum(
            "weights-projection",
            &[(&w, &lay.l(&["n", "m", "h_v"]))],
            &lay.l(&["n", "m", "h_v"]),
        )?,
    };
    let mut r_xw = None;
    if let Some(p_xw) = gen(Generator::Xw) {
        let r = e.einsum(
            "generator-Xw",
            &[(x, &lay.l(&["n", "d_X"])), (p_xw, &["d_X", "h", "h_v"])],
            &lay.l(&["n", "h", "h_v"]),
        )?;
        let term = e.einsum(
            "dynamic-weights-Xw",
            &[
                (&w, &lay.l(&["n", "m", "h"])),
                (&r, &lay.l(&["n", "h", "h_v"])),
            ],
            &lay.l(&["n", "m", "h_v"]),
        )?;
        u = e.add(&u, &term)?;
        r_xw = Some(r);
    }
    let mut r_mw = None;
    if let Some(p_mw) = gen(Generator::Mw) {
        let r = e.einsum(
            "generator-Mw",
            &[(m, &lay.l(&["m", "d_M"])), (p_mw, &["d_M", "h", "h_v"])],
            &lay.l(&["m", "h", "h_v"]),
        )?;
        let term = e.einsum(
            "dynamic-weights-Mw",
            &[
                (&w, &lay.l(&["n", "m", "h"])),
                (&r, &lay.l(&["m", "h", "h_v"])),
            ],
            &lay.l(&["n", "m", "h_v"]),
        )?;
        u = e.add(&u, &term)?;
        r_mw = Some(r);
    }

    let o = e.einsum(
        "outputs-weighted-sum",
        &[
            (&u, &lay.l(&["n", "m", "h_v"])),
            (&v, &lay.l(&["m", "d_v", "h_v"])),
        ],
        &lay.l(&["n", "d_v", "h_v"]),
    )?;
    let y = e.einsum(
        "output-projection",
        &[
            (&o, &lay.l(&["n", "d_v", "h_v"])),
            (p_o, &["d_Y", "d_v", "h_v"]),
        ],
        &lay.l(&["n", "d_Y"]),
    )?;
    Ok(AttentionTrace {
        q: Some(q),
        k: Some(k),
        v: Some(v),
        j: Some(j),
        l,
        w,
        u: Some(u),
        o: Some(o),
        y,
        r_xl,
        r_ml,
        r_xw,
        r_mw,
    })
}

/// General bilinear multihead attention. The three-operand einsums contract
/// `X` with `P` before `M`, and `W` with `M` before `Q`.
pub fn gbma<E: Engine>(
    e: &mut E,
    lay: Layout,
    x: &E::Value,
    m: &E::Value,
    p: &GbmaParams<E::Value>,
) -> Result<AttentionTrace<E::Value>> {
    let l = e.einsum(
        "gbma-logits",
        &[
            (x, &lay.l(&["n", "d_X"])),
            (&p.p, &["d_X", "d_M", "h"]),
            (m, &lay.l(&["m", "d_M"])),
        ],
        &lay.l(&["n", "m", "h"]),
    )?;
    let w = e.softmax(&l, "m")?;
    let y = e.einsum(
        "gbma-output",
        &[
            (&w, &lay.l(&["n", "m", "h"])),
            (m, &lay.l(&["m", "d_M"])),
            (&p.q, &["d_M", "d_Y", "h"]),
        ],
        &lay.l(&["n", "d_Y"]),
    )?;
    Ok(AttentionTrace {
        q: None,
        k: None,
        v: None,
        j: None,
        l,
        w,
        u: None,
        o: None,
        y,
        r_xl: None,
        r_ml: None,
        r_xw: None,
        r_mw: None,
    })
}

pub fn multi_head_concise<E: Engine>(
    e: &mut E,
    x: &E::Value,
    m: &E::Value,
    p: &MultiHeadParams<E::Value>,
) -> Result<E::Value> {
    let l = e.einsum(
        "logits",
        &[
            (x, &["n", "d_X"]),
            (m, &["m", "d_M"]),
            (&p.p_q, &["d_X", "d_k", "h"]),
            (&p.p_k, &["d_M", "d_k", "h"]),
        ],
        &["n", "m", "h"],
    )?;
    let w = e.softmax(&l, "m")?;
    e.einsum(
        "output",
        &[
            (&w, &["n", "m", "h"]),
            (m, &["m", "d_M"]),
            (&p.p_v, &["d_M", "d_v", "h"]),
            (&p.p_o, &["d_Y", "d_v", "h"]),
        ],
        &["n", "d_Y"],
    )
}

pub fn talking_heads_concise<E: Engine>(
    e: &mut E,
    x: &E::Value,
    m: &E::Value,
    p: &TalkingHeadsParams<E::Value>,
) -> Result<E::Value> {
    let l = e.einsum(
        "logits",
        &[
            (x, &["n", "d_X"]),
            (m, &["m", "d_M"]),
            (&p.p_q, &["d_X", "d_k", "h_k"]),
            (&p.p_k, &["d_M", "d_k", "h_k"]),
            (&p.p_l, &["h_k", "h"]),
        ],
        &["n", "m", "h"],
    )?;
    let w = e.softmax(&l, "m")?;
    e.einsum(
        "output",
        &[
            (&w, &["n", "m", "h"]),
            (m, &["m", "d_M"]),
            (&p.p_v, &["d_M", "d_v", "h_v"]),
            (&p.p_o, &["d_Y", "d_v", "h_v"]),
            (&p.p_w, &["h", "h_v"]),
        ],
        &["n", "d_Y"],
    )
}
