use crate::error::Result;
use crate::rng::{normal_init, Rng};
use crate::tensor::{self, Tensor};

use super::params::{
    signature, AttentionDims, AttentionParams, DynamicProjectionParams, GbmaParams, Generator,
    HybridKind, HybridParams, MultiHeadParams, TalkingHeadsParams, Variant,
};

/// Default std of the noise added to the identity head projections.
pub const PROJECTION_NOISE_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    /// Std of the normal noise added to the identity `P_l` / `P_w`. Zero
    /// leaves them exactly identity.
    pub projection_noise_std: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            projection_noise_std: PROJECTION_NOISE_STD,
        }
    }
}

pub fn init_params(variant: Variant, dims: &AttentionDims, rng: &Rng) -> Result<AttentionParams> {
    init_params_with(variant, dims, rng, InitOptions::default())
}

/// Random parameters for `variant`.
///
/// `P_q`, `P_k`, `P_v`, `P_o` are normal with std `1/sqrt(fan_in)`, where
/// fan-in is the contracted input width (`d_v * h_v` for `P_o`). `P_q` is
/// further scaled by `1/sqrt(d_k)`, which stands in for the usual runtime
/// logit scaling. Head projections start at the (zero-padded) identity plus
/// noise. Dynamic generators use std `0.1/sqrt(d * h')` with `d` the input
/// width they read and `h'` their first head axis. GBMA tensors get the std
/// their factored multi-head counterpart would have.
///
/// Each tensor draws from its own stream, forked from `rng` by name.
pub fn init_params_with(
    variant: Variant,
    dims: &AttentionDims,
    rng: &Rng,
    opts: InitOptions,
) -> Result<AttentionParams> {
    dims.validate(variant)?;
    let d = |name: &str| dims.size(name);
    let draw = |name: &str, std: f64| -> Result<Tensor> {
        let sig = signature(variant, name).expect("known parameter");
        let axes = sig.iter().map(|a| tensor::Axis::new(*a, d(a))).collect();
        normal_init(axes, std, &mut rng.fork(name))
    };
    let head_proj = |name: &str, rows: &str, cols: &str| -> Result<Tensor> {
        let eye = Tensor::eye(rows, d(rows), cols, d(cols))?;
        let noise = normal_init(
            eye.axes().to_vec(),
            opts.projection_noise_std,
            &mut rng.fork(name),
        )?;
        tensor::add(&eye, &noise)
    };
    let inv_sqrt = |x: usize| 1.0 / (x as f64).sqrt();

    let h_v_out = if variant == Variant::MultiHead {
        dims.h
    } else {
        dims.h_v
    };
    let four = || -> Result<[Tensor; 4]> {
        Ok([
            draw("P_q", inv_sqrt(dims.d_x) * inv_sqrt(dims.d_k))?,
            draw("P_k", inv_sqrt(dims.d_m))?,
            draw("P_v", inv_sqrt(dims.d_m))?,
            draw("P_o", inv_sqrt(dims.d_v * h_v_out))?,
        ])
    };

    Ok(match variant {
        Variant::MultiHead => {
            let [p_q, p_k, p_v, p_o] = four()?;
            AttentionParams::MultiHead(MultiHeadParams { p_q, p_k, p_v, p_o })
        }
        Variant::TalkingHeads | Variant::Dynamic(_) => {
            let [p_q, p_k, p_v, p_o] = four()?;
            let base = TalkingHeadsParams {
                p_q,
                p_k,
                p_v,
                p_o,
                p_l: head_proj("P_l", "h_k", "h")?,
                p_w: head_proj("P_w", "h", "h_v")?,
            };
            match variant {
                Variant::Dynamic(set) => {
                    let gen = |g: Generator| -> Result<Option<Tensor>> {
                        if !set.contains(g) {
                            return Ok(None);
                        }
                        let [input, heads, _] = g.signature();
                        draw(g.param_name(), 0.1 * inv_sqrt(d(input) * d(heads))).map(Some)
                    };
                    AttentionParams::Dynamic(DynamicProjectionParams {
                        base,
                        p_xl: gen(Generator::Xl)?,
                        p_ml: gen(Generator::Ml)?,
                        p_xw: gen(Generator::Xw)?,
                        p_mw: gen(Generator::Mw)?,
                    })
                }
                _ => AttentionParams::TalkingHeads(base),
            }
        }
        Variant::LogitsOnly | Variant::WeightsOnly => {
            let [p_q, p_k, p_v, p_o] = four()?;
            let (kind, projection) = if variant == Variant::LogitsOnly {
                (HybridKind::LogitsOnly, head_proj("P_l", "h_k", "h")?)
            } else {
                (HybridKind::WeightsOnly, head_proj("P_w", "h", "h_v")?)
            };
            AttentionParams::Hybrid(HybridParams {
                kind,
                p_q,
                p_k,
                p_v,
                p_o,
                projection,
            })
        }
        Variant::Gbma => AttentionParams::Gbma(GbmaParams {
            p: draw("P", inv_sqrt(dims.d_x * dims.d_m))?,
            q: draw("Q", inv_sqrt(dims.d_m * dims.h))?,
        }),
    })
}
