use serde::{Deserialize, Serialize};

use super::corpus::Batch;
use super::masking::{Masked, Target};
use crate::attention::{
    attend, init_params_with, AttentionDims, AttentionParams, InitOptions, Layout, Variant,
    PROJECTION_NOISE_STD,
};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_init, Rng};
use crate::tensor::{axes, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_noise() -> f64 {
    PROJECTION_NOISE_STD
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub d_k: usize,
    pub d_v: usize,
    pub h_k: usize,
    pub h: usize,
    pub h_v: usize,
    /// Std of the noise around identity head projections; 0 keeps them
    /// exactly identity at initialization.
    #[serde(default = "default_noise")]
    pub projection_noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub attention: AttentionConfig,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Attention dims for self-attention over `seq_len` positions.
    pub fn attention_dims(&self, seq_len: usize) -> AttentionDims {
        let a = &self.attention;
        AttentionDims::with_width(
            seq_len,
            seq_len,
            self.d_model,
            a.d_k,
            a.d_v,
            a.h_k,
            a.h,
            a.h_v,
        )
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "layers, d_model and d_ff must be at least 1".into(),
            ));
        }
        if self.attention.projection_noise_std < 0.0 {
            return Err(Error::NegativeStd(self.attention.projection_noise_std));
        }
        self.attention_dims(seq_len)
            .validate(self.attention.variant)
    }
}

/// Encoder-only transformer: token and learned position embeddings, pre-norm
/// layers of attention and a ReLU feed-forward block (each wrapped in a
/// residual), a final norm, and logits against the (tied) embedding.
/// Norms carry a gain and no bias; nothing has a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    vocab_size: usize,
    seq_len: usize,
    params: Vec<(String, Tensor)>,
}

fn attn_name(layer: usize, name: &str) -> String {
    format!("layer{layer}.attn.{name}")
}

impl Model {
    pub fn init(
        config: &ModelConfig,
        vocab_size: usize,
        seq_len: usize,
        rng: &Rng,
    ) -> Result<Self> {
        config.validate(seq_len)?;
        let d = config.d_model;
        let inv_sqrt = |x: usize| 1.0 / (x as f64).sqrt();
        let draw = |name: &str, spec: &[(&str, usize)], std: f64| -> Result<(String, Tensor)> {
            Ok((
                name.to_string(),
                normal_init(axes(spec), std, &mut rng.fork(name))?,
            ))
        };
        let gain = |name: String| -> Result<(String, Tensor)> {
            Ok((name, Tensor::filled(axes(&[("d", d)]), 1.0)?))
        };

        let mut params = vec![
            draw("embed", &[("vocab", vocab_size), ("d", d)], inv_sqrt(d))?,
            draw("pos", &[("pos", seq_len), ("d", d)], 0.1)?,
        ];
        let dims = config.attention_dims(seq_len);
        let opts = InitOptions {
            projection_noise_std: config.attention.projection_noise_std,
        };
        for i in 0..config.layers {
            params.push(gain(format!("layer{i}.norm1"))?);
            let attn = init_params_with(
                config.attention.variant,
                &dims,
                &rng.fork(&format!("layer{i}.attn")),
                opts,
            )?;
            for (name, t) in attn.named() {
                params.push((attn_name(i, name), t.clone()));
            }
            params.push(gain(format!("layer{i}.norm2"))?);
            params.push(draw(
                &format!("layer{i}.ff_in"),
                &[("d", d), ("f", config.d_ff)],
                inv_sqrt(d),
            )?);
            params.push(draw(
                &format!("layer{i}.ff_out"),
                &[("f", config.d_ff), ("d", d)],
                inv_sqrt(config.d_ff),
            )?);
        }
        params.push(gain("final_norm".into())?);
        if !config.tie_embeddings {
            params.push(draw(
                "unembed",
                &[("vocab", vocab_size), ("d", d)],
                inv_sqrt(d),
            )?);
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            seq_len,
            params,
        })
    }

    /// Rebuilds a model from stored tensors, which must match the names and
    /// shapes `init` would produce.
    pub fn from_params(
        config: &ModelConfig,
        vocab_size: usize,
        seq_len: usize,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let template = Self::init(config, vocab_size, seq_len, &Rng::new(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((en, et), (n, t)) in template.params.iter().zip(&params) {
            if en != n || et.axes() != t.axes() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{n}` {:?} does not match expected `{en}` {:?}",
                    t.axes(),
                    et.axes()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            seq_len,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// The attention parameters of layer `layer`.
    pub fn attention_params(&self, layer: usize) -> Result<AttentionParams> {
        if layer >= self.config.layers {
            return Err(Error::Config(format!(
                "layer {layer} out of range (model has {})",
                self.config.layers
            )));
        }
        AttentionParams::from_named(self.config.attention.variant, |name| {
            self.param(&attn_name(layer, name))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing {}", attn_name(layer, name))))
        })
    }

    /// Puts every parameter on the tape as a leaf, in `params()` order, and
    /// runs the forward pass.
    pub fn forward(&self, tape: &mut Tape, inputs: &Batch) -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(n, t)| tape.leaf(n, t.clone()))
            .collect();
        let logits = self.forward_with(tape, &vars, inputs)?;
        Ok((vars, logits))
    }

    /// Forward pass with parameters already on the tape (`vars` in
    /// `params()` order). Returns logits on axes `[b, n, vocab]`.
    pub fn forward_with(&self, tape: &mut Tape, vars: &[Var], inputs: &Batch) -> Result<Var> {
        let rows = inputs.len();
        if rows == 0 || inputs.iter().any(|r| r.len() != self.seq_len) {
            return Err(Error::Shape(format!(
                "inputs must be non-empty rows of length {}",
                self.seq_len
            )));
        }
        if let Some(&bad) = inputs.iter().flatten().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Shape(format!(
                "token {bad} outside vocab of {}",
                self.vocab_size
            )));
        }
        let p = |name: &str| -> Var {
            let k = self
                .params
                .iter()
                .position(|(n, _)| n == name)
                .expect("known parameter");
            vars[k]
        };
        let (b, n, v) = (rows, self.seq_len, self.vocab_size);
        let tokens = Tensor::from_fn(axes(&[("b", b), ("n", n), ("vocab", v)]), |i| {
            (inputs[i[0]][i[1]] == i[2]) as u8 as f64
        })?;
        let positions = Tensor::from_fn(axes(&[("b", b), ("n", n), ("pos", n)]), |i| {
            (i[1] == i[2]) as u8 as f64
        })?;
        let tokens = tape.constant("tokens", tokens);
        let positions = tape.constant("positions", positions);

        const BND: &[&str] = &["b", "n", "d"];
        let te = tape.einsum(
            "embed",
            &[
                (tokens, &["b", "n", "vocab"]),
                (p("embed"), &["vocab", "d"]),
            ],
            BND,
        )?;
        let pe = tape.einsum(
            "pos-embed",
            &[(positions, &["b", "n", "pos"]), (p("pos"), &["pos", "d"])],
            BND,
        )?;
        let mut x = tape.add(te, pe)?;

        let norm = |tape: &mut Tape, x: Var, gain: Var| -> Result<Var> {
            let z = tape.layer_norm(x, "d", LAYER_NORM_EPS)?;
            tape.einsum("norm-gain", &[(z, BND), (gain, &["d"])], BND)
        };
        for i in 0..self.config.layers {
            let a = norm(tape, x, p(&format!("layer{i}.norm1")))?;
            let attn = AttentionParams::from_named(self.config.attention.variant, |name| {
                Ok(p(&attn_name(i, name)))
            })?;
            let y = attend(tape, Layout::batched("b"), &a, &a, &attn)?.y;
            let y = tape.einsum("attn-out", &[(y, BND)], BND)?;
            x = tape.add(x, y)?;

            let f = norm(tape, x, p(&format!("layer{i}.norm2")))?;
            let f = tape.einsum(
                "ff-in",
                &[(f, BND), (p(&format!("layer{i}.ff_in")), &["d", "f"])],
                &["b", "n", "f"],
            )?;
            let f = tape.relu(f);
            let f = tape.einsum(
                "ff-out",
                &[
                    (f, &["b", "n", "f"]),
                    (p(&format!("layer{i}.ff_out")), &["f", "d"]),
                ],
                BND,
            )?;
            x = tape.add(x, f)?;
        }
        let x = norm(tape, x, p("final_norm"))?;
        let out = if self.config.tie_embeddings {
            p("embed")
        } else {
            p("unembed")
        };
        tape.einsum(
            "unembed",
            &[(x, BND), (out, &["vocab", "d"])],
            &["b", "n", "vocab"],
        )
    }
}

/// Mean cross-entropy of `logits[b, n, vocab]` at the target positions.
pub fn masked_cross_entropy(tape: &mut Tape, logits: Var, targets: &[Target]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let lp = tape.log_softmax(logits, "vocab")?;
    let mut weights = Tensor::zeros(tape.value(lp).axes().to_vec())?;
    let w = -1.0 / targets.len() as f64;
    for t in targets {
        weights.set(&[t.row, t.pos, t.token], w);
    }
    let weights = tape.constant("target-weights", weights);
    const BNV: &[&str] = &["b", "n", "vocab"];
    tape.einsum("cross-entropy", &[(lp, BNV), (weights, BNV)], &[])
}

/// Fraction of targets whose arg-max logit is the original token.
pub fn masked_accuracy(logits: &Tensor, targets: &[Target]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let v = logits.sizes()[2];
    let hits = targets
        .iter()
        .filter(|t| {
            let best = (0..v)
                .max_by(|&a, &b| {
                    logits
                        .get(&[t.row, t.pos, a])
                        .total_cmp(&logits.get(&[t.row, t.pos, b]))
                })
                .unwrap();
            best == t.token
        })
        .count();
    hits as f64 / targets.len() as f64
}

/// Loss and accuracy on one masked batch, without gradients.
pub fn evaluate(model: &Model, masked: &Masked) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (_, logits) = model.forward(&mut tape, &masked.inputs)?;
    let loss = masked_cross_entropy(&mut tape, logits, &masked.targets)?;
    Ok((
        tape.value(loss).item()?,
        masked_accuracy(tape.value(logits), &masked.targets),
    ))
}
