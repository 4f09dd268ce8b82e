use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sizes of every dimension an attention layer can mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionDims {
    /// Number of queries.
    pub n: usize,
    /// Number of memory positions.
    pub m: usize,
    pub d_x: usize,
    pub d_m: usize,
    pub d_y: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Heads for queries and keys.
    pub h_k: usize,
    /// Heads for logits and weights.
    pub h: usize,
    /// Heads for values.
    pub h_v: usize,
}

impl AttentionDims {
    /// Dims with a single model width shared by inputs, memory and output.
    #[allow(clippy::too_many_arguments)]
    pub fn with_width(
        n: usize,
        m: usize,
        d_model: usize,
        d_k: usize,
        d_v: usize,
        h_k: usize,
        h: usize,
        h_v: usize,
    ) -> Self {
        Self {
            n,
            m,
            d_x: d_model,
            d_m: d_model,
            d_y: d_model,
            d_k,
            d_v,
            h_k,
            h,
            h_v,
        }
    }

    /// Checks positivity and the head-count equalities `variant` needs.
    pub fn validate(&self, variant: Variant) -> Result<()> {
        let all = [
            ("n", self.n),
            ("m", self.m),
            ("d_X", self.d_x),
            ("d_M", self.d_m),
            ("d_Y", self.d_y),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("h_k", self.h_k),
            ("h", self.h),
            ("h_v", self.h_v),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Dims(format!("{name} must be at least 1")));
        }
        match variant {
            Variant::MultiHead if !(self.h_k == self.h && self.h == self.h_v) => {
                Err(Error::Dims(format!(
                    "multi-head needs h_k = h = h_v, got {}/{}/{}",
                    self.h_k, self.h, self.h_v
                )))
            }
            Variant::LogitsOnly if self.h != self.h_v => Err(Error::Dims(format!(
                "logits-only needs h = h_v for the identity weights projection, got {} and {}",
                self.h, self.h_v
            ))),
            Variant::WeightsOnly if self.h_k != self.h => Err(Error::Dims(format!(
                "weights-only needs h_k = h for the identity logits projection, got {} and {}",
                self.h_k, self.h
            ))),
            _ => Ok(()),
        }
    }

    pub(crate) fn size(&self, name: &str) -> usize {
        match name {
            "n" => self.n,
            "m" => self.m,
            "d_X" => self.d_x,
            "d_M" => self.d_m,
            "d_Y" => self.d_y,
            "d_k" => self.d_k,
            "d_v" => self.d_v,
            "h_k" => self.h_k,
            "h" => self.h,
            "h_v" => self.h_v,
            other => panic!("unknown dimension {other}"),
        }
    }
}

/// One of the four input-dependent projection generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Generator {
    /// Logits projection generated from the queries' inputs `X`.
    Xl,
    /// Logits projection generated from the memory `M`.
    Ml,
    /// Weights projection generated from `X`.
    Xw,
    /// Weights projection generated from `M`.
    Mw,
}

impl Generator {
    pub const ALL: [Generator; 4] = [Generator::Xl, Generator::Ml, Generator::Xw, Generator::Mw];

    pub fn tag(self) -> &'static str {
        match self {
            Generator::Xl => "Xl",
            Generator::Ml => "Ml",
            Generator::Xw => "Xw",
            Generator::Mw => "Mw",
        }
    }

    pub fn param_name(self) -> &'static str {
        match self {
            Generator::Xl => "P_Xl",
            Generator::Ml => "P_Ml",
            Generator::Xw => "P_Xw",
            Generator::Mw => "P_Mw",
        }
    }

    /// Axis names of the generator tensor.
    pub fn signature(self) -> [&'static str; 3] {
        match self {
            Generator::Xl => ["d_X", "h_k", "h"],
            Generator::Ml => ["d_M", "h_k", "h"],
            Generator::Xw => ["d_X", "h", "h_v"],
            Generator::Mw => ["d_M", "h", "h_v"],
        }
    }
}

/// Which generators a dynamic-projection layer uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GeneratorSet {
    bits: u8,
}

impl GeneratorSet {
    pub const NONE: GeneratorSet = GeneratorSet { bits: 0 };
    pub const ALL: GeneratorSet = GeneratorSet { bits: 0b1111 };

    pub fn only(g: Generator) -> Self {
        Self::NONE.with(g)
    }

    pub fn with(self, g: Generator) -> Self {
        Self {
            bits: self.bits | 1 << g as u8,
        }
    }

    pub fn contains(self, g: Generator) -> bool {
        self.bits & (1 << g as u8) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Generator> {
        Generator::ALL
            .into_iter()
            .filter(move |&g| self.contains(g))
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }
}

impl fmt::Display for GeneratorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<&str> = self.iter().map(Generator::tag).collect();
        f.write_str(&tags.join(","))
    }
}

impl FromStr for GeneratorSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .try_fold(GeneratorSet::NONE, |set, tag| {
                let g = Generator::ALL
                    .into_iter()
                    .find(|g| g.tag().eq_ignore_ascii_case(tag))
                    .ok_or_else(|| Error::Config(format!("unknown generator `{tag}`")))?;
                Ok(set.with(g))
            })
    }
}

/// Attention algorithm selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    MultiHead,
    TalkingHeads,
    /// Talking-heads with the weights projection fixed to identity.
    LogitsOnly,
    /// Talking-heads with the logits projection fixed to identity.
    WeightsOnly,
    Dynamic(GeneratorSet),
    Gbma,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::MultiHead => f.write_str("multi-head"),
            Variant::TalkingHeads => f.write_str("talking-heads"),
            Variant::LogitsOnly => f.write_str("logits-only"),
            Variant::WeightsOnly => f.write_str("weights-only"),
            Variant::Dynamic(g) if *g == GeneratorSet::ALL => f.write_str("dynamic"),
            Variant::Dynamic(g) => write!(f, "dynamic:{g}"),
            Variant::Gbma => f.write_str("gbma"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "multi-head" => Variant::MultiHead,
            "talking-heads" => Variant::TalkingHeads,
            "logits-only" => Variant::LogitsOnly,
            "weights-only" => Variant::WeightsOnly,
            "gbma" => Variant::Gbma,
            "dynamic" => Variant::Dynamic(GeneratorSet::ALL),
            _ => match s.strip_prefix("dynamic:") {
                Some(list) => Variant::Dynamic(list.parse()?),
                None => return Err(Error::Config(format!("unknown attention variant `{s}`"))),
            },
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// `P_q[d_X, d_k, h]`, `P_k[d_M, d_k, h]`, `P_v[d_M, d_v, h]`, `P_o[d_Y, d_v, h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams<T = Tensor> {
    pub p_q: T,
    pub p_k: T,
    pub p_v: T,
    pub p_o: T,
}

/// Multi-head projections with separate query/key (`h_k`) and value (`h_v`)
/// head axes, plus `P_l[h_k, h]` on the logits and `P_w[h, h_v]` on the
/// weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TalkingHeadsParams<T = Tensor> {
    pub p_q: T,
    pub p_k: T,
    pub p_v: T,
    pub p_o: T,
    pub p_l: T,
    pub p_w: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HybridKind {
    LogitsOnly,
    WeightsOnly,
}

/// Talking-heads parameters where only one head projection is learned;
/// `projection` is `P_l` for logits-only and `P_w` for weights-only.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridParams<T = Tensor> {
    pub kind: HybridKind,
    pub p_q: T,
    pub p_k: T,
    pub p_v: T,
    pub p_o: T,
    pub projection: T,
}

/// Talking-heads parameters plus the generators of the input-dependent
/// projection terms. A disabled generator is `None` and contributes nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicProjectionParams<T = Tensor> {
    pub base: TalkingHeadsParams<T>,
    pub p_xl: Option<T>,
    pub p_ml: Option<T>,
    pub p_xw: Option<T>,
    pub p_mw: Option<T>,
}

impl<T> DynamicProjectionParams<T> {
    pub fn generator(&self, g: Generator) -> Option<&T> {
        match g {
            Generator::Xl => self.p_xl.as_ref(),
            Generator::Ml => self.p_ml.as_ref(),
            Generator::Xw => self.p_xw.as_ref(),
            Generator::Mw => self.p_mw.as_ref(),
        }
    }

    pub fn enabled(&self) -> GeneratorSet {
        Generator::ALL
            .into_iter()
            .filter(|&g| self.generator(g).is_some())
            .fold(GeneratorSet::NONE, GeneratorSet::with)
    }
}

/// `P[d_X, d_M, h]` and `Q[d_M, d_Y, h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GbmaParams<T = Tensor> {
    pub p: T,
    pub q: T,
}

/// Parameters of any variant, generic over the value type so the same
/// record can hold tensors, tape handles or shapes.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionParams<T = Tensor> {
    MultiHead(MultiHeadParams<T>),
    TalkingHeads(TalkingHeadsParams<T>),
    Hybrid(HybridParams<T>),
    Dynamic(DynamicProjectionParams<T>),
    Gbma(GbmaParams<T>),
}

const MH_SIG: [(&str, &[&str]); 4] = [
    ("P_q", &["d_X", "d_k", "h"]),
    ("P_k", &["d_M", "d_k", "h"]),
    ("P_v", &["d_M", "d_v", "h"]),
    ("P_o", &["d_Y", "d_v", "h"]),
];

/// Axis names of a named parameter tensor under `variant`.
pub(crate) fn signature(variant: Variant, name: &str) -> Option<&'static [&'static str]> {
    if variant == Variant::MultiHead {
        return MH_SIG.iter().find(|(n, _)| *n == name).map(|(_, s)| *s);
    }
    Some(match name {
        "P_q" => &["d_X", "d_k", "h_k"],
        "P_k" => &["d_M", "d_k", "h_k"],
        "P_v" => &["d_M", "d_v", "h_v"],
        "P_o" => &["d_Y", "d_v", "h_v"],
        "P_l" => &["h_k", "h"],
        "P_w" => &["h", "h_v"],
        "P_Xl" => &["d_X", "h_k", "h"],
        "P_Ml" => &["d_M", "h_k", "h"],
        "P_Xw" => &["d_X", "h", "h_v"],
        "P_Mw" => &["d_M", "h", "h_v"],
        "P" => &["d_X", "d_M", "h"],
        "Q" => &["d_M", "d_Y", "h"],
        _ => return None,
    })
}

impl<T> AttentionParams<T> {
    pub fn variant(&self) -> Variant {
        match self {
            AttentionParams::MultiHead(_) => Variant::MultiHead,
            AttentionParams::TalkingHeads(_) => Variant::TalkingHeads,
            AttentionParams::Hybrid(p) => match p.kind {
                HybridKind::LogitsOnly => Variant::LogitsOnly,
                HybridKind::WeightsOnly => Variant::WeightsOnly,
            },
            AttentionParams::Dynamic(p) => Variant::Dynamic(p.enabled()),
            AttentionParams::Gbma(_) => Variant::Gbma,
        }
    }

    /// Learned tensors by conventional name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        match self {
            AttentionParams::MultiHead(p) => {
                vec![
                    ("P_q", &p.p_q),
                    ("P_k", &p.p_k),
                    ("P_v", &p.p_v),
                    ("P_o", &p.p_o),
                ]
            }
            AttentionParams::TalkingHeads(p) => th_named(p),
            AttentionParams::Hybrid(p) => {
                let proj = match p.kind {
                    HybridKind::LogitsOnly => "P_l",
                    HybridKind::WeightsOnly => "P_w",
                };
                vec![
                    ("P_q", &p.p_q),
                    ("P_k", &p.p_k),
                    ("P_v", &p.p_v),
                    ("P_o", &p.p_o),
                    (proj, &p.projection),
                ]
            }
            AttentionParams::Dynamic(p) => {
                let mut v = th_named(&p.base);
                for g in Generator::ALL {
                    if let Some(t) = p.generator(g) {
                        v.push((g.param_name(), t));
                    }
                }
                v
            }
            AttentionParams::Gbma(p) => vec![("P", &p.p), ("Q", &p.q)],
        }
    }

    /// Rebuilds the record with every tensor passed through `f`.
    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&'static str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<AttentionParams<U>, E> {
        let mut th = |p: &TalkingHeadsParams<T>| -> std::result::Result<TalkingHeadsParams<U>, E> {
            Ok(TalkingHeadsParams {
                p_q: f("P_q", &p.p_q)?,
                p_k: f("P_k", &p.p_k)?,
                p_v: f("P_v", &p.p_v)?,
                p_o: f("P_o", &p.p_o)?,
                p_l: f("P_l", &p.p_l)?,
                p_w: f("P_w", &p.p_w)?,
            })
        };
        Ok(match self {
            AttentionParams::MultiHead(p) => AttentionParams::MultiHead(MultiHeadParams {
                p_q: f("P_q", &p.p_q)?,
                p_k: f("P_k", &p.p_k)?,
                p_v: f("P_v", &p.p_v)?,
                p_o: f("P_o", &p.p_o)?,
            }),
            AttentionParams::TalkingHeads(p) => AttentionParams::TalkingHeads(th(p)?),
            AttentionParams::Dynamic(p) => {
                let base = th(&p.base)?;
                let mut gen = |g: Generator| -> std::result::Result<Option<U>, E> {
                    p.generator(g).map(|t| f(g.param_name(), t)).transpose()
                };
                AttentionParams::Dynamic(DynamicProjectionParams {
                    base,
                    p_xl: gen(Generator::Xl)?,
                    p_ml: gen(Generator::Ml)?,
                    p_xw: gen(Generator::Xw)?,
                    p_mw: gen(Generator::Mw)?,
                })
            }
            AttentionParams::Hybrid(p) => {
                let proj = match p.kind {
                    HybridKind::LogitsOnly => "P_l",
                    HybridKind::WeightsOnly => "P_w",
                };
                AttentionParams::Hybrid(HybridParams {
                    kind: p.kind,
                    p_q: f("P_q", &p.p_q)?,
                    p_k: f("P_k", &p.p_k)?,
                    p_v: f("P_v", &p.p_v)?,
                    p_o: f("P_o", &p.p_o)?,
                    projection: f(proj, &p.projection)?,
                })
            }
            AttentionParams::Gbma(p) => AttentionParams::Gbma(GbmaParams {
                p: f("P", &p.p)?,
                q: f("Q", &p.q)?,
            }),
        })
    }
}

fn th_named<T>(p: &TalkingHeadsParams<T>) -> Vec<(&'static str, &T)> {
    vec![
        ("P_q", &p.p_q),
        ("P_k", &p.p_k),
        ("P_v", &p.p_v),
        ("P_o", &p.p_o),
        ("P_l", &p.p_l),
        ("P_w", &p.p_w),
    ]
}

impl<T> AttentionParams<T> {
    /// Assembles a record of `variant` from tensors fetched by name.
    pub fn from_named(variant: Variant, mut get: impl FnMut(&str) -> Result<T>) -> Result<Self> {
        let th = |get: &mut dyn FnMut(&str) -> Result<T>| -> Result<TalkingHeadsParams<T>> {
            Ok(TalkingHeadsParams {
                p_q: get("P_q")?,
                p_k: get("P_k")?,
                p_v: get("P_v")?,
                p_o: get("P_o")?,
                p_l: get("P_l")?,
                p_w: get("P_w")?,
            })
        };
        let params = match variant {
            Variant::MultiHead => AttentionParams::MultiHead(MultiHeadParams {
                p_q: get("P_q")?,
                p_k: get("P_k")?,
                p_v: get("P_v")?,
                p_o: get("P_o")?,
            }),
            Variant::TalkingHeads => AttentionParams::TalkingHeads(th(&mut get)?),
            Variant::LogitsOnly | Variant::WeightsOnly => {
                let (kind, proj) = if variant == Variant::LogitsOnly {
                    (HybridKind::LogitsOnly, "P_l")
                } else {
                    (HybridKind::WeightsOnly, "P_w")
                };
                AttentionParams::Hybrid(HybridParams {
                    kind,
                    p_q: get("P_q")?,
                    p_k: get("P_k")?,
                    p_v: get("P_v")?,
                    p_o: get("P_o")?,
                    projection: get(proj)?,
                })
            }
            Variant::Dynamic(set) => {
                let base = th(&mut get)?;
                let mut gen = |g: Generator| -> Result<Option<T>> {
                    if set.contains(g) {
                        get(g.param_name()).map(Some)
                    } else {
                        Ok(None)
                    }
                };
                AttentionParams::Dynamic(DynamicProjectionParams {
                    base,
                    p_xl: gen(Generator::Xl)?,
                    p_ml: gen(Generator::Ml)?,
                    p_xw: gen(Generator::Xw)?,
                    p_mw: gen(Generator::Mw)?,
                })
            }
            Variant::Gbma => AttentionParams::Gbma(GbmaParams {
                p: get("P")?,
                q: get("Q")?,
            }),
        };
        Ok(params)
    }
}

impl AttentionParams<Tensor> {
    /// Reads every dimension off the parameter tensors, checking that shared
    /// dimensions agree and that the head counts suit the variant.
    pub fn dims(&self, n: usize, m: usize) -> Result<AttentionDims> {
        let variant = self.variant();
        let mut b = DimBinder::default();
        b.bind("n", n)?;
        b.bind("m", m)?;
        for (name, t) in self.named() {
            let sig = signature(variant, name).expect("known parameter name");
            if t.rank() != sig.len() {
                return Err(Error::Dims(format!(
                    "{name} should have axes {sig:?}, found {} axes",
                    t.rank()
                )));
            }
            b.bind_all(sig, &t.sizes())?;
        }
        let get = |k: &str| b.get(k);
        let h = get("h").expect("every variant binds h");
        let dims = match variant {
            Variant::MultiHead => AttentionDims {
                n,
                m,
                d_x: get("d_X").unwrap(),
                d_m: get("d_M").unwrap(),
                d_y: get("d_Y").unwrap(),
                d_k: get("d_k").unwrap(),
                d_v: get("d_v").unwrap(),
                h_k: h,
                h,
                h_v: h,
            },
            Variant::Gbma => {
                let d_m = get("d_M").unwrap();
                AttentionDims {
                    n,
                    m,
                    d_x: get("d_X").unwrap(),
                    d_m,
                    d_y: get("d_Y").unwrap(),
                    d_k: d_m,
                    d_v: d_m,
                    h_k: h,
                    h,
                    h_v: h,
                }
            }
            _ => AttentionDims {
                n,
                m,
                d_x: get("d_X").unwrap(),
                d_m: get("d_M").unwrap(),
                d_y: get("d_Y").unwrap(),
                d_k: get("d_k").unwrap(),
                d_v: get("d_v").unwrap(),
                h_k: get("h_k").unwrap(),
                h,
                h_v: get("h_v").unwrap(),
            },
        };
        dims.validate(variant)?;
        Ok(dims)
    }

    pub fn parameter_count(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.len() as u64).sum()
    }
}

/// Accumulates named dimension sizes and reports the first disagreement.
#[derive(Debug, Default)]
pub(crate) struct DimBinder {
    sizes: BTreeMap<String, usize>,
}

impl DimBinder {
    pub fn bind(&mut self, name: &str, size: usize) -> Result<()> {
        match self.sizes.get(name) {
            Some(&s) if s != size => Err(Error::Dims(format!(
                "dimension {name} is {s} in one place and {size} in another"
            ))),
            _ => {
                self.sizes.insert(name.to_string(), size);
                Ok(())
            }
        }
    }

    pub fn bind_all(&mut self, names: &[&str], sizes: &[usize]) -> Result<()> {
        if names.len() != sizes.len() {
            return Err(Error::Dims(format!(
                "expected axes {names:?}, found {} axes",
                sizes.len()
            )));
        }
        names
            .iter()
            .zip(sizes)
            .try_for_each(|(n, s)| self.bind(n, *s))
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.sizes.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::MultiHead,
            Variant::TalkingHeads,
            Variant::LogitsOnly,
            Variant::WeightsOnly,
            Variant::Gbma,
            Variant::Dynamic(GeneratorSet::ALL),
            Variant::Dynamic(GeneratorSet::only(Generator::Ml).with(Generator::Xw)),
            Variant::Dynamic(GeneratorSet::NONE),
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("four-heads".parse::<Variant>().is_err());
        assert!("dynamic:Xq".parse::<Variant>().is_err());
    }

    #[test]
    fn head_count_rules() {
        let d = AttentionDims::with_width(2, 2, 4, 2, 2, 2, 3, 3);
        assert!(d.validate(Variant::TalkingHeads).is_ok());
        assert!(d.validate(Variant::MultiHead).is_err());
        assert!(d.validate(Variant::LogitsOnly).is_ok());
        assert!(d.validate(Variant::WeightsOnly).is_err());
        let zero = AttentionDims { d_k: 0, ..d };
        assert!(zero.validate(Variant::TalkingHeads).is_err());
    }
}
