//! Parameter and multiply accounting for attention layers.
//!
//! Two independent counts are kept: closed-form polynomials in the layer
//! dimensions, and a tally of the einsums the step-by-step algorithms
//! actually issue (run on the [`Symbolic`] engine, so no data is touched).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::params::signature;
use crate::attention::{attend, AttentionDims, AttentionParams, Generator, Layout, Variant};
use crate::engine::{Shape, Symbolic};
use crate::error::{Error, Result};
use crate::tensor::Axis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub dims: AttentionDims,
    /// Dynamic variants carry their enabled generators.
    pub variant: Variant,
}

impl CostQuery {
    pub fn new(variant: Variant, dims: AttentionDims) -> Self {
        Self { dims, variant }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub per_einsum: Vec<(String, u64)>,
    pub schedule_total: u64,
    /// Absent for GBMA, which has no closed form.
    pub closed_form_total: Option<u64>,
    pub parameter_count: u64,
}

impl CostReport {
    /// Closed form where one exists, schedule tally otherwise.
    pub fn multiplies(&self) -> u64 {
        self.closed_form_total.unwrap_or(self.schedule_total)
    }
}

/// Multiplies per layer from the closed forms.
///
/// Multi-head: `h (d_k + d_v)(n d_X + m d_M + n m)`. Talking-heads:
/// `(d_k h_k + d_v h_v)(n d_X + m d_M + n m) + n m h (h_k + h_v)`. Both take
/// `d_Y = d_X`. Hybrids pay only for their one projection. Dynamic variants
/// add `n d_X h_k h`, `m d_M h_k h`, `n d_X h h_v`, `m d_M h h_v` for each
/// enabled generator and count the static and generated head projections as
/// one fused application.
pub fn multiplies_closed_form(q: &CostQuery) -> Result<u64> {
    q.dims.validate(q.variant)?;
    let d = dims_u64(&q.dims);
    let [n, m, dx, dm, _, dk, dv, hk, h, hv] = d;
    let base = |hk: u64, hv: u64| (dk * hk + dv * hv) * (n * dx + m * dm + n * m);
    Ok(match q.variant {
        Variant::MultiHead => h * (dk + dv) * (n * dx + m * dm + n * m),
        Variant::TalkingHeads => base(hk, hv) + n * m * h * (hk + hv),
        Variant::LogitsOnly => base(hk, h) + n * m * h * hk,
        Variant::WeightsOnly => base(h, hv) + n * m * h * hv,
        Variant::Dynamic(set) => {
            let gen: u64 = set
                .iter()
                .map(|g| match g {
                    Generator::Xl => n * dx * hk * h,
                    Generator::Ml => m * dm * hk * h,
                    Generator::Xw => n * dx * h * hv,
                    Generator::Mw => m * dm * h * hv,
                })
                .sum();
            base(hk, hv) + n * m * h * (hk + hv) + gen
        }
        Variant::Gbma => return Err(Error::ScheduleOnly("GBMA".into())),
    })
}

/// Total element count of the variant's parameter tensors.
pub fn parameter_count(q: &CostQuery) -> u64 {
    parameter_shapes(q)
        .iter()
        .map(|(_, s)| s.0.iter().map(|a| a.size as u64).product::<u64>())
        .sum()
}

/// Runs the variant's step-by-step algorithm on shapes alone and tallies
/// every einsum. Dynamic variants are tallied naively here (each generated
/// projection applied by its own einsum), so for them the schedule exceeds
/// the fused closed form.
pub fn multiplies_schedule(q: &CostQuery) -> Result<CostReport> {
    q.dims.validate(q.variant)?;
    let d = &q.dims;
    let shapes = parameter_shapes(q);
    let mut it = shapes.into_iter();
    let params = AttentionParams::from_named(q.variant, |_| {
        Ok(it.next().expect("one shape per parameter").1)
    })?;
    let x = Shape::new(&[("n", d.n), ("d_X", d.d_x)]);
    let m = Shape::new(&[("m", d.m), ("d_M", d.d_m)]);
    let mut engine = Symbolic::new();
    attend(&mut engine, Layout::default(), &x, &m, &params)?;
    let per_einsum = engine.counter.into_records();
    let closed_form_total = match multiplies_closed_form(q) {
        Ok(v) => Some(v),
        Err(Error::ScheduleOnly(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CostReport {
        schedule_total: per_einsum.iter().map(|(_, v)| v).sum(),
        per_einsum,
        closed_form_total,
        parameter_count: parameter_count(q),
    })
}

/// Writes one comma-separated row per query, after a header row.
pub fn emit_cost_table(queries: &[CostQuery], sink: &mut impl Write) -> Result<()> {
    writeln!(
        sink,
        "variant,h_k,h,h_v,d_k,d_v,params,multiplies_raw,multiplies_sci"
    )?;
    for q in queries {
        let r = multiplies_schedule(q)?;
        let d = &q.dims;
        writeln!(
            sink,
            "{},{},{},{},{},{},{},{},{}",
            q.variant,
            d.h_k,
            d.h,
            d.h_v,
            d.d_k,
            d.d_v,
            r.parameter_count,
            r.multiplies(),
            format_sci(r.multiplies())
        )?;
    }
    Ok(())
}

/// `1610612736` -> `1.611·10⁹`.
pub fn format_sci(v: u64) -> String {
    if v == 0 {
        return "0.000·10⁰".into();
    }
    let mut exp = (v as f64).log10().floor() as i32;
    let mut mantissa = v as f64 / 10f64.powi(exp);
    // Rounding can carry into the next decade (9.9996 -> 10.000).
    if (mantissa * 1000.0).round() >= 10_000.0 {
        exp += 1;
        mantissa /= 10.0;
    }
    const SUP: [char; 10] = ['⁰', '¹', '²', '³', '⁴', '⁵', '⁶', '⁷', '⁸', '⁹'];
    let sup: String = exp
        .to_string()
        .chars()
        .map(|c| SUP[c.to_digit(10).unwrap() as usize])
        .collect();
    format!("{mantissa:.3}·10{sup}")
}

fn dims_u64(d: &AttentionDims) -> [u64; 10] {
    [
        d.n, d.m, d.d_x, d.d_m, d.d_y, d.d_k, d.d_v, d.h_k, d.h, d.h_v,
    ]
    .map(|v| v as u64)
}

/// Parameter shapes in the order `AttentionParams::named` lists them.
fn parameter_shapes(q: &CostQuery) -> Vec<(&'static str, Shape)> {
    let names: Vec<&'static str> = match q.variant {
        Variant::MultiHead => vec!["P_q", "P_k", "P_v", "P_o"],
        Variant::TalkingHeads => vec!["P_q", "P_k", "P_v", "P_o", "P_l", "P_w"],
        Variant::LogitsOnly => vec!["P_q", "P_k", "P_v", "P_o", "P_l"],
        Variant::WeightsOnly => vec!["P_q", "P_k", "P_v", "P_o", "P_w"],
        Variant::Dynamic(set) => {
            let mut v = vec!["P_q", "P_k", "P_v", "P_o", "P_l", "P_w"];
            v.extend(set.iter().map(|g| g.param_name()));
            v
        }
        Variant::Gbma => vec!["P", "Q"],
    };
    names
        .into_iter()
        .map(|name| {
            let sig = signature(q.variant, name).expect("known parameter");
            let axes = sig.iter().map(|a| Axis::new(*a, q.dims.size(a))).collect();
            (name, Shape(axes))
        })
        .collect()
}

/// Named preset sweeps reproducing the paper's configuration rows.
pub mod presets {
    use super::CostQuery;
    use crate::attention::{AttentionDims, Generator, GeneratorSet, Variant};

    pub const NAMES: [&str; 5] = ["table1", "table2", "table3", "table6", "table7"];

    const N: usize = 512;
    const WIDTH: usize = 768;

    fn q(variant: Variant, [hk, h, hv]: [usize; 3], [dk, dv]: [usize; 2]) -> CostQuery {
        CostQuery::new(
            variant,
            AttentionDims::with_width(N, N, WIDTH, dk, dv, hk, h, hv),
        )
    }

    fn mh(h: usize, d: usize) -> CostQuery {
        q(Variant::MultiHead, [h; 3], [d, d])
    }

    fn th(heads: [usize; 3], dk: usize, dv: usize) -> CostQuery {
        q(Variant::TalkingHeads, heads, [dk, dv])
    }

    fn dynamic(set: GeneratorSet, h: usize, d: usize) -> CostQuery {
        q(Variant::Dynamic(set), [h; 3], [d, d])
    }

    pub fn get(name: &str) -> Option<Vec<CostQuery>> {
        Some(match name {
            "table1" => vec![
                mh(6, 128),
                mh(12, 64),
                mh(24, 32),
                mh(48, 16),
                th([6; 3], 128, 128),
                th([12; 3], 64, 64),
                th([24; 3], 32, 32),
                th([48; 3], 16, 16),
                mh(24, 64),
                q(Variant::Gbma, [12; 3], [WIDTH, WIDTH]),
            ],
            "table2" => vec![
                th([6, 6, 6], 128, 128),
                th([6, 24, 6], 128, 128),
                th([24, 6, 24], 32, 32),
                th([6, 24, 24], 128, 32),
                th([24, 24, 6], 32, 128),
                th([24, 24, 24], 32, 32),
            ],
            "table3" => vec![
                mh(24, 32),
                q(Variant::LogitsOnly, [24; 3], [32, 32]),
                q(Variant::WeightsOnly, [24; 3], [32, 32]),
                th([24; 3], 32, 32),
            ],
            "table6" => vec![
                mh(12, 64),
                th([12; 3], 64, 64),
                dynamic(GeneratorSet::ALL, 12, 64),
                mh(24, 32),
                th([24; 3], 32, 32),
                dynamic(GeneratorSet::ALL, 24, 32),
            ],
            "table7" => vec![
                th([12; 3], 64, 64),
                dynamic(GeneratorSet::only(Generator::Xl), 12, 64),
                dynamic(GeneratorSet::only(Generator::Xw), 12, 64),
                dynamic(GeneratorSet::only(Generator::Ml), 12, 64),
                dynamic(GeneratorSet::only(Generator::Mw), 12, 64),
                dynamic(GeneratorSet::ALL, 12, 64),
            ],
            _ => return None,
        })
    }
}
